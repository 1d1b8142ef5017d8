//! Desk-scale mixture-of-experts network and synthetic specialization task.

mod network;
mod task;

pub use network::{
    mse_loss, route, silu, ExpertGrads, Gradients, LayerGrads, MoeBlock, MoeConfig, MoeNetwork, ParamKind,
    RoutingTrace, TokenIntensity, PROJECTIONS,
};
pub use task::{Batch, SyntheticTaskGen, TaskConfig};
