//! Post-hoc diagnostics over trained networks and run logs.

mod covariance;
mod evolution;
mod flops;
mod gini;
mod masking;

pub use covariance::{accumulate_history, covariance_gap, CovarianceAccumulator, CovarianceGap, GAP_EPSILON};
pub use evolution::{export_rank_evolution, rank_matrix_csv, replay_rank_evolution, RankSnapshot};
pub use flops::{flops_model, FlopsReport};
pub use gini::{gini, gini_pairwise};
pub use masking::{masking_experiment, select_masked_experts, MaskRule, MaskedNetwork, MaskingReport, MaskingSpec};
