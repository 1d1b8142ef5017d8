use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub base_gflops: f64,
    pub lora_gflops: f64,
    pub total_gflops: f64,
    /// Total relative to the adapter-free model.
    pub ratio: f64,
}

/// Analytic forward cost of the expert layers: `4BLK·d_m·d_e` for the base
/// projections and `8BLK·d_e·r` for rank-`r` adapters on both projections.
pub fn flops_model(batch_tokens: u64, layers: u64, top_k: u64, d_model: u64, d_expert: u64, rank: u64) -> FlopsReport {
    let blk = (batch_tokens * layers * top_k) as f64;
    let base_gflops = 4.0 * blk * d_model as f64 * d_expert as f64 / 1e9;
    let lora_gflops = 8.0 * blk * d_expert as f64 * rank as f64 / 1e9;
    let total_gflops = base_gflops + lora_gflops;
    let ratio = if base_gflops > 0.0 { total_gflops / base_gflops } else { 1.0 };
    FlopsReport {
        base_gflops,
        lora_gflops,
        total_gflops,
        ratio,
    }
}
