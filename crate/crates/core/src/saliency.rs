//! Expert saliency statistics.
//!
//! Per (layer, expert) the tracker keeps
//!
//! - `f`: EMA of the batch-mean post-top-k routing weight,
//! - `g_j`: per-rank-dimension EMA of the gradient-weight sensitivity
//!   `‖∂L/∂a_j ⊙ a_j‖₁ · ‖∂L/∂b_j ⊙ b_j‖₁` (summed over both projections),
//!
//! and scores each expert as `S = f · g / (r + 1)^γ` where `g` is the mean of
//! `g_j` over the active dimensions.
//!
//! Both EMAs start at zero without bias correction.

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterGrads, MaskedLoraAdapter};
use crate::error::{Error, Result};
use crate::model::{ExpertGrads, Gradients, MoeNetwork, RoutingTrace};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaliencyConfig {
    /// EMA decay `β ∈ [0, 1)`.
    pub beta: f64,
    /// Rank penalty exponent `γ ≥ 0`.
    pub gamma: f64,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self { beta: 0.9, gamma: 1.2 }
    }
}

impl SaliencyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::config("saliency.beta", format!("must lie in [0, 1), got {}", self.beta)));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::config("saliency.gamma", format!("must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertStatistics {
    config: SaliencyConfig,
    layers: usize,
    experts: usize,
    r_max: usize,
    frequency: Vec<f64>,
    importance: Vec<f64>,
    steps: u64,
}

/// Batch-mean post-top-k weight `z̄` per (layer, expert), unselected tokens
/// counting as zero.
pub fn batch_mean_weight(trace: &RoutingTrace) -> Result<Vec<Vec<f64>>> {
    if trace.tokens() == 0 {
        return Err(Error::Input("routing trace has no tokens".into()));
    }
    Ok(trace.batch_mean())
}

/// `‖grad_a ⊙ a‖₁ · ‖grad_b ⊙ b‖₁` for one rank dimension.
pub fn rank_sensitivity(a_row: &[f64], a_grad_row: &[f64], b_col: &[f64], b_grad_col: &[f64]) -> f64 {
    let a_side: f64 = a_row.iter().zip(a_grad_row).map(|(w, g)| (w * g).abs()).sum();
    if a_side == 0.0 {
        return 0.0;
    }
    let b_side: f64 = b_col.iter().zip(b_grad_col).map(|(w, g)| (w * g).abs()).sum();
    a_side * b_side
}

/// Sensitivity of rank dimension `j` of one adapter.
pub fn adapter_dim_sensitivity(adapter: &MaskedLoraAdapter, grads: &AdapterGrads, j: usize) -> Result<f64> {
    if !adapter.mask().get(j).copied().unwrap_or(false) {
        return Err(Error::State(format!("rank dimension {j} is not active")));
    }
    let b_col: Vec<f64> = (0..adapter.b().rows()).map(|o| adapter.b().get(o, j)).collect();
    let gb_col: Vec<f64> = (0..grads.b.rows()).map(|o| grads.b.get(o, j)).collect();
    Ok(rank_sensitivity(adapter.a().row(j), grads.a.row(j), &b_col, &gb_col))
}

/// Per-dimension sensitivity of an expert (length `r_max`, zero on inactive
/// dimensions), summed over its up and down projections.
pub fn expert_sensitivities(
    expert: &crate::model::MoeBlock,
    index: usize,
    grads: &ExpertGrads,
) -> Result<Vec<f64>> {
    let e = &expert.experts[index];
    let mut out = vec![0.0; e.up.limits().r_max];
    for j in e.up.active_dims() {
        out[j] = adapter_dim_sensitivity(&e.up, &grads.up, j)? + adapter_dim_sensitivity(&e.down, &grads.down, j)?;
    }
    Ok(out)
}

/// Sensitivities for every expert of the network, indexed `[layer][expert][dim]`.
pub fn network_sensitivities(net: &MoeNetwork, grads: &Gradients) -> Result<Vec<Vec<Vec<f64>>>> {
    net.blocks
        .iter()
        .zip(&grads.layers)
        .map(|(block, lg)| {
            (0..block.experts.len())
                .map(|i| expert_sensitivities(block, i, &lg.experts[i]))
                .collect()
        })
        .collect()
}

/// `f · g / (r + 1)^γ`.
pub fn saliency_score(f: f64, g: f64, r: usize, gamma: f64) -> f64 {
    if f == 0.0 || g == 0.0 {
        return 0.0;
    }
    f * g / ((r + 1) as f64).powf(gamma)
}

impl ExpertStatistics {
    pub fn new(config: SaliencyConfig, layers: usize, experts: usize, r_max: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            layers,
            experts,
            r_max,
            frequency: vec![0.0; layers * experts],
            importance: vec![0.0; layers * experts * r_max],
            steps: 0,
        })
    }

    /// Restores a tracker from stored tables.
    pub fn from_parts(
        config: SaliencyConfig,
        layers: usize,
        experts: usize,
        r_max: usize,
        frequency: Vec<f64>,
        importance: Vec<f64>,
        steps: u64,
    ) -> Result<Self> {
        let mut stats = Self::new(config, layers, experts, r_max)?;
        if frequency.len() != stats.frequency.len() || importance.len() != stats.importance.len() {
            return Err(Error::shape("statistics tables do not match layers × experts × r_max"));
        }
        stats.frequency = frequency;
        stats.importance = importance;
        stats.steps = steps;
        Ok(stats)
    }

    pub fn config(&self) -> SaliencyConfig {
        self.config
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.layers, self.experts, self.r_max)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn frequency_table(&self) -> &[f64] {
        &self.frequency
    }

    pub fn importance_table(&self) -> &[f64] {
        &self.importance
    }

    fn check(&self, layer: usize, expert: usize) -> Result<()> {
        if layer >= self.layers || expert >= self.experts {
            return Err(Error::Input(format!(
                "no statistics for layer {layer}, expert {expert} ({}x{} tracked)",
                self.layers, self.experts
            )));
        }
        Ok(())
    }

    pub fn frequency(&self, layer: usize, expert: usize) -> Result<f64> {
        self.check(layer, expert)?;
        Ok(self.frequency[layer * self.experts + expert])
    }

    pub fn dim_importance(&self, layer: usize, expert: usize) -> Result<&[f64]> {
        self.check(layer, expert)?;
        let off = (layer * self.experts + expert) * self.r_max;
        Ok(&self.importance[off..off + self.r_max])
    }

    /// `f ← β f + (1 − β) z̄`.
    pub fn update_frequency(&mut self, zbar: &[Vec<f64>]) -> Result<()> {
        if zbar.len() != self.layers || zbar.iter().any(|r| r.len() != self.experts) {
            return Err(Error::shape("z̄ must be layers × experts"));
        }
        let beta = self.config.beta;
        for (f, &z) in self.frequency.iter_mut().zip(zbar.iter().flatten()) {
            *f = beta * *f + (1.0 - beta) * z;
        }
        self.steps += 1;
        Ok(())
    }

    /// `g_j ← β g_j + (1 − β) s_j` on the active dimensions of one expert.
    pub fn update_rank_importance(&mut self, layer: usize, expert: usize, mask: &[bool], s: &[f64]) -> Result<()> {
        self.check(layer, expert)?;
        if mask.len() != self.r_max || s.len() != self.r_max {
            return Err(Error::shape("mask and sensitivities must have r_max entries"));
        }
        if mask.iter().zip(s).any(|(&m, &v)| !m && v != 0.0) {
            return Err(Error::State("sensitivity reported for an inactive rank dimension".into()));
        }
        let beta = self.config.beta;
        let off = (layer * self.experts + expert) * self.r_max;
        for j in 0..self.r_max {
            if mask[j] {
                let g = &mut self.importance[off + j];
                *g = beta * *g + (1.0 - beta) * s[j];
            }
        }
        Ok(())
    }

    /// Applies [`Self::update_rank_importance`] to every expert of `net`.
    pub fn update_all_importance(&mut self, net: &MoeNetwork, sens: &[Vec<Vec<f64>>]) -> Result<()> {
        for (l, block) in net.blocks.iter().enumerate() {
            for (i, e) in block.experts.iter().enumerate() {
                self.update_rank_importance(l, i, e.up.mask(), &sens[l][i])?;
            }
        }
        Ok(())
    }

    /// Expert-level importance: mean of `g_j` over active dimensions.
    pub fn expert_importance(&self, layer: usize, expert: usize, mask: &[bool]) -> Result<f64> {
        let dims = self.dim_importance(layer, expert)?;
        let r = mask.iter().filter(|&&m| m).count();
        if r == 0 {
            return Ok(0.0);
        }
        let sum: f64 = dims.iter().zip(mask).filter(|(_, &m)| m).map(|(g, _)| g).sum();
        Ok(sum / r as f64)
    }

    /// Saliency `S` per (layer, expert) for the network's current masks.
    pub fn saliency(&self, net: &MoeNetwork) -> Result<Vec<Vec<f64>>> {
        let gamma = self.config.gamma;
        net.blocks
            .iter()
            .enumerate()
            .map(|(l, block)| {
                block
                    .experts
                    .iter()
                    .enumerate()
                    .map(|(i, e)| {
                        let f = self.frequency(l, i)?;
                        let g = self.expert_importance(l, i, e.up.mask())?;
                        Ok(saliency_score(f, g, e.rank(), gamma))
                    })
                    .collect()
            })
            .collect()
    }

    pub fn frequencies(&self) -> Vec<Vec<f64>> {
        self.frequency.chunks(self.experts).map(<[f64]>::to_vec).collect()
    }

    pub fn importances(&self, net: &MoeNetwork) -> Result<Vec<Vec<f64>>> {
        net.blocks
            .iter()
            .enumerate()
            .map(|(l, b)| {
                b.experts
                    .iter()
                    .enumerate()
                    .map(|(i, e)| self.expert_importance(l, i, e.up.mask()))
                    .collect()
            })
            .collect()
    }

    /// Clears every `g_j`; routing frequencies are kept.
    pub fn reset_importance(&mut self) {
        self.importance.iter_mut().for_each(|g| *g = 0.0);
    }
}
