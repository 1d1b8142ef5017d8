//! Empirical check of the mean-field factorization behind the saliency
//! score: `E[z·q] = E[z]·E[q | z > 0] + Cov`.
//!
//! Tokens that do not route to an expert count with `z = 0`. The sums are
//! kept relative to the first observed `z` so that a constant routing weight
//! yields a covariance of exactly zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Added to the denominator of the relative gap.
pub const GAP_EPSILON: f64 = 1e-12;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CovarianceAccumulator {
    /// All tokens seen, routed or not.
    pub tokens: u64,
    /// Tokens that routed to the expert.
    pub active: u64,
    /// Shift: the first active `z`.
    pub z0: f64,
    /// Σ (z − z0) over active tokens.
    pub sum_dz: f64,
    /// Σ (z − z0)·q over active tokens.
    pub sum_dzq: f64,
    /// Σ q over active tokens.
    pub sum_q: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceGap {
    pub e_zq: f64,
    pub e_z: f64,
    pub e_q_active: f64,
    pub covariance: f64,
    /// `|Cov| / (E[z]·E[q | z > 0] + ε)`
    pub relative_gap: f64,
    pub tokens: u64,
    pub active: u64,
}

impl CovarianceAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `inactive` tokens that skipped the expert.
    pub fn add_inactive(&mut self, inactive: u64) {
        self.tokens += inactive;
    }

    /// Records one activated token with routing weight `z > 0` and local
    /// gradient intensity `q`.
    pub fn add_active(&mut self, z: f64, q: f64) {
        if self.active == 0 {
            self.z0 = z;
        }
        let dz = z - self.z0;
        self.tokens += 1;
        self.active += 1;
        self.sum_dz += dz;
        self.sum_dzq += dz * q;
        self.sum_q += q;
    }

    /// Records a full batch: `n_tokens` tokens of which `active` routed here.
    pub fn add_batch(&mut self, n_tokens: usize, active: &[(f64, f64)]) {
        for &(z, q) in active {
            self.add_active(z, q);
        }
        self.add_inactive((n_tokens - active.len()) as u64);
    }

    /// Both sides of the decomposition; `None` when the expert never fired.
    pub fn report(&self) -> Option<CovarianceGap> {
        if self.active == 0 {
            return None;
        }
        let n = self.tokens as f64;
        let m = self.active as f64;
        let e_q_active = self.sum_q / m;
        let e_z = (self.sum_dz + m * self.z0) / n;
        let e_zq = (self.sum_dzq + self.z0 * self.sum_q) / n;
        let covariance = self.sum_dzq / n - (self.sum_dz / n) * e_q_active;
        Some(CovarianceGap {
            e_zq,
            e_z,
            e_q_active,
            covariance,
            relative_gap: covariance.abs() / (e_z * e_q_active + GAP_EPSILON),
            tokens: self.tokens,
            active: self.active,
        })
    }
}

/// Per-(layer, expert) report over a run's accumulators.
pub fn covariance_gap(accumulators: &[Vec<CovarianceAccumulator>]) -> Vec<Vec<Option<CovarianceGap>>> {
    accumulators
        .iter()
        .map(|layer| layer.iter().map(CovarianceAccumulator::report).collect())
        .collect()
}

/// Builds an accumulator from a raw `(z, q)` history where `z = 0` marks an
/// inactive token.
pub fn accumulate_history(history: &[(f64, f64)]) -> Result<CovarianceAccumulator> {
    let mut acc = CovarianceAccumulator::new();
    for &(z, q) in history {
        if !(z.is_finite() && q.is_finite()) || z < 0.0 {
            return Err(Error::Input(format!("invalid (z, q) pair ({z}, {q})")));
        }
        if z > 0.0 {
            acc.add_active(z, q);
        } else {
            acc.add_inactive(1);
        }
    }
    Ok(acc)
}
