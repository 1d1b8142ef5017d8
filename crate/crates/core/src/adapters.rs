//! Masked low-rank adapter with pre-allocated capacity and growth-only rank.
//!
//! An adapter stores `A` as `r_max × d_in` (rows are rank dimensions) and `B`
//! as `d_out × r_max` (columns are rank dimensions). A binary mask selects the
//! active dimensions; only those take part in the forward and backward pass:
//!
//! ```text
//! ΔW = scaling · B[:, m] · A[m, :]
//! ```
//!
//! Growth sets the lowest inactive mask bits, draws fresh Gaussian rows for
//! `A` and zeroes the matching `B` columns, so the adapter's output is
//! unchanged at the moment of growth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Standard deviation of freshly activated `A` rows.
pub const A_INIT_STD: f64 = 0.02;

/// `α / r` with `α = 2r`; constant so growth never rescales old dimensions.
pub const DEFAULT_SCALING: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankLimits {
    pub r_init: usize,
    pub r_target: usize,
    pub r_max: usize,
}

impl RankLimits {
    pub fn validate(&self) -> Result<()> {
        if self.r_init == 0 {
            return Err(Error::config("ranks.r_init", "must be at least 1"));
        }
        if !(self.r_init <= self.r_target && self.r_target <= self.r_max) {
            return Err(Error::config(
                "ranks",
                format!(
                    "need r_init <= r_target <= r_max, got {} / {} / {}",
                    self.r_init, self.r_target, self.r_max
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedLoraAdapter {
    a: Matrix,
    b: Matrix,
    mask: Vec<bool>,
    scaling: f64,
    limits: RankLimits,
}

/// Forward intermediates needed by [`MaskedLoraAdapter::backward`].
#[derive(Clone, Debug)]
pub struct AdapterCache {
    /// `x · A[m,:]ᵀ`, shape `n × r`.
    pub projected: Matrix,
}

/// Gradients of one adapter. Inactive rank dimensions are exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrads {
    pub a: Matrix,
    pub b: Matrix,
}

impl MaskedLoraAdapter {
    /// New adapter with `active` leading dimensions enabled (`r_init`, or
    /// `r_target` for a fixed-rank baseline).
    pub fn new(
        d_in: usize,
        d_out: usize,
        limits: RankLimits,
        active: usize,
        scaling: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        limits.validate()?;
        if active < limits.r_init || active > limits.r_max {
            return Err(Error::Budget(format!(
                "initial active rank {active} outside [{}, {}]",
                limits.r_init, limits.r_max
            )));
        }
        let mut adapter = Self {
            a: Matrix::zeros(limits.r_max, d_in),
            b: Matrix::zeros(d_out, limits.r_max),
            mask: vec![false; limits.r_max],
            scaling,
            limits,
        };
        adapter.activate_next(active, rng);
        Ok(adapter)
    }

    /// Rebuilds an adapter from stored tensors (checkpoint restore).
    pub fn from_parts(a: Matrix, b: Matrix, mask: Vec<bool>, scaling: f64, limits: RankLimits) -> Result<Self> {
        limits.validate()?;
        if a.rows() != limits.r_max || b.cols() != limits.r_max || mask.len() != limits.r_max {
            return Err(Error::shape("adapter tensors do not match r_max"));
        }
        let adapter = Self {
            a,
            b,
            mask,
            scaling,
            limits,
        };
        let r = adapter.rank();
        if r < limits.r_init {
            return Err(Error::Budget(format!("stored rank {r} below r_init {}", limits.r_init)));
        }
        Ok(adapter)
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn limits(&self) -> RankLimits {
        self.limits
    }

    pub fn scaling(&self) -> f64 {
        self.scaling
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Matrix {
        &mut self.b
    }

    pub fn factors_mut(&mut self) -> (&mut Matrix, &mut Matrix) {
        (&mut self.a, &mut self.b)
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Active rank `r = popcount(mask)`.
    pub fn rank(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn active_dims(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(j, &m)| m.then_some(j))
            .collect()
    }

    /// Test-only escape hatch used to exercise masking edge cases.
    #[doc(hidden)]
    pub fn set_mask_unchecked(&mut self, mask: Vec<bool>) {
        assert_eq!(mask.len(), self.limits.r_max);
        self.mask = mask;
    }

    fn activate_next(&mut self, n: usize, rng: &mut Rng) -> Vec<usize> {
        let mut grown = Vec::with_capacity(n);
        for j in 0..self.limits.r_max {
            if grown.len() == n {
                break;
            }
            if self.mask[j] {
                continue;
            }
            self.mask[j] = true;
            for v in self.a.row_mut(j) {
                *v = rng.normal(A_INIT_STD);
            }
            for o in 0..self.b.rows() {
                self.b.set(o, j, 0.0);
            }
            grown.push(j);
        }
        grown
    }

    /// Activates `n` more rank dimensions, lowest inactive index first.
    /// Returns the newly activated indices.
    pub fn grow_ranks(&mut self, n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        let r = self.rank();
        if r + n > self.limits.r_max {
            return Err(Error::Budget(format!(
                "growing rank {r} by {n} exceeds r_max {}",
                self.limits.r_max
            )));
        }
        Ok(self.activate_next(n, rng))
    }

    /// `scaling · x · A[m,:]ᵀ · B[:,m]ᵀ` for a batch `x` of shape `n × d_in`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, AdapterCache)> {
        if x.cols() != self.d_in() {
            return Err(Error::shape(format!(
                "adapter expects {} input features, got {}",
                self.d_in(),
                x.cols()
            )));
        }
        let dims = self.active_dims();
        let n = x.rows();
        let r = dims.len();
        let mut projected = Matrix::zeros(n, r);
        for t in 0..n {
            let xr = x.row(t);
            let pr = projected.row_mut(t);
            for (k, &j) in dims.iter().enumerate() {
                pr[k] = crate::numerics::matrix_dot(xr, self.a.row(j));
            }
        }
        let d_out = self.d_out();
        let mut out = Matrix::zeros(n, d_out);
        for t in 0..n {
            let pr = projected.row(t);
            let or = out.row_mut(t);
            for (o, ov) in or.iter_mut().enumerate() {
                let brow = self.b.row(o);
                let mut s = 0.0;
                for (k, &j) in dims.iter().enumerate() {
                    s += pr[k] * brow[j];
                }
                *ov = self.scaling * s;
            }
        }
        out.check_finite()?;
        Ok((out, AdapterCache { projected }))
    }

    /// Backward pass for `forward_cached(x)` given `∂L/∂out`. Returns
    /// `(∂L/∂x, grads, ∂L/∂projected)`; the last term is per-token and feeds
    /// gradient-intensity diagnostics.
    pub fn backward(&self, x: &Matrix, cache: &AdapterCache, d_out: &Matrix) -> Result<(Matrix, AdapterGrads, Matrix)> {
        let dims = self.active_dims();
        let n = x.rows();
        if d_out.rows() != n || d_out.cols() != self.d_out() || cache.projected.shape() != (n, dims.len()) {
            return Err(Error::shape("adapter backward shapes disagree with forward"));
        }
        let s = self.scaling;
        let mut grads = AdapterGrads {
            a: Matrix::zeros(self.a.rows(), self.a.cols()),
            b: Matrix::zeros(self.b.rows(), self.b.cols()),
        };
        // dProjected[t,k] = s · Σ_o dOut[t,o] · B[o, j_k]
        let mut d_proj = Matrix::zeros(n, dims.len());
        for t in 0..n {
            let dr = d_out.row(t);
            let pr = cache.projected.row(t);
            let dpr = d_proj.row_mut(t);
            for (o, &g) in dr.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let brow = self.b.row(o);
                let gbrow = grads.b.row_mut(o);
                for (k, &j) in dims.iter().enumerate() {
                    dpr[k] += s * g * brow[j];
                    gbrow[j] += s * g * pr[k];
                }
            }
        }
        let d_in = self.d_in();
        let mut d_x = Matrix::zeros(n, d_in);
        for t in 0..n {
            let xr = x.row(t);
            let dpr = d_proj.row(t);
            for (k, &j) in dims.iter().enumerate() {
                let g = dpr[k];
                if g == 0.0 {
                    continue;
                }
                let arow = self.a.row(j);
                let dxr = d_x.row_mut(t);
                for c in 0..d_in {
                    dxr[c] += g * arow[c];
                }
                let garow = grads.a.row_mut(j);
                for c in 0..d_in {
                    garow[c] += g * xr[c];
                }
            }
        }
        Ok((d_x, grads, d_proj))
    }

    /// Dense `scaling · B[:,m] · A[m,:]`, shape `d_out × d_in`.
    pub fn effective_delta(&self) -> Matrix {
        let dims = self.active_dims();
        Matrix::from_fn(self.d_out(), self.d_in(), |o, i| {
            let s: f64 = dims.iter().map(|&j| self.b.get(o, j) * self.a.get(j, i)).sum();
            self.scaling * s
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LIMITS: RankLimits = RankLimits {
        r_init: 2,
        r_target: 3,
        r_max: 4,
    };

    fn randomized(seed: u64, d_in: usize, d_out: usize, limits: RankLimits, active: usize) -> MaskedLoraAdapter {
        let mut rng = Rng::new(seed);
        let mut ad = MaskedLoraAdapter::new(d_in, d_out, limits, active, DEFAULT_SCALING, &mut rng).unwrap();
        for v in ad.a_mut().data_mut() {
            *v = rng.normal(1.0);
        }
        for v in ad.b_mut().data_mut() {
            *v = rng.normal(1.0);
        }
        ad
    }

    fn batch(seed: u64, n: usize, d: usize) -> Matrix {
        let mut rng = Rng::new(seed);
        Matrix::from_fn(n, d, |_, _| rng.normal(1.0))
    }

    #[test]
    fn fresh_adapter_has_zero_delta() {
        let mut rng = Rng::new(0);
        let ad = MaskedLoraAdapter::new(3, 5, LIMITS, 2, 2.0, &mut rng).unwrap();
        assert_eq!(ad.rank(), 2);
        assert_eq!(ad.effective_delta(), Matrix::zeros(5, 3));
        assert_eq!(ad.forward(&batch(1, 4, 3)).unwrap(), Matrix::zeros(4, 5));
    }

    #[test]
    fn rank_one_outer_product() {
        let limits = RankLimits {
            r_init: 1,
            r_target: 1,
            r_max: 1,
        };
        let a = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![2.0], vec![0.0]]).unwrap();
        let ad = MaskedLoraAdapter::from_parts(a, b, vec![true], 2.0, limits).unwrap();
        let expect = Matrix::from_rows(&[vec![4.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(ad.effective_delta(), expect);
    }

    #[test]
    fn empty_mask_gives_zero_output() {
        let mut ad = randomized(3, 3, 2, LIMITS, 2);
        ad.set_mask_unchecked(vec![false; 4]);
        assert_eq!(ad.forward(&batch(4, 3, 3)).unwrap(), Matrix::zeros(3, 2));
    }

    #[test]
    fn forward_matches_materialized_delta() {
        let ad = randomized(5, 6, 4, LIMITS, 2);
        let x = batch(6, 7, 6);
        // ΔW built by hand from the two active dims only.
        let mut delta = Matrix::zeros(4, 6);
        for o in 0..4 {
            for i in 0..6 {
                let v = ad.b().get(o, 0) * ad.a().get(0, i) + ad.b().get(o, 1) * ad.a().get(1, i);
                delta.set(o, i, 2.0 * v);
            }
        }
        let via_delta = x.matmul_t(&delta).unwrap();
        assert!(ad.forward(&x).unwrap().max_abs_diff(&via_delta) <= 1e-12);
        assert!(ad.effective_delta().max_abs_diff(&delta) <= 1e-12);
    }

    #[test]
    fn inactive_dims_contribute_nothing() {
        let ad = randomized(8, 5, 3, LIMITS, 2);
        let mut poisoned = ad.clone();
        // Junk in inactive storage must not leak into the output.
        for c in 0..5 {
            poisoned.a_mut().set(3, c, 1e3);
        }
        for o in 0..3 {
            poisoned.b_mut().set(o, 2, -1e3);
        }
        let x = batch(9, 4, 5);
        assert_eq!(ad.forward(&x).unwrap(), poisoned.forward(&x).unwrap());
    }

    #[test]
    fn growth_preserves_function() {
        let limits = RankLimits {
            r_init: 8,
            r_target: 16,
            r_max: 32,
        };
        let mut ad = randomized(10, 6, 5, limits, 8);
        let x = batch(11, 9, 6);
        let before = ad.forward(&x).unwrap();
        let mut rng = Rng::new(12);
        let grown = ad.grow_ranks(2, &mut rng).unwrap();
        assert_eq!(grown, vec![8, 9]);
        assert_eq!(ad.rank(), 10);
        let after = ad.forward(&x).unwrap();
        assert!(before.max_abs_diff(&after) <= 1e-12);
        assert!(ad.a().row(8).iter().any(|&v| v != 0.0));
        assert!((0..5).all(|o| ad.b().get(o, 8) == 0.0));
    }

    #[test]
    fn zero_growth_is_noop() {
        let mut ad = randomized(13, 3, 3, LIMITS, 2);
        let before = ad.clone();
        assert!(ad.grow_ranks(0, &mut Rng::new(0)).unwrap().is_empty());
        assert_eq!(ad, before);
    }

    #[test]
    fn growth_beyond_capacity_is_budget_error() {
        let limits = RankLimits {
            r_init: 8,
            r_target: 16,
            r_max: 32,
        };
        let mut ad = randomized(14, 3, 3, limits, 31);
        assert!(matches!(ad.grow_ranks(2, &mut Rng::new(0)), Err(Error::Budget(_))));
        assert_eq!(ad.rank(), 31);
        ad.grow_ranks(1, &mut Rng::new(0)).unwrap();
        assert_eq!(ad.rank(), 32);
    }

    #[test]
    fn backward_zeroes_inactive_dims() {
        let ad = randomized(15, 4, 3, LIMITS, 2);
        let x = batch(16, 5, 4);
        let (_, cache) = ad.forward_cached(&x).unwrap();
        let dy = batch(17, 5, 3);
        let (_, g, _) = ad.backward(&x, &cache, &dy).unwrap();
        for j in 2..4 {
            assert!(g.a.row(j).iter().all(|&v| v == 0.0));
            assert!((0..3).all(|o| g.b.get(o, j) == 0.0));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        use crate::numerics::finite_diff_check;
        let ad = randomized(18, 4, 3, LIMITS, 3);
        let x = batch(19, 5, 4);
        let w = batch(20, 5, 3);
        // L = Σ w ⊙ forward(x)
        let loss = |ad: &MaskedLoraAdapter, x: &Matrix| -> f64 {
            let y = ad.forward(x).unwrap();
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = ad.forward_cached(&x).unwrap();
        let (dx, g, _) = ad.backward(&x, &cache, &w).unwrap();

        let mut params = ad.a().data().to_vec();
        params.extend_from_slice(ad.b().data());
        let mut analytic = g.a.data().to_vec();
        analytic.extend_from_slice(g.b.data());
        let na = ad.a().data().len();
        let err = finite_diff_check(
            |p| {
                let mut probe = ad.clone();
                probe.a_mut().data_mut().copy_from_slice(&p[..na]);
                probe.b_mut().data_mut().copy_from_slice(&p[na..]);
                loss(&probe, &x)
            },
            &params,
            &analytic,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-7, "{err}");

        let err = finite_diff_check(
            |p| loss(&ad, &Matrix::from_vec(5, 4, p.to_vec()).unwrap()),
            x.data(),
            dx.data(),
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-7, "{err}");
    }

    #[test]
    fn shape_mismatch() {
        let ad = randomized(21, 4, 3, LIMITS, 2);
        assert!(matches!(ad.forward(&Matrix::zeros(2, 5)), Err(Error::Shape(_))));
    }
}
