use crate::error::{Error, Result};

/// Gini coefficient `Σ_i Σ_j |x_i − x_j| / (2 n² μ)`, computed from the
/// sorted form `Σ_i (2i − n − 1) x_(i) / (n Σ x)`.
pub fn gini(values: &[f64]) -> Result<f64> {
    check(values)?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let numerator: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2 * i as i64 + 1 - n as i64) as f64 * x)
        .sum();
    let total: f64 = sorted.iter().sum();
    Ok(numerator / (n as f64 * total))
}

/// Direct O(n²) pairwise form of [`gini`].
pub fn gini_pairwise(values: &[f64]) -> Result<f64> {
    check(values)?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let pairs: f64 = values
        .iter()
        .map(|a| values.iter().map(|b| (a - b).abs()).sum::<f64>())
        .sum();
    Ok(pairs / (2.0 * n * n * mean))
}

fn check(values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Input("gini needs finite non-negative values".into()));
    }
    if !values.iter().any(|&v| v > 0.0) {
        return Err(Error::Input("gini needs at least one positive value".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn uniform_is_zero() {
        assert_eq!(gini(&[16.0; 64]).unwrap(), 0.0);
        assert_eq!(gini(&[32.0; 7]).unwrap(), 0.0);
    }

    #[test]
    fn maximal_concentration() {
        assert_eq!(gini(&[0.0, 0.0, 0.0, 4.0]).unwrap(), 0.75);
    }

    #[test]
    fn matches_pairwise_oracle() {
        let mut rng = Rng::new(50);
        for _ in 0..20 {
            let v: Vec<f64> = (0..50).map(|_| rng.uniform() * 32.0).collect();
            assert!((gini(&v).unwrap() - gini_pairwise(&v).unwrap()).abs() <= 1e-12);
        }
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(gini(&[0.0, 0.0]), Err(Error::Input(_))));
        assert!(gini(&[]).is_err());
        assert!(gini(&[1.0, -1.0]).is_err());
    }

    proptest! {
        #[test]
        fn scale_invariant(v in proptest::collection::vec(0.0f64..100.0, 1..40), c in 0.01f64..100.0) {
            prop_assume!(v.iter().any(|&x| x > 0.0));
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            prop_assert!((gini(&v).unwrap() - gini(&scaled).unwrap()).abs() <= 1e-12);
        }

        #[test]
        fn permutation_invariant(v in proptest::collection::vec(0u32..64, 1..40), seed in any::<u64>()) {
            let v: Vec<f64> = v.into_iter().map(f64::from).collect();
            prop_assume!(v.iter().any(|&x| x > 0.0));
            let mut p = v.clone();
            let mut rng = Rng::new(seed);
            for i in (1..p.len()).rev() {
                p.swap(i, rng.below(i + 1));
            }
            prop_assert_eq!(gini(&v).unwrap(), gini(&p).unwrap());
        }

        #[test]
        fn bounded(v in proptest::collection::vec(0.0f64..10.0, 1..40)) {
            prop_assume!(v.iter().any(|&x| x > 0.0));
            let g = gini(&v).unwrap();
            prop_assert!((-1e-15..1.0).contains(&g));
        }
    }
}
