use crate::error::{Error, Result};

/// Numerically stable softmax over the full vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Selects the `k` largest logits and renormalizes their softmax weights over
/// the selected set. Indices come back in descending logit order; equal
/// logits are ordered by lower index first.
pub fn softmax_topk(logits: &[f64], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    softmax_topk_masked(logits, k, None)
}

/// [`softmax_topk`] restricted to the candidates with `allowed[i] == true`.
///
/// When fewer than `k` candidates survive, all of them are selected.
pub fn softmax_topk_masked(
    logits: &[f64],
    k: usize,
    allowed: Option<&[bool]>,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if logits.is_empty() {
        return Err(Error::shape("empty logits"));
    }
    if k == 0 || k > logits.len() {
        return Err(Error::shape(format!(
            "top-k with k={k} over {} logits",
            logits.len()
        )));
    }
    if let Some(mask) = allowed {
        if mask.len() != logits.len() {
            return Err(Error::shape("candidate mask length differs from logits"));
        }
    }
    let mut order: Vec<usize> = (0..logits.len())
        .filter(|&i| allowed.is_none_or(|m| m[i]))
        .collect();
    if order.is_empty() {
        return Err(Error::Input("no routing candidate survives".into()));
    }
    // Stable sort keeps lower indices first among equal logits.
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    order.truncate(k);
    let selected: Vec<f64> = order.iter().map(|&i| logits[i]).collect();
    Ok((order, softmax(&selected)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn two_way_softmax() {
        let (idx, w) = softmax_topk(&[2.0, 1.0, 0.0, -1.0], 2).unwrap();
        assert_eq!(idx, vec![0, 1]);
        assert!((w[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((w[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_uniform_weights() {
        let (idx, w) = softmax_topk(&[0.5; 5], 5).unwrap();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        for v in w {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn ties_prefer_lower_index() {
        let (idx, _) = softmax_topk(&[1.0, 3.0, 3.0, 3.0], 2).unwrap();
        assert_eq!(idx, vec![1, 2]);
    }

    #[test]
    fn errors() {
        assert!(matches!(softmax_topk(&[], 1), Err(Error::Shape(_))));
        assert!(matches!(softmax_topk(&[1.0], 2), Err(Error::Shape(_))));
        assert!(matches!(softmax_topk(&[1.0], 0), Err(Error::Shape(_))));
        assert!(matches!(
            softmax_topk_masked(&[1.0, 2.0], 1, Some(&[false, false])),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn masked_candidates_are_skipped() {
        let (idx, w) = softmax_topk_masked(&[5.0, 1.0, 2.0], 2, Some(&[false, true, true])).unwrap();
        assert_eq!(idx, vec![2, 1]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let (idx, w) = softmax_topk_masked(&[5.0, 1.0, 2.0], 2, Some(&[false, true, false])).unwrap();
        assert_eq!((idx, w), (vec![1], vec![1.0]));
    }

    #[test]
    fn matches_exhaustive_subset_oracle() {
        let mut rng = Rng::new(11);
        let logits: Vec<f64> = (0..8).map(|_| rng.normal(1.0)).collect();
        let k = 3;
        let (idx, w) = softmax_topk(&logits, k).unwrap();

        // Best subset by enumeration over all 3-subsets of 8.
        let mut best = (f64::NEG_INFINITY, 0u32);
        for bits in 0u32..256 {
            if bits.count_ones() as usize != k {
                continue;
            }
            let total: f64 = (0..8).filter(|i| bits >> i & 1 == 1).map(|i| logits[i]).sum();
            if total > best.0 {
                best = (total, bits);
            }
        }
        let mut chosen: Vec<usize> = idx.clone();
        chosen.sort_unstable();
        let oracle: Vec<usize> = (0..8).filter(|i| best.1 >> i & 1 == 1).collect();
        assert_eq!(chosen, oracle);

        // Full softmax renormalized over the selected experts.
        let full = softmax(&logits);
        let mass: f64 = idx.iter().map(|&i| full[i]).sum();
        for (pos, &i) in idx.iter().enumerate() {
            assert!((w[pos] - full[i] / mass).abs() <= 1e-12);
        }
    }

    proptest! {
        #[test]
        fn weights_are_a_distribution(logits in prop::collection::vec(-30.0f64..30.0, 1..12), k_seed in any::<usize>()) {
            let k = 1 + k_seed % logits.len();
            let (idx, w) = softmax_topk(&logits, k).unwrap();
            prop_assert_eq!(idx.len(), k);
            prop_assert!(w.iter().all(|&v| v >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
