use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MoeNetwork, SyntheticTaskGen};
use crate::numerics::{Matrix, Rng};
use crate::trainer::{evaluate, Predictor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskRule {
    /// Highest-rank experts from the top quantile, largest first.
    TopQuantile,
    /// Lowest-rank experts, smallest first.
    BottomGroup,
    /// Seeded random order.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingSpec {
    pub rule: MaskRule,
    pub quantile: f64,
    /// Fraction of each layer's total rank to mask.
    pub budget: f64,
    pub seed: u64,
}

impl MaskingSpec {
    pub fn new(rule: MaskRule, budget: f64) -> Self {
        Self {
            rule,
            quantile: 0.25,
            budget,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.budget) {
            return Err(Error::Input(format!("masking budget {} outside [0, 1)", self.budget)));
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(Error::Input(format!("masking quantile {} outside (0, 1)", self.quantile)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingReport {
    pub rule: MaskRule,
    pub budget: f64,
    /// Masked expert indices per layer.
    pub masked: Vec<Vec<usize>>,
    pub masked_rank: Vec<usize>,
    pub base_loss: f64,
    pub masked_loss: f64,
    pub degradation: f64,
}

/// Picks experts per layer until their summed rank reaches
/// `budget × layer total`.
pub fn select_masked_experts(ranks: &[Vec<usize>], spec: &MaskingSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    ranks
        .iter()
        .enumerate()
        .map(|(layer, r)| {
            let n = r.len();
            let total: usize = r.iter().sum();
            let need = spec.budget * total as f64;
            if need <= 0.0 {
                return Ok(Vec::new());
            }
            let pool: Vec<usize> = match spec.rule {
                MaskRule::TopQuantile => {
                    let mut order: Vec<usize> = (0..n).collect();
                    order.sort_by(|&a, &b| r[b].cmp(&r[a]));
                    let size = (spec.quantile * n as f64).ceil() as usize;
                    order.truncate(size.max(1));
                    order
                }
                MaskRule::BottomGroup => {
                    let mut order: Vec<usize> = (0..n).collect();
                    order.sort_by_key(|&i| r[i]);
                    order
                }
                MaskRule::Random => {
                    let mut order: Vec<usize> = (0..n).collect();
                    let mut rng = Rng::with_stream(spec.seed, layer as u64);
                    for i in (1..n).rev() {
                        order.swap(i, rng.below(i + 1));
                    }
                    order
                }
            };
            let mut chosen = Vec::new();
            let mut sum = 0usize;
            for i in pool {
                if sum as f64 >= need {
                    break;
                }
                chosen.push(i);
                sum += r[i];
            }
            if (sum as f64) < need {
                return Err(Error::Input(format!(
                    "layer {layer}: masking budget {need:.1} unreachable with the available experts"
                )));
            }
            if chosen.len() == n {
                return Err(Error::Input(format!("layer {layer}: masking would remove every expert")));
            }
            Ok(chosen)
        })
        .collect()
}

/// A network evaluated with some experts removed from routing.
pub struct MaskedNetwork<'a> {
    pub net: &'a MoeNetwork,
    pub allowed: Vec<Vec<bool>>,
}

impl Predictor for MaskedNetwork<'_> {
    fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.net.forward(x, Some(&self.allowed))?.0)
    }
}

/// Eval-loss increase from masking the experts chosen by `spec`.
pub fn masking_experiment(
    net: &MoeNetwork,
    ranks: &[Vec<usize>],
    spec: &MaskingSpec,
    gen: &SyntheticTaskGen,
    samples: usize,
) -> Result<MaskingReport> {
    let masked = select_masked_experts(ranks, spec)?;
    let experts = net.config().experts;
    let allowed: Vec<Vec<bool>> = masked
        .iter()
        .map(|m| (0..experts).map(|i| !m.contains(&i)).collect())
        .collect();
    let base = evaluate(net, gen, samples)?;
    let with_mask = evaluate(&MaskedNetwork { net, allowed }, gen, samples)?;
    Ok(MaskingReport {
        rule: spec.rule,
        budget: spec.budget,
        masked_rank: masked
            .iter()
            .zip(ranks)
            .map(|(m, r)| m.iter().map(|&i| r[i]).sum())
            .collect(),
        masked,
        base_loss: base.loss,
        masked_loss: with_mask.loss,
        degradation: with_mask.loss - base.loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::RankLimits;
    use crate::model::{MoeConfig, TaskConfig};

    fn layer() -> Vec<Vec<usize>> {
        vec![vec![8, 24, 10, 16, 12, 20, 8, 30]]
    }

    #[test]
    fn top_quantile_takes_largest_first() {
        let m = select_masked_experts(&layer(), &MaskingSpec::new(MaskRule::TopQuantile, 0.2)).unwrap();
        // Total 128, need 25.6: 30 alone suffices.
        assert_eq!(m, vec![vec![7]]);
        let m = select_masked_experts(&layer(), &MaskingSpec::new(MaskRule::TopQuantile, 0.4)).unwrap();
        assert_eq!(m, vec![vec![7, 1]]);
    }

    #[test]
    fn bottom_group_takes_smallest_first() {
        let m = select_masked_experts(&layer(), &MaskingSpec::new(MaskRule::BottomGroup, 0.2)).unwrap();
        assert_eq!(m, vec![vec![0, 6, 2]]);
    }

    #[test]
    fn zero_budget_masks_nothing() {
        let m = select_masked_experts(&layer(), &MaskingSpec::new(MaskRule::Random, 0.0)).unwrap();
        assert_eq!(m, vec![Vec::<usize>::new()]);
    }

    #[test]
    fn unreachable_budget() {
        let spec = MaskingSpec::new(MaskRule::TopQuantile, 0.6);
        assert!(matches!(select_masked_experts(&layer(), &spec), Err(Error::Input(_))));
    }

    #[test]
    fn masking_everything_is_rejected() {
        let spec = MaskingSpec::new(MaskRule::BottomGroup, 0.9);
        assert!(matches!(select_masked_experts(&[vec![8, 8]], &spec), Err(Error::Input(_))));
    }

    #[test]
    fn bad_spec() {
        assert!(MaskingSpec::new(MaskRule::Random, 1.0).validate().is_err());
        let mut s = MaskingSpec::new(MaskRule::Random, 0.1);
        s.quantile = 0.0;
        assert!(s.validate().is_err());
    }

    fn small_net() -> (MoeNetwork, SyntheticTaskGen) {
        let cfg = MoeConfig {
            layers: 1,
            experts: 4,
            top_k: 2,
            d_model: 8,
            d_expert: 8,
            d_task: 4,
        };
        let limits = RankLimits {
            r_init: 2,
            r_target: 4,
            r_max: 8,
        };
        let net = MoeNetwork::new(cfg, limits, 2, 2.0, &mut Rng::new(1)).unwrap();
        let gen = SyntheticTaskGen::new(TaskConfig::default(), 4, 3, 4).unwrap();
        (net, gen)
    }

    #[test]
    fn zero_budget_zero_degradation() {
        let (net, gen) = small_net();
        let ranks = net.ranks();
        let r = masking_experiment(&net, &ranks, &MaskingSpec::new(MaskRule::TopQuantile, 0.0), &gen, 64).unwrap();
        assert_eq!(r.degradation, 0.0);
    }

    #[test]
    fn masked_network_changes_predictions() {
        let (net, gen) = small_net();
        let ranks = net.ranks();
        let r = masking_experiment(&net, &ranks, &MaskingSpec::new(MaskRule::BottomGroup, 0.5), &gen, 64).unwrap();
        assert_eq!(r.masked, vec![vec![0, 1]]);
        assert_ne!(r.degradation, 0.0);
    }
}
