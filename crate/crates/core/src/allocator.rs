//! Growth schedule and rank allocation strategies.
//!
//! Growth events happen every `t_grow` steps after warmup, up to `n_grow`
//! events inside the window that ends `tail_guard` steps before training
//! finishes. Each event distributes a per-layer quota
//! `Q = ⌈N (r_target − r_init) / n_grow⌉` (in expert-rank units), never more
//! than a layer still needs to reach `N · r_target`; the final event grants
//! exactly the remainder. A single expert never receives more than
//! `⌊(r_max − r_init) · p_grow⌋` ranks per event.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::RankLimits;
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Slack for products like `24 × 0.1` that land a hair below an integer.
const FLOOR_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    PerLayerGreedy,
    GlobalGreedy,
    Proportional,
    Random,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::PerLayerGreedy => "per-layer-greedy",
            Strategy::GlobalGreedy => "global-greedy",
            Strategy::Proportional => "proportional",
            Strategy::Random => "random",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-layer-greedy" => Ok(Strategy::PerLayerGreedy),
            "global-greedy" => Ok(Strategy::GlobalGreedy),
            "proportional" => Ok(Strategy::Proportional),
            "random" => Ok(Strategy::Random),
            other => Err(Error::config("strategy", format!("unknown allocation strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub total_steps: u64,
    pub warmup_ratio: f64,
    pub t_grow: u64,
    pub tail_guard: u64,
    pub p_grow: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            warmup_ratio: 0.03,
            t_grow: 200,
            tail_guard: 200,
            p_grow: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthSchedule {
    pub t_grow: u64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub tail_guard: u64,
    pub window: u64,
    pub n_grow: u64,
    /// Per-layer, per-event quota in expert-rank units.
    pub quota: usize,
    pub p_grow: f64,
    pub experts: usize,
    pub limits: RankLimits,
}

/// Ranks each layer may receive at one event.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventBudget {
    pub step: u64,
    pub final_event: bool,
    pub per_layer: Vec<usize>,
    /// Budget for strategies that pool across layers.
    pub pooled: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationDecision {
    pub step: u64,
    pub layer: usize,
    /// `(expert, ranks granted)` in grant order.
    pub grants: Vec<(usize, usize)>,
    pub strategy: Strategy,
}

impl AllocationDecision {
    pub fn total(&self) -> usize {
        self.grants.iter().map(|&(_, n)| n).sum()
    }
}

/// `warmup_ratio × total_steps`, floored.
pub fn warmup_steps(total_steps: u64, warmup_ratio: f64) -> u64 {
    (warmup_ratio * total_steps as f64 + FLOOR_SLACK).floor() as u64
}

/// Largest single grant allowed by `p_grow`: `⌊(r_max − r_init) · p_grow⌋`.
pub fn max_grant(r_init: usize, r_max: usize, p_grow: f64) -> usize {
    ((r_max - r_init) as f64 * p_grow + FLOOR_SLACK).floor() as usize
}

/// `min(⌊(r_max − r_init) · p_grow⌋, r_max − r, q_remain)`.
pub fn growth_cap(r: usize, r_init: usize, r_max: usize, p_grow: f64, q_remain: usize) -> usize {
    max_grant(r_init, r_max, p_grow)
        .min(r_max.saturating_sub(r))
        .min(q_remain)
}

impl GrowthSchedule {
    pub fn new(cfg: &ScheduleConfig, experts: usize, limits: RankLimits) -> Result<Self> {
        limits.validate()?;
        if cfg.t_grow == 0 {
            return Err(Error::config("schedule.t_grow", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&cfg.warmup_ratio) {
            return Err(Error::config("schedule.warmup_ratio", "must lie in [0, 1)"));
        }
        if !(cfg.p_grow > 0.0 && cfg.p_grow <= 1.0) {
            return Err(Error::config("schedule.p_grow", "must lie in (0, 1]"));
        }
        let warmup = warmup_steps(cfg.total_steps, cfg.warmup_ratio);
        let end = cfg.total_steps.saturating_sub(cfg.tail_guard);
        if end <= warmup {
            return Err(Error::config(
                "schedule",
                format!(
                    "empty growth window: warmup {warmup} steps, growth must stop at step {end}"
                ),
            ));
        }
        let window = end - warmup;
        let n_grow = window / cfg.t_grow;
        if n_grow == 0 {
            return Err(Error::config(
                "schedule.t_grow",
                format!("growth interval {} exceeds the growth window {window}", cfg.t_grow),
            ));
        }
        let need = experts * (limits.r_target - limits.r_init);
        let quota = need.div_ceil(n_grow as usize);
        let cap = max_grant(limits.r_init, limits.r_max, cfg.p_grow);
        if need > 0 && experts * cap < quota {
            return Err(Error::config(
                "schedule.p_grow",
                format!("per-event cap {cap} × {experts} experts cannot place a quota of {quota}"),
            ));
        }
        Ok(Self {
            t_grow: cfg.t_grow,
            warmup_steps: warmup,
            total_steps: cfg.total_steps,
            tail_guard: cfg.tail_guard,
            window,
            n_grow,
            quota,
            p_grow: cfg.p_grow,
            experts,
            limits,
        })
    }

    /// Growth event steps, ascending.
    pub fn events(&self) -> Vec<u64> {
        (1..=self.n_grow).map(|j| self.warmup_steps + j * self.t_grow).collect()
    }

    pub fn is_event(&self, step: u64) -> bool {
        step > self.warmup_steps
            && (step - self.warmup_steps) % self.t_grow == 0
            && (step - self.warmup_steps) / self.t_grow <= self.n_grow
    }

    pub fn final_event(&self) -> u64 {
        self.warmup_steps + self.n_grow * self.t_grow
    }

    pub fn cap(&self, r: usize, q_remain: usize) -> usize {
        growth_cap(r, self.limits.r_init, self.limits.r_max, self.p_grow, q_remain)
    }

    /// Budget at `step` given current ranks.
    pub fn budget(&self, step: u64, ranks: &[Vec<usize>]) -> EventBudget {
        let target = self.experts * self.limits.r_target;
        let final_event = step == self.final_event();
        let remaining: Vec<usize> = ranks
            .iter()
            .map(|layer| target.saturating_sub(layer.iter().sum()))
            .collect();
        let per_layer = if final_event {
            remaining.clone()
        } else {
            remaining.iter().map(|&r| r.min(self.quota)).collect()
        };
        let total_remaining = (target * ranks.len()).saturating_sub(ranks.iter().flatten().sum());
        let pooled = if final_event {
            total_remaining
        } else {
            total_remaining.min(self.quota * ranks.len())
        };
        EventBudget {
            step,
            final_event,
            per_layer,
            pooled,
        }
    }
}

/// Indices sorted by descending score; ties keep the lower index first.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Per-layer greedy: each layer walks its experts in descending saliency,
/// granting each the capped growth until the layer's budget is spent.
pub fn allocate_per_layer_greedy(
    saliency: &[Vec<f64>],
    ranks: &[Vec<usize>],
    schedule: &GrowthSchedule,
    budget: &EventBudget,
) -> Vec<AllocationDecision> {
    saliency
        .iter()
        .zip(ranks)
        .enumerate()
        .map(|(layer, (scores, r))| {
            let mut q_remain = budget.per_layer[layer];
            let mut grants = Vec::new();
            for i in descending(scores) {
                if q_remain == 0 {
                    break;
                }
                let n = schedule.cap(r[i], q_remain);
                if n > 0 {
                    grants.push((i, n));
                    q_remain -= n;
                }
            }
            AllocationDecision {
                step: budget.step,
                layer,
                grants,
                strategy: Strategy::PerLayerGreedy,
            }
        })
        .collect()
}

/// Global greedy: one pooled budget over every (layer, expert) pair.
pub fn allocate_global_greedy(
    saliency: &[Vec<f64>],
    ranks: &[Vec<usize>],
    schedule: &GrowthSchedule,
    budget: &EventBudget,
) -> Vec<AllocationDecision> {
    let mut pairs: Vec<(usize, usize)> = saliency
        .iter()
        .enumerate()
        .flat_map(|(l, s)| (0..s.len()).map(move |i| (l, i)))
        .collect();
    // Stable sort: ties resolve to the lower (layer, expert).
    pairs.sort_by(|&(la, ia), &(lb, ib)| saliency[lb][ib].total_cmp(&saliency[la][ia]));
    let mut decisions: Vec<AllocationDecision> = (0..saliency.len())
        .map(|layer| AllocationDecision {
            step: budget.step,
            layer,
            grants: Vec::new(),
            strategy: Strategy::GlobalGreedy,
        })
        .collect();
    let mut q_remain = budget.pooled;
    for (l, i) in pairs {
        if q_remain == 0 {
            break;
        }
        let n = schedule.cap(ranks[l][i], q_remain);
        if n > 0 {
            decisions[l].grants.push((i, n));
            q_remain -= n;
        }
    }
    decisions
}

/// Largest-remainder apportionment of `total` units by `weights` (which must
/// have a positive sum). Ties in the remainder go to the lower index.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra)
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// Splits `quota` in proportion to `scores` under per-expert `caps`. Experts
/// whose share exceeds their cap are fixed at the cap and the rest is
/// re-apportioned among the others; an all-zero score vector splits
/// uniformly.
pub fn apportion_capped(scores: &[f64], caps: &[usize], quota: usize) -> Vec<usize> {
    let mut grants = vec![0usize; scores.len()];
    let mut open: Vec<usize> = (0..scores.len()).filter(|&i| caps[i] > 0).collect();
    let mut remaining = quota.min(caps.iter().sum());
    while remaining > 0 && !open.is_empty() {
        let mut weights: Vec<f64> = open.iter().map(|&i| scores[i].max(0.0)).collect();
        if weights.iter().sum::<f64>() <= 0.0 {
            weights.iter_mut().for_each(|w| *w = 1.0);
        }
        let shares = largest_remainder(&weights, remaining);
        let over: Vec<usize> = (0..open.len())
            .filter(|&k| shares[k] > caps[open[k]] - grants[open[k]])
            .collect();
        if over.is_empty() {
            for (k, &i) in open.iter().enumerate() {
                grants[i] += shares[k];
            }
            break;
        }
        for &k in &over {
            let i = open[k];
            remaining -= caps[i] - grants[i];
            grants[i] = caps[i];
        }
        open = open.into_iter().filter(|&i| grants[i] < caps[i]).collect();
    }
    grants
}

/// Proportional: per layer, quota split by normalized saliency.
pub fn allocate_proportional(
    saliency: &[Vec<f64>],
    ranks: &[Vec<usize>],
    schedule: &GrowthSchedule,
    budget: &EventBudget,
) -> Vec<AllocationDecision> {
    saliency
        .iter()
        .zip(ranks)
        .enumerate()
        .map(|(layer, (scores, r))| {
            let q = budget.per_layer[layer];
            let caps: Vec<usize> = r.iter().map(|&ri| schedule.cap(ri, q)).collect();
            let shares = apportion_capped(scores, &caps, q);
            AllocationDecision {
                step: budget.step,
                layer,
                grants: shares.into_iter().enumerate().filter(|&(_, n)| n > 0).collect(),
                strategy: Strategy::Proportional,
            }
        })
        .collect()
}

/// Random: per layer, one rank at a time to a uniformly drawn expert that
/// still has capacity this event.
pub fn allocate_random(
    rng: &mut Rng,
    ranks: &[Vec<usize>],
    schedule: &GrowthSchedule,
    budget: &EventBudget,
) -> Vec<AllocationDecision> {
    ranks
        .iter()
        .enumerate()
        .map(|(layer, r)| {
            let q = budget.per_layer[layer];
            let caps: Vec<usize> = r.iter().map(|&ri| schedule.cap(ri, q)).collect();
            let mut counts = vec![0usize; r.len()];
            for _ in 0..q {
                let open: Vec<usize> = (0..r.len()).filter(|&i| counts[i] < caps[i]).collect();
                if open.is_empty() {
                    break;
                }
                counts[open[rng.below(open.len())]] += 1;
            }
            AllocationDecision {
                step: budget.step,
                layer,
                grants: counts.into_iter().enumerate().filter(|&(_, n)| n > 0).collect(),
                strategy: Strategy::Random,
            }
        })
        .collect()
}

/// Dispatches to the strategy's allocation rule.
pub fn allocate(
    strategy: Strategy,
    saliency: &[Vec<f64>],
    ranks: &[Vec<usize>],
    schedule: &GrowthSchedule,
    budget: &EventBudget,
    rng: &mut Rng,
) -> Vec<AllocationDecision> {
    match strategy {
        Strategy::PerLayerGreedy => allocate_per_layer_greedy(saliency, ranks, schedule, budget),
        Strategy::GlobalGreedy => allocate_global_greedy(saliency, ranks, schedule, budget),
        Strategy::Proportional => allocate_proportional(saliency, ranks, schedule, budget),
        Strategy::Random => allocate_random(rng, ranks, schedule, budget),
    }
}

/// Applies decisions to a rank matrix.
pub fn apply_decisions(ranks: &mut [Vec<usize>], decisions: &[AllocationDecision]) {
    for d in decisions {
        for &(i, n) in &d.grants {
            ranks[d.layer][i] += n;
        }
    }
}
