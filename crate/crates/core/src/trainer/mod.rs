//! The training loop.
//!
//! Steps are numbered from 1. Each step samples a batch, runs forward and
//! backward, updates the expert statistics, then applies one AdamW step to
//! the adapters (and to the routers once warmup is over, if the router policy
//! allows). Growth events run after the optimizer step of their scheduled
//! step: snapshot saliency, allocate, grow, reset importance.

mod checkpoint;
mod runlog;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Container, Section, SectionData, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use runlog::{EventView, FinalView, HeaderView, Record, RunLog, RUNLOG_VERSION};

use crate::adapters::{RankLimits, DEFAULT_SCALING};
use crate::allocator::{self, warmup_steps, GrowthSchedule, ScheduleConfig, Strategy};
use crate::analysis::{gini, CovarianceAccumulator};
use crate::error::{Error, Result};
use crate::model::{mse_loss, Batch, MoeConfig, MoeNetwork, ParamKind, SyntheticTaskGen, TaskConfig};
use crate::numerics::{AdamConfig, Matrix, OptimizerState, Rng};
use crate::saliency::{batch_mean_weight, network_sensitivities, ExpertStatistics, SaliencyConfig};

const INIT_STREAM: u64 = 1;
const GROWTH_STREAM: u64 = 2;
const ALLOC_STREAM: u64 = 3;
const EVAL_SEED_MASK: u64 = 0xe7a1_5eed_0000_0001;
const PINNED_SEED_MASK: u64 = 0x9111_ed00_0000_0002;
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    DrLora,
    FixedLora,
    Random,
    Proportional,
    GlobalGreedy,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::DrLora,
        Method::FixedLora,
        Method::Random,
        Method::Proportional,
        Method::GlobalGreedy,
    ];

    /// Allocation strategy; `None` for the fixed-rank baseline.
    pub fn strategy(self) -> Option<Strategy> {
        match self {
            Method::DrLora => Some(Strategy::PerLayerGreedy),
            Method::FixedLora => None,
            Method::Random => Some(Strategy::Random),
            Method::Proportional => Some(Strategy::Proportional),
            Method::GlobalGreedy => Some(Strategy::GlobalGreedy),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::DrLora => "dr-lora",
            Method::FixedLora => "fixed-lora",
            Method::Random => "random",
            Method::Proportional => "proportional",
            Method::GlobalGreedy => "global-greedy",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config("method", format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouterPolicy {
    Frozen,
    UnfreezeAfterWarmup,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Linear ramp over the warmup steps, then linear decay.
    LinearWarmup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub seed: u64,
    /// Seed of the task definition, shared across training seeds.
    pub task_seed: u64,
    pub batch_size: usize,
    pub eval_interval: u64,
    pub eval_samples: usize,
    /// Size of the fixed batch used to check loss continuity at growth.
    pub pinned_samples: usize,
    /// Load-balancing loss coefficient for the routers.
    pub aux_coef: f64,
    pub adapter_scaling: f64,
    pub router: RouterPolicy,
    pub lr_schedule: LrSchedule,
    pub model: MoeConfig,
    pub ranks: RankLimits,
    pub schedule: ScheduleConfig,
    pub saliency: SaliencyConfig,
    pub optimizer: AdamConfig,
    pub task: TaskConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::DrLora,
            seed: 0,
            task_seed: 1234,
            batch_size: 64,
            eval_interval: 100,
            eval_samples: 512,
            pinned_samples: 64,
            aux_coef: 0.01,
            adapter_scaling: DEFAULT_SCALING,
            router: RouterPolicy::UnfreezeAfterWarmup,
            lr_schedule: LrSchedule::LinearWarmup,
            model: MoeConfig::default(),
            ranks: RankLimits {
                r_init: 8,
                r_target: 16,
                r_max: 32,
            },
            schedule: ScheduleConfig::default(),
            saliency: SaliencyConfig::default(),
            optimizer: AdamConfig::default(),
            task: TaskConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.ranks.validate()?;
        self.saliency.validate()?;
        self.task.validate()?;
        let positive = |field: &str, v: u64| {
            if v == 0 {
                Err(Error::config(field, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        positive("batch_size", self.batch_size as u64)?;
        positive("eval_interval", self.eval_interval)?;
        positive("eval_samples", self.eval_samples as u64)?;
        positive("pinned_samples", self.pinned_samples as u64)?;
        positive("schedule.total_steps", self.schedule.total_steps)?;
        if !(self.aux_coef >= 0.0 && self.aux_coef.is_finite()) {
            return Err(Error::config("aux_coef", "must be finite and non-negative"));
        }
        if !(self.adapter_scaling.is_finite() && self.adapter_scaling > 0.0) {
            return Err(Error::config("adapter_scaling", "must be finite and positive"));
        }
        let opt = &self.optimizer;
        if !(opt.lr.is_finite() && opt.lr > 0.0) {
            return Err(Error::config("optimizer.lr", "must be finite and positive"));
        }
        if !((0.0..1.0).contains(&opt.beta1) && (0.0..1.0).contains(&opt.beta2)) {
            return Err(Error::config("optimizer", "betas must lie in [0, 1)"));
        }
        if !(opt.eps > 0.0 && opt.weight_decay >= 0.0 && opt.weight_decay.is_finite()) {
            return Err(Error::config("optimizer", "eps must be positive and weight_decay non-negative"));
        }
        if !(0.0..1.0).contains(&self.schedule.warmup_ratio) {
            return Err(Error::config("schedule.warmup_ratio", "must lie in [0, 1)"));
        }
        if self.method.strategy().is_some() {
            GrowthSchedule::new(&self.schedule, self.model.experts, self.ranks)?;
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        warmup_steps(self.schedule.total_steps, self.schedule.warmup_ratio)
    }

    /// Learning rate at 1-based step `t`.
    pub fn learning_rate(&self, t: u64) -> f64 {
        let lr = self.optimizer.lr;
        match self.lr_schedule {
            LrSchedule::Constant => lr,
            LrSchedule::LinearWarmup => {
                let w = self.warmup_steps();
                let total = self.schedule.total_steps;
                if t <= w {
                    lr * t as f64 / w as f64
                } else {
                    lr * (total + 1 - t.min(total)) as f64 / (total - w) as f64
                }
            }
        }
    }

    fn initial_rank(&self) -> usize {
        match self.method {
            Method::FixedLora => self.ranks.r_target,
            _ => self.ranks.r_init,
        }
    }
}

/// Anything that maps a batch of task inputs to predictions.
pub trait Predictor {
    fn predict(&self, x: &Matrix) -> Result<Matrix>;
}

impl Predictor for MoeNetwork {
    fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x, None)?.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean over samples of the per-sample mean squared error.
    pub loss: f64,
    /// Coefficient of determination `1 − SSE / SST`.
    pub accuracy: f64,
}

/// Evaluates on the next `n` samples of a copy of `gen`; `gen` itself is not
/// advanced, so repeated calls see the same set.
pub fn evaluate<P: Predictor + ?Sized>(model: &P, gen: &SyntheticTaskGen, n: usize) -> Result<EvalReport> {
    if n == 0 {
        return Err(Error::Input("evaluation needs at least one sample".into()));
    }
    let mut gen = gen.clone();
    let mut batches = Vec::new();
    let mut left = n;
    while left > 0 {
        let m = left.min(EVAL_CHUNK);
        batches.push(gen.sample_batch(m)?);
        left -= m;
    }
    let d = batches[0].targets.cols();
    let mut mean = vec![0.0; d];
    for b in &batches {
        for t in 0..b.len() {
            for (acc, y) in mean.iter_mut().zip(b.targets.row(t)) {
                *acc += y;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let (mut sse, mut sst) = (0.0, 0.0);
    for b in &batches {
        let pred = model.predict(&b.inputs)?;
        if pred.shape() != b.targets.shape() {
            return Err(Error::shape("prediction shape differs from targets"));
        }
        for t in 0..b.len() {
            for ((p, y), m) in pred.row(t).iter().zip(b.targets.row(t)).zip(&mean) {
                sse += (p - y) * (p - y);
                sst += (y - m) * (y - m);
            }
        }
    }
    let loss = sse / (n * d) as f64;
    let accuracy = if sst > 0.0 {
        1.0 - sse / sst
    } else if sse == 0.0 {
        1.0
    } else {
        0.0
    };
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite evaluation loss".into()));
    }
    Ok(EvalReport { loss, accuracy })
}

/// What one step observed; exposed so the statistics can be checked against
/// a recomputation from history.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub aux_loss: f64,
    /// Batch-mean routing weight per (layer, expert).
    pub zbar: Vec<Vec<f64>>,
    /// Per-rank sensitivities `[layer][expert][dim]`.
    pub sensitivities: Vec<Vec<Vec<f64>>>,
    pub growth_event: bool,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    schedule: Option<GrowthSchedule>,
    net: MoeNetwork,
    stats: ExpertStatistics,
    optimizer: OptimizerState,
    trainable_kinds: Vec<ParamKind>,
    train_gen: SyntheticTaskGen,
    eval_gen: SyntheticTaskGen,
    pinned: Batch,
    growth_rng: Rng,
    alloc_rng: Rng,
    step: u64,
    log: RunLog,
    covariance: Vec<Vec<CovarianceAccumulator>>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let schedule = match config.method.strategy() {
            Some(_) => Some(GrowthSchedule::new(&config.schedule, config.model.experts, config.ranks)?),
            None => None,
        };
        let mut init_rng = Rng::with_stream(config.seed, INIT_STREAM);
        let net = MoeNetwork::new(
            config.model,
            config.ranks,
            config.initial_rank(),
            config.adapter_scaling,
            &mut init_rng,
        )?;
        let stats = ExpertStatistics::new(
            config.saliency,
            config.model.layers,
            config.model.experts,
            config.ranks.r_max,
        )?;
        let optimizer = OptimizerState::new(config.optimizer, net.params());
        let train_gen = SyntheticTaskGen::new(config.task, config.model.d_task, config.task_seed, config.seed)?;
        let eval_gen = train_gen.fork(config.seed ^ EVAL_SEED_MASK);
        let pinned = train_gen.fork(config.seed ^ PINNED_SEED_MASK).sample_batch(config.pinned_samples)?;
        let covariance = vec![vec![CovarianceAccumulator::new(); config.model.experts]; config.model.layers];
        let mut log = RunLog::new();
        log.push(Record::Header {
            version: RUNLOG_VERSION,
            config: config.clone(),
            warmup_steps: config.warmup_steps(),
            events: schedule.as_ref().map(GrowthSchedule::events).unwrap_or_default(),
            quota: schedule.as_ref().map_or(0, |s| s.quota),
            initial_ranks: net.ranks(),
        });
        Ok(Self {
            trainable_kinds: net.param_kinds(),
            growth_rng: Rng::with_stream(config.seed, GROWTH_STREAM),
            alloc_rng: Rng::with_stream(config.seed, ALLOC_STREAM),
            config,
            schedule,
            net,
            stats,
            optimizer,
            train_gen,
            eval_gen,
            pinned,
            step: 0,
            log,
            covariance,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn schedule(&self) -> Option<&GrowthSchedule> {
        self.schedule.as_ref()
    }

    pub fn network(&self) -> &MoeNetwork {
        &self.net
    }

    pub fn statistics(&self) -> &ExpertStatistics {
        &self.stats
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn covariance(&self) -> &[Vec<CovarianceAccumulator>] {
        &self.covariance
    }

    pub fn eval_generator(&self) -> &SyntheticTaskGen {
        &self.eval_gen
    }

    pub fn pinned_batch(&self) -> &Batch {
        &self.pinned
    }

    /// Steps completed so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.config.schedule.total_steps
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn into_log(self) -> RunLog {
        self.log
    }

    pub fn into_parts(self) -> (MoeNetwork, RunLog) {
        (self.net, self.log)
    }

    /// Whether parameters of `kind` receive updates at step `t`.
    pub fn is_trainable(&self, kind: ParamKind, t: u64) -> bool {
        match kind {
            ParamKind::Head => false,
            ParamKind::Adapter => true,
            ParamKind::Router => {
                self.config.router == RouterPolicy::UnfreezeAfterWarmup && t > self.config.warmup_steps()
            }
        }
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate(&self.net, &self.eval_gen, self.config.eval_samples)
    }

    pub fn pinned_loss(&self) -> Result<f64> {
        let (pred, _) = self.net.forward(&self.pinned.inputs, None)?;
        Ok(mse_loss(&pred, &self.pinned.targets)?.0)
    }

    pub fn step(&mut self) -> Result<StepReport> {
        if self.is_finished() {
            return Err(Error::State("training already finished".into()));
        }
        let t = self.step + 1;
        let batch = self.train_gen.sample_batch(self.config.batch_size)?;
        let (pred, trace) = self.net.forward_train(&batch.inputs)?;
        let (loss, d_out) = mse_loss(&pred, &batch.targets)?;
        let aux_loss = self.net.aux_loss(self.config.aux_coef)?;
        if !(loss + aux_loss).is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {t}")));
        }
        let grads = self.net.backward(&d_out, self.config.aux_coef)?;

        let zbar = batch_mean_weight(&trace)?;
        self.stats.update_frequency(&zbar)?;
        let sensitivities = network_sensitivities(&self.net, &grads)?;
        self.stats.update_all_importance(&self.net, &sensitivities)?;
        for (acc_layer, pairs_layer) in self.covariance.iter_mut().zip(&grads.intensity) {
            for (acc, pairs) in acc_layer.iter_mut().zip(pairs_layer) {
                acc.add_batch(batch.len(), pairs);
            }
        }

        let lr = self.config.learning_rate(t);
        self.optimizer.config.lr = lr;
        let trainable: Vec<bool> = self.trainable_kinds.iter().map(|&k| self.is_trainable(k, t)).collect();
        let grad_tensors = grads.tensors();
        let mut params = self.net.params_mut();
        self.optimizer.step_masked(&mut params, &grad_tensors, &trainable)?;
        self.step = t;
        self.log.push(Record::Step {
            step: t,
            loss,
            aux_loss,
            lr,
        });

        let growth_event = self.schedule.as_ref().is_some_and(|s| s.is_event(t));
        if growth_event {
            self.growth_event(t)?;
        }
        if t % self.config.eval_interval == 0 {
            let report = self.evaluate()?;
            self.log.push(Record::Eval {
                step: t,
                loss: report.loss,
                accuracy: report.accuracy,
            });
        }
        if self.is_finished() {
            self.finish()?;
        }
        Ok(StepReport {
            step: t,
            loss,
            aux_loss,
            zbar,
            sensitivities,
            growth_event,
        })
    }

    fn growth_event(&mut self, t: u64) -> Result<()> {
        let (Some(schedule), Some(strategy)) = (self.schedule.as_ref(), self.config.method.strategy()) else {
            return Ok(());
        };
        let before = self.pinned_loss()?;
        let saliency = self.stats.saliency(&self.net)?;
        let ranks = self.net.ranks();
        let budget = schedule.budget(t, &ranks);
        let decisions = allocator::allocate(strategy, &saliency, &ranks, schedule, &budget, &mut self.alloc_rng);
        for d in &decisions {
            for &(i, n) in &d.grants {
                self.net.expert_mut(d.layer, i).grow(n, &mut self.growth_rng)?;
            }
        }
        self.stats.reset_importance();
        let after = self.pinned_loss()?;
        self.log.push(Record::Event {
            step: t,
            saliency,
            decisions,
            ranks: self.net.ranks(),
            pinned_loss_before: before,
            pinned_loss_after: after,
        });
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        let report = self.evaluate()?;
        let ranks = self.net.ranks();
        let flat: Vec<f64> = ranks.iter().flatten().map(|&r| r as f64).collect();
        self.log.push(Record::Final {
            step: self.step,
            ranks,
            eval_loss: report.loss,
            eval_accuracy: report.accuracy,
            gini: gini(&flat)?,
            covariance: self.covariance.clone(),
        });
        Ok(())
    }

    /// Runs until `step` steps have completed (or training ends).
    pub fn run_until(&mut self, step: u64) -> Result<()> {
        while self.step < step && !self.is_finished() {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.schedule.total_steps)
    }
}

/// Trains to completion and returns the run log.
pub fn train(config: TrainConfig) -> Result<RunLog> {
    let mut trainer = Trainer::new(config)?;
    trainer.run()?;
    Ok(trainer.into_log())
}

/// Trains to completion and returns the trained network with its log.
pub fn train_with_network(config: TrainConfig) -> Result<(MoeNetwork, RunLog)> {
    let mut trainer = Trainer::new(config)?;
    trainer.run()?;
    Ok(trainer.into_parts())
}
