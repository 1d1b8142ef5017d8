//! Newline-delimited JSON run log.
//!
//! One record per line, tagged by `record`: a `header`, one `step` per
//! optimizer step, `eval` records at the evaluation interval, one `event` per
//! growth event and a closing `final`. Records carry no wall-clock time, so
//! a log is a pure function of its configuration.

use serde::{Deserialize, Serialize};

use crate::allocator::AllocationDecision;
use crate::analysis::CovarianceAccumulator;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

pub const RUNLOG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Record {
    Header {
        version: u32,
        config: TrainConfig,
        warmup_steps: u64,
        /// Scheduled growth steps; empty for fixed-rank runs.
        events: Vec<u64>,
        quota: usize,
        initial_ranks: Vec<Vec<usize>>,
    },
    Step {
        step: u64,
        loss: f64,
        aux_loss: f64,
        lr: f64,
    },
    Eval {
        step: u64,
        loss: f64,
        accuracy: f64,
    },
    Event {
        step: u64,
        saliency: Vec<Vec<f64>>,
        decisions: Vec<AllocationDecision>,
        /// Ranks after the event's growth.
        ranks: Vec<Vec<usize>>,
        pinned_loss_before: f64,
        pinned_loss_after: f64,
    },
    Final {
        step: u64,
        ranks: Vec<Vec<usize>>,
        eval_loss: f64,
        eval_accuracy: f64,
        gini: f64,
        covariance: Vec<Vec<CovarianceAccumulator>>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeaderView<'a> {
    pub config: &'a TrainConfig,
    pub warmup_steps: u64,
    pub events: &'a [u64],
    pub quota: usize,
    pub initial_ranks: &'a [Vec<usize>],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventView<'a> {
    pub step: u64,
    pub saliency: &'a [Vec<f64>],
    pub decisions: &'a [AllocationDecision],
    pub ranks: &'a [Vec<usize>],
    pub pinned_loss_before: f64,
    pub pinned_loss_after: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinalView<'a> {
    pub step: u64,
    pub ranks: &'a [Vec<usize>],
    pub eval_loss: f64,
    pub eval_accuracy: f64,
    pub gini: f64,
    pub covariance: &'a [Vec<CovarianceAccumulator>],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<Record>,
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: Record) {
        self.records.push(record);
    }

    pub fn header(&self) -> Option<HeaderView<'_>> {
        self.records.iter().find_map(|r| match r {
            Record::Header {
                config,
                warmup_steps,
                events,
                quota,
                initial_ranks,
                ..
            } => Some(HeaderView {
                config,
                warmup_steps: *warmup_steps,
                events,
                quota: *quota,
                initial_ranks,
            }),
            _ => None,
        })
    }

    /// `(step, loss)` for every optimizer step.
    pub fn train_losses(&self) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                Record::Step { step, loss, .. } => Some((*step, *loss)),
                _ => None,
            })
            .collect()
    }

    /// `(step, loss, accuracy)` for every evaluation.
    pub fn evals(&self) -> Vec<(u64, f64, f64)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                Record::Eval { step, loss, accuracy } => Some((*step, *loss, *accuracy)),
                _ => None,
            })
            .collect()
    }

    pub fn events(&self) -> Vec<EventView<'_>> {
        self.records
            .iter()
            .filter_map(|r| match r {
                Record::Event {
                    step,
                    saliency,
                    decisions,
                    ranks,
                    pinned_loss_before,
                    pinned_loss_after,
                } => Some(EventView {
                    step: *step,
                    saliency,
                    decisions,
                    ranks,
                    pinned_loss_before: *pinned_loss_before,
                    pinned_loss_after: *pinned_loss_after,
                }),
                _ => None,
            })
            .collect()
    }

    pub fn final_record(&self) -> Option<FinalView<'_>> {
        self.records.iter().rev().find_map(|r| match r {
            Record::Final {
                step,
                ranks,
                eval_loss,
                eval_accuracy,
                gini,
                covariance,
            } => Some(FinalView {
                step: *step,
                ranks,
                eval_loss: *eval_loss,
                eval_accuracy: *eval_accuracy,
                gini: *gini,
                covariance,
            }),
            _ => None,
        })
    }

    pub fn to_ndjson(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::Numeric(format!("cannot encode record: {e}")))?;
            out.push_str(&line);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses a log; errors name the 1-based line.
    pub fn from_ndjson(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: Record =
                serde_json::from_str(line).map_err(|e| Error::Input(format!("run log line {}: {e}", i + 1)))?;
            if let Record::Header { version, .. } = &record {
                if *version != RUNLOG_VERSION {
                    return Err(Error::Input(format!(
                        "run log line {}: unsupported version {version}",
                        i + 1
                    )));
                }
            }
            records.push(record);
        }
        Ok(Self { records })
    }
}
