use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Synthetic specialization task: inputs drawn around `clusters` centers with
/// Zipf-like mixture weights, targets from a per-cluster linear map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub clusters: usize,
    /// Mixture weight of cluster `c` is proportional to `(c + 1)^(-skew)`.
    pub mixture_skew: f64,
    pub center_std: f64,
    /// Spread of inputs around their cluster center.
    pub input_std: f64,
    /// Scale of the per-cluster target maps (entries ~ `N(0, scale²/d)`).
    pub map_scale: f64,
    pub noise_std: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            clusters: 8,
            mixture_skew: 1.0,
            center_std: 1.0,
            input_std: 0.25,
            map_scale: 1.0,
            noise_std: 0.05,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 {
            return Err(Error::config("task.clusters", "must be at least 1"));
        }
        for (name, v) in [
            ("task.mixture_skew", self.mixture_skew),
            ("task.center_std", self.center_std),
            ("task.input_std", self.input_std),
            ("task.map_scale", self.map_scale),
            ("task.noise_std", self.noise_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, format!("must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Matrix,
    pub clusters: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticTaskGen {
    config: TaskConfig,
    d_task: usize,
    task_seed: u64,
    centers: Matrix,
    maps: Vec<Matrix>,
    weights: Vec<f64>,
    stream: Rng,
}

impl SyntheticTaskGen {
    /// Task definition drawn from `task_seed`; samples drawn from an
    /// independent stream seeded by `stream_seed`.
    pub fn new(config: TaskConfig, d_task: usize, task_seed: u64, stream_seed: u64) -> Result<Self> {
        config.validate()?;
        if d_task == 0 {
            return Err(Error::config("model.d_task", "must be at least 1"));
        }
        let mut rng = Rng::new(task_seed);
        let centers = Matrix::from_fn(config.clusters, d_task, |_, _| rng.normal(config.center_std));
        let map_std = config.map_scale / (d_task as f64).sqrt();
        let maps = (0..config.clusters)
            .map(|_| Matrix::from_fn(d_task, d_task, |_, _| rng.normal(map_std)))
            .collect();
        let raw: Vec<f64> = (0..config.clusters)
            .map(|c| ((c + 1) as f64).powf(-config.mixture_skew))
            .collect();
        let total: f64 = raw.iter().sum();
        let weights = raw.into_iter().map(|w| w / total).collect();
        Ok(Self {
            config,
            d_task,
            task_seed,
            centers,
            maps,
            weights,
            stream: Rng::with_stream(stream_seed, 0x7a5c),
        })
    }

    /// Same task, fresh sample stream.
    pub fn fork(&self, stream_seed: u64) -> Self {
        let mut gen = self.clone();
        gen.stream = Rng::with_stream(stream_seed, 0x7a5c);
        gen
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    pub fn task_seed(&self) -> u64 {
        self.task_seed
    }

    pub fn mixture_weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn stream(&self) -> &Rng {
        &self.stream
    }

    pub fn set_stream(&mut self, stream: Rng) {
        self.stream = stream;
    }

    /// Noise-free target `map_c · x`.
    pub fn clean_target(&self, cluster: usize, x: &[f64]) -> Vec<f64> {
        let map = &self.maps[cluster];
        (0..self.d_task)
            .map(|o| map.row(o).iter().zip(x).map(|(m, v)| m * v).sum())
            .collect()
    }

    pub fn sample_batch(&mut self, n: usize) -> Result<Batch> {
        if n == 0 {
            return Err(Error::Input("batch size must be at least 1".into()));
        }
        let d = self.d_task;
        let mut inputs = Matrix::zeros(n, d);
        let mut targets = Matrix::zeros(n, d);
        let mut clusters = Vec::with_capacity(n);
        for t in 0..n {
            let c = self.stream.categorical(&self.weights);
            clusters.push(c);
            for j in 0..d {
                let v = self.centers.get(c, j) + self.stream.normal(self.config.input_std);
                inputs.set(t, j, v);
            }
            let clean = self.clean_target(c, inputs.row(t));
            for (j, y) in clean.into_iter().enumerate() {
                let noise = if self.config.noise_std > 0.0 {
                    self.stream.normal(self.config.noise_std)
                } else {
                    0.0
                };
                targets.set(t, j, y + noise);
            }
        }
        Ok(Batch {
            inputs,
            targets,
            clusters,
        })
    }
}
