//! Experiment configuration files.
//!
//! A config is TOML. The optional `preset` key (`"toy"` by default, or
//! `"paper-table8"`) supplies every setting; keys present in the file
//! override the preset, nested tables merging key by key. `name` is the only
//! key without a default.
//!
//! ```toml
//! name = "gamma-sweep"
//! preset = "toy"
//!
//! [train.schedule]
//! total_steps = 1000
//!
//! [sweep]
//! seeds = [0, 1, 2]
//! gammas = [0.0, 1.2, 3.0]
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::trainer::{Method, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Desk-scale defaults: 2,000 steps, batch 64, learning rate 1e-3.
    Toy,
    /// OLMoE fine-tuning hyperparameters: 3,750 steps, effective
    /// batch 48, learning rate 2e-5, no weight decay.
    PaperTable8,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::PaperTable8 => "paper-table8",
        }
    }

    pub fn train_config(self) -> TrainConfig {
        let mut c = TrainConfig::default();
        if self == Preset::PaperTable8 {
            c.optimizer.lr = 2e-5;
            c.optimizer.weight_decay = 0.0;
            c.schedule.total_steps = 3750;
            c.batch_size = 48;
        }
        c
    }

    fn defaults(self) -> ExperimentConfig {
        ExperimentConfig {
            name: String::new(),
            preset: self,
            output_dir: "runs".into(),
            verbosity: Verbosity::Normal,
            workers: 0,
            train: self.train_config(),
            sweep: SweepAxes::default(),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "paper-table8" => Ok(Preset::PaperTable8),
            other => Err(Error::config("preset", format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verbosity {
    Quiet,
    Normal,
    Verbose,
}

/// Sweep axes; an absent axis takes its single value from `[train]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gammas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<Method>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_init: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub preset: Preset,
    pub output_dir: String,
    pub verbosity: Verbosity,
    /// Parallel sweep cells; 0 uses every core.
    pub workers: usize,
    pub train: TrainConfig,
    pub sweep: SweepAxes,
}

/// One training run of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub id: String,
    pub config: TrainConfig,
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Pulls the backquoted field name out of a serde message.
fn field_of(message: &str) -> String {
    message
        .split('`')
        .nth(1)
        .map(str::to_owned)
        .unwrap_or_else(|| "config".into())
}

impl ExperimentConfig {
    /// Parses a config file, using `preset_override` instead of the file's
    /// `preset` key when given.
    pub fn from_toml_with_preset(text: &str, preset_override: Option<Preset>) -> Result<Self> {
        let mut user: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("syntax", e.to_string().trim_end().to_owned()))?;
        let preset = match preset_override {
            Some(p) => p,
            None => match user.get("preset") {
                None => Preset::Toy,
                Some(Value::String(s)) => s.parse()?,
                Some(_) => return Err(Error::config("preset", "must be a string")),
            },
        };
        user.insert("preset".into(), Value::String(preset.as_str().into()));
        let mut base = Table::try_from(preset.defaults())
            .map_err(|e| Error::config("preset", format!("cannot encode defaults: {e}")))?;
        base.remove("name");
        merge(&mut base, user);
        let config = ExperimentConfig::deserialize(Value::Table(base)).map_err(|e| {
            let msg = e.to_string().trim_end().to_owned();
            Error::config(field_of(&msg), msg)
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_preset(text, None)
    }

    /// A complete config for `preset` with the given name.
    pub fn preset(preset: Preset, name: impl Into<String>) -> Self {
        let mut c = preset.defaults();
        c.name = name.into();
        c
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", format!("cannot encode: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::config("name", "must not be empty"));
        }
        let empty = |v: Option<usize>| v == Some(0);
        let axes = [
            ("sweep.seeds", empty(self.sweep.seeds.as_ref().map(Vec::len))),
            ("sweep.gammas", empty(self.sweep.gammas.as_ref().map(Vec::len))),
            ("sweep.methods", empty(self.sweep.methods.as_ref().map(Vec::len))),
            ("sweep.r_init", empty(self.sweep.r_init.as_ref().map(Vec::len))),
        ];
        for (field, empty) in axes {
            if empty {
                return Err(Error::config(field, "sweep axis must not be empty"));
            }
        }
        if self.output_dir.is_empty() {
            return Err(Error::config("output_dir", "must not be empty"));
        }
        for cell in self.cells() {
            cell.config
                .validate()
                .map_err(|e| match e {
                    Error::Config { field, message } => {
                        Error::config(format!("train.{field}"), format!("{message} (cell {})", cell.id))
                    }
                    other => other,
                })?;
        }
        Ok(())
    }

    /// Expands the sweep axes. The fixed-rank baseline ignores γ and
    /// `r_init`, so it gets one cell per seed.
    pub fn cells(&self) -> Vec<SweepCell> {
        let t = &self.train;
        let seeds = self.sweep.seeds.clone().unwrap_or_else(|| vec![t.seed]);
        let all_gammas = self.sweep.gammas.clone().unwrap_or_else(|| vec![t.saliency.gamma]);
        let methods = self.sweep.methods.clone().unwrap_or_else(|| vec![t.method]);
        let all_r_init = self.sweep.r_init.clone().unwrap_or_else(|| vec![t.ranks.r_init]);
        let mut cells = Vec::new();
        for method in methods {
            let fixed = method == Method::FixedLora;
            let gammas = if fixed { &all_gammas[..1] } else { &all_gammas[..] };
            let r_inits = if fixed { &all_r_init[..1] } else { &all_r_init[..] };
            for &gamma in gammas {
                for &r_init in r_inits {
                    for &seed in &seeds {
                        let mut config = self.train.clone();
                        config.method = method;
                        config.seed = seed;
                        config.saliency.gamma = gamma;
                        config.ranks.r_init = r_init;
                        let id = if fixed {
                            format!("{method}_s{seed}")
                        } else {
                            format!("{method}_g{gamma}_r{r_init}_s{seed}")
                        };
                        cells.push(SweepCell { id, config });
                    }
                }
            }
        }
        cells
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_gets_toy_defaults() {
        let c = ExperimentConfig::from_toml("name = \"x\"").unwrap();
        assert_eq!(c.preset, Preset::Toy);
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.cells().len(), 1);
    }

    #[test]
    fn olmoe_preset_values() {
        let c = ExperimentConfig::from_toml("name = \"p\"\npreset = \"paper-table8\"").unwrap();
        let t = &c.train;
        assert_eq!(t.optimizer.lr, 2e-5);
        assert_eq!(t.optimizer.weight_decay, 0.0);
        assert_eq!(t.schedule.total_steps, 3750);
        assert_eq!(t.batch_size, 48);
        assert_eq!(t.warmup_steps(), 112);
        assert_eq!((t.ranks.r_init, t.ranks.r_target, t.ranks.r_max), (8, 16, 32));
        assert_eq!((t.saliency.beta, t.saliency.gamma), (0.9, 1.2));
        assert_eq!((t.schedule.t_grow, t.schedule.p_grow), (200, 0.1));
        assert_eq!(t.adapter_scaling, 2.0);
    }

    #[test]
    fn user_keys_override_preset() {
        let text = "name = \"o\"\npreset = \"paper-table8\"\n[train]\nbatch_size = 8\n[train.schedule]\ntotal_steps = 2400\n";
        let c = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.train.schedule.total_steps, 2400);
        assert_eq!(c.train.schedule.t_grow, 200);
        assert_eq!(c.train.optimizer.lr, 2e-5);
        let forced = ExperimentConfig::from_toml_with_preset(text, Some(Preset::Toy)).unwrap();
        assert_eq!(forced.train.optimizer.lr, 1e-3);
    }

    #[test]
    fn missing_name_names_the_field() {
        match ExperimentConfig::from_toml("preset = \"toy\"") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "name"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_rejected() {
        match ExperimentConfig::from_toml("name = \"x\"\n[train]\nbatchsize = 3\n") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "batchsize"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn syntax_error_reports_line() {
        match ExperimentConfig::from_toml("name = \"x\"\n[train\n") {
            Err(Error::Config { field, message }) => {
                assert_eq!(field, "syntax");
                assert!(message.contains("line 2"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_toml("name = \"x\"\npreset = \"huge\"").is_err());
        assert!(ExperimentConfig::from_toml("name = \"x\"\n[sweep]\nseeds = []").is_err());
        match ExperimentConfig::from_toml("name = \"x\"\n[train.schedule]\nt_grow = 0") {
            Err(Error::Config { field, .. }) => assert!(field.starts_with("train.schedule"), "{field}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trip() {
        let text = "name = \"rt\"\n[sweep]\nseeds = [0, 1]\ngammas = [0.0, 1.2, 3.0]\nmethods = [\"dr-lora\", \"random\"]\n[train.optimizer]\nlr = 3.3e-4\n";
        let c = ExperimentConfig::from_toml(text).unwrap();
        let again = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
        let p = ExperimentConfig::preset(Preset::PaperTable8, "p");
        assert_eq!(ExperimentConfig::from_toml(&p.to_toml().unwrap()).unwrap(), p);
    }

    #[test]
    fn sweep_cells() {
        let text = "name = \"s\"\n[sweep]\nseeds = [0, 1, 2]\ngammas = [0.0, 3.0]\nmethods = [\"dr-lora\", \"fixed-lora\"]\n";
        let c = ExperimentConfig::from_toml(text).unwrap();
        let cells = c.cells();
        assert_eq!(cells.len(), 2 * 3 + 3);
        assert_eq!(cells[0].id, "dr-lora_g0_r8_s0");
        assert_eq!(cells[3].config.saliency.gamma, 3.0);
        assert_eq!(cells[6].id, "fixed-lora_s0");
        let mut ids: Vec<&str> = cells.iter().map(|c| c.id.as_str()).collect();
        ids.dedup();
        assert_eq!(ids.len(), cells.len());
    }
}
