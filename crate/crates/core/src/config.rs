//! Declarative run configuration. One TOML file carries every knob with
//! dotted namespaces (`data.n_scenes`, `train.rounds`, `adapt.budget`).
//! Override precedence, lowest to highest: built-in defaults, config
//! file, environment variables (`AFFORD_` prefix, `__` for the dot, e.g.
//! `AFFORD_TRAIN__ROUNDS=4`), then explicit `--set key=value` pairs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::METHOD_NAMES;
use crate::pipeline::TrainConfig;
use crate::sim::{Category, TaskKind};

/// Environment override prefix.
pub const ENV_PREFIX: &str = "AFFORD_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: String,
    /// Worker threads for scene-parallel stages; 0 means all logical cores.
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, out_dir: "runs".into(), workers: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub categories: Vec<Category>,
    pub task: TaskKind,
    pub n_points: usize,
    pub n_scenes: usize,
    pub n_val_scenes: usize,
    pub k_interactions: usize,
    pub eval_records: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            categories: d.categories,
            task: d.task,
            n_points: d.n_points,
            n_scenes: d.n_scenes,
            n_val_scenes: d.n_val_scenes,
            k_interactions: d.k_interactions,
            eval_records: d.eval_records,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub feat_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { feat_dim: TrainConfig::default().feat_dim }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch: usize,
    pub aff_points: usize,
    pub prior_epochs: usize,
    pub aap_epochs: usize,
    pub aip_epochs: usize,
    pub finetune_epochs: usize,
    pub rounds: usize,
    pub lr: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            batch: d.batch,
            aff_points: d.aff_points,
            prior_epochs: d.prior_epochs,
            aap_epochs: d.aap_epochs,
            aip_epochs: d.aip_epochs,
            finetune_epochs: d.finetune_epochs,
            rounds: d.rounds,
            lr: d.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSection {
    pub budget: usize,
    pub stop_threshold: f64,
    /// Motion threshold deciding interaction success.
    pub tau: f64,
}

impl Default for AdaptSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self { budget: d.budget, stop_threshold: d.stop_threshold, tau: d.tau }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub methods: Vec<String>,
    pub budgets: Vec<usize>,
    pub n_scenes: usize,
    pub trials: usize,
    /// Held-out records drawn per scene before class balancing.
    pub f_records: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            methods: vec!["where2act".into(), "ours-final".into()],
            budgets: vec![1, 2, 4],
            n_scenes: 20,
            trials: 10,
            f_records: 32,
        }
    }
}

/// Full run configuration; see the module docs for override precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub adapt: AdaptSection,
    pub eval: EvalSection,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parses a `--set` value as a TOML literal, falling back to a bare
/// string so `task=Pull` works without quotes.
fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Value>(&format!("v = {raw}"))
        .ok()
        .and_then(|t| t.get("v").cloned())
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies one dotted-path override. The key must already exist, and
    /// the value must deserialize to the field's type.
    pub fn apply_set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut root = toml::Value::try_from(&*self).map_err(config_err)?;
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("malformed config key `{key}`")));
        }
        let mut cur = &mut root;
        for p in &parts[..parts.len() - 1] {
            cur = cur
                .as_table_mut()
                .and_then(|t| t.get_mut(*p))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        let leaf = parts[parts.len() - 1];
        let table = cur
            .as_table_mut()
            .filter(|t| t.contains_key(leaf))
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        table.insert(leaf.to_string(), parse_literal(raw));
        let cfg: Config = root
            .try_into()
            .map_err(|e| Error::Config(format!("bad value for `{key}`: {e}")))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    /// Applies every `AFFORD_*` variable from the iterator, sorted by
    /// key so the outcome never depends on environment iteration order.
    pub fn apply_env_from<I>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut keys: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(ENV_PREFIX)
                    .map(|rest| (rest.to_ascii_lowercase().replace("__", "."), v))
            })
            .collect();
        keys.sort();
        for (k, v) in keys {
            self.apply_set(&k, &v)?;
        }
        Ok(())
    }

    /// Applies overrides from the process environment.
    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_env_from(std::env::vars())
    }

    pub fn validate(&self) -> Result<()> {
        let c = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        c(!self.data.categories.is_empty(), "data.categories must not be empty")?;
        c(self.data.n_points >= 8, "data.n_points must be at least 8")?;
        c(self.data.n_scenes >= 1, "data.n_scenes must be at least 1")?;
        c(self.data.k_interactions >= 1, "data.k_interactions must be at least 1")?;
        c(self.model.feat_dim >= 2 && self.model.feat_dim % 2 == 0,
            "model.feat_dim must be an even number of at least 2")?;
        c(self.train.batch >= 1, "train.batch must be at least 1")?;
        c(self.train.aff_points >= 1, "train.aff_points must be at least 1")?;
        c(self.train.rounds >= 1, "train.rounds must be at least 1")?;
        c(self.train.lr.is_finite() && self.train.lr > 0.0, "train.lr must be positive")?;
        c(self.adapt.tau > 0.0, "adapt.tau must be positive")?;
        c(self.adapt.stop_threshold.is_finite(), "adapt.stop_threshold must be finite")?;
        c(!self.eval.methods.is_empty(), "eval.methods must not be empty")?;
        c(!self.eval.budgets.is_empty(), "eval.budgets must not be empty")?;
        c(self.eval.trials >= 1, "eval.trials must be at least 1")?;
        c(self.eval.f_records >= 1, "eval.f_records must be at least 1")?;
        for m in &self.eval.methods {
            if !METHOD_NAMES.contains(&m.as_str()) {
                return Err(Error::Config(format!(
                    "eval.methods contains unknown method `{m}`; known: {}",
                    METHOD_NAMES.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// Lowers the config into the training pipeline's knob set.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            categories: self.data.categories.clone(),
            task: self.data.task,
            feat_dim: self.model.feat_dim,
            n_points: self.data.n_points,
            n_scenes: self.data.n_scenes,
            n_val_scenes: self.data.n_val_scenes,
            k_interactions: self.data.k_interactions,
            eval_records: self.data.eval_records,
            batch: self.train.batch,
            aff_points: self.train.aff_points,
            prior_epochs: self.train.prior_epochs,
            aap_epochs: self.train.aap_epochs,
            aip_epochs: self.train.aip_epochs,
            finetune_epochs: self.train.finetune_epochs,
            rounds: self.train.rounds,
            lr: self.train.lr,
            tau: self.adapt.tau,
            stop_threshold: self.adapt.stop_threshold,
            budget: self.adapt.budget,
            seed: self.run.seed,
        }
    }
}
