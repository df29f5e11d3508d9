//! Declarative pipeline configuration.
//!
//! Layers, lowest first: built-in defaults, the `--config` file, `NFORGE_*`
//! environment variables, `--set key=value` flags, `--seed`. Environment
//! keys map `__` to a dot, so `NFORGE_TRAIN__EPOCHS=50` sets `train.epochs`.

use std::path::Path;

use neuroforge::fairness::{ClassifierConfig, ImbalanceSpec};
use neuroforge::hyperalign::AlignmentConfig;
use neuroforge::metrics::EvalConfig;
use neuroforge::nngen::{ModelConfig, TrainConfig};
use neuroforge::simdata::SimConfig;
use neuroforge::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const ENV_PREFIX: &str = "NFORGE_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Source passband `[low, high]` in Hz.
    pub eeg_band: [f64; 2],
    pub eeg_order: usize,
    pub zero_phase: bool,
    /// Optional target passband; targets are left untouched when absent.
    pub target_band: Option<[f64; 2]>,
    pub target_order: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            eeg_band: [1.0, 90.0],
            eeg_order: 6,
            zero_phase: true,
            target_band: None,
            target_order: 2,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let bands = std::iter::once((self.eeg_band, self.eeg_order))
            .chain(self.target_band.map(|b| (b, self.target_order)));
        for ([lo, hi], order) in bands {
            if !(lo > 0.0 && hi > lo && hi.is_finite()) {
                return Err(Error::Config(format!("passband [{lo}, {hi}] must satisfy 0 < low < high")));
            }
            if order == 0 || (self.zero_phase && order % 2 != 0) {
                return Err(Error::Config(format!(
                    "filter order {order} must be positive, and even for zero-phase filtering"
                )));
            }
        }
        Ok(())
    }
}

/// Default model for the desk-scale pipeline.
fn default_model() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_heads: 4,
        n_blocks: 2,
        ..ModelConfig::default()
    }
}

fn default_train() -> TrainConfig {
    TrainConfig {
        epochs: 400,
        learning_rate: 2e-3,
        patience: 1000,
        val_fraction: 0.2,
        ema_decay: 0.999,
        ..TrainConfig::default()
    }
}

fn default_sim() -> SimConfig {
    SimConfig {
        n_subjects: 5,
        trials_per_condition: 30,
        active_prob: 0.8,
        inactive_prob: 0.1,
        ..SimConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Seeds generation draws and evaluation baselines. `--seed` also
    /// overwrites every stage seed below.
    pub seed: u64,
    pub sim: SimConfig,
    pub preprocess: PreprocessConfig,
    pub align: AlignmentConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub fairness: ImbalanceSpec,
    pub classifier: ClassifierConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            sim: default_sim(),
            preprocess: PreprocessConfig::default(),
            align: AlignmentConfig::default(),
            model: default_model(),
            train: default_train(),
            eval: EvalConfig::default(),
            fairness: ImbalanceSpec::default(),
            classifier: ClassifierConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.sim.validate().map_err(as_config)?;
        self.preprocess.validate()?;
        self.align.validate().map_err(as_config)?;
        self.model.validate().map_err(as_config)?;
        self.train.validate().map_err(as_config)?;
        self.eval.validate().map_err(as_config)?;
        self.fairness.validate().map_err(as_config)?;
        self.classifier.validate().map_err(as_config)?;
        Ok(())
    }

    pub fn set_all_seeds(&mut self, seed: u64) {
        self.seed = seed;
        self.sim.seed = seed;
        self.model.init_seed = seed;
        self.train.seed = seed;
        self.fairness.seed = seed;
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }
}

/// Parse an override value as a TOML literal, falling back to a bare string.
pub fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Set `dotted.key.path` in `table`, creating intermediate tables.
pub fn set_path(table: &mut Table, dotted: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key `{dotted}`")));
    }
    let (last, parents) = parts.split_last().expect("nonempty");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(Error::Config(format!("`{p}` in `{dotted}` is not a table"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
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

/// Dotted keys from `NFORGE_*` variables.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            Some((rest.to_ascii_lowercase().replace("__", "."), v))
        })
        .collect();
    out.sort();
    out
}

/// Resolve the effective configuration from all layers.
pub fn resolve(
    file: Option<&Path>,
    env: &[(String, String)],
    sets: &[String],
    seed: Option<u64>,
) -> Result<PipelineConfig> {
    let mut table = Table::try_from(PipelineConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed: Table = text
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut table, parsed);
    }
    for (k, v) in env {
        set_path(&mut table, k, parse_value(v))?;
    }
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
        set_path(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    let mut cfg: PipelineConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string().trim().to_string()))?;
    if let Some(s) = seed {
        cfg.set_all_seeds(s);
    }
    cfg.validate()?;
    Ok(cfg)
}
