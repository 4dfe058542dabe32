//! Run configuration layered as preset < file < environment < flags.

use std::path::Path;

use paraformer::train::TrainConfig;
use paraformer::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::failure::{contract, usage, CmdResult};

pub const SEED_VAR: &str = "PARAFORMER_SEED";
pub const EPOCHS_VAR: &str = "PARAFORMER_EPOCHS";
pub const LR_VAR: &str = "PARAFORMER_LR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Paraformer,
    ParaformerU,
    Serial,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Paraformer => ModelConfig::paraformer(),
            Preset::ParaformerU => ModelConfig::paraformer_u(),
            Preset::Serial => ModelConfig::serial_baseline(),
        }
    }
}

/// The fully resolved settings of a run, as echoed into its manifest.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Top-level keys a config file may contain.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileShape {
    #[allow(dead_code)]
    seed: Option<u64>,
    #[allow(dead_code)]
    model: Option<toml::Table>,
    #[allow(dead_code)]
    train: Option<toml::Table>,
}

/// Values supplied on the command line; `None` defers to lower layers.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub threshold: Option<f64>,
}

pub fn read_file(path: &Path) -> CmdResult<toml::Table> {
    let text = std::fs::read_to_string(path).map_err(|e| contract(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    toml::Value::Table(table.clone())
        .try_into::<FileShape>()
        .map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    Ok(table)
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn layered<T: Serialize + for<'de> Deserialize<'de>>(base: &T, over: Option<&toml::Value>, what: &str) -> CmdResult<T> {
    let mut table = match toml::Value::try_from(base).map_err(|e| usage(format!("{what}: {e}")))? {
        toml::Value::Table(t) => t,
        _ => unreachable!("configs serialize to tables"),
    };
    match over {
        Some(toml::Value::Table(over)) => merge(&mut table, over),
        Some(_) => return Err(usage(format!("[{what}] must be a table"))),
        None => {}
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| usage(format!("[{what}]: {e}")))
}

fn env_value<T: std::str::FromStr>(name: &str) -> CmdResult<Option<T>> {
    match std::env::var(name) {
        Ok(v) if v.trim().is_empty() => Ok(None),
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{name}={v} is not a valid value"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(usage(format!("{name}: {e}"))),
    }
}

/// The seed alone: flag, then environment, then `fallback`.
pub fn resolve_seed(flag: Option<u64>, fallback: u64) -> CmdResult<u64> {
    Ok(flag.or(env_value(SEED_VAR)?).unwrap_or(fallback))
}

pub fn resolve(preset: Preset, file: Option<&toml::Table>, flags: &Overrides) -> CmdResult<RunConfig> {
    let model: ModelConfig = layered(&preset.model(), file.and_then(|f| f.get("model")), "model")?;
    let mut train: TrainConfig = layered(&TrainConfig::default(), file.and_then(|f| f.get("train")), "train")?;
    let file_seed = match file.and_then(|f| f.get("seed")) {
        Some(v) => Some(
            v.as_integer()
                .and_then(|i| u64::try_from(i).ok())
                .ok_or_else(|| usage("seed must be a non-negative integer"))?,
        ),
        None => None,
    };
    let seed = flags.seed.or(env_value(SEED_VAR)?).or(file_seed).unwrap_or(0);
    if let Some(e) = flags.epochs.or(env_value(EPOCHS_VAR)?) {
        train.epochs = e;
    }
    if let Some(lr) = flags.lr.or(env_value(LR_VAR)?) {
        train.lr = lr;
    }
    train.seed = seed;
    let mut model = ModelConfig { seed, ..model };
    if let Some(t) = flags.threshold {
        model.match_threshold = t;
    }
    model.validate()?;
    train.validate()?;
    Ok(RunConfig { seed, model, train })
}
