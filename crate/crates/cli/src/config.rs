//! Run configuration: one TOML file per run, command-line overrides, and a
//! single top-level seed fanned out to every module.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hardneg::datastore::{MixInput, MixSpec};
use hardneg::pooling::PoolingMethod;
use hardneg::seeding::derive_seed;
use hardneg::synth::{EndpointConfig, SynthConfig};
use hardneg::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;

/// Tables that receive a derived seed unless they set `seed` themselves.
const SEEDED: [(&[&str], &str); 5] = [
    (&["synth"], "synth"),
    (&["backend"], "backend"),
    (&["data"], "data"),
    (&["train"], "train"),
    (&["train", "encoder"], "encoder"),
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Deterministic offline generator.
    #[default]
    Mock,
    Http,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Seed of the mock backend.
    pub seed: u64,
    pub endpoint: EndpointConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset files mixed into one pool, each with a sampling ratio.
    pub inputs: Vec<MixInput>,
    pub train_fraction: f64,
    pub eval_fraction: f64,
    /// Seeds resampling and the train/eval shuffle.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            inputs: Vec::new(),
            train_fraction: 0.8,
            eval_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Retrieval, STS proxy and granularity table for one checkpoint.
    #[default]
    Standard,
    /// Per-level mean cosine only.
    Granularity,
    /// Trains one model per pooling method and compares them.
    Ablation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub poolings: Vec<PoolingMethod>,
    /// Evaluation set; defaults to the held-out split of `data`.
    pub dataset: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: EvalMode::Standard,
            poolings: vec![PoolingMethod::Mean, PoolingMethod::Last, PoolingMethod::Ata],
            dataset: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Source of every module seed that is not set explicitly.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub backend: BackendConfig,
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            output_dir: PathBuf::from("run"),
            backend: BackendConfig::default(),
            synth: SynthConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn mix_spec(&self) -> MixSpec {
        MixSpec {
            inputs: self
                .data
                .inputs
                .iter()
                .map(|i| MixInput {
                    path: self.resolve(&i.path),
                    weight: i.weight,
                })
                .collect(),
            seed: self.data.seed,
            train_fraction: self.data.train_fraction,
            eval_fraction: self.data.eval_fraction,
            num_levels: self.train.num_levels,
        }
    }

    /// The config as TOML, exactly as it is echoed into run artifacts.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// Seeds handed to modules stay below 2^53 so they survive TOML and JSON.
pub fn fan_out(seed: u64, label: &str) -> u64 {
    derive_seed(seed, label) >> 11
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn table_at<'a>(root: &'a mut Table, path: &[&str]) -> Result<&'a mut Table, CliError> {
    let mut t = root;
    for (i, key) in path.iter().enumerate() {
        let entry = t.entry(key.to_string()).or_insert_with(|| Value::Table(Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{} is not a table", path[..=i].join("."))))?;
    }
    Ok(t)
}

/// Applies one `dotted.key=value` override.
pub fn apply_override(root: &mut Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key {key:?} is malformed")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    table_at(root, parents)?.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Builds the resolved config from an optional file plus overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let (mut root, base_dir) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| CliError::File {
                path: p.to_path_buf(),
                source,
            })?;
            let root: Table = text
                .parse()
                .map_err(|e: toml::de::Error| CliError::Config(format!("{}: {e}", p.display())))?;
            let base = p
                .parent()
                .filter(|d| !d.as_os_str().is_empty())
                .unwrap_or(Path::new("."));
            (root, base.to_path_buf())
        }
        None => (Table::new(), PathBuf::from(".")),
    };
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let seed = match root.get("seed") {
        None => 0,
        Some(Value::Integer(s)) if *s >= 0 => *s as u64,
        Some(other) => {
            return Err(CliError::Config(format!("seed must be a non-negative integer, got {other}")).into())
        }
    };
    for (path, label) in SEEDED {
        let t = table_at(&mut root, path)?;
        if !t.contains_key("seed") {
            t.insert("seed".into(), Value::Integer(fan_out(seed, label) as i64));
        }
    }
    let mut cfg: RunConfig = Value::Table(root)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
        .context("invalid run config")?;
    if cfg.version != CONFIG_VERSION {
        return Err(CliError::Config(format!(
            "config version {} is not supported (expected {CONFIG_VERSION})",
            cfg.version
        ))
        .into());
    }
    cfg.base_dir = base_dir;
    Ok(cfg)
}
