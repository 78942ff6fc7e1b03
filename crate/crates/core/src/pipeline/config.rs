use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::AlphaRatio;
use crate::task::DataConfig;
use crate::tensor::DType;
use crate::train::TrainConfig;

/// Prefix of environment variables that override config values; `__`
/// separates nested keys (`RGE_TRAIN__EPOCHS=1`).
pub const ENV_PREFIX: &str = "RGE_";

/// Log filter variable; not a config override.
pub const LOG_ENV: &str = "RGE_LOG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Candidates per query, the true target included.
    pub pool_size: usize,
    /// Training seeds of the supervision comparison: `seed, seed + 1, ...`.
    pub n_seeds: usize,
    /// Candidates also write a rationale before embedding.
    pub target_reasoning: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pool_size: 16,
            n_seeds: 3,
            target_reasoning: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticConfig {
    pub enabled: bool,
    /// Training examples perturbed for each curve (one epoch).
    pub n_examples: usize,
    pub alpha: AlphaRatio,
    pub learning_rate: f64,
}

impl Default for DiagnosticConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            n_examples: 2000,
            alpha: "1:10".parse().expect("valid ratio"),
            learning_rate: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub enabled: bool,
    pub ratios: Vec<AlphaRatio>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            ratios: ["100:1", "10:1", "1:1", "1:10", "1:100", "0"]
                .iter()
                .map(|r| r.parse().expect("valid ratio"))
                .collect(),
        }
    }
}

/// Everything one experiment bundle depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; copied into the model, data and training sections.
    pub seed: u64,
    pub precision: DType,
    /// Worker threads for data generation and evaluation (0: all cores).
    pub threads: usize,
    /// Parent of the run directory, which is named by the fingerprint.
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub diagnostic: DiagnosticConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: DType::F32,
            threads: 0,
            out_dir: PathBuf::from("runs"),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            diagnostic: DiagnosticConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets the dotted `path` inside `root` to `raw`, parsed as a TOML value
/// when possible and as a plain string otherwise.
pub fn set_path(root: &mut toml::Table, path: &str, raw: &str) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad config key {path:?}")));
    }
    let (last, parents) = keys.split_last().expect("nonempty");
    let mut table = root;
    for k in parents {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{path}: {k} is not a section")))?;
    }
    table.insert(last.to_string(), parse_value(raw));
    Ok(())
}

/// `key=value` pairs from `--set` flags.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} must look like key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Config overrides from environment variables with [`ENV_PREFIX`].
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = vars
        .into_iter()
        .filter(|(k, _)| k != LOG_ENV)
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            Some((rest.to_lowercase().replace("__", "."), v))
        })
        .collect();
    out.sort();
    out
}

impl RunConfig {
    /// Parses a TOML config, then applies `overrides` in order.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        for (k, v) in overrides {
            set_path(&mut table, k, v)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.vocab_size != crate::task::VOCAB_SIZE {
            return Err(Error::Config(format!(
                "model.vocab_size must be {}, got {}",
                crate::task::VOCAB_SIZE,
                self.model.vocab_size
            )));
        }
        if self.data.families.is_empty() {
            return Err(Error::Config("data.families is empty".into()));
        }
        if self.eval.pool_size < 3 {
            return Err(Error::Config("eval.pool_size must be at least 3".into()));
        }
        if self.eval.n_seeds == 0 {
            return Err(Error::Config("eval.n_seeds must be positive".into()));
        }
        if !(self.diagnostic.learning_rate >= 0.0 && self.diagnostic.learning_rate.is_finite()) {
            return Err(Error::Config(
                "diagnostic.learning_rate must be non-negative".into(),
            ));
        }
        if self.sweep.enabled && self.sweep.ratios.is_empty() {
            return Err(Error::Config("sweep.ratios is empty".into()));
        }
        Ok(())
    }

    /// Copy with the master seed pushed into every section.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.model.seed = c.seed;
        c.data.seed = c.seed;
        c.train.seed = c.seed;
        c
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the resolved config, leaving
    /// out settings that cannot change results (output location, threads).
    pub fn fingerprint(&self) -> String {
        let mut c = self.resolved();
        c.out_dir = PathBuf::new();
        c.threads = 0;
        let canonical = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))[..16].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(self.fingerprint())
    }

    /// Seeds of the supervision comparison.
    pub fn comparison_seeds(&self) -> Vec<u64> {
        (0..self.eval.n_seeds as u64)
            .map(|i| self.seed.wrapping_add(i))
            .collect()
    }
}
