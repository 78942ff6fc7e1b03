use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{AlphaRatio, DEFAULT_TAU};

/// Which sequence produces the query-side contrastive anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionMode {
    /// `q -> t`: anchor from `[q, <emb>]`, no query-side LM loss.
    Baseline,
    /// `(q, r_o) -> t`: anchor is the `<emb>` state inside the oracle LM pass.
    OracleLeaky,
    /// `(q, r_self) -> t`: anchor from a freshly generated rationale.
    SelfGenerated,
}

impl SupervisionMode {
    pub const ALL: [SupervisionMode; 3] = [
        SupervisionMode::Baseline,
        SupervisionMode::OracleLeaky,
        SupervisionMode::SelfGenerated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SupervisionMode::Baseline => "baseline",
            SupervisionMode::OracleLeaky => "oracle_leaky",
            SupervisionMode::SelfGenerated => "self_generated",
        }
    }

    /// Whether training reads the oracle rationale.
    pub fn uses_oracle(self) -> bool {
        self != SupervisionMode::Baseline
    }
}

impl fmt::Display for SupervisionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SupervisionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(SupervisionMode::Baseline),
            "oracle_leaky" | "leaky" | "oracle" => Ok(SupervisionMode::OracleLeaky),
            "self_generated" | "self" => Ok(SupervisionMode::SelfGenerated),
            other => Err(Error::Config(format!("unknown supervision mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only.
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: SupervisionMode,
    /// `lm:con` loss ratio.
    pub alpha: AlphaRatio,
    pub tau: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub cold_start_steps: usize,
    pub cold_start_lr: f64,
    pub optimizer: AdamWConfig,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: SupervisionMode::SelfGenerated,
            alpha: "1:1".parse().expect("valid ratio"),
            tau: DEFAULT_TAU,
            learning_rate: 3e-4,
            batch_size: 32,
            epochs: 3,
            max_new_tokens: 48,
            seed: 0,
            cold_start_steps: 3000,
            cold_start_lr: 1e-3,
            optimizer: AdamWConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("cold_start_lr", self.cold_start_lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.alpha.alpha().con > 0.0 && self.batch_size < 2 {
            return bad("contrastive training needs batch_size >= 2".into());
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad(format!("betas must lie in [0, 1): {} {}", o.beta1, o.beta2));
        }
        if o.eps.is_nan()
            || o.eps <= 0.0
            || o.weight_decay.is_nan()
            || o.weight_decay < 0.0
            || o.grad_clip.is_nan()
            || o.grad_clip < 0.0
        {
            return bad(format!("invalid optimizer settings {o:?}"));
        }
        Ok(())
    }
}
