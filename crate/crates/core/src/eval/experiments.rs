use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::index::{Embedder, ReasoningCandidates};
use super::metrics::{evaluate, EvalItem, EvalOptions, EvalReport};
use super::report::{fmt_num, ReportTable};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Model};
use crate::objectives::AlphaRatio;
use crate::task::{make_perturbed_triplets, Dataset, Perturbation};
use crate::tensor::Scalar;
use crate::train::{
    run_training, CheckpointPolicy, SupervisionMode, TrainConfig, TrainOutcome, TrainTrace,
};

/// Everything the protocols share: the cold-started model, the data and
/// the base training configuration.
pub struct Experiment<'a, T> {
    pub cold: &'a Model<T>,
    pub train: &'a Dataset,
    pub eval: &'a [EvalItem],
    pub train_cfg: &'a TrainConfig,
    /// Candidates also write rationales before embedding.
    pub target_reasoning: bool,
    pub fingerprint: &'a str,
}

impl<T: Scalar> Experiment<'_, T> {
    fn train(&self, cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome<T>> {
        run_training(self.cold.clone(), data, cfg, &CheckpointPolicy::default())
    }

    /// Evaluates `model` with query-side reasoning on or off.
    pub fn evaluate(&self, model: &Model<T>, reasoning: bool) -> Result<EvalReport> {
        let opts = EvalOptions {
            reasoning,
            max_new_tokens: self.train_cfg.max_new_tokens,
        };
        if self.target_reasoning {
            let e = ReasoningCandidates(model, self.train_cfg.max_new_tokens);
            evaluate(&e as &dyn Embedder, self.eval, opts, self.fingerprint)
        } else {
            evaluate(model, self.eval, opts, self.fingerprint)
        }
    }
}

/// One trained mode evaluated both with and without query-side reasoning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRun {
    pub off: EvalReport,
    pub on: EvalReport,
    pub final_lm_loss: f64,
    pub final_con_loss: f64,
    pub mean_generated_len: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub mode: SupervisionMode,
    pub seed: u64,
    /// The training abort message when the run failed.
    pub result: std::result::Result<ModeRun, String>,
}

impl ModeRow {
    /// The headline P@1: with reasoning for SelfGenerated, without otherwise.
    pub fn headline(&self) -> Option<f64> {
        self.result.as_ref().ok().map(|r| {
            if self.mode == SupervisionMode::SelfGenerated {
                r.on.overall.p_at_1
            } else {
                r.off.overall.p_at_1
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisionComparison {
    pub rows: Vec<ModeRow>,
}

/// Margins of the expected ordering `self >= baseline + m_self` and
/// `leaky <= baseline - m_leak`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderingMargins {
    pub self_over_baseline: f64,
    pub baseline_over_leaky: f64,
}

impl Default for OrderingMargins {
    fn default() -> Self {
        Self {
            self_over_baseline: 0.02,
            baseline_over_leaky: 0.05,
        }
    }
}

impl SupervisionComparison {
    pub fn seeds(&self) -> Vec<u64> {
        let set: BTreeSet<u64> = self.rows.iter().map(|r| r.seed).collect();
        set.into_iter().collect()
    }

    pub fn row(&self, mode: SupervisionMode, seed: u64) -> Option<&ModeRow> {
        self.rows.iter().find(|r| r.mode == mode && r.seed == seed)
    }

    fn headline(&self, mode: SupervisionMode, seed: u64) -> Option<f64> {
        self.row(mode, seed).and_then(ModeRow::headline)
    }

    /// Whether the expected ordering holds for `seed`; `None` if a run failed.
    pub fn ordering_holds(&self, seed: u64, m: OrderingMargins) -> Option<bool> {
        let s = self.headline(SupervisionMode::SelfGenerated, seed)?;
        let b = self.headline(SupervisionMode::Baseline, seed)?;
        let l = self.headline(SupervisionMode::OracleLeaky, seed)?;
        Some(s >= b + m.self_over_baseline && l <= b - m.baseline_over_leaky)
    }

    /// Whether reasoning helps the SelfGenerated model on held-out rules.
    pub fn reasoning_helps_holdout(&self, seed: u64) -> Option<bool> {
        let r = self
            .row(SupervisionMode::SelfGenerated, seed)?
            .result
            .as_ref()
            .ok()?;
        Some(r.on.holdout.p_at_1 >= r.off.holdout.p_at_1)
    }

    pub fn to_table(&self, fingerprint: &str) -> ReportTable {
        let mut t = ReportTable::new(
            "supervision_comparison",
            &[
                "mode",
                "seed",
                "p_at_1",
                "r_at_5",
                "p_at_1_off",
                "p_at_1_on",
                "holdout_p_at_1_off",
                "holdout_p_at_1_on",
                "final_lm_loss",
                "final_con_loss",
                "mean_rationale_len",
                "status",
            ],
        )
        .with_meta("fingerprint", fingerprint);
        for row in &self.rows {
            let fields = match &row.result {
                Ok(r) => {
                    let head = if row.mode == SupervisionMode::SelfGenerated {
                        &r.on
                    } else {
                        &r.off
                    };
                    vec![
                        fmt_num(head.overall.p_at_1),
                        fmt_num(head.overall.r_at_5),
                        fmt_num(r.off.overall.p_at_1),
                        fmt_num(r.on.overall.p_at_1),
                        fmt_num(r.off.holdout.p_at_1),
                        fmt_num(r.on.holdout.p_at_1),
                        fmt_num(r.final_lm_loss),
                        fmt_num(r.final_con_loss),
                        fmt_num(r.on.mean_rationale_len),
                        "ok".to_string(),
                    ]
                }
                Err(msg) => {
                    let mut v = vec!["".to_string(); 9];
                    v.push(format!("aborted: {msg}"));
                    v
                }
            };
            let mut cells = vec![row.mode.to_string(), row.seed.to_string()];
            cells.extend(fields);
            t.push(cells).expect("fixed width");
        }
        t
    }

    /// Reasoning on/off per mode and seed, overall and on held-out rules.
    pub fn ablation_table(&self, fingerprint: &str) -> ReportTable {
        let mut t = ReportTable::new(
            "reasoning_ablation",
            &[
                "mode",
                "seed",
                "reasoning",
                "p_at_1",
                "r_at_5",
                "holdout_p_at_1",
                "holdout_r_at_5",
            ],
        )
        .with_meta("fingerprint", fingerprint);
        for row in &self.rows {
            if let Ok(r) = &row.result {
                for rep in [&r.off, &r.on] {
                    t.push(vec![
                        row.mode.to_string(),
                        row.seed.to_string(),
                        if rep.reasoning { "on" } else { "off" }.to_string(),
                        fmt_num(rep.overall.p_at_1),
                        fmt_num(rep.overall.r_at_5),
                        fmt_num(rep.holdout.p_at_1),
                        fmt_num(rep.holdout.r_at_5),
                    ])
                    .expect("fixed width");
                }
            }
        }
        t
    }
}

fn run_mode<T: Scalar>(
    exp: &Experiment<'_, T>,
    mode: SupervisionMode,
    seed: u64,
    save_dir: Option<&Path>,
) -> Result<ModeRun> {
    let cfg = TrainConfig {
        mode,
        seed,
        ..exp.train_cfg.clone()
    };
    let out = exp.train(&cfg, exp.train)?;
    if let Some(dir) = save_dir {
        save_checkpoint(&out.model, &dir.join(format!("{mode}-seed{seed}.ckpt")))?;
    }
    let last = out.trace.records.last();
    Ok(ModeRun {
        off: exp.evaluate(&out.model, false)?,
        on: exp.evaluate(&out.model, true)?,
        final_lm_loss: last.map_or(f64::NAN, |r| r.lm_loss),
        final_con_loss: last.map_or(f64::NAN, |r| r.con_loss),
        mean_generated_len: out.trace.mean_generated_len(),
    })
}

/// Trains every supervision mode from the shared cold start for each seed
/// and evaluates both inference modes. Training aborts are recorded per row;
/// IO failures while saving models stop the run.
pub fn run_supervision_comparison<T: Scalar>(
    exp: &Experiment<'_, T>,
    seeds: &[u64],
    save_dir: Option<&Path>,
) -> Result<SupervisionComparison> {
    if seeds.is_empty() {
        return Err(Error::Config(
            "supervision comparison needs at least one seed".into(),
        ));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        for mode in SupervisionMode::ALL {
            log::info!("comparison: {mode}, seed {seed}");
            let result = match run_mode(exp, mode, seed, save_dir) {
                Ok(r) => Ok(r),
                Err(e @ Error::Io { .. }) => return Err(e),
                Err(e) => {
                    log::warn!("{mode} seed {seed} aborted: {e}");
                    Err(e.to_string())
                }
            };
            rows.push(ModeRow { mode, seed, result });
        }
    }
    Ok(SupervisionComparison { rows })
}

/// Loss curves of an OracleLeaky run on perturbed triplets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticTrace {
    pub perturbation: Perturbation,
    /// `(step, lm_loss, con_loss)` per optimizer step.
    pub points: Vec<(usize, f64, f64)>,
}

/// Start and end of a loss curve, each the mean over a window of steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub lm_initial: f64,
    pub lm_final: f64,
    pub con_initial: f64,
    pub con_final: f64,
}

impl CurveSummary {
    /// Relative drop of the LM loss; negative when it rises.
    pub fn lm_reduction(&self) -> f64 {
        1.0 - self.lm_final / self.lm_initial
    }

    /// Final over initial contrastive loss.
    pub fn con_ratio(&self) -> f64 {
        self.con_final / self.con_initial
    }
}

impl DiagnosticTrace {
    pub fn from_trace(perturbation: Perturbation, trace: &TrainTrace) -> Self {
        Self {
            perturbation,
            points: trace
                .records
                .iter()
                .map(|r| (r.step, r.lm_loss, r.con_loss))
                .collect(),
        }
    }

    /// Window means over the first and last `max(1, n / 10)` steps.
    pub fn summary(&self) -> CurveSummary {
        let n = self.points.len();
        let w = (n / 10).max(1).min(n.max(1));
        let mean = |pts: &[(usize, f64, f64)], f: fn(&(usize, f64, f64)) -> f64| {
            if pts.is_empty() {
                f64::NAN
            } else {
                pts.iter().map(f).sum::<f64>() / pts.len() as f64
            }
        };
        let head = &self.points[..w.min(n)];
        let tail = &self.points[n.saturating_sub(w)..];
        CurveSummary {
            lm_initial: mean(head, |p| p.1),
            lm_final: mean(tail, |p| p.1),
            con_initial: mean(head, |p| p.2),
            con_final: mean(tail, |p| p.2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageDiagnostic {
    /// `(q_w, r_o, t)`: wrong query, matching rationale and target.
    pub wrong_query: DiagnosticTrace,
    /// `(q, r_o, t_w)`: matching query and rationale, wrong target.
    pub wrong_target: DiagnosticTrace,
    pub batch_size: usize,
}

impl LeakageDiagnostic {
    /// Contrastive loss still converges on `(q_w, r_o, t)` while the LM loss
    /// barely moves.
    pub fn wrong_query_shortcut(&self) -> bool {
        let s = self.wrong_query.summary();
        s.con_final < 0.5 * s.con_initial && s.lm_reduction() < 0.2
    }

    /// Contrastive loss stays near chance on `(q, r_o, t_w)`.
    pub fn wrong_target_at_chance(&self) -> bool {
        let chance = (self.batch_size as f64).ln();
        let s = self.wrong_target.summary();
        (s.con_final - chance).abs() <= 0.2 * chance
    }

    pub fn summary_table(&self, fingerprint: &str, seed: u64) -> ReportTable {
        let mut t = ReportTable::new(
            "leakage_diagnostic",
            &[
                "perturbation",
                "steps",
                "lm_initial",
                "lm_final",
                "lm_reduction",
                "con_initial",
                "con_final",
                "con_ratio",
                "ln_batch",
            ],
        )
        .with_meta("fingerprint", fingerprint)
        .with_meta("seed", seed);
        for d in [&self.wrong_query, &self.wrong_target] {
            let s = d.summary();
            t.push(vec![
                d.perturbation.to_string(),
                d.points.len().to_string(),
                fmt_num(s.lm_initial),
                fmt_num(s.lm_final),
                fmt_num(s.lm_reduction()),
                fmt_num(s.con_initial),
                fmt_num(s.con_final),
                fmt_num(s.con_ratio()),
                fmt_num((self.batch_size as f64).ln()),
            ])
            .expect("fixed width");
        }
        t
    }

    /// Plot-ready curves: one row per perturbation and step.
    pub fn curves_table(&self, fingerprint: &str, seed: u64) -> ReportTable {
        let mut t = ReportTable::new(
            "leakage_curves",
            &["perturbation", "step", "lm_loss", "con_loss"],
        )
        .with_meta("fingerprint", fingerprint)
        .with_meta("seed", seed);
        for d in [&self.wrong_query, &self.wrong_target] {
            for &(step, lm, con) in &d.points {
                t.push(vec![
                    d.perturbation.to_string(),
                    step.to_string(),
                    fmt_num(lm),
                    fmt_num(con),
                ])
                .expect("fixed width");
            }
        }
        t
    }
}

/// OracleLeaky training on both perturbed versions of the first `n_examples`
/// training examples, for one epoch.
pub fn run_leakage_diagnostic<T: Scalar>(
    exp: &Experiment<'_, T>,
    n_examples: usize,
) -> Result<LeakageDiagnostic> {
    let n = n_examples.min(exp.train.len());
    let subset = Dataset::new(exp.train.examples[..n].to_vec());
    let cfg = TrainConfig {
        mode: SupervisionMode::OracleLeaky,
        epochs: 1,
        ..exp.train_cfg.clone()
    };
    let run = |p: Perturbation| -> Result<DiagnosticTrace> {
        log::info!("diagnostic: {p}");
        let data = make_perturbed_triplets(&subset, p, cfg.seed)?;
        Ok(DiagnosticTrace::from_trace(
            p,
            &exp.train(&cfg, &data)?.trace,
        ))
    };
    Ok(LeakageDiagnostic {
        wrong_query: run(Perturbation::WrongQuery)?,
        wrong_target: run(Perturbation::WrongTarget)?,
        batch_size: cfg.batch_size,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: AlphaRatio,
    pub result: std::result::Result<EvalReport, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSweep {
    pub rows: Vec<SweepRow>,
}

impl AlphaSweep {
    pub fn to_table(&self, fingerprint: &str, seed: u64) -> ReportTable {
        let mut t = ReportTable::new(
            "alpha_sweep",
            &["ratio", "p_at_1", "r_at_5", "holdout_p_at_1", "status"],
        )
        .with_meta("fingerprint", fingerprint)
        .with_meta("seed", seed);
        for row in &self.rows {
            let cells = match &row.result {
                Ok(r) => vec![
                    row.ratio.to_string(),
                    fmt_num(r.overall.p_at_1),
                    fmt_num(r.overall.r_at_5),
                    fmt_num(r.holdout.p_at_1),
                    "ok".to_string(),
                ],
                Err(msg) => vec![
                    row.ratio.to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    format!("aborted: {msg}"),
                ],
            };
            t.push(cells).expect("fixed width");
        }
        t
    }
}

/// Order for sweep tables: LM-heavy ratios first, pure contrastive last.
fn sweep_key(r: &AlphaRatio) -> f64 {
    let a = r.alpha();
    -(a.lm / a.con.max(f64::MIN_POSITIVE))
}

/// One SelfGenerated run per distinct ratio, evaluated with reasoning.
pub fn run_alpha_sweep<T: Scalar>(
    exp: &Experiment<'_, T>,
    ratios: &[AlphaRatio],
) -> Result<AlphaSweep> {
    if ratios.is_empty() {
        return Err(Error::Config("alpha sweep needs at least one ratio".into()));
    }
    let mut unique: Vec<AlphaRatio> = Vec::new();
    for r in ratios {
        if unique.iter().any(|u| u.alpha() == r.alpha()) {
            log::warn!("duplicate alpha ratio {r} ignored");
        } else {
            unique.push(r.clone());
        }
    }
    unique.sort_by(|a, b| sweep_key(a).total_cmp(&sweep_key(b)));
    let mut rows = Vec::new();
    for ratio in unique {
        log::info!("sweep: ratio {ratio}");
        let cfg = TrainConfig {
            mode: SupervisionMode::SelfGenerated,
            alpha: ratio.clone(),
            ..exp.train_cfg.clone()
        };
        let result = exp
            .train(&cfg, exp.train)
            .and_then(|out| exp.evaluate(&out.model, true))
            .map_err(|e| {
                log::warn!("ratio {ratio} aborted: {e}");
                e.to_string()
            });
        rows.push(SweepRow { ratio, result });
    }
    Ok(AlphaSweep { rows })
}
