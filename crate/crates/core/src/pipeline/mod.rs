//! Run configuration, on-disk artifacts and the end-to-end experiment run.

mod config;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{
    env_overrides, parse_assignment, set_path, DiagnosticConfig, EvalConfig, RunConfig,
    SweepConfig, ENV_PREFIX, LOG_ENV,
};

use crate::error::{Error, Result};
use crate::eval::{
    build_eval_set, emit_report, fmt_num, run_alpha_sweep, run_leakage_diagnostic,
    run_supervision_comparison, AlphaSweep, EvalReport, Experiment, LeakageDiagnostic, ReportTable,
    SupervisionComparison,
};
use crate::model::{save_checkpoint, Model, TokenId};
use crate::task::{
    generate_split, read_jsonl, write_jsonl, DataConfig, Dataset, Family, Split, Vocab, EMB,
};
use crate::tensor::{DType, Scalar};
use crate::train::{cold_start, write_file, TrainConfig, TrainTrace};

/// Runs `f` on a pool of `threads` workers (0: rayon's default).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn train_path(dir: &Path) -> PathBuf {
    dir.join("train.jsonl")
}

pub fn eval_path(dir: &Path) -> PathBuf {
    dir.join("eval.jsonl")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VocabFile {
    fingerprint: String,
    tokens: Vec<String>,
}

/// Generates both splits and writes them, plus `vocab.json`, into `dir`.
pub fn gen_data(cfg: &DataConfig, dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = generate_split(cfg, Split::Train)?;
    let eval = generate_split(cfg, Split::Eval)?;
    write_jsonl(&train, &train_path(dir))?;
    write_jsonl(&eval, &eval_path(dir))?;
    let vocab = Vocab::new();
    let file = VocabFile {
        fingerprint: vocab.fingerprint(),
        tokens: (0..vocab.len() as TokenId)
            .map(|i| vocab.name(i).unwrap_or("?").to_string())
            .collect(),
    };
    write_json(&dir.join("vocab.json"), &file)?;
    Ok((train, eval))
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Missing(format!(
            "{} not found; {hint}",
            path.display()
        )))
    }
}

/// Reads one split written by [`gen_data`].
pub fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    let path = match split {
        Split::Train => train_path(dir),
        Split::Eval => eval_path(dir),
    };
    require(&path, "run gen-data first")?;
    read_jsonl(&path)
}

/// Reads a checkpoint, naming the command that produces it when absent.
pub fn require_checkpoint<T: Scalar>(path: &Path, hint: &str) -> Result<Model<T>> {
    require(path, hint)?;
    crate::model::load_checkpoint(path)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Reproduction stamp written next to every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub fingerprint: String,
    pub precision: DType,
    pub version: String,
    pub vocab_fingerprint: String,
}

impl Manifest {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            seed: cfg.seed,
            fingerprint: cfg.fingerprint(),
            precision: cfg.precision,
            version: env!("CARGO_PKG_VERSION").to_string(),
            vocab_fingerprint: Vocab::new().fingerprint(),
        }
    }
}

/// How well the cold-started model learned the output format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColdStartSummary {
    pub steps: usize,
    pub lm_first: f64,
    pub lm_last: f64,
    /// Fraction of audited queries whose greedy rationale ends in `<emb>`
    /// within the generation budget.
    pub termination_rate: f64,
    pub n_audited: usize,
}

/// Fraction of `queries` for which greedy decoding emits `<emb>` within
/// `max_new` tokens.
pub fn termination_rate<T: Scalar>(
    model: &Model<T>,
    queries: &[&[TokenId]],
    max_new: usize,
) -> Result<f64> {
    use rayon::prelude::*;
    if queries.is_empty() {
        return Ok(0.0);
    }
    let hits = queries
        .par_iter()
        .map(|q| {
            let budget = max_new.min(model.config.max_seq.saturating_sub(q.len() + 1));
            let r = model.greedy_generate(q, EMB, budget)?;
            Ok(usize::from(r.len() <= budget))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / queries.len() as f64)
}

impl ColdStartSummary {
    pub fn new<T: Scalar>(
        model: &Model<T>,
        trace: &TrainTrace,
        eval: &Dataset,
        max_new: usize,
    ) -> Result<Self> {
        let queries: Vec<&[TokenId]> = eval.examples.iter().map(|e| e.query.as_slice()).collect();
        Ok(Self {
            steps: trace.len(),
            lm_first: trace.records.first().map_or(f64::NAN, |r| r.lm_loss),
            lm_last: trace.records.last().map_or(f64::NAN, |r| r.lm_loss),
            termination_rate: termination_rate(model, &queries, max_new)?,
            n_audited: queries.len(),
        })
    }
}

/// A named standalone evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedEval {
    pub name: String,
    pub report: EvalReport,
}

/// Machine-readable results of any subset of the experiments.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunResults {
    pub fingerprint: String,
    pub seed: u64,
    pub cold_start: Option<ColdStartSummary>,
    pub comparison: Option<SupervisionComparison>,
    pub diagnostic: Option<LeakageDiagnostic>,
    pub sweep: Option<AlphaSweep>,
    #[serde(default)]
    pub evals: Vec<NamedEval>,
}

impl RunResults {
    pub fn new(fingerprint: &str, seed: u64) -> Self {
        Self {
            fingerprint: fingerprint.to_string(),
            seed,
            ..Self::default()
        }
    }

    /// Folds `other` into `self`; later sections replace earlier ones.
    pub fn merge(&mut self, other: RunResults) {
        if other.cold_start.is_some() {
            self.cold_start = other.cold_start;
        }
        if other.comparison.is_some() {
            self.comparison = other.comparison;
        }
        if other.diagnostic.is_some() {
            self.diagnostic = other.diagnostic;
        }
        if other.sweep.is_some() {
            self.sweep = other.sweep;
        }
        self.evals.extend(other.evals);
    }

    pub fn tables(&self) -> Vec<ReportTable> {
        let (fp, seed) = (self.fingerprint.as_str(), self.seed);
        let mut out = Vec::new();
        if let Some(c) = &self.cold_start {
            let mut t = ReportTable::new(
                "cold_start",
                &[
                    "steps",
                    "lm_first",
                    "lm_last",
                    "termination_rate",
                    "n_audited",
                ],
            )
            .with_meta("fingerprint", fp)
            .with_meta("seed", seed);
            t.push(vec![
                c.steps.to_string(),
                fmt_num(c.lm_first),
                fmt_num(c.lm_last),
                fmt_num(c.termination_rate),
                c.n_audited.to_string(),
            ])
            .expect("fixed width");
            out.push(t);
        }
        if let Some(c) = &self.comparison {
            out.push(c.to_table(fp).with_meta("seed", seed));
            out.push(c.ablation_table(fp).with_meta("seed", seed));
        }
        if let Some(d) = &self.diagnostic {
            out.push(d.summary_table(fp, seed));
            out.push(d.curves_table(fp, seed));
        }
        if let Some(s) = &self.sweep {
            out.push(s.to_table(fp, seed));
        }
        if !self.evals.is_empty() {
            let mut cols = vec![
                "name",
                "reasoning",
                "n_queries",
                "p_at_1",
                "r_at_5",
                "holdout_p_at_1",
            ];
            let fam_cols: Vec<String> = Family::ALL.iter().map(|f| format!("{f}_p_at_1")).collect();
            cols.extend(fam_cols.iter().map(String::as_str));
            let mut t = ReportTable::new("evaluations", &cols)
                .with_meta("fingerprint", fp)
                .with_meta("seed", seed);
            for e in &self.evals {
                let r = &e.report;
                let mut row = vec![
                    e.name.clone(),
                    if r.reasoning { "on" } else { "off" }.to_string(),
                    r.n_queries.to_string(),
                    fmt_num(r.overall.p_at_1),
                    fmt_num(r.overall.r_at_5),
                    fmt_num(r.holdout.p_at_1),
                ];
                row.extend(Family::ALL.iter().map(|f| {
                    r.per_family
                        .get(f)
                        .map_or(String::new(), |m| fmt_num(m.p_at_1))
                }));
                t.push(row).expect("fixed width");
            }
            out.push(t);
        }
        out
    }
}

/// Writes the tables of `results` into `dir`.
pub fn write_report(results: &RunResults, dir: &Path) -> Result<Vec<PathBuf>> {
    let tables = results.tables();
    if tables.is_empty() {
        return Err(Error::Missing(
            "results contain no experiment output".into(),
        ));
    }
    emit_report(&tables, dir)
}

/// Artifacts of a full run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub fingerprint: String,
    pub results: RunResults,
    pub report_files: Vec<PathBuf>,
}

/// Data generation, cold start, supervision comparison with the reasoning
/// ablation, leakage diagnostic, optional alpha sweep and the report, all
/// under `out_dir/<fingerprint>`.
pub fn run_all(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let threads = cfg.threads;
    with_threads(threads, || match cfg.precision {
        DType::F32 => run_all_typed::<f32>(&cfg),
        DType::F64 => run_all_typed::<f64>(&cfg),
    })?
}

fn run_all_typed<T: Scalar>(cfg: &RunConfig) -> Result<RunSummary> {
    let fp = cfg.fingerprint();
    let dir = cfg.run_dir();
    log::info!("run directory {}", dir.display());
    write_file(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    write_json(&dir.join("manifest.json"), &Manifest::new(cfg))?;

    let (train, eval) = gen_data(&cfg.data, &dir.join("data"))?;
    let items = build_eval_set(&eval, cfg.eval.pool_size, cfg.seed)?;

    let init = Model::<T>::init(cfg.model)?;
    let cold = cold_start(init, &train, &cfg.train)?;
    save_checkpoint(&cold.model, &dir.join("models").join("cold.ckpt"))?;
    cold.trace
        .write_csv(&dir.join("traces").join("cold_start.csv"))?;
    let mut results = RunResults::new(&fp, cfg.seed);
    results.cold_start = Some(ColdStartSummary::new(
        &cold.model,
        &cold.trace,
        &eval,
        cfg.train.max_new_tokens,
    )?);

    let exp = Experiment {
        cold: &cold.model,
        train: &train,
        eval: &items,
        train_cfg: &cfg.train,
        target_reasoning: cfg.eval.target_reasoning,
        fingerprint: &fp,
    };
    results.comparison = Some(run_supervision_comparison(
        &exp,
        &cfg.comparison_seeds(),
        Some(&dir.join("models")),
    )?);

    if cfg.diagnostic.enabled {
        let diag_cfg = diagnostic_train_config(cfg);
        let diag = Experiment {
            train_cfg: &diag_cfg,
            ..exp
        };
        results.diagnostic = Some(run_leakage_diagnostic(&diag, cfg.diagnostic.n_examples)?);
    }
    if cfg.sweep.enabled {
        results.sweep = Some(run_alpha_sweep(&exp, &cfg.sweep.ratios)?);
    }

    write_json(&dir.join("results.json"), &results)?;
    let report_files = write_report(&results, &dir.join("report"))?;
    Ok(RunSummary {
        dir,
        fingerprint: fp,
        results,
        report_files,
    })
}

/// Training settings of the leakage diagnostic.
pub fn diagnostic_train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        alpha: cfg.diagnostic.alpha.clone(),
        learning_rate: cfg.diagnostic.learning_rate,
        ..cfg.train.clone()
    }
}

#[cfg(test)]
mod tests;
