use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::OptimizerState;
use super::step::{compute_step, train_step};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, Model};
use crate::objectives::Alpha;
use crate::task::{Dataset, ExampleTriple};
use crate::tensor::Scalar;

/// Loss record of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub lm_loss: f64,
    pub con_loss: f64,
    pub total: f64,
    /// Mean self-generated rationale length in the batch (0 in other modes).
    pub generated_len: f64,
    /// Seconds since the run started; excluded from exported files.
    #[serde(skip)]
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Same losses, ignoring wall time.
    pub fn same_losses(&self, other: &TrainTrace) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                (a.step, a.lm_loss, a.con_loss, a.total, a.generated_len)
                    == (b.step, b.lm_loss, b.con_loss, b.total, b.generated_len)
            })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lm_loss,con_loss,total,generated_len\n");
        for r in &self.records {
            writeln!(
                s,
                "{},{},{},{},{}",
                r.step, r.lm_loss, r.con_loss, r.total, r.generated_len
            )
            .expect("write to string");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_csv().as_bytes())
    }

    /// Mean self-generated rationale length over all steps.
    pub fn mean_generated_len(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.generated_len).sum::<f64>() / self.records.len() as f64
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Deterministic shuffled batches for one epoch. A trailing batch of one is
/// topped up with the epoch's first example so every batch has negatives.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if let Some(last) = batches.last_mut() {
        if last.len() == 1 && n > 1 {
            last.push(order[0]);
        }
    }
    batches
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Where and how often to write checkpoints.
#[derive(Debug, Clone, Default)]
pub struct CheckpointPolicy {
    pub dir: Option<PathBuf>,
    pub every: usize,
}

impl CheckpointPolicy {
    pub fn model_path(dir: &Path, step: usize) -> PathBuf {
        dir.join(format!("step-{step:06}.ckpt"))
    }

    pub fn optimizer_path(model_path: &Path) -> PathBuf {
        let mut s = model_path.as_os_str().to_owned();
        s.push(".opt");
        PathBuf::from(s)
    }
}

/// Model plus optimizer, the unit written at checkpoints.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub opt: OptimizerState<T>,
}

impl<T: Scalar> TrainState<T> {
    pub fn fresh(model: Model<T>) -> Self {
        let opt = OptimizerState::new(&model.params);
        Self { model, opt }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.model, path)?;
        self.opt.save(&CheckpointPolicy::optimizer_path(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model = load_checkpoint(path)?;
        let opt_path = CheckpointPolicy::optimizer_path(path);
        if !opt_path.exists() {
            return Err(Error::Missing(format!(
                "optimizer state {}",
                opt_path.display()
            )));
        }
        let opt = OptimizerState::load(&opt_path, &model.params)?;
        Ok(Self { model, opt })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub trace: TrainTrace,
    /// Checkpoints written, in order.
    pub checkpoints: Vec<PathBuf>,
}

fn with_step(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
        other => other,
    }
}

/// LM-only warm-up: the query side learns to write the oracle rationale
/// followed by `<emb>`, the target side to close with `<emb>`.
pub fn cold_start<T: Scalar>(
    model: Model<T>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Task("cold start needs a nonempty dataset".into()));
    }
    let mut state = TrainState::fresh(model);
    let mut trace = TrainTrace::default();
    let start = Instant::now();
    let seed = cfg.seed ^ 0xC01D_57A7;
    let mut epoch = 0u64;
    let mut queue: Vec<Vec<usize>> = Vec::new();
    for step in 0..cfg.cold_start_steps {
        if queue.is_empty() {
            queue = epoch_batches(data.len(), cfg.batch_size, seed, epoch);
            queue.reverse();
            epoch += 1;
        }
        let idx = queue.pop().expect("nonempty queue");
        let batch: Vec<&ExampleTriple> = idx.iter().map(|&i| &data.examples[i]).collect();
        let g = compute_step(&state.model, &batch, cfg.mode, Alpha::lm_only(), cfg)
            .map_err(|e| with_step(e, step))?;
        state
            .opt
            .update(
                &mut state.model.params,
                &g.grads,
                cfg.cold_start_lr,
                &cfg.optimizer,
            )
            .map_err(|e| with_step(e, step))?;
        trace.records.push(TraceRecord {
            step,
            lm_loss: g.losses.lm_loss,
            con_loss: 0.0,
            total: g.losses.total,
            generated_len: 0.0,
            wall_time: start.elapsed().as_secs_f64(),
        });
        if step % 50 == 0 {
            log::info!("cold start step {step}: lm {:.4}", g.losses.lm_loss);
        }
    }
    Ok(TrainOutcome {
        model: state.model,
        trace,
        checkpoints: Vec::new(),
    })
}

/// Joint training for `cfg.epochs` epochs from `init`.
pub fn run_training<T: Scalar>(
    init: Model<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    policy: &CheckpointPolicy,
) -> Result<TrainOutcome<T>> {
    train_from(TrainState::fresh(init), data, cfg, policy)
}

/// Continues a run from a checkpoint written by [`run_training`]; the trace
/// holds only the remaining steps.
pub fn resume_training<T: Scalar>(
    checkpoint: &Path,
    data: &Dataset,
    cfg: &TrainConfig,
    policy: &CheckpointPolicy,
) -> Result<TrainOutcome<T>> {
    train_from(TrainState::load(checkpoint)?, data, cfg, policy)
}

fn train_from<T: Scalar>(
    mut state: TrainState<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    policy: &CheckpointPolicy,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::Task(format!(
            "training needs at least 2 examples, got {}",
            data.len()
        )));
    }
    let spe = steps_per_epoch(data.len(), cfg.batch_size);
    let total = spe * cfg.epochs;
    let first = state.opt.step as usize;
    if first > total {
        return Err(Error::Config(format!(
            "checkpoint is at step {first}, beyond the {total} steps of this run"
        )));
    }
    let mut trace = TrainTrace::default();
    let mut checkpoints = Vec::new();
    let start = Instant::now();
    let mut batches = Vec::new();
    for step in first..total {
        let (epoch, b) = (step / spe, step % spe);
        if b == 0 || batches.is_empty() {
            batches = epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch as u64);
        }
        let batch: Vec<&ExampleTriple> = batches[b].iter().map(|&i| &data.examples[i]).collect();
        let g = train_step(&mut state.model, &mut state.opt, &batch, cfg)
            .map_err(|e| with_step(e, step))?;
        trace.records.push(TraceRecord {
            step,
            lm_loss: g.losses.lm_loss,
            con_loss: g.losses.con_loss,
            total: g.losses.total,
            generated_len: g.mean_generated_len,
            wall_time: start.elapsed().as_secs_f64(),
        });
        if step % 20 == 0 {
            log::info!(
                "{} step {step}/{total}: lm {:.4} con {:.4} gen {:.1}",
                cfg.mode,
                g.losses.lm_loss,
                g.losses.con_loss,
                g.mean_generated_len
            );
        }
        if let Some(dir) = &policy.dir {
            let done = step + 1;
            if (policy.every > 0 && done % policy.every == 0) || done == total {
                let path = CheckpointPolicy::model_path(dir, done);
                state.save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(TrainOutcome {
        model: state.model,
        trace,
        checkpoints,
    })
}
