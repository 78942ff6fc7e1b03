use rayon::prelude::*;

use super::config::{SupervisionMode, TrainConfig};
use super::optim::OptimizerState;
use crate::error::{Error, Result};
use crate::model::{forward_hidden, logits, Model, Packed, TokenId};
use crate::objectives::{info_nce, joint_loss, nll_rows, weighted_lm_loss, Alpha, LossBreakdown};
use crate::task::{ExampleTriple, EMB};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Query-side sequences of one example under a supervision mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryPlan {
    /// Sequence ending in `<emb>` whose last hidden state is the anchor.
    pub anchor: Vec<TokenId>,
    /// `[q, r_o, <emb>]` when the query side carries LM supervision.
    pub lm: Option<Vec<TokenId>>,
    /// Index of the first supervised position in `lm` (predicting `r_o[0]`).
    pub lm_start: usize,
    /// Length of the self-generated rationale (without `<emb>`).
    pub generated_len: usize,
}

fn with_emb(parts: &[&[TokenId]]) -> Vec<TokenId> {
    let mut s: Vec<TokenId> = parts.concat();
    s.push(EMB);
    s
}

/// Builds the query-side sequences. Only the rationale modes touch the
/// oracle rationale; SelfGenerated runs a no-grad greedy generation.
pub fn build_query_forward<T: Scalar>(
    mode: SupervisionMode,
    ex: &ExampleTriple,
    model: &Model<T>,
    max_new: usize,
) -> Result<QueryPlan> {
    let q = ex.query.as_slice();
    let lm_start = q.len() - 1;
    let plan = match mode {
        SupervisionMode::Baseline => QueryPlan {
            anchor: with_emb(&[q]),
            lm: None,
            lm_start,
            generated_len: 0,
        },
        SupervisionMode::OracleLeaky => {
            let seq = with_emb(&[q, ex.oracle_rationale()]);
            QueryPlan {
                anchor: seq.clone(),
                lm: Some(seq),
                lm_start,
                generated_len: 0,
            }
        }
        SupervisionMode::SelfGenerated => {
            let mut r = model.greedy_generate(q, EMB, max_new)?;
            r.pop();
            QueryPlan {
                anchor: with_emb(&[q, &r]),
                lm: Some(with_emb(&[q, ex.oracle_rationale()])),
                lm_start,
                generated_len: r.len(),
            }
        }
    };
    for s in std::iter::once(&plan.anchor).chain(&plan.lm) {
        if s.len() > model.config.max_seq {
            return Err(Error::Length {
                len: s.len(),
                max: model.config.max_seq,
            });
        }
    }
    Ok(plan)
}

/// The anchor embedding a plan yields (no-grad).
pub fn plan_anchor<T: Scalar>(model: &Model<T>, plan: &QueryPlan) -> Result<Tensor<T>> {
    let body = &plan.anchor[..plan.anchor.len() - 1];
    model.embed_direct(body)
}

/// Gradients and losses of one batch, before any parameter update.
#[derive(Debug, Clone)]
pub struct StepGrads<T> {
    pub losses: LossBreakdown,
    pub grads: Vec<Tensor<T>>,
    pub mean_generated_len: f64,
}

/// Row bookkeeping for the packed forward.
#[derive(Default)]
struct Rows {
    q_lm: Vec<usize>,
    q_lm_targets: Vec<usize>,
    t_lm: Vec<usize>,
    anchors: Vec<usize>,
    targets: Vec<usize>,
}

fn add_lm(
    packed: &mut Packed,
    seq: &[TokenId],
    start: usize,
    rows: &mut Vec<usize>,
    targets: &mut Vec<usize>,
) {
    let seg = packed.push(seq);
    for i in start..seq.len() - 1 {
        rows.push(seg.start + i);
        targets.push(seq[i + 1] as usize);
    }
}

/// One packed forward/backward pass over the batch.
///
/// `alpha.con == 0` gives the LM-only cold-start objective, where the query
/// side always carries oracle LM supervision and no anchors are built.
pub fn compute_step<T: Scalar>(
    model: &Model<T>,
    batch: &[&ExampleTriple],
    mode: SupervisionMode,
    alpha: Alpha,
    cfg: &TrainConfig,
) -> Result<StepGrads<T>> {
    let contrastive = alpha.con > 0.0;
    if contrastive && batch.len() < 2 {
        return Err(Error::Batch(batch.len()));
    }
    let plans: Vec<QueryPlan> = if contrastive {
        batch
            .par_iter()
            .map(|ex| build_query_forward(mode, ex, model, cfg.max_new_tokens))
            .collect::<Result<_>>()?
    } else {
        batch
            .iter()
            .map(|ex| build_query_forward(SupervisionMode::OracleLeaky, ex, model, 0))
            .collect::<Result<_>>()?
    };

    let mut packed = Packed::new();
    let mut rows = Rows::default();
    for (ex, plan) in batch.iter().zip(&plans) {
        let shared_anchor = mode == SupervisionMode::OracleLeaky || !contrastive;
        if let Some(lm) = &plan.lm {
            add_lm(
                &mut packed,
                lm,
                plan.lm_start,
                &mut rows.q_lm,
                &mut rows.q_lm_targets,
            );
            if shared_anchor {
                rows.anchors.push(packed.rows() - 1);
            }
        }
        if contrastive && !shared_anchor {
            let seg = packed.push(&plan.anchor);
            rows.anchors.push(seg.last());
        }
        let t = with_emb(&[&ex.target]);
        let seg = packed.push(&t);
        rows.t_lm.push(seg.last() - 1);
        rows.targets.push(seg.last());
    }

    let mut tape = Tape::new();
    let pv = model.params.bind(&mut tape, true);
    let hidden = forward_hidden(&mut tape, &pv, model, &packed)?;

    let t_targets = vec![EMB as usize; rows.t_lm.len()];
    let th = tape.select_rows(hidden, &rows.t_lm)?;
    let tl = logits(&mut tape, &pv, th)?;
    let lt = nll_rows(&mut tape, tl, &t_targets)?;
    let nq = rows.q_lm.len();
    let lm = if nq > 0 {
        let qh = tape.select_rows(hidden, &rows.q_lm)?;
        let ql = logits(&mut tape, &pv, qh)?;
        let lq = nll_rows(&mut tape, ql, &rows.q_lm_targets)?;
        weighted_lm_loss(&mut tape, (lq, nq), (lt, rows.t_lm.len()))?
    } else {
        lt
    };
    let con = if contrastive {
        let a = tape.select_rows(hidden, &rows.anchors)?;
        let t = tape.select_rows(hidden, &rows.targets)?;
        Some(info_nce(&mut tape, a, t, cfg.tau)?)
    } else {
        None
    };
    let total = match con {
        Some(c) => joint_loss(&mut tape, lm, c, alpha)?,
        None => lm,
    };
    let value = |v: Var| tape.value(v).data()[0].as_f64();
    let losses = LossBreakdown {
        lm_loss: value(lm),
        con_loss: con.map_or(0.0, value),
        total: value(total),
        n_q_tokens: nq,
        n_t_tokens: rows.t_lm.len(),
    };
    if !losses.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {losses:?}")));
    }
    tape.backward(total)?;
    let grads = pv
        .all()
        .iter()
        .zip(model.params.tensors())
        .map(|(&v, p)| {
            tape.take_grad(v)
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect();
    let mean_generated_len = if mode == SupervisionMode::SelfGenerated && contrastive {
        plans.iter().map(|p| p.generated_len as f64).sum::<f64>() / plans.len() as f64
    } else {
        0.0
    };
    Ok(StepGrads {
        losses,
        grads,
        mean_generated_len,
    })
}

/// Forward, backward and one optimizer update.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut OptimizerState<T>,
    batch: &[&ExampleTriple],
    cfg: &TrainConfig,
) -> Result<StepGrads<T>> {
    let step = compute_step(model, batch, cfg.mode, cfg.alpha.alpha(), cfg)?;
    opt.update(
        &mut model.params,
        &step.grads,
        cfg.learning_rate,
        &cfg.optimizer,
    )?;
    if !model.params.is_finite() {
        return Err(Error::Numeric(format!(
            "parameters became non-finite at step {}",
            opt.step
        )));
    }
    Ok(step)
}
