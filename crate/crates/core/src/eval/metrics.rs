use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::index::{build_index, top_k, Embedder};
use crate::error::Result;
use crate::model::TokenId;
use crate::task::{
    make_candidate_pool, parse_query, CandidatePool, Dataset, ExampleTriple, Family,
};

/// One evaluation query and its candidate pool.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub query: Vec<TokenId>,
    pub family: Family,
    pub holdout: bool,
    pub pool: CandidatePool,
}

/// Builds a pool of `pool_size` candidates for every example.
pub fn build_eval_set(data: &Dataset, pool_size: usize, seed: u64) -> Result<Vec<EvalItem>> {
    data.examples
        .par_iter()
        .map(|ex: &ExampleTriple| {
            let pool = make_candidate_pool(ex, pool_size.saturating_sub(1), seed)?;
            let (_, rule) = parse_query(&ex.query)?;
            Ok(EvalItem {
                query: ex.query.clone(),
                family: ex.family,
                holdout: rule.is_holdout(),
                pool,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub p_at_1: f64,
    pub r_at_5: f64,
}

#[derive(Default)]
struct Counts {
    n: usize,
    hit1: usize,
    hit5: usize,
}

impl Counts {
    fn add(&mut self, rank: usize) {
        self.n += 1;
        self.hit1 += usize::from(rank == 0);
        self.hit5 += usize::from(rank < 5);
    }

    fn metrics(&self) -> Metrics {
        let frac = |k: usize| {
            if self.n == 0 {
                0.0
            } else {
                k as f64 / self.n as f64
            }
        };
        Metrics {
            n: self.n,
            p_at_1: frac(self.hit1),
            r_at_5: frac(self.hit5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub reasoning: bool,
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub reasoning: bool,
    pub n_queries: usize,
    pub overall: Metrics,
    pub per_family: BTreeMap<Family, Metrics>,
    /// Queries whose rule arguments never occur in training.
    pub holdout: Metrics,
    pub mean_rationale_len: f64,
    pub fingerprint: String,
}

/// Rank of the true target (0 = first) for every query, plus rationale
/// lengths. Queries run in parallel; results keep input order.
pub fn rank_queries<E: Embedder + ?Sized>(
    embedder: &E,
    items: &[EvalItem],
    opts: EvalOptions,
) -> Result<Vec<(usize, usize)>> {
    items
        .par_iter()
        .map(|item| {
            let cands: Vec<&[TokenId]> = item.pool.candidates.iter().map(Vec::as_slice).collect();
            let index = build_index(embedder, &cands)?;
            let (q, rlen) =
                embedder.embed_query(&item.query, opts.reasoning, opts.max_new_tokens)?;
            let ranking = top_k(&index, &q, index.len())?;
            let rank = ranking
                .iter()
                .position(|&id| id == item.pool.target_index)
                .expect("target is in the pool");
            Ok((rank, rlen))
        })
        .collect()
}

/// Precision@1 and Recall@5 per family, overall and on held-out rules.
pub fn evaluate<E: Embedder + ?Sized>(
    embedder: &E,
    items: &[EvalItem],
    opts: EvalOptions,
    fingerprint: &str,
) -> Result<EvalReport> {
    let ranks = rank_queries(embedder, items, opts)?;
    let mut overall = Counts::default();
    let mut holdout = Counts::default();
    let mut fams: BTreeMap<Family, Counts> = BTreeMap::new();
    let mut rlen = 0usize;
    for (item, &(rank, len)) in items.iter().zip(&ranks) {
        overall.add(rank);
        fams.entry(item.family).or_default().add(rank);
        if item.holdout {
            holdout.add(rank);
        }
        rlen += len;
    }
    Ok(EvalReport {
        reasoning: opts.reasoning,
        n_queries: items.len(),
        overall: overall.metrics(),
        per_family: fams.into_iter().map(|(f, c)| (f, c.metrics())).collect(),
        holdout: holdout.metrics(),
        mean_rationale_len: if items.is_empty() {
            0.0
        } else {
            rlen as f64 / items.len() as f64
        },
        fingerprint: fingerprint.to_string(),
    })
}
