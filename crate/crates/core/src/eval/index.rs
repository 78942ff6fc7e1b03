use crate::error::{contract, Error, Result};
use crate::model::{Model, TokenId};
use crate::tensor::Scalar;

/// Anything that maps token sequences to embeddings.
pub trait Embedder: Sync {
    /// Query-side embedding, with or without writing a rationale first.
    /// Returns the vector and the rationale length.
    fn embed_query(
        &self,
        query: &[TokenId],
        reasoning: bool,
        max_new: usize,
    ) -> Result<(Vec<f64>, usize)>;

    /// Candidate embeddings, pre-filled with `<emb>`.
    fn embed_candidates(&self, candidates: &[&[TokenId]]) -> Result<Vec<Vec<f64>>>;
}

impl<T: Scalar> Embedder for Model<T> {
    fn embed_query(
        &self,
        query: &[TokenId],
        reasoning: bool,
        max_new: usize,
    ) -> Result<(Vec<f64>, usize)> {
        if reasoning {
            let (e, r) = self.embed_with_reasoning(query, max_new)?;
            Ok((e.to_f64_vec(), r.len()))
        } else {
            Ok((self.embed_direct(query)?.to_f64_vec(), 0))
        }
    }

    fn embed_candidates(&self, candidates: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .embed_direct_many(candidates)?
            .iter()
            .map(|t| t.to_f64_vec())
            .collect())
    }
}

/// Candidate-side reasoning: every candidate writes its own rationale.
pub struct ReasoningCandidates<'a, E>(pub &'a E, pub usize);

impl<E: Embedder> Embedder for ReasoningCandidates<'_, E> {
    fn embed_query(
        &self,
        query: &[TokenId],
        reasoning: bool,
        max_new: usize,
    ) -> Result<(Vec<f64>, usize)> {
        self.0.embed_query(query, reasoning, max_new)
    }

    fn embed_candidates(&self, candidates: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
        candidates
            .iter()
            .map(|c| Ok(self.0.embed_query(c, true, self.1)?.0))
            .collect()
    }
}

/// Candidate embeddings with their ids and norms.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    ids: Vec<usize>,
    rows: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

impl RetrievalIndex {
    pub fn new(ids: Vec<usize>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(contract("index needs at least one candidate"));
        }
        if ids.len() != rows.len() {
            return Err(contract("one id per candidate"));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(contract("candidate ids must be unique"));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(contract("candidate embeddings differ in width"));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite candidate embedding".into()));
        }
        let norms = rows
            .iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        Ok(Self { ids, rows, norms })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    /// Cosine similarity of `query` with every candidate, in index order.
    pub fn scores(&self, query: &[f64]) -> Vec<f64> {
        let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.rows
            .iter()
            .zip(&self.norms)
            .map(|(r, &n)| {
                if qn == 0.0 || n == 0.0 {
                    0.0
                } else {
                    r.iter().zip(query).map(|(a, b)| a * b).sum::<f64>() / (qn * n)
                }
            })
            .collect()
    }
}

/// Embeds every candidate (with `<emb>` pre-filled); ids are input positions.
pub fn build_index<E: Embedder + ?Sized>(
    embedder: &E,
    candidates: &[&[TokenId]],
) -> Result<RetrievalIndex> {
    let rows = embedder.embed_candidates(candidates).map_err(|e| match e {
        Error::Length { len, max } => Error::Task(format!(
            "candidate of length {len} exceeds the maximum of {max}"
        )),
        other => other,
    })?;
    RetrievalIndex::new((0..candidates.len()).collect(), rows)
}

/// The `k` best candidate ids by descending cosine similarity; ties go to
/// the smaller id.
pub fn top_k(index: &RetrievalIndex, query: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > index.len() {
        return Err(contract(format!("k = {k} outside 1..={}", index.len())));
    }
    if query.len() != index.rows[0].len() {
        return Err(Error::Shape {
            op: "top_k",
            lhs: vec![query.len()],
            rhs: vec![index.rows[0].len()],
        });
    }
    let scores = index.scores(query);
    let mut order: Vec<usize> = (0..index.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(index.ids[a].cmp(&index.ids[b]))
    });
    Ok(order[..k].iter().map(|&i| index.ids[i]).collect())
}
