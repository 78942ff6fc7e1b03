use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    /// `(q, r_o, t_w)`: targets are swapped between examples.
    WrongTarget,
    /// `(q_w, r_o, t)`: queries are swapped, rationale and target stay paired.
    WrongQuery,
}

impl Perturbation {
    pub fn as_str(self) -> &'static str {
        match self {
            Perturbation::WrongTarget => "wrong_target",
            Perturbation::WrongQuery => "wrong_query",
        }
    }
}

impl std::fmt::Display for Perturbation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Perturbation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wrong_target" => Ok(Perturbation::WrongTarget),
            "wrong_query" => Ok(Perturbation::WrongQuery),
            other => Err(Error::Config(format!("unknown perturbation {other:?}"))),
        }
    }
}

/// Derangement of `0..n`: a cyclic shift over a shuffled order, then a
/// repair pass that swaps away any assignment whose content equals the
/// original (`same(i, j)` says whether sources `i` and `j` carry equal
/// content).
fn derangement(n: usize, seed: u64, same: impl Fn(usize, usize) -> bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut sigma = vec![0; n];
    for k in 0..n {
        sigma[order[k]] = order[(k + 1) % n];
    }
    for i in 0..n {
        if !same(i, sigma[i]) {
            continue;
        }
        if let Some(j) = (0..n).find(|&j| j != i && !same(i, sigma[j]) && !same(j, sigma[i])) {
            sigma.swap(i, j);
        }
    }
    sigma
}

/// Replaces each example's target (or query) with another example's.
pub fn make_perturbed_triplets(
    dataset: &Dataset,
    mode: Perturbation,
    seed: u64,
) -> Result<Dataset> {
    let n = dataset.len();
    if n < 2 {
        return Err(Error::Task(format!(
            "perturbation needs at least 2 examples, got {n}"
        )));
    }
    let ex = &dataset.examples;
    let mut out = dataset.clone();
    match mode {
        Perturbation::WrongTarget => {
            let sigma = derangement(n, seed, |i, j| ex[i].target == ex[j].target);
            for (i, e) in out.examples.iter_mut().enumerate() {
                e.target = ex[sigma[i]].target.clone();
            }
        }
        Perturbation::WrongQuery => {
            let sigma = derangement(n, seed, |i, j| ex[i].query == ex[j].query);
            for (i, e) in out.examples.iter_mut().enumerate() {
                e.query = ex[sigma[i]].query.clone();
            }
        }
    }
    Ok(out)
}
