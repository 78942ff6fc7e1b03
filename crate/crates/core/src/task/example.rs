use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::oracle::make_oracle_rationale;
use super::rule::{apply_rule, render_query, Family, Rule};
use super::scene::{Object, Scene, MAX_OBJECTS};
use super::vocab::{N_COLORS, N_SHAPES, N_SIZES};
use crate::model::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

/// One query/target pair with its oracle rationale.
///
/// The rationale is only reachable through [`ExampleTriple::oracle_rationale`],
/// which bumps an attached access counter so tests can prove a code path
/// never looked at it.
#[derive(Debug, Clone)]
pub struct ExampleTriple {
    pub example_id: u64,
    pub family: Family,
    pub split: Split,
    pub query: Vec<TokenId>,
    pub target: Vec<TokenId>,
    oracle_rationale: Vec<TokenId>,
    probe: Option<Arc<AtomicUsize>>,
}

impl PartialEq for ExampleTriple {
    fn eq(&self, other: &Self) -> bool {
        self.example_id == other.example_id
            && self.family == other.family
            && self.split == other.split
            && self.query == other.query
            && self.target == other.target
            && self.oracle_rationale == other.oracle_rationale
    }
}

impl ExampleTriple {
    pub fn new(
        example_id: u64,
        family: Family,
        split: Split,
        query: Vec<TokenId>,
        target: Vec<TokenId>,
        oracle_rationale: Vec<TokenId>,
    ) -> Self {
        Self {
            example_id,
            family,
            split,
            query,
            target,
            oracle_rationale,
            probe: None,
        }
    }

    pub fn oracle_rationale(&self) -> &[TokenId] {
        if let Some(p) = &self.probe {
            p.fetch_add(1, Ordering::Relaxed);
        }
        &self.oracle_rationale
    }

    /// Field access that does not count as a read (serialization, shuffling).
    pub(crate) fn rationale_unprobed(&self) -> &[TokenId] {
        &self.oracle_rationale
    }

    pub(crate) fn set_probe(&mut self, probe: Option<Arc<AtomicUsize>>) {
        self.probe = probe;
    }
}

/// Per-example generator: independent of every other example, so any
/// parallel schedule yields the same dataset.
pub fn example_rng(global_seed: u64, example_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(global_seed);
    rng.set_stream(example_id);
    rng
}

fn random_object(rng: &mut impl Rng) -> Object {
    Object::new(
        rng.gen_range(0..N_SHAPES) as u8,
        rng.gen_range(0..N_COLORS) as u8,
        rng.gen_range(0..N_SIZES) as u8,
    )
}

/// Uniform random scene with `n` objects.
pub fn random_scene(rng: &mut impl Rng, n: usize) -> Scene {
    Scene::new((0..n).map(|_| random_object(rng)).collect()).expect("valid scene")
}

/// Probability that a rule argument is taken from an object in the scene
/// rather than drawn uniformly.
const PRESENT_ARG_PROB: f64 = 0.9;

fn sample_rule(family: Family, rng: &mut impl Rng) -> (Scene, Rule) {
    loop {
        match family {
            Family::Recolor => {
                let n = rng.gen_range(1..=MAX_OBJECTS);
                let scene = random_scene(rng, n);
                let from = if rng.gen_bool(PRESENT_ARG_PROB) {
                    scene.objects.choose(rng).expect("nonempty").color
                } else {
                    rng.gen_range(0..N_COLORS) as u8
                };
                let to = (from as usize + rng.gen_range(1..N_COLORS)) % N_COLORS;
                return (scene, Rule::Recolor { from, to: to as u8 });
            }
            Family::Remove => {
                let n = rng.gen_range(2..=MAX_OBJECTS);
                let scene = random_scene(rng, n);
                let shape = if rng.gen_bool(PRESENT_ARG_PROB) {
                    scene.objects.choose(rng).expect("nonempty").shape
                } else {
                    rng.gen_range(0..N_SHAPES) as u8
                };
                if scene.objects.iter().any(|o| o.shape != shape) {
                    return (scene, Rule::Remove { shape });
                }
            }
            Family::Select => {
                let n = rng.gen_range(1..=MAX_OBJECTS);
                let scene = random_scene(rng, n);
                let pick = *scene.objects.choose(rng).expect("nonempty");
                let rule = Rule::Select {
                    shape: pick.shape,
                    color: pick.color,
                };
                if scene.objects.iter().filter(|o| rule.affects(o)).count() == 1 {
                    return (scene, rule);
                }
            }
        }
    }
}

/// Draws a consistent triple. Training examples never use held-out rule
/// arguments; evaluation examples sample the full space.
pub fn make_example(
    family: Family,
    global_seed: u64,
    example_id: u64,
    split: Split,
) -> ExampleTriple {
    let mut rng = example_rng(global_seed, example_id);
    let (scene, rule) = loop {
        let (scene, rule) = sample_rule(family, &mut rng);
        if split == Split::Eval || !rule.is_holdout() {
            break (scene, rule);
        }
    };
    let target = apply_rule(&scene, &rule).expect("sampled rules are applicable");
    let rationale =
        make_oracle_rationale(&scene, &rule, &target).expect("consistent by construction");
    ExampleTriple::new(
        example_id,
        family,
        split,
        render_query(&scene, &rule),
        target.render(),
        rationale,
    )
}
