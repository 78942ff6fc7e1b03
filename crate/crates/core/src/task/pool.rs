use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use super::example::{example_rng, random_scene, ExampleTriple};
use super::rule::{apply_rule, parse_query, Rule};
use super::scene::{Object, Scene, MAX_OBJECTS};
use super::vocab::{N_COLORS, N_SHAPES};
use crate::error::{Error, Result};
use crate::model::TokenId;

/// Candidate targets for one query; exactly one equals the true target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidatePool {
    pub candidates: Vec<Vec<TokenId>>,
    pub target_index: usize,
}

/// Outcomes of the same rule family with a wrong argument.
fn wrong_argument_scenes(scene: &Scene, rule: &Rule) -> Vec<Scene> {
    let mut out = Vec::new();
    match *rule {
        Rule::Recolor { from, to } => {
            for c in (0..N_COLORS as u8).filter(|&c| c != from && c != to) {
                out.extend(apply_rule(scene, &Rule::Recolor { from, to: c }).ok());
            }
            for c in (0..N_COLORS as u8).filter(|&c| c != from && c != to) {
                out.extend(apply_rule(scene, &Rule::Recolor { from: c, to }).ok());
            }
        }
        Rule::Remove { shape } => {
            for s in (0..N_SHAPES as u8).filter(|&s| s != shape) {
                out.extend(apply_rule(scene, &Rule::Remove { shape: s }).ok());
            }
        }
        Rule::Select { shape, color } => {
            for o in scene.objects.iter().filter(|o| !rule.affects(o)) {
                out.extend(Scene::new(vec![*o]).ok());
            }
            for c in (0..N_COLORS as u8).filter(|&c| c != color) {
                let size = scene
                    .objects
                    .iter()
                    .find(|o| rule.affects(o))
                    .map_or(0, |o| o.size);
                out.extend(Scene::new(vec![Object::new(shape, c, size)]).ok());
            }
        }
    }
    out
}

/// Pool of `n_distractors + 1` distinct sequences: the target, the
/// untransformed scene, the rule applied with a wrong argument, and random
/// scenes with as many objects as the target. Shuffled by `seed`.
pub fn make_candidate_pool(
    ex: &ExampleTriple,
    n_distractors: usize,
    seed: u64,
) -> Result<CandidatePool> {
    if n_distractors < 2 {
        return Err(Error::Config(format!(
            "pool needs at least 2 distractors, got {n_distractors}"
        )));
    }
    let (scene, rule) = parse_query(&ex.query)?;
    let mut rng = example_rng(seed, ex.example_id);
    let mut seen: HashSet<Vec<TokenId>> = HashSet::new();
    seen.insert(ex.target.clone());
    let mut candidates = vec![ex.target.clone()];
    let mut offer = |seq: Vec<TokenId>, candidates: &mut Vec<Vec<TokenId>>| {
        if candidates.len() <= n_distractors && seen.insert(seq.clone()) {
            candidates.push(seq);
            true
        } else {
            false
        }
    };

    offer(scene.render(), &mut candidates);
    let mut wrong = wrong_argument_scenes(&scene, &rule);
    wrong.shuffle(&mut rng);
    for s in wrong {
        if offer(s.render(), &mut candidates) {
            break;
        }
    }
    let n_target = Scene::parse(&ex.target)?.objects.len();
    let mut attempts = 0usize;
    while candidates.len() <= n_distractors {
        let n = if attempts < 1000 {
            n_target
        } else {
            rng.gen_range(1..=MAX_OBJECTS)
        };
        offer(random_scene(&mut rng, n).render(), &mut candidates);
        attempts += 1;
    }
    candidates.shuffle(&mut rng);
    let target_index = candidates
        .iter()
        .position(|c| *c == ex.target)
        .expect("target kept in pool");
    Ok(CandidatePool {
        candidates,
        target_index,
    })
}
