//! Synthetic composed-retrieval benchmark.
//!
//! A query is a small scene of attributed objects followed by an edit rule;
//! its target is the edited scene. Each example carries an oracle rationale,
//! a fixed-grammar derivation of the target from the query.

mod dataset;
mod example;
mod oracle;
mod perturb;
mod pool;
mod rule;
mod scene;
mod vocab;

pub use dataset::{generate_split, read_jsonl, write_jsonl, DataConfig, Dataset};
pub use example::{example_rng, make_example, random_scene, ExampleTriple, Split};
pub use oracle::{
    make_oracle_rationale, parse_rationale_result, rationale_matches_query, MAX_RATIONALE_LEN,
};
pub use perturb::{make_perturbed_triplets, Perturbation};
pub use pool::{make_candidate_pool, CandidatePool};
pub use rule::{apply_rule, parse_families, parse_query, render_query, Family, Rule};
pub use scene::{Object, Scene, MAX_OBJECTS};
pub use vocab::*;

/// Longest query: a full scene plus a three-token rule.
pub const MAX_QUERY_LEN: usize = 4 * MAX_OBJECTS + 3;
