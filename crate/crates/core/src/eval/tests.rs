use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, TokenId};
use crate::task::{
    apply_rule, generate_split, parse_query, DataConfig, Dataset, Family, Perturbation, Split,
    VOCAB_SIZE,
};
use crate::train::{SupervisionMode, TrainConfig};

fn tiny(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: VOCAB_SIZE,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_seq: 72,
        seed,
    }
}

fn eval_data(n: usize, seed: u64) -> Dataset {
    let cfg = DataConfig {
        seed,
        n_train: 0,
        n_eval: n,
        families: Family::ALL.to_vec(),
    };
    generate_split(&cfg, Split::Eval).unwrap()
}

fn one_hot(tokens: &[TokenId]) -> Vec<f64> {
    let mut v = vec![0.0; 72 * VOCAB_SIZE];
    for (i, &t) in tokens.iter().enumerate() {
        v[i * VOCAB_SIZE + t as usize] = 1.0;
    }
    v
}

/// Embeds a query as the one-hot encoding of its true target.
struct OracleEmbedder;

impl Embedder for OracleEmbedder {
    fn embed_query(&self, query: &[TokenId], _: bool, _: usize) -> Result<(Vec<f64>, usize)> {
        let (scene, rule) = parse_query(query)?;
        Ok((one_hot(&apply_rule(&scene, &rule)?.render()), 0))
    }

    fn embed_candidates(&self, candidates: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
        Ok(candidates.iter().map(|c| one_hot(c)).collect())
    }
}

fn brute_force(rows: &[Vec<f64>], q: &[f64]) -> Vec<usize> {
    let cos = |r: &[f64]| {
        let dot: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt()
            * q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            0.0
        } else {
            dot / n
        }
    };
    let mut ids: Vec<usize> = (0..rows.len()).collect();
    ids.sort_by(|&a, &b| {
        cos(&rows[b])
            .partial_cmp(&cos(&rows[a]))
            .unwrap()
            .then(a.cmp(&b))
    });
    ids
}

#[test]
fn top_k_matches_a_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rows: Vec<Vec<f64>> = (0..30)
        .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let index = RetrievalIndex::new((0..30).collect(), rows.clone()).unwrap();
    for _ in 0..100 {
        let q: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let full = brute_force(&rows, &q);
        for k in [1, 5, 30] {
            assert_eq!(top_k(&index, &q, k).unwrap(), full[..k]);
        }
    }
}

#[test]
fn ties_go_to_the_smaller_id() {
    let rows = vec![
        vec![1.0, 0.0],
        vec![2.0, 0.0],
        vec![0.0, 1.0],
        vec![3.0, 0.0],
    ];
    let index = RetrievalIndex::new(vec![9, 4, 1, 6], rows).unwrap();
    assert_eq!(top_k(&index, &[1.0, 0.0], 4).unwrap(), vec![4, 6, 9, 1]);
    let zero = RetrievalIndex::new(vec![3, 2], vec![vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
    assert_eq!(top_k(&zero, &[1.0, 1.0], 2).unwrap(), vec![2, 3]);
}

#[test]
fn top_k_rejects_bad_arguments() {
    let index = RetrievalIndex::new(vec![0, 1], vec![vec![1.0], vec![2.0]]).unwrap();
    assert!(matches!(top_k(&index, &[1.0], 0), Err(Error::Contract(_))));
    assert!(matches!(top_k(&index, &[1.0], 3), Err(Error::Contract(_))));
    assert!(matches!(
        top_k(&index, &[1.0, 2.0], 1),
        Err(Error::Shape { .. })
    ));
    assert!(RetrievalIndex::new(vec![], vec![]).is_err());
    assert!(RetrievalIndex::new(vec![0, 0], vec![vec![1.0], vec![1.0]]).is_err());
    assert!(RetrievalIndex::new(vec![0], vec![vec![f64::NAN]]).is_err());
    assert!(RetrievalIndex::new(vec![0, 1], vec![vec![1.0], vec![1.0, 2.0]]).is_err());
}

#[test]
fn query_equal_to_a_candidate_ranks_it_first() {
    let model = Model::<f64>::init(tiny(1)).unwrap();
    let data = eval_data(5, 1);
    let cands: Vec<&[TokenId]> = data.examples.iter().map(|e| e.target.as_slice()).collect();
    let index = build_index(&model, &cands).unwrap();
    for j in 0..index.len() {
        assert_eq!(top_k(&index, index.row(j), 1).unwrap(), vec![j]);
    }
}

#[test]
fn index_building_is_deterministic_and_handles_duplicates() {
    let model = Model::<f32>::init(tiny(2)).unwrap();
    let data = eval_data(3, 2);
    let t = data.examples[0].target.as_slice();
    let index = build_index(&model, &[t, data.examples[1].target.as_slice(), t]).unwrap();
    assert_eq!(index.row(0), index.row(2));
    assert_eq!(
        index,
        build_index(&model, &[t, data.examples[1].target.as_slice(), t]).unwrap()
    );
    let single = build_index(&model, &[t]).unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(top_k(&single, single.row(0), 1).unwrap(), vec![0]);
}

#[test]
fn overlong_candidate_is_a_task_error() {
    let model = Model::<f32>::init(ModelConfig {
        max_seq: 8,
        ..tiny(0)
    })
    .unwrap();
    let long = vec![3; 20];
    assert!(matches!(
        build_index(&model, &[long.as_slice()]),
        Err(Error::Task(_))
    ));
}

#[test]
fn oracle_embedder_is_perfect() {
    let items = build_eval_set(&eval_data(200, 3), 16, 3).unwrap();
    let opts = EvalOptions {
        reasoning: false,
        max_new_tokens: 48,
    };
    let r = evaluate(&OracleEmbedder, &items, opts, "fp").unwrap();
    assert_eq!(r.overall.p_at_1, 1.0);
    assert_eq!(r.overall.r_at_5, 1.0);
    assert_eq!(r.n_queries, 200);
    assert_eq!(r.per_family.values().map(|m| m.n).sum::<usize>(), 200);
    assert!(r.holdout.n > 0);
}

/// Independent pseudo-random vector per sequence.
struct HashEmbedder;

fn hashed(tokens: &[TokenId], salt: u64) -> Vec<f64> {
    let seed = tokens.iter().fold(salt, |h, &t| {
        h.wrapping_mul(1_000_003).wrapping_add(t as u64 + 1)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

impl Embedder for HashEmbedder {
    fn embed_query(&self, query: &[TokenId], _: bool, _: usize) -> Result<(Vec<f64>, usize)> {
        Ok((hashed(query, 1), 0))
    }

    fn embed_candidates(&self, candidates: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
        Ok(candidates.iter().map(|c| hashed(c, 2)).collect())
    }
}

#[test]
fn uninformative_embeddings_score_at_chance() {
    let items = build_eval_set(&eval_data(1500, 4), 16, 4).unwrap();
    let opts = EvalOptions {
        reasoning: false,
        max_new_tokens: 48,
    };
    let r = evaluate(&HashEmbedder, &items, opts, "").unwrap();
    let n = items.len() as f64;
    for (k, got) in [(1.0, r.overall.p_at_1), (5.0, r.overall.r_at_5)] {
        let p = k / 16.0;
        let sigma = (p * (1.0 - p) / n).sqrt();
        assert!((got - p).abs() <= 3.0 * sigma, "k={k}: {got}");
    }
}

#[test]
fn evaluation_is_deterministic() {
    let items = build_eval_set(&eval_data(40, 5), 8, 5).unwrap();
    let model = Model::<f64>::init(tiny(5)).unwrap();
    for reasoning in [false, true] {
        let opts = EvalOptions {
            reasoning,
            max_new_tokens: 8,
        };
        assert_eq!(
            evaluate(&model, &items, opts, "a").unwrap(),
            evaluate(&model, &items, opts, "a").unwrap()
        );
    }
}

/// Emits `<emb>` immediately, so reasoning writes nothing.
struct SilentEmbedder(Model<f64>);

impl Embedder for SilentEmbedder {
    fn embed_query(&self, query: &[TokenId], _: bool, _: usize) -> Result<(Vec<f64>, usize)> {
        self.0.embed_query(query, false, 0)
    }

    fn embed_candidates(&self, candidates: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
        self.0.embed_candidates(candidates)
    }
}

#[test]
fn empty_rationale_makes_reasoning_a_no_op() {
    let items = build_eval_set(&eval_data(30, 6), 8, 6).unwrap();
    let model = Model::<f64>::init(tiny(6)).unwrap();
    let opts = |reasoning| EvalOptions {
        reasoning,
        max_new_tokens: 0,
    };
    let on = rank_queries(&model, &items, opts(true)).unwrap();
    let off = rank_queries(&model, &items, opts(false)).unwrap();
    assert_eq!(on, off);
    let e = SilentEmbedder(model);
    let on = evaluate(&e, &items, opts(true), "").unwrap();
    let off = evaluate(&e, &items, opts(false), "").unwrap();
    assert_eq!(on.overall, off.overall);
    assert_eq!(on.mean_rationale_len, 0.0);
}

#[test]
fn candidate_reasoning_embeds_every_candidate_with_a_rationale() {
    let model = Model::<f64>::init(tiny(7)).unwrap();
    let data = eval_data(3, 7);
    let cands: Vec<&[TokenId]> = data.examples.iter().map(|e| e.target.as_slice()).collect();
    let rows = ReasoningCandidates(&model, 4)
        .embed_candidates(&cands)
        .unwrap();
    for (row, c) in rows.iter().zip(&cands) {
        let (e, _) = model.embed_with_reasoning(c, 4).unwrap();
        assert_eq!(row, &e.to_f64_vec());
    }
}

fn sample_table() -> ReportTable {
    let mut t = ReportTable::new("demo", &["name", "value"])
        .with_meta("fingerprint", "abc123")
        .with_meta("seed", 3);
    t.push(vec!["a, b".into(), fmt_num(0.5)]).unwrap();
    t.push(vec!["say \"hi\"".into(), fmt_num(1.0 / 3.0)])
        .unwrap();
    t
}

#[test]
fn markdown_round_trips() {
    let t = sample_table();
    assert_eq!(ReportTable::parse_markdown(&t.to_markdown()).unwrap(), t);
    assert_eq!(t.file_stem(), "demo-abc123");
    assert!(ReportTable::parse_markdown("nothing").is_err());
}

#[test]
fn csv_rows_have_constant_width() {
    let csv = sample_table().to_csv();
    let widths: Vec<usize> = csv
        .lines()
        .map(|l| {
            let mut n = 1;
            let mut quoted = false;
            for c in l.chars() {
                match c {
                    '"' => quoted = !quoted,
                    ',' if !quoted => n += 1,
                    _ => {}
                }
            }
            n
        })
        .collect();
    assert_eq!(widths, vec![4, 4, 4]);
    assert!(csv.starts_with("fingerprint,seed,name,value\nabc123,3,\"a, b\",0.5000\n"));
}

#[test]
fn push_rejects_wrong_width() {
    let mut t = ReportTable::new("x", &["a"]);
    assert!(matches!(t.push(vec![]), Err(Error::Contract(_))));
}

#[test]
fn emitting_twice_gives_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let tables = vec![sample_table(), ReportTable::new("empty", &["x"])];
    let fa = emit_report(&tables, a.path()).unwrap();
    let fb = emit_report(&tables, b.path()).unwrap();
    assert_eq!(fa.len(), 5);
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.file_name(), y.file_name());
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
    assert!(emit_report(&[], a.path()).is_err());
}

fn trace(points: Vec<(usize, f64, f64)>) -> DiagnosticTrace {
    DiagnosticTrace {
        perturbation: Perturbation::WrongQuery,
        points,
    }
}

#[test]
fn curve_summary_uses_tenth_windows() {
    let pts: Vec<_> = (0..20)
        .map(|i| (i, 10.0 - i as f64 * 0.1, 2.0 - i as f64 * 0.1))
        .collect();
    let s = trace(pts).summary();
    assert!((s.lm_initial - 9.95).abs() < 1e-12);
    assert!((s.lm_final - 8.15).abs() < 1e-12);
    assert!((s.con_initial - 1.95).abs() < 1e-12);
    assert!((s.con_final - 0.15).abs() < 1e-12);
    let one = trace(vec![(0, 2.0, 1.0)]).summary();
    assert_eq!((one.lm_initial, one.lm_final), (2.0, 2.0));
    assert_eq!(one.lm_reduction(), 0.0);
}

#[test]
fn diagnostic_flags_follow_the_thresholds() {
    let ln8 = 8f64.ln();
    let flat = |v: f64, c: f64, c2: f64| {
        trace(
            (0..10)
                .map(|i| (i, v, if i == 0 { c } else { c2 }))
                .collect(),
        )
    };
    let d = LeakageDiagnostic {
        wrong_query: flat(2.0, 2.0, 0.5),
        wrong_target: flat(2.0, ln8, ln8 * 1.1),
        batch_size: 8,
    };
    assert!(d.wrong_query_shortcut());
    assert!(d.wrong_target_at_chance());
    let d = LeakageDiagnostic {
        wrong_query: flat(2.0, 2.0, 1.5),
        wrong_target: flat(2.0, ln8, ln8 * 0.5),
        batch_size: 8,
    };
    assert!(!d.wrong_query_shortcut());
    assert!(!d.wrong_target_at_chance());
    assert_eq!(d.summary_table("f", 0).rows.len(), 2);
    assert_eq!(d.curves_table("f", 0).rows.len(), 20);
}

fn report(p: f64, hold: f64) -> EvalReport {
    EvalReport {
        reasoning: false,
        n_queries: 10,
        overall: Metrics {
            n: 10,
            p_at_1: p,
            r_at_5: p,
        },
        per_family: Default::default(),
        holdout: Metrics {
            n: 5,
            p_at_1: hold,
            r_at_5: hold,
        },
        mean_rationale_len: 0.0,
        fingerprint: String::new(),
    }
}

fn row(mode: SupervisionMode, off: f64, on: f64) -> ModeRow {
    ModeRow {
        mode,
        seed: 0,
        result: Ok(ModeRun {
            off: report(off, off),
            on: report(on, on),
            final_lm_loss: 0.0,
            final_con_loss: 0.0,
            mean_generated_len: 0.0,
        }),
    }
}

#[test]
fn ordering_uses_the_headline_of_each_mode() {
    let c = SupervisionComparison {
        rows: vec![
            row(SupervisionMode::Baseline, 0.50, 0.10),
            row(SupervisionMode::OracleLeaky, 0.40, 0.90),
            row(SupervisionMode::SelfGenerated, 0.10, 0.55),
        ],
    };
    let m = OrderingMargins::default();
    assert_eq!(c.ordering_holds(0, m), Some(true));
    assert_eq!(c.reasoning_helps_holdout(0), Some(true));
    assert_eq!(c.ordering_holds(1, m), None);
    assert_eq!(c.seeds(), vec![0]);
    assert_eq!(c.to_table("f").rows.len(), 3);
    let mut failed = c.clone();
    failed.rows[0].result = Err("diverged".into());
    assert_eq!(failed.ordering_holds(0, m), None);
    assert!(failed.to_table("f").rows[0]
        .last()
        .unwrap()
        .contains("diverged"));
    let tight = SupervisionComparison {
        rows: vec![
            row(SupervisionMode::Baseline, 0.50, 0.0),
            row(SupervisionMode::OracleLeaky, 0.46, 0.0),
            row(SupervisionMode::SelfGenerated, 0.0, 0.51),
        ],
    };
    assert_eq!(tight.ordering_holds(0, m), Some(false));
}

#[test]
fn sweep_deduplicates_and_orders_ratios() {
    let cfg = DataConfig {
        seed: 8,
        n_train: 6,
        n_eval: 6,
        families: Family::ALL.to_vec(),
    };
    let train = generate_split(&cfg, Split::Train).unwrap();
    let items = build_eval_set(&generate_split(&cfg, Split::Eval).unwrap(), 4, 8).unwrap();
    let cold = Model::<f32>::init(tiny(8)).unwrap();
    let tc = TrainConfig {
        batch_size: 3,
        epochs: 1,
        max_new_tokens: 4,
        cold_start_steps: 0,
        ..TrainConfig::default()
    };
    let exp = Experiment {
        cold: &cold,
        train: &train,
        eval: &items,
        train_cfg: &tc,
        target_reasoning: false,
        fingerprint: "f",
    };
    let ratios: Vec<_> = ["0", "1:1", "2:2", "10:1"]
        .iter()
        .map(|r| r.parse().unwrap())
        .collect();
    let sweep = run_alpha_sweep(&exp, &ratios).unwrap();
    let names: Vec<String> = sweep.rows.iter().map(|r| r.ratio.to_string()).collect();
    assert_eq!(names, vec!["10:1", "1:1", "0"]);
    assert!(sweep.rows.iter().all(|r| r.result.is_ok()));
    assert!(run_alpha_sweep(&exp, &[]).is_err());
    assert_eq!(sweep.to_table("f", 8).rows.len(), 3);
}

#[test]
fn diagnostic_traces_have_equal_length() {
    let cfg = DataConfig {
        seed: 9,
        n_train: 12,
        n_eval: 0,
        families: Family::ALL.to_vec(),
    };
    let train = generate_split(&cfg, Split::Train).unwrap();
    let cold = Model::<f32>::init(tiny(9)).unwrap();
    let tc = TrainConfig {
        batch_size: 4,
        cold_start_steps: 0,
        ..TrainConfig::default()
    };
    let exp = Experiment {
        cold: &cold,
        train: &train,
        eval: &[],
        train_cfg: &tc,
        target_reasoning: false,
        fingerprint: "f",
    };
    let d = run_leakage_diagnostic(&exp, 8).unwrap();
    assert_eq!(d.wrong_query.points.len(), 2);
    assert_eq!(d.wrong_query.points.len(), d.wrong_target.points.len());
    assert_eq!(d.batch_size, 4);
}

proptest! {
    #[test]
    fn top_k_is_a_prefix_of_the_full_ranking(
        rows in prop::collection::vec(prop::collection::vec(-4i8..4, 3), 1..12),
        q in prop::collection::vec(-4i8..4, 3),
    ) {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        let q: Vec<f64> = q.iter().map(|&v| v as f64).collect();
        let index = RetrievalIndex::new((0..rows.len()).collect(), rows.clone()).unwrap();
        let full = top_k(&index, &q, rows.len()).unwrap();
        let mut sorted = full.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..rows.len()).collect::<Vec<_>>());
        for k in 1..=rows.len() {
            prop_assert_eq!(&top_k(&index, &q, k).unwrap()[..], &full[..k]);
        }
    }

    #[test]
    fn scores_ignore_positive_rescaling(
        rows in prop::collection::vec(prop::collection::vec(-4.0f64..4.0, 3), 1..8),
        q in prop::collection::vec(-4.0f64..4.0, 3),
        s in 0.1f64..10.0,
    ) {
        let index = RetrievalIndex::new((0..rows.len()).collect(), rows.clone()).unwrap();
        let scaled: Vec<f64> = q.iter().map(|v| v * s).collect();
        for (a, b) in index.scores(&q).iter().zip(index.scores(&scaled)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
