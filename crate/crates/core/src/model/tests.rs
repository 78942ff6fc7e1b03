use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::task::EMB;
use crate::tensor::finite_diff_check;

fn small(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        d_model: 16,
        n_layers: 2,
        n_heads: 4,
        d_ff: 24,
        max_seq: 24,
        seed,
    }
}

/// Larger weights than the default init so that attention and logits are
/// far from uniform.
fn spiky<T: Scalar>(config: ModelConfig) -> Model<T> {
    let mut m = Model::<T>::init(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    for t in m.params.tensors_mut() {
        for v in t.data_mut() {
            *v += T::of_f64(rng.gen_range(-0.4..0.4));
        }
    }
    m
}

/// Final hidden state pinned to the first axis, which only `token`'s
/// embedding row has a component along, so every step predicts `token`.
fn always_emits(model: &mut Model<f64>, token: TokenId) {
    let d = model.config.d_model;
    let n = model.params.n_layers();
    let base = 2 + n * PER_LAYER;
    let ts = model.params.tensors_mut();
    ts[base].data_mut().fill(0.0);
    let bias = ts[base + 1].data_mut();
    bias.fill(0.0);
    bias[0] = 1.0;
    let table = ts[0].data_mut();
    for row in table.chunks_mut(d) {
        row[0] = 0.0;
    }
    table[token as usize * d] = 10.0;
}

fn random_tokens(rng: &mut impl Rng, len: usize, vocab: usize) -> Vec<TokenId> {
    (0..len)
        .map(|_| rng.gen_range(0..vocab) as TokenId)
        .collect()
}

#[test]
fn init_is_deterministic_per_seed() {
    let a = init_params::<f32>(&small(3)).unwrap();
    let b = init_params::<f32>(&small(3)).unwrap();
    let c = init_params::<f32>(&small(4)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn init_matches_layout_and_statistics() {
    let config = ModelConfig::default();
    let p = init_params::<f64>(&config).unwrap();
    let layout = Params::<f64>::layout(&config);
    assert_eq!(p.tensors().len(), layout.len());
    assert!(p.lnf_gain().data().iter().all(|&g| g == 1.0));
    assert!(p.layer(0, LayerField::Bq).data().iter().all(|&b| b == 0.0));
    let emb = p.tok_emb().data();
    let n = emb.len() as f64;
    let mean = emb.iter().sum::<f64>() / n;
    assert!(emb.len() >= 1000);
    assert!(mean.abs() < 3.0 * 0.02 / n.sqrt(), "mean {mean}");
    let var = emb.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!((var.sqrt() - 0.02).abs() < 0.002, "std {}", var.sqrt());
}

#[test]
fn invalid_config_is_rejected() {
    let mut c = small(0);
    c.n_heads = 5;
    assert!(matches!(Model::<f32>::init(c), Err(Error::Config(_))));
}

#[test]
fn forward_rejects_bad_input() {
    let m = Model::<f32>::init(small(0)).unwrap();
    assert!(matches!(m.forward_full(&[]), Err(Error::Contract(_))));
    assert!(matches!(
        m.forward_full(&[1; 25]),
        Err(Error::Length { len: 25, max: 24 })
    ));
    assert!(matches!(
        m.forward_full(&[1, 12]),
        Err(Error::Vocab { id: 12, .. })
    ));
}

#[test]
fn single_token_forward_has_one_row() {
    let m = Model::<f32>::init(small(0)).unwrap();
    let out = m.forward_full(&[3]).unwrap();
    assert_eq!(out.logits.shape(), &[1, 12]);
    assert_eq!(out.final_hidden.shape(), &[1, 16]);
}

#[test]
fn prefix_logits_ignore_later_tokens() {
    let m = spiky::<f64>(small(1));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let len = rng.gen_range(2..20);
        let a = random_tokens(&mut rng, len, 12);
        let mut b = a.clone();
        let j = rng.gen_range(1..len);
        b[j] = (b[j] + 1) % 12;
        let la = m.forward_full(&a).unwrap().logits;
        let lb = m.forward_full(&b).unwrap().logits;
        assert_eq!(&la.data()[..j * 12], &lb.data()[..j * 12]);
        assert_ne!(&la.data()[j * 12..], &lb.data()[j * 12..]);
    }
}

#[test]
fn first_step_matches_full_forward_exactly() {
    let m = spiky::<f32>(small(2));
    for t in 0..12 {
        let mut cache = KVCache::new(&m);
        let step = m.forward_step(t, &mut cache).unwrap();
        let full = m.forward_full(&[t]).unwrap();
        assert_eq!(step.logits, full.logits.data());
        assert_eq!(step.hidden, full.final_hidden.data());
        assert_eq!(cache.len(), 1);
    }
}

fn check_incremental<T: Scalar>(tol: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100u64 {
        let m = spiky::<T>(small(case));
        let len = rng.gen_range(1..=24);
        let seq = random_tokens(&mut rng, len, 12);
        let full = m.forward_full(&seq).unwrap();
        let mut cache = KVCache::new(&m);
        for (i, &t) in seq.iter().enumerate() {
            let step = m.forward_step(t, &mut cache).unwrap();
            for (a, b) in step.logits.iter().zip(full.logits.row(i)) {
                assert!(
                    (a.as_f64() - b.as_f64()).abs() <= tol,
                    "case {case} pos {i}"
                );
            }
            for (a, b) in step.hidden.iter().zip(full.final_hidden.row(i)) {
                assert!(
                    (a.as_f64() - b.as_f64()).abs() <= tol,
                    "case {case} pos {i}"
                );
            }
        }
        assert_eq!(cache.len(), len);
        assert!(cache.is_consistent());
    }
}

#[test]
fn incremental_decoding_matches_full_forward_f32() {
    check_incremental::<f32>(1e-5);
}

#[test]
fn incremental_decoding_matches_full_forward_f64() {
    check_incremental::<f64>(1e-10);
}

#[test]
fn cache_overflow_is_a_length_error() {
    let m = Model::<f32>::init(small(0)).unwrap();
    let mut cache = KVCache::new(&m);
    m.extend(&mut cache, &[1; 24]).unwrap();
    assert!(matches!(
        m.forward_step(1, &mut cache),
        Err(Error::Length { len: 25, max: 24 })
    ));
}

#[test]
fn greedy_generation_stops_and_forces_stop() {
    let mut m = spiky::<f64>(small(5));
    assert_eq!(m.greedy_generate(&[3, 4], EMB, 0).unwrap(), vec![EMB]);
    let a = m.greedy_generate(&[3, 4], 7, 10).unwrap();
    let b = m.greedy_generate(&[3, 4], 7, 10).unwrap();
    assert_eq!(a, b);
    assert_eq!(*a.last().unwrap(), 7);
    assert!(a.len() <= 11);
    assert!(a[..a.len() - 1].iter().all(|&t| t != 7));

    always_emits(&mut m, EMB);
    assert_eq!(m.greedy_generate(&[3, 4, 5], EMB, 10).unwrap(), vec![EMB]);
    always_emits(&mut m, 6);
    assert_eq!(
        m.greedy_generate(&[3], EMB, 4).unwrap(),
        vec![6, 6, 6, 6, EMB]
    );
}

#[test]
fn greedy_generation_matches_full_forward_argmax() {
    let m = spiky::<f64>(small(6));
    let prefix = vec![3, 9, 1];
    let out = m.greedy_generate(&prefix, 0, 8).unwrap();
    let mut seq = prefix.clone();
    for &t in &out[..out.len() - 1] {
        let full = m.forward_full(&seq).unwrap();
        let last = full.logits.row(seq.len() - 1);
        assert_eq!(kernels_argmax(last), t);
        seq.push(t);
    }
}

fn kernels_argmax(row: &[f64]) -> TokenId {
    crate::tensor::kernels::argmax(row) as TokenId
}

#[test]
fn embed_direct_is_last_hidden_row() {
    let m = spiky::<f32>(small(7));
    let x = vec![3, 5, 7, 9];
    let e = m.embed_direct(&x).unwrap();
    let mut with_emb = x.clone();
    with_emb.push(EMB);
    let full = m.forward_full(&with_emb).unwrap();
    assert_eq!(e.data(), full.final_hidden.row(4));
    assert_eq!(e, m.embed_direct(&x).unwrap());
    assert!(e.max_abs_diff(&m.embed_direct(&[5, 3, 7, 9]).unwrap()) > 1e-4);
    assert!(matches!(m.embed_direct(&with_emb), Err(Error::Contract(_))));
}

#[test]
fn batched_embedding_equals_single() {
    let m = spiky::<f64>(small(8));
    let xs: Vec<Vec<TokenId>> = vec![vec![3], vec![4, 5, 6], vec![7, 8]];
    let refs: Vec<&[TokenId]> = xs.iter().map(Vec::as_slice).collect();
    let many = m.embed_direct_many(&refs).unwrap();
    for (x, e) in xs.iter().zip(&many) {
        assert_eq!(*e, m.embed_direct(x).unwrap());
    }
}

#[test]
fn reasoning_embedding_equals_direct_over_rationale() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut nonempty = 0;
    for case in 0..100u64 {
        let m = spiky::<f32>(small(100 + case));
        let len = rng.gen_range(1..8);
        let q: Vec<TokenId> = (0..len).map(|_| rng.gen_range(3..12)).collect();
        let (e, r) = m.embed_with_reasoning(&q, 10).unwrap();
        assert!(!r.contains(&EMB));
        nonempty += usize::from(!r.is_empty());
        let mut full = q.clone();
        full.extend(&r);
        let d = m.embed_direct(&full).unwrap();
        assert!(
            e.max_abs_diff(&d) < 1e-5,
            "case {case}: {}",
            e.max_abs_diff(&d)
        );
    }
    assert!(nonempty > 50);
}

#[test]
fn immediate_emb_reduces_to_direct_embedding() {
    let mut m = spiky::<f64>(small(3));
    always_emits(&mut m, EMB);
    let q = vec![4, 5, 6];
    let (e, r) = m.embed_with_reasoning(&q, 10).unwrap();
    assert!(r.is_empty());
    assert!(e.max_abs_diff(&m.embed_direct(&q).unwrap()) < 1e-12);
}

#[test]
fn reasoning_embedding_checks_budget() {
    let m = Model::<f32>::init(small(0)).unwrap();
    assert!(matches!(
        m.embed_with_reasoning(&[3; 10], 14),
        Err(Error::Length { .. })
    ));
    assert!(m.embed_with_reasoning(&[3; 10], 13).is_ok());
}

#[test]
fn lm_loss_gradient_matches_finite_differences() {
    let config = ModelConfig {
        vocab_size: 7,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 12,
        max_seq: 8,
        seed: 4,
    };
    let model = spiky::<f64>(config);
    let seq: Vec<TokenId> = vec![1, 4, 2, 6, 3, 0];
    let targets: Vec<usize> = seq[1..].iter().map(|&t| t as usize).collect();
    let report = finite_diff_check(
        |tape, vars| {
            let pv = ParamVars::new(vars.to_vec(), config.n_layers);
            let h = forward_hidden(tape, &pv, &model, &Packed::single(&seq[..5]))?;
            let lg = logits(tape, &pv, h)?;
            let lp = tape.log_softmax(lg)?;
            let picked = tape.pick(lp, &targets)?;
            let m = tape.mean(picked)?;
            Ok(tape.scale(m, -1.0))
        },
        model.params.tensors(),
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-3, "{report:?}");
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let m = spiky::<f32>(small(12));
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    save_checkpoint(&m, &p1).unwrap();
    let loaded = load_checkpoint::<f32>(&p1).unwrap();
    assert_eq!(loaded, m);
    save_checkpoint(&loaded, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn checkpoint_detects_corruption_and_precision() {
    let dir = tempfile::tempdir().unwrap();
    let m = Model::<f64>::init(small(1)).unwrap();
    let p = dir.path().join("m.ckpt");
    save_checkpoint(&m, &p).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&p), Err(Error::Format(_))));
    let mut bytes = std::fs::read(&p).unwrap();
    bytes[40] ^= 1;
    std::fs::write(&p, &bytes).unwrap();
    let err = load_checkpoint::<f64>(&p).unwrap_err();
    assert!(err.to_string().contains("checksum"), "{err}");
    assert!(matches!(
        load_checkpoint::<f64>(&dir.path().join("missing")),
        Err(Error::Io { .. })
    ));
}
