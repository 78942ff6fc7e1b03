use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{finite_diff_check, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn nce(q: &Tensor<f64>, t: &Tensor<f64>, tau: f64) -> f64 {
    let mut tape = Tape::no_grad();
    let (q, t) = (tape.constant(q.clone()), tape.constant(t.clone()));
    let l = info_nce(&mut tape, q, t, tau).unwrap();
    tape.value(l).item().unwrap()
}

#[test]
fn scaled_logits_examples() {
    let mut tape = Tape::<f64>::new();
    let e = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let l = temp_scaled_logits(&mut tape, e, e, 1.0).unwrap();
    assert_eq!(tape.value(l).data(), &[1.0, 0.0, 0.0, 1.0]);
    let l = temp_scaled_logits(&mut tape, e, e, 0.5).unwrap();
    assert_eq!(tape.value(l).data(), &[2.0, 0.0, 0.0, 2.0]);
    let l = temp_scaled_logits(&mut tape, e, e, 0.03).unwrap();
    let v = tape.value(l).data();
    assert!((v[0] - 100.0 / 3.0).abs() < 1e-12 && v[1] == 0.0);
    assert!(matches!(
        temp_scaled_logits(&mut tape, e, e, 0.0),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        temp_scaled_logits(&mut tape, e, e, -1.0),
        Err(Error::Config(_))
    ));
}

#[test]
fn info_nce_hand_values() {
    let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    assert!((nce(&e, &e, 1.0) - expected).abs() < 1e-12);
    assert!((expected - 0.3133).abs() < 1e-4);
}

#[test]
fn info_nce_is_ln_b_at_uniform_similarity() {
    for b in [2usize, 8, 32] {
        let same = Tensor::full(&[b, 5], 0.7);
        assert!(
            (nce(&same, &same, 0.03) - (b as f64).ln()).abs() < 1e-5,
            "B={b}"
        );
    }
}

#[test]
fn info_nce_needs_negatives() {
    let mut tape = Tape::<f64>::new();
    let one = tape.constant(Tensor::full(&[1, 3], 1.0));
    assert!(matches!(
        info_nce(&mut tape, one, one, 0.1),
        Err(Error::Batch(1))
    ));
}

#[test]
fn info_nce_does_not_overflow_at_small_tau() {
    let q = random(&[6, 4], 1);
    let l = nce(&q, &q, 0.001);
    assert!(l.is_finite() && l >= 0.0);
}

#[test]
fn info_nce_gradient_matches_finite_differences() {
    let report = finite_diff_check(
        |tape, p| info_nce(tape, p[0], p[1], 0.5),
        &[random(&[4, 8], 2), random(&[4, 8], 3)],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

proptest! {
    #[test]
    fn info_nce_is_scale_invariant(seed in 0u64..500, c in 0.01f64..100.0) {
        let q = random(&[5, 6], seed);
        let t = random(&[5, 6], seed + 1000);
        let scale = |x: &Tensor<f64>| Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect()).unwrap();
        let base = nce(&q, &t, 0.03);
        prop_assert!(base >= 0.0);
        prop_assert!((nce(&scale(&q), &scale(&t), 0.03) - base).abs() < 1e-5);
    }

    #[test]
    fn info_nce_is_permutation_equivariant(seed in 0u64..500) {
        let q = random(&[6, 4], seed);
        let t = random(&[6, 4], seed + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..6).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let permute = |x: &Tensor<f64>| {
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| x.row(i).to_vec()).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        prop_assert!((nce(&permute(&q), &permute(&t), 0.1) - nce(&q, &t, 0.1)).abs() < 1e-6);
    }
}

#[test]
fn lm_loss_examples() {
    let mut tape = Tape::<f64>::new();
    let uniform = tape.constant(Tensor::zeros(&[3, 64]));
    let (l, n) = lm_loss(&mut tape, uniform, &[5, 0, 63], &[true, false, true]).unwrap();
    assert_eq!(n, 2);
    assert!((tape.value(l).item().unwrap() - 64f64.ln()).abs() < 1e-12);

    let mut sharp = Tensor::zeros(&[2, 4]);
    sharp.data_mut()[1] = 50.0;
    sharp.data_mut()[4 + 3] = 50.0;
    let sharp = tape.constant(sharp);
    let (l, _) = lm_loss(&mut tape, sharp, &[1, 3], &[true, true]).unwrap();
    assert!(tape.value(l).item().unwrap() < 1e-20);

    assert!(matches!(
        lm_loss(&mut tape, sharp, &[1, 3], &[false, false]),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        lm_loss(&mut tape, sharp, &[1], &[true]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn lm_loss_gradient_matches_finite_differences() {
    let report = finite_diff_check(
        |tape, p| {
            Ok(lm_loss(
                tape,
                p[0],
                &[1, 0, 4, 2, 3],
                &[true, false, true, true, false],
            )?
            .0)
        },
        &[random(&[5, 6], 4)],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

fn scalar(tape: &mut Tape<f64>, v: f64) -> Var {
    tape.constant(Tensor::scalar(v))
}

#[test]
fn weighted_lm_loss_examples() {
    let mut tape = Tape::<f64>::new();
    let (a, b) = (scalar(&mut tape, 2.5), scalar(&mut tape, 2.5));
    let w = weighted_lm_loss(&mut tape, (a, 7), (b, 1)).unwrap();
    assert!((tape.value(w).item().unwrap() - 2.5).abs() < 1e-12);

    let (a, b) = (scalar(&mut tape, 2.0), scalar(&mut tape, 0.0));
    let w = weighted_lm_loss(&mut tape, (a, 3), (b, 1)).unwrap();
    assert_eq!(tape.value(w).item().unwrap(), 1.5);

    assert!(matches!(
        weighted_lm_loss(&mut tape, (a, 0), (b, 1)),
        Err(Error::Contract(_))
    ));
}

#[test]
fn weighted_lm_loss_equals_union_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..20 {
        let mut tape = Tape::<f64>::new();
        let rows = 9;
        let logits = tape.constant(random(&[rows, 11], seed));
        let targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..11)).collect();
        let q_mask: Vec<bool> = (0..rows)
            .map(|i| i < 6 && rng.gen_bool(0.7) || i == 0)
            .collect();
        let t_mask: Vec<bool> = (0..rows).map(|i| i == rows - 1).collect();
        let union: Vec<bool> = q_mask.iter().zip(&t_mask).map(|(a, b)| *a || *b).collect();
        let q = lm_loss(&mut tape, logits, &targets, &q_mask).unwrap();
        let t = lm_loss(&mut tape, logits, &targets, &t_mask).unwrap();
        let w = weighted_lm_loss(&mut tape, q, t).unwrap();
        let (u, _) = lm_loss(&mut tape, logits, &targets, &union).unwrap();
        let diff = tape.value(w).item().unwrap() - tape.value(u).item().unwrap();
        assert!(diff.abs() < 1e-6);
    }
}

#[test]
fn alpha_ratios() {
    let r: AlphaRatio = "1:10".parse().unwrap();
    let a = r.alpha();
    assert!((a.lm - 1.0 / 11.0).abs() < 1e-15 && (a.con - 10.0 / 11.0).abs() < 1e-15);
    assert!((joint_breakdown(11.0, 0.0, a, 1, 1).total - 1.0).abs() < 1e-12);

    let zero: AlphaRatio = "0".parse().unwrap();
    assert_eq!(zero.alpha(), Alpha { lm: 0.0, con: 1.0 });
    assert_eq!(joint_breakdown(3.0, 0.25, zero.alpha(), 1, 1).total, 0.25);

    assert!("0:0".parse::<AlphaRatio>().is_err());
    assert!("-1:2".parse::<AlphaRatio>().is_err());
    assert!("5".parse::<AlphaRatio>().is_err());
    assert!("a:b".parse::<AlphaRatio>().is_err());
    assert_eq!("100:1".parse::<AlphaRatio>().unwrap().to_string(), "100:1");
}

#[test]
fn joint_loss_symmetry_and_linearity() {
    let a = Alpha::new(2.0, 3.0).unwrap();
    let swapped = Alpha::new(3.0, 2.0).unwrap();
    for (lm, con) in [(0.5, 4.0), (1.0, 1.0), (7.0, 0.0)] {
        let x = joint_breakdown(lm, con, a, 1, 1).total;
        assert!((x - joint_breakdown(con, lm, swapped, 1, 1).total).abs() < 1e-12);
    }
    let f = |lm: f64| joint_breakdown(lm, 2.0, a, 1, 1).total;
    assert!(((f(3.0) - f(1.0)) - 2.0 * (f(2.0) - f(1.0))).abs() < 1e-12);

    let mut tape = Tape::<f64>::new();
    let (l, c) = (scalar(&mut tape, 1.5), scalar(&mut tape, 0.5));
    let j = joint_loss(&mut tape, l, c, a).unwrap();
    let expect = joint_breakdown(1.5, 0.5, a, 1, 1);
    assert!((tape.value(j).item().unwrap() - expect.total).abs() < 1e-12);
    assert!(expect.is_finite());
}
