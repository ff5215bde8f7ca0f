mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::checks::{self, tensor, unit_rows};
use common::oracle::{self, Rows};
use viewco::losses::{
    info_nce, multilabel_prompt_loss, seg_consistency_loss, single_view_text_loss, text_views_loss, TAU_INIT,
};
use viewco::{Error, Tape, Tensor};

#[test]
fn losses_match_loop_oracles() {
    let v = checks::loss_oracles(60, 1e-9);
    assert!(v.passed, "{}", v.detail);
}

#[test]
fn identity_matching_minimizes_segment_loss() {
    let v = checks::diagonal_minimality(25);
    assert!(v.passed, "{}", v.detail);
}

#[test]
fn text_views_pair_counts() {
    let v = checks::structural_counts();
    assert!(v.passed, "{}", v.detail);
}

fn seg(sets: &[Vec<Rows>; 4], tau: f64) -> f64 {
    let tape = Tape::<f64>::new();
    let vars: Vec<Vec<_>> = sets.iter().map(|s| s.iter().map(|r| tape.constant(tensor(r))).collect()).collect();
    let lt = tape.constant(Tensor::scalar(tau.ln()));
    seg_consistency_loss(&vars[0], &vars[1], &vars[2], &vars[3], lt).unwrap().total.item()
}

fn tv(iu: &Rows, iv: &Rows, t: &Rows, tau: f64) -> f64 {
    let tape = Tape::<f64>::new();
    let c = |r: &Rows| tape.constant(tensor(r));
    text_views_loss(c(iu), c(iv), c(t), tape.constant(Tensor::scalar(tau.ln()))).unwrap().total.item()
}

fn ml(iu: &Rows, iv: &Rows, prompts: &Rows, m: usize, tau: f64) -> f64 {
    let tape = Tape::<f64>::new();
    let c = |r: &Rows| tape.constant(tensor(r));
    let lt = tape.constant(Tensor::scalar(tau.ln()));
    multilabel_prompt_loss(c(iu), c(iv), c(prompts), m, lt).unwrap().total.item()
}

#[test]
fn info_nce_worked_example() {
    // Orthogonal keys at τ = 1: −ln(e / (e + 1 + 1)).
    let tape = Tape::<f64>::new();
    let q = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
    let keys = tape.constant(Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, -1.0]).unwrap());
    let got = info_nce(q, keys, 0, tape.constant(Tensor::scalar(0.0))).unwrap().item();
    let e = 1f64.exp();
    assert!((got - (-(e / (e + 2.0)).ln())).abs() < 1e-12);
}

#[test]
fn single_key_gives_zero() {
    let tape = Tape::<f64>::new();
    let q = tape.constant(Tensor::matrix(1, 2, vec![0.6, 0.8]).unwrap());
    let k = tape.constant(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap());
    let got = info_nce(q, k, 0, tape.constant(Tensor::scalar(TAU_INIT.ln()))).unwrap().item();
    assert!(got.abs() < 1e-15);
}

#[test]
fn batch_of_one_has_no_negatives() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (iu, iv, t) = (unit_rows(&mut rng, 1, 4), unit_rows(&mut rng, 1, 4), unit_rows(&mut rng, 1, 4));
    assert!(tv(&iu, &iv, &t, 0.07).abs() < 1e-15);
    let prompts = unit_rows(&mut rng, 3, 4);
    assert!(ml(&iu, &iv, &prompts, 3, 0.07).abs() < 1e-15);
}

#[test]
fn one_prompt_reduces_to_text_views() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (iu, iv, t) = (unit_rows(&mut rng, 4, 6), unit_rows(&mut rng, 4, 6), unit_rows(&mut rng, 4, 6));
    // With M = 1 each direction is the text-views term halved.
    assert!((ml(&iu, &iv, &t, 1, 0.2) - 0.5 * tv(&iu, &iv, &t, 0.2)).abs() < 1e-12);
}

#[test]
fn single_view_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (i, t) = (unit_rows(&mut rng, 3, 5), unit_rows(&mut rng, 3, 5));
    let tape = Tape::<f64>::new();
    let lt = tape.constant(Tensor::scalar(0.3f64.ln()));
    let got = single_view_text_loss(tape.constant(tensor(&i)), tape.constant(tensor(&t)), lt).unwrap().item();
    let want: f64 = (0..3).map(|r| oracle::nce(&i[r], &t, r, 0.3) + oracle::nce(&t[r], &i, r, 0.3)).sum::<f64>() / 3.0;
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn rejects_bad_inputs() {
    let tape = Tape::<f64>::new();
    let lt = tape.constant(Tensor::scalar(0.0));
    let unnormalized = tape.constant(Tensor::matrix(2, 2, vec![1.0, 1.0, 0.0, 1.0]).unwrap());
    let ok = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    assert!(text_views_loss(unnormalized, ok, ok, lt).is_err());
    let one = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
    assert!(matches!(seg_consistency_loss(&[one], &[one], &[one], &[one], lt), Err(Error::Config(_))));
    assert!(matches!(multilabel_prompt_loss(ok, ok, ok, 0, lt), Err(Error::Config(_))));
    assert!(matches!(info_nce(one, ok, 2, lt), Err(Error::Shape(_))));
}

fn sets(seed: u64, b: usize, k: usize, d: usize) -> [Vec<Rows>; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::array::from_fn(|_| (0..b).map(|_| unit_rows(&mut rng, k, d)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn segment_loss_is_symmetric_in_the_views(seed in any::<u64>(), b in 1usize..4, k in 2usize..5) {
        let [ut, vt, us, vs] = sets(seed, b, k, 6);
        let a = seg(&[ut.clone(), vt.clone(), us.clone(), vs.clone()], 0.1);
        let swapped = seg(&[vt, ut, vs, us], 0.1);
        prop_assert!((a - swapped).abs() < 1e-12);
    }

    #[test]
    fn segment_loss_ignores_image_order(seed in any::<u64>(), b in 2usize..5) {
        let s = sets(seed, b, 3, 6);
        let rev: [Vec<Rows>; 4] = std::array::from_fn(|i| s[i].iter().rev().cloned().collect());
        prop_assert!((seg(&s, 0.2) - seg(&rev, 0.2)).abs() < 1e-12);
    }

    #[test]
    fn segment_loss_ignores_a_shared_row_relabeling(seed in any::<u64>(), shift in 1usize..3) {
        let s = sets(seed, 2, 3, 6);
        let rot: [Vec<Rows>; 4] = std::array::from_fn(|i| {
            s[i].iter().map(|r| { let mut r = r.clone(); r.rotate_left(shift); r }).collect()
        });
        prop_assert!((seg(&s, 0.1) - seg(&rot, 0.1)).abs() < 1e-12);
    }

    #[test]
    fn text_losses_are_symmetric_in_the_views(seed in any::<u64>(), b in 1usize..5, m in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (iu, iv, t) = (unit_rows(&mut rng, b, 5), unit_rows(&mut rng, b, 5), unit_rows(&mut rng, b, 5));
        let p = unit_rows(&mut rng, b * m, 5);
        prop_assert!((tv(&iu, &iv, &t, 0.1) - tv(&iv, &iu, &t, 0.1)).abs() < 1e-12);
        prop_assert!((ml(&iu, &iv, &p, m, 0.1) - ml(&iv, &iu, &p, m, 0.1)).abs() < 1e-12);
    }

    #[test]
    fn text_views_ignores_a_joint_batch_permutation(seed in any::<u64>(), b in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (iu, iv, t) = (unit_rows(&mut rng, b, 5), unit_rows(&mut rng, b, 5), unit_rows(&mut rng, b, 5));
        let rev = |r: &Rows| r.iter().rev().cloned().collect::<Rows>();
        prop_assert!((tv(&iu, &iv, &t, 0.1) - tv(&rev(&iu), &rev(&iv), &rev(&t), 0.1)).abs() < 1e-12);
    }

    #[test]
    fn losses_are_non_negative(seed in any::<u64>(), tau in 0.01f64..1.0) {
        let s = sets(seed, 2, 3, 4);
        prop_assert!(seg(&s, tau) >= 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 9);
        let (iu, iv, t) = (unit_rows(&mut rng, 3, 4), unit_rows(&mut rng, 3, 4), unit_rows(&mut rng, 3, 4));
        prop_assert!(tv(&iu, &iv, &t, tau) >= 0.0);
        prop_assert!(ml(&iu, &iv, &unit_rows(&mut rng, 6, 4), 2, tau) >= 0.0);
    }
}
