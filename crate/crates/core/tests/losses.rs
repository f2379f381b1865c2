mod common;

use common::*;
use magms::losses::{self, LossWeights};
use magms::model::{FeatureBundle, ForwardAll};
use ndarray::Array4;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;

fn weights(lambda: f64, gamma: f64, t: f64) -> LossWeights {
    LossWeights {
        lambda_kl: lambda,
        gamma_l2: gamma,
        temperature: t,
        dice_epsilon: EPS,
    }
}

#[test]
fn values_match_naive_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..30 {
        let c = rng.random_range(2..5);
        let sh = random_shape(&mut rng, 4);
        let labels = random_labels(&mut rng, c, sh);
        let a = random_logits(&mut rng, c, sh, 3.0);
        let b = random_logits(&mut rng, c, sh, 3.0);
        let t = rng.random_range(0.5..4.0);
        approx::assert_relative_eq!(
            losses::dice_ce(&labels, &a, EPS).unwrap(),
            dice_ce_oracle(&labels, &a, EPS),
            max_relative = 1e-12
        );
        approx::assert_relative_eq!(
            losses::pixel_kl(&a, &b, t).unwrap(),
            kl_oracle(&a, &b, t),
            max_relative = 1e-10
        );
        let shapes = [[2, sh[0], sh[1], sh[2]], [3, 1, 2, 1]];
        let f = random_bundle(&mut rng, &shapes);
        let g = random_bundle(&mut rng, &shapes);
        approx::assert_relative_eq!(
            losses::feature_l2(&f, &g).unwrap(),
            l2_oracle(&f, &g),
            max_relative = 1e-12
        );
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-6;
    for _ in 0..20 {
        let c = rng.random_range(2..5);
        let sh = random_shape(&mut rng, 4);
        let labels = random_labels(&mut rng, c, sh);
        let s = random_logits(&mut rng, c, sh, 2.0);
        let t_logits = random_logits(&mut rng, c, sh, 2.0);
        let temp = rng.random_range(0.5..3.0);

        let (_, g) = losses::dice_ce_with_grad(&labels, &s, EPS).unwrap();
        let num = numeric_gradient(&s, h, |x| losses::dice_ce(&labels, x, EPS).unwrap());
        assert!(relative_error(&num, g.as_slice().unwrap()) < 1e-6);

        let (_, g) = losses::pixel_kl_with_grad(&t_logits, &s, temp).unwrap();
        let num = numeric_gradient(&s, h, |x| kl_oracle(&t_logits, x, temp));
        assert!(relative_error(&num, g.as_slice().unwrap()) < 1e-6);

        let shapes = [[2, sh[0], sh[1], sh[2]]];
        let f = random_bundle(&mut rng, &shapes);
        let teacher = random_bundle(&mut rng, &shapes);
        let (_, g) = losses::feature_l2_with_grad(&f, &teacher).unwrap();
        let num = numeric_gradient(&f.levels()[0], h, |x| {
            losses::feature_l2(&FeatureBundle::new(vec![x.clone()], None), &teacher).unwrap()
        });
        assert!(relative_error(&num, g.levels()[0].as_slice().unwrap()) < 1e-6);
    }
}

#[test]
fn teacher_is_detached_in_mag_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sh = [2, 3, 2];
    let labels = random_labels(&mut rng, 3, sh);
    let shapes = [[2, 2, 3, 2]];
    let out = ForwardAll {
        modality_logits: vec![
            random_logits(&mut rng, 3, sh, 2.0),
            random_logits(&mut rng, 3, sh, 2.0),
        ],
        fused_logits: random_logits(&mut rng, 3, sh, 2.0),
        modality_bundles: vec![
            random_bundle(&mut rng, &shapes),
            random_bundle(&mut rng, &shapes),
        ],
        fused_bundle: random_bundle(&mut rng, &shapes),
    };
    let w = weights(1.0, 1.0, 2.0);
    let (_, g) = losses::mag_loss_with_grad(&labels, &out, &w).unwrap();
    let (_, fused_only) = losses::dice_ce_with_grad(&labels, &out.fused_logits, EPS).unwrap();
    assert_eq!(g.fused_logits.unwrap(), fused_only);
}

#[test]
fn zero_weights_skip_distillation_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sh = [2, 2, 2];
    let labels = random_labels(&mut rng, 2, sh);
    let shapes = [[1, 2, 2, 2]];
    let out = ForwardAll {
        modality_logits: vec![random_logits(&mut rng, 2, sh, 1.0)],
        fused_logits: random_logits(&mut rng, 2, sh, 1.0),
        modality_bundles: vec![random_bundle(&mut rng, &shapes)],
        fused_bundle: random_bundle(&mut rng, &shapes),
    };
    let (b, g) = losses::mag_loss_with_grad(&labels, &out, &weights(0.0, 0.0, 1.0)).unwrap();
    assert!(g.modality_bundles[0].is_none());
    assert_eq!(b.total, b.fused_dice_ce + b.per_modality[0].dice_ce);
}

fn logits_strategy(c: usize, n: usize) -> impl Strategy<Value = Array4<f64>> {
    prop::collection::vec(-6.0f64..6.0, c * n)
        .prop_map(move |v| Array4::from_shape_vec((c, 1, 1, n), v).unwrap())
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_zero_on_self(a in logits_strategy(3, 5), b in logits_strategy(3, 5), t in 0.5f64..5.0) {
        prop_assert!(losses::pixel_kl(&a, &b, t).unwrap() >= 0.0);
        prop_assert!(losses::pixel_kl(&a, &a, t).unwrap().abs() < 1e-12);
    }

    #[test]
    fn dice_ce_is_shift_invariant(a in logits_strategy(4, 6), shift in -10.0f64..10.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = random_labels(&mut rng, 4, [1, 1, 6]);
        let shifted = a.mapv(|v| v + shift);
        let x = losses::dice_ce(&labels, &a, EPS).unwrap();
        let y = losses::dice_ce(&labels, &shifted, EPS).unwrap();
        prop_assert!((x - y).abs() < 1e-9);
        prop_assert!(x >= 0.0);
    }

    #[test]
    fn l2_is_symmetric(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = [[2, 2, 2, 2], [1, 1, 1, 3]];
        let a = random_bundle(&mut rng, &shapes);
        let b = random_bundle(&mut rng, &shapes);
        prop_assert_eq!(losses::feature_l2(&a, &b).unwrap(), losses::feature_l2(&b, &a).unwrap());
        prop_assert_eq!(losses::feature_l2(&a, &a).unwrap(), 0.0);
    }
}
