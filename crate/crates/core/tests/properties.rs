//! Property tests for the invariants of the losses, statistics, models and metrics.

mod common;

use common::criteria::random_stochastic;
use common::rng;
use latentseg_core::config::{ConsistencyVariant, Reduction};
use latentseg_core::cooccurrence::{effective_latent_count, CoOccurrence, LatentProjection};
use latentseg_core::data::ManualMapping;
use latentseg_core::eval::{grouping_agreement, ConfusionMatrix};
use latentseg_core::losses::{
    ce_loss, composite_labeled, composite_total, composite_unlabeled, consistency_loss, latent_loss,
    semantic_to_latent, LossValue,
};
use latentseg_core::models::SegNet;
use latentseg_core::optim::poly_lr;
use latentseg_core::types::{one_hot, validate_probmap, LabelMap, ProbKind, ProbMap};
use latentseg_core::RunConfig;
use ndarray::{Array2, Array4, Axis};
use proptest::prelude::*;
use rand::Rng;

fn probmap(seed: u64, dims: (usize, usize, usize, usize), kind: ProbKind) -> ProbMap<f64> {
    common::random_probmap(&mut rng(seed), dims, kind)
}

fn labels(seed: u64, dims: (usize, usize, usize), classes: usize, ignore_rate: f64) -> LabelMap {
    common::random_labels(&mut rng(seed), dims, classes, ignore_rate)
}

fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(64) })]

    #[test]
    fn one_hot_inverts_argmax(seed in any::<u64>(), classes in 2usize..8) {
        let y = labels(seed, (2, 3, 4), classes, 0.2);
        let back = one_hot::<f64>(&y, classes).unwrap().argmax();
        for (idx, &v) in y.labels.indexed_iter() {
            if v != y.ignore_index {
                prop_assert_eq!(back[idx], v as usize);
            }
        }
    }

    #[test]
    fn effective_count_monotone(seed in any::<u64>(), c in 1usize..8, l in 1usize..10, a in 0.01f64..0.99, b in 0.01f64..0.99) {
        let p = LatentProjection::new(random_stochastic(&mut rng(seed), c, l)).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(effective_latent_count(&p, hi) <= effective_latent_count(&p, lo));
        prop_assert!(effective_latent_count(&p, hi) <= l);
    }

    #[test]
    fn ema_nonnegative_and_lipschitz(seed in any::<u64>(), alpha in 0.01f64..0.99) {
        let mut r = rng(seed);
        let stat = Array2::from_shape_fn((3, 4), |_| r.random::<f64>() * 5.0);
        let m1 = Array2::from_shape_fn((3, 4), |_| r.random::<f64>() * 5.0);
        let m2 = Array2::from_shape_fn((3, 4), |_| r.random::<f64>() * 5.0);
        let a = CoOccurrence { m: m1.clone(), alpha, update_count: 1 }.ema_step(&stat);
        let b = CoOccurrence { m: m2.clone(), alpha, update_count: 1 }.ema_step(&stat);
        prop_assert!(a.m.iter().all(|&v| v >= 0.0));
        prop_assert!(max_abs(&a.m, &b.m) <= max_abs(&m1, &m2) + 1e-12);
    }

    #[test]
    fn projection_scale_invariant(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let mut r = rng(seed);
        let m = Array2::from_shape_fn((4, 3), |_| r.random::<f64>());
        let p1 = CoOccurrence { m: m.clone(), alpha: 0.5, update_count: 1 }.project_distribution().unwrap();
        let p2 = CoOccurrence { m: m * scale, alpha: 0.5, update_count: 1 }.project_distribution().unwrap();
        prop_assert!(max_abs(&p1.p, &p2.p) <= 1e-12);
    }

    #[test]
    fn latent_loss_bounded(seed in any::<u64>(), c in 2usize..7, l in 1usize..7) {
        let y = one_hot::<f64>(&labels(seed, (2, 3, 3), c, 0.1), c).unwrap();
        let s = probmap(seed ^ 1, (2, 3, 3, l), ProbKind::Latent);
        let v = latent_loss(&y, &s).unwrap().loss.value;
        prop_assert!(v >= -1e-12 && v <= (c as f64).ln() + 1e-12, "value {}", v);
    }

    #[test]
    fn latent_loss_permutation_invariant(seed in any::<u64>(), shift in 1usize..5) {
        let y = one_hot::<f64>(&labels(seed, (2, 3, 3), 4, 0.1), 4).unwrap();
        let s = probmap(seed ^ 2, (2, 3, 3, 5), ProbKind::Latent);
        let mut permuted = s.values.clone();
        for l in 0..5 {
            permuted.index_axis_mut(Axis(3), (l + shift) % 5).assign(&s.values.index_axis(Axis(3), l));
        }
        let a = latent_loss(&y, &s).unwrap().loss.value;
        let b = latent_loss(&y, &ProbMap::new(permuted, ProbKind::Latent)).unwrap().loss.value;
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn projection_keeps_simplex(seed in any::<u64>(), c in 1usize..8, l in 1usize..8) {
        let p = LatentProjection::new(random_stochastic(&mut rng(seed), c, l)).unwrap();
        let out = semantic_to_latent(&probmap(seed ^ 3, (1, 3, 3, c), ProbKind::Semantic), &p).unwrap();
        for lane in out.values.lanes(Axis(3)) {
            prop_assert!((lane.sum() - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn consistency_gibbs(seed in any::<u64>(), l in 2usize..6) {
        let a = probmap(seed, (1, 3, 3, l), ProbKind::Latent);
        let b = probmap(seed ^ 4, (1, 3, 3, l), ProbKind::Latent);
        let entropy = -a.values.iter().map(|&v| v * v.ln()).sum::<f64>() / 9.0;
        let ce = |t: &ProbMap<f64>| {
            consistency_loss(&a, t, ConsistencyVariant::CrossEntropy, Reduction::Mean).unwrap().loss.value
        };
        prop_assert!(ce(&b) >= entropy - 1e-12);
        prop_assert!((ce(&a) - entropy).abs() <= 1e-9);
    }

    #[test]
    fn ce_ignores_relabeled_void(seed in any::<u64>()) {
        let pred = probmap(seed, (2, 3, 3, 4), ProbKind::Semantic);
        let y = labels(seed ^ 5, (2, 3, 3), 4, 0.3);
        let mut moved = y.clone();
        moved.ignore_index = 200;
        moved.labels.mapv_inplace(|v| if v == y.ignore_index { 200 } else { v });
        let a = ce_loss(&pred, &y, Reduction::Mean).unwrap();
        let b = ce_loss(&pred, &moved, Reduction::Mean).unwrap();
        prop_assert!((a.loss.value - b.loss.value).abs() <= 1e-12);
        prop_assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn composites_linear(ce in 0f64..5.0, lat in 0f64..5.0, adv in 0f64..5.0, cons in 0f64..5.0,
                         lambda_adv in 0f64..1.0, lambda_unl in 0f64..1.0) {
        let cfg = RunConfig { lambda_adv, lambda_unlabeled: lambda_unl, ..RunConfig::default() };
        let s = LossValue::scalar;
        let lab = composite_labeled(&s("ce", ce), &s("latent", lat), &s("adv", adv), &cfg);
        let unl = composite_unlabeled(&s("cons", cons), &s("adv", adv), &cfg);
        let total = composite_total(&lab, &unl, &cfg);
        let want = ce + lat + lambda_adv * adv + lambda_unl * (cons + lambda_adv * adv);
        prop_assert!((total.value - want).abs() <= 1e-12);
    }

    #[test]
    fn poly_lr_non_increasing(max in 1usize..5000, power in 0.1f64..2.0) {
        let cfg = RunConfig { max_iters: max, lr_power: power, ..RunConfig::default() };
        let mut prev = f64::INFINITY;
        for i in (0..=max).step_by((max / 50).max(1)) {
            let lr = poly_lr(i, &cfg);
            prop_assert!(lr <= prev && lr >= 0.0);
            prev = lr;
        }
    }

    #[test]
    fn miou_permutation_invariant(seed in any::<u64>(), shift in 1usize..5) {
        let mut r = rng(seed);
        let truth = Array2::from_shape_fn((6, 7), |_| r.random_range(0..5u8));
        let pred = Array2::from_shape_fn((6, 7), |_| r.random_range(0..5usize));
        let mut a = ConfusionMatrix::new(5);
        a.add(&pred, &truth, 255).unwrap();
        let mut b = ConfusionMatrix::new(5);
        b.add(&pred.mapv(|v| (v + shift) % 5), &truth.mapv(|v| ((v as usize + shift) % 5) as u8), 255).unwrap();
        prop_assert!((a.miou().unwrap() - b.miou().unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn agreement_ignores_latent_order(seed in any::<u64>(), l in 2usize..7, shift in 1usize..6) {
        let p = random_stochastic(&mut rng(seed), 6, l);
        let mut q = p.clone();
        for j in 0..l {
            q.column_mut((j + shift) % l).assign(&p.column(j));
        }
        let truth = ManualMapping::from_assignment(vec![0, 0, 1, 1, 2, 2]);
        let a = grouping_agreement(&LatentProjection::new(p).unwrap(), &truth);
        let b = grouping_agreement(&LatentProjection::new(q).unwrap(), &truth);
        prop_assert!((a - b).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(8) })]

    #[test]
    fn model_outputs_are_valid_probmaps(seed in any::<u64>(), blocks in 1usize..4) {
        let size = 8 * blocks;
        let mut r = rng(seed);
        let net = SegNet::<f32>::new(&[4, 6, 6], &[1, 2], 3, 2, &mut r).unwrap();
        let images = Array4::from_shape_fn((2, size, size, 3), |_| r.random_range(-3.0f32..3.0));
        let out = net.forward(&images, true).unwrap();
        prop_assert!(validate_probmap(&out.semantic).is_ok());
        prop_assert!(validate_probmap(out.latent.as_ref().unwrap()).is_ok());
        prop_assert_eq!(out.semantic.dims(), (2, size, size, 3));
    }
}

#[test]
fn composite_zero_weights_drop_terms() {
    let cfg = RunConfig { lambda_adv: 0.0, lambda_unlabeled: 0.0, ..RunConfig::default() };
    let s = LossValue::scalar;
    let lab = composite_labeled(&s("ce", 1.0), &s("latent", 2.0), &s("adv", 9.0), &cfg);
    let total = composite_total(&lab, &composite_unlabeled(&s("cons", 4.0), &s("adv", 9.0), &cfg), &cfg);
    assert_eq!(total.value, 3.0);
}

#[test]
fn zero_latent_classes_rejected() {
    let mut r = rng(0);
    assert!(SegNet::<f64>::new(&[4, 6, 6], &[1, 2], 3, 0, &mut r).is_err());
    let small = SegNet::<f64>::new(&[4, 6, 6], &[1, 2], 3, 2, &mut r).unwrap().parameter_counts();
    let big = SegNet::<f64>::new(&[4, 6, 6], &[1, 2], 3, 4, &mut r).unwrap().parameter_counts();
    assert_eq!(small.backbone, big.backbone);
    assert!(big.latent > small.latent);
}
