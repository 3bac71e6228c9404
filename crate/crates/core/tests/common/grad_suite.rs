//! Finite-difference checks of every loss: each function returns the worst relative
//! error over 20 random double-precision inputs of shape `(2, 4, 4, K)`.

use super::*;
use latentseg_core::config::{ConsistencyVariant, Reduction};
use latentseg_core::cooccurrence::LatentProjection;
use latentseg_core::losses::{
    adv_gen_loss, ce_loss, consistency_loss, disc_loss, latent_loss, semantic_to_latent,
    semantic_to_latent_backward,
};
use latentseg_core::types::{one_hot, ProbKind, ProbMap};
use ndarray::{Array2, Array3};
use rand::Rng;

const DIMS: (usize, usize, usize) = (2, 4, 4);
const CASES: u64 = 20;

fn dims(k: usize) -> (usize, usize, usize, usize) {
    (DIMS.0, DIMS.1, DIMS.2, k)
}

fn random_projection(r: &mut rand_chacha::ChaCha8Rng, c: usize, l: usize) -> LatentProjection {
    let mut p = Array2::from_shape_fn((c, l), |_| r.random_range(0.05..1.0));
    for mut row in p.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    LatentProjection::new(p).unwrap()
}

pub fn cross_entropy() -> f64 {
    let mut worst = 0.0f64;
    for case in 0..CASES {
        let mut r = rng(case);
        let k = 3 + (case as usize % 4);
        let pred = random_probmap(&mut r, dims(k), ProbKind::Semantic);
        let labels = random_labels(&mut r, DIMS, k, 0.2);
        for red in [Reduction::Mean, Reduction::Sum] {
            let analytic = ce_loss(&pred, &labels, red).unwrap().grad;
            let numeric = numeric_grad(&pred.values, |v| {
                ce_loss(&ProbMap::new(v.clone(), ProbKind::Semantic), &labels, red)
                    .unwrap()
                    .loss
                    .value
            });
            let err = max_rel_err(&analytic, &numeric);
            worst = worst.max(err);
        }
    }
    worst
}

pub fn latent() -> f64 {
    let mut worst = 0.0f64;
    for case in 0..CASES {
        let mut r = rng(100 + case);
        let c = 2 + (case as usize % 4);
        let l = 2 + (case as usize % 3);
        let labels = random_labels(&mut r, DIMS, c, 0.15);
        let y = one_hot::<f64>(&labels, c).unwrap();
        let s_l = random_probmap(&mut r, dims(l), ProbKind::Latent);
        let analytic = latent_loss(&y, &s_l).unwrap().grad;
        let numeric = numeric_grad(&s_l.values, |v| {
            latent_loss(&y, &ProbMap::new(v.clone(), ProbKind::Latent)).unwrap().loss.value
        });
        let err = max_rel_err(&analytic, &numeric);
        worst = worst.max(err);
    }
    worst
}

pub fn consistency() -> f64 {
    let mut worst = 0.0f64;
    for case in 0..CASES {
        let mut r = rng(200 + case);
        let c = 3 + (case as usize % 3);
        let l = 2 + (case as usize % 3);
        let p = random_projection(&mut r, c, l);
        let s_c = random_probmap(&mut r, dims(c), ProbKind::Semantic);
        let s_l = random_probmap(&mut r, dims(l), ProbKind::Latent);
        let loss_of = |s_c: &ProbMap<f64>, s_l: &ProbMap<f64>, v: ConsistencyVariant| {
            let proj = semantic_to_latent(s_c, &p).unwrap();
            consistency_loss(s_l, &proj, v, Reduction::Mean).unwrap()
        };
        for variant in [ConsistencyVariant::CrossEntropy, ConsistencyVariant::SymmetricKl] {
            let g = loss_of(&s_c, &s_l, variant);
            let d_sem = semantic_to_latent_backward(&g.d_projected, &p).unwrap();
            let numeric = numeric_grad(&s_c.values, |v| {
                loss_of(&ProbMap::new(v.clone(), ProbKind::Semantic), &s_l, variant).loss.value
            });
            let err = max_rel_err(&d_sem, &numeric);
            worst = worst.max(err);
            match variant {
                ConsistencyVariant::CrossEntropy => assert!(g.d_latent.is_none()),
                ConsistencyVariant::SymmetricKl => {
                    let numeric = numeric_grad(&s_l.values, |v| {
                        loss_of(&s_c, &ProbMap::new(v.clone(), ProbKind::Latent), variant).loss.value
                    });
                    let err = max_rel_err(g.d_latent.as_ref().unwrap(), &numeric);
                    worst = worst.max(err);
                }
            }
        }
    }
    worst
}

fn random_confidence(r: &mut rand_chacha::ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_fn(DIMS, |_| r.random_range(0.05..0.95))
}

pub fn adversarial() -> f64 {
    let mut worst = 0.0f64;
    for case in 0..CASES {
        let mut r = rng(300 + case);
        let d = random_confidence(&mut r);
        let mask = Array3::from_shape_fn(DIMS, |_| r.random_bool(0.8));
        let mask = (case % 2 == 0).then_some(mask);
        let analytic = adv_gen_loss(&d, mask.as_ref(), Reduction::Mean).unwrap().grad;
        let numeric = numeric_grad(&d, |v| {
            adv_gen_loss(v, mask.as_ref(), Reduction::Mean).unwrap().loss.value
        });
        let err = max_rel_err(&analytic, &numeric);
        worst = worst.max(err);
    }
    worst
}

pub fn discriminator() -> f64 {
    let mut worst = 0.0f64;
    for case in 0..CASES {
        let mut r = rng(400 + case);
        let fake = random_confidence(&mut r);
        let real = random_confidence(&mut r);
        let mask = Array3::from_shape_fn(DIMS, |_| r.random_bool(0.7));
        let g = disc_loss(&fake, &real, Some(&mask), None, Reduction::Mean).unwrap();
        let nf = numeric_grad(&fake, |v| {
            disc_loss(v, &real, Some(&mask), None, Reduction::Mean).unwrap().loss.value
        });
        let nr = numeric_grad(&real, |v| {
            disc_loss(&fake, v, Some(&mask), None, Reduction::Mean).unwrap().loss.value
        });
        let err = max_rel_err(&g.d_fake, &nf).max(max_rel_err(&g.d_real, &nr));
        worst = worst.max(err);
    }
    worst
}
