//! Shared helpers and independent oracles for the integration tests.
#![allow(dead_code)]

pub mod criteria;
pub mod grad_suite;

use latentseg_core::types::{LabelMap, ProbKind, ProbMap, DEFAULT_IGNORE};
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Softmax of Gaussian-ish logits, so every entry stays well away from zero.
pub fn random_probmap(r: &mut ChaCha8Rng, dims: (usize, usize, usize, usize), kind: ProbKind) -> ProbMap<f64> {
    let mut v = Array4::from_shape_fn(dims, |_| r.random_range(-2.0..2.0));
    for mut lane in v.lanes_mut(ndarray::Axis(3)) {
        let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        lane.mapv_inplace(|x| (x - m).exp());
        let s = lane.sum();
        lane.mapv_inplace(|x| x / s);
    }
    ProbMap::new(v, kind)
}

pub fn random_labels(r: &mut ChaCha8Rng, dims: (usize, usize, usize), classes: usize, ignore_rate: f64) -> LabelMap {
    let labels = Array3::from_shape_fn(dims, |_| {
        if r.random_bool(ignore_rate) {
            DEFAULT_IGNORE
        } else {
            r.random_range(0..classes) as u8
        }
    });
    LabelMap {
        labels,
        ignore_index: DEFAULT_IGNORE,
    }
}

/// Central-difference gradient of `f` with respect to every entry of `x`.
pub fn numeric_grad<D: ndarray::Dimension>(
    x: &ndarray::Array<f64, D>,
    f: impl Fn(&ndarray::Array<f64, D>) -> f64,
) -> ndarray::Array<f64, D> {
    let mut g = x.clone();
    let mut probe = x.clone();
    for (i, gi) in g.iter_mut().enumerate() {
        let orig = x.as_slice_memory_order().unwrap()[i];
        probe.as_slice_memory_order_mut().unwrap()[i] = orig + FD_STEP;
        let up = f(&probe);
        probe.as_slice_memory_order_mut().unwrap()[i] = orig - FD_STEP;
        let down = f(&probe);
        probe.as_slice_memory_order_mut().unwrap()[i] = orig;
        *gi = (up - down) / (2.0 * FD_STEP);
    }
    g
}

/// Largest entry-wise relative error, with a floor guarding near-zero entries.
pub fn max_rel_err<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>, b: &ndarray::Array<f64, D>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Conditional entropy `H(C | L)` written out term by term from a joint table.
pub fn conditional_entropy_oracle(joint: &Array2<f64>) -> f64 {
    let (cs, ls) = joint.dim();
    let mut h = 0.0;
    for l in 0..ls {
        let mut m = 0.0;
        for c in 0..cs {
            m += joint[[c, l]];
        }
        if m < 1e-8 {
            continue;
        }
        for c in 0..cs {
            let j = joint[[c, l]];
            if j > 0.0 {
                h -= j * (j / m).ln();
            }
        }
    }
    h
}

/// Joint `P_b(c, l)` by explicit pixel loops, normalized by labeled pixels.
pub fn joint_oracle(labels: &LabelMap, s_l: &ProbMap<f64>, classes: usize) -> Array2<f64> {
    let (n, h, w, ls) = s_l.dims();
    let mut j = Array2::zeros((classes, ls));
    let mut count = 0usize;
    for a in 0..n {
        for b in 0..h {
            for c in 0..w {
                let y = labels.labels[[a, b, c]];
                if y == labels.ignore_index {
                    continue;
                }
                count += 1;
                for l in 0..ls {
                    j[[y as usize, l]] += s_l.values[[a, b, c, l]];
                }
            }
        }
    }
    if count > 0 {
        j /= count as f64;
    }
    j
}
