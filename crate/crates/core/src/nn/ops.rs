use ndarray::{Array3, Array4, Axis, Zip};

use crate::real::Real;

/// Softmax over the channel axis.
pub fn softmax<F: Real>(logits: &Array4<F>) -> Array4<F> {
    let mut out = logits.to_owned();
    for mut row in out.lanes_mut(Axis(3)) {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Given `p = softmax(z)` and `dL/dp`, returns `dL/dz = p * (dp - <p, dp>)`.
pub fn softmax_backward<F: Real>(p: &Array4<F>, dp: &Array4<F>) -> Array4<F> {
    let mut dz = Array4::zeros(p.dim());
    Zip::from(dz.lanes_mut(Axis(3)))
        .and(p.lanes(Axis(3)))
        .and(dp.lanes(Axis(3)))
        .for_each(|mut dz, p, dp| {
            let dot = p.iter().zip(dp.iter()).fold(F::zero(), |acc, (&a, &b)| acc + a * b);
            for ((z, &pi), &gi) in dz.iter_mut().zip(p.iter()).zip(dp.iter()) {
                *z = pi * (gi - dot);
            }
        });
    dz
}

pub fn sigmoid<F: Real>(x: &Array3<F>) -> Array3<F> {
    x.mapv(|v| F::one() / (F::one() + (-v).exp()))
}

/// Given `s = sigmoid(x)` and `dL/ds`, returns `dL/dx`.
pub fn sigmoid_backward<F: Real>(s: &Array3<F>, ds: &Array3<F>) -> Array3<F> {
    let mut out = ds.to_owned();
    Zip::from(&mut out).and(s).for_each(|g, &s| *g *= s * (F::one() - s));
    out
}

pub fn relu<F: Real>(mut x: Array4<F>) -> Array4<F> {
    x.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
    x
}

/// Backward through ReLU given its output.
pub fn relu_backward<F: Real>(out: &Array4<F>, dy: &Array4<F>) -> Array4<F> {
    let mut dx = dy.to_owned();
    Zip::from(&mut dx).and(out).for_each(|g, &o| {
        if o <= F::zero() {
            *g = F::zero();
        }
    });
    dx
}

pub fn leaky_relu<F: Real>(mut x: Array4<F>, slope: F) -> Array4<F> {
    x.mapv_inplace(|v| if v > F::zero() { v } else { v * slope });
    x
}

/// Backward through a leaky ReLU given its output (slope > 0 keeps the sign).
pub fn leaky_relu_backward<F: Real>(out: &Array4<F>, dy: &Array4<F>, slope: F) -> Array4<F> {
    let mut dx = dy.to_owned();
    Zip::from(&mut dx).and(out).for_each(|g, &o| {
        if o <= F::zero() {
            *g *= slope;
        }
    });
    dx
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Tap {
    lo: usize,
    hi: usize,
    w_lo: f64,
    w_hi: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = src - lo as f64;
            Tap {
                lo,
                hi,
                w_lo: 1.0 - frac,
                w_hi: frac,
            }
        })
        .collect()
}

/// Bilinear resize with half-pixel centers (no corner alignment).
#[derive(Debug, Clone, PartialEq)]
pub struct Resize {
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    rows: Vec<Tap>,
    cols: Vec<Tap>,
}

impl Resize {
    pub fn new(in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        Self {
            in_hw,
            out_hw,
            rows: taps(in_hw.0, out_hw.0),
            cols: taps(in_hw.1, out_hw.1),
        }
    }

    pub fn forward<F: Real>(&self, x: &Array4<F>) -> Array4<F> {
        let (n, h, w, c) = x.dim();
        assert_eq!((h, w), self.in_hw, "resize input size");
        let (oh, ow) = self.out_hw;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut out = Array4::<F>::zeros((n, oh, ow, c));
        let os = out.as_slice_mut().expect("fresh array");
        for b in 0..n {
            for (oy, r) in self.rows.iter().enumerate() {
                for (ox, q) in self.cols.iter().enumerate() {
                    let dst = ((b * oh + oy) * ow + ox) * c;
                    let corners = [
                        (r.lo, q.lo, r.w_lo * q.w_lo),
                        (r.lo, q.hi, r.w_lo * q.w_hi),
                        (r.hi, q.lo, r.w_hi * q.w_lo),
                        (r.hi, q.hi, r.w_hi * q.w_hi),
                    ];
                    for (iy, ix, wgt) in corners {
                        if wgt == 0.0 {
                            continue;
                        }
                        let wgt = F::of(wgt);
                        let src = ((b * h + iy) * w + ix) * c;
                        for k in 0..c {
                            os[dst + k] += wgt * xs[src + k];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward<F: Real>(&self, dy: &Array4<F>) -> Array4<F> {
        let (n, oh, ow, c) = dy.dim();
        assert_eq!((oh, ow), self.out_hw, "resize gradient size");
        let (h, w) = self.in_hw;
        let dy = dy.as_standard_layout();
        let ds = dy.as_slice().expect("standard layout");
        let mut dx = Array4::<F>::zeros((n, h, w, c));
        let xs = dx.as_slice_mut().expect("fresh array");
        for b in 0..n {
            for (oy, r) in self.rows.iter().enumerate() {
                for (ox, q) in self.cols.iter().enumerate() {
                    let src = ((b * oh + oy) * ow + ox) * c;
                    let corners = [
                        (r.lo, q.lo, r.w_lo * q.w_lo),
                        (r.lo, q.hi, r.w_lo * q.w_hi),
                        (r.hi, q.lo, r.w_hi * q.w_lo),
                        (r.hi, q.hi, r.w_hi * q.w_hi),
                    ];
                    for (iy, ix, wgt) in corners {
                        if wgt == 0.0 {
                            continue;
                        }
                        let wgt = F::of(wgt);
                        let dst = ((b * h + iy) * w + ix) * c;
                        for k in 0..c {
                            xs[dst + k] += wgt * ds[src + k];
                        }
                    }
                }
            }
        }
        dx
    }
}
