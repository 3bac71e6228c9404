use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn out_size(&self, size: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = size + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }
}

/// Weights stored as a `(kernel * kernel * in, out)` matrix matching the im2col layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> ConvParams<F> {
    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.dim()),
        }
    }

    pub fn slices(&self) -> [&[F]; 2] {
        [
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [F]; 2] {
        [
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }

    pub fn scale(&mut self, s: F) {
        self.weight *= s;
        self.bias *= s;
    }

    pub fn sq_norm(&self) -> f64 {
        self.weight
            .iter()
            .chain(self.bias.iter())
            .map(|v| v.f64() * v.f64())
            .sum()
    }

    pub fn count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<F> {
    pub params: ConvParams<F>,
    pub geom: ConvGeom,
}

/// Saved patches of the forward input, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<F> {
    cols: Array2<F>,
    input_dims: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl<F: Real> Conv2d<F> {
    /// He-normal weights with the given standard deviation override, zero bias.
    pub fn normal<R: Rng>(geom: ConvGeom, std: Option<f64>, rng: &mut R) -> Self {
        let fan_in = geom.patch_len() as f64;
        let std = std.unwrap_or((2.0 / fan_in).sqrt());
        let dist = Normal::new(0.0, std).expect("finite std");
        let weight = Array2::from_shape_simple_fn((geom.patch_len(), geom.out_channels), || {
            F::of(dist.sample(rng))
        });
        Self {
            params: ConvParams {
                weight,
                bias: Array1::zeros(geom.out_channels),
            },
            geom,
        }
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and bias.
    pub fn uniform<R: Rng>(geom: ConvGeom, rng: &mut R) -> Self {
        let bound = 1.0 / (geom.patch_len() as f64).sqrt();
        let dist = Uniform::new(-bound, bound).expect("valid bounds");
        let weight = Array2::from_shape_simple_fn((geom.patch_len(), geom.out_channels), || {
            F::of(dist.sample(rng))
        });
        let bias = Array1::from_shape_simple_fn(geom.out_channels, || F::of(dist.sample(rng)));
        Self {
            params: ConvParams { weight, bias },
            geom,
        }
    }

    pub fn output_dims(&self, input: (usize, usize, usize, usize)) -> Result<(usize, usize)> {
        let (_, h, w, c) = input;
        if c != self.geom.in_channels {
            return Err(Error::Dimension(format!(
                "convolution expects {} input channels, got {c}",
                self.geom.in_channels
            )));
        }
        match (self.geom.out_size(h), self.geom.out_size(w)) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
            _ => Err(Error::Shape(format!(
                "input {h}x{w} too small for kernel {} dilation {}",
                self.geom.kernel, self.geom.dilation
            ))),
        }
    }

    pub fn forward(&self, x: &Array4<F>) -> Result<(Array4<F>, ConvCache<F>)> {
        let dims = x.dim();
        let (oh, ow) = self.output_dims(dims)?;
        let cols = self.im2col(x, oh, ow);
        let mut out = cols.dot(&self.params.weight);
        out += &self.params.bias;
        let out = out
            .into_shape_with_order((dims.0, oh, ow, self.geom.out_channels))
            .expect("contiguous");
        Ok((
            out,
            ConvCache {
                cols,
                input_dims: dims,
                out_hw: (oh, ow),
            },
        ))
    }

    /// Returns the parameter gradient and, when requested, the input gradient.
    pub fn backward(
        &self,
        cache: &ConvCache<F>,
        dy: &Array4<F>,
        need_input_grad: bool,
    ) -> (ConvParams<F>, Option<Array4<F>>) {
        let (n, _, _, _) = cache.input_dims;
        let (oh, ow) = cache.out_hw;
        let dy2 = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * oh * ow, self.geom.out_channels))
            .expect("contiguous");
        let weight = cache.cols.t().dot(&dy2);
        let bias = dy2.sum_axis(Axis(0));
        let dx = need_input_grad.then(|| {
            let dcols = dy2.dot(&self.params.weight.t());
            self.col2im(&dcols, cache.input_dims, oh, ow)
        });
        (ConvParams { weight, bias }, dx)
    }

    /// Input gradient only, for frozen layers.
    pub fn backward_input(&self, cache: &ConvCache<F>, dy: &Array4<F>) -> Array4<F> {
        let (n, _, _, _) = cache.input_dims;
        let (oh, ow) = cache.out_hw;
        let dy2 = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * oh * ow, self.geom.out_channels))
            .expect("contiguous");
        let dcols = dy2.dot(&self.params.weight.t());
        self.col2im(&dcols, cache.input_dims, oh, ow)
    }

    fn im2col(&self, x: &Array4<F>, oh: usize, ow: usize) -> Array2<F> {
        let (n, h, w, c) = x.dim();
        let g = self.geom;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let plen = g.patch_len();
        let mut cols = Array2::<F>::zeros((n * oh * ow, plen));
        let cs = cols.as_slice_mut().expect("fresh array");
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * plen;
                    for ky in 0..g.kernel {
                        let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..g.kernel {
                            let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = ((b * h + iy as usize) * w + ix as usize) * c;
                            let dst = row + (ky * g.kernel + kx) * c;
                            cs[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(
        &self,
        dcols: &Array2<F>,
        dims: (usize, usize, usize, usize),
        oh: usize,
        ow: usize,
    ) -> Array4<F> {
        let (n, h, w, c) = dims;
        let g = self.geom;
        let plen = g.patch_len();
        let dcols = dcols.as_standard_layout();
        let ds = dcols.as_slice().expect("standard layout");
        let mut dx = Array4::<F>::zeros(dims);
        let xs = dx.as_slice_mut().expect("fresh array");
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * plen;
                    for ky in 0..g.kernel {
                        let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..g.kernel {
                            let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let dst = ((b * h + iy as usize) * w + ix as usize) * c;
                            let src = row + (ky * g.kernel + kx) * c;
                            for (d, &s) in xs[dst..dst + c].iter_mut().zip(&ds[src..src + c]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}
