//! Two-branch segmentation network and fully convolutional discriminator.

use ndarray::{Array3, Array4};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    leaky_relu, leaky_relu_backward, relu, relu_backward, sigmoid, sigmoid_backward, softmax,
    softmax_backward, Conv2d, ConvCache, ConvGeom, ConvParams, Resize,
};
use crate::real::Real;
use crate::types::{ProbKind, ProbMap};

/// Number of leading backbone stages that halve the resolution.
const DOWNSAMPLING_STAGES: usize = 3;

/// Initialization scale of the head convolutions.
const HEAD_INIT_STD: f64 = 0.01;

pub const DISC_SLOPE: f64 = 0.2;

/// Shared encoder with a semantic and a latent multi-dilation head.
#[derive(Debug, Clone, PartialEq)]
pub struct SegNet<F> {
    pub backbone: Vec<Conv2d<F>>,
    pub semantic: Vec<Conv2d<F>>,
    pub latent: Vec<Conv2d<F>>,
}

/// Gradients (or any per-parameter quantity) laid out like a [`SegNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct SegGrads<F> {
    pub backbone: Vec<ConvParams<F>>,
    pub semantic: Vec<ConvParams<F>>,
    pub latent: Vec<ConvParams<F>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradNorms {
    pub backbone: f64,
    pub semantic: f64,
    pub latent: f64,
}

impl<F: Real> SegGrads<F> {
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            a.add_assign(b);
        }
    }

    pub fn params(&self) -> Vec<&ConvParams<F>> {
        self.backbone
            .iter()
            .chain(&self.semantic)
            .chain(&self.latent)
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ConvParams<F>> {
        self.backbone
            .iter_mut()
            .chain(&mut self.semantic)
            .chain(&mut self.latent)
            .collect()
    }

    pub fn norms(&self) -> GradNorms {
        let norm = |ps: &[ConvParams<F>]| ps.iter().map(|p| p.sq_norm()).sum::<f64>().sqrt();
        GradNorms {
            backbone: norm(&self.backbone),
            semantic: norm(&self.semantic),
            latent: norm(&self.latent),
        }
    }

    /// Per-backbone-layer gradient norms.
    pub fn backbone_layer_norms(&self) -> Vec<f64> {
        self.backbone.iter().map(|p| p.sq_norm().sqrt()).collect()
    }
}

#[derive(Debug, Clone)]
struct HeadCache<F> {
    convs: Vec<ConvCache<F>>,
    probs: ProbMap<F>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct SegForward<F> {
    pub semantic: ProbMap<F>,
    pub latent: Option<ProbMap<F>>,
    backbone: Vec<(ConvCache<F>, Array4<F>)>,
    semantic_cache: Vec<ConvCache<F>>,
    latent_cache: Option<Vec<ConvCache<F>>>,
    feature_dims: (usize, usize, usize, usize),
    resize: Resize,
}

impl<F: Real> SegNet<F> {
    pub fn new<R: Rng>(
        widths: &[usize],
        dilations: &[usize],
        semantic_count: usize,
        latent_count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if latent_count == 0 {
            return Err(Error::Config("the latent head needs at least one class".into()));
        }
        if semantic_count < 2 {
            return Err(Error::Config("the semantic head needs at least two classes".into()));
        }
        if widths.len() < DOWNSAMPLING_STAGES || dilations.is_empty() {
            return Err(Error::Config(format!(
                "backbone needs >= {DOWNSAMPLING_STAGES} stages and at least one head dilation"
            )));
        }
        let mut backbone = Vec::with_capacity(widths.len());
        let mut cin = 3;
        for (i, &w) in widths.iter().enumerate() {
            let geom = ConvGeom {
                in_channels: cin,
                out_channels: w,
                kernel: 3,
                stride: if i < DOWNSAMPLING_STAGES { 2 } else { 1 },
                padding: 1,
                dilation: 1,
            };
            backbone.push(Conv2d::normal(geom, None, rng));
            cin = w;
        }
        let head = |classes: usize, rng: &mut R| {
            dilations
                .iter()
                .map(|&d| {
                    let geom = ConvGeom {
                        in_channels: cin,
                        out_channels: classes,
                        kernel: 3,
                        stride: 1,
                        padding: d,
                        dilation: d,
                    };
                    Conv2d::normal(geom, Some(HEAD_INIT_STD), rng)
                })
                .collect::<Vec<_>>()
        };
        let semantic = head(semantic_count, rng);
        let latent = head(latent_count, rng);
        Ok(Self {
            backbone,
            semantic,
            latent,
        })
    }

    pub fn semantic_count(&self) -> usize {
        self.semantic[0].geom.out_channels
    }

    pub fn latent_count(&self) -> usize {
        self.latent[0].geom.out_channels
    }

    /// Total downsampling factor; input sizes must be multiples of it.
    pub fn stride(&self) -> usize {
        self.backbone.iter().map(|c| c.geom.stride).product()
    }

    pub fn parameter_counts(&self) -> ParamCounts {
        let count = |cs: &[Conv2d<F>]| cs.iter().map(|c| c.params.count()).sum();
        ParamCounts {
            backbone: count(&self.backbone),
            semantic: count(&self.semantic),
            latent: count(&self.latent),
        }
    }

    pub fn params(&self) -> Vec<&ConvParams<F>> {
        self.backbone
            .iter()
            .chain(&self.semantic)
            .chain(&self.latent)
            .map(|c| &c.params)
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ConvParams<F>> {
        self.backbone
            .iter_mut()
            .chain(&mut self.semantic)
            .chain(&mut self.latent)
            .map(|c| &mut c.params)
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (prefix, n) in [
            ("backbone", self.backbone.len()),
            ("semantic", self.semantic.len()),
            ("latent", self.latent.len()),
        ] {
            out.extend((0..n).map(|i| format!("{prefix}.{i}")));
        }
        out
    }

    pub fn zero_grads(&self) -> SegGrads<F> {
        let z = |cs: &[Conv2d<F>]| cs.iter().map(|c| c.params.zeros_like()).collect();
        SegGrads {
            backbone: z(&self.backbone),
            semantic: z(&self.semantic),
            latent: z(&self.latent),
        }
    }

    /// Runs the network on `(N, H, W, 3)` images; the latent head runs only when asked.
    pub fn forward(&self, images: &Array4<F>, with_latent: bool) -> Result<SegForward<F>> {
        let (_, h, w, c) = images.dim();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 image channels, got {c}")));
        }
        let stride = self.stride();
        if h % stride != 0 || w % stride != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "image size {h}x{w} must be a positive multiple of {stride}"
            )));
        }
        let mut backbone = Vec::with_capacity(self.backbone.len());
        let mut x = images.to_owned();
        for conv in &self.backbone {
            let (y, cache) = conv.forward(&x)?;
            x = relu(y);
            backbone.push((cache, x.clone()));
        }
        let feature_dims = x.dim();
        let resize = Resize::new((feature_dims.1, feature_dims.2), (h, w));
        let run_head = |convs: &[Conv2d<F>], kind| -> Result<HeadCache<F>> {
            let mut caches = Vec::with_capacity(convs.len());
            let mut sum: Option<Array4<F>> = None;
            for conv in convs {
                let (y, cache) = conv.forward(&x)?;
                caches.push(cache);
                sum = Some(match sum {
                    Some(s) => s + y,
                    None => y,
                });
            }
            let logits = resize.forward(&sum.expect("non-empty head"));
            Ok(HeadCache {
                convs: caches,
                probs: ProbMap::new(softmax(&logits), kind),
            })
        };
        let sem = run_head(&self.semantic, ProbKind::Semantic)?;
        let lat = if with_latent {
            Some(run_head(&self.latent, ProbKind::Latent)?)
        } else {
            None
        };
        let (latent, latent_cache) = match lat {
            Some(hc) => (Some(hc.probs), Some(hc.convs)),
            None => (None, None),
        };
        Ok(SegForward {
            semantic: sem.probs,
            latent,
            backbone,
            semantic_cache: sem.convs,
            latent_cache,
            feature_dims,
            resize,
        })
    }

    /// Back-propagates gradients with respect to the two probability maps.
    ///
    /// A head without an incoming gradient contributes nothing, including to the backbone.
    pub fn backward(
        &self,
        fwd: &SegForward<F>,
        d_semantic: Option<&Array4<F>>,
        d_latent: Option<&Array4<F>>,
    ) -> Result<SegGrads<F>> {
        let mut grads = self.zero_grads();
        let mut d_feat: Option<Array4<F>> = None;
        let mut head = |convs: &[Conv2d<F>],
                        caches: &[ConvCache<F>],
                        probs: &ProbMap<F>,
                        d: &Array4<F>,
                        out: &mut Vec<ConvParams<F>>|
         -> Result<()> {
            if d.dim() != probs.values.dim() {
                return Err(Error::Dimension(format!(
                    "gradient {:?} vs prediction {:?}",
                    d.dim(),
                    probs.values.dim()
                )));
            }
            let dz = softmax_backward(&probs.values, d);
            let d_small = fwd.resize.backward(&dz);
            for ((conv, cache), g) in convs.iter().zip(caches).zip(out.iter_mut()) {
                let (pg, dx) = conv.backward(cache, &d_small, true);
                *g = pg;
                let dx = dx.expect("requested");
                d_feat = Some(match d_feat.take() {
                    Some(acc) => acc + dx,
                    None => dx,
                });
            }
            Ok(())
        };
        if let Some(d) = d_semantic {
            head(&self.semantic, &fwd.semantic_cache, &fwd.semantic, d, &mut grads.semantic)?;
        }
        if let Some(d) = d_latent {
            let (caches, probs) = match (&fwd.latent_cache, &fwd.latent) {
                (Some(c), Some(p)) => (c, p),
                _ => {
                    return Err(Error::State(
                        "latent gradient given but the latent head did not run".into(),
                    ))
                }
            };
            head(&self.latent, caches, probs, d, &mut grads.latent)?;
        }
        let Some(mut d) = d_feat else {
            return Ok(grads);
        };
        debug_assert_eq!(d.dim(), fwd.feature_dims);
        for (i, (conv, (cache, out))) in self.backbone.iter().zip(&fwd.backbone).enumerate().rev() {
            let dy = relu_backward(out, &d);
            let (pg, dx) = conv.backward(cache, &dy, i > 0);
            grads.backbone[i] = pg;
            match dx {
                Some(dx) => d = dx,
                None => break,
            }
        }
        Ok(grads)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub backbone: usize,
    pub semantic: usize,
    pub latent: usize,
}

/// Five stride-2 4x4 convolutions scoring each pixel as ground truth (1) or prediction (0).
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<F> {
    pub layers: Vec<Conv2d<F>>,
}

#[derive(Debug, Clone)]
pub struct DiscForward<F> {
    /// Per-pixel confidence `(N, H, W)` in `(0, 1)`.
    pub confidence: Array3<F>,
    layers: Vec<(ConvCache<F>, Array4<F>)>,
    logits_dims: (usize, usize, usize, usize),
    resize: Resize,
}

impl<F: Real> Discriminator<F> {
    /// Channel widths `base, 2 base, 4 base, 8 base, 1`.
    pub fn new<R: Rng>(classes: usize, base_width: usize, rng: &mut R) -> Result<Self> {
        if base_width == 0 || classes == 0 {
            return Err(Error::Config("discriminator widths must be positive".into()));
        }
        let widths = [base_width, base_width * 2, base_width * 4, base_width * 8, 1];
        let mut cin = classes;
        let layers = widths
            .iter()
            .map(|&w| {
                let geom = ConvGeom {
                    in_channels: cin,
                    out_channels: w,
                    kernel: 4,
                    stride: 2,
                    padding: 1,
                    dilation: 1,
                };
                cin = w;
                Conv2d::uniform(geom, rng)
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn classes(&self) -> usize {
        self.layers[0].geom.in_channels
    }

    pub fn params(&self) -> Vec<&ConvParams<F>> {
        self.layers.iter().map(|c| &c.params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ConvParams<F>> {
        self.layers.iter_mut().map(|c| &mut c.params).collect()
    }

    pub fn forward(&self, p: &Array4<F>) -> Result<DiscForward<F>> {
        let (n, h, w, c) = p.dim();
        if c != self.classes() {
            return Err(Error::Dimension(format!(
                "discriminator expects {} channels, got {c}",
                self.classes()
            )));
        }
        let slope = F::of(DISC_SLOPE);
        let last = self.layers.len() - 1;
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut x = p.to_owned();
        for (i, conv) in self.layers.iter().enumerate() {
            let (y, cache) = conv.forward(&x)?;
            x = if i < last { leaky_relu(y, slope) } else { y };
            layers.push((cache, x.clone()));
        }
        let logits_dims = x.dim();
        let resize = Resize::new((logits_dims.1, logits_dims.2), (h, w));
        let up = resize
            .forward(&x)
            .into_shape_with_order((n, h, w))
            .expect("single channel");
        Ok(DiscForward {
            confidence: sigmoid(&up),
            layers,
            logits_dims,
            resize,
        })
    }

    /// Gradient with respect to the input map, plus parameter gradients when requested.
    pub fn backward(
        &self,
        fwd: &DiscForward<F>,
        d_confidence: &Array3<F>,
        param_grads: bool,
        input_grad: bool,
    ) -> (Option<Vec<ConvParams<F>>>, Option<Array4<F>>) {
        let (n, h, w) = d_confidence.dim();
        let d_up = sigmoid_backward(&fwd.confidence, d_confidence)
            .into_shape_with_order((n, h, w, 1))
            .expect("contiguous");
        let mut d = fwd.resize.backward(&d_up);
        debug_assert_eq!(d.dim(), fwd.logits_dims);
        let slope = F::of(DISC_SLOPE);
        let last = self.layers.len() - 1;
        let mut grads = Vec::with_capacity(self.layers.len());
        for (i, (conv, (cache, out))) in self.layers.iter().zip(&fwd.layers).enumerate().rev() {
            let dy = if i < last {
                leaky_relu_backward(out, &d, slope)
            } else {
                d
            };
            let need_dx = i > 0 || input_grad;
            if param_grads {
                let (g, dx) = conv.backward(cache, &dy, need_dx);
                grads.push(g);
                match dx {
                    Some(dx) => d = dx,
                    None => return (Some(reverse(grads)), None),
                }
            } else {
                d = conv.backward_input(cache, &dy);
            }
        }
        let grads = param_grads.then(|| reverse(grads));
        (grads, input_grad.then_some(d))
    }
}

fn reverse<T>(mut v: Vec<T>) -> Vec<T> {
    v.reverse();
    v
}
