//! Differentiable objectives of the two-branch model.
//!
//! Every loss returns its scalar value together with the gradient with respect to
//! the probability (or confidence) map it consumes. Chaining through softmax or
//! sigmoid to the pre-normalization scores is left to the caller.

use std::collections::BTreeMap;

use log::warn;
use ndarray::{Array2, Array3, Array4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::config::{ConsistencyVariant, Reduction, RunConfig};
use crate::cooccurrence::{batch_counts, LatentProjection};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::types::{LabelMap, ProbKind, ProbMap};

/// Lower clamp applied to every logarithm argument.
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub components: BTreeMap<String, f64>,
}

impl LossValue {
    pub fn scalar(name: &str, value: f64) -> Self {
        let mut components = BTreeMap::new();
        components.insert(name.to_string(), value);
        Self { value, components }
    }

    pub fn zero(name: &str) -> Self {
        Self::scalar(name, 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.get(name).copied()
    }
}

/// A loss value with the gradient of that value with respect to one input.
#[derive(Debug, Clone)]
pub struct Graded<G> {
    pub loss: LossValue,
    pub grad: G,
}

#[inline]
fn clamped_ln(x: f64) -> f64 {
    x.max(EPS).ln()
}

/// d/dx of `-ln(max(x, eps))`.
#[inline]
fn neg_ln_grad(x: f64) -> f64 {
    if x > EPS {
        -1.0 / x
    } else {
        0.0
    }
}

fn scale_for(reduction: Reduction, count: usize) -> f64 {
    match reduction {
        Reduction::Mean if count > 0 => 1.0 / count as f64,
        Reduction::Mean => 0.0,
        Reduction::Sum => 1.0,
    }
}

fn check_spatial(a: (usize, usize, usize), b: (usize, usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Pixel-wise cross-entropy against integer labels; ignored pixels are skipped.
pub fn ce_loss<F: Real>(
    pred: &ProbMap<F>,
    target: &LabelMap,
    reduction: Reduction,
) -> Result<Graded<Array4<F>>> {
    let (n, h, w, k) = pred.dims();
    check_spatial((n, h, w), target.dims(), "ce_loss prediction vs target")?;
    target.validate(k)?;
    let ignore = target.ignore_index;
    let count = target.valid_pixels();
    let mut grad = Array4::zeros((n, h, w, k));
    if count == 0 {
        warn!("ce_loss: every pixel is ignored");
        let mut loss = LossValue::zero("ce");
        loss.components.insert("all_ignored".into(), 1.0);
        return Ok(Graded { loss, grad });
    }
    let scale = scale_for(reduction, count);
    let mut total = 0.0;
    for ((i, j, l), &y) in target.labels.indexed_iter() {
        if y == ignore {
            continue;
        }
        let p = pred.values[[i, j, l, y as usize]].f64();
        total -= clamped_ln(p);
        grad[[i, j, l, y as usize]] = F::of(scale * neg_ln_grad(p));
    }
    Ok(Graded {
        loss: LossValue::scalar("ce", total * scale),
        grad,
    })
}

/// Generator-side adversarial loss `-log D(S)` over the pixels selected by `mask`.
pub fn adv_gen_loss<F: Real>(
    disc_out: &Array3<F>,
    mask: Option<&Array3<bool>>,
    reduction: Reduction,
) -> Result<Graded<Array3<F>>> {
    if let Some(m) = mask {
        check_spatial(disc_out.dim(), m.dim(), "adv_gen_loss mask")?;
    }
    let count = mask.map_or(disc_out.len(), |m| m.iter().filter(|&&v| v).count());
    let scale = scale_for(reduction, count);
    let mut grad = Array3::zeros(disc_out.dim());
    let mut total = 0.0;
    for ((idx, &d), g) in disc_out.indexed_iter().zip(grad.iter_mut()) {
        if mask.is_some_and(|m| !m[idx]) {
            continue;
        }
        let d = d.f64();
        total -= clamped_ln(d);
        *g = F::of(scale * neg_ln_grad(d));
    }
    Ok(Graded {
        loss: LossValue::scalar("adv", total * scale),
        grad,
    })
}

fn valid_pixel_count<F: Real>(y: &ProbMap<F>) -> usize {
    y.values
        .lanes(Axis(3))
        .into_iter()
        .filter(|row| row.iter().any(|&v| v != F::zero()))
        .count()
}

/// Batch estimate of the joint `P_b(c, l)`, normalized by the number of non-ignored pixels.
pub fn batch_joint<F: Real>(y: &ProbMap<F>, s_l: &ProbMap<F>) -> Result<Array2<f64>> {
    let counts = batch_counts(y, s_l)?;
    let valid = valid_pixel_count(y);
    if valid == 0 {
        return Ok(counts);
    }
    Ok(counts / valid as f64)
}

/// Conditional entropy `H(C | L)` of the batch joint distribution.
///
/// Latent columns with marginal below [`EPS`] contribute nothing. The gradient with
/// respect to `s_l[pixel, l]` is `-log P_b(c | l) / valid_pixels` for the pixel's class `c`.
pub fn latent_loss<F: Real>(y: &ProbMap<F>, s_l: &ProbMap<F>) -> Result<Graded<Array4<F>>> {
    let joint = batch_joint(y, s_l)?;
    let valid = valid_pixel_count(y);
    let mut grad = Array4::zeros(s_l.values.dim());
    if valid == 0 {
        return Ok(Graded {
            loss: LossValue::zero("latent"),
            grad,
        });
    }
    let marginal = joint.sum_axis(Axis(0));
    // neg_log_cond[c, l] = -log P_b(c | l), zero for degenerate columns
    let mut neg_log_cond = Array2::<f64>::zeros(joint.dim());
    let mut value = 0.0;
    for ((c, l), &j) in joint.indexed_iter() {
        let m = marginal[l];
        if m < EPS {
            continue;
        }
        let nl = -clamped_ln(j / m);
        neg_log_cond[[c, l]] = nl;
        value += j * nl;
    }
    let inv = 1.0 / valid as f64;
    Zip::from(grad.lanes_mut(Axis(3)))
        .and(y.values.lanes(Axis(3)))
        .for_each(|mut g, yrow| {
            for (c, &yv) in yrow.iter().enumerate() {
                if yv == F::zero() {
                    continue;
                }
                let yv = yv.f64();
                for (gl, &nl) in g.iter_mut().zip(neg_log_cond.row(c)) {
                    *gl += F::of(inv * yv * nl);
                }
            }
        });
    Ok(Graded {
        loss: LossValue::scalar("latent", value),
        grad,
    })
}

fn check_projection<F: Real>(s: &ProbMap<F>, p: &LatentProjection) -> Result<()> {
    if s.channels() != p.semantic_count() {
        return Err(Error::Dimension(format!(
            "semantic map has {} channels, projection has {} rows",
            s.channels(),
            p.semantic_count()
        )));
    }
    Ok(())
}

fn rows_times<F: Real>(x: &Array4<F>, m: &Array2<F>) -> Array4<F> {
    let (n, h, w, k) = x.dim();
    let flat = x
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n * h * w, k))
        .expect("contiguous");
    let out = flat.dot(m);
    let cols = out.ncols();
    out.into_shape_with_order((n, h, w, cols)).expect("contiguous")
}

/// Maps semantic probabilities into the latent space: `out[l] = sum_c P(l | c) s_c[c]`.
pub fn semantic_to_latent<F: Real>(s_c: &ProbMap<F>, p: &LatentProjection) -> Result<ProbMap<F>> {
    check_projection(s_c, p)?;
    let pm = p.p.mapv(F::of);
    Ok(ProbMap::new(rows_times(&s_c.values, &pm), ProbKind::Latent))
}

/// Gradient of [`semantic_to_latent`] with respect to the semantic map; `P` is constant.
pub fn semantic_to_latent_backward<F: Real>(
    d_projected: &Array4<F>,
    p: &LatentProjection,
) -> Result<Array4<F>> {
    if d_projected.dim().3 != p.latent_count() {
        return Err(Error::Dimension(format!(
            "gradient has {} channels, projection has {} columns",
            d_projected.dim().3,
            p.latent_count()
        )));
    }
    let pt = p.p.t().mapv(F::of);
    Ok(rows_times(d_projected, &pt))
}

/// Value and gradients of the consistency loss.
///
/// `d_latent` is `None` for the cross-entropy variant: the latent prediction acts
/// as a constant target there.
#[derive(Debug, Clone)]
pub struct ConsistencyGrad<F> {
    pub loss: LossValue,
    pub d_latent: Option<Array4<F>>,
    pub d_projected: Array4<F>,
}

pub fn consistency_loss<F: Real>(
    s_l: &ProbMap<F>,
    s_lc: &ProbMap<F>,
    variant: ConsistencyVariant,
    reduction: Reduction,
) -> Result<ConsistencyGrad<F>> {
    if s_l.dims() != s_lc.dims() {
        return Err(Error::Dimension(format!(
            "latent map {:?} vs projected map {:?}",
            s_l.dims(),
            s_lc.dims()
        )));
    }
    let scale = scale_for(reduction, s_l.pixels());
    let mut d_projected = Array4::zeros(s_l.dims());
    let mut value = 0.0;
    match variant {
        ConsistencyVariant::CrossEntropy => {
            Zip::from(&mut d_projected)
                .and(&s_l.values)
                .and(&s_lc.values)
                .for_each(|g, &a, &b| {
                    let (a, b) = (a.f64(), b.f64());
                    value -= a * clamped_ln(b);
                    *g = F::of(scale * a * neg_ln_grad(b));
                });
            Ok(ConsistencyGrad {
                loss: LossValue::scalar("cons", value * scale),
                d_latent: None,
                d_projected,
            })
        }
        ConsistencyVariant::SymmetricKl => {
            let mut d_latent = Array4::zeros(s_l.dims());
            Zip::from(&mut d_latent)
                .and(&mut d_projected)
                .and(&s_l.values)
                .and(&s_lc.values)
                .for_each(|ga, gb, &a, &b| {
                    let (ar, br) = (a.f64(), b.f64());
                    let (a, b) = (ar.max(EPS), br.max(EPS));
                    let log_ratio = a.ln() - b.ln();
                    value += (a - b) * log_ratio;
                    if ar > EPS {
                        *ga = F::of(scale * (log_ratio + 1.0 - b / a));
                    }
                    if br > EPS {
                        *gb = F::of(scale * (-log_ratio + 1.0 - a / b));
                    }
                });
            Ok(ConsistencyGrad {
                loss: LossValue::scalar("cons", value * scale),
                d_latent: Some(d_latent),
                d_projected,
            })
        }
    }
}

/// Value and gradients of the discriminator objective.
#[derive(Debug, Clone)]
pub struct DiscGrad<F> {
    pub loss: LossValue,
    pub d_fake: Array3<F>,
    pub d_real: Array3<F>,
}

/// Spatial binary cross-entropy: predictions are tagged 0, ground truth maps 1.
///
/// Each term is reduced over its own selected pixels, so two maps of constant 0.5
/// give `2 ln 2`.
pub fn disc_loss<F: Real>(
    disc_on_pred: &Array3<F>,
    disc_on_gt: &Array3<F>,
    pred_mask: Option<&Array3<bool>>,
    gt_mask: Option<&Array3<bool>>,
    reduction: Reduction,
) -> Result<DiscGrad<F>> {
    let term = |d: &Array3<F>, mask: Option<&Array3<bool>>, real: bool| -> Result<(f64, Array3<F>)> {
        if let Some(m) = mask {
            check_spatial(d.dim(), m.dim(), "disc_loss mask")?;
        }
        let count = mask.map_or(d.len(), |m| m.iter().filter(|&&v| v).count());
        let scale = scale_for(reduction, count);
        let mut grad = Array3::zeros(d.dim());
        let mut total = 0.0;
        for ((idx, &v), g) in d.indexed_iter().zip(grad.iter_mut()) {
            if mask.is_some_and(|m| !m[idx]) {
                continue;
            }
            let v = v.f64();
            if real {
                total -= clamped_ln(v);
                *g = F::of(scale * neg_ln_grad(v));
            } else {
                total -= clamped_ln(1.0 - v);
                *g = F::of(-scale * neg_ln_grad(1.0 - v));
            }
        }
        Ok((total * scale, grad))
    };
    let (fake, d_fake) = term(disc_on_pred, pred_mask, false)?;
    let (real, d_real) = term(disc_on_gt, gt_mask, true)?;
    let mut loss = LossValue::scalar("disc", fake + real);
    loss.components.insert("disc_fake".into(), fake);
    loss.components.insert("disc_real".into(), real);
    Ok(DiscGrad {
        loss,
        d_fake,
        d_real,
    })
}

fn merge(into: &mut LossValue, part: &LossValue, name: &str) {
    into.components.insert(name.to_string(), part.value);
}

/// `L_ce + L_latent + lambda_adv * L_adv` on a labeled batch.
pub fn composite_labeled(
    ce: &LossValue,
    latent: &LossValue,
    adv: &LossValue,
    cfg: &RunConfig,
) -> LossValue {
    let mut out = LossValue {
        value: ce.value + latent.value + cfg.lambda_adv * adv.value,
        components: BTreeMap::new(),
    };
    merge(&mut out, ce, "l_ce");
    merge(&mut out, latent, "l_latent");
    merge(&mut out, adv, "l_adv_lab");
    out
}

/// `L_cons + lambda_adv * L_adv` on an unlabeled batch.
pub fn composite_unlabeled(cons: &LossValue, adv: &LossValue, cfg: &RunConfig) -> LossValue {
    let mut out = LossValue {
        value: cons.value + cfg.lambda_adv * adv.value,
        components: BTreeMap::new(),
    };
    merge(&mut out, cons, "l_cons");
    merge(&mut out, adv, "l_adv_unl");
    out
}

/// `L_labeled + lambda_unlabeled * L_unlabeled`.
pub fn composite_total(labeled: &LossValue, unlabeled: &LossValue, cfg: &RunConfig) -> LossValue {
    let mut components = labeled.components.clone();
    components.extend(unlabeled.components.clone());
    components.insert("l_labeled".into(), labeled.value);
    components.insert("l_unlabeled".into(), unlabeled.value);
    LossValue {
        value: labeled.value + cfg.lambda_unlabeled * unlabeled.value,
        components,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{one_hot, DEFAULT_IGNORE};
    use ndarray::{array, Array3};

    fn pm(shape: (usize, usize, usize, usize), v: Vec<f64>, kind: ProbKind) -> ProbMap<f64> {
        ProbMap::new(Array4::from_shape_vec(shape, v).unwrap(), kind)
    }

    fn labels(v: Array3<u8>) -> LabelMap {
        LabelMap {
            labels: v,
            ignore_index: DEFAULT_IGNORE,
        }
    }

    #[test]
    fn ce_examples() {
        let p = pm((1, 1, 2, 2), vec![1.0 - 1e-7, 1e-7, 1e-7, 1.0 - 1e-7], ProbKind::Semantic);
        let l = ce_loss(&p, &labels(array![[[0u8, 1]]]), Reduction::Mean).unwrap();
        assert!(l.loss.value < 1e-6);

        let u = ProbMap::<f64>::uniform(2, 3, 3, 4, ProbKind::Semantic);
        let y = labels(Array3::from_shape_fn((2, 3, 3), |(i, j, k)| ((i + j + k) % 4) as u8));
        let l = ce_loss(&u, &y, Reduction::Mean).unwrap();
        assert!((l.loss.value - 4f64.ln()).abs() < 1e-12);

        let p = pm((1, 1, 1, 2), vec![0.7, 0.3], ProbKind::Semantic);
        let l = ce_loss(&p, &labels(array![[[0u8]]]), Reduction::Mean).unwrap();
        assert!((l.loss.value - 0.356_674_943_938_732_4).abs() < 1e-12);
    }

    #[test]
    fn ce_all_ignored_is_zero_with_flag() {
        let u = ProbMap::<f64>::uniform(1, 1, 2, 3, ProbKind::Semantic);
        let l = ce_loss(&u, &labels(Array3::from_elem((1, 1, 2), DEFAULT_IGNORE)), Reduction::Mean).unwrap();
        assert_eq!(l.loss.value, 0.0);
        assert_eq!(l.loss.component("all_ignored"), Some(1.0));
    }

    #[test]
    fn adv_examples() {
        let d = Array3::from_elem((1, 2, 2), 1.0 - 1e-9);
        assert!(adv_gen_loss(&d, None, Reduction::Mean).unwrap().loss.value < 1e-8);
        let d = Array3::from_elem((1, 2, 2), 0.5);
        let v = adv_gen_loss(&d, None, Reduction::Mean).unwrap().loss.value;
        assert!((v - 2f64.ln()).abs() < 1e-12);
        let d = Array3::from_elem((1, 2, 2), 0.0);
        let v = adv_gen_loss(&d, None, Reduction::Mean).unwrap().loss.value;
        assert!((v - 18.420_680_743_952_367).abs() < 1e-9);
    }

    #[test]
    fn batch_joint_examples() {
        let y: ProbMap<f64> = one_hot(&labels(array![[[0u8]]]), 2).unwrap();
        let s = pm((1, 1, 1, 2), vec![1.0, 0.0], ProbKind::Latent);
        assert_eq!(batch_joint(&y, &s).unwrap(), array![[1.0, 0.0], [0.0, 0.0]]);

        let y: ProbMap<f64> = one_hot(&labels(array![[[0u8, 1]]]), 2).unwrap();
        let s = pm((1, 1, 2, 2), vec![0.8, 0.2, 0.4, 0.6], ProbKind::Latent);
        let j = batch_joint(&y, &s).unwrap();
        let expect = array![[0.4, 0.1], [0.2, 0.3]];
        assert!(j.iter().zip(expect.iter()).all(|(a, b)| (a - b).abs() < 1e-15));

        let y: ProbMap<f64> = one_hot(&labels(array![[[0u8, 1, 0, 1]]]), 2).unwrap();
        let s = ProbMap::uniform(1, 1, 4, 2, ProbKind::Latent);
        assert_eq!(batch_joint(&y, &s).unwrap(), array![[0.25, 0.25], [0.25, 0.25]]);
    }

    #[test]
    fn batch_joint_normalizes_by_valid_pixels() {
        let y: ProbMap<f64> = one_hot(&labels(array![[[0u8, DEFAULT_IGNORE]]]), 2).unwrap();
        let s = pm((1, 1, 2, 2), vec![0.5, 0.5, 0.9, 0.1], ProbKind::Latent);
        let j = batch_joint(&y, &s).unwrap();
        assert_eq!(j.sum(), 1.0);
        assert_eq!(j, array![[0.5, 0.5], [0.0, 0.0]]);
    }

    #[test]
    fn semantic_to_latent_examples() {
        let s = pm((1, 1, 1, 3), vec![0.2, 0.3, 0.5], ProbKind::Semantic);
        let p = LatentProjection::from_assignment(&[0, 0, 1], 2).unwrap();
        let out = semantic_to_latent(&s, &p).unwrap();
        assert!((out.values[[0, 0, 0, 0]] - 0.5).abs() < 1e-15);
        assert!((out.values[[0, 0, 0, 1]] - 0.5).abs() < 1e-15);

        let s = pm((1, 1, 1, 2), vec![1.0, 0.0], ProbKind::Semantic);
        let p = LatentProjection::new(array![[0.9, 0.1], [0.3, 0.7]]).unwrap();
        let out = semantic_to_latent(&s, &p).unwrap();
        assert_eq!(out.values.as_slice().unwrap(), &[0.9, 0.1]);

        let bad = LatentProjection::identity(3);
        assert!(matches!(semantic_to_latent(&s, &bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn consistency_examples() {
        let a = pm((1, 1, 2, 2), vec![1.0, 0.0, 0.0, 1.0], ProbKind::Latent);
        let l = consistency_loss(&a, &a, ConsistencyVariant::CrossEntropy, Reduction::Mean).unwrap();
        assert!(l.loss.value.abs() < 1e-12);
        assert!(l.d_latent.is_none());

        let u = ProbMap::<f64>::uniform(1, 2, 2, 4, ProbKind::Latent);
        let l = consistency_loss(&u, &u, ConsistencyVariant::CrossEntropy, Reduction::Mean).unwrap();
        assert!((l.loss.value - 4f64.ln()).abs() < 1e-12);

        let soft = pm((1, 1, 2, 3), vec![0.2, 0.3, 0.5, 0.6, 0.3, 0.1], ProbKind::Latent);
        let l = consistency_loss(&soft, &soft, ConsistencyVariant::SymmetricKl, Reduction::Mean).unwrap();
        assert_eq!(l.loss.value, 0.0);
    }

    #[test]
    fn disc_examples() {
        let lo = Array3::from_elem((1, 2, 2), EPS);
        let hi = Array3::from_elem((1, 2, 2), 1.0 - EPS);
        let l = disc_loss(&lo, &hi, None, None, Reduction::Mean).unwrap();
        assert!(l.loss.value < 1e-7);

        let half = Array3::from_elem((1, 2, 2), 0.5);
        let l = disc_loss(&half, &half, None, None, Reduction::Mean).unwrap();
        assert!((l.loss.value - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((l.loss.component("disc_fake").unwrap() - 2f64.ln()).abs() < 1e-12);

        let l = disc_loss(&hi, &hi, None, None, Reduction::Mean).unwrap();
        let fake = l.loss.component("disc_fake").unwrap();
        assert!((fake - 18.42).abs() < 0.01 && fake.is_finite());
    }

    #[test]
    fn composites() {
        let cfg = RunConfig::default();
        let v = |x| LossValue::scalar("x", x);
        let lab = composite_labeled(&v(1.0), &v(0.5), &v(2.0), &cfg);
        assert!((lab.value - 1.52).abs() < 1e-12);
        assert_eq!(composite_labeled(&v(0.0), &v(0.0), &v(0.0), &cfg).value, 0.0);
        let no_adv = RunConfig {
            lambda_adv: 0.0,
            ..cfg.clone()
        };
        assert_eq!(composite_labeled(&v(1.0), &v(0.5), &v(2.0), &no_adv).value, 1.5);

        let unl = composite_unlabeled(&v(1.0), &v(1.0), &cfg);
        assert!((unl.value - 1.01).abs() < 1e-12);
        assert_eq!(composite_unlabeled(&v(0.0), &v(0.0), &cfg).value, 0.0);
        let total = composite_total(&v(1.52), &v(1.01), &cfg);
        assert!((total.value - 1.621).abs() < 1e-12);
    }
}
