//! Segmentation metrics, latent-class diagnostics and their exports.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::cooccurrence::{dominance_fraction, effective_latent_count, LatentProjection};
use crate::data::{Dataset, ManualMapping};
use crate::error::{Error, Result};
use crate::models::SegNet;
use crate::real::Real;
use crate::types::ClassSpace;

/// Pixel counts indexed `[ground truth, prediction]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: Array2::zeros((classes, classes)),
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.nrows()
    }

    /// Accumulates one prediction/label pair, skipping `ignore` pixels.
    pub fn add(&mut self, pred: &Array2<usize>, truth: &Array2<u8>, ignore: u8) -> Result<()> {
        if pred.dim() != truth.dim() {
            return Err(Error::Dimension(format!(
                "prediction {:?} vs labels {:?}",
                pred.dim(),
                truth.dim()
            )));
        }
        let k = self.classes();
        for (&p, &t) in pred.iter().zip(truth) {
            if t == ignore {
                continue;
            }
            let t = t as usize;
            if t >= k || p >= k {
                return Err(Error::Dimension(format!("class index {} outside {k}", t.max(p))));
            }
            self.counts[[t, p]] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts += &other.counts;
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// IoU per class; `None` where the class has an empty union.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes())
            .map(|c| {
                let tp = self.counts[[c, c]];
                let union = self.counts.row(c).sum() + self.counts.column(c).sum() - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a non-empty union.
    pub fn miou(&self) -> Result<f64> {
        let present: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::UndefinedMetric(
                "mIoU undefined: no class occurs in labels or predictions".into(),
            ));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Agreement between the latent partition induced by `p` and a ground-truth grouping.
///
/// Every semantic class goes to its dominant latent class; every latent class is then
/// matched to one group. The result is the best achievable fraction of classes whose
/// matched group equals their true group. Latent classes are matched independently,
/// so the optimum picks each latent class's majority group.
pub fn grouping_agreement(p: &LatentProjection, truth: &ManualMapping) -> f64 {
    let dominant = p.dominant();
    let classes = dominant.len();
    if classes == 0 {
        return 0.0;
    }
    let groups = truth.group_count();
    let mut table = Array2::<usize>::zeros((p.latent_count(), groups.max(1)));
    for (c, &l) in dominant.iter().enumerate() {
        table[[l, truth.assignment[c]]] += 1;
    }
    let agree: usize = table
        .rows()
        .into_iter()
        .map(|r| r.iter().copied().max().unwrap_or(0))
        .sum();
    agree as f64 / classes as f64
}

const CELL: u32 = 24;

fn heat_color(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * v).round() as u8;
    [lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(255.0, 107.0)]
}

/// Writes `P(l | c)` as CSV at `csv_path` and as a PNG heatmap next to it.
///
/// Rows follow semantic class order; darker cells mean higher probability.
pub fn export_plc_heatmap(
    p: &LatentProjection,
    space: Option<&ClassSpace>,
    csv_path: &Path,
) -> Result<PathBuf> {
    if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
    p.write_csv(space, file)?;
    let (rows, cols) = p.p.dim();
    let mut img = image::RgbImage::new(cols.max(1) as u32 * CELL, rows.max(1) as u32 * CELL);
    for ((r, c), &v) in p.p.indexed_iter() {
        let color = image::Rgb(heat_color(v));
        for dy in 0..CELL {
            for dx in 0..CELL {
                let edge = dy == 0 || dx == 0;
                let px = if edge { image::Rgb([200, 200, 200]) } else { color };
                img.put_pixel(c as u32 * CELL + dx, r as u32 * CELL + dy, px);
            }
        }
    }
    let png = csv_path.with_extension("png");
    img.save(&png)?;
    Ok(png)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub miou: f64,
    /// `null` for classes absent from both labels and predictions.
    pub per_class_iou: Vec<Option<f64>>,
    pub confusion: Vec<Vec<u64>>,
    pub effective_latent_t01: Option<usize>,
    pub effective_latent_t09: Option<usize>,
    pub dominance_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grouping_agreement: Option<f64>,
    pub seed: u64,
}

/// Full-resolution class predictions for a stack of images `(N, H, W, 3)`.
///
/// Inputs whose size is not a multiple of the network stride are padded with `fill`
/// and the prediction is cropped back.
pub fn predict<F: Real>(seg: &SegNet<F>, images: &Array4<F>, fill: [f64; 3]) -> Result<Array3<usize>> {
    let (n, h, w, _) = images.dim();
    let stride = seg.stride();
    let (ph, pw) = (h.div_ceil(stride) * stride, w.div_ceil(stride) * stride);
    let fwd = if (ph, pw) == (h, w) {
        seg.forward(images, false)?
    } else {
        let mut padded = Array4::from_shape_fn((n, ph, pw, 3), |(_, _, _, k)| F::of(fill[k]));
        padded.slice_mut(s![.., ..h, ..w, ..]).assign(images);
        seg.forward(&padded, false)?
    };
    let full = fwd.semantic.argmax();
    Ok(full.slice(s![.., ..h, ..w]).to_owned())
}

/// Latent diagnostics and optional grouping agreement for a projection.
pub fn latent_report(
    p: Option<&LatentProjection>,
    groups: Option<&[usize]>,
) -> (Option<usize>, Option<usize>, Option<f64>, Option<f64>) {
    match p {
        None => (None, None, None, None),
        Some(p) => (
            Some(effective_latent_count(p, 0.1)),
            Some(effective_latent_count(p, 0.9)),
            Some(dominance_fraction(p, 0.9)),
            groups.map(|g| grouping_agreement(p, &ManualMapping::from_assignment(g.to_vec()))),
        ),
    }
}

/// Unaugmented full-image evaluation over the labeled images of `data`.
pub fn evaluate<F: Real>(
    seg: &SegNet<F>,
    data: &Dataset,
    projection: Option<&LatentProjection>,
    seed: u64,
) -> Result<Metrics> {
    let classes = data.manifest.class_count();
    if seg.semantic_count() != classes {
        return Err(Error::Dimension(format!(
            "model predicts {} classes, dataset has {classes}",
            seg.semantic_count()
        )));
    }
    let ids = data.labeled_ids();
    if ids.is_empty() {
        return Err(Error::UndefinedMetric("evaluation split has no labels".into()));
    }
    let fill = data.mean_pixel();
    let ignore = data.manifest.ignore_index;
    let mut cm = ConfusionMatrix::new(classes);
    let uniform = data.uniform_size().is_some();
    let chunk = if uniform { 8 } else { 1 };
    for group in ids.chunks(chunk) {
        let (images, labels) = data.stack::<F>(group)?;
        let labels = labels.expect("labeled ids");
        let pred = predict(seg, &images, fill)?;
        for (p, t) in pred.axis_iter(Axis(0)).zip(labels.labels.axis_iter(Axis(0))) {
            cm.add(&p.to_owned(), &t.to_owned(), ignore)?;
        }
    }
    let (t01, t09, dom, agree) = latent_report(projection, data.manifest.groups.as_deref());
    Ok(Metrics {
        miou: cm.miou()?,
        per_class_iou: cm.per_class_iou(),
        confusion: cm.counts.rows().into_iter().map(|r| r.to_vec()).collect(),
        effective_latent_t01: t01,
        effective_latent_t09: t09,
        dominance_fraction: dom,
        grouping_agreement: agree,
        seed,
    })
}
