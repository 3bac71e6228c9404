//! Datasets: on-disk layout, synthetic generation, semi-supervised splits and augmentation.
//!
//! Layout of a dataset root:
//!
//! ```text
//! root/manifest.json        class names, pixel counts, optional ground-truth groups
//! root/images/<stem>.png    RGB images
//! root/labels/<stem>.png    8-bit class indices, 255 = ignore
//! root/val/...              optional validation split with the same layout
//! ```

mod augment;
mod mapping;
mod split;
mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

pub use augment::{augment_sample, hflip, AugParams};
pub use mapping::ManualMapping;
pub use split::{split_semi, SemiSplit};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::types::{ClassSpace, LabelMap, DEFAULT_IGNORE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub class_names: Vec<String>,
    /// Labeled pixel count per class.
    pub class_counts: Vec<u64>,
    #[serde(default = "default_ignore")]
    pub ignore_index: u8,
    /// Ground-truth grouping of semantic classes; evaluation only.
    #[serde(default)]
    pub groups: Option<Vec<usize>>,
    #[serde(default)]
    pub image_count: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_ignore() -> u8 {
    DEFAULT_IGNORE
}

impl Manifest {
    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_space(&self, latent: usize, allow_overflow: bool) -> Result<ClassSpace> {
        ClassSpace::new(self.class_count(), latent, self.ignore_index, allow_overflow)?
            .with_names(self.class_names.clone())
    }
}

/// In-memory dataset: `(H, W, 3)` images and optional `(H, W)` label maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub stems: Vec<String>,
    pub images: Vec<Array3<u8>>,
    pub labels: Vec<Option<Array2<u8>>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labeled_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i].is_some()).collect()
    }

    pub fn unlabeled_only_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i].is_none()).collect()
    }

    /// Mean RGB in `[0, 1]`, used to pad augmented crops.
    pub fn mean_pixel(&self) -> [f64; 3] {
        let mut sum = [0.0f64; 3];
        let mut count = 0usize;
        for img in &self.images {
            for px in img.rows() {
                for k in 0..3 {
                    sum[k] += px[k] as f64;
                }
                count += 1;
            }
        }
        if count == 0 {
            return [0.5; 3];
        }
        sum.map(|s| s / count as f64 / 255.0)
    }

    /// Image size when every image shares one, else `None`.
    pub fn uniform_size(&self) -> Option<(usize, usize)> {
        let first = self.images.first()?.dim();
        self.images
            .iter()
            .all(|i| i.dim() == first)
            .then_some((first.0, first.1))
    }

    /// Stacks un-augmented images (and labels when all present) into a batch tensor.
    pub fn stack<F: Real>(&self, ids: &[usize]) -> Result<(Array4<F>, Option<LabelMap>)> {
        let (h, w) = {
            let d = self.images[ids[0]].dim();
            (d.0, d.1)
        };
        let mut images = Array4::<F>::zeros((ids.len(), h, w, 3));
        let mut labels = Array3::<u8>::from_elem((ids.len(), h, w), self.manifest.ignore_index);
        let mut all_labeled = true;
        for (b, &i) in ids.iter().enumerate() {
            let img = &self.images[i];
            if img.dim() != (h, w, 3) {
                return Err(Error::Shape(format!(
                    "image {} is {:?}, batch expects {:?}",
                    self.stems[i],
                    img.dim(),
                    (h, w, 3)
                )));
            }
            images
                .index_axis_mut(ndarray::Axis(0), b)
                .assign(&img.mapv(|v| F::of(v as f64 / 255.0)));
            match &self.labels[i] {
                Some(l) => labels.index_axis_mut(ndarray::Axis(0), b).assign(l),
                None => all_labeled = false,
            }
        }
        let labels = all_labeled.then(|| LabelMap {
            labels,
            ignore_index: self.manifest.ignore_index,
        });
        Ok((images, labels))
    }

    /// Writes images, labels and manifest under `root`.
    pub fn save(&self, root: &Path) -> Result<()> {
        let img_dir = root.join("images");
        let lbl_dir = root.join("labels");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        fs::create_dir_all(&lbl_dir).map_err(|e| Error::io(&lbl_dir, e))?;
        for ((stem, img), lbl) in self.stems.iter().zip(&self.images).zip(&self.labels) {
            let (h, w, _) = img.dim();
            let raw = img.as_standard_layout().iter().copied().collect::<Vec<u8>>();
            let rgb = image::RgbImage::from_raw(w as u32, h as u32, raw)
                .ok_or_else(|| Error::Shape(format!("bad image buffer for {stem}")))?;
            rgb.save(img_dir.join(format!("{stem}.png")))?;
            if let Some(l) = lbl {
                let raw = l.as_standard_layout().iter().copied().collect::<Vec<u8>>();
                let gray = image::GrayImage::from_raw(w as u32, h as u32, raw)
                    .ok_or_else(|| Error::Shape(format!("bad label buffer for {stem}")))?;
                gray.save(lbl_dir.join(format!("{stem}.png")))?;
            }
        }
        let path = root.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&self.manifest)?)
            .map_err(|e| Error::io(&path, e))
    }
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

fn load_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Loads a dataset root. An empty or missing `labels/` directory yields a fully unlabeled pool.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| load_error(&manifest_path, e.to_string()))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| load_error(&manifest_path, e.to_string()))?;
    if manifest.class_count() < 2 {
        return Err(load_error(&manifest_path, "manifest lists fewer than 2 classes"));
    }
    let img_dir = root.join("images");
    let lbl_dir = root.join("labels");
    let stems = png_stems(&img_dir)?;
    if stems.is_empty() {
        return Err(load_error(&img_dir, "no PNG images found"));
    }
    let label_stems = png_stems(&lbl_dir)?;
    let has_labels = !label_stems.is_empty();
    if has_labels {
        if let Some(orphan) = label_stems.iter().find(|s| stems.binary_search(s).is_err()) {
            return Err(load_error(
                &lbl_dir.join(format!("{orphan}.png")),
                "label without a matching image",
            ));
        }
    }
    let classes = manifest.class_count();
    let ignore = manifest.ignore_index;
    let mut images = Vec::with_capacity(stems.len());
    let mut labels = Vec::with_capacity(stems.len());
    for stem in &stems {
        let ipath = img_dir.join(format!("{stem}.png"));
        let img = image::open(&ipath)
            .map_err(|e| load_error(&ipath, e.to_string()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let arr = Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw())
            .map_err(|e| load_error(&ipath, e.to_string()))?;
        images.push(arr);
        if !has_labels {
            labels.push(None);
            continue;
        }
        let lpath = lbl_dir.join(format!("{stem}.png"));
        if !lpath.exists() {
            return Err(load_error(&lpath, "missing label for image"));
        }
        let lbl = image::open(&lpath)
            .map_err(|e| load_error(&lpath, e.to_string()))?
            .to_luma8();
        if lbl.dimensions() != (w, h) {
            return Err(load_error(&lpath, "label size differs from image size"));
        }
        if let Some(&bad) = lbl.as_raw().iter().find(|&&v| v != ignore && v as usize >= classes) {
            return Err(load_error(
                &lpath,
                format!("label value {bad} outside [0, {classes}) and not ignore {ignore}"),
            ));
        }
        labels.push(Some(
            Array2::from_shape_vec((h as usize, w as usize), lbl.into_raw())
                .map_err(|e| load_error(&lpath, e.to_string()))?,
        ));
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        stems,
        images,
        labels,
    })
}

/// Pixel count per class over all labeled images.
pub fn class_histogram(labels: &[Option<Array2<u8>>], classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; classes];
    for l in labels.iter().flatten() {
        for &v in l.iter() {
            if (v as usize) < classes {
                counts[v as usize] += 1;
            }
        }
    }
    counts
}
