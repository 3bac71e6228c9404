use std::f64::consts::PI;
use std::path::PathBuf;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{class_histogram, Dataset, Manifest};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::types::DEFAULT_IGNORE;

/// Minimum hue distance in degrees between any two group families after jitter.
pub const MIN_HUE_GAP: f64 = 30.0;

const TEXTURE_PERIOD: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Texture {
    Solid,
    Stripes,
    Checker,
    Dots,
}

const TEXTURES: [Texture; 4] = [Texture::Solid, Texture::Stripes, Texture::Checker, Texture::Dots];

/// Procedural segmentation dataset with known supercategory structure.
///
/// Each group owns a hue family, evenly spaced around the colour wheel. Classes
/// inside a group share that hue and differ by texture and a brightness offset.
/// Class 0 is the background, painted under every image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub semantic_count: usize,
    /// Group id per semantic class. Used for evaluation only.
    pub groups: Vec<usize>,
    /// Inclusive range of foreground shapes per image.
    pub shapes_per_image: (usize, usize),
    /// Range of shape half-extents as fractions of the image size.
    pub radius_range: (f64, f64),
    pub image_size: usize,
    /// Per-shape hue jitter in degrees, uniform in `[-hue_jitter, hue_jitter]`. Defaults to
    /// a quarter of the hue sector of each group, at most 30.
    pub hue_jitter: f64,
    /// Relative amplitude of texture modulation.
    pub texture_contrast: f64,
    /// Brightness increment between consecutive classes of a group.
    pub brightness_step: f64,
    /// Standard deviation of per-pixel Gaussian noise, in `[0, 1]` intensity units.
    pub noise_std: f64,
    /// Half-width of the per-image illumination multiplier around 1.
    pub illumination_jitter: f64,
    /// Minimum fraction of dataset pixels per class.
    pub min_coverage: f64,
    pub max_retries: usize,
}

impl SyntheticSpec {
    /// Classes assigned to groups in contiguous blocks: `c -> c * groups / classes`.
    pub fn grouped(classes: usize, groups: usize) -> Self {
        let groups = groups.max(1);
        Self {
            semantic_count: classes,
            groups: (0..classes).map(|c| c * groups / classes.max(1)).collect(),
            shapes_per_image: (2, 5),
            radius_range: (0.1, 0.25),
            image_size: 64,
            hue_jitter: (90.0 / groups as f64).min(30.0),
            texture_contrast: 0.2,
            brightness_step: 0.08,
            noise_std: 0.15,
            illumination_jitter: 0.15,
            min_coverage: 0.01,
            max_retries: 8,
        }
    }

    pub fn group_count(&self) -> usize {
        self.groups.iter().max().map_or(0, |g| g + 1)
    }

    /// Smallest hue distance between two group families, accounting for jitter.
    pub fn hue_separation(&self) -> f64 {
        let g = self.group_count();
        if g <= 1 {
            return 360.0;
        }
        360.0 / g as f64 - 2.0 * self.hue_jitter
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Generation(m));
        if self.semantic_count < 2 {
            return bad(format!("need at least 2 classes, got {}", self.semantic_count));
        }
        if self.groups.len() != self.semantic_count {
            return bad(format!(
                "group map has {} entries for {} classes",
                self.groups.len(),
                self.semantic_count
            ));
        }
        if let Some(g) = (0..self.group_count()).find(|g| !self.groups.contains(g)) {
            return bad(format!("group {g} has no classes"));
        }
        if self.hue_separation() < MIN_HUE_GAP {
            return bad(format!(
                "hue families {:.1} deg apart after jitter, need {MIN_HUE_GAP}",
                self.hue_separation()
            ));
        }
        let (lo, hi) = self.shapes_per_image;
        if lo == 0 || lo > hi {
            return bad(format!("invalid shapes_per_image range ({lo}, {hi})"));
        }
        let (rlo, rhi) = self.radius_range;
        if !(rlo > 0.0 && rlo < rhi && rhi <= 1.0) {
            return bad(format!("invalid radius_range ({rlo}, {rhi})"));
        }
        if self.image_size < 8 {
            return bad(format!("image_size {} below 8", self.image_size));
        }
        Ok(())
    }

    /// Rank of class `c` among the classes of its group.
    fn rank(&self, c: usize) -> usize {
        self.groups[..c].iter().filter(|&&g| g == self.groups[c]).count()
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.semantic_count)
            .map(|c| {
                if c == 0 {
                    "background".to_string()
                } else {
                    format!("g{}_c{}", self.groups[c], self.rank(c))
                }
            })
            .collect()
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

struct Paint {
    rgb: [f64; 3],
    texture: Texture,
    angle: f64,
    phase: f64,
}

impl Paint {
    fn new(spec: &SyntheticSpec, class: usize, rng: &mut ChaCha8Rng) -> Self {
        let g = spec.groups[class];
        let rank = spec.rank(class);
        let hue = 360.0 * g as f64 / spec.group_count() as f64
            + rng.random_range(-spec.hue_jitter..=spec.hue_jitter);
        let sat = rng.random_range(0.55..0.85);
        let value = (0.45 + spec.brightness_step * rank as f64).min(1.0);
        Self {
            rgb: hsv_to_rgb(hue, sat, value),
            texture: TEXTURES[rank % TEXTURES.len()],
            angle: rng.random_range(0.0..PI),
            phase: rng.random_range(0.0..TEXTURE_PERIOD),
        }
    }

    fn modulation(&self, y: f64, x: f64, contrast: f64) -> f64 {
        let w = 2.0 * PI / TEXTURE_PERIOD;
        let u = x * self.angle.cos() + y * self.angle.sin() + self.phase;
        let v = -x * self.angle.sin() + y * self.angle.cos();
        let m = match self.texture {
            Texture::Solid => 0.0,
            Texture::Stripes => (w * u).sin().signum(),
            Texture::Checker => ((w * u).sin() * (w * v).sin()).signum(),
            Texture::Dots => {
                if (w * u).cos() * (w * v).cos() > 0.5 {
                    1.0
                } else {
                    -1.0
                }
            }
        };
        1.0 + contrast * m
    }
}

enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, angle: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
}

impl Shape {
    fn random(size: usize, radius: (f64, f64), rng: &mut ChaCha8Rng) -> Self {
        let s = size as f64;
        let cy = rng.random_range(0.0..s);
        let cx = rng.random_range(0.0..s);
        let ry = rng.random_range(s * radius.0..s * radius.1);
        let rx = rng.random_range(s * radius.0..s * radius.1);
        if rng.random_bool(0.5) {
            Shape::Ellipse {
                cy,
                cx,
                ry,
                rx,
                angle: rng.random_range(0.0..PI),
            }
        } else {
            Shape::Rect {
                y0: cy - ry,
                x0: cx - rx,
                y1: cy + ry,
                x1: cx + rx,
            }
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx, angle } => {
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * angle.cos() + dy * angle.sin();
                let v = -dx * angle.sin() + dy * angle.cos();
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
        }
    }
}

fn render(spec: &SyntheticSpec, index: usize, rng: &mut ChaCha8Rng) -> (Array3<u8>, Array2<u8>) {
    let n = spec.image_size;
    let classes = spec.semantic_count;
    let mut label = Array2::<u8>::zeros((n, n));
    let mut rgb = Array3::<f64>::zeros((n, n, 3));

    let bg = Paint::new(spec, 0, rng);
    for ((y, x), _) in label.indexed_iter() {
        let m = bg.modulation(y as f64, x as f64, spec.texture_contrast);
        for k in 0..3 {
            rgb[[y, x, k]] = bg.rgb[k] * m;
        }
    }

    let (lo, hi) = spec.shapes_per_image;
    let count = rng.random_range(lo..=hi);
    for j in 0..count {
        // The first shape cycles through foreground classes so small datasets cover all of them.
        let class = if j == 0 {
            1 + index % (classes - 1)
        } else {
            rng.random_range(1..classes)
        };
        let paint = Paint::new(spec, class, rng);
        let shape = Shape::random(n, spec.radius_range, rng);
        for y in 0..n {
            for x in 0..n {
                let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
                if shape.contains(fy, fx) {
                    label[[y, x]] = class as u8;
                    let m = paint.modulation(fy, fx, spec.texture_contrast);
                    for k in 0..3 {
                        rgb[[y, x, k]] = paint.rgb[k] * m;
                    }
                }
            }
        }
    }

    let illum = 1.0 + rng.random_range(-spec.illumination_jitter..=spec.illumination_jitter);
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite noise std");
    let image = rgb.mapv(|v| {
        let v = v * illum + noise.sample(rng);
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    });
    (image, label)
}

/// Generates `n` image/label pairs, deterministic in `seed`.
///
/// Every class must cover at least `min_coverage` of all pixels; otherwise the whole
/// set is redrawn from a fresh stream, up to `max_retries` times.
pub fn generate_synthetic(spec: &SyntheticSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Generation("n must be at least 1".into()));
    }
    let classes = spec.semantic_count;
    let total = (n * spec.image_size * spec.image_size) as f64;
    let mut worst = (0, 0.0);
    for attempt in 0..=spec.max_retries {
        let (images, labels): (Vec<_>, Vec<_>) = (0..n)
            .map(|i| {
                let mut rng = stream(seed, &[i as u64, attempt as u64]);
                let (img, lbl) = render(spec, i, &mut rng);
                (img, Some(lbl))
            })
            .unzip();
        let counts = class_histogram(&labels, classes);
        let (c, min) = counts
            .iter()
            .enumerate()
            .map(|(c, &k)| (c, k as f64 / total))
            .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        if min >= spec.min_coverage {
            let manifest = Manifest {
                class_names: spec.class_names(),
                class_counts: counts,
                ignore_index: DEFAULT_IGNORE,
                groups: Some(spec.groups.clone()),
                image_count: n,
                seed: Some(seed),
            };
            return Ok(Dataset {
                root: PathBuf::new(),
                manifest,
                stems: (0..n).map(|i| format!("img_{i:05}")).collect(),
                images,
                labels,
            });
        }
        worst = (c, min);
    }
    Err(Error::Generation(format!(
        "class {} covers {:.4} of pixels after {} retries, need {}",
        worst.0, worst.1, spec.max_retries, spec.min_coverage
    )))
}
