use ndarray::{s, Array, Array2, Array3, Axis, Dimension, Slice};
use rand::Rng;

use crate::nn::Resize;

/// Geometric transform applied identically to an image and its labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugParams {
    pub scale: f64,
    pub flip: bool,
    pub crop_y: usize,
    pub crop_x: usize,
}

impl AugParams {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            flip: false,
            crop_y: 0,
            crop_x: 0,
        }
    }

    /// Random scale in `scale_range`, fair-coin flip and uniform crop offset.
    pub fn sample<R: Rng>(rng: &mut R, hw: (usize, usize), crop: usize, scale_range: (f64, f64)) -> Self {
        let (lo, hi) = scale_range;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let flip = rng.random_bool(0.5);
        let (sh, sw) = scaled(hw, scale);
        let crop_y = rng.random_range(0..=sh.max(crop) - crop);
        let crop_x = rng.random_range(0..=sw.max(crop) - crop);
        Self {
            scale,
            flip,
            crop_y,
            crop_x,
        }
    }
}

fn scaled((h, w): (usize, usize), scale: f64) -> (usize, usize) {
    (
        ((h as f64 * scale).round() as usize).max(1),
        ((w as f64 * scale).round() as usize).max(1),
    )
}

/// Mirrors along the width axis (axis 1).
pub fn hflip<A: Clone, D: Dimension>(a: &Array<A, D>) -> Array<A, D> {
    a.slice_axis(Axis(1), Slice::new(0, None, -1)).to_owned()
}

fn nearest_resize(label: &Array2<u8>, out: (usize, usize)) -> Array2<u8> {
    let (h, w) = label.dim();
    let src = |o: usize, input: usize, output: usize| {
        (((o as f64 + 0.5) * input as f64 / output as f64).floor() as usize).min(input - 1)
    };
    Array2::from_shape_fn(out, |(y, x)| label[[src(y, h, out.0), src(x, w, out.1)]])
}

/// Scales, flips, pads and crops one sample to `crop x crop`.
///
/// The image is resampled bilinearly, labels by nearest neighbour. Regions outside
/// the scaled image are filled with `mean` and `ignore`.
pub fn augment_sample(
    image: &Array3<u8>,
    label: Option<&Array2<u8>>,
    p: &AugParams,
    crop: usize,
    mean: [f64; 3],
    ignore: u8,
) -> (Array3<f64>, Option<Array2<u8>>) {
    let (h, w, _) = image.dim();
    let (sh, sw) = scaled((h, w), p.scale);
    let img = image.mapv(|v| v as f64 / 255.0);
    let img = if (sh, sw) == (h, w) {
        img
    } else {
        let batch = img.insert_axis(Axis(0));
        Resize::new((h, w), (sh, sw))
            .forward(&batch)
            .index_axis_move(Axis(0), 0)
    };
    let img = if p.flip { hflip(&img) } else { img };
    let lbl = label.map(|l| {
        let l = if (sh, sw) == (h, w) {
            l.clone()
        } else {
            nearest_resize(l, (sh, sw))
        };
        if p.flip {
            hflip(&l)
        } else {
            l
        }
    });

    let (ph, pw) = (sh.max(crop), sw.max(crop));
    let mut canvas = Array3::from_shape_fn((ph, pw, 3), |(_, _, k)| mean[k]);
    canvas.slice_mut(s![..sh, ..sw, ..]).assign(&img);
    let (y0, x0) = (p.crop_y.min(ph - crop), p.crop_x.min(pw - crop));
    let out_img = canvas.slice(s![y0..y0 + crop, x0..x0 + crop, ..]).to_owned();
    let out_lbl = lbl.map(|l| {
        let mut c = Array2::from_elem((ph, pw), ignore);
        c.slice_mut(s![..sh, ..sw]).assign(&l);
        c.slice(s![y0..y0 + crop, x0..x0 + crop]).to_owned()
    });
    (out_img, out_lbl)
}
