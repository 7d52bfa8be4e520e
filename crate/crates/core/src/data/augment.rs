//! Scale, pad, rotate, crop and flip, applied identically to image and label.
//!
//! Every output pixel is mapped back through the inverse transform. Images
//! are sampled bilinearly, labels by nearest neighbour. Scale padding takes
//! the background label over a black image; rotation borders take the
//! ignore label over edge-clamped image values.

use rand::Rng;

use super::synth::sample_rng;
use super::Sample;
use crate::tensor::IGNORE_INDEX;
use crate::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    pub crop: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub max_rotation_deg: f64,
    pub flip: bool,
}

impl AugmentSpec {
    pub fn new(crop: usize) -> Self {
        AugmentSpec { crop, scale_min: 0.5, scale_max: 2.0, max_rotation_deg: 10.0, flip: true }
    }
}

/// One draw of the transform parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub angle_deg: f64,
    /// Crop offset as a fraction of the available slack, in [0, 1].
    pub crop_x: f64,
    pub crop_y: f64,
    pub flip: bool,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams { scale: 1.0, angle_deg: 0.0, crop_x: 0.5, crop_y: 0.5, flip: false }
    }

    pub fn draw(spec: &AugmentSpec, seed: u64, stream: u64) -> Self {
        let mut rng = sample_rng(seed, stream);
        let scale = rng.gen_range(spec.scale_min..=spec.scale_max);
        let angle_deg = rng.gen_range(-spec.max_rotation_deg..=spec.max_rotation_deg);
        let crop_x = rng.gen_range(0.0..=1.0);
        let crop_y = rng.gen_range(0.0..=1.0);
        let flip = spec.flip && rng.gen_bool(0.5);
        AugmentParams { scale, angle_deg, crop_x, crop_y, flip }
    }
}

/// Random augmentation of `s`, parameters drawn from `(seed, stream)`.
pub fn augment(s: &Sample, spec: &AugmentSpec, seed: u64, stream: u64) -> Sample {
    apply(s, &AugmentParams::draw(spec, seed, stream), spec.crop)
}

fn bilinear_clamped(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Applies fixed parameters and returns a `crop`×`crop` sample.
pub fn apply(s: &Sample, p: &AugmentParams, crop: usize) -> Sample {
    let (h, w) = (s.height(), s.width());
    let sh = ((h as f64 * p.scale).round() as usize).max(1);
    let sw = ((w as f64 * p.scale).round() as usize).max(1);
    // Effective per-axis scale after rounding the scaled extents.
    let (ky, kx) = (sh as f64 / h as f64, sw as f64 / w as f64);
    let (ch, cw) = (sh.max(crop), sw.max(crop));
    // The scaled image sits centred in the padded canvas.
    let (oy, ox) = (((ch - sh) / 2) as f64, ((cw - sw) / 2) as f64);
    let top = ((ch - crop) as f64 * p.crop_y).round();
    let left = ((cw - crop) as f64 * p.crop_x).round();
    let (sin, cos) = p.angle_deg.to_radians().sin_cos();
    let (cy, cx) = (ch as f64 / 2.0, cw as f64 / 2.0);

    let hw = h * w;
    let src = s.image.data();
    let mut image = vec![0.0; 3 * crop * crop];
    let mut label = vec![0usize; crop * crop];
    for oy_ in 0..crop {
        for ox_ in 0..crop {
            let fx = if p.flip { crop - 1 - ox_ } else { ox_ };
            // Canvas pixel-centre coordinates before rotation.
            let (qy, qx) = (oy_ as f64 + top + 0.5 - cy, fx as f64 + left + 0.5 - cx);
            let ry = cos * qy - sin * qx + cy;
            let rx = sin * qy + cos * qx + cx;
            let outside = ry < 0.0 || ry > ch as f64 || rx < 0.0 || rx > cw as f64;
            let (ry, rx) = (ry.clamp(0.0, ch as f64), rx.clamp(0.0, cw as f64));
            // Position inside the scaled image, continuous pixel-edge units.
            let (iy, ix) = (ry - oy, rx - ox);
            let in_image = iy >= 0.0 && iy <= sh as f64 && ix >= 0.0 && ix <= sw as f64;
            let o = oy_ * crop + ox_;
            if in_image {
                let (sy, sx) = (iy / ky - 0.5, ix / kx - 0.5);
                for c in 0..3 {
                    image[c * crop * crop + o] = bilinear_clamped(&src[c * hw..(c + 1) * hw], h, w, sy, sx);
                }
                let ly = ((iy / ky).floor() as usize).min(h - 1);
                let lx = ((ix / kx).floor() as usize).min(w - 1);
                label[o] = s.label[ly * w + lx];
            }
            if outside {
                label[o] = IGNORE_INDEX;
            }
        }
    }
    Sample { id: s.id, image: Tensor::new(&[3, crop, crop], image).expect("sized"), label }
}

/// Mirrors the sample left to right.
pub fn flip_horizontal(s: &Sample) -> Sample {
    let (h, w) = (s.height(), s.width());
    let mut out = s.clone();
    let src = s.image.data();
    let dst = out.image.data_mut();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                dst[(c * h + y) * w + x] = src[(c * h + y) * w + (w - 1 - x)];
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            out.label[y * w + x] = s.label[y * w + (w - 1 - x)];
        }
    }
    out
}
