//! A small set of label-preserving image perturbations used while training
//! teachers. Each op is a pure function of its parameters; [`augment`]
//! draws the parameters per image from a seeded stream.

use rand::Rng;

use crate::curate::rotate_image;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AugmentOp {
    /// Mirror left-right with probability 1/2.
    HFlip,
    /// Zero-pad by 4 then crop back with an offset in `[-4, 4]` per axis.
    CropPad4,
    /// Zero a square of half the image side at a random centre.
    Cutout,
    /// Rotate by an angle in `[-15°, 15°]`, filling with zero.
    Rotate,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 4] = [AugmentOp::HFlip, AugmentOp::CropPad4, AugmentOp::Cutout, AugmentOp::Rotate];

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentOp::HFlip => "hflip",
            AugmentOp::CropPad4 => "random_crop_pad4",
            AugmentOp::Cutout => "cutout",
            AugmentOp::Rotate => "rotate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.as_str() == s)
    }
}

/// Comma-separated op names; empty or `none` gives no ops.
pub fn parse_ops(s: &str) -> Result<Vec<AugmentOp>> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| AugmentOp::parse(p.trim()).ok_or_else(|| Error::InvalidArgument(format!("unknown augmentation {p:?}"))))
        .collect()
}

pub fn format_ops(ops: &[AugmentOp]) -> String {
    if ops.is_empty() {
        return "none".into();
    }
    ops.iter().map(|o| o.as_str()).collect::<Vec<_>>().join(",")
}

type Dims = (usize, usize, usize);

pub fn hflip(img: &[f32], (c, h, w): Dims) -> Vec<f32> {
    let mut out = img.to_vec();
    for row in out.chunks_mut(w).take(c * h) {
        row.reverse();
    }
    out
}

/// Shifts content by `(-dy, -dx)`: the window origin moves to `(dy, dx)`
/// inside the zero-padded image. Zero offset is the identity.
pub fn crop_shift(img: &[f32], (c, h, w): Dims, dy: isize, dx: isize) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + dx;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Zeroes the `size × size` square centred at `(cy, cx)`, clipped to the image.
pub fn cutout(img: &[f32], (c, h, w): Dims, cy: usize, cx: usize, size: usize) -> Vec<f32> {
    let mut out = img.to_vec();
    let (y0, x0) = (cy.saturating_sub(size / 2), cx.saturating_sub(size / 2));
    let (y1, x1) = ((y0 + size).min(h), (x0 + size).min(w));
    for ch in 0..c {
        for y in y0..y1 {
            for x in x0..x1 {
                out[(ch * h + y) * w + x] = 0.0;
            }
        }
    }
    out
}

pub fn rotate(img: &[f32], dims: Dims, degrees: f64) -> Vec<f32> {
    rotate_image(img, dims, degrees, &vec![0.0; dims.0])
}

/// Applies `ops` in the given order to every image of a flat batch, with
/// parameters drawn from a stream keyed by `(seed, image index)`.
pub fn augment(images: &[f32], dims: Dims, ops: &[AugmentOp], seed: u64) -> Vec<f32> {
    let (c, h, w) = dims;
    let len = c * h * w;
    let mut out = Vec::with_capacity(images.len());
    for (i, img) in images.chunks(len).enumerate() {
        let mut rng = seed::rng(seed, &[i as u64]);
        let mut cur = img.to_vec();
        for op in ops {
            cur = match op {
                AugmentOp::HFlip => {
                    if rng.random_bool(0.5) {
                        hflip(&cur, dims)
                    } else {
                        cur
                    }
                }
                AugmentOp::CropPad4 => {
                    let dy = rng.random_range(-4i32..=4) as isize;
                    let dx = rng.random_range(-4i32..=4) as isize;
                    crop_shift(&cur, dims, dy, dx)
                }
                AugmentOp::Cutout => {
                    let cy = rng.random_range(0..h);
                    let cx = rng.random_range(0..w);
                    cutout(&cur, dims, cy, cx, h.min(w) / 2)
                }
                AugmentOp::Rotate => {
                    let deg = rng.random_range(-15.0..=15.0);
                    rotate(&cur, dims, deg)
                }
            };
        }
        out.extend(cur);
    }
    out
}
