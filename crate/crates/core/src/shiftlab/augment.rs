//! Builds a batch of randomly transformed copies of one incoming sample.
//!
//! Transforms are geometric only (flip, pad-and-crop, right-angle rotation)
//! and never include a corruption kind.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, param_err, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Zero padding used by the random crop, in pixels per side.
pub const CROP_PAD: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augmentation {
    /// Horizontal flip with probability 1/2.
    Hflip,
    /// Zero-pad by [`CROP_PAD`], crop back to the original size at a uniform offset.
    Crop,
    /// Rotation by 0°, 90°, 180° or 270°, uniformly.
    Rot90s,
}

pub type AugmentSet = BTreeSet<Augmentation>;

pub fn default_augmentations() -> AugmentSet {
    [Augmentation::Hflip, Augmentation::Crop, Augmentation::Rot90s]
        .into_iter()
        .collect()
}

/// Draws applied to one batch item. `crop` is the window origin in padded
/// coordinates, so `(CROP_PAD, CROP_PAD)` is no shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub flipped: bool,
    pub crop: (usize, usize),
    pub quarter_turns: u8,
}

impl AugmentRecord {
    pub const IDENTITY: AugmentRecord = AugmentRecord {
        flipped: false,
        crop: (CROP_PAD, CROP_PAD),
        quarter_turns: 0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBatch {
    pub tensor: Tensor,
    pub provenance: Vec<AugmentRecord>,
    /// Set when the augmentation set is empty and `B > 1`: every item is
    /// the same image.
    pub degenerate: bool,
}

/// Mirrors each row of every plane.
pub fn hflip(img: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for p in 0..c * h {
        for x in 0..w {
            out[p * w + x] = img[p * w + (w - 1 - x)];
        }
    }
    out
}

/// Rotates every plane of a square image counter-clockwise by `quarters`·90°.
pub fn rotate90(img: &[f64], c: usize, side: usize, quarters: u8) -> Vec<f64> {
    let mut cur = img.to_vec();
    for _ in 0..quarters % 4 {
        let mut next = vec![0.0; cur.len()];
        for ch in 0..c {
            let base = ch * side * side;
            for y in 0..side {
                for x in 0..side {
                    // (y, x) of the output reads (x, side−1−y) of the input
                    next[base + y * side + x] = cur[base + x * side + (side - 1 - y)];
                }
            }
        }
        cur = next;
    }
    cur
}

fn shift_crop(img: &[f64], c: usize, h: usize, w: usize, origin: (usize, usize)) -> Vec<f64> {
    let (oy, ox) = (origin.0 as isize - CROP_PAD as isize, origin.1 as isize - CROP_PAD as isize);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize + oy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + ox;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Applies one record: crop, then flip, then rotate.
pub fn apply_record(img: &[f64], c: usize, h: usize, w: usize, rec: &AugmentRecord) -> Vec<f64> {
    let mut out = if rec.crop == (CROP_PAD, CROP_PAD) {
        img.to_vec()
    } else {
        shift_crop(img, c, h, w, rec.crop)
    };
    if rec.flipped {
        out = hflip(&out, c, h, w);
    }
    if rec.quarter_turns % 4 != 0 {
        out = rotate90(&out, c, h, rec.quarter_turns);
    }
    out
}

/// `b` independently augmented copies of a `1 × C × H × W` sample.
pub fn augment_batch(sample: &Tensor, b: usize, augs: &AugmentSet, rng: &mut Rng) -> Result<AugmentedBatch> {
    let [n, c, h, w] = sample.shape();
    if n != 1 {
        return dim_err(format!("augment_batch takes a single sample, got batch axis {n}"));
    }
    if b == 0 {
        return param_err("augmented batch size must be >= 1");
    }
    if augs.contains(&Augmentation::Rot90s) && h != w {
        return dim_err(format!("right-angle rotation needs a square image, got {h}x{w}"));
    }
    let img = sample.data();
    let mut data = Vec::with_capacity(b * img.len());
    let mut provenance = Vec::with_capacity(b);
    for _ in 0..b {
        let mut rec = AugmentRecord::IDENTITY;
        if augs.contains(&Augmentation::Hflip) {
            rec.flipped = rng.bernoulli(0.5);
        }
        if augs.contains(&Augmentation::Crop) {
            let span = 2 * CROP_PAD as u64 + 1;
            rec.crop = (rng.below(span) as usize, rng.below(span) as usize);
        }
        if augs.contains(&Augmentation::Rot90s) {
            rec.quarter_turns = rng.below(4) as u8;
        }
        data.extend(apply_record(img, c, h, w, &rec));
        provenance.push(rec);
    }
    Ok(AugmentedBatch {
        tensor: Tensor::new([b, c, h, w], data)?,
        provenance,
        degenerate: augs.is_empty() && b > 1,
    })
}
