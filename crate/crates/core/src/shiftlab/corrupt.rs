//! Parametric corruptions with five severity levels.
//!
//! Severity tables (index = severity − 1; severity 0 is the identity):
//!
//! | kind           | parameter        | 1    | 2    | 3    | 4    | 5    |
//! |----------------|------------------|------|------|------|------|------|
//! | gaussian_noise | σ                | .04  | .08  | .12  | .18  | .26  |
//! | shot_noise     | photons per unit | 60   | 25   | 12   | 5    | 3    |
//! | impulse_noise  | flip probability | .01  | .03  | .06  | .10  | .17  |
//! | defocus_blur   | disk radius (px) | 1    | 2    | 3    | 4    | 6    |
//! | contrast       | factor c         | .75  | .5   | .4   | .3   | .15  |
//! | brightness     | offset b         | .05  | .10  | .15  | .22  | .30  |

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{param_err, Error, Result};
use crate::rng::Rng;
use crate::shiftlab::dataset::Dataset;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    Contrast,
    Brightness,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 6] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
        }
    }

    fn parameter_name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "sigma",
            CorruptionKind::ShotNoise => "photons_per_unit",
            CorruptionKind::ImpulseNoise => "flip_probability",
            CorruptionKind::DefocusBlur => "disk_radius_px",
            CorruptionKind::Contrast => "contrast_factor",
            CorruptionKind::Brightness => "brightness_offset",
        }
    }

    /// Parameter values for severities 1..=5.
    pub fn table(self) -> [f64; 5] {
        match self {
            CorruptionKind::GaussianNoise => [0.04, 0.08, 0.12, 0.18, 0.26],
            CorruptionKind::ShotNoise => [60.0, 25.0, 12.0, 5.0, 3.0],
            CorruptionKind::ImpulseNoise => [0.01, 0.03, 0.06, 0.10, 0.17],
            CorruptionKind::DefocusBlur => [1.0, 2.0, 3.0, 4.0, 6.0],
            CorruptionKind::Contrast => [0.75, 0.5, 0.4, 0.3, 0.15],
            CorruptionKind::Brightness => [0.05, 0.10, 0.15, 0.22, 0.30],
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown corruption kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if severity > 5 {
            return param_err(format!("severity must be in 0..=5, got {severity}"));
        }
        Ok(CorruptionSpec { kind, severity })
    }

    pub fn clean() -> Self {
        CorruptionSpec {
            kind: CorruptionKind::GaussianNoise,
            severity: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.severity == 0
    }

    /// Table value for this severity; `None` at severity 0.
    pub fn parameter(&self) -> Option<f64> {
        match self.severity {
            0 => None,
            s => Some(self.kind.table()[s as usize - 1]),
        }
    }
}

impl fmt::Display for CorruptionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.kind, self.severity)
    }
}

/// Index mirrored at the borders without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

fn disk_offsets(radius: f64) -> Vec<(isize, isize)> {
    let r = radius.floor() as isize;
    let mut taps = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dy * dy + dx * dx) as f64) <= radius * radius {
                taps.push((dy, dx));
            }
        }
    }
    taps
}

/// Applies `kind` with an explicit parameter value (not necessarily from
/// the table) to one image of `c` planes of `h × w`, in place.
pub fn apply_with_parameter(
    img: &mut [f64],
    [c, h, w]: [usize; 3],
    kind: CorruptionKind,
    p: f64,
    rng: &mut Rng,
) {
    match kind {
        CorruptionKind::GaussianNoise => {
            for v in img.iter_mut() {
                *v = (*v + p * rng.normal()).clamp(0.0, 1.0);
            }
        }
        CorruptionKind::ShotNoise => {
            for v in img.iter_mut() {
                *v = (rng.poisson(*v * p) as f64 / p).clamp(0.0, 1.0);
            }
        }
        CorruptionKind::ImpulseNoise => {
            for v in img.iter_mut() {
                if rng.bernoulli(p) {
                    *v = if rng.bernoulli(0.5) { 1.0 } else { 0.0 };
                }
            }
        }
        CorruptionKind::DefocusBlur => {
            let taps = disk_offsets(p);
            let scale = 1.0 / taps.len() as f64;
            let src = img.to_vec();
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for &(dy, dx) in &taps {
                            let yy = reflect(y as isize + dy, h);
                            let xx = reflect(x as isize + dx, w);
                            acc += plane[yy * w + xx];
                        }
                        img[ch * h * w + y * w + x] = (acc * scale).clamp(0.0, 1.0);
                    }
                }
            }
        }
        CorruptionKind::Contrast => {
            let mean = img.iter().sum::<f64>() / img.len() as f64;
            for v in img.iter_mut() {
                *v = ((*v - mean) * p + mean).clamp(0.0, 1.0);
            }
        }
        CorruptionKind::Brightness => {
            for v in img.iter_mut() {
                *v = (*v + p).clamp(0.0, 1.0);
            }
        }
    }
}

/// Corrupts every batch item; item `i` draws from its own stream derived
/// from `(seed, kind, i)`, so results do not depend on scheduling.
pub fn corrupt(x: &Tensor, spec: CorruptionSpec, seed: u64) -> Result<Tensor> {
    if spec.severity > 5 {
        return param_err(format!("severity must be in 0..=5, got {}", spec.severity));
    }
    let Some(param) = spec.parameter() else {
        return Ok(x.clone());
    };
    let [_, c, h, w] = x.shape();
    let mut out = x.clone();
    let item = x.item_len();
    if item > 0 {
        let component = format!("corrupt/{}", spec.kind);
        out.data_mut()
            .par_chunks_mut(item)
            .enumerate()
            .for_each(|(i, img)| {
                let mut rng = Rng::indexed(seed, &component, i as u64);
                apply_with_parameter(img, [c, h, w], spec.kind, param, &mut rng);
            });
    }
    Ok(out)
}

/// Corrupted copy of a dataset; labels pass through untouched.
pub fn corrupt_dataset(ds: &Dataset, spec: CorruptionSpec, seed: u64) -> Result<Dataset> {
    let images = corrupt(&ds.images, spec, seed)?;
    Ok(ds.with_images(images, format!("{}+{}", ds.name, spec)))
}

/// JSON description of every severity table.
pub fn severity_manifest() -> serde_json::Value {
    let kinds: Vec<_> = CorruptionKind::ALL
        .iter()
        .map(|k| {
            json!({
                "kind": k.name(),
                "parameter": k.parameter_name(),
                "severity_0": "identity",
                "values": k.table(),
            })
        })
        .collect();
    json!({ "severity_levels": 5, "corruptions": kinds })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(2, 5), 2);
        assert_eq!(reflect(-6, 28), 6);
    }

    #[test]
    fn disk_sizes() {
        assert_eq!(disk_offsets(1.0).len(), 5);
        assert_eq!(disk_offsets(2.0).len(), 13);
    }

    #[test]
    fn unknown_kind_is_parameter_error() {
        assert!(matches!("fog".parse::<CorruptionKind>(), Err(Error::Parameter(_))));
        assert_eq!("shot_noise".parse::<CorruptionKind>().unwrap(), CorruptionKind::ShotNoise);
        assert!(CorruptionSpec::new(CorruptionKind::Contrast, 6).is_err());
    }

    #[test]
    fn contrast_zero_collapses_to_mean() {
        let mut img: Vec<f64> = (0..16).map(|i| i as f64 / 20.0).collect();
        let mean = img.iter().sum::<f64>() / 16.0;
        let mut rng = Rng::from_seed(0);
        apply_with_parameter(&mut img, [1, 4, 4], CorruptionKind::Contrast, 0.0, &mut rng);
        assert!(img.iter().all(|&v| v == mean));
    }

    #[test]
    fn blur_preserves_constant_image() {
        let x = Tensor::filled([1, 1, 8, 8], 0.4);
        let spec = CorruptionSpec::new(CorruptionKind::DefocusBlur, 5).unwrap();
        let y = corrupt(&x, spec, 1).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn manifest_lists_all_kinds() {
        let m = severity_manifest();
        let arr = m["corruptions"].as_array().unwrap();
        assert_eq!(arr.len(), 6);
        assert_eq!(arr[0]["values"][4], 0.26);
    }
}
