//! Procedural ten-class glyph dataset, a stand-in for MNIST.
//!
//! Each class is a fixed set of strokes (segments and elliptic arcs) in a
//! unit box. Every sample draws a random affine warp, stroke width and ink
//! intensity, then rasterizes with a one-pixel antialiasing ramp.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{param_err, Result};
use crate::rng::Rng;
use crate::shiftlab::dataset::{Dataset, NUM_CLASSES};
use crate::tensor::Tensor;

pub const SIDE: usize = 28;

type Stroke = Vec<(f64, f64)>;

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, a0: f64, a1: f64) -> Stroke {
    let steps = (((a1 - a0).abs() / (PI / 10.0)).ceil() as usize).max(2);
    (0..=steps)
        .map(|i| {
            let a = a0 + (a1 - a0) * i as f64 / steps as f64;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

fn glyph(class: usize) -> Vec<Stroke> {
    match class {
        0 => vec![arc(0.0, 0.0, 0.55, 0.85, 0.0, 2.0 * PI)],
        1 => vec![
            vec![(0.05, -0.9), (0.05, 0.9)],
            vec![(-0.3, -0.6), (0.05, -0.9)],
        ],
        2 => {
            let mut top = arc(0.0, -0.45, 0.5, 0.45, PI, 2.0 * PI + 0.5);
            top.push((-0.55, 0.85));
            top.push((0.6, 0.85));
            vec![top]
        }
        3 => vec![
            arc(0.0, -0.45, 0.45, 0.42, -0.8 * PI, 0.5 * PI),
            arc(0.0, 0.42, 0.5, 0.45, -0.5 * PI, 0.8 * PI),
        ],
        4 => vec![
            vec![(0.3, -0.9), (0.3, 0.9)],
            vec![(0.3, -0.9), (-0.55, 0.3), (0.6, 0.3)],
        ],
        5 => {
            let mut s = vec![(0.55, -0.85), (-0.4, -0.85), (-0.4, -0.05)];
            s.extend(arc(0.0, 0.35, 0.5, 0.5, -0.85 * PI, 0.8 * PI).into_iter().skip(1));
            vec![s]
        }
        6 => vec![
            arc(0.0, 0.4, 0.45, 0.45, 0.0, 2.0 * PI),
            vec![(0.35, -0.9), (-0.42, 0.3)],
        ],
        7 => vec![vec![(-0.55, -0.85), (0.6, -0.85), (-0.1, 0.9)]],
        8 => vec![
            arc(0.0, -0.45, 0.38, 0.4, 0.0, 2.0 * PI),
            arc(0.0, 0.42, 0.45, 0.45, 0.0, 2.0 * PI),
        ],
        9 => vec![
            arc(0.0, -0.4, 0.45, 0.45, 0.0, 2.0 * PI),
            vec![(0.45, -0.4), (0.35, 0.9)],
        ],
        _ => unreachable!("class index checked by caller"),
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Renders one sample of `class` into a `SIDE × SIDE` buffer.
fn render(class: usize, rng: &mut Rng) -> Vec<f64> {
    let theta = rng.uniform(-0.2, 0.2);
    let sx = rng.uniform(0.8, 1.1) * 9.0;
    let sy = rng.uniform(0.8, 1.1) * 9.0;
    let shear = rng.uniform(-0.25, 0.25);
    let tx = rng.uniform(-2.0, 2.0);
    let ty = rng.uniform(-2.0, 2.0);
    let width = rng.uniform(1.0, 2.2);
    let ink = rng.uniform(0.35, 0.8);
    let (c, s) = (theta.cos(), theta.sin());
    let centre = (SIDE as f64 - 1.0) / 2.0;

    let strokes: Vec<Stroke> = glyph(class)
        .into_iter()
        .map(|stroke| {
            stroke
                .into_iter()
                .map(|(x, y)| {
                    let (x, y) = (x + shear * y, y);
                    let (x, y) = (x * sx, y * sy);
                    (c * x - s * y + centre + tx, s * x + c * y + centre + ty)
                })
                .collect()
        })
        .collect();

    let mut img = vec![0.0; SIDE * SIDE];
    for (i, px) in img.iter_mut().enumerate() {
        let p = ((i % SIDE) as f64, (i / SIDE) as f64);
        let mut d = f64::INFINITY;
        for stroke in &strokes {
            for pair in stroke.windows(2) {
                d = d.min(segment_distance(p, pair[0], pair[1]));
            }
        }
        *px = ink * (width / 2.0 + 0.5 - d).clamp(0.0, 1.0);
    }
    img
}

/// `n` glyph images with exactly balanced (then shuffled) labels.
pub fn gen_synthetic(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return param_err("synthetic dataset size must be >= 1");
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % NUM_CLASSES).collect();
    Rng::stream(seed, "synthetic/labels").shuffle(&mut labels);
    let pixels: Vec<f64> = labels
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, &class)| {
            let mut rng = Rng::indexed(seed, "synthetic/render", i as u64);
            render(class, &mut rng)
        })
        .collect();
    let images = Tensor::new([n, 1, SIDE, SIDE], pixels)?;
    Dataset::new(images, labels, format!("synthetic-{seed}"))
}
