//! Synthetic datasets, deterministic given a seed.
//!
//! The digit generator rasterizes per-class stroke polylines with random
//! rotation, scale, shift and pixel noise — enough class structure to
//! partially train a classifier without any external data.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::Matrix;
use crate::nn::Batch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// n×256 digit images on a 16×16 grid with one-hot labels (10 classes).
    DownscaledDigits16x16,
    /// n×4 standard-normal inputs, n×1 noisy linear-teacher targets.
    RandomRegression,
    /// n×2 points from two Gaussian clusters at ±(1.5, 1.5), n×1 {0,1}
    /// labels.
    TwoGaussians,
}

/// Stroke polylines per digit on the unit square (x right, y down).
#[allow(clippy::type_complexity)]
fn glyph_strokes(digit: usize) -> &'static [&'static [(f64, f64)]] {
    const D0: &[&[(f64, f64)]] = &[&[
        (0.30, 0.20),
        (0.70, 0.20),
        (0.75, 0.50),
        (0.70, 0.80),
        (0.30, 0.80),
        (0.25, 0.50),
        (0.30, 0.20),
    ]];
    const D1: &[&[(f64, f64)]] = &[
        &[(0.35, 0.30), (0.50, 0.18), (0.50, 0.82)],
        &[(0.35, 0.82), (0.65, 0.82)],
    ];
    const D2: &[&[(f64, f64)]] = &[&[
        (0.28, 0.30),
        (0.40, 0.18),
        (0.62, 0.20),
        (0.70, 0.35),
        (0.50, 0.55),
        (0.30, 0.80),
        (0.72, 0.80),
    ]];
    const D3: &[&[(f64, f64)]] = &[&[
        (0.30, 0.20),
        (0.65, 0.22),
        (0.68, 0.38),
        (0.50, 0.50),
        (0.68, 0.62),
        (0.65, 0.78),
        (0.30, 0.80),
    ]];
    const D4: &[&[(f64, f64)]] = &[&[(0.60, 0.82), (0.60, 0.18), (0.28, 0.60), (0.75, 0.60)]];
    const D5: &[&[(f64, f64)]] = &[&[
        (0.70, 0.20),
        (0.32, 0.20),
        (0.30, 0.50),
        (0.60, 0.48),
        (0.70, 0.65),
        (0.60, 0.80),
        (0.30, 0.78),
    ]];
    const D6: &[&[(f64, f64)]] = &[&[
        (0.65, 0.18),
        (0.40, 0.35),
        (0.30, 0.60),
        (0.40, 0.80),
        (0.65, 0.75),
        (0.68, 0.55),
        (0.35, 0.55),
    ]];
    const D7: &[&[(f64, f64)]] = &[&[(0.28, 0.20), (0.72, 0.20), (0.45, 0.82)]];
    const D8: &[&[(f64, f64)]] = &[
        &[
            (0.50, 0.20),
            (0.68, 0.32),
            (0.50, 0.48),
            (0.32, 0.32),
            (0.50, 0.20),
        ],
        &[
            (0.50, 0.48),
            (0.70, 0.65),
            (0.50, 0.82),
            (0.30, 0.65),
            (0.50, 0.48),
        ],
    ];
    const D9: &[&[(f64, f64)]] = &[&[
        (0.65, 0.45),
        (0.40, 0.45),
        (0.32, 0.30),
        (0.45, 0.18),
        (0.65, 0.25),
        (0.66, 0.45),
        (0.60, 0.80),
    ]];
    match digit {
        0 => D0,
        1 => D1,
        2 => D2,
        3 => D3,
        4 => D4,
        5 => D5,
        6 => D6,
        7 => D7,
        8 => D8,
        _ => D9,
    }
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return ((px - a.0).powi(2) + (py - a.1).powi(2)).sqrt();
    }
    let t = (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0);
    ((px - a.0 - t * dx).powi(2) + (py - a.1 - t * dy).powi(2)).sqrt()
}

fn render_digit(digit: usize, side: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let thickness = rng.random_range(0.05..0.08);
    let angle = rng.random_range(-0.25..0.25);
    let scale = rng.random_range(0.85..1.1);
    let shift_x = rng.random_range(-0.08..0.08);
    let shift_y = rng.random_range(-0.08..0.08);
    let (ca, sa) = (angle.cos(), angle.sin());
    let strokes = glyph_strokes(digit);
    let transformed: Vec<Vec<(f64, f64)>> = strokes
        .iter()
        .map(|poly| {
            poly.iter()
                .map(|&(x, y)| {
                    let (x0, y0) = ((x - 0.5) * scale, (y - 0.5) * scale);
                    (
                        0.5 + ca * x0 - sa * y0 + shift_x,
                        0.5 + sa * x0 + ca * y0 + shift_y,
                    )
                })
                .collect()
        })
        .collect();
    let mut image = vec![0.0; side * side];
    for iy in 0..side {
        for ix in 0..side {
            let px = (ix as f64 + 0.5) / side as f64;
            let py = (iy as f64 + 0.5) / side as f64;
            let mut dist = f64::INFINITY;
            for poly in &transformed {
                for seg in poly.windows(2) {
                    dist = dist.min(segment_distance(px, py, seg[0], seg[1]));
                }
            }
            image[iy * side + ix] = (-(dist / thickness).powi(2)).exp();
        }
    }
    for v in image.iter_mut() {
        let noise: f64 = rng.sample(StandardNormal);
        *v = (*v + 0.04 * noise).clamp(0.0, 1.0);
    }
    image
}

/// Digit images and labels, classes cycling 0..9.
pub fn digit_images(n: usize, side: usize, seed: u64) -> (Matrix, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Matrix::zeros(n, side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = i % 10;
        labels.push(digit as u8);
        let image = render_digit(digit, side, &mut rng);
        x.row_mut(i).copy_from_slice(&image);
    }
    (x, labels)
}

/// Generate a synthetic batch; shapes are documented on [`SynthKind`].
pub fn synth_dataset(kind: SynthKind, n: usize, seed: u64) -> Result<Batch> {
    match kind {
        SynthKind::DownscaledDigits16x16 => {
            let (x, labels) = digit_images(n, 16, seed);
            let mut y = Matrix::zeros(n, 10);
            for (i, &l) in labels.iter().enumerate() {
                y.set(i, l as usize, 1.0);
            }
            Batch::new(x, y)
        }
        SynthKind::RandomRegression => {
            let d = 4;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let teacher: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let mut x = Matrix::zeros(n, d);
            for v in x.data_mut() {
                *v = rng.sample(StandardNormal);
            }
            let mut y = Matrix::zeros(n, 1);
            let scale = 1.0 / (d as f64).sqrt();
            for i in 0..n {
                let dot: f64 = x.row(i).iter().zip(teacher.iter()).map(|(a, b)| a * b).sum();
                let noise: f64 = rng.sample(StandardNormal);
                y.set(i, 0, dot * scale + 0.1 * noise);
            }
            Batch::new(x, y)
        }
        SynthKind::TwoGaussians => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x = Matrix::zeros(n, 2);
            let mut y = Matrix::zeros(n, 1);
            for i in 0..n {
                let class = i % 2;
                let mean = if class == 0 { -1.5 } else { 1.5 };
                let gx: f64 = rng.sample(StandardNormal);
                let gy: f64 = rng.sample(StandardNormal);
                x.set(i, 0, mean + gx);
                x.set(i, 1, mean + gy);
                y.set(i, 0, class as f64);
            }
            Batch::new(x, y)
        }
    }
}
