use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    /// One geometric primitive per image at a random place, size and colour,
    /// on a noisy background. The class is the primitive.
    Shapes,
    /// Sinusoidal gratings; the class is the orientation.
    Stripes,
    /// Sums of Gaussian bumps around class-specific anchor points.
    Blobs,
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Generator::Shapes => "shapes",
            Generator::Stripes => "stripes",
            Generator::Blobs => "blobs",
        })
    }
}

impl FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes" => Ok(Generator::Shapes),
            "stripes" => Ok(Generator::Stripes),
            "blobs" => Ok(Generator::Blobs),
            _ => Err(Error::Config(format!("unknown generator `{s}`"))),
        }
    }
}

/// Number of distinct primitives the shapes generator can draw.
pub const SHAPE_KINDS: usize = 8;

/// Deterministic dataset of `n` RGB images of `size x size`, `classes`
/// balanced classes (counts differ by at most one).
pub fn gen_synthetic(generator: Generator, n: usize, size: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || size == 0 || classes == 0 {
        return Err(Error::Config("n, size and classes must be positive".into()));
    }
    if generator == Generator::Shapes && classes > SHAPE_KINDS {
        return Err(Error::Config(format!("shapes supports at most {SHAPE_KINDS} classes")));
    }
    if generator == Generator::Shapes && size < 8 {
        return Err(Error::Config("shapes needs images of at least 8x8".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let anchors: Vec<Vec<(f64, f64)>> = (0..classes)
        .map(|_| (0..3).map(|_| (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8))).collect())
        .collect();
    let mut images = Vec::with_capacity(n * CHANNELS * size * size);
    for &label in &labels {
        let img = match generator {
            Generator::Shapes => shape_image(label, size, &mut rng),
            Generator::Stripes => stripe_image(label, classes, size, &mut rng),
            Generator::Blobs => blob_image(&anchors[label], size, &mut rng),
        };
        images.extend(img.into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    Dataset::new(images, labels, classes, CHANNELS, size)
}

fn background<R: Rng>(size: usize, rng: &mut R) -> Vec<f64> {
    let mut img = Vec::with_capacity(CHANNELS * size * size);
    for _ in 0..CHANNELS {
        let level = rng.gen_range(0.0..0.35);
        img.extend((0..size * size).map(|_| level + rng.gen_range(0.0..0.15)));
    }
    img
}

/// Mask of primitive `kind` inside an `r x r` box.
fn shape_mask(kind: usize, r: usize) -> Vec<bool> {
    let t = (r / 4).max(1) as f64;
    let rf = r as f64;
    let c = (rf - 1.0) / 2.0;
    let mut m = vec![false; r * r];
    for y in 0..r {
        for x in 0..r {
            let (fy, fx) = (y as f64, x as f64);
            let d = ((fy - c).powi(2) + (fx - c).powi(2)).sqrt();
            m[y * r + x] = match kind {
                // filled square
                0 => true,
                // plus
                1 => (fy - c).abs() < t / 2.0 + 0.26 || (fx - c).abs() < t / 2.0 + 0.26,
                // ring
                2 => d <= rf / 2.0 && d >= rf / 2.0 - t - 0.5,
                // triangle, apex up
                3 => (fx - c).abs() <= (fy + 1.0) / 2.0,
                // diagonal cross
                4 => (fy - fx).abs() < t * 0.75 || (fy + fx - (rf - 1.0)).abs() < t * 0.75,
                // hollow square
                5 => y < t as usize || x < t as usize || y >= r - t as usize || x >= r - t as usize,
                // filled disk
                6 => d <= rf / 2.0,
                // horizontal bar
                _ => (fy - c).abs() < t / 2.0 + 0.26,
            };
        }
    }
    m
}

fn shape_image<R: Rng>(kind: usize, size: usize, rng: &mut R) -> Vec<f64> {
    let mut img = background(size, rng);
    let r = rng.gen_range(size / 3..=size / 2 + 1).min(size);
    let y0 = rng.gen_range(0..=size - r);
    let x0 = rng.gen_range(0..=size - r);
    let color: Vec<f64> = (0..CHANNELS).map(|_| rng.gen_range(0.6..1.0)).collect();
    let mask = shape_mask(kind, r);
    for (ch, &col) in color.iter().enumerate() {
        for y in 0..r {
            for x in 0..r {
                if mask[y * r + x] {
                    img[(ch * size + y0 + y) * size + x0 + x] = col;
                }
            }
        }
    }
    img
}

fn stripe_image<R: Rng>(label: usize, classes: usize, size: usize, rng: &mut R) -> Vec<f64> {
    let angle = PI * label as f64 / classes as f64 + rng.gen_range(-0.1..0.1);
    let freq = rng.gen_range(0.25..0.45) * 2.0 * PI / 2.0;
    let phase = rng.gen_range(0.0..2.0 * PI);
    let (s, c) = angle.sin_cos();
    let contrast = rng.gen_range(0.3..0.5);
    let mut img = Vec::with_capacity(CHANNELS * size * size);
    for _ in 0..CHANNELS {
        let tint = rng.gen_range(0.8..1.2);
        for y in 0..size {
            for x in 0..size {
                let p = (x as f64 * c + y as f64 * s) * freq + phase;
                img.push(0.5 + contrast * tint * p.sin() + rng.gen_range(-0.1..0.1));
            }
        }
    }
    img
}

fn blob_image<R: Rng>(anchors: &[(f64, f64)], size: usize, rng: &mut R) -> Vec<f64> {
    let mut img = background(size, rng);
    let sigma = size as f64 * 0.12;
    for &(ay, ax) in anchors {
        let cy = (ay + rng.gen_range(-0.08..0.08)) * size as f64;
        let cx = (ax + rng.gen_range(-0.08..0.08)) * size as f64;
        let amp: Vec<f64> = (0..CHANNELS).map(|_| rng.gen_range(0.4..0.7)).collect();
        for (ch, a) in amp.iter().enumerate() {
            for y in 0..size {
                for x in 0..size {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    img[(ch * size + y) * size + x] += a * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    img
}
