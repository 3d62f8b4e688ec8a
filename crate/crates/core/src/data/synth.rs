use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// One image with its binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `1×3×H×W`, samples in `[0, 1]`.
    pub image: Tensor4<f32>,
    /// `1×1×H×W`, samples in `{0, 1}`.
    pub mask: Tensor4<f32>,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s.h, s.w)
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.data().iter().map(|&v| v as f64).sum::<f64>() / self.mask.len() as f64
    }
}

pub const MIN_FOREGROUND: f64 = 0.01;
pub const MAX_FOREGROUND: f64 = 0.6;

/// Generator for sample `index` of the set drawn with `seed`.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(b"synthset");
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index as u64);
    rng
}

#[derive(Clone, Copy)]
enum Blob {
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        cos: f64,
        sin: f64,
    },
    Rect {
        y0: f64,
        x0: f64,
        y1: f64,
        x1: f64,
    },
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let cy = rng.random_range(0.15..0.85) * size;
        let cx = rng.random_range(0.15..0.85) * size;
        let ry = rng.random_range(0.06..0.25) * size;
        let rx = rng.random_range(0.06..0.25) * size;
        if rng.random_bool(0.6) {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Blob::Ellipse {
                cy,
                cx,
                ry,
                rx,
                cos: theta.cos(),
                sin: theta.sin(),
            }
        } else {
            Blob::Rect {
                y0: cy - ry,
                x0: cx - rx,
                y1: cy + ry,
                x1: cx + rx,
            }
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Blob::Ellipse {
                cy,
                cx,
                ry,
                rx,
                cos,
                sin,
            } => {
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Blob::Rect { y0, x0, y1, x1 } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
        }
    }
}

fn generate(seed: u64, index: usize, size: usize) -> Sample {
    let mut rng = sample_rng(seed, index);
    let sz = size as f64;
    let mask = loop {
        let blobs: Vec<Blob> = (0..rng.random_range(1..=3))
            .map(|_| Blob::random(&mut rng, sz))
            .collect();
        let mask: Vec<bool> = (0..size * size)
            .map(|p| {
                let (y, x) = ((p / size) as f64 + 0.5, (p % size) as f64 + 0.5);
                blobs.iter().any(|b| b.contains(y, x))
            })
            .collect();
        let frac = mask.iter().filter(|&&m| m).count() as f64 / (size * size) as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            break mask;
        }
    };

    let base: [f64; 3] = {
        let b = rng.random_range(0.15..0.4);
        [0, 1, 2].map(|_| b + rng.random_range(-0.04..0.04))
    };
    let gap = rng.random_range(0.25..0.45);
    let fg: [f64; 3] = base.map(|b| b + gap + rng.random_range(-0.04..0.04));
    // Low-frequency texture shared by all channels.
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.06),
                rng.random_range(0.5..3.0) * std::f64::consts::TAU / sz,
                rng.random_range(0.5..3.0) * std::f64::consts::TAU / sz,
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let noise = Normal::new(0.0, 0.05).expect("valid std");
    let plane = size * size;
    let mut image = vec![0f32; 3 * plane];
    for p in 0..plane {
        let (y, x) = ((p / size) as f64, (p % size) as f64);
        let tex: f64 = waves
            .iter()
            .map(|&(a, fy, fx, ph)| a * (fy * y + fx * x + ph).sin())
            .sum();
        for c in 0..3 {
            let level = if mask[p] { fg[c] } else { base[c] };
            let v = level + tex + noise.sample(&mut rng);
            image[c * plane + p] = v.clamp(0.0, 1.0) as f32;
        }
    }
    let mask = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    Sample {
        id: format!("s{index:05}"),
        image: Tensor4::from_vec(Shape4::new(1, 3, size, size), image).expect("image shape"),
        mask: Tensor4::from_vec(Shape4::new(1, 1, size, size), mask).expect("mask shape"),
    }
}

/// `n` blob images of `size×size`. Sample `i` depends only on `(seed, i)`.
pub fn synth_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Config("dataset needs at least one sample".into()));
    }
    if size == 0 || !size.is_multiple_of(16) {
        return Err(Error::Config(format!(
            "image size {size} must be a positive multiple of 16"
        )));
    }
    Ok((0..n).into_par_iter().map(|i| generate(seed, i, size)).collect())
}

/// The single sample `index` of the set drawn with `seed`.
pub fn synth_sample(index: usize, size: usize, seed: u64) -> Sample {
    generate(seed, index, size)
}
