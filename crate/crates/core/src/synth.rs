//! Seeded synthetic textures for demos and benchmarks.
//!
//! Textures are causal 2-D autoregressive fields (plus a few periodic ones)
//! rescaled to a target mean and contrast and quantized to 8 bits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{LabelMask, Micrograph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TextureKind {
    /// `x[r,c] = Σ a·x[r−dr, c−dc] + ε` over causal offsets `(dr, dc)`.
    Autoregressive { coeffs: Vec<(usize, isize, f64)> },
    /// Noisy sinusoidal stripes; `angle` in degrees, `period` in pixels.
    Stripes { period: f64, angle: f64, noise: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub name: String,
    pub kind: TextureKind,
    pub mean: f64,
    pub std: f64,
}

fn ar(name: &str, coeffs: &[(usize, isize, f64)], mean: f64, std: f64) -> TextureSpec {
    TextureSpec {
        name: name.into(),
        kind: TextureKind::Autoregressive { coeffs: coeffs.to_vec() },
        mean,
        std,
    }
}

fn stripes(name: &str, period: f64, angle: f64, noise: f64, mean: f64, std: f64) -> TextureSpec {
    TextureSpec {
        name: name.into(),
        kind: TextureKind::Stripes { period, angle, noise },
        mean,
        std,
    }
}

/// A fixed bank of mutually distinct textures.
pub fn texture_bank() -> Vec<TextureSpec> {
    vec![
        ar("smooth", &[(0, 1, 0.48), (1, 0, 0.48)], 120.0, 30.0),
        ar("streak-h", &[(0, 1, 0.92)], 110.0, 30.0),
        ar("streak-v", &[(1, 0, 0.92)], 140.0, 30.0),
        ar("grain", &[], 128.0, 30.0),
        ar("diag", &[(1, 1, 0.9)], 100.0, 28.0),
        ar("anti-diag", &[(1, -1, 0.9)], 150.0, 28.0),
        ar("checker", &[(0, 1, -0.6), (1, 0, -0.3)], 128.0, 35.0),
        stripes("bands-8", 8.0, 0.0, 0.35, 125.0, 35.0),
        stripes("bands-6-tilt", 6.0, 60.0, 0.35, 130.0, 35.0),
        ar("mottle", &[(0, 1, 0.7), (1, 0, 0.7), (1, 1, -0.45)], 90.0, 25.0),
    ]
}

pub fn bank_texture(name: &str) -> Result<TextureSpec> {
    texture_bank()
        .into_iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::NotFound(format!("texture {name}")))
}

const BURN_IN: usize = 24;

fn raw_field(spec: &TextureSpec, width: usize, height: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match &spec.kind {
        TextureKind::Autoregressive { coeffs } => {
            let (w, h) = (width + 2 * BURN_IN, height + BURN_IN);
            let mut x = vec![0.0; w * h];
            for r in 0..h {
                for c in 0..w {
                    let mut v: f64 = StandardNormal.sample(rng);
                    for &(dr, dc, a) in coeffs {
                        let (rr, cc) = (r as isize - dr as isize, c as isize - dc);
                        if rr >= 0 && cc >= 0 && (cc as usize) < w {
                            v += a * x[rr as usize * w + cc as usize];
                        }
                    }
                    x[r * w + c] = v;
                }
            }
            (0..height)
                .flat_map(|r| {
                    let row = (r + BURN_IN) * w + BURN_IN;
                    x[row..row + width].to_vec()
                })
                .collect()
        }
        TextureKind::Stripes { period, angle, noise } => {
            let (s, c) = angle.to_radians().sin_cos();
            let phase = rand::Rng::random::<f64>(rng) * std::f64::consts::TAU;
            let mut out = Vec::with_capacity(width * height);
            for r in 0..height {
                for col in 0..width {
                    let t = (col as f64 * c + r as f64 * s) / period * std::f64::consts::TAU + phase;
                    let z: f64 = StandardNormal.sample(rng);
                    out.push(t.sin() + noise * z);
                }
            }
            out
        }
    }
}

/// Renders `spec` as a `width × height` 8-bit micrograph.
pub fn render(spec: &TextureSpec, width: usize, height: usize, seed: u64) -> Micrograph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = raw_field(spec, width, height, &mut rng);
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let sd = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    let pixels = field
        .iter()
        .map(|v| ((v - mean) / sd * spec.std + spec.mean).round().clamp(0.0, 255.0))
        .collect();
    Micrograph::new(width, height, pixels, spec.name.clone()).expect("pixels are clamped to range")
}

/// Paints each labeled region of `regions` with its own texture; region
/// label `j` uses `textures[j]`. Returns the image and the region mask.
pub fn compose(textures: &[TextureSpec], regions: &LabelMask, seed: u64) -> Result<Micrograph> {
    let (w, h) = (regions.width, regions.height);
    let layers: Vec<Micrograph> = textures
        .iter()
        .enumerate()
        .map(|(j, t)| render(t, w, h, seed.wrapping_mul(31).wrapping_add(j as u64 + 1)))
        .collect();
    let mut pixels = Vec::with_capacity(w * h);
    for (i, &label) in regions.labels.iter().enumerate() {
        let layer = layers
            .get(label as usize)
            .ok_or_else(|| Error::invalid(format!("region {label} has no texture")))?;
        pixels.push(layer.pixels[i]);
    }
    Micrograph::new(w, h, pixels, "composite")
}

/// Two regions split by a wavy, roughly horizontal boundary.
pub fn two_phase_regions(size: usize, seed: u64) -> LabelMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = rand::Rng::random::<f64>(&mut rng) * std::f64::consts::TAU;
    let amp = size as f64 * 0.08;
    let mut mask = LabelMask::filled(size, size, 0);
    for r in 0..size {
        for c in 0..size {
            let edge = size as f64 / 2.0 + amp * (c as f64 / size as f64 * std::f64::consts::TAU + phase).sin();
            if r as f64 >= edge {
                mask.set(r, c, 1);
            }
        }
    }
    mask
}

/// Three sectors meeting near the image center.
pub fn three_phase_regions(size: usize, seed: u64) -> LabelMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rand::Rng::random::<f64>(&mut rng) * std::f64::consts::TAU;
    let center = size as f64 / 2.0;
    let mut mask = LabelMask::filled(size, size, 0);
    for r in 0..size {
        for c in 0..size {
            let angle = (r as f64 + 0.5 - center).atan2(c as f64 + 0.5 - center) - offset;
            let sector = (angle.rem_euclid(std::f64::consts::TAU) / (std::f64::consts::TAU / 3.0)) as u32;
            mask.set(r, c, sector.min(2));
        }
    }
    mask
}
