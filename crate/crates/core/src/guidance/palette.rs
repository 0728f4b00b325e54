//! Color-histogram embedder standing in for a joint image/text model.
//!
//! Each pixel brighter than a luminance floor votes into 15 circular hue
//! bins (weight = saturation, split linearly between the two nearest bin
//! centers) and one achromatic bin (weight = 1 − saturation). Hue and
//! chroma come from the opponent axes `a = r − (g+b)/2`,
//! `b = (√3/2)(g − b)`; saturation is chroma over the max channel, capped
//! at one. The soft split makes the embedding piecewise smooth in the
//! pixel values.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{EmbeddingProvider, Image};

pub const EMBED_DIM: usize = 16;
const HUE_BINS: usize = 15;
const ACHROMATIC: usize = 15;
const LUMINANCE_FLOOR: f64 = 0.02;
const HALF_SQRT3: f64 = 0.866_025_403_784_438_6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaletteColor {
    pub rgb: [f64; 3],
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaletteRegistry {
    pub palettes: BTreeMap<String, Vec<PaletteColor>>,
}

impl Default for PaletteRegistry {
    fn default() -> Self {
        let entry = |name: &str, colors: &[([f64; 3], f64)]| {
            (
                name.to_string(),
                colors.iter().map(|&(rgb, weight)| PaletteColor { rgb, weight }).collect(),
            )
        };
        Self {
            palettes: [
                entry("leaves", &[([0.2, 0.6, 0.15], 0.6), ([0.35, 0.75, 0.2], 0.4)]),
                entry("sky", &[([0.4, 0.6, 0.95], 0.7), ([0.85, 0.9, 1.0], 0.3)]),
                entry("sand", &[([0.85, 0.75, 0.5], 0.8), ([0.7, 0.6, 0.4], 0.2)]),
                entry("brick", &[([0.7, 0.2, 0.1], 0.7), ([0.5, 0.15, 0.1], 0.3)]),
                entry("snow", &[([0.95, 0.95, 0.97], 1.0)]),
            ]
            .into_iter()
            .collect(),
        }
    }
}

impl PaletteRegistry {
    pub fn names(&self) -> Vec<String> {
        self.palettes.keys().cloned().collect()
    }

    pub fn resolve(&self, name: &str) -> Result<&[PaletteColor]> {
        self.palettes.get(name).map(Vec::as_slice).ok_or_else(|| {
            Error::config(format!(
                "unknown background prompt {name:?}; known palettes: {}",
                self.names().join(", ")
            ))
        })
    }

    /// Weighted mean color of a palette.
    pub fn mean_color(&self, name: &str) -> Result<[f64; 3]> {
        let colors = self.resolve(name)?;
        let total: f64 = colors.iter().map(|c| c.weight).sum();
        let mut out = [0.0; 3];
        for c in colors {
            for k in 0..3 {
                out[k] += c.rgb[k] * c.weight / total;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ToyPaletteEmbedder {
    pub registry: PaletteRegistry,
}

struct Vote {
    saturation: f64,
    /// Position on the hue circle in bin units, `[0, HUE_BINS)`.
    hue: f64,
    /// `∂saturation/∂rgb` and `∂hue/∂rgb`.
    d_saturation: [f64; 3],
    d_hue: [f64; 3],
}

fn luminance(rgb: [f64; 3]) -> f64 {
    0.2126 * rgb[0] + 0.7152 * rgb[1] + 0.0722 * rgb[2]
}

fn vote(rgb: [f64; 3]) -> Option<Vote> {
    if luminance(rgb) <= LUMINANCE_FLOOR {
        return None;
    }
    let [r, g, b] = rgb;
    let a = r - 0.5 * (g + b);
    let q = HALF_SQRT3 * (g - b);
    let chroma = a.hypot(q);
    let (imax, max) = rgb
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    if chroma < 1e-12 || max <= 0.0 {
        return Some(Vote {
            saturation: 0.0,
            hue: 0.0,
            d_saturation: [0.0; 3],
            d_hue: [0.0; 3],
        });
    }
    let da = [1.0, -0.5, -0.5];
    let dq = [0.0, HALF_SQRT3, -HALF_SQRT3];
    let mut d_chroma = [0.0; 3];
    let mut d_theta = [0.0; 3];
    for k in 0..3 {
        d_chroma[k] = (a * da[k] + q * dq[k]) / chroma;
        d_theta[k] = (a * dq[k] - q * da[k]) / (chroma * chroma);
    }
    let ratio = chroma / max;
    let (saturation, d_saturation) = if ratio >= 1.0 {
        (1.0, [0.0; 3])
    } else {
        let mut d = [0.0; 3];
        for k in 0..3 {
            d[k] = d_chroma[k] / max;
        }
        d[imax] -= chroma / (max * max);
        (ratio, d)
    };
    let scale = HUE_BINS as f64 / (2.0 * PI);
    let hue = (q.atan2(a) / (2.0 * PI)).rem_euclid(1.0) * HUE_BINS as f64;
    Some(Vote {
        saturation,
        hue: if hue >= HUE_BINS as f64 { 0.0 } else { hue },
        d_saturation,
        d_hue: d_theta.map(|v| v * scale),
    })
}

fn hue_split(hue: f64) -> (usize, usize, f64) {
    let lo = hue.floor();
    let frac = hue - lo;
    let k0 = lo as usize % HUE_BINS;
    (k0, (k0 + 1) % HUE_BINS, frac)
}

impl ToyPaletteEmbedder {
    pub fn new(registry: PaletteRegistry) -> Self {
        Self { registry }
    }

    fn histogram<'a>(&self, pixels: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
        let mut h = vec![0.0; EMBED_DIM];
        for p in pixels {
            if let Some(v) = vote([p[0], p[1], p[2]]) {
                let (k0, k1, f) = hue_split(v.hue);
                h[k0] += v.saturation * (1.0 - f);
                h[k1] += v.saturation * f;
                h[ACHROMATIC] += 1.0 - v.saturation;
            }
        }
        h
    }

    fn normalized(h: Vec<f64>) -> Vec<f64> {
        let n = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return reference_vector();
        }
        h.into_iter().map(|v| v / n).collect()
    }
}

/// The embedding of an image with no bright pixels.
fn reference_vector() -> Vec<f64> {
    let mut v = vec![0.0; EMBED_DIM];
    v[ACHROMATIC] = 1.0;
    v
}

impl EmbeddingProvider for ToyPaletteEmbedder {
    fn dim(&self) -> usize {
        EMBED_DIM
    }

    fn embed_image(&self, img: &Image) -> Vec<f64> {
        Self::normalized(self.histogram(img.data.chunks_exact(3)))
    }

    fn embed_text(&self, prompt: &str) -> Result<Vec<f64>> {
        let colors = self.registry.resolve(prompt)?;
        let mut h = vec![0.0; EMBED_DIM];
        for c in colors {
            let single = self.histogram(std::iter::once(&c.rgb[..]));
            for (a, b) in h.iter_mut().zip(single) {
                *a += c.weight * b;
            }
        }
        Ok(Self::normalized(h))
    }

    fn embed_image_vjp(&self, img: &Image, upstream: &[f64]) -> Vec<f64> {
        let h = self.histogram(img.data.chunks_exact(3));
        let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut grad = vec![0.0; img.data.len()];
        if norm == 0.0 {
            return grad;
        }
        let e: Vec<f64> = h.iter().map(|v| v / norm).collect();
        let eu: f64 = e.iter().zip(upstream).map(|(a, b)| a * b).sum();
        let dh: Vec<f64> = e.iter().zip(upstream).map(|(ei, ui)| (ui - ei * eu) / norm).collect();
        for (i, p) in img.data.chunks_exact(3).enumerate() {
            let Some(v) = vote([p[0], p[1], p[2]]) else {
                continue;
            };
            let (k0, k1, f) = hue_split(v.hue);
            for c in 0..3 {
                let ds = v.d_saturation[c];
                let dp = v.d_hue[c];
                grad[3 * i + c] = dh[k0] * (ds * (1.0 - f) - v.saturation * dp)
                    + dh[k1] * (ds * f + v.saturation * dp)
                    - dh[ACHROMATIC] * ds;
            }
        }
        grad
    }
}
