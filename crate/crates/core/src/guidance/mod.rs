//! Noise schedule, score-distillation gradients and embedding losses, with
//! provider traits standing in for a diffusion model and an image/text
//! embedder.

mod palette;
mod toy;

pub use palette::{PaletteColor, PaletteRegistry, ToyPaletteEmbedder, EMBED_DIM};
pub use toy::{build_targets, PromptRegistry, TargetSpec, ToyDeltaDenoiser};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planes::{Mask, Plane};

/// Row-major RGB image in double precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: (0..width * height).flat_map(|_| rgb).collect(),
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, i: usize) -> [f64; 3] {
        [self.data[3 * i], self.data[3 * i + 1], self.data[3 * i + 2]]
    }

    pub fn set_pixel(&mut self, i: usize, rgb: [f64; 3]) {
        self.data[3 * i..3 * i + 3].copy_from_slice(&rgb);
    }

    pub fn from_plane(p: &Plane) -> Result<Self> {
        if p.channels != 3 {
            return Err(Error::contract(format!("expected an RGB plane, got {} channels", p.channels)));
        }
        Ok(Self {
            width: p.width,
            height: p.height,
            data: p.data.iter().map(|&v| v as f64).collect(),
        })
    }

    pub fn to_plane(&self) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    /// Unit Gaussian noise image.
    pub fn noise<R: Rng>(width: usize, height: usize, rng: &mut R) -> Self {
        Self {
            width,
            height,
            data: (0..width * height * 3).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.data.len() == other.data.len()
    }
}

/// The image with masked pixels (mask set) replaced by exact black.
pub fn black_hole_composite(img: &Image, mask: &Mask) -> Result<Image> {
    if mask.width != img.width || mask.height != img.height {
        return Err(Error::contract("mask and image sizes differ"));
    }
    let mut out = img.clone();
    for (i, &m) in mask.data.iter().enumerate() {
        if m {
            out.set_pixel(i, [0.0; 3]);
        }
    }
    Ok(out)
}

/// Linear-β DDPM schedule with `ᾱ_t = Π_{s≤t}(1 − β_s)` for `t ∈ [1, T_max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 2e-2).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max < 2 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "invalid noise schedule: T_max {t_max}, beta {beta_start}..{beta_end}"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(t_max);
        let mut acc = 1.0;
        for i in 0..t_max {
            let beta = beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64;
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(Self {
            t_max,
            beta_start,
            beta_end,
            alpha_bar,
        })
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.t_max {
            return Err(Error::contract(format!("timestep {t} outside [1, {}]", self.t_max)));
        }
        Ok(self.alpha_bar[t - 1])
    }

    /// Inclusive sampling range `[0.02·T_max, 0.98·T_max]`.
    pub fn t_range(&self) -> (usize, usize) {
        let lo = ((0.02 * self.t_max as f64).round() as usize).max(1);
        let hi = ((0.98 * self.t_max as f64).round() as usize).min(self.t_max);
        (lo, hi)
    }

    pub fn sample_timestep<R: Rng>(&self, rng: &mut R) -> usize {
        let (lo, hi) = self.t_range();
        rng.random_range(lo..=hi)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardProcess {
    /// `I_t = √ᾱ_t·I + √(1−ᾱ_t)·ε`.
    #[default]
    Standard,
    /// `I_t = I + ε`.
    Additive,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Constant,
    OneMinusAlphaBar,
}

impl Weighting {
    pub fn weight(self, schedule: &NoiseSchedule, t: usize) -> Result<f64> {
        Ok(match self {
            Weighting::Constant => 1.0,
            Weighting::OneMinusAlphaBar => 1.0 - schedule.alpha_bar(t)?,
        })
    }
}

pub fn perturb_image(
    img: &Image,
    t: usize,
    eps: &Image,
    schedule: &NoiseSchedule,
    process: ForwardProcess,
) -> Result<Image> {
    let ab = schedule.alpha_bar(t)?;
    if !img.same_shape(eps) {
        return Err(Error::contract("noise and image sizes differ"));
    }
    let (a, b) = match process {
        ForwardProcess::Standard => (ab.sqrt(), (1.0 - ab).sqrt()),
        ForwardProcess::Additive => (1.0, 1.0),
    };
    Ok(Image {
        width: img.width,
        height: img.height,
        data: img.data.iter().zip(&eps.data).map(|(&x, &e)| a * x + b * e).collect(),
    })
}

/// What the denoiser is conditioned on. `view` identifies the training
/// camera the image was rendered from.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning<'a> {
    pub prompt: &'a str,
    pub view: usize,
}

pub trait DenoiserProvider: Send + Sync {
    /// `ε̂(I_t; y, t)`. Must be deterministic and read-only.
    fn predict_noise(&self, noisy: &Image, cond: &Conditioning, t: usize) -> Result<Image>;
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    /// Unit-norm image embedding.
    fn embed_image(&self, img: &Image) -> Vec<f64>;
    /// Unit-norm text embedding; unknown prompts are configuration errors.
    fn embed_text(&self, prompt: &str) -> Result<Vec<f64>>;
    /// Gradient of `upstream · embed_image(img)` with respect to the pixels.
    fn embed_image_vjp(&self, img: &Image, upstream: &[f64]) -> Vec<f64>;

    fn sim(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
}

/// `w(t)·(ε̂(I_t; y, t) − ε)`, the per-pixel adjoint of the score
/// distillation objective. Nothing flows back into the provider.
#[allow(clippy::too_many_arguments)]
pub fn sds_pixel_grad(
    img: &Image,
    cond: &Conditioning,
    t: usize,
    eps: &Image,
    provider: &dyn DenoiserProvider,
    schedule: &NoiseSchedule,
    weighting: Weighting,
    process: ForwardProcess,
) -> Result<Image> {
    let w = weighting.weight(schedule, t)?;
    let noisy = perturb_image(img, t, eps, schedule, process)?;
    let eps_hat = provider.predict_noise(&noisy, cond, t)?;
    if !eps_hat.same_shape(eps) {
        return Err(Error::contract("denoiser returned an image of the wrong size"));
    }
    if let Some(index) = eps_hat.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericFault {
            message: "denoiser produced a non-finite value".into(),
            index,
        });
    }
    Ok(Image {
        width: img.width,
        height: img.height,
        data: eps_hat.data.iter().zip(&eps.data).map(|(&p, &e)| w * (p - e)).collect(),
    })
}

/// `−sim(embed_image(I), embed_text(bgt))`.
pub fn clip_loss(img: &Image, bgt: &str, provider: &dyn EmbeddingProvider) -> Result<f64> {
    let z = provider.embed_text(bgt)?;
    Ok(-provider.sim(&provider.embed_image(img), &z))
}

/// Loss and its gradient with respect to the pixels of `img`.
pub fn clip_loss_grad(img: &Image, bgt: &str, provider: &dyn EmbeddingProvider) -> Result<(f64, Vec<f64>)> {
    let z = provider.embed_text(bgt)?;
    let loss = -provider.sim(&provider.embed_image(img), &z);
    let upstream: Vec<f64> = z.iter().map(|v| -v).collect();
    Ok((loss, provider.embed_image_vjp(img, &upstream)))
}
