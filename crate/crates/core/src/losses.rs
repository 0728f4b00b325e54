//! Pixel-space objectives over ray batches.
//!
//! Hatted quantities are always the field's render and unhatted ones the
//! supervision. Every loss is a sum over rays unless [`Reduction::Mean`] is
//! requested, in which case values and gradients are divided by the ray count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Real;
use crate::renderer::PixelAdjoints;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_feature: f64,
    pub lambda_depth: f64,
    pub lambda_unmask: f64,
    pub lambda_clip: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_feature: 1.0,
            lambda_depth: 0.1,
            lambda_unmask: 100.0,
            lambda_clip: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_feature", self.lambda_feature),
            ("lambda_depth", self.lambda_depth),
            ("lambda_unmask", self.lambda_unmask),
            ("lambda_clip", self.lambda_clip),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

impl Reduction {
    fn factor(self, n_rays: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / n_rays.max(1) as f64,
        }
    }
}

/// Rendered values and their supervision.
#[derive(Clone, Copy, Debug)]
pub struct Channel<'a, T> {
    pub pred: &'a [T],
    pub target: &'a [T],
}

impl<'a, T: Real> Channel<'a, T> {
    pub fn new(pred: &'a [T], target: &'a [T]) -> Self {
        Self { pred, target }
    }

    fn check(&self, what: &str, width: usize, n_rays: usize) -> Result<()> {
        if self.pred.len() != self.target.len() {
            return Err(Error::contract(format!(
                "{what}: prediction has {} values, supervision {}",
                self.pred.len(),
                self.target.len()
            )));
        }
        if self.pred.len() != width * n_rays {
            return Err(Error::contract(format!(
                "{what}: expected {} values for {n_rays} rays, got {}",
                width * n_rays,
                self.pred.len()
            )));
        }
        Ok(())
    }
}

/// Per-ray predictions and supervision; `mask` holds one value per ray and
/// is binarized at 0.5.
#[derive(Clone, Copy, Debug)]
pub struct PixelBatch<'a, T> {
    pub n_rays: usize,
    pub feature_dim: usize,
    pub color: Option<Channel<'a, T>>,
    pub feature: Option<Channel<'a, T>>,
    pub depth: Option<Channel<'a, T>>,
    pub mask: Option<&'a [f32]>,
}

impl<'a, T: Real> PixelBatch<'a, T> {
    pub fn new(n_rays: usize, feature_dim: usize) -> Self {
        Self {
            n_rays,
            feature_dim,
            color: None,
            feature: None,
            depth: None,
            mask: None,
        }
    }

    fn color(&self) -> Result<Channel<'a, T>> {
        let c = self.color.ok_or_else(|| Error::contract("color supervision missing"))?;
        c.check("color", 3, self.n_rays)?;
        Ok(c)
    }

    fn feature(&self) -> Result<Channel<'a, T>> {
        let c = self.feature.ok_or_else(|| Error::contract("feature supervision missing"))?;
        c.check("feature", self.feature_dim, self.n_rays)?;
        Ok(c)
    }

    fn depth(&self) -> Result<Channel<'a, T>> {
        let c = self.depth.ok_or_else(|| Error::contract("depth supervision missing"))?;
        c.check("depth", 1, self.n_rays)?;
        Ok(c)
    }

    fn mask(&self) -> Result<&'a [f32]> {
        let m = self.mask.ok_or_else(|| Error::contract("mask missing"))?;
        if m.len() != self.n_rays {
            return Err(Error::contract(format!(
                "mask has {} entries for {} rays",
                m.len(),
                self.n_rays
            )));
        }
        Ok(m)
    }
}

fn sum_sq<T: Real>(c: Channel<T>) -> f64 {
    c.pred
        .iter()
        .zip(c.target)
        .map(|(&p, &t)| {
            let d = (p - t).as_f64();
            d * d
        })
        .sum()
}

/// Adds `scale · ∂Σ(p − t)²/∂p` into `grad`.
fn add_sq_grad<T: Real>(c: Channel<T>, scale: f64, grad: &mut [T]) {
    let s = T::lit(2.0 * scale);
    for ((g, &p), &t) in grad.iter_mut().zip(c.pred).zip(c.target) {
        *g += s * (p - t);
    }
}

/// `Σ_r ‖C(r) − Ĉ(r)‖²`.
pub fn color_loss<T: Real>(b: &PixelBatch<T>) -> Result<f64> {
    Ok(sum_sq(b.color()?))
}

/// `Σ_r ‖F(r) − F̂(r)‖²`.
pub fn feature_loss<T: Real>(b: &PixelBatch<T>) -> Result<f64> {
    Ok(sum_sq(b.feature()?))
}

/// `Σ_r (D(r) − D̂(r))²`.
pub fn depth_loss<T: Real>(b: &PixelBatch<T>) -> Result<f64> {
    Ok(sum_sq(b.depth()?))
}

/// Component values of the first-stage objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stage1Terms {
    pub color: f64,
    pub feature: f64,
    pub depth: f64,
    pub total: f64,
}

/// `color + λ_feature·feature + λ_depth·depth`. A channel whose weight is
/// zero may be absent.
pub fn stage1_loss<T: Real>(b: &PixelBatch<T>, w: &LossWeights) -> Result<Stage1Terms> {
    w.validate()?;
    let color = color_loss(b)?;
    let feature = if w.lambda_feature > 0.0 || b.feature.is_some() { feature_loss(b)? } else { 0.0 };
    let depth = if w.lambda_depth > 0.0 || b.depth.is_some() { depth_loss(b)? } else { 0.0 };
    Ok(Stage1Terms {
        color,
        feature,
        depth,
        total: color + w.lambda_feature * feature + w.lambda_depth * depth,
    })
}

/// Reduced first-stage loss and its adjoints with respect to the rendered
/// color, feature and depth.
pub fn stage1_loss_grad<T: Real>(
    b: &PixelBatch<T>,
    w: &LossWeights,
    reduction: Reduction,
) -> Result<(Stage1Terms, PixelAdjoints<T>)> {
    let raw = stage1_loss(b, w)?;
    let k = reduction.factor(b.n_rays);
    let mut adj = PixelAdjoints::default();
    let c = b.color()?;
    let mut gc = vec![T::zero(); c.pred.len()];
    add_sq_grad(c, k, &mut gc);
    adj.color = Some(gc);
    if w.lambda_feature > 0.0 {
        let f = b.feature()?;
        let mut gf = vec![T::zero(); f.pred.len()];
        add_sq_grad(f, k * w.lambda_feature, &mut gf);
        adj.feature = Some(gf);
    }
    if w.lambda_depth > 0.0 {
        let d = b.depth()?;
        let mut gd = vec![T::zero(); d.pred.len()];
        add_sq_grad(d, k * w.lambda_depth, &mut gd);
        adj.depth = Some(gd);
    }
    let terms = Stage1Terms {
        color: raw.color * k,
        feature: raw.feature * k,
        depth: raw.depth * k,
        total: raw.total * k,
    };
    Ok((terms, adj))
}

/// Whether a mask value keeps its pixel under the preservation loss.
pub fn is_unmasked(m: f32) -> bool {
    m < 0.5
}

/// `Σ_r ‖C(r)·𝟙(m<0.5) − Ĉ(r)·𝟙(m<0.5)‖²`; masked rays contribute nothing.
pub fn unmask_loss<T: Real>(b: &PixelBatch<T>) -> Result<f64> {
    let c = b.color()?;
    let m = b.mask()?;
    let mut total = 0.0;
    for (r, &mr) in m.iter().enumerate() {
        if is_unmasked(mr) {
            for k in 3 * r..3 * r + 3 {
                let d = (c.pred[k] - c.target[k]).as_f64();
                total += d * d;
            }
        }
    }
    Ok(total)
}

/// Adds `scale · ∂unmask_loss/∂Ĉ` into `grad` (length `3·n_rays`) and
/// returns the unscaled loss.
pub fn unmask_loss_grad<T: Real>(b: &PixelBatch<T>, scale: f64, grad: &mut [T]) -> Result<f64> {
    let value = unmask_loss(b)?;
    if grad.len() != 3 * b.n_rays {
        return Err(Error::contract("unmask gradient buffer has wrong length"));
    }
    let c = b.color()?;
    let m = b.mask()?;
    let s = T::lit(2.0 * scale);
    for (r, &mr) in m.iter().enumerate() {
        if is_unmasked(mr) {
            for k in 3 * r..3 * r + 3 {
                grad[k] += s * (c.pred[k] - c.target[k]);
            }
        }
    }
    Ok(value)
}
