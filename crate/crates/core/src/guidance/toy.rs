//! A denoiser whose data distribution is a point mass at a per-view target
//! image, making the score-distillation gradient available in closed form.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planes::{Mask, Plane};

use super::{Conditioning, DenoiserProvider, Image, NoiseSchedule};

/// How a prompt repaints the masked region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TargetSpec {
    Flat {
        color: [f64; 3],
    },
    /// Diagonal stripes alternating every `period` pixels.
    Stripes {
        colors: [[f64; 3]; 2],
        period: usize,
    },
    /// An RGB PNG the size of the views.
    Image {
        path: PathBuf,
    },
    /// A copy of the mask scaled by `factor` about its centroid is painted
    /// `color`; the remaining masked pixels become the hole fill.
    Shrink {
        color: [f64; 3],
        factor: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRegistry {
    pub prompts: BTreeMap<String, TargetSpec>,
}

impl Default for PromptRegistry {
    fn default() -> Self {
        let blue = [0.15, 0.3, 0.9];
        let prompts = [
            ("a blue sphere on leaves", TargetSpec::Flat { color: blue }),
            ("a green sphere", TargetSpec::Flat { color: [0.2, 0.7, 0.2] }),
            ("a yellow sphere", TargetSpec::Flat { color: [0.9, 0.8, 0.1] }),
            (
                "a striped sphere",
                TargetSpec::Stripes {
                    colors: [[0.9, 0.9, 0.9], [0.8, 0.1, 0.1]],
                    period: 3,
                },
            ),
            (
                "a small blue sphere",
                TargetSpec::Shrink {
                    color: blue,
                    factor: 0.5,
                },
            ),
        ];
        Self {
            prompts: prompts.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }
}

impl PromptRegistry {
    pub fn resolve(&self, prompt: &str) -> Result<&TargetSpec> {
        self.prompts.get(prompt).ok_or_else(|| {
            Error::config(format!(
                "unknown prompt {prompt:?}; known prompts: {}",
                self.prompts.keys().map(|k| format!("{k:?}")).collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.prompts.keys().cloned().collect()
    }
}

/// Per-view target images: `base` outside each mask, the prompt's content
/// inside. `hole_fill` colors the uncovered part of a shrink target.
pub fn build_targets(spec: &TargetSpec, base: &[Image], masks: &[Mask], hole_fill: Option<[f64; 3]>) -> Result<Vec<Image>> {
    if base.len() != masks.len() {
        return Err(Error::mismatch("mask count", base.len(), masks.len()));
    }
    let supplied = match spec {
        TargetSpec::Image { path } => Some(Image::from_plane(&Plane::read_png(path, 3)?)?),
        _ => None,
    };
    base.iter()
        .zip(masks)
        .map(|(img, mask)| {
            if mask.width != img.width || mask.height != img.height {
                return Err(Error::contract("mask and render sizes differ"));
            }
            let mut out = img.clone();
            let w = img.width;
            let shrunk = match spec {
                TargetSpec::Shrink { factor, .. } => Some(shrink_mask(mask, *factor)),
                _ => None,
            };
            for (i, _) in mask.data.iter().enumerate().filter(|(_, &m)| m) {
                let (row, col) = (i / w, i % w);
                let rgb = match spec {
                    TargetSpec::Flat { color } => *color,
                    TargetSpec::Stripes { colors, period } => colors[((row + col) / (*period).max(1)) % 2],
                    TargetSpec::Image { .. } => {
                        let s = supplied.as_ref().unwrap();
                        if !s.same_shape(img) {
                            return Err(Error::mismatch(
                                "target image size",
                                format!("{}x{}", img.width, img.height),
                                format!("{}x{}", s.width, s.height),
                            ));
                        }
                        s.pixel(i)
                    }
                    TargetSpec::Shrink { color, .. } => {
                        if shrunk.as_ref().unwrap().data[i] {
                            *color
                        } else {
                            hole_fill.unwrap_or([0.0; 3])
                        }
                    }
                };
                out.set_pixel(i, rgb);
            }
            Ok(out)
        })
        .collect()
}

/// The mask scaled by `factor` about its centroid, restricted to the mask.
fn shrink_mask(mask: &Mask, factor: f64) -> Mask {
    let mut out = Mask::empty(mask.width, mask.height);
    let n = mask.count();
    if n == 0 || factor <= 0.0 {
        return out;
    }
    let (mut cr, mut cc) = (0.0, 0.0);
    for (i, _) in mask.data.iter().enumerate().filter(|(_, &m)| m) {
        cr += (i / mask.width) as f64 + 0.5;
        cc += (i % mask.width) as f64 + 0.5;
    }
    cr /= n as f64;
    cc /= n as f64;
    for (i, &m) in mask.data.iter().enumerate() {
        if !m {
            continue;
        }
        let r = cr + ((i / mask.width) as f64 + 0.5 - cr) / factor;
        let c = cc + ((i % mask.width) as f64 + 0.5 - cc) / factor;
        if r >= 0.0 && c >= 0.0 && (r as usize) < mask.height && (c as usize) < mask.width {
            out.data[i] = mask.get(r as usize, c as usize);
        }
    }
    out
}

/// `ε̂(I_t, y, t) = (I_t − √ᾱ_t·T_y) / √(1−ᾱ_t)`, the exact posterior noise
/// prediction when the data distribution is a point mass at `T_y`.
#[derive(Clone, Debug)]
pub struct ToyDeltaDenoiser {
    pub schedule: NoiseSchedule,
    pub prompt: String,
    /// One target per training view.
    pub targets: Vec<Image>,
}

impl ToyDeltaDenoiser {
    pub fn new(schedule: NoiseSchedule, prompt: impl Into<String>, targets: Vec<Image>) -> Self {
        Self {
            schedule,
            prompt: prompt.into(),
            targets,
        }
    }
}

impl DenoiserProvider for ToyDeltaDenoiser {
    fn predict_noise(&self, noisy: &Image, cond: &Conditioning, t: usize) -> Result<Image> {
        if cond.prompt != self.prompt {
            return Err(Error::config(format!(
                "denoiser was built for prompt {:?}, asked for {:?}",
                self.prompt, cond.prompt
            )));
        }
        let target = self
            .targets
            .get(cond.view)
            .ok_or_else(|| Error::contract(format!("no target for view {}", cond.view)))?;
        if !target.same_shape(noisy) {
            return Err(Error::contract("noisy image and target sizes differ"));
        }
        let ab = self.schedule.alpha_bar(t)?;
        let (a, inv) = (ab.sqrt(), 1.0 / (1.0 - ab).sqrt());
        Ok(Image {
            width: noisy.width,
            height: noisy.height,
            data: noisy.data.iter().zip(&target.data).map(|(&x, &y)| (x - a * y) * inv).collect(),
        })
    }
}
