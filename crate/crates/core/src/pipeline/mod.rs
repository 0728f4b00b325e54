//! Training loops, the repaint loop and evaluation metrics.

mod consistency;
mod repaint;
mod train;

pub use consistency::{mask_consistency, ConsistencyReport};
pub use repaint::{
    render_base_images, repaint, EditFlags, EditJob, JobPhase, JobStatus, Providers, RepaintOutcome, UnmaskTarget,
};
pub use train::{continue_stage1, pretrain_base, train_stage1, DepthPerturbation, PretrainConfig, Stage1Config, TrainOutcome};

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::guidance::{PaletteRegistry, PromptRegistry};
use crate::planes::{Mask, Plane};

/// One row of the loss log.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub color: f64,
    pub feature: f64,
    pub depth: f64,
    pub unmask: f64,
    pub clip: f64,
    pub sds_norm: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,L_color,L_feature,L_depth,L_unmask,L_clip,grad_sds_norm";

/// Loss trace as CSV text. Floats use the shortest round-trip form so
/// identical runs produce identical bytes.
pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(LOSS_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            r.step, r.color, r.feature, r.depth, r.unmask, r.clip, r.sds_norm
        ));
    }
    out
}

pub fn write_loss_csv(records: &[LossRecord], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(loss_csv(records).as_bytes()).map_err(|e| Error::io(path, e))
}

/// `10·log10(1/MSE)` over the region (all pixels when `None`), capped at
/// 99 dB for identical inputs.
pub fn eval_psnr(a: &Plane, b: &Plane, region: Option<&Mask>) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::contract("images differ in shape"));
    }
    let c = a.channels;
    let (mut se, mut n) = (0.0, 0usize);
    for i in 0..a.pixel_count() {
        if let Some(m) = region {
            if m.width != a.width || m.height != a.height {
                return Err(Error::contract("region mask differs in shape"));
            }
            if !m.data[i] {
                continue;
            }
        }
        for k in 0..c {
            let d = (a.data[i * c + k] - b.data[i * c + k]) as f64;
            se += d * d;
        }
        n += c;
    }
    if n == 0 {
        return Err(Error::contract("empty evaluation region"));
    }
    let mse = se / n as f64;
    Ok(if mse == 0.0 { 99.0 } else { (10.0 * (1.0 / mse).log10()).min(99.0) })
}

/// `|A∩B| / |A∪B|`, and 1 when both are empty.
pub fn eval_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::contract("masks differ in shape"));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// 64-bit FNV-1a digest, hex encoded; identifies checkpoints in provenance.
pub fn content_id(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Guidance provider settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: String,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub prompts: PromptRegistry,
    pub palettes: PaletteRegistry,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: "toy".into(),
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            prompts: PromptRegistry::default(),
            palettes: PaletteRegistry::default(),
        }
    }
}

impl ProviderConfig {
    pub fn providers(&self) -> Result<Providers> {
        if self.kind != "toy" {
            return Err(Error::config(format!("unsupported provider kind {:?}; available: toy", self.kind)));
        }
        Ok(Providers {
            schedule: crate::guidance::NoiseSchedule::linear(self.t_max, self.beta_start, self.beta_end)?,
            prompts: self.prompts.clone(),
            palettes: self.palettes.clone(),
        })
    }
}

/// Everything a run can be configured with, as stored in a TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub field: FieldConfig,
    pub stage1: Stage1Config,
    pub pretrain: PretrainConfig,
    pub edit: EditJob,
    pub providers: ProviderConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
