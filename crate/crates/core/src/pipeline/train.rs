use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{perturb_depth, Dataset};
use crate::error::{Error, Result};
use crate::field::{save_checkpoint, Adam, FieldConfig, Heads, RadianceField};
use crate::losses::{stage1_loss_grad, Channel, LossWeights, PixelBatch, Reduction};
use crate::occupancy::{OccupancyConfig, OccupancySchedule};
use crate::renderer::{all_pixels, gen_rays, render_and_backprop, PixelAdjoints, Ray, RenderOptions};

use super::LossRecord;

/// Affine-plus-noise miscalibration applied to depth supervision.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthPerturbation {
    pub scale: f64,
    pub shift: f64,
    pub noise_sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub steps: usize,
    pub lr: f64,
    pub ray_batch: usize,
    pub weights: LossWeights,
    pub depth_supervision: bool,
    pub seed: u64,
    pub n_samples: usize,
    pub reduction: Reduction,
    pub depth_perturbation: Option<DepthPerturbation>,
    /// Where to write the last finite field if training hits a numeric fault.
    pub fault_checkpoint: Option<PathBuf>,
    /// Empty-space skipping; `None` evaluates every sample.
    pub occupancy: Option<OccupancyConfig>,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-2,
            ray_batch: 4096,
            weights: LossWeights::default(),
            depth_supervision: true,
            seed: 0,
            n_samples: 64,
            reduction: Reduction::Sum,
            depth_perturbation: None,
            fault_checkpoint: None,
            occupancy: Some(OccupancyConfig::default()),
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.ray_batch == 0 || self.n_samples == 0 {
            return Err(Error::config("steps, ray_batch and n_samples must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if let Some(o) = &self.occupancy {
            o.validate()?;
        }
        self.weights.validate()
    }

    /// Weights actually optimized: depth off forces `λ_depth = 0`.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if !self.depth_supervision {
            w.lambda_depth = 0.0;
        }
        w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub n_samples: usize,
    pub fault_checkpoint: Option<PathBuf>,
    pub occupancy: Option<OccupancyConfig>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 1e-2,
            seed: 0,
            n_samples: 64,
            fault_checkpoint: None,
            occupancy: Some(OccupancyConfig {
                warmup_steps: 0,
                ..OccupancyConfig::default()
            }),
        }
    }
}

pub struct TrainOutcome {
    pub field: RadianceField<f32>,
    pub adam: Adam<f32>,
    pub trace: Vec<LossRecord>,
}

/// Supervision for every training pixel, flattened view-major.
struct Supervision {
    rays: Vec<Ray>,
    color: Vec<f32>,
    feature: Vec<f32>,
    depth: Vec<f32>,
    feature_dim: usize,
}

impl Supervision {
    fn new(ds: &Dataset, perturb: Option<DepthPerturbation>, seed: u64) -> Result<Self> {
        if ds.views.is_empty() {
            return Err(Error::config("dataset has no views"));
        }
        let mut s = Supervision {
            rays: Vec::new(),
            color: Vec::new(),
            feature: Vec::new(),
            depth: Vec::new(),
            feature_dim: ds.feature_dim,
        };
        for (i, v) in ds.views.iter().enumerate() {
            v.camera.validate()?;
            s.rays.extend(gen_rays(&v.camera, &all_pixels(&v.camera))?);
            s.color.extend_from_slice(&v.rgb.data);
            s.feature.extend_from_slice(&v.feature.data);
            match perturb {
                Some(p) => {
                    let d = perturb_depth(v, p.scale, p.shift, p.noise_sd, seed.wrapping_add(i as u64))?;
                    s.depth.extend_from_slice(&d.data);
                }
                None => s.depth.extend_from_slice(&v.depth.data),
            }
        }
        Ok(s)
    }
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step as u64 + 1)
}

fn fault(step: usize, index: usize, what: &str, last_good: &RadianceField<f32>, path: &Option<PathBuf>) -> Error {
    let saved = match path {
        Some(p) => match save_checkpoint(last_good, None, p) {
            Ok(()) => format!("; last good field saved to {}", p.display()),
            Err(e) => format!("; saving last good field failed: {e}"),
        },
        None => String::new(),
    };
    Error::NumericFault {
        message: format!("{what} at step {step}{saved}"),
        index,
    }
}

/// First-stage optimization of color, feature and depth reconstruction from
/// random ray batches. `on_step` sees every loss record as it is produced.
pub fn train_stage1(
    ds: &Dataset,
    field_cfg: &FieldConfig,
    cfg: &Stage1Config,
    on_step: &mut dyn FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut field_cfg = field_cfg.clone();
    field_cfg.feature_dim = ds.feature_dim;
    let field = RadianceField::<f32>::new(field_cfg, cfg.seed)?;
    continue_stage1(ds, field, cfg, on_step)
}

/// [`train_stage1`] from an existing field.
pub fn continue_stage1(
    ds: &Dataset,
    mut field: RadianceField<f32>,
    cfg: &Stage1Config,
    on_step: &mut dyn FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if field.config.feature_dim != ds.feature_dim {
        return Err(Error::mismatch("feature dimension", ds.feature_dim, field.config.feature_dim));
    }
    let sup = Supervision::new(ds, cfg.depth_perturbation, cfg.seed)?;
    let weights = cfg.effective_weights();
    let fd = sup.feature_dim;
    let n_pixels = sup.rays.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5354_4147_4531);
    let mut adam = Adam::new(field.param_count());
    let mut grads = field.grad_buffer();
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut rays = Vec::with_capacity(cfg.ray_batch);
    let mut gt_color = Vec::with_capacity(cfg.ray_batch * 3);
    let mut gt_feature = Vec::with_capacity(cfg.ray_batch * fd);
    let mut gt_depth = Vec::with_capacity(cfg.ray_batch);
    let heads = if weights.lambda_feature > 0.0 { Heads::ALL } else { Heads::COLOR };
    let mut occupancy = OccupancySchedule::new(cfg.occupancy, cfg.seed);
    for step in 0..cfg.steps {
        rays.clear();
        gt_color.clear();
        gt_feature.clear();
        gt_depth.clear();
        for _ in 0..cfg.ray_batch {
            let p = rng.random_range(0..n_pixels);
            rays.push(sup.rays[p]);
            gt_color.extend_from_slice(&sup.color[3 * p..3 * p + 3]);
            gt_feature.extend_from_slice(&sup.feature[fd * p..fd * (p + 1)]);
            gt_depth.push(sup.depth[p]);
        }
        let opts = RenderOptions {
            n_samples: cfg.n_samples,
            occupancy: occupancy.at(&field, step),
            ..RenderOptions::training(step_seed(cfg.seed, step))
        };
        grads.zero();
        let total_rays = rays.len();
        let (_, terms) = render_and_backprop(
            &field,
            &rays,
            &opts,
            heads,
            |range, out| {
                let n = range.len();
                let mut b = PixelBatch::new(n, fd);
                let (c, f, d) = (
                    &gt_color[3 * range.start..3 * range.end],
                    &gt_feature[fd * range.start..fd * range.end],
                    &gt_depth[range.clone()],
                );
                b.color = Some(Channel::new(&out.color, c));
                if heads.feature {
                    b.feature = Some(Channel::new(&out.feature, f));
                }
                b.depth = Some(Channel::new(&out.depth, d));
                let (t, mut adj) = stage1_loss_grad(&b, &weights, Reduction::Sum).expect("batch shapes are consistent");
                if cfg.reduction == Reduction::Mean {
                    scale_adjoints(&mut adj, 1.0 / total_rays as f32);
                }
                (adj, vec![t.color, t.feature, t.depth])
            },
            &mut grads,
        );
        let k = match cfg.reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / total_rays as f64,
        };
        let record = LossRecord {
            step,
            color: terms[0] * k,
            feature: terms[1] * k,
            depth: terms[2] * k,
            ..LossRecord::default()
        };
        if !(record.color.is_finite() && record.feature.is_finite() && record.depth.is_finite()) {
            return Err(fault(step, 0, "non-finite loss", &field, &cfg.fault_checkpoint));
        }
        if let Err(Error::NumericFault { index, .. }) = grads.check_finite() {
            return Err(fault(step, index, "non-finite gradient", &field, &cfg.fault_checkpoint));
        }
        adam.step(&mut field.params, &grads, cfg.lr)?;
        on_step(&record);
        trace.push(record);
    }
    Ok(TrainOutcome { field, adam, trace })
}

fn scale_adjoints(adj: &mut PixelAdjoints<f32>, k: f32) {
    for v in [&mut adj.color, &mut adj.feature, &mut adj.depth, &mut adj.opacity]
        .into_iter()
        .flatten()
    {
        v.iter_mut().for_each(|x| *x *= k);
    }
}

/// Whole-image color reconstruction from a random training view per step.
/// The feature head receives no gradient and a fresh optimizer is used, so
/// its parameters are left exactly as they were.
pub fn pretrain_base(
    ds: &Dataset,
    mut field: RadianceField<f32>,
    cfg: &PretrainConfig,
    on_step: &mut dyn FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    if cfg.n_samples == 0 {
        return Err(Error::config("n_samples must be at least 1"));
    }
    if let Some(o) = &cfg.occupancy {
        o.validate()?;
    }
    if ds.views.is_empty() {
        return Err(Error::config("dataset has no views"));
    }
    let view_rays = ds
        .views
        .iter()
        .map(|v| gen_rays(&v.camera, &all_pixels(&v.camera)))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4241_5345);
    let mut adam = Adam::new(field.param_count());
    let mut grads = field.grad_buffer();
    let mut trace = Vec::with_capacity(cfg.steps);
    let fd = field.config.feature_dim;
    let mut occupancy = OccupancySchedule::new(cfg.occupancy, cfg.seed);
    for step in 0..cfg.steps {
        let v = rng.random_range(0..ds.views.len());
        let target = &ds.views[v].rgb.data;
        let opts = RenderOptions {
            n_samples: cfg.n_samples,
            occupancy: occupancy.at(&field, step),
            ..RenderOptions::training(step_seed(cfg.seed, step))
        };
        grads.zero();
        let (_, terms) = render_and_backprop(
            &field,
            &view_rays[v],
            &opts,
            Heads::COLOR,
            |range, out| {
                let mut b = PixelBatch::new(range.len(), fd);
                b.color = Some(Channel::new(&out.color, &target[3 * range.start..3 * range.end]));
                let none = LossWeights {
                    lambda_feature: 0.0,
                    lambda_depth: 0.0,
                    ..LossWeights::default()
                };
                let (t, adj) = stage1_loss_grad(&b, &none, Reduction::Sum).expect("batch shapes are consistent");
                (adj, vec![t.color])
            },
            &mut grads,
        );
        let record = LossRecord {
            step,
            color: terms[0],
            ..LossRecord::default()
        };
        if !record.color.is_finite() {
            return Err(fault(step, 0, "non-finite loss", &field, &cfg.fault_checkpoint));
        }
        if let Err(Error::NumericFault { index, .. }) = grads.check_finite() {
            return Err(fault(step, index, "non-finite gradient", &field, &cfg.fault_checkpoint));
        }
        adam.step(&mut field.params, &grads, cfg.lr)?;
        on_step(&record);
        trace.push(record);
    }
    Ok(TrainOutcome { field, adam, trace })
}
