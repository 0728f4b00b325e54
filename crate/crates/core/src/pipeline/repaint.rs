use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Camera, Dataset};
use crate::error::{Error, Result};
use crate::field::{Adam, Heads, RadianceField};
use crate::guidance::{
    black_hole_composite, build_targets, clip_loss_grad, sds_pixel_grad, Conditioning, EmbeddingProvider,
    ForwardProcess, Image, NoiseSchedule, PaletteRegistry, PromptRegistry, ToyDeltaDenoiser, ToyPaletteEmbedder,
    Weighting,
};
use crate::losses::{is_unmasked, unmask_loss_grad, Channel, LossWeights, PixelBatch};
use crate::mask::MaskSet;
use crate::occupancy::{OccupancyConfig, OccupancySchedule};
use crate::planes::Plane;
use crate::renderer::{
    all_pixels, backprop_tapes, gen_rays, render_rays_taped, render_view, PixelAdjoints, RenderHeads, RenderOptions,
};

use super::train::{pretrain_base, PretrainConfig};
use super::LossRecord;

/// Which guidance terms take part in the repaint objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditFlags {
    pub sds: bool,
    /// Condition the denoiser on "`prompt` in `bgt`", which fills the part
    /// of the mask the new object leaves uncovered with the background.
    pub bgt_in_prompt: bool,
    pub clip: bool,
}

impl Default for EditFlags {
    fn default() -> Self {
        Self {
            sds: true,
            bgt_in_prompt: true,
            clip: true,
        }
    }
}

/// Supervision for the unmasked region.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnmaskTarget {
    /// Renders of the field before repainting.
    #[default]
    BaseRender,
    /// The dataset's training images.
    Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditJob {
    pub prompt: String,
    pub bgt: String,
    pub weights: LossWeights,
    pub pretrain_steps: usize,
    pub repaint_steps: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
    pub flags: EditFlags,
    pub n_samples: usize,
    pub status_every: usize,
    pub weighting: Weighting,
    pub forward_process: ForwardProcess,
    pub unmask_target: UnmaskTarget,
    pub occupancy: Option<OccupancyConfig>,
}

impl Default for EditJob {
    fn default() -> Self {
        Self {
            prompt: "a blue sphere on leaves".into(),
            bgt: "leaves".into(),
            weights: LossWeights::default(),
            pretrain_steps: 3000,
            repaint_steps: 10000,
            lr_start: 1e-3,
            lr_end: 1e-4,
            seed: 0,
            flags: EditFlags::default(),
            n_samples: 64,
            status_every: 50,
            weighting: Weighting::Constant,
            forward_process: ForwardProcess::Standard,
            unmask_target: UnmaskTarget::BaseRender,
            occupancy: Some(OccupancyConfig {
                warmup_steps: 0,
                ..OccupancyConfig::default()
            }),
        }
    }
}

impl EditJob {
    /// Checks the job against the provider registries before any work.
    pub fn validate(&self, providers: &Providers) -> Result<()> {
        if self.repaint_steps == 0 || self.n_samples == 0 || self.status_every == 0 {
            return Err(Error::config("repaint_steps, n_samples and status_every must be at least 1"));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        self.weights.validate()?;
        if let Some(o) = &self.occupancy {
            o.validate()?;
        }
        providers.prompts.resolve(&self.prompt)?;
        if self.flags.clip || self.flags.bgt_in_prompt {
            if self.bgt.trim().is_empty() {
                return Err(Error::config("a background prompt is required when clip or bgt_in_prompt is on"));
            }
            providers.palettes.resolve(&self.bgt)?;
        }
        Ok(())
    }

    /// Linear decay from `lr_start` to `lr_end` over the repaint steps.
    pub fn learning_rate(&self, step: usize) -> f64 {
        if self.repaint_steps <= 1 {
            return self.lr_start;
        }
        let f = step as f64 / (self.repaint_steps - 1) as f64;
        self.lr_start + (self.lr_end - self.lr_start) * f
    }

    /// The string the denoiser is conditioned on.
    pub fn conditioning_prompt(&self) -> String {
        if self.flags.bgt_in_prompt {
            format!("{} in {}", self.prompt, self.bgt)
        } else {
            self.prompt.clone()
        }
    }
}

/// Read-only guidance providers and their registries.
#[derive(Clone, Debug, Default)]
pub struct Providers {
    pub schedule: NoiseSchedule,
    pub prompts: PromptRegistry,
    pub palettes: PaletteRegistry,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobPhase {
    Pretrain,
    Repaint,
    Done,
    Failed,
}

impl JobPhase {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobPhase::Done | JobPhase::Failed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub phase: JobPhase,
    /// Steps completed across both phases.
    pub step: usize,
    pub total_steps: usize,
    pub loss: Option<LossRecord>,
    pub preview_view: Option<usize>,
    pub message: Option<String>,
}

pub struct RepaintOutcome {
    pub field: RadianceField<f32>,
    pub trace: Vec<LossRecord>,
    pub pretrain_trace: Vec<LossRecord>,
    /// Unmask supervision per view.
    pub originals: Vec<Image>,
    /// Toy denoiser targets per view.
    pub targets: Vec<Image>,
    pub status: JobStatus,
}

/// Jitter-free color renders of every camera.
pub fn render_base_images(field: &RadianceField<f32>, cameras: &[Camera], n_samples: usize) -> Result<Vec<Image>> {
    let opts = RenderOptions {
        n_samples,
        ..RenderOptions::default()
    };
    let want = RenderHeads {
        color: true,
        feature: false,
        depth: false,
        opacity: false,
    };
    cameras
        .iter()
        .map(|c| Image::from_plane(&render_view(field, c, want, &opts)?.color.expect("color requested")))
        .collect()
}

fn job_seed(seed: u64, step: usize) -> u64 {
    (seed ^ 0x5245_5041_494e_5400).wrapping_add((step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Repaints the masked region of `base` under the job's guidance while the
/// unmask loss holds the rest of the scene. `on_status` receives a status
/// snapshot, with a preview render, every `status_every` steps and at the
/// end; a failure is reported through it before the error is returned.
pub fn repaint(
    base: &RadianceField<f32>,
    masks: &MaskSet,
    dataset: Option<&Dataset>,
    job: &EditJob,
    providers: &Providers,
    job_id: &str,
    on_status: &mut dyn FnMut(&JobStatus, Option<&Plane>),
) -> Result<RepaintOutcome> {
    job.validate(providers)?;
    let cameras = &masks.cameras;
    if cameras.is_empty() || masks.masks.len() != cameras.len() {
        return Err(Error::config("mask set has no views"));
    }
    if job.unmask_target == UnmaskTarget::Dataset {
        let ds = dataset.ok_or_else(|| Error::config("unmask target 'dataset' requires a dataset"))?;
        if ds.views.len() != cameras.len() {
            return Err(Error::mismatch("view count", cameras.len(), ds.views.len()));
        }
    }
    let pretrain_steps = if dataset.is_some() { job.pretrain_steps } else { 0 };
    let mut status = JobStatus {
        job_id: job_id.to_string(),
        phase: JobPhase::Pretrain,
        step: 0,
        total_steps: pretrain_steps + job.repaint_steps,
        loss: None,
        preview_view: None,
        message: None,
    };
    on_status(&status, None);
    let fail = |status: &mut JobStatus, on_status: &mut dyn FnMut(&JobStatus, Option<&Plane>), e: Error| {
        status.phase = JobPhase::Failed;
        status.message = Some(e.to_string());
        on_status(status, None);
        e
    };

    let mut pretrain_trace = Vec::new();
    let mut field = base.clone();
    if pretrain_steps > 0 {
        let cfg = PretrainConfig {
            steps: pretrain_steps,
            seed: job.seed,
            n_samples: job.n_samples,
            occupancy: job.occupancy,
            ..PretrainConfig::default()
        };
        let every = job.status_every;
        let mut forward = |r: &LossRecord| {
            if (r.step + 1) % every == 0 {
                status.step = r.step + 1;
                status.loss = Some(*r);
                on_status(&status, None);
            }
        };
        match pretrain_base(dataset.unwrap(), field, &cfg, &mut forward) {
            Ok(out) => {
                field = out.field;
                pretrain_trace = out.trace;
            }
            Err(e) => return Err(fail(&mut status, on_status, e)),
        }
        status.step = pretrain_steps;
    }

    let base_images = render_base_images(&field, cameras, job.n_samples)?;
    let originals = match job.unmask_target {
        UnmaskTarget::BaseRender => base_images.clone(),
        UnmaskTarget::Dataset => dataset
            .unwrap()
            .views
            .iter()
            .map(|v| Image::from_plane(&v.rgb))
            .collect::<Result<Vec<_>>>()?,
    };
    let spec = providers.prompts.resolve(&job.prompt)?;
    let hole_fill = if job.flags.bgt_in_prompt {
        Some(providers.palettes.mean_color(&job.bgt)?)
    } else {
        None
    };
    let targets = build_targets(spec, &base_images, &masks.masks, hole_fill)?;
    let cond_prompt = job.conditioning_prompt();
    let denoiser = ToyDeltaDenoiser::new(providers.schedule.clone(), cond_prompt.clone(), targets.clone());
    let embedder = ToyPaletteEmbedder::new(providers.palettes.clone());
    if job.flags.clip {
        embedder.embed_text(&job.bgt)?;
    }
    let view_rays = cameras
        .iter()
        .map(|c| gen_rays(c, &all_pixels(c)))
        .collect::<Result<Vec<_>>>()?;
    let mask_values: Vec<Vec<f32>> = masks
        .masks
        .iter()
        .map(|m| m.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        .collect();

    status.phase = JobPhase::Repaint;
    on_status(&status, None);
    let mut rng = ChaCha8Rng::seed_from_u64(job.seed ^ 0x4544_4954);
    let mut adam = Adam::new(field.param_count());
    let mut grads = field.grad_buffer();
    let mut trace = Vec::with_capacity(job.repaint_steps);
    let mut occupancy = OccupancySchedule::new(job.occupancy, job.seed);
    for step in 0..job.repaint_steps {
        let v = rng.random_range(0..cameras.len());
        let (w, h) = (cameras[v].width, cameras[v].height);
        let opts = RenderOptions {
            n_samples: job.n_samples,
            occupancy: occupancy.at(&field, step),
            ..RenderOptions::training(job_seed(job.seed, step))
        };
        let (out, tapes) = render_rays_taped(&field, &view_rays[v], &opts, Heads::COLOR);
        let img = Image {
            width: w,
            height: h,
            data: out.color.iter().map(|&c| c as f64).collect(),
        };
        let n = w * h;
        let mut adj = vec![0.0f64; 3 * n];
        let mut record = LossRecord {
            step,
            ..LossRecord::default()
        };
        record.color = img.data.iter().zip(&targets[v].data).map(|(a, b)| (a - b) * (a - b)).sum();
        if job.flags.sds {
            let t = providers.schedule.sample_timestep(&mut rng);
            let eps = Image::noise(w, h, &mut rng);
            let cond = Conditioning {
                prompt: &cond_prompt,
                view: v,
            };
            let g = match sds_pixel_grad(
                &img,
                &cond,
                t,
                &eps,
                &denoiser,
                &providers.schedule,
                job.weighting,
                job.forward_process,
            ) {
                Ok(g) => g,
                Err(e) => return Err(fail(&mut status, on_status, e)),
            };
            record.sds_norm = g.data.iter().map(|x| x * x).sum::<f64>().sqrt();
            adj.iter_mut().zip(&g.data).for_each(|(a, g)| *a += g);
        }
        {
            let mut b = PixelBatch::new(n, 0);
            b.color = Some(Channel::new(&img.data, &originals[v].data));
            b.mask = Some(&mask_values[v]);
            record.unmask = unmask_loss_grad(&b, job.weights.lambda_unmask, &mut adj)?;
        }
        if job.flags.clip {
            let hole = black_hole_composite(&img, &masks.masks[v])?;
            let (loss, g) = clip_loss_grad(&hole, &job.bgt, &embedder)?;
            record.clip = loss;
            if job.weights.lambda_clip > 0.0 {
                for (i, &m) in mask_values[v].iter().enumerate() {
                    if is_unmasked(m) {
                        for k in 3 * i..3 * i + 3 {
                            adj[k] += job.weights.lambda_clip * g[k];
                        }
                    }
                }
            }
        }
        let adjoints = PixelAdjoints {
            color: Some(adj.iter().map(|&a| a as f32).collect()),
            ..PixelAdjoints::default()
        };
        grads.zero();
        backprop_tapes(&field, &tapes, &adjoints, &mut grads);
        if let Err(e) = grads.check_finite() {
            return Err(fail(&mut status, on_status, e));
        }
        adam.step(&mut field.params, &grads, job.learning_rate(step))?;
        trace.push(record);
        status.step = pretrain_steps + step + 1;
        status.loss = Some(record);
        if (step + 1) % job.status_every == 0 && step + 1 < job.repaint_steps {
            status.preview_view = Some(v);
            on_status(&status, Some(&img.to_plane()));
        }
        if step + 1 == job.repaint_steps {
            status.preview_view = Some(v);
            status.phase = JobPhase::Done;
            on_status(&status, Some(&img.to_plane()));
        }
    }
    Ok(RepaintOutcome {
        field,
        trace,
        pretrain_trace,
        originals,
        targets,
        status,
    })
}
