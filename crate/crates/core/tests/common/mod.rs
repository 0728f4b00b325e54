//! Oracles shared by the integration suites and the acceptance runner.
#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use radfield::dataset::{Camera, Orbit};
use radfield::field::{Activation, FieldConfig, Heads, RadianceField};
use radfield::guidance::{
    black_hole_composite, clip_loss_grad, sds_pixel_grad, Conditioning, ForwardProcess, Image, NoiseSchedule,
    PaletteRegistry, ToyDeltaDenoiser, ToyPaletteEmbedder, Weighting,
};
use radfield::losses::{
    color_loss, depth_loss, feature_loss, stage1_loss_grad, unmask_loss, unmask_loss_grad, Channel, LossWeights,
    PixelBatch, Reduction,
};
use radfield::occupancy::{OccupancyConfig, OccupancyGrid};
use radfield::planes::Mask;
use radfield::renderer::{
    all_pixels, backprop_tapes, composite, gen_rays, render_rays, render_rays_taped, sample_stratified, PixelAdjoints,
    Ray, RaySampleBatch, RenderOptions, RenderOutput,
};

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-3;
/// Gradients below this magnitude are compared absolutely against it.
const FD_FLOOR: f64 = 1e-6;

const FEATURE_DIM: usize = 4;
const RES: usize = 4;

/// Outcome of one objective's finite-difference comparison.
#[derive(Clone, Debug)]
pub struct FdResult {
    pub name: &'static str,
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_index: usize,
}

impl FdResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.worst_rel < FD_REL_TOL
    }
}

/// Miniature 64-bit field with smooth activations and a non-trivial grid.
pub fn fd_field() -> RadianceField<f64> {
    let cfg = FieldConfig {
        activation: Activation::Softplus,
        ..FieldConfig::miniature(FEATURE_DIM)
    };
    let mut field = RadianceField::<f64>::new(cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    for p in &mut field.params[..field.layout.grid] {
        *p = rng.random_range(-0.5..0.5);
    }
    let d = field.layout.density;
    for p in &mut field.params[d.w1..d.b2 + 1] {
        *p = rng.random_range(-1.0..1.0);
    }
    field
}

pub fn fd_camera() -> Camera {
    Orbit::default().camera(20.0, RES)
}

pub fn fd_options() -> RenderOptions {
    RenderOptions {
        n_samples: 16,
        jitter: Some(3),
        weight_cutoff: 0.0,
        // Uneven chunks exercise the ordered gradient reduction.
        chunk_rays: 5,
        occupancy: None,
    }
}

struct Targets {
    color: Vec<f64>,
    feature: Vec<f64>,
    depth: Vec<f64>,
    mask: Vec<f32>,
    mask_plane: Mask,
}

fn targets(n: usize) -> Targets {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut draw = |k: usize| (0..k).map(|_| rng.random::<f64>()).collect::<Vec<_>>();
    let color = draw(3 * n);
    let feature = draw(FEATURE_DIM * n);
    let depth = draw(n);
    let mask: Vec<f32> = (0..n).map(|i| if i % 3 == 1 { 1.0 } else { 0.0 }).collect();
    let mask_plane = Mask {
        width: RES,
        height: RES,
        data: mask.iter().map(|&m| m >= 0.5).collect(),
    };
    Targets {
        color,
        feature,
        depth,
        mask,
        mask_plane,
    }
}

type Objective<'a> = Box<dyn Fn(&RenderOutput<f64>) -> (f64, PixelAdjoints<f64>) + 'a>;

fn batch<'a>(out: &'a RenderOutput<f64>, t: &'a Targets) -> PixelBatch<'a, f64> {
    let mut b = PixelBatch::new(out.n_rays, FEATURE_DIM);
    b.color = Some(Channel::new(&out.color, &t.color));
    b.feature = Some(Channel::new(&out.feature, &t.feature));
    b.depth = Some(Channel::new(&out.depth, &t.depth));
    b.mask = Some(&t.mask);
    b
}

fn only(lambda_feature: f64, lambda_depth: f64) -> LossWeights {
    LossWeights {
        lambda_feature,
        lambda_depth,
        ..LossWeights::default()
    }
}

/// Parameter indices to probe: the largest gradients of each parameter
/// block plus random picks.
fn probe_indices(field: &RadianceField<f64>, grad: &[f64], per_block: usize, seed: u64) -> Vec<usize> {
    let l = &field.layout;
    let blocks = [
        0..l.grid,
        l.density.w1..l.color.w1,
        l.color.w1..l.feature.w1,
        l.feature.w1..l.total,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for b in blocks {
        let mut idx: Vec<usize> = b.clone().collect();
        idx.sort_by(|&i, &j| grad[j].abs().total_cmp(&grad[i].abs()).then(i.cmp(&j)));
        out.extend(idx.iter().take(per_block));
        for _ in 0..per_block / 2 {
            out.push(rng.random_range(b.clone()));
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

fn fd_check(
    name: &'static str,
    field: &RadianceField<f64>,
    rays: &[Ray],
    opts: &RenderOptions,
    objective: &Objective,
) -> FdResult {
    let (out, tapes) = render_rays_taped(field, rays, opts, Heads::ALL);
    let (_, adj) = objective(&out);
    let mut grads = field.grad_buffer();
    backprop_tapes(field, &tapes, &adj, &mut grads);
    let eval = |f: &RadianceField<f64>| objective(&render_rays(f, rays, opts, Heads::ALL)).0;
    let mut result = FdResult {
        name,
        checked: 0,
        worst_rel: 0.0,
        worst_index: 0,
    };
    let mut probe = field.clone();
    for i in probe_indices(field, &grads.data, 12, 5) {
        let p0 = probe.params[i];
        probe.params[i] = p0 + FD_STEP;
        let plus = eval(&probe);
        probe.params[i] = p0 - FD_STEP;
        let minus = eval(&probe);
        probe.params[i] = p0;
        let fd = (plus - minus) / (2.0 * FD_STEP);
        let an = grads.data[i];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(FD_FLOOR);
        result.checked += 1;
        if rel > result.worst_rel {
            result.worst_rel = rel;
            result.worst_index = i;
        }
    }
    result
}

/// Central-difference checks of every objective against the analytic
/// backward pass through the renderer and field.
pub fn gradient_suite() -> Vec<FdResult> {
    let field = fd_field();
    let cam = fd_camera();
    let rays = gen_rays(&cam, &all_pixels(&cam)).unwrap();
    let n = rays.len();
    let t = targets(n);
    let palettes = PaletteRegistry::default();
    let embedder = ToyPaletteEmbedder::new(palettes);
    let mut rng = ChaCha8Rng::seed_from_u64(72);
    let mut coeffs = |k: usize| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let (a_c, a_f, a_d, a_o) = (coeffs(3 * n), coeffs(FEATURE_DIM * n), coeffs(n), coeffs(n));
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let objectives: Vec<(&'static str, Objective)> = vec![
        (
            "color",
            Box::new(|o| {
                let b = batch(o, &t);
                let (_, adj) = stage1_loss_grad(&b, &only(0.0, 0.0), Reduction::Sum).unwrap();
                (color_loss(&b).unwrap(), adj)
            }),
        ),
        (
            "feature",
            Box::new(|o| {
                let b = batch(o, &t);
                let (_, adj) = stage1_loss_grad(&b, &only(1.0, 0.0), Reduction::Sum).unwrap();
                let adj = PixelAdjoints {
                    feature: adj.feature,
                    ..PixelAdjoints::default()
                };
                (feature_loss(&b).unwrap(), adj)
            }),
        ),
        (
            "depth",
            Box::new(|o| {
                let b = batch(o, &t);
                let (_, adj) = stage1_loss_grad(&b, &only(0.0, 1.0), Reduction::Sum).unwrap();
                let adj = PixelAdjoints {
                    depth: adj.depth,
                    ..PixelAdjoints::default()
                };
                (depth_loss(&b).unwrap(), adj)
            }),
        ),
        (
            "stage1 sum",
            Box::new(|o| {
                let (terms, adj) = stage1_loss_grad(&batch(o, &t), &LossWeights::default(), Reduction::Sum).unwrap();
                (terms.total, adj)
            }),
        ),
        (
            "stage1 mean",
            Box::new(|o| {
                let (terms, adj) = stage1_loss_grad(&batch(o, &t), &LossWeights::default(), Reduction::Mean).unwrap();
                (terms.total, adj)
            }),
        ),
        (
            "unmask",
            Box::new(|o| {
                let b = batch(o, &t);
                let mut g = vec![0.0; 3 * n];
                let value = unmask_loss_grad(&b, 1.0, &mut g).unwrap();
                assert_eq!(value, unmask_loss(&b).unwrap());
                (
                    value,
                    PixelAdjoints {
                        color: Some(g),
                        ..PixelAdjoints::default()
                    },
                )
            }),
        ),
        (
            "clip",
            Box::new(|o| {
                let img = Image {
                    width: RES,
                    height: RES,
                    data: o.color.clone(),
                };
                let hole = black_hole_composite(&img, &t.mask_plane).unwrap();
                let (loss, mut g) = clip_loss_grad(&hole, "leaves", &embedder).unwrap();
                // Masked pixels are replaced by constants in the composite.
                for (i, &m) in t.mask_plane.data.iter().enumerate() {
                    if m {
                        g[3 * i..3 * i + 3].fill(0.0);
                    }
                }
                (
                    loss,
                    PixelAdjoints {
                        color: Some(g),
                        ..PixelAdjoints::default()
                    },
                )
            }),
        ),
        (
            "composite",
            Box::new(|o| {
                let value = dot(&a_c, &o.color) + dot(&a_f, &o.feature) + dot(&a_d, &o.depth) + dot(&a_o, &o.opacity);
                (
                    value,
                    PixelAdjoints {
                        color: Some(a_c.clone()),
                        feature: Some(a_f.clone()),
                        depth: Some(a_d.clone()),
                        opacity: Some(a_o.clone()),
                    },
                )
            }),
        ),
    ];
    let opts = fd_options();
    let mut results: Vec<FdResult> = objectives
        .iter()
        .map(|(name, obj)| fd_check(name, &field, &rays, &opts, obj))
        .collect();

    // The same composite objective with part of the volume skipped.
    let grid = partial_occupancy(&field);
    let skip_opts = RenderOptions {
        occupancy: Some(Arc::new(grid)),
        ..fd_options()
    };
    let composite_obj = &objectives.iter().find(|(n, _)| *n == "composite").unwrap().1;
    results.push(fd_check("composite with occupancy", &field, &rays, &skip_opts, composite_obj));
    results
}

/// A coarse grid with roughly half its cells empty.
pub fn partial_occupancy<T: radfield::math::Real>(field: &RadianceField<T>) -> OccupancyGrid {
    for threshold in (0..800).map(|i| 0.05 * 1.01f64.powi(i)) {
        let cfg = OccupancyConfig {
            resolution: 3,
            threshold,
            ..OccupancyConfig::default()
        };
        let mut g = OccupancyGrid::new(field, &cfg);
        g.update(field, cfg.decay, 1);
        let f = g.occupied_fraction();
        if (0.2..=0.8).contains(&f) {
            return g;
        }
    }
    panic!("no threshold splits the grid");
}

/// `|T_residual − exp(−σ·len)|` for a constant-density slab filling
/// `[0, len]`, sampled at bin centers.
pub fn slab_residual_error(sigma: f64, len: f64, n: usize) -> f64 {
    let ray = Ray {
        origin: [0.0; 3],
        dir: [0.0, 0.0, 1.0],
        t_near: 0.0,
        t_far: len,
        pixel: (0, 0),
    };
    let t = sample_stratified::<ChaCha8Rng>(&ray, n, None);
    let b = RaySampleBatch::from_positions(t, len, vec![sigma; n], vec![0.5; 3 * n], Vec::new(), 0);
    let px = composite(&b).unwrap();
    ((1.0 - px.opacity) - (-sigma * len).exp()).abs()
}

/// Smooth density bump with smoothly varying color along `[near, far]`.
fn smooth_ray(n: usize, near: f64, far: f64) -> RaySampleBatch<f64> {
    let ray = Ray {
        origin: [0.0; 3],
        dir: [0.0, 0.0, 1.0],
        t_near: near,
        t_far: far,
        pixel: (0, 0),
    };
    let t = sample_stratified::<ChaCha8Rng>(&ray, n, None);
    let mid = 0.5 * (near + far);
    let sigma: Vec<f64> = t.iter().map(|&x| 4.0 * (-((x - mid) / 0.4).powi(2)).exp()).collect();
    let color: Vec<f64> = t
        .iter()
        .flat_map(|&x| [0.5 + 0.4 * (x * 1.3).sin(), 0.5 + 0.4 * (x * 0.7).cos(), 0.3 + 0.2 * x / far])
        .collect();
    RaySampleBatch::from_positions(t, far, sigma, color, Vec::new(), 0)
}

/// Largest per-channel color change between 64 and 128 samples.
pub fn quadrature_halving_change() -> f64 {
    let (near, far) = (1.4, 4.6);
    let a = composite(&smooth_ray(64, near, far)).unwrap();
    let b = composite(&smooth_ray(128, near, far)).unwrap();
    (0..3).map(|k| (a.color[k] - b.color[k]).abs()).fold(0.0, f64::max)
}

/// Largest deviation of `sds_pixel_grad` from `w(t)·√(ᾱ/(1−ᾱ))·(I − T)`
/// over random draws, and the largest magnitude at `I = T`.
pub fn sds_identity(draws: usize, seed: u64) -> (f64, f64) {
    let schedule = NoiseSchedule::default();
    let (w, h) = (6, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views = 3;
    let targets: Vec<Image> = (0..views)
        .map(|_| Image {
            width: w,
            height: h,
            data: (0..3 * w * h).map(|_| rng.random::<f64>()).collect(),
        })
        .collect();
    let denoiser = ToyDeltaDenoiser::new(schedule.clone(), "p", targets.clone());
    let (mut worst, mut worst_zero) = (0.0f64, 0.0f64);
    for k in 0..draws {
        let view = k % views;
        let t = rng.random_range(1..=schedule.t_max);
        let img = Image {
            width: w,
            height: h,
            data: (0..3 * w * h).map(|_| rng.random_range(-0.5..1.5)).collect(),
        };
        let eps = Image::noise(w, h, &mut rng);
        let weighting = if k % 2 == 0 { Weighting::Constant } else { Weighting::OneMinusAlphaBar };
        let cond = Conditioning { prompt: "p", view };
        let g = sds_pixel_grad(&img, &cond, t, &eps, &denoiser, &schedule, weighting, ForwardProcess::Standard).unwrap();
        let ab = schedule.alpha_bar(t).unwrap();
        let scale = weighting.weight(&schedule, t).unwrap() * (ab / (1.0 - ab)).sqrt();
        for ((gv, x), y) in g.data.iter().zip(&img.data).zip(&targets[view].data) {
            worst = worst.max((gv - scale * (x - y)).abs());
        }
        let at_target =
            sds_pixel_grad(&targets[view], &cond, t, &eps, &denoiser, &schedule, weighting, ForwardProcess::Standard)
                .unwrap();
        worst_zero = at_target.data.iter().fold(worst_zero, |m, v| m.max(v.abs()));
    }
    (worst, worst_zero)
}
