//! Ray generation, stratified sampling and differentiable compositing.
//!
//! Per ray, with `α_i = 1 − exp(−σ_i δ_i)` and `T_i = exp(−Σ_{j<i} σ_j δ_j)`,
//! the weights `w_i = T_i α_i` are shared by every composited quantity:
//! color `Σ w_i c_i`, feature `Σ w_i f_i`, and depth
//! `Σ w_i t_i / t_f + (1 − Σ w_i)`, where residual transmittance terminates
//! at the far plane.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::Camera;
use crate::error::{Error, Result};
use crate::field::{DensityTape, GradientBuffer, HeadTape, Heads, RadianceField};
use crate::math::{Real, Vec3};
use crate::occupancy::OccupancyGrid;
use crate::planes::Plane;

pub const DEFAULT_SAMPLES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_near: f64,
    pub t_far: f64,
    pub pixel: (usize, usize),
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        [
            self.origin[0] + t * self.dir[0],
            self.origin[1] + t * self.dir[1],
            self.origin[2] + t * self.dir[2],
        ]
    }
}

/// Every pixel of a camera in row-major order.
pub fn all_pixels(camera: &Camera) -> Vec<(usize, usize)> {
    (0..camera.height)
        .flat_map(|r| (0..camera.width).map(move |c| (r, c)))
        .collect()
}

/// Rays through the centers of `pixels` (row, col).
pub fn gen_rays(camera: &Camera, pixels: &[(usize, usize)]) -> Result<Vec<Ray>> {
    let origin = camera.origin();
    pixels
        .iter()
        .map(|&(row, col)| {
            if row >= camera.height || col >= camera.width {
                return Err(Error::contract(format!(
                    "pixel ({row}, {col}) outside {}x{} image",
                    camera.width, camera.height
                )));
            }
            Ok(Ray {
                origin,
                dir: camera.direction_through(row as f64 + 0.5, col as f64 + 0.5),
                t_near: camera.near,
                t_far: camera.far,
                pixel: (row, col),
            })
        })
        .collect()
}

/// One `t` per equal bin of `[t_near, t_far]`: the bin center, or uniform in
/// the bin when an RNG is supplied.
pub fn sample_stratified<R: Rng>(ray: &Ray, n_samples: usize, rng: Option<&mut R>) -> Vec<f64> {
    let mut ts = Vec::with_capacity(n_samples);
    stratified_into(ray.t_near, ray.t_far, n_samples, rng, &mut ts);
    ts
}

fn stratified_into<R: Rng>(t_near: f64, t_far: f64, n: usize, mut rng: Option<&mut R>, out: &mut Vec<f64>) {
    let width = (t_far - t_near) / n as f64;
    for i in 0..n {
        let u = match rng.as_deref_mut() {
            Some(r) => r.random::<f64>(),
            None => 0.5,
        };
        out.push(t_near + width * (i as f64 + u));
    }
}

/// Samples along one ray ready for compositing.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySampleBatch<T> {
    pub t_far: T,
    pub t: Vec<T>,
    pub delta: Vec<T>,
    pub sigma: Vec<T>,
    /// `n × 3`.
    pub color: Vec<T>,
    /// `n × feature_dim`.
    pub feature: Vec<T>,
    pub feature_dim: usize,
}

impl<T: Real> RaySampleBatch<T> {
    /// Builds a batch from ascending sample positions; `δ_i = t_{i+1} − t_i`
    /// and the last segment runs to `t_far`.
    pub fn from_positions(t: Vec<T>, t_far: T, sigma: Vec<T>, color: Vec<T>, feature: Vec<T>, feature_dim: usize) -> Self {
        let delta = deltas(&t, t_far);
        Self {
            t_far,
            t,
            delta,
            sigma,
            color,
            feature,
            feature_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.delta.len() != n || self.sigma.len() != n || self.color.len() != 3 * n {
            return Err(Error::contract("sample arrays have inconsistent lengths"));
        }
        if self.feature.len() != self.feature_dim * n {
            return Err(Error::contract("feature array has wrong length"));
        }
        if let Some(i) = self.sigma.iter().position(|s| !(*s >= T::zero())) {
            return Err(Error::contract(format!("negative density at sample {i}")));
        }
        if let Some(i) = self.delta.iter().position(|d| !(*d >= T::zero())) {
            return Err(Error::contract(format!("negative segment length at sample {i}")));
        }
        Ok(())
    }
}

fn deltas<T: Real>(t: &[T], t_far: T) -> Vec<T> {
    (0..t.len())
        .map(|i| if i + 1 < t.len() { t[i + 1] - t[i] } else { t_far - t[i] })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedPixel<T> {
    pub color: [T; 3],
    pub feature: Vec<T>,
    /// Far-normalized depth.
    pub depth: T,
    pub opacity: T,
    pub weights: Vec<T>,
}

/// Upstream gradient of a loss with respect to one rendered pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelAdjoint<T> {
    pub color: [T; 3],
    pub feature: Vec<T>,
    pub depth: T,
    pub opacity: T,
}

/// Gradient with respect to the per-sample inputs of [`composite`].
#[derive(Clone, Debug, PartialEq)]
pub struct SampleAdjoint<T> {
    pub sigma: Vec<T>,
    pub color: Vec<T>,
    pub feature: Vec<T>,
}

/// Transmittance before each sample (`T_i`) and after it (`T_{i+1}`), and
/// the weights, for one ray.
fn weights_into<T: Real>(sigma: &[T], delta: &[T], trans: &mut [T], trans_after: &mut [T], w: &mut [T]) {
    let mut tau = T::zero();
    for i in 0..sigma.len() {
        let sd = sigma[i] * delta[i];
        let ti = (-tau).exp();
        tau += sd;
        let alpha = -(-sd).exp_m1();
        trans[i] = ti;
        trans_after[i] = (-tau).exp();
        w[i] = ti * alpha;
    }
}

pub fn composite<T: Real>(samples: &RaySampleBatch<T>) -> Result<RenderedPixel<T>> {
    samples.validate()?;
    let n = samples.len();
    let fd = samples.feature_dim;
    let mut trans = vec![T::zero(); n];
    let mut after = vec![T::zero(); n];
    let mut w = vec![T::zero(); n];
    weights_into(&samples.sigma, &samples.delta, &mut trans, &mut after, &mut w);
    let mut color = [T::zero(); 3];
    let mut feature = vec![T::zero(); fd];
    let mut depth = T::zero();
    let mut opacity = T::zero();
    for i in 0..n {
        for k in 0..3 {
            color[k] += w[i] * samples.color[3 * i + k];
        }
        for k in 0..fd {
            feature[k] += w[i] * samples.feature[fd * i + k];
        }
        depth += w[i] * samples.t[i] / samples.t_far;
        opacity += w[i];
    }
    depth += T::one() - opacity;
    Ok(RenderedPixel {
        color,
        feature,
        depth,
        opacity,
        weights: w,
    })
}

/// Chain rule through [`composite`] for one ray.
pub fn composite_backward<T: Real>(samples: &RaySampleBatch<T>, adjoint: &PixelAdjoint<T>) -> Result<SampleAdjoint<T>> {
    samples.validate()?;
    let n = samples.len();
    let fd = samples.feature_dim;
    let mut trans = vec![T::zero(); n];
    let mut after = vec![T::zero(); n];
    let mut w = vec![T::zero(); n];
    weights_into(&samples.sigma, &samples.delta, &mut trans, &mut after, &mut w);
    let s: Vec<T> = (0..n)
        .map(|i| {
            let mut v = adjoint.opacity + adjoint.depth * (samples.t[i] / samples.t_far - T::one());
            for k in 0..3 {
                v += adjoint.color[k] * samples.color[3 * i + k];
            }
            for k in 0..fd.min(adjoint.feature.len()) {
                v += adjoint.feature[k] * samples.feature[fd * i + k];
            }
            v
        })
        .collect();
    let mut d_sigma = vec![T::zero(); n];
    sigma_adjoint(&s, &w, &after, &samples.delta, &mut d_sigma);
    let mut d_color = vec![T::zero(); 3 * n];
    let mut d_feature = vec![T::zero(); fd * n];
    for i in 0..n {
        for k in 0..3 {
            d_color[3 * i + k] = w[i] * adjoint.color[k];
        }
        for k in 0..fd.min(adjoint.feature.len()) {
            d_feature[fd * i + k] = w[i] * adjoint.feature[k];
        }
    }
    Ok(SampleAdjoint {
        sigma: d_sigma,
        color: d_color,
        feature: d_feature,
    })
}

/// `∂(Σ w_i s_i)/∂σ_k = δ_k (T_{k+1} s_k − Σ_{i>k} w_i s_i)`.
fn sigma_adjoint<T: Real>(s: &[T], w: &[T], trans_after: &[T], delta: &[T], out: &mut [T]) {
    let mut suffix = T::zero();
    for k in (0..s.len()).rev() {
        out[k] = delta[k] * (trans_after[k] * s[k] - suffix);
        suffix += w[k] * s[k];
    }
}

/// Quadrature and batching controls for field rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOptions {
    pub n_samples: usize,
    /// Seed for jittered stratification; `None` uses bin centers.
    pub jitter: Option<u64>,
    /// Samples whose weight does not exceed this skip the color and feature
    /// heads and contribute zero color/feature. Non-positive evaluates all.
    pub weight_cutoff: f64,
    pub chunk_rays: usize,
    /// Samples in unoccupied cells get zero density without evaluating the
    /// field.
    pub occupancy: Option<Arc<OccupancyGrid>>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            n_samples: DEFAULT_SAMPLES,
            jitter: None,
            weight_cutoff: 0.0,
            chunk_rays: 256,
            occupancy: None,
        }
    }
}

impl RenderOptions {
    /// Settings used inside optimization loops.
    pub fn training(seed: u64) -> Self {
        Self {
            jitter: Some(seed),
            weight_cutoff: 1e-4,
            ..Self::default()
        }
    }
}

/// Composited planes for a batch of rays, flattened ray-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput<T> {
    pub n_rays: usize,
    pub feature_dim: usize,
    /// `n × 3`, empty unless the color head ran.
    pub color: Vec<T>,
    /// `n × feature_dim`, empty unless the feature head ran.
    pub feature: Vec<T>,
    pub depth: Vec<T>,
    pub opacity: Vec<T>,
}

impl<T: Real> RenderOutput<T> {
    fn empty(feature_dim: usize) -> Self {
        Self {
            n_rays: 0,
            feature_dim,
            color: Vec::new(),
            feature: Vec::new(),
            depth: Vec::new(),
            opacity: Vec::new(),
        }
    }

    fn append(&mut self, other: RenderOutput<T>) {
        self.n_rays += other.n_rays;
        self.color.extend(other.color);
        self.feature.extend(other.feature);
        self.depth.extend(other.depth);
        self.opacity.extend(other.opacity);
    }
}

/// Loss gradients with respect to a batch of rendered rays. Absent planes
/// are treated as zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PixelAdjoints<T> {
    pub color: Option<Vec<T>>,
    pub feature: Option<Vec<T>>,
    pub depth: Option<Vec<T>>,
    pub opacity: Option<Vec<T>>,
}

impl<T: Real> PixelAdjoints<T> {
    fn slice(&self, range: std::ops::Range<usize>, fd: usize) -> PixelAdjoints<T> {
        let cut = |v: &Option<Vec<T>>, k: usize| v.as_ref().map(|v| v[range.start * k..range.end * k].to_vec());
        PixelAdjoints {
            color: cut(&self.color, 3),
            feature: cut(&self.feature, fd),
            depth: cut(&self.depth, 1),
            opacity: cut(&self.opacity, 1),
        }
    }
}

/// Everything recorded while rendering one chunk of rays.
pub struct ChunkTape<T> {
    n_rays: usize,
    n_samples: usize,
    t: Vec<T>,
    t_far: Vec<T>,
    delta: Vec<T>,
    trans_after: Vec<T>,
    weights: Vec<T>,
    /// Head-row index per sample, or `usize::MAX` when skipped.
    head_row: Vec<usize>,
    /// Density-row index per sample, or `usize::MAX` when unoccupied.
    density_row: Vec<usize>,
    density: DensityTape<T>,
    heads: HeadTape<T>,
    evaluated: Heads,
}

fn chunk_seed(seed: u64, chunk: usize) -> u64 {
    // splitmix64 finalizer over (seed, chunk)
    let mut z = seed ^ (chunk as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders one chunk and records the tape needed for [`backward_chunk`].
pub fn forward_chunk<T: Real>(
    field: &RadianceField<T>,
    rays: &[Ray],
    opts: &RenderOptions,
    heads: Heads,
    chunk_index: usize,
) -> (RenderOutput<T>, ChunkTape<T>) {
    let s = opts.n_samples;
    let nr = rays.len();
    let fd = field.config.feature_dim;
    let mut rng = opts.jitter.map(|seed| ChaCha8Rng::seed_from_u64(chunk_seed(seed, chunk_index)));
    let mut t64 = Vec::with_capacity(nr * s);
    for ray in rays {
        stratified_into(ray.t_near, ray.t_far, s, rng.as_mut(), &mut t64);
    }
    let positions: Vec<[f64; 3]> = t64
        .iter()
        .enumerate()
        .map(|(i, &t)| rays[i / s].at(t))
        .collect();
    let t: Vec<T> = t64.iter().map(|&v| T::lit(v)).collect();
    let t_far: Vec<T> = rays.iter().map(|r| T::lit(r.t_far)).collect();
    let mut delta = vec![T::zero(); nr * s];
    for r in 0..nr {
        let d = deltas(&t[r * s..(r + 1) * s], t_far[r]);
        delta[r * s..(r + 1) * s].copy_from_slice(&d);
    }
    // Density rows are the evaluated samples; `density_row` maps back.
    let (density, density_row) = match &opts.occupancy {
        Some(grid) => {
            let mut density_row = vec![usize::MAX; nr * s];
            let mut live = Vec::new();
            for (i, p) in positions.iter().enumerate() {
                if grid.is_occupied(*p) {
                    density_row[i] = live.len();
                    live.push(*p);
                }
            }
            (field.density_forward(live), density_row)
        }
        None => (field.density_forward(positions), (0..nr * s).collect()),
    };
    let sigma: Vec<T> = density_row
        .iter()
        .map(|&d| if d == usize::MAX { T::zero() } else { density.sigma[d] })
        .collect();
    let mut trans = vec![T::zero(); nr * s];
    let mut trans_after = vec![T::zero(); nr * s];
    let mut weights = vec![T::zero(); nr * s];
    for r in 0..nr {
        let span = r * s..(r + 1) * s;
        weights_into(
            &sigma[span.clone()],
            &delta[span.clone()],
            &mut trans[span.clone()],
            &mut trans_after[span.clone()],
            &mut weights[span],
        );
    }
    let need_heads = heads.color || heads.feature;
    let cutoff = T::lit(opts.weight_cutoff);
    let mut head_row = vec![usize::MAX; nr * s];
    let mut rows = Vec::new();
    let mut dirs = Vec::new();
    if need_heads {
        for i in 0..nr * s {
            if density_row[i] != usize::MAX && (opts.weight_cutoff <= 0.0 || weights[i] > cutoff) {
                head_row[i] = rows.len();
                rows.push(density_row[i]);
                dirs.push(rays[i / s].dir);
            }
        }
    }
    let head_tape = if need_heads {
        field.heads_forward(&density, rows, &dirs, heads)
    } else {
        HeadTape::default()
    };
    let mut out = RenderOutput {
        n_rays: nr,
        feature_dim: fd,
        color: if heads.color { vec![T::zero(); nr * 3] } else { Vec::new() },
        feature: if heads.feature { vec![T::zero(); nr * fd] } else { Vec::new() },
        depth: vec![T::zero(); nr],
        opacity: vec![T::zero(); nr],
    };
    for r in 0..nr {
        let mut depth = T::zero();
        let mut opacity = T::zero();
        for i in r * s..(r + 1) * s {
            let w = weights[i];
            depth += w * t[i] / t_far[r];
            opacity += w;
            let hr = head_row[i];
            if hr == usize::MAX {
                continue;
            }
            if heads.color {
                for k in 0..3 {
                    out.color[3 * r + k] += w * head_tape.color[3 * hr + k];
                }
            }
            if heads.feature {
                for k in 0..fd {
                    out.feature[fd * r + k] += w * head_tape.feature[fd * hr + k];
                }
            }
        }
        out.depth[r] = depth + (T::one() - opacity);
        out.opacity[r] = opacity;
    }
    let tape = ChunkTape {
        n_rays: nr,
        n_samples: s,
        t,
        t_far,
        delta,
        trans_after,
        weights,
        head_row,
        density_row,
        density,
        heads: head_tape,
        evaluated: heads,
    };
    (out, tape)
}

/// Accumulates `∂L/∂θ` for one recorded chunk.
pub fn backward_chunk<T: Real>(
    field: &RadianceField<T>,
    tape: &ChunkTape<T>,
    adjoints: &PixelAdjoints<T>,
    grads: &mut GradientBuffer<T>,
) {
    let (nr, s) = (tape.n_rays, tape.n_samples);
    let fd = field.config.feature_dim;
    let m = tape.heads.rows.len();
    let gc = adjoints.color.as_deref().filter(|_| tape.evaluated.color);
    let gf = adjoints.feature.as_deref().filter(|_| tape.evaluated.feature);
    let mut d_color = gc.map(|_| vec![T::zero(); m * 3]);
    let mut d_feature = gf.map(|_| vec![T::zero(); m * fd]);
    let mut d_sigma = vec![T::zero(); nr * s];
    let mut sv = vec![T::zero(); s];
    for r in 0..nr {
        let g_depth = adjoints.depth.as_ref().map_or(T::zero(), |d| d[r]);
        let g_opacity = adjoints.opacity.as_ref().map_or(T::zero(), |o| o[r]);
        for j in 0..s {
            let i = r * s + j;
            let mut v = g_opacity + g_depth * (tape.t[i] / tape.t_far[r] - T::one());
            let hr = tape.head_row[i];
            if hr != usize::MAX {
                let w = tape.weights[i];
                if let (Some(gc), Some(dc)) = (gc, d_color.as_mut()) {
                    for k in 0..3 {
                        v += gc[3 * r + k] * tape.heads.color[3 * hr + k];
                        dc[3 * hr + k] = w * gc[3 * r + k];
                    }
                }
                if let (Some(gf), Some(df)) = (gf, d_feature.as_mut()) {
                    for k in 0..fd {
                        v += gf[fd * r + k] * tape.heads.feature[fd * hr + k];
                        df[fd * hr + k] = w * gf[fd * r + k];
                    }
                }
            }
            sv[j] = v;
        }
        let span = r * s..(r + 1) * s;
        sigma_adjoint(
            &sv,
            &tape.weights[span.clone()],
            &tape.trans_after[span.clone()],
            &tape.delta[span.clone()],
            &mut d_sigma[span],
        );
    }
    if tape.density.len() != nr * s {
        let mut rows = vec![T::zero(); tape.density.len()];
        for (&d, &g) in tape.density_row.iter().zip(&d_sigma) {
            if d != usize::MAX {
                rows[d] = g;
            }
        }
        d_sigma = rows;
    }
    field.backward(
        &tape.density,
        &tape.heads,
        &d_sigma,
        d_color.as_deref(),
        d_feature.as_deref(),
        grads,
    );
}

fn chunk_ranges(n: usize, chunk: usize) -> Vec<std::ops::Range<usize>> {
    let chunk = chunk.max(1);
    (0..n.div_ceil(chunk)).map(|c| c * chunk..((c + 1) * chunk).min(n)).collect()
}

/// Renders rays in parallel chunks; output order matches `rays`.
pub fn render_rays<T: Real>(field: &RadianceField<T>, rays: &[Ray], opts: &RenderOptions, heads: Heads) -> RenderOutput<T> {
    let parts: Vec<RenderOutput<T>> = chunk_ranges(rays.len(), opts.chunk_rays)
        .into_par_iter()
        .enumerate()
        .map(|(c, range)| forward_chunk(field, &rays[range], opts, heads, c).0)
        .collect();
    let mut out = RenderOutput::empty(field.config.feature_dim);
    for p in parts {
        out.append(p);
    }
    out
}

/// Renders rays and backpropagates a per-ray-separable loss in one pass.
/// `adjoint` maps a chunk's ray range and its rendering to the pixel
/// adjoints plus the chunk's loss terms, which are returned summed in
/// chunk order. Chunk gradients are reduced in a fixed order, so results do
/// not depend on the thread count.
pub fn render_and_backprop<T, F>(
    field: &RadianceField<T>,
    rays: &[Ray],
    opts: &RenderOptions,
    heads: Heads,
    adjoint: F,
    grads: &mut GradientBuffer<T>,
) -> (RenderOutput<T>, Vec<f64>)
where
    T: Real,
    F: Fn(std::ops::Range<usize>, &RenderOutput<T>) -> (PixelAdjoints<T>, Vec<f64>) + Sync,
{
    let parts: Vec<(RenderOutput<T>, Vec<f64>, GradientBuffer<T>)> = chunk_ranges(rays.len(), opts.chunk_rays)
        .into_par_iter()
        .enumerate()
        .map(|(c, range)| {
            let (out, tape) = forward_chunk(field, &rays[range.clone()], opts, heads, c);
            let (adj, terms) = adjoint(range, &out);
            let mut g = field.grad_buffer();
            backward_chunk(field, &tape, &adj, &mut g);
            (out, terms, g)
        })
        .collect();
    let mut out = RenderOutput::empty(field.config.feature_dim);
    let mut totals: Vec<f64> = Vec::new();
    for (o, terms, g) in parts {
        out.append(o);
        if totals.len() < terms.len() {
            totals.resize(terms.len(), 0.0);
        }
        for (t, v) in totals.iter_mut().zip(terms) {
            *t += v;
        }
        grads.add(&g);
    }
    (out, totals)
}

/// Backpropagates precomputed pixel adjoints, re-rendering each chunk with
/// the same samples as [`render_rays`] under identical options.
pub fn backprop_rays<T: Real>(
    field: &RadianceField<T>,
    rays: &[Ray],
    opts: &RenderOptions,
    heads: Heads,
    adjoints: &PixelAdjoints<T>,
    grads: &mut GradientBuffer<T>,
) {
    let fd = field.config.feature_dim;
    let parts: Vec<GradientBuffer<T>> = chunk_ranges(rays.len(), opts.chunk_rays)
        .into_par_iter()
        .enumerate()
        .map(|(c, range)| {
            let (_, tape) = forward_chunk(field, &rays[range.clone()], opts, heads, c);
            let mut g = field.grad_buffer();
            backward_chunk(field, &tape, &adjoints.slice(range, fd), &mut g);
            g
        })
        .collect();
    for g in parts {
        grads.add(&g);
    }
}

/// [`render_rays`] that also keeps every chunk's tape, so a loss that needs
/// the whole rendering before its adjoints exist can be backpropagated
/// with [`backprop_tapes`] without rendering twice.
pub fn render_rays_taped<T: Real>(
    field: &RadianceField<T>,
    rays: &[Ray],
    opts: &RenderOptions,
    heads: Heads,
) -> (RenderOutput<T>, Vec<ChunkTape<T>>) {
    let parts: Vec<(RenderOutput<T>, ChunkTape<T>)> = chunk_ranges(rays.len(), opts.chunk_rays)
        .into_par_iter()
        .enumerate()
        .map(|(c, range)| forward_chunk(field, &rays[range], opts, heads, c))
        .collect();
    let mut out = RenderOutput::empty(field.config.feature_dim);
    let mut tapes = Vec::with_capacity(parts.len());
    for (o, t) in parts {
        out.append(o);
        tapes.push(t);
    }
    (out, tapes)
}

/// Backpropagates pixel adjoints through tapes from [`render_rays_taped`].
pub fn backprop_tapes<T: Real>(
    field: &RadianceField<T>,
    tapes: &[ChunkTape<T>],
    adjoints: &PixelAdjoints<T>,
    grads: &mut GradientBuffer<T>,
) {
    let fd = field.config.feature_dim;
    let mut ranges = Vec::with_capacity(tapes.len());
    let mut start = 0;
    for t in tapes {
        ranges.push(start..start + t.n_rays);
        start += t.n_rays;
    }
    let parts: Vec<GradientBuffer<T>> = tapes
        .par_iter()
        .zip(ranges)
        .map(|(tape, range)| {
            let mut g = field.grad_buffer();
            backward_chunk(field, tape, &adjoints.slice(range, fd), &mut g);
            g
        })
        .collect();
    for g in parts {
        grads.add(&g);
    }
}

/// Which image planes [`render_view`] should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RenderHeads {
    pub color: bool,
    pub feature: bool,
    pub depth: bool,
    pub opacity: bool,
}

impl RenderHeads {
    pub const ALL: RenderHeads = RenderHeads {
        color: true,
        feature: true,
        depth: true,
        opacity: true,
    };
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ViewPlanes {
    pub color: Option<Plane>,
    pub feature: Option<Plane>,
    pub depth: Option<Plane>,
    pub opacity: Option<Plane>,
}

pub fn output_to_planes<T: Real>(out: &RenderOutput<T>, camera: &Camera, want: RenderHeads) -> ViewPlanes {
    let (w, h) = (camera.width, camera.height);
    let plane = |data: &[T], c: usize| Plane {
        width: w,
        height: h,
        channels: c,
        data: data.iter().map(|v| v.as_f64() as f32).collect(),
    };
    ViewPlanes {
        color: (want.color && !out.color.is_empty()).then(|| plane(&out.color, 3)),
        feature: (want.feature && !out.feature.is_empty()).then(|| plane(&out.feature, out.feature_dim)),
        depth: want.depth.then(|| plane(&out.depth, 1)),
        opacity: want.opacity.then(|| plane(&out.opacity, 1)),
    }
}

/// Renders the requested planes of a full view.
pub fn render_view<T: Real>(field: &RadianceField<T>, camera: &Camera, want: RenderHeads, opts: &RenderOptions) -> Result<ViewPlanes> {
    camera.validate()?;
    let rays = gen_rays(camera, &all_pixels(camera))?;
    let heads = Heads {
        color: want.color,
        feature: want.feature,
    };
    let out = render_rays(field, &rays, opts, heads);
    Ok(output_to_planes(&out, camera, want))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Orbit;

    fn single(sigma: Vec<f64>, t: Vec<f64>, t_far: f64) -> RaySampleBatch<f64> {
        let n = t.len();
        RaySampleBatch::from_positions(
            t,
            t_far,
            sigma,
            (0..3 * n).map(|i| 0.1 + 0.8 * ((i * 7 % 11) as f64 / 11.0)).collect(),
            (0..2 * n).map(|i| (i as f64 * 0.3).sin()).collect(),
            2,
        )
    }

    #[test]
    fn bin_centers_without_jitter() {
        let ray = Ray {
            origin: [0.0; 3],
            dir: [0.0, 0.0, -1.0],
            t_near: 0.0,
            t_far: 1.0,
            pixel: (0, 0),
        };
        let ts = sample_stratified::<ChaCha8Rng>(&ray, 4, None);
        assert_eq!(ts, vec![0.125, 0.375, 0.625, 0.875]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let jit = sample_stratified(&ray, 16, Some(&mut rng));
        for (i, t) in jit.iter().enumerate() {
            assert!(*t >= i as f64 / 16.0 && *t < (i + 1) as f64 / 16.0);
        }
        assert!(jit.windows(2).all(|w| w[0] < w[1]));
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(jit, sample_stratified(&ray, 16, Some(&mut rng2)));
    }

    #[test]
    fn opaque_single_sample() {
        let b = RaySampleBatch::<f64>::from_positions(vec![2.0], 2.5, vec![40.0], vec![0.2, 0.4, 0.6], vec![], 0);
        assert_eq!(b.delta, vec![0.5]);
        let px = composite(&b).unwrap();
        assert!(px.opacity > 1.0 - 1e-8);
        for k in 0..3 {
            assert!((px.color[k] - b.color[k]).abs() < 1e-8);
        }
        assert!((px.depth - 2.0 / 2.5).abs() < 1e-8);
    }

    #[test]
    fn empty_space() {
        let b = single(vec![0.0; 5], vec![1.0, 1.2, 1.4, 1.6, 1.8], 2.0);
        let px = composite(&b).unwrap();
        assert_eq!(px.color, [0.0; 3]);
        assert!(px.feature.iter().all(|&f| f == 0.0));
        assert_eq!(px.opacity, 0.0);
        assert_eq!(px.depth, 1.0);
    }

    #[test]
    fn negative_inputs_are_contract_violations() {
        let b = single(vec![1.0, -0.1], vec![1.0, 1.5], 2.0);
        assert!(matches!(composite(&b), Err(Error::Contract(_))));
        let b = single(vec![1.0, 1.0], vec![1.5, 1.0], 2.0);
        assert!(matches!(composite(&b), Err(Error::Contract(_))));
    }

    #[test]
    fn weights_sum_to_opacity() {
        let b = single(vec![0.3, 2.0, 0.0, 5.0, 1.0], vec![1.0, 1.2, 1.4, 1.6, 1.8], 2.0);
        let px = composite(&b).unwrap();
        let sum: f64 = px.weights.iter().sum();
        assert!((sum - px.opacity).abs() < 1e-15);
        assert!(px.opacity <= 1.0 + 1e-6);
        assert!(px.weights.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn composite_backward_matches_finite_differences() {
        let b = single(vec![0.3, 2.0, 0.1, 5.0, 1.0], vec![1.0, 1.2, 1.4, 1.6, 1.8], 2.0);
        let adj = PixelAdjoint {
            color: [0.7, -1.1, 0.4],
            feature: vec![0.5, -0.25],
            depth: 1.3,
            opacity: -0.6,
        };
        let scalar = |b: &RaySampleBatch<f64>| {
            let p = composite(b).unwrap();
            (0..3).map(|k| adj.color[k] * p.color[k]).sum::<f64>()
                + (0..2).map(|k| adj.feature[k] * p.feature[k]).sum::<f64>()
                + adj.depth * p.depth
                + adj.opacity * p.opacity
        };
        let g = composite_backward(&b, &adj).unwrap();
        let h = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * h);
            assert!((fd - analytic).abs() <= 1e-3 * fd.abs().max(1e-6), "fd {fd} vs {analytic}");
        };
        for i in 0..b.len() {
            let mut p = b.clone();
            p.sigma[i] += h;
            let mut m = b.clone();
            m.sigma[i] -= h;
            check(g.sigma[i], scalar(&p), scalar(&m));
            for k in 0..3 {
                let mut p = b.clone();
                p.color[3 * i + k] += h;
                let mut m = b.clone();
                m.color[3 * i + k] -= h;
                check(g.color[3 * i + k], scalar(&p), scalar(&m));
            }
            for k in 0..2 {
                let mut p = b.clone();
                p.feature[2 * i + k] += h;
                let mut m = b.clone();
                m.feature[2 * i + k] -= h;
                check(g.feature[2 * i + k], scalar(&p), scalar(&m));
            }
        }
    }

    #[test]
    fn principal_ray_follows_optical_axis() {
        let cam = crate::dataset::Camera::look_at([0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 9, 9, 40.0, 1.0, 5.0);
        let rays = gen_rays(&cam, &[(4, 4), (0, 0), (0, 8), (8, 0), (8, 8)]).unwrap();
        let axis = cam.axis(2);
        for k in 0..3 {
            assert!((rays[0].dir[k] + axis[k]).abs() < 1e-12);
        }
        // Corners mirror about the axis.
        assert!((rays[1].dir[0] + rays[2].dir[0]).abs() < 1e-12);
        assert!((rays[1].dir[1] - rays[2].dir[1]).abs() < 1e-12);
        assert!((rays[1].dir[1] + rays[3].dir[1]).abs() < 1e-12);
        assert!((rays[1].dir[0] + rays[4].dir[0]).abs() < 1e-12 && (rays[1].dir[1] + rays[4].dir[1]).abs() < 1e-12);
        assert!(gen_rays(&cam, &[(9, 0)]).is_err());
    }

    #[test]
    fn rays_reproject_to_pixel_centers() {
        let cam = Orbit::default().camera(123.0, 17);
        let rays = gen_rays(&cam, &all_pixels(&cam)).unwrap();
        for ray in rays {
            let (v, u, _) = cam.project(ray.at(2.0)).unwrap();
            assert!((v - (ray.pixel.0 as f64 + 0.5)).abs() < 1e-4);
            assert!((u - (ray.pixel.1 as f64 + 0.5)).abs() < 1e-4);
        }
    }
}
