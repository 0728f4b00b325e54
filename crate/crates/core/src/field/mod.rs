//! The radiance field `(x, d) → (σ, c, f)`.
//!
//! A hash-grid encoding feeds a density head whose first output is the raw
//! density and whose remaining outputs form a geometry code. The color head
//! reads the geometry code plus a sinusoidal direction encoding; the feature
//! head reads the geometry code only, so features cannot depend on `d`.
//! All parameters live in one flat vector so optimizers and checkpoints can
//! treat them uniformly.

mod adam;
mod checkpoint;
pub mod hashgrid;
pub mod mlp;

pub use adam::Adam;
pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use hashgrid::HashGridConfig;
pub use mlp::{Activation, Dense2, SharedInput};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{sigmoid, softplus, Real, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub grid: HashGridConfig,
    pub hidden_width: usize,
    pub geo_dim: usize,
    pub dir_freqs: usize,
    pub feature_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            grid: HashGridConfig::default(),
            hidden_width: 64,
            geo_dim: 15,
            dir_freqs: 4,
            feature_dim: crate::dataset::DEFAULT_FEATURE_DIM,
            activation: Activation::Relu,
        }
    }
}

impl FieldConfig {
    /// The reduced field used for finite-difference gradient checks.
    pub fn miniature(feature_dim: usize) -> Self {
        Self {
            grid: HashGridConfig {
                n_levels: 2,
                base_resolution: 4,
                table_size: 1 << 8,
                ..HashGridConfig::default()
            },
            hidden_width: 16,
            feature_dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.hidden_width == 0 || self.feature_dim == 0 {
            return Err(Error::config("head widths must be positive"));
        }
        Ok(())
    }

    pub fn dir_dim(&self) -> usize {
        self.dir_freqs * 6
    }
}

/// Parameter layout of a field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub grid: usize,
    pub density: Dense2,
    pub color: Dense2,
    pub feature: Dense2,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &FieldConfig) -> Self {
        let grid_len = cfg.grid.param_count();
        let (density, off) = Dense2::at(grid_len, cfg.grid.output_dim(), cfg.hidden_width, 1 + cfg.geo_dim);
        let (color, off) = Dense2::at(off, cfg.geo_dim + cfg.dir_dim(), cfg.hidden_width, 3);
        let (feature, off) = Dense2::at(off, cfg.geo_dim, cfg.hidden_width, cfg.feature_dim);
        Self {
            grid: grid_len,
            density,
            color,
            feature,
            total: off,
        }
    }
}

/// Which optional heads to evaluate. Density is always evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Heads {
    pub color: bool,
    pub feature: bool,
}

impl Heads {
    pub const ALL: Heads = Heads {
        color: true,
        feature: true,
    };
    pub const COLOR: Heads = Heads {
        color: true,
        feature: false,
    };
    pub const FEATURE: Heads = Heads {
        color: false,
        feature: true,
    };
}

/// Sinusoidal direction encoding: `sin(2^k d), cos(2^k d)` for each frequency.
pub fn encode_direction<T: Real>(d: [f64; 3], freqs: usize, out: &mut [T]) {
    let mut i = 0;
    for k in 0..freqs {
        let s = (1u64 << k) as f64;
        for &c in &d {
            out[i] = T::lit((s * c).sin());
            out[i + 1] = T::lit((s * c).cos());
            i += 2;
        }
    }
}

/// Recorded density pass over a batch of positions.
#[derive(Clone, Debug, Default)]
pub struct DensityTape<T> {
    pub positions: Vec<[f64; 3]>,
    pub encoding: Vec<T>,
    pub hidden: Vec<T>,
    /// Raw density-head outputs: `[σ_raw, geo...]` per row.
    pub raw: Vec<T>,
    pub sigma: Vec<T>,
}

impl<T: Real> DensityTape<T> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Recorded head pass over a subset of the density rows.
#[derive(Clone, Debug, Default)]
pub struct HeadTape<T> {
    /// Density rows the heads were evaluated for.
    pub rows: Vec<usize>,
    /// Geometry code per row, the input of both heads.
    pub geo_input: Vec<T>,
    /// Direction encodings, one per run of rows sharing a direction.
    pub dir_enc: Vec<T>,
    pub dir_spans: Vec<std::ops::Range<usize>>,
    pub color_hidden: Vec<T>,
    /// Post-sigmoid RGB per row.
    pub color: Vec<T>,
    pub feature_hidden: Vec<T>,
    pub feature: Vec<T>,
    pub heads: Option<Heads>,
}

/// Flat gradient accumulator shaped like the parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBuffer<T> {
    pub data: Vec<T>,
}

impl<T: Real> GradientBuffer<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            data: vec![T::zero(); n],
        }
    }

    pub fn zero(&mut self) {
        self.data.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn add(&mut self, other: &GradientBuffer<T>) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt()
    }

    /// Fails with the first non-finite entry.
    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|g| !g.is_finite()) {
            None => Ok(()),
            Some(index) => Err(Error::NumericFault {
                message: "non-finite gradient".into(),
                index,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadianceField<T> {
    pub config: FieldConfig,
    pub layout: Layout,
    pub params: Vec<T>,
}

/// Point evaluation result.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSample<T> {
    pub sigma: T,
    pub color: [T; 3],
    pub feature: Vec<T>,
}

impl<T: Real> RadianceField<T> {
    /// Grid entries uniform in ±1e-4, head weights Xavier-uniform, zero biases.
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![T::zero(); layout.total];
        for p in params[..layout.grid].iter_mut() {
            // Values are f32-representable so checkpoints round-trip exactly.
            *p = T::lit(rng.random_range(-1e-4f32..1e-4f32) as f64);
        }
        for head in [layout.density, layout.color, layout.feature] {
            xavier(&mut params[head.w1..head.b1], head.input, head.hidden, &mut rng);
            xavier(&mut params[head.w2..head.b2], head.hidden, head.output, &mut rng);
        }
        Ok(Self { config, layout, params })
    }

    pub fn from_params(config: FieldConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::mismatch("parameter count", layout.total, params.len()));
        }
        Ok(Self { config, layout, params })
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn grad_buffer(&self) -> GradientBuffer<T> {
        GradientBuffer::zeros(self.layout.total)
    }

    pub fn cast<U: Real>(&self) -> RadianceField<U> {
        RadianceField {
            config: self.config.clone(),
            layout: self.layout,
            params: self.params.iter().map(|p| U::lit(p.as_f64())).collect(),
        }
    }

    pub fn hash_encode(&self, x: Vec3) -> Vec<T> {
        self.config.grid.encode(&self.params[..self.layout.grid], x)
    }

    /// Density head over `positions`.
    pub fn density_forward(&self, positions: Vec<[f64; 3]>) -> DensityTape<T> {
        let n = positions.len();
        let enc_dim = self.config.grid.output_dim();
        let mut encoding = vec![T::zero(); n * enc_dim];
        let table = &self.params[..self.layout.grid];
        let scales = self.config.grid.level_scales();
        for (x, out) in positions.iter().zip(encoding.chunks_exact_mut(enc_dim)) {
            self.config.grid.encode_scaled(table, *x, &scales, out);
        }
        let mut hidden = Vec::new();
        let mut raw = Vec::new();
        self.layout
            .density
            .forward(&self.params, self.config.activation, &encoding, n, None, &mut hidden, &mut raw);
        let stride = 1 + self.config.geo_dim;
        let sigma = raw.chunks_exact(stride).map(|r| softplus(r[0])).collect();
        DensityTape {
            positions,
            encoding,
            hidden,
            raw,
            sigma,
        }
    }

    /// Color and/or feature heads for the density rows in `rows`, with
    /// `dirs[i]` the unit view direction for `rows[i]`.
    pub fn heads_forward(&self, dens: &DensityTape<T>, rows: Vec<usize>, dirs: &[[f64; 3]], heads: Heads) -> HeadTape<T> {
        let cfg = &self.config;
        let geo = cfg.geo_dim;
        let stride = 1 + geo;
        let m = rows.len();
        let mut tape = HeadTape {
            heads: Some(heads),
            ..HeadTape::default()
        };
        let mut geo_input = vec![T::zero(); m * geo];
        for (i, &r) in rows.iter().enumerate() {
            geo_input[i * geo..(i + 1) * geo].copy_from_slice(&dens.raw[r * stride + 1..(r + 1) * stride]);
        }
        if heads.color {
            let dd = cfg.dir_dim();
            let mut dir_enc = Vec::new();
            let mut spans: Vec<std::ops::Range<usize>> = Vec::new();
            let mut enc = vec![T::zero(); dd];
            for (i, d) in dirs.iter().enumerate().take(m) {
                if i > 0 && dirs[i - 1] == *d {
                    spans.last_mut().unwrap().end = i + 1;
                    continue;
                }
                encode_direction(*d, cfg.dir_freqs, &mut enc);
                dir_enc.extend_from_slice(&enc);
                spans.push(i..i + 1);
            }
            let shared = SharedInput {
                data: &dir_enc,
                width: dd,
                spans: &spans,
            };
            let mut hidden = Vec::new();
            let mut out = Vec::new();
            self.layout
                .color
                .forward(&self.params, cfg.activation, &geo_input, m, Some(shared), &mut hidden, &mut out);
            for v in out.iter_mut() {
                *v = sigmoid(*v);
            }
            tape.dir_enc = dir_enc;
            tape.dir_spans = spans;
            tape.color_hidden = hidden;
            tape.color = out;
        }
        if heads.feature {
            let mut hidden = Vec::new();
            let mut out = Vec::new();
            self.layout
                .feature
                .forward(&self.params, cfg.activation, &geo_input, m, None, &mut hidden, &mut out);
            tape.feature_hidden = hidden;
            tape.feature = out;
        }
        tape.geo_input = geo_input;
        tape.rows = rows;
        tape
    }

    /// Accumulates `∂L/∂θ` given adjoints of σ (one per density row), color
    /// (three per head row) and feature (`D` per head row).
    pub fn backward(
        &self,
        dens: &DensityTape<T>,
        heads: &HeadTape<T>,
        d_sigma: &[T],
        d_color: Option<&[T]>,
        d_feature: Option<&[T]>,
        grads: &mut GradientBuffer<T>,
    ) {
        let cfg = &self.config;
        let geo = cfg.geo_dim;
        let stride = 1 + geo;
        let n = dens.len();
        let m = heads.rows.len();
        let g = &mut grads.data;
        let mut d_raw = vec![T::zero(); n * stride];
        for i in 0..n {
            // softplus'(x) = sigmoid(x)
            d_raw[i * stride] = d_sigma[i] * sigmoid(dens.raw[i * stride]);
        }
        if let Some(dc) = d_color {
            let mut d_out = vec![T::zero(); m * 3];
            for ((d, &c), &up) in d_out.iter_mut().zip(&heads.color).zip(dc) {
                *d = up * c * (T::one() - c);
            }
            let dx = self
                .layout
                .color
                .backward(
                    &self.params,
                    g,
                    cfg.activation,
                    &heads.geo_input,
                    Some(SharedInput {
                        data: &heads.dir_enc,
                        width: cfg.dir_dim(),
                        spans: &heads.dir_spans,
                    }),
                    &heads.color_hidden,
                    &d_out,
                    m,
                    true,
                )
                .unwrap();
            for (i, &r) in heads.rows.iter().enumerate() {
                for k in 0..geo {
                    d_raw[r * stride + 1 + k] += dx[i * geo + k];
                }
            }
        }
        if let Some(df) = d_feature {
            let dx = self
                .layout
                .feature
                .backward(
                    &self.params,
                    g,
                    cfg.activation,
                    &heads.geo_input,
                    None,
                    &heads.feature_hidden,
                    df,
                    m,
                    true,
                )
                .unwrap();
            for (i, &r) in heads.rows.iter().enumerate() {
                for k in 0..geo {
                    d_raw[r * stride + 1 + k] += dx[i * geo + k];
                }
            }
        }
        let d_enc = self
            .layout
            .density
            .backward(
                &self.params,
                g,
                cfg.activation,
                &dens.encoding,
                None,
                &dens.hidden,
                &d_raw,
                n,
                true,
            )
            .unwrap();
        let enc_dim = cfg.grid.output_dim();
        let (grid_grad, _) = g.split_at_mut(self.layout.grid);
        let scales = cfg.grid.level_scales();
        for (x, de) in dens.positions.iter().zip(d_enc.chunks_exact(enc_dim)) {
            cfg.grid.backward_scaled(*x, de, &scales, grid_grad);
        }
    }

    /// Evaluates one point. `d` must be a unit vector.
    pub fn eval(&self, x: Vec3, d: Vec3) -> Result<FieldSample<T>> {
        let mut out = self.eval_batch(&[x], &[d])?;
        Ok(out.pop().unwrap())
    }

    /// Evaluates many points with all heads.
    pub fn eval_batch(&self, xs: &[Vec3], ds: &[Vec3]) -> Result<Vec<FieldSample<T>>> {
        if xs.len() != ds.len() {
            return Err(Error::contract("position and direction counts differ"));
        }
        for d in ds {
            let len = crate::math::norm(*d);
            if (len - 1.0).abs() > 1e-6 {
                return Err(Error::contract(format!("direction norm {len} is not 1")));
            }
        }
        let dens = self.density_forward(xs.to_vec());
        let rows: Vec<usize> = (0..xs.len()).collect();
        let heads = self.heads_forward(&dens, rows, ds, Heads::ALL);
        let fd = self.config.feature_dim;
        Ok((0..xs.len())
            .map(|i| FieldSample {
                sigma: dens.sigma[i],
                color: [heads.color[3 * i], heads.color[3 * i + 1], heads.color[3 * i + 2]],
                feature: heads.feature[i * fd..(i + 1) * fd].to_vec(),
            })
            .collect())
    }
}

fn xavier<T: Real>(w: &mut [T], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    for v in w.iter_mut() {
        *v = T::lit(rng.random_range(-bound..bound) as f64);
    }
}
