//! Multi-resolution hash encoding.
//!
//! Each level is a virtual grid of `floor(base · scale^l)` cells per axis whose
//! vertices are hashed into a table of `table_size` entries with
//! `feats_per_level` features each. A point's encoding is the trilinear blend
//! of its cell's eight corner entries, concatenated over levels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Real, Vec3};

const PRIMES: [u64; 3] = [73_856_093, 19_349_663, 83_492_791];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub n_levels: usize,
    pub base_resolution: usize,
    pub per_level_scale: f64,
    pub table_size: usize,
    pub feats_per_level: usize,
    pub bounds_min: Vec3,
    pub bounds_max: Vec3,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            n_levels: 8,
            base_resolution: 16,
            per_level_scale: 1.5,
            table_size: 1 << 14,
            feats_per_level: 2,
            bounds_min: [-1.4; 3],
            bounds_max: [1.4; 3],
        }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.table_size.is_power_of_two() {
            return Err(Error::config(format!("table_size {} is not a power of two", self.table_size)));
        }
        if !(self.per_level_scale > 1.0) {
            return Err(Error::config("per_level_scale must exceed 1"));
        }
        if self.n_levels == 0 || self.feats_per_level == 0 || self.base_resolution == 0 {
            return Err(Error::config("hash grid needs at least one level, feature and cell"));
        }
        if (0..3).any(|a| !(self.bounds_max[a] > self.bounds_min[a])) {
            return Err(Error::config("hash grid bounds are empty"));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.n_levels * self.feats_per_level
    }

    pub fn param_count(&self) -> usize {
        self.n_levels * self.table_size * self.feats_per_level
    }

    pub fn resolution(&self, level: usize) -> usize {
        (self.base_resolution as f64 * self.per_level_scale.powi(level as i32)) as usize
    }

    /// Per-level resolutions as floats, for the batched paths.
    pub fn level_scales(&self) -> Vec<f64> {
        (0..self.n_levels).map(|l| self.resolution(l) as f64).collect()
    }

    /// Position normalized to the unit cube, clamped to the bounds.
    fn unit(&self, x: [f64; 3]) -> [f64; 3] {
        let mut u = [0.0; 3];
        for a in 0..3 {
            let span = self.bounds_max[a] - self.bounds_min[a];
            u[a] = ((x[a] - self.bounds_min[a]) / span).clamp(0.0, 1.0);
        }
        u
    }

    fn hash(&self, c: [u64; 3]) -> usize {
        let h = c[0].wrapping_mul(PRIMES[0]) ^ c[1].wrapping_mul(PRIMES[1]) ^ c[2].wrapping_mul(PRIMES[2]);
        (h as usize) & (self.table_size - 1)
    }

    /// Table rows (within the level) and trilinear weights of the eight
    /// corners surrounding `x` at `level`.
    pub fn corners(&self, x: [f64; 3], level: usize) -> [(usize, f64); 8] {
        self.corners_at(self.unit(x), self.resolution(level) as f64)
    }

    #[inline(always)]
    fn corners_at(&self, u: [f64; 3], res: f64) -> [(usize, f64); 8] {
        let mask = self.table_size - 1;
        let mut h = [[0u64; 2]; 3];
        let mut w = [[0.0f64; 2]; 3];
        for a in 0..3 {
            // u is clamped to [0, 1], so truncation is floor.
            let p = u[a] * res;
            let c = p as u64;
            let f = p - c as f64;
            h[a] = [c.wrapping_mul(PRIMES[a]), (c + 1).wrapping_mul(PRIMES[a])];
            w[a] = [1.0 - f, f];
        }
        let mut out = [(0usize, 0.0f64); 8];
        for (k, slot) in out.iter_mut().enumerate() {
            let (i, j, l) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
            *slot = (((h[0][i] ^ h[1][j] ^ h[2][l]) as usize) & mask, w[0][i] * w[1][j] * w[2][l]);
        }
        out
    }

    /// Index of feature `f` of table row `row` at `level` within the grid
    /// parameter block.
    pub fn param_index(&self, level: usize, row: usize, f: usize) -> usize {
        (level * self.table_size + row) * self.feats_per_level + f
    }

    /// Writes the encoding of `x` into `out` (length [`Self::output_dim`]).
    pub fn encode_into<T: Real>(&self, table: &[T], x: [f64; 3], out: &mut [T]) {
        self.encode_scaled(table, x, &self.level_scales(), out);
    }

    /// [`Self::encode_into`] with resolutions from [`Self::level_scales`].
    pub fn encode_scaled<T: Real>(&self, table: &[T], x: [f64; 3], scales: &[f64], out: &mut [T]) {
        let fpl = self.feats_per_level;
        let u = self.unit(x);
        for (level, &res) in scales.iter().enumerate() {
            let dst = &mut out[level * fpl..(level + 1) * fpl];
            dst.iter_mut().for_each(|v| *v = T::zero());
            for (row, w) in self.corners_at(u, res) {
                let w = T::lit(w);
                let base = self.param_index(level, row, 0);
                for f in 0..fpl {
                    dst[f] += w * table[base + f];
                }
            }
        }
    }

    pub fn encode<T: Real>(&self, table: &[T], x: [f64; 3]) -> Vec<T> {
        let mut out = vec![T::zero(); self.output_dim()];
        self.encode_into(table, x, &mut out);
        out
    }

    /// Scatters `d_enc` (adjoint of one encoding) into the table gradient.
    pub fn backward_into<T: Real>(&self, x: [f64; 3], d_enc: &[T], grad: &mut [T]) {
        self.backward_scaled(x, d_enc, &self.level_scales(), grad);
    }

    /// [`Self::backward_into`] with resolutions from [`Self::level_scales`].
    pub fn backward_scaled<T: Real>(&self, x: [f64; 3], d_enc: &[T], scales: &[f64], grad: &mut [T]) {
        let fpl = self.feats_per_level;
        let u = self.unit(x);
        for (level, &res) in scales.iter().enumerate() {
            let src = &d_enc[level * fpl..(level + 1) * fpl];
            if src.iter().all(|v| *v == T::zero()) {
                continue;
            }
            for (row, w) in self.corners_at(u, res) {
                let w = T::lit(w);
                let base = self.param_index(level, row, 0);
                for f in 0..fpl {
                    grad[base + f] += w * src[f];
                }
            }
        }
    }

    /// Spatial Jacobian `∂enc/∂x`, one `[∂/∂x, ∂/∂y, ∂/∂z]` per output.
    /// Zero along axes where `x` is clamped to the bounds.
    pub fn encode_jacobian<T: Real>(&self, table: &[T], x: [f64; 3]) -> Vec<[f64; 3]> {
        let fpl = self.feats_per_level;
        let u = self.unit(x);
        let mut jac = vec![[0.0; 3]; self.output_dim()];
        for level in 0..self.n_levels {
            let res = self.resolution(level) as f64;
            let mut cell = [0u64; 3];
            let mut frac = [0.0; 3];
            for a in 0..3 {
                let p = u[a] * res;
                cell[a] = p as u64;
                frac[a] = p - cell[a] as f64;
            }
            for k in 0..8 {
                let mut c = cell;
                let mut wa = [0.0; 3];
                let mut dwa = [0.0; 3];
                for a in 0..3 {
                    if (k >> a) & 1 == 1 {
                        c[a] += 1;
                        wa[a] = frac[a];
                        dwa[a] = 1.0;
                    } else {
                        wa[a] = 1.0 - frac[a];
                        dwa[a] = -1.0;
                    }
                }
                let base = self.param_index(level, self.hash(c), 0);
                for a in 0..3 {
                    let span = self.bounds_max[a] - self.bounds_min[a];
                    let inside = x[a] > self.bounds_min[a] && x[a] < self.bounds_max[a];
                    if !inside {
                        continue;
                    }
                    let mut dw = dwa[a] * res / span;
                    for b in 0..3 {
                        if b != a {
                            dw *= wa[b];
                        }
                    }
                    for f in 0..fpl {
                        jac[level * fpl + f][a] += dw * table[base + f].as_f64();
                    }
                }
            }
        }
        jac
    }
}
