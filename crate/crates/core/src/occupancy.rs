//! Coarse occupancy over the hash-grid bounds. Optimization loops skip
//! samples in cells whose recent density stayed below a threshold; full
//! renders for evaluation never consult it.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::RadianceField;
use crate::math::{Real, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OccupancyConfig {
    /// Cells per axis.
    pub resolution: usize,
    /// A cell is occupied while its decayed density exceeds this.
    pub threshold: f64,
    /// Per-update decay of the remembered density.
    pub decay: f64,
    pub update_every: usize,
    /// Steps rendered without skipping before the first update.
    pub warmup_steps: usize,
}

impl Default for OccupancyConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            threshold: 0.01,
            decay: 0.95,
            update_every: 16,
            warmup_steps: 256,
        }
    }
}

impl OccupancyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.update_every == 0 {
            return Err(Error::config("occupancy resolution and update_every must be at least 1"));
        }
        if !(self.threshold >= 0.0) || !(0.0..=1.0).contains(&self.decay) {
            return Err(Error::config("occupancy threshold must be nonnegative and decay in [0, 1]"));
        }
        Ok(())
    }

    /// Whether `step` refreshes the grid.
    pub fn updates_at(&self, step: usize) -> bool {
        step >= self.warmup_steps && (step - self.warmup_steps) % self.update_every == 0
    }
}

/// Points outside the bounds use the nearest boundary cell, matching the
/// clamped hash-grid encoding there.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub resolution: usize,
    pub bounds_min: Vec3,
    pub bounds_max: Vec3,
    pub threshold: f64,
    density: Vec<f32>,
    occupied: Vec<bool>,
}

impl OccupancyGrid {
    /// A grid with every cell occupied.
    pub fn new<T: Real>(field: &RadianceField<T>, cfg: &OccupancyConfig) -> Self {
        let n = cfg.resolution.pow(3);
        Self {
            resolution: cfg.resolution,
            bounds_min: field.config.grid.bounds_min,
            bounds_max: field.config.grid.bounds_max,
            threshold: cfg.threshold,
            density: vec![0.0; n],
            occupied: vec![true; n],
        }
    }

    pub fn cell(&self, x: Vec3) -> usize {
        let r = self.resolution;
        let mut idx = 0;
        for k in (0..3).rev() {
            let u = (x[k] - self.bounds_min[k]) / (self.bounds_max[k] - self.bounds_min[k]);
            let c = (u * r as f64).clamp(0.0, (r - 1) as f64) as usize;
            idx = idx * r + c;
        }
        idx
    }

    pub fn is_occupied(&self, x: Vec3) -> bool {
        self.occupied[self.cell(x)]
    }

    pub fn occupied_fraction(&self) -> f64 {
        self.occupied.iter().filter(|&&o| o).count() as f64 / self.occupied.len() as f64
    }

    /// Folds the field's density at one random point per cell into the
    /// decayed per-cell maximum and re-thresholds.
    pub fn update<T: Real>(&mut self, field: &RadianceField<T>, decay: f64, seed: u64) {
        let r = self.resolution;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size: Vec<f64> = (0..3)
            .map(|k| (self.bounds_max[k] - self.bounds_min[k]) / r as f64)
            .collect();
        let mut points = Vec::with_capacity(r * r * r);
        for i in 0..r * r * r {
            let c = [i % r, (i / r) % r, i / (r * r)];
            let mut p = [0.0; 3];
            for k in 0..3 {
                p[k] = self.bounds_min[k] + (c[k] as f64 + rng.random::<f64>()) * size[k];
            }
            points.push(p);
        }
        let sigma = field.density_forward(points).sigma;
        for ((d, o), s) in self.density.iter_mut().zip(self.occupied.iter_mut()).zip(sigma) {
            *d = (*d * decay as f32).max(s.as_f64() as f32);
            *o = *d as f64 > self.threshold;
        }
    }
}

/// Grid state carried through an optimization loop.
#[derive(Clone, Debug)]
pub struct OccupancySchedule {
    cfg: Option<OccupancyConfig>,
    grid: Option<Arc<OccupancyGrid>>,
    seed: u64,
}

impl OccupancySchedule {
    pub fn new(cfg: Option<OccupancyConfig>, seed: u64) -> Self {
        Self { cfg, grid: None, seed }
    }

    /// Refreshes the grid when `step` calls for it and returns the grid to
    /// render that step with.
    pub fn at<T: Real>(&mut self, field: &RadianceField<T>, step: usize) -> Option<Arc<OccupancyGrid>> {
        let cfg = self.cfg?;
        if cfg.updates_at(step) {
            let grid = self.grid.get_or_insert_with(|| Arc::new(OccupancyGrid::new(field, &cfg)));
            let seed = self.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            Arc::make_mut(grid).update(field, cfg.decay, seed);
        }
        self.grid.clone()
    }
}
