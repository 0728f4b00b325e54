//! Synthetic multi-view scenes with exact ground truth.
//!
//! Scenes are a handful of analytic primitives lit by one directional light.
//! Every view carries RGB, far-normalized depth, a per-pixel feature map and
//! instance ids, so the mask pipeline can be scored against exact labels.

mod io;
mod trace;

pub use io::{load_dataset, write_dataset, DatasetMeta, ViewRecord, META_FILE};
pub use trace::{intersect_scene, trace_ground_truth, Hit, LIGHT_DIR};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Vec3};
use crate::planes::{dequantize_u8, quantize_u8, Plane};

pub const DEFAULT_FEATURE_DIM: usize = 8;

/// Pinhole camera. `cam_to_world` is a row-major rigid transform; the camera
/// looks along its local −z axis with +y up and image rows growing downward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub cam_to_world: [f64; 16],
    pub near: f64,
    pub far: f64,
}

impl Camera {
    /// Camera at `position` looking at `target`, with world `up` as the
    /// vertical reference and a horizontal field of view in degrees.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        position: Vec3,
        target: Vec3,
        up: Vec3,
        width: usize,
        height: usize,
        fov_deg: f64,
        near: f64,
        far: f64,
    ) -> Self {
        let forward = math::normalize(math::sub(target, position));
        let right = math::normalize(math::cross(forward, up));
        let cam_up = math::cross(right, forward);
        let back = math::scale(forward, -1.0);
        let mut m = [0.0; 16];
        for r in 0..3 {
            m[r * 4] = right[r];
            m[r * 4 + 1] = cam_up[r];
            m[r * 4 + 2] = back[r];
            m[r * 4 + 3] = position[r];
        }
        m[15] = 1.0;
        let f = (width as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
        Self {
            width,
            height,
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            cam_to_world: m,
            near,
            far,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("camera resolution must be positive"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::config("focal lengths must be positive"));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::config(format!(
                "degenerate depth range: near {} far {}",
                self.near, self.far
            )));
        }
        for i in 0..3 {
            for j in 0..3 {
                let d = math::dot(self.axis(i), self.axis(j));
                let expect = if i == j { 1.0 } else { 0.0 };
                if (d - expect).abs() > 1e-5 {
                    return Err(Error::config("camera rotation is not orthonormal"));
                }
            }
        }
        Ok(())
    }

    /// Column `i` of the rotation block (camera axis `i` in world space).
    pub fn axis(&self, i: usize) -> Vec3 {
        let m = &self.cam_to_world;
        [m[i], m[4 + i], m[8 + i]]
    }

    pub fn origin(&self) -> Vec3 {
        let m = &self.cam_to_world;
        [m[3], m[7], m[11]]
    }

    /// World-space unit direction through image coordinates `(v, u)` where
    /// pixel `(r, c)` spans `[r, r+1) × [c, c+1)`.
    pub fn direction_through(&self, v: f64, u: f64) -> Vec3 {
        let x = (u - self.cx) / self.fx;
        let y = -(v - self.cy) / self.fy;
        let d = math::add(
            math::add(math::scale(self.axis(0), x), math::scale(self.axis(1), y)),
            math::scale(self.axis(2), -1.0),
        );
        math::normalize(d)
    }

    /// Projects a world point to continuous image coordinates `(v, u)` and
    /// its distance from the camera center. `None` when behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let rel = math::sub(p, self.origin());
        let x = math::dot(rel, self.axis(0));
        let y = math::dot(rel, self.axis(1));
        let z = -math::dot(rel, self.axis(2));
        if z <= 1e-9 {
            return None;
        }
        let u = self.fx * x / z + self.cx;
        let v = -self.fy * y / z + self.cy;
        Some((v, u, math::norm(rel)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Sphere,
    /// Axis-aligned cube; `size` is the half-extent.
    Box,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: Vec3,
    /// Radius for spheres, half-extent for boxes.
    pub size: f64,
    pub albedo: [f64; 3],
    pub feature_id: usize,
}

/// A square floor tile spanning `[-1, 1]` in x and z at the given height.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundPlane {
    pub height: f64,
    pub albedo: [f64; 3],
    pub feature_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub background_color: [f64; 3],
    #[serde(default)]
    pub ground_plane: Option<GroundPlane>,
    #[serde(default)]
    pub rng_seed: u64,
}

impl SceneSpec {
    /// Two differently colored spheres side by side on a black background.
    pub fn two_spheres() -> Self {
        Self {
            primitives: vec![
                Primitive {
                    shape: Shape::Sphere,
                    center: [-0.42, 0.0, 0.05],
                    size: 0.42,
                    albedo: [0.85, 0.25, 0.15],
                    feature_id: 1,
                },
                Primitive {
                    shape: Shape::Sphere,
                    center: [0.45, 0.05, -0.1],
                    size: 0.36,
                    albedo: [0.2, 0.45, 0.85],
                    feature_id: 2,
                },
            ],
            background_color: [0.0, 0.0, 0.0],
            ground_plane: None,
            rng_seed: 7,
        }
    }

    /// A sphere and a box resting on a floor tile.
    pub fn sphere_box_floor() -> Self {
        Self {
            primitives: vec![
                Primitive {
                    shape: Shape::Sphere,
                    center: [-0.4, -0.1, 0.1],
                    size: 0.35,
                    albedo: [0.9, 0.75, 0.2],
                    feature_id: 1,
                },
                Primitive {
                    shape: Shape::Box,
                    center: [0.4, -0.2, -0.2],
                    size: 0.25,
                    albedo: [0.55, 0.2, 0.7],
                    feature_id: 2,
                },
            ],
            background_color: [0.0, 0.0, 0.0],
            ground_plane: Some(GroundPlane {
                height: -0.45,
                albedo: [0.6, 0.6, 0.55],
                feature_id: 3,
            }),
            rng_seed: 11,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "two_spheres" => Ok(Self::two_spheres()),
            "sphere_box_floor" => Ok(Self::sphere_box_floor()),
            other => Err(Error::config(format!(
                "unknown scene {other:?}; known scenes: two_spheres, sphere_box_floor"
            ))),
        }
    }

    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::config("scene has no primitives"));
        }
        let mut ids = Vec::new();
        for (i, p) in self.primitives.iter().enumerate() {
            if !(p.size > 0.0) {
                return Err(Error::config(format!("primitive {i} has non-positive size")));
            }
            // A sphere's bounding box equals its center ± radius as well.
            if p.center.iter().any(|&c| c - p.size < -1.0 - 1e-12 || c + p.size > 1.0 + 1e-12) {
                return Err(Error::config(format!("primitive {i} leaves the [-1, 1]^3 scene box")));
            }
            ids.push(p.feature_id);
        }
        if let Some(g) = &self.ground_plane {
            if g.height.abs() > 1.0 {
                return Err(Error::config("ground plane outside the scene box"));
            }
            ids.push(g.feature_id);
        }
        for (i, &id) in ids.iter().enumerate() {
            if id >= feature_dim {
                return Err(Error::config(format!(
                    "feature_id {id} does not fit in feature dimension {feature_dim}"
                )));
            }
            if ids[..i].contains(&id) {
                return Err(Error::config(format!("duplicate feature_id {id}")));
            }
        }
        Ok(())
    }

    /// Number of distinct instance ids including background (id 0).
    pub fn instance_count(&self) -> usize {
        1 + self.primitives.len() + usize::from(self.ground_plane.is_some())
    }
}

/// Ground truth for one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthView {
    pub camera: Camera,
    pub rgb: Plane,
    /// Far-normalized termination distance in [0, 1].
    pub depth: Plane,
    pub feature: Plane,
    /// Row-major instance ids; 0 is background.
    pub instance: Vec<u8>,
}

impl GroundTruthView {
    pub fn instance_mask(&self, id: u8) -> crate::planes::Mask {
        crate::planes::Mask {
            width: self.camera.width,
            height: self.camera.height,
            data: self.instance.iter().map(|&i| i == id).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub feature_dim: usize,
    pub scene: Option<SceneSpec>,
    pub views: Vec<GroundTruthView>,
}

impl Dataset {
    pub fn cameras(&self) -> Vec<Camera> {
        self.views.iter().map(|v| v.camera.clone()).collect()
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.views
            .first()
            .map(|v| (v.camera.width, v.camera.height))
            .unwrap_or((0, 0))
    }
}

/// Circular camera path around the origin, y up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Orbit {
    pub radius: f64,
    pub elevation_deg: f64,
    pub fov_deg: f64,
    pub near: f64,
    pub far: f64,
}

impl Default for Orbit {
    fn default() -> Self {
        Self {
            radius: 3.0,
            elevation_deg: 25.0,
            fov_deg: 45.0,
            near: 1.4,
            far: 4.6,
        }
    }
}

impl Orbit {
    pub fn position(&self, azimuth_deg: f64) -> Vec3 {
        let (a, e) = (azimuth_deg.to_radians(), self.elevation_deg.to_radians());
        [
            self.radius * e.cos() * a.sin(),
            self.radius * e.sin(),
            self.radius * e.cos() * a.cos(),
        ]
    }

    pub fn camera(&self, azimuth_deg: f64, resolution: usize) -> Camera {
        Camera::look_at(
            self.position(azimuth_deg),
            [0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            resolution,
            resolution,
            self.fov_deg,
            self.near,
            self.far,
        )
    }

    /// `n` cameras at azimuths `offset + 360·i/n` degrees.
    pub fn cameras(&self, n: usize, resolution: usize, offset_deg: f64) -> Vec<Camera> {
        (0..n)
            .map(|i| self.camera(offset_deg + 360.0 * i as f64 / n as f64, resolution))
            .collect()
    }
}

/// Renders `n_views` orbit views of `scene`. RGB values are stored at 8-bit
/// precision so the dataset survives a PNG round trip unchanged.
pub fn make_dataset(
    scene: &SceneSpec,
    n_views: usize,
    resolution: usize,
    orbit: &Orbit,
    feature_dim: usize,
) -> Result<Dataset> {
    make_dataset_at(scene, n_views, resolution, orbit, feature_dim, 0.0)
}

/// Like [`make_dataset`] with every azimuth shifted by `offset_deg`; used for
/// held-out views that interleave a training orbit.
pub fn make_dataset_at(
    scene: &SceneSpec,
    n_views: usize,
    resolution: usize,
    orbit: &Orbit,
    feature_dim: usize,
    offset_deg: f64,
) -> Result<Dataset> {
    if resolution == 0 {
        return Err(Error::config("resolution must be positive"));
    }
    if n_views < 2 {
        return Err(Error::config("a dataset needs at least two views"));
    }
    scene.validate(feature_dim)?;
    let views = orbit
        .cameras(n_views, resolution, offset_deg)
        .iter()
        .map(|cam| {
            let mut view = trace_ground_truth(scene, cam, feature_dim)?;
            for v in view.rgb.data.iter_mut() {
                *v = dequantize_u8(quantize_u8(*v));
            }
            Ok(view)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        feature_dim,
        scene: Some(scene.clone()),
        views,
    })
}

/// Emulates coarse monocular depth: `clamp(scale·d + shift + N(0, sd), 0, 1)`.
pub fn perturb_depth(view: &GroundTruthView, scale: f64, shift: f64, noise_sd: f64, seed: u64) -> Result<Plane> {
    if !(scale > 0.0) {
        return Err(Error::config("depth scale must be positive"));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::config("noise standard deviation must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_sd).map_err(|e| Error::config(e.to_string()))?;
    let mut out = view.depth.clone();
    for v in out.data.iter_mut() {
        let noise = if noise_sd > 0.0 { normal.sample(&mut rng) } else { 0.0 };
        *v = (scale * *v as f64 + shift + noise).clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}
