use crate::error::Result;
use crate::math::{self, Vec3};
use crate::planes::Plane;

use super::{Camera, GroundTruthView, SceneSpec, Shape};

/// Direction toward the single directional light (normalized at use).
pub const LIGHT_DIR: Vec3 = [0.4, 0.8, 0.45];
const AMBIENT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: Vec3,
    /// Instance id: primitive index + 1, or `primitives.len() + 1` for the floor.
    pub instance: u8,
    pub albedo: [f64; 3],
    pub feature_id: usize,
}

fn intersect_sphere(o: Vec3, d: Vec3, c: Vec3, r: f64, t_min: f64) -> Option<(f64, Vec3)> {
    let oc = math::sub(o, c);
    let b = math::dot(d, oc);
    let disc = b * b - (math::dot(oc, oc) - r * r);
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let t = [-b - s, -b + s].into_iter().find(|&t| t >= t_min)?;
    let n = math::scale(math::sub(math::add(o, math::scale(d, t)), c), 1.0 / r);
    Some((t, n))
}

fn intersect_box(o: Vec3, d: Vec3, c: Vec3, h: f64, t_min: f64) -> Option<(f64, Vec3)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    let mut axis0 = 0;
    let mut axis1 = 0;
    for a in 0..3 {
        let lo = c[a] - h;
        let hi = c[a] + h;
        if d[a].abs() < 1e-300 {
            if o[a] < lo || o[a] > hi {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo - o[a]) / d[a], (hi - o[a]) / d[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        if ta > t0 {
            t0 = ta;
            axis0 = a;
        }
        if tb < t1 {
            t1 = tb;
            axis1 = a;
        }
    }
    if t0 > t1 {
        return None;
    }
    let (t, axis) = if t0 >= t_min {
        (t0, axis0)
    } else if t1 >= t_min {
        (t1, axis1)
    } else {
        return None;
    };
    let p = math::add(o, math::scale(d, t));
    let mut n = [0.0; 3];
    n[axis] = (p[axis] - c[axis]).signum();
    Some((t, n))
}

fn intersect_floor(o: Vec3, d: Vec3, height: f64, t_min: f64) -> Option<(f64, Vec3)> {
    if d[1].abs() < 1e-300 {
        return None;
    }
    let t = (height - o[1]) / d[1];
    if t < t_min {
        return None;
    }
    let p = math::add(o, math::scale(d, t));
    if p[0].abs() > 1.0 || p[2].abs() > 1.0 {
        return None;
    }
    Some((t, [0.0, 1.0, 0.0]))
}

/// Nearest hit along `o + t·d` with `t ∈ [t_min, t_max]`.
pub fn intersect_scene(scene: &SceneSpec, o: Vec3, d: Vec3, t_min: f64, t_max: f64) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut consider = |hit: Option<(f64, Vec3)>, instance: u8, albedo: [f64; 3], feature_id: usize| {
        if let Some((t, normal)) = hit {
            if t <= t_max && best.is_none_or(|b| t < b.t) {
                best = Some(Hit {
                    t,
                    normal,
                    instance,
                    albedo,
                    feature_id,
                });
            }
        }
    };
    for (i, p) in scene.primitives.iter().enumerate() {
        let hit = match p.shape {
            Shape::Sphere => intersect_sphere(o, d, p.center, p.size, t_min),
            Shape::Box => intersect_box(o, d, p.center, p.size, t_min),
        };
        consider(hit, (i + 1) as u8, p.albedo, p.feature_id);
    }
    if let Some(g) = &scene.ground_plane {
        let id = (scene.primitives.len() + 1) as u8;
        consider(intersect_floor(o, d, g.height, t_min), id, g.albedo, g.feature_id);
    }
    best
}

/// Shades a hit with flat albedo and a Lambertian term from [`LIGHT_DIR`].
fn shade(hit: &Hit, d: Vec3) -> [f64; 3] {
    // Normals face the viewer so thin floors are lit from either side.
    let n = if math::dot(hit.normal, d) > 0.0 {
        math::scale(hit.normal, -1.0)
    } else {
        hit.normal
    };
    let lambert = math::dot(n, math::normalize(LIGHT_DIR)).max(0.0);
    let k = AMBIENT + (1.0 - AMBIENT) * lambert;
    [hit.albedo[0] * k, hit.albedo[1] * k, hit.albedo[2] * k]
}

/// Ray-traces exact ground truth for one camera.
pub fn trace_ground_truth(scene: &SceneSpec, camera: &Camera, feature_dim: usize) -> Result<GroundTruthView> {
    camera.validate()?;
    scene.validate(feature_dim)?;
    let (w, h) = (camera.width, camera.height);
    let mut rgb = Plane::zeros(w, h, 3);
    let mut depth = Plane::zeros(w, h, 1);
    let mut feature = Plane::zeros(w, h, feature_dim);
    let mut instance = vec![0u8; w * h];
    let o = camera.origin();
    for row in 0..h {
        for col in 0..w {
            let d = camera.direction_through(row as f64 + 0.5, col as f64 + 0.5);
            let idx = row * w + col;
            match intersect_scene(scene, o, d, camera.near, camera.far) {
                Some(hit) => {
                    let c = shade(&hit, d);
                    for k in 0..3 {
                        rgb.data[idx * 3 + k] = c[k] as f32;
                    }
                    depth.data[idx] = (hit.t / camera.far).min(1.0) as f32;
                    feature.data[idx * feature_dim + hit.feature_id] = 1.0;
                    instance[idx] = hit.instance;
                }
                None => {
                    for k in 0..3 {
                        rgb.data[idx * 3 + k] = scene.background_color[k] as f32;
                    }
                    depth.data[idx] = 1.0;
                }
            }
        }
    }
    Ok(GroundTruthView {
        camera: camera.clone(),
        rgb,
        depth,
        feature,
        instance,
    })
}
