use crate::error::{Error, Result};
use crate::field::RadianceField;
use crate::mask::MaskSet;
use crate::math::Real;
use crate::renderer::{render_view, RenderHeads, RenderOptions};

/// Opacity above which a pixel counts as hitting a surface.
const OPAQUE: f32 = 0.99;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ConsistencyReport {
    /// Reprojections that landed in another view's frame and were visible.
    pub checked: usize,
    /// Of those, how many fell inside that view's mask.
    pub hits: usize,
    /// Worst per-view-pair hit fraction.
    pub worst_pair: f64,
}

impl ConsistencyReport {
    pub fn fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.hits as f64 / self.checked as f64
        }
    }
}

/// Back-projects each masked opaque pixel at its rendered depth and checks
/// where it lands in every other view. Points that leave the frame or sit
/// behind that view's rendered surface by more than `occlusion_tolerance`
/// (scene units) are skipped.
pub fn mask_consistency<T: Real>(
    field: &RadianceField<T>,
    masks: &MaskSet,
    opts: &RenderOptions,
    occlusion_tolerance: f64,
) -> Result<ConsistencyReport> {
    let want = RenderHeads {
        color: false,
        feature: false,
        depth: true,
        opacity: true,
    };
    let cams = &masks.cameras;
    if cams.len() != masks.masks.len() {
        return Err(Error::contract("mask set cameras and masks differ in count"));
    }
    let planes = cams
        .iter()
        .map(|c| render_view(field, c, want, opts))
        .collect::<Result<Vec<_>>>()?;
    let mut report = ConsistencyReport {
        worst_pair: 1.0,
        ..Default::default()
    };
    for (i, cam_i) in cams.iter().enumerate() {
        let depth_i = planes[i].depth.as_ref().unwrap();
        let opacity_i = planes[i].opacity.as_ref().unwrap();
        let origin = cam_i.origin();
        let mut points = Vec::new();
        for (p, &m) in masks.masks[i].data.iter().enumerate() {
            if !m || opacity_i.data[p] <= OPAQUE {
                continue;
            }
            let (row, col) = (p / cam_i.width, p % cam_i.width);
            let d = cam_i.direction_through(row as f64 + 0.5, col as f64 + 0.5);
            let t = depth_i.data[p] as f64 * cam_i.far;
            points.push([origin[0] + t * d[0], origin[1] + t * d[1], origin[2] + t * d[2]]);
        }
        for (j, cam_j) in cams.iter().enumerate() {
            if i == j {
                continue;
            }
            let depth_j = planes[j].depth.as_ref().unwrap();
            let (mut checked, mut hits) = (0usize, 0usize);
            for &x in &points {
                let Some((v, u, dist)) = cam_j.project(x) else {
                    continue;
                };
                if v < 0.0 || u < 0.0 || v >= cam_j.height as f64 || u >= cam_j.width as f64 {
                    continue;
                }
                let (r, c) = (v as usize, u as usize);
                let visible = depth_j.data[r * cam_j.width + c] as f64 * cam_j.far;
                if dist > visible + occlusion_tolerance {
                    continue;
                }
                checked += 1;
                hits += masks.masks[j].get(r, c) as usize;
            }
            report.checked += checked;
            report.hits += hits;
            if checked > 0 {
                report.worst_pair = report.worst_pair.min(hits as f64 / checked as f64);
            }
        }
    }
    Ok(report)
}
