//! Patch-driven mask extraction over rendered feature maps.
//!
//! The mean feature of a user-selected rectangle is compared with every
//! rendered pixel feature by cosine similarity, and pixels strictly above
//! the threshold form the mask.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Camera;
use crate::error::{Error, Result};
use crate::field::RadianceField;
use crate::math::Real;
use crate::planes::{Mask, Plane};
use crate::renderer::{render_view, RenderHeads, RenderOptions};

pub const DEFAULT_ALPHA: f64 = 0.85;
pub const MASKSET_FILE: &str = "maskset.json";
pub const MIN_COMPONENT_AREA: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSelection {
    pub view: usize,
    /// `[row0, col0, row1, col1]`, end-exclusive.
    pub rect: [usize; 4],
    pub alpha: f64,
}

impl PatchSelection {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let [r0, c0, r1, c1] = self.rect;
        if r0 >= r1 || c0 >= c1 {
            return Err(Error::contract(format!("empty patch rectangle {:?}", self.rect)));
        }
        if r1 > height || c1 > width {
            return Err(Error::contract(format!(
                "patch rectangle {:?} exceeds {width}x{height} image",
                self.rect
            )));
        }
        if !(self.alpha > -1.0 && self.alpha <= 1.0) {
            return Err(Error::contract(format!("threshold {} outside (-1, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// Arithmetic mean of the feature vectors inside `rect`.
pub fn patch_mean(features: &Plane, rect: [usize; 4]) -> Result<Vec<f64>> {
    let [r0, c0, r1, c1] = rect;
    if r0 >= r1 || c0 >= c1 {
        return Err(Error::contract(format!("empty patch rectangle {rect:?}")));
    }
    if r1 > features.height || c1 > features.width {
        return Err(Error::contract(format!("patch rectangle {rect:?} outside the feature map")));
    }
    let mut mean = vec![0.0; features.channels];
    for r in r0..r1 {
        for c in c0..c1 {
            for (m, &v) in mean.iter_mut().zip(features.pixel(r, c)) {
                *m += v as f64;
            }
        }
    }
    let n = ((r1 - r0) * (c1 - c0)) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Pixel features shorter than this fraction of the patch feature count as
/// zero-norm. Rendered features scale with opacity, and the direction of a
/// nearly transparent pixel's feature says nothing about what it shows.
pub const NEGLIGIBLE_FEATURE_NORM: f64 = 1e-2;

/// Per-pixel cosine similarity to `patch`; zero-norm pixels score 0.
pub fn similarity_map(patch: &[f64], features: &Plane) -> Result<Vec<f64>> {
    if patch.len() != features.channels {
        return Err(Error::mismatch("feature dimension", patch.len(), features.channels));
    }
    let pn = patch.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(features
        .pixels()
        .map(|f| {
            let (mut dot, mut fn2) = (0.0, 0.0);
            for (&a, &b) in patch.iter().zip(f) {
                dot += a * b as f64;
                fn2 += (b as f64) * (b as f64);
            }
            let norm = fn2.sqrt();
            if pn == 0.0 || norm <= NEGLIGIBLE_FEATURE_NORM * pn {
                0.0
            } else {
                dot / (pn * norm)
            }
        })
        .collect())
}

/// `sim > α`, strictly.
pub fn threshold_mask(sim: &[f64], width: usize, height: usize, alpha: f64) -> Result<Mask> {
    if sim.len() != width * height {
        return Err(Error::contract("similarity map size does not match the image"));
    }
    Ok(Mask {
        width,
        height,
        data: sim.iter().map(|&s| s > alpha).collect(),
    })
}

/// Counts of similarities in `bins` equal-width bins over `[-1, 1]`.
pub fn sim_histogram(sim: &[f64], bins: usize) -> Vec<usize> {
    let mut h = vec![0; bins];
    for &s in sim {
        let k = (((s + 1.0) / 2.0) * bins as f64).floor();
        h[(k.max(0.0) as usize).min(bins - 1)] += 1;
    }
    h
}

/// Drops 4-connected components smaller than `min_area`, then dilates by one
/// pixel (4-neighborhood).
pub fn postprocess(mask: &Mask, min_area: usize) -> Mask {
    let (w, h) = (mask.width, mask.height);
    let mut kept = Mask::empty(w, h);
    let mut seen = vec![false; w * h];
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.data[start] || seen[start] {
            continue;
        }
        let mut component = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            component.push(i);
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask.data[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        if component.len() >= min_area {
            for i in component {
                kept.data[i] = true;
            }
        }
    }
    let mut out = kept.clone();
    for i in 0..w * h {
        if !kept.data[i] {
            continue;
        }
        let (r, c) = (i / w, i % w);
        if r > 0 {
            out.data[i - w] = true;
        }
        if r + 1 < h {
            out.data[i + w] = true;
        }
        if c > 0 {
            out.data[i - 1] = true;
        }
        if c + 1 < w {
            out.data[i + 1] = true;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskOptions {
    pub postprocess: bool,
}

/// Mask for one feature map given a patch feature.
pub fn mask_from_features(patch: &[f64], features: &Plane, alpha: f64, opts: MaskOptions) -> Result<(Mask, Vec<f64>)> {
    let sim = similarity_map(patch, features)?;
    let mut mask = threshold_mask(&sim, features.width, features.height, alpha)?;
    if opts.postprocess {
        mask = postprocess(&mask, MIN_COMPONENT_AREA);
    }
    Ok((mask, sim))
}

/// Patch feature from the selected view's feature map, rejecting fields
/// whose feature head is still blank.
pub fn selection_feature(features: &Plane, sel: &PatchSelection) -> Result<Vec<f64>> {
    sel.validate(features.width, features.height)?;
    let patch = patch_mean(features, sel.rect)?;
    let norm = patch.iter().map(|v| v * v).sum::<f64>().sqrt();
    let max_feature = features.data.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if norm < 1e-6 || max_feature < 1e-6 {
        return Err(Error::DegenerateField(format!(
            "patch feature norm {norm:.3e}: the feature head appears untrained"
        )));
    }
    Ok(patch)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSetMeta {
    pub selection: PatchSelection,
    pub checkpoint_id: String,
    pub postprocess: bool,
    pub cameras: Vec<Camera>,
    pub files: Vec<String>,
}

/// One binary mask per training view plus provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub selection: PatchSelection,
    pub checkpoint_id: String,
    pub postprocess: bool,
    pub cameras: Vec<Camera>,
    pub masks: Vec<Mask>,
}

pub fn mask_file_name(i: usize) -> String {
    format!("mask_{i:03}.png")
}

impl MaskSet {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        for (i, m) in self.masks.iter().enumerate() {
            let name = mask_file_name(i);
            m.write_png(&dir.join(&name))?;
            files.push(name);
        }
        let meta = MaskSetMeta {
            selection: self.selection,
            checkpoint_id: self.checkpoint_id.clone(),
            postprocess: self.postprocess,
            cameras: self.cameras.clone(),
            files,
        };
        let path = dir.join(MASKSET_FILE);
        let text = serde_json::to_string_pretty(&meta).expect("mask set metadata serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MASKSET_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: MaskSetMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            message: e.to_string(),
        })?;
        if meta.files.len() != meta.cameras.len() {
            return Err(Error::Format {
                path,
                message: format!("{} mask files for {} cameras", meta.files.len(), meta.cameras.len()),
            });
        }
        let masks = meta
            .files
            .iter()
            .zip(&meta.cameras)
            .map(|(f, cam)| {
                let p = dir.join(f);
                let m = Mask::read_png(&p)?;
                if m.width != cam.width || m.height != cam.height {
                    return Err(Error::mismatch(
                        format!("size of {}", p.display()),
                        format!("{}x{}", cam.width, cam.height),
                        format!("{}x{}", m.width, m.height),
                    ));
                }
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            selection: meta.selection,
            checkpoint_id: meta.checkpoint_id,
            postprocess: meta.postprocess,
            cameras: meta.cameras,
            masks,
        })
    }
}

/// Renders the feature map of each camera.
pub fn render_features<T: Real>(field: &RadianceField<T>, cameras: &[Camera], opts: &RenderOptions) -> Result<Vec<Plane>> {
    let want = RenderHeads {
        color: false,
        feature: true,
        depth: false,
        opacity: false,
    };
    cameras
        .par_iter()
        .map(|cam| Ok(render_view(field, cam, want, opts)?.feature.expect("feature plane requested")))
        .collect()
}

/// Masks for every camera from one patch selection on `cameras[sel.view]`.
pub fn extract_mask_set<T: Real>(
    field: &RadianceField<T>,
    cameras: &[Camera],
    sel: &PatchSelection,
    checkpoint_id: &str,
    opts: MaskOptions,
    render: &RenderOptions,
) -> Result<MaskSet> {
    let features = render_features(field, cameras, render)?;
    mask_set_from_features(&features, cameras, sel, checkpoint_id, opts)
}

/// As [`extract_mask_set`] over already rendered feature maps.
pub fn mask_set_from_features(
    features: &[Plane],
    cameras: &[Camera],
    sel: &PatchSelection,
    checkpoint_id: &str,
    opts: MaskOptions,
) -> Result<MaskSet> {
    let source = features
        .get(sel.view)
        .ok_or_else(|| Error::contract(format!("view {} out of range ({} views)", sel.view, features.len())))?;
    let patch = selection_feature(source, sel)?;
    let masks = features
        .iter()
        .map(|f| Ok(mask_from_features(&patch, f, sel.alpha, opts)?.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskSet {
        selection: *sel,
        checkpoint_id: checkpoint_id.to_string(),
        postprocess: opts.postprocess,
        cameras: cameras.to_vec(),
        masks,
    })
}
