//! Operations shared by the command line and the HTTP service, so both
//! produce the same bytes for the same inputs.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use radfield::dataset::{load_dataset, Camera, Dataset, Orbit};
use radfield::field::{parse_checkpoint, RadianceField};
use radfield::mask::{mask_from_features, render_features, selection_feature, sim_histogram, MaskOptions, MaskSet, PatchSelection};
use radfield::pipeline::content_id;
use radfield::planes::{Mask, Plane};
use radfield::renderer::{render_view, RenderHeads, RenderOptions};
use radfield::{Error, Result};
use serde::Serialize;

/// Bins of the similarity histogram returned with a mask preview.
pub const HISTOGRAM_BINS: usize = 20;

/// A loaded checkpoint and its content id.
#[derive(Clone, Debug)]
pub struct LoadedField {
    pub path: PathBuf,
    pub id: String,
    pub field: Arc<RadianceField<f32>>,
}

pub fn load_field(path: &Path) -> Result<LoadedField> {
    if !path.exists() {
        return Err(Error::MissingFile { path: path.to_path_buf() });
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = parse_checkpoint(&bytes, path)?;
    Ok(LoadedField {
        path: path.to_path_buf(),
        id: content_id(&bytes),
        field: Arc::new(ckpt.field),
    })
}

/// Cameras from a dataset directory, or from the default orbit when none is
/// given.
pub fn scene_cameras(data: Option<&Path>, views: usize, res: usize) -> Result<(Vec<Camera>, Option<Dataset>)> {
    match data {
        Some(dir) => {
            let ds = load_dataset(dir)?;
            Ok((ds.cameras(), Some(ds)))
        }
        None => {
            if views < 2 || res == 0 {
                return Err(Error::config("need at least two views and a positive resolution"));
            }
            Ok((Orbit::default().cameras(views, res, 0.0), None))
        }
    }
}

/// Feature maps per checkpoint, kept in memory and mirrored to disk as
/// RPNF files so a restart does not re-render them.
#[derive(Debug, Default)]
pub struct FeatureCache {
    dir: Option<PathBuf>,
    mem: Mutex<HashMap<String, Arc<Vec<Plane>>>>,
}

impl FeatureCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self {
            dir,
            mem: Mutex::new(HashMap::new()),
        }
    }

    pub fn get(&self, field: &LoadedField, cameras: &[Camera]) -> Result<Arc<Vec<Plane>>> {
        if let Some(hit) = self.mem.lock().unwrap().get(&field.id) {
            return Ok(hit.clone());
        }
        let planes = match self.read_disk(&field.id, cameras.len())? {
            Some(p) => p,
            None => {
                let p = render_features(&field.field, cameras, &RenderOptions::default())?;
                self.write_disk(&field.id, &p)?;
                p
            }
        };
        let planes = Arc::new(planes);
        self.mem.lock().unwrap().insert(field.id.clone(), planes.clone());
        Ok(planes)
    }

    fn file(&self, id: &str, i: usize) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(id).join(format!("feature_{i:03}.rpnf")))
    }

    fn read_disk(&self, id: &str, n: usize) -> Result<Option<Vec<Plane>>> {
        let Some(first) = self.file(id, 0) else {
            return Ok(None);
        };
        if !first.exists() {
            return Ok(None);
        }
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let p = self.file(id, i).unwrap();
            if !p.exists() {
                return Ok(None);
            }
            out.push(Plane::read_rpnf(&p)?);
        }
        Ok(Some(out))
    }

    fn write_disk(&self, id: &str, planes: &[Plane]) -> Result<()> {
        let Some(dir) = self.dir.as_ref().map(|d| d.join(id)) else {
            return Ok(());
        };
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, p) in planes.iter().enumerate() {
            p.write_rpnf(&self.file(id, i).unwrap())?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MaskPreview {
    #[serde(skip)]
    pub mask: Mask,
    #[serde(skip)]
    pub png: Vec<u8>,
    pub pixel_count: usize,
    pub sim_histogram: Vec<usize>,
}

/// Mask of the selected view itself, as shown while tuning the threshold.
pub fn mask_preview(features: &[Plane], sel: &PatchSelection, opts: MaskOptions) -> Result<MaskPreview> {
    let source = features
        .get(sel.view)
        .ok_or_else(|| Error::contract(format!("view {} out of range ({} views)", sel.view, features.len())))?;
    let patch = selection_feature(source, sel)?;
    let (mask, sim) = mask_from_features(&patch, source, sel.alpha, opts)?;
    Ok(MaskPreview {
        png: mask.to_png_bytes()?,
        pixel_count: mask.count(),
        sim_histogram: sim_histogram(&sim, HISTOGRAM_BINS),
        mask,
    })
}

/// Stable id of a mask set: digest of its provenance.
pub fn maskset_id(set: &MaskSet) -> String {
    let key = serde_json::json!({
        "checkpoint": set.checkpoint_id,
        "selection": set.selection,
        "postprocess": set.postprocess,
    });
    format!("ms-{}", content_id(key.to_string().as_bytes()))
}

/// Image kinds a view can be exported as.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewKind {
    Rgb,
    FeaturePca,
    Depth,
    Mask,
}

impl FromStr for ViewKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(ViewKind::Rgb),
            "feature_pca" => Ok(ViewKind::FeaturePca),
            "depth" => Ok(ViewKind::Depth),
            "mask" => Ok(ViewKind::Mask),
            other => Err(Error::contract(format!(
                "unknown view kind {other:?}; expected rgb, feature_pca, depth or mask"
            ))),
        }
    }
}

/// Renders one view of `field` as a plane ready for PNG export. `features`
/// supplies a precomputed feature map for `FeaturePca`; `masks` is required
/// for `Mask`.
pub fn view_plane(
    field: &RadianceField<f32>,
    cameras: &[Camera],
    view: usize,
    kind: ViewKind,
    features: Option<&Plane>,
    masks: Option<&MaskSet>,
) -> Result<Plane> {
    let cam = cameras
        .get(view)
        .ok_or_else(|| Error::contract(format!("view {view} out of range ({} views)", cameras.len())))?;
    let opts = RenderOptions::default();
    let only = |color, feature, depth| RenderHeads {
        color,
        feature,
        depth,
        opacity: false,
    };
    match kind {
        ViewKind::Rgb => Ok(render_view(field, cam, only(true, false, false), &opts)?.color.unwrap()),
        ViewKind::Depth => Ok(render_view(field, cam, only(false, false, true), &opts)?.depth.unwrap()),
        ViewKind::FeaturePca => match features {
            Some(f) => Ok(f.pca_rgb()),
            None => Ok(render_view(field, cam, only(false, true, false), &opts)?.feature.unwrap().pca_rgb()),
        },
        ViewKind::Mask => {
            let set = masks.ok_or_else(|| Error::config("mask view requested without a mask set"))?;
            let m = set
                .masks
                .get(view)
                .ok_or_else(|| Error::contract(format!("mask set has no view {view}")))?;
            Ok(m.to_plane())
        }
    }
}
