use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planes::{read_png_raw, Plane};

use super::{Camera, Dataset, GroundTruthView, SceneSpec};

pub const META_FILE: &str = "meta.json";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ViewRecord {
    pub camera: Camera,
    pub rgb: String,
    pub depth: String,
    pub feature: String,
    pub instance: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    /// `[width, height]`.
    pub resolution: [usize; 2],
    #[serde(rename = "D")]
    pub feature_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneSpec>,
    pub views: Vec<ViewRecord>,
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (w, h) = ds.resolution();
    let mut records = Vec::with_capacity(ds.views.len());
    for (i, view) in ds.views.iter().enumerate() {
        let rec = ViewRecord {
            camera: view.camera.clone(),
            rgb: format!("rgb_{i:03}.png"),
            depth: format!("depth_{i:03}.bin"),
            feature: format!("feat_{i:03}.bin"),
            instance: format!("instance_{i:03}.png"),
            mask: None,
        };
        view.rgb.write_png(&dir.join(&rec.rgb))?;
        view.depth.write_rpnf(&dir.join(&rec.depth))?;
        view.feature.write_rpnf(&dir.join(&rec.feature))?;
        let inst_path = dir.join(&rec.instance);
        let png = crate::planes::encode_png(
            &view.instance,
            view.camera.width,
            view.camera.height,
            image::ExtendedColorType::L8,
        )?;
        fs::write(&inst_path, png).map_err(|e| Error::io(&inst_path, e))?;
        records.push(rec);
    }
    let meta = DatasetMeta {
        version: DATASET_VERSION,
        resolution: [w, h],
        feature_dim: ds.feature_dim,
        scene: ds.scene.clone(),
        views: records,
    };
    let path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if meta.version != DATASET_VERSION {
        return Err(Error::Format {
            path,
            message: format!("unsupported dataset version {}", meta.version),
        });
    }
    Ok(meta)
}

fn check_dims(path: &Path, plane: &Plane, cam: &Camera, channels: usize) -> Result<()> {
    if plane.width != cam.width || plane.height != cam.height || plane.channels != channels {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!(
                "shape {}x{}x{} does not match camera {}x{}x{}",
                plane.width, plane.height, plane.channels, cam.width, cam.height, channels
            ),
        });
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta = read_meta(dir)?;
    let mut views = Vec::with_capacity(meta.views.len());
    for rec in &meta.views {
        rec.camera.validate()?;
        let cam = &rec.camera;
        let rgb_path = dir.join(&rec.rgb);
        let rgb = Plane::read_png(&rgb_path, 3)?;
        check_dims(&rgb_path, &rgb, cam, 3)?;
        let depth_path = dir.join(&rec.depth);
        let depth = Plane::read_rpnf(&depth_path)?;
        check_dims(&depth_path, &depth, cam, 1)?;
        let feat_path = dir.join(&rec.feature);
        let feature = Plane::read_rpnf(&feat_path)?;
        check_dims(&feat_path, &feature, cam, meta.feature_dim)?;
        let inst_path = dir.join(&rec.instance);
        let (iw, ih, instance) = read_png_raw(&inst_path, 1)?;
        if iw != cam.width || ih != cam.height {
            return Err(Error::Format {
                path: inst_path,
                message: "instance map does not match camera".into(),
            });
        }
        views.push(GroundTruthView {
            camera: cam.clone(),
            rgb,
            depth,
            feature,
            instance,
        });
    }
    Ok(Dataset {
        feature_dim: meta.feature_dim,
        scene: meta.scene,
        views,
    })
}
