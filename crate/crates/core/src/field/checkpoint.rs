//! "RPCK" checkpoint files.
//!
//! Layout (little-endian): magic `RPCK`, `u32` version, the field config
//! (`u32` levels, `u32` base resolution, `f64` level scale, `u32` table size,
//! `u32` features per level, six `f64` bounds, `u32` hidden width, `u32`
//! geometry-code width, `u32` direction frequencies, `u32` feature dim, `u32`
//! activation code), `u64` parameter count, `f32` parameters, then a `u8`
//! flag; when set, a `u64` optimizer step and the `f32` Adam moments `m`, `v`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Real;

use super::{Activation, Adam, FieldConfig, HashGridConfig, RadianceField};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub field: RadianceField<f32>,
    pub adam: Option<Adam<f32>>,
}

impl Checkpoint {
    /// Checks that the stored architecture matches `expected`.
    pub fn expect_config(&self, expected: &FieldConfig) -> Result<()> {
        let got = &self.field.config;
        let pairs: [(&str, f64, f64); 9] = [
            ("n_levels", expected.grid.n_levels as f64, got.grid.n_levels as f64),
            ("base_resolution", expected.grid.base_resolution as f64, got.grid.base_resolution as f64),
            ("per_level_scale", expected.grid.per_level_scale, got.grid.per_level_scale),
            ("table_size", expected.grid.table_size as f64, got.grid.table_size as f64),
            ("feats_per_level", expected.grid.feats_per_level as f64, got.grid.feats_per_level as f64),
            ("hidden_width", expected.hidden_width as f64, got.hidden_width as f64),
            ("geo_dim", expected.geo_dim as f64, got.geo_dim as f64),
            ("dir_freqs", expected.dir_freqs as f64, got.dir_freqs as f64),
            ("feature_dim", expected.feature_dim as f64, got.feature_dim as f64),
        ];
        for (name, e, a) in pairs {
            if e != a {
                return Err(Error::mismatch(format!("checkpoint {name}"), e, a));
            }
        }
        if expected.grid.bounds_min != got.grid.bounds_min || expected.grid.bounds_max != got.grid.bounds_max {
            return Err(Error::mismatch(
                "checkpoint bounds",
                format!("{:?}..{:?}", expected.grid.bounds_min, expected.grid.bounds_max),
                format!("{:?}..{:?}", got.grid.bounds_min, got.grid.bounds_max),
            ));
        }
        Ok(())
    }
}

pub fn checkpoint_bytes<T: Real>(field: &RadianceField<T>, adam: Option<&Adam<T>>) -> Vec<u8> {
    let cfg = &field.config;
    let mut out = Vec::with_capacity(128 + field.params.len() * 12);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let u32s = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    u32s(&mut out, CHECKPOINT_VERSION as usize);
    u32s(&mut out, cfg.grid.n_levels);
    u32s(&mut out, cfg.grid.base_resolution);
    out.extend_from_slice(&cfg.grid.per_level_scale.to_le_bytes());
    u32s(&mut out, cfg.grid.table_size);
    u32s(&mut out, cfg.grid.feats_per_level);
    for v in cfg.grid.bounds_min.iter().chain(&cfg.grid.bounds_max) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    u32s(&mut out, cfg.hidden_width);
    u32s(&mut out, cfg.geo_dim);
    u32s(&mut out, cfg.dir_freqs);
    u32s(&mut out, cfg.feature_dim);
    u32s(&mut out, cfg.activation.code() as usize);
    out.extend_from_slice(&(field.params.len() as u64).to_le_bytes());
    let floats = |out: &mut Vec<u8>, xs: &[T]| {
        for x in xs {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    };
    floats(&mut out, &field.params);
    match adam {
        Some(a) => {
            out.push(1);
            out.extend_from_slice(&a.step.to_le_bytes());
            floats(&mut out, &a.m);
            floats(&mut out, &a.v);
        }
        None => out.push(0),
    }
    out
}

pub fn save_checkpoint<T: Real>(field: &RadianceField<T>, adam: Option<&Adam<T>>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, checkpoint_bytes(field, adam)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: self.pos + n,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let format_err = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "RPCK",
        });
    }
    let mut r = Reader { bytes, pos: 4, path };
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(format!(
            "checkpoint version mismatch: expected {CHECKPOINT_VERSION}, found {version}"
        )));
    }
    let n_levels = r.u32()?;
    let base_resolution = r.u32()?;
    let per_level_scale = r.f64()?;
    let table_size = r.u32()?;
    let feats_per_level = r.u32()?;
    let mut b = [0.0; 6];
    for v in b.iter_mut() {
        *v = r.f64()?;
    }
    let hidden_width = r.u32()?;
    let geo_dim = r.u32()?;
    let dir_freqs = r.u32()?;
    let feature_dim = r.u32()?;
    let act_code = r.u32()? as u32;
    let activation =
        Activation::from_code(act_code).ok_or_else(|| format_err(format!("unknown activation code {act_code}")))?;
    let config = FieldConfig {
        grid: HashGridConfig {
            n_levels,
            base_resolution,
            per_level_scale,
            table_size,
            feats_per_level,
            bounds_min: [b[0], b[1], b[2]],
            bounds_max: [b[3], b[4], b[5]],
        },
        hidden_width,
        geo_dim,
        dir_freqs,
        feature_dim,
        activation,
    };
    config.validate().map_err(|e| format_err(e.to_string()))?;
    let count = r.u64()? as usize;
    let expected = super::Layout::new(&config).total;
    if count != expected {
        return Err(format_err(format!(
            "parameter count mismatch: config implies {expected}, header says {count}"
        )));
    }
    let params = r.f32s(count)?;
    let flag = r.take(1)?[0];
    let adam = match flag {
        0 => None,
        1 => {
            let step = r.u64()?;
            let m = r.f32s(count)?;
            let v = r.f32s(count)?;
            let mut a = Adam::new(count);
            a.step = step;
            a.m = m;
            a.v = v;
            Some(a)
        }
        f => return Err(format_err(format!("bad optimizer flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(format_err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        field: RadianceField::from_params(config, params)?,
        adam,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_identical() {
        let field = RadianceField::<f32>::new(FieldConfig::miniature(8), 4).unwrap();
        let mut adam = Adam::new(field.param_count());
        adam.step = 17;
        adam.m[3] = 0.25;
        adam.v[5] = 1e-7;
        let bytes = checkpoint_bytes(&field, Some(&adam));
        let ck = parse_checkpoint(&bytes, Path::new("a.rpck")).unwrap();
        assert_eq!(ck.field, field);
        assert_eq!(ck.adam.unwrap(), adam);
        let ck = parse_checkpoint(&checkpoint_bytes(&field, None), Path::new("a.rpck")).unwrap();
        assert!(ck.adam.is_none());
        assert!(ck.field.params.iter().zip(&field.params).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn mismatched_levels_name_expected_and_actual() {
        let field = RadianceField::<f32>::new(FieldConfig::miniature(8), 4).unwrap();
        let ck = parse_checkpoint(&checkpoint_bytes(&field, None), Path::new("a.rpck")).unwrap();
        let mut cfg = FieldConfig::miniature(8);
        cfg.grid.n_levels = 3;
        let err = ck.expect_config(&cfg).unwrap_err().to_string();
        assert!(err.contains("n_levels") && err.contains('3') && err.contains('2'), "{err}");
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let field = RadianceField::<f32>::new(FieldConfig::miniature(8), 4).unwrap();
        let bytes = checkpoint_bytes(&field, None);
        let p = Path::new("c.rpck");
        assert!(matches!(parse_checkpoint(&bytes[..bytes.len() - 9], p), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(parse_checkpoint(&bad, p), Err(Error::Format { .. })));
        bad[0] = b'Q';
        assert!(matches!(parse_checkpoint(&bad, p), Err(Error::BadMagic { .. })));
    }
}
