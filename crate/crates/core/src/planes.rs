//! Dense float image planes, binary masks, and their on-disk encodings.
//!
//! Float planes are stored in the "RPNF" container: little-endian magic
//! `RPNF`, `u32` version, `u32` width, `u32` height, `u32` channels, then
//! `width * height * channels` `f32` values in row-major, channel-interleaved
//! order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const RPNF_MAGIC: &[u8; 4] = b"RPNF";
pub const RPNF_VERSION: u32 = 1;
const RPNF_HEADER: usize = 20;

/// An `height × width × channels` float image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, value: &[f32]) -> Self {
        let mut p = Self::zeros(width, height, value.len());
        for px in p.data.chunks_exact_mut(value.len()) {
            px.copy_from_slice(value);
        }
        p
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let i = (row * self.width + col) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.channels)
    }

    pub fn same_shape(&self, other: &Plane) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn to_rpnf_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RPNF_HEADER + self.data.len() * 4);
        out.extend_from_slice(RPNF_MAGIC);
        for v in [RPNF_VERSION, self.width as u32, self.height as u32, self.channels as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_rpnf_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != RPNF_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "RPNF",
            });
        }
        if bytes.len() < RPNF_HEADER {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected: RPNF_HEADER,
                actual: bytes.len(),
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != RPNF_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("unsupported RPNF version {version}"),
            });
        }
        let (width, height, channels) = (word(1) as usize, word(2) as usize, word(3) as usize);
        let expected = RPNF_HEADER + width * height * channels * 4;
        if bytes.len() > expected {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("{} trailing bytes after payload", bytes.len() - expected),
            });
        }
        if bytes.len() < expected {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected,
                actual: bytes.len(),
            });
        }
        let data = bytes[RPNF_HEADER..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn write_rpnf(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_rpnf_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_rpnf(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_rpnf_bytes(&bytes, path)
    }

    /// Encodes a 1- or 3-channel plane in [0, 1] as an 8-bit PNG.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| quantize_u8(v)).collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => return Err(Error::contract(format!("cannot encode {c}-channel plane as PNG"))),
        };
        encode_png(&bytes, self.width, self.height, color)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_png_bytes()?).map_err(|e| Error::io(path, e))
    }

    /// Reads an 8-bit PNG into a plane with values `k / 255`.
    pub fn read_png(path: &Path, channels: usize) -> Result<Self> {
        let (width, height, raw) = read_png_raw(path, channels)?;
        Ok(Self {
            width,
            height,
            channels,
            data: raw.into_iter().map(dequantize_u8).collect(),
        })
    }

    /// Projects a many-channel plane onto its top three principal components
    /// and rescales each to [0, 1] for display.
    pub fn pca_rgb(&self) -> Plane {
        let c = self.channels;
        let n = self.pixel_count().max(1);
        let mut mean = vec![0.0f64; c];
        for px in self.pixels() {
            for (m, &v) in mean.iter_mut().zip(px) {
                *m += v as f64 / n as f64;
            }
        }
        let mut cov = vec![0.0f64; c * c];
        for px in self.pixels() {
            for i in 0..c {
                let a = px[i] as f64 - mean[i];
                for j in 0..c {
                    cov[i * c + j] += a * (px[j] as f64 - mean[j]);
                }
            }
        }
        let mut axes = Vec::new();
        for _ in 0..3.min(c) {
            let axis = power_iteration(&cov, c);
            let lambda = rayleigh(&cov, &axis, c);
            for i in 0..c {
                for j in 0..c {
                    cov[i * c + j] -= lambda * axis[i] * axis[j];
                }
            }
            axes.push(axis);
        }
        let mut out = Plane::zeros(self.width, self.height, 3);
        for (k, axis) in axes.iter().enumerate() {
            let proj: Vec<f64> = self
                .pixels()
                .map(|px| px.iter().zip(&mean).zip(axis).map(|((&v, m), a)| (v as f64 - m) * a).sum())
                .collect();
            let lo = proj.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = if hi - lo > 1e-12 { hi - lo } else { 1.0 };
            for (i, p) in proj.iter().enumerate() {
                out.data[i * 3 + k] = ((p - lo) / span) as f32;
            }
        }
        out
    }
}

fn power_iteration(m: &[f64], n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
    for _ in 0..100 {
        let mut w = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                w[i] += m[i * n + j] * v[j];
            }
        }
        let len = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len < 1e-300 {
            break;
        }
        v = w.into_iter().map(|x| x / len).collect();
    }
    v
}

fn rayleigh(m: &[f64], v: &[f64], n: usize) -> f64 {
    (0..n)
        .map(|i| v[i] * (0..n).map(|j| m[i * n + j] * v[j]).sum::<f64>())
        .sum()
}

pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize_u8(k: u8) -> f32 {
    k as f32 / 255.0
}

pub(crate) fn encode_png(
    bytes: &[u8],
    width: usize,
    height: usize,
    color: image::ExtendedColorType,
) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(bytes, width as u32, height as u32, color)
        .map_err(|e| Error::contract(format!("png encode: {e}")))?;
    Ok(out)
}

pub(crate) fn read_png_raw(path: &Path, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| {
        Error::Format {
            path: path.to_path_buf(),
            message: format!("png decode: {e}"),
        }
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = match channels {
        1 => img.into_luma8().into_raw(),
        3 => img.into_rgb8().into_raw(),
        c => return Err(Error::contract(format!("cannot decode PNG into {c} channels"))),
    };
    Ok((w, h, raw))
}

/// Binary per-pixel mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<u8> = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        encode_png(&bytes, self.width, self.height, image::ExtendedColorType::L8)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_png_bytes()?).map_err(|e| Error::io(path, e))
    }

    /// Reads a grayscale PNG; values ≥ 128 are set.
    pub fn read_png(path: &Path) -> Result<Self> {
        let (width, height, raw) = read_png_raw(path, 1)?;
        Ok(Self {
            width,
            height,
            data: raw.into_iter().map(|v| v >= 128).collect(),
        })
    }

    /// The mask as a one-channel float plane (0 or 1).
    pub fn to_plane(&self) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}
