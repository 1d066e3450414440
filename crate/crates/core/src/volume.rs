//! Image stacks on disk and in memory, and their fixed-size model blocks.
//!
//! On disk a volume is a JSON header `{name}.json` next to a raw
//! little-endian payload `{name}.raw`, x varying fastest. Intensities are
//! held as `f32` in 16-bit scale; 8-bit files are multiplied by 257.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad header: {msg}")]
    Header { path: PathBuf, msg: String },
    #[error("payload has {found} samples, header expects {expected}")]
    Length { expected: usize, found: usize },
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("upsampling factor must be >= 1")]
    ZeroFactor,
    #[error("volume is {dim} voxels along axis {axis}, smaller than block size {block}; upsample first")]
    TooSmall { axis: usize, dim: usize, block: usize },
    #[error("overlap {overlap} must be smaller than block size {block}")]
    Overlap { overlap: usize, block: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    U16,
}

impl Dtype {
    pub fn max_value(self) -> f32 {
        match self {
            Dtype::U8 => 255.0,
            Dtype::U16 => 65535.0,
        }
    }

    fn bytes(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::U16 => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub dtype: Dtype,
    pub spacing: [f64; 3],
    pub order: String,
}

pub const ORDER_X_FASTEST: &str = "x-fastest";

/// Dense scalar volume; `dims` are `(W, H, D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: Vec<f32>,
    spacing: [f64; 3],
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>, spacing: [f64; 3]) -> Result<Self, VolumeError> {
        if dims.contains(&0) {
            return Err(VolumeError::Invalid(format!("dims {dims:?} must be positive")));
        }
        let expected = dims.iter().product();
        if data.len() != expected {
            return Err(VolumeError::Length {
                expected,
                found: data.len(),
            });
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(VolumeError::Invalid(format!("intensity {v} is not finite and >= 0")));
        }
        Ok(Volume { dims, data, spacing })
    }

    pub fn filled(dims: [usize; 3], value: f32) -> Result<Self, VolumeError> {
        Volume::new(dims, vec![value; dims.iter().product()], [1.0; 3])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

fn paths_for(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut header = stem.clone().into_os_string();
    header.push(".json");
    let mut raw = stem.into_os_string();
    raw.push(".raw");
    (header.into(), raw.into())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Loads `{name}.json` + `{name}.raw`; `path` may name either file or the
/// common stem.
pub fn load_volume(path: &Path) -> Result<Volume, VolumeError> {
    let (header_path, raw_path) = paths_for(path);
    let text = fs::read_to_string(&header_path).map_err(io_err(&header_path))?;
    let bad = |msg: String| VolumeError::Header {
        path: header_path.clone(),
        msg,
    };
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if header.order != ORDER_X_FASTEST {
        return Err(bad(format!("unsupported order `{}`", header.order)));
    }
    if header.dims.contains(&0) {
        return Err(bad(format!("dims {:?} must be positive", header.dims)));
    }
    if !header.spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        return Err(bad(format!("spacing {:?} must be positive", header.spacing)));
    }
    let bytes = fs::read(&raw_path).map_err(io_err(&raw_path))?;
    let expected: usize = header.dims.iter().product();
    let width = header.dtype.bytes();
    if bytes.len() != expected * width {
        return Err(VolumeError::Length {
            expected,
            found: bytes.len() / width,
        });
    }
    let data = match header.dtype {
        Dtype::U8 => bytes.iter().map(|&b| f32::from(b) * 257.0).collect(),
        Dtype::U16 => bytes
            .chunks_exact(2)
            .map(|c| f32::from(u16::from_le_bytes([c[0], c[1]])))
            .collect(),
    };
    Volume::new(header.dims, data, header.spacing)
}

/// Writes the volume, rounding and clamping to `dtype`. Values are taken
/// in 16-bit scale, so `U8` output divides by 257.
pub fn save_volume(path: &Path, volume: &Volume, dtype: Dtype) -> Result<(), VolumeError> {
    let (header_path, raw_path) = paths_for(path);
    let header = VolumeHeader {
        dims: volume.dims,
        dtype,
        spacing: volume.spacing,
        order: ORDER_X_FASTEST.to_string(),
    };
    let text = serde_json::to_string_pretty(&header).map_err(|e| VolumeError::Header {
        path: header_path.clone(),
        msg: e.to_string(),
    })?;
    let bytes: Vec<u8> = match dtype {
        Dtype::U8 => volume
            .data
            .iter()
            .map(|&v| (v / 257.0).round().clamp(0.0, 255.0) as u8)
            .collect(),
        Dtype::U16 => volume
            .data
            .iter()
            .flat_map(|&v| (v.round().clamp(0.0, 65535.0) as u16).to_le_bytes())
            .collect(),
    };
    fs::write(&header_path, text).map_err(io_err(&header_path))?;
    fs::write(&raw_path, bytes).map_err(io_err(&raw_path))?;
    Ok(())
}

/// Linear interpolation weights along one axis for sample-center alignment.
fn axis_taps(out_len: usize, in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|i| {
            let c = ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = c.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, c - lo as f64)
        })
        .collect()
}

pub fn upsample_trilinear(v: &Volume, factor: usize) -> Result<Volume, VolumeError> {
    if factor == 0 {
        return Err(VolumeError::ZeroFactor);
    }
    if factor == 1 {
        return Ok(v.clone());
    }
    let [w, h, d] = v.dims;
    let out = [w * factor, h * factor, d * factor];
    let tx = axis_taps(out[0], w, factor);
    let ty = axis_taps(out[1], h, factor);
    let tz = axis_taps(out[2], d, factor);
    let mut data = Vec::with_capacity(out.iter().product());
    for &(z0, z1, fz) in &tz {
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let s = |x, y, z| f64::from(v.get(x, y, z));
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let c00 = lerp(s(x0, y0, z0), s(x1, y0, z0), fx);
                let c10 = lerp(s(x0, y1, z0), s(x1, y1, z0), fx);
                let c01 = lerp(s(x0, y0, z1), s(x1, y0, z1), fx);
                let c11 = lerp(s(x0, y1, z1), s(x1, y1, z1), fx);
                let value = lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz);
                data.push(value as f32);
            }
        }
    }
    let spacing = v.spacing.map(|s| s / factor as f64);
    Volume::new(out, data, spacing)
}

fn axis_origins(dim: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut origins = Vec::new();
    let mut o = 0;
    loop {
        if o + size >= dim {
            origins.push(dim - size);
            break;
        }
        origins.push(o);
        o += stride;
    }
    origins
}

/// Block origins `[x, y, z]` on a grid of stride `block_size − overlap`,
/// with the last block per axis shifted to end at the boundary. Ordered z
/// outermost, x innermost.
pub fn block_origins(dims: [usize; 3], block_size: usize, overlap: usize) -> Result<Vec<[usize; 3]>, VolumeError> {
    if overlap >= block_size {
        return Err(VolumeError::Overlap {
            overlap,
            block: block_size,
        });
    }
    if let Some(axis) = (0..3).find(|&a| dims[a] < block_size) {
        return Err(VolumeError::TooSmall {
            axis,
            dim: dims[axis],
            block: block_size,
        });
    }
    let stride = block_size - overlap;
    let per_axis: Vec<Vec<usize>> = dims.iter().map(|&d| axis_origins(d, block_size, stride)).collect();
    let mut out = Vec::new();
    for &z in &per_axis[2] {
        for &y in &per_axis[1] {
            for &x in &per_axis[0] {
                out.push([x, y, z]);
            }
        }
    }
    Ok(out)
}

pub fn blockify(v: &Volume, block_size: usize, overlap: usize) -> Result<Vec<[usize; 3]>, VolumeError> {
    block_origins(v.dims, block_size, overlap)
}

/// Raw intensities of the cube `[origin, origin + size)`, x fastest.
pub fn crop(v: &Volume, origin: [usize; 3], size: usize) -> Vec<f32> {
    assert!((0..3).all(|a| origin[a] + size <= v.dims[a]), "crop outside volume");
    let mut out = Vec::with_capacity(size * size * size);
    for z in origin[2]..origin[2] + size {
        for y in origin[1]..origin[1] + size {
            let start = v.index(origin[0], y, z);
            out.extend_from_slice(&v.data[start..start + size]);
        }
    }
    out
}

/// Normalized cube of model input.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub origin: [usize; 3],
    pub size: usize,
    pub data: Vec<f32>,
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(sorted: &[f32], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let a = f64::from(sorted[lo]);
    a + (pos - lo as f64) * (f64::from(sorted[hi]) - a)
}

pub const LOW_PERCENTILE: f64 = 1.0;
pub const HIGH_PERCENTILE: f64 = 99.5;

/// Maps intensities through `clamp((x − p1) / (p99.5 − p1), 0, 1)`.
///
/// Constant blocks become all zero. When the percentile range collapses but
/// the block is not constant (a few bright voxels on a flat background), the
/// min/max range is used instead so the bright voxels still reach 1.
pub fn normalize(origin: [usize; 3], size: usize, raw: &[f32]) -> Block {
    let mut sorted = raw.to_vec();
    sorted.sort_by(f32::total_cmp);
    let (mut lo, mut hi) = (percentile(&sorted, LOW_PERCENTILE), percentile(&sorted, HIGH_PERCENTILE));
    if hi <= lo {
        lo = sorted.first().map_or(0.0, |&v| f64::from(v));
        hi = sorted.last().map_or(0.0, |&v| f64::from(v));
    }
    let data = if hi <= lo {
        vec![0.0; raw.len()]
    } else {
        let scale = 1.0 / (hi - lo);
        raw.iter()
            .map(|&x| ((f64::from(x) - lo) * scale).clamp(0.0, 1.0) as f32)
            .collect()
    };
    Block { origin, size, data }
}

pub fn extract_block(v: &Volume, origin: [usize; 3], size: usize) -> Block {
    normalize(origin, size, &crop(v, origin, size))
}

/// True iff the fraction of voxels brighter than `fg_threshold` is below
/// `min_fraction`.
pub fn is_empty_block(b: &Block, fg_threshold: f32, min_fraction: f64) -> bool {
    if b.data.is_empty() {
        return true;
    }
    let bright = b.data.iter().filter(|&&v| v > fg_threshold).count();
    (bright as f64) < min_fraction * b.data.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_two_voxels() {
        let v = Volume::new([2, 1, 1], vec![0.0, 10.0], [1.0; 3]).unwrap();
        let u = upsample_trilinear(&v, 2).unwrap();
        assert_eq!(u.dims(), [4, 2, 2]);
        assert_eq!(&u.data()[..4], &[0.0, 2.5, 7.5, 10.0]);
        assert_eq!(u.spacing(), [0.5; 3]);
    }

    #[test]
    fn upsample_identity_and_zero() {
        let v = Volume::new([2, 2, 1], vec![1.0, 2.0, 3.0, 4.0], [1.0; 3]).unwrap();
        assert_eq!(upsample_trilinear(&v, 1).unwrap(), v);
        assert!(matches!(upsample_trilinear(&v, 0), Err(VolumeError::ZeroFactor)));
    }

    #[test]
    fn blockify_examples() {
        let o = block_origins([128; 3], 64, 0).unwrap();
        assert_eq!(o.len(), 8);
        assert_eq!(o[1], [64, 0, 0]);
        let o = block_origins([100; 3], 64, 0).unwrap();
        assert_eq!(o.len(), 8);
        assert_eq!(o[7], [36, 36, 36]);
        assert_eq!(block_origins([64; 3], 64, 0).unwrap(), vec![[0, 0, 0]]);
        assert!(matches!(block_origins([63, 64, 64], 64, 0), Err(VolumeError::TooSmall { axis: 0, .. })));
        assert!(matches!(block_origins([64; 3], 64, 64), Err(VolumeError::Overlap { .. })));
    }

    #[test]
    fn overlap_shortens_stride() {
        let o = block_origins([100, 64, 64], 64, 16).unwrap();
        let xs: Vec<usize> = o.iter().map(|p| p[0]).collect();
        assert_eq!(xs, vec![0, 36]);
        let o = block_origins([160, 64, 64], 64, 16).unwrap();
        let xs: Vec<usize> = o.iter().map(|p| p[0]).collect();
        assert_eq!(xs, vec![0, 48, 96]);
    }

    #[test]
    fn empty_block_rule() {
        let zero = Block {
            origin: [0; 3],
            size: 64,
            data: vec![0.0; 64 * 64 * 64],
        };
        assert!(is_empty_block(&zero, 0.5, 0.001));
        let full = Block {
            data: vec![1.0; 64 * 64 * 64],
            ..zero.clone()
        };
        assert!(!is_empty_block(&full, 0.5, 0.001));
        let mut sparse = zero;
        sparse.data[..300].fill(1.0);
        assert!(!is_empty_block(&sparse, 0.5, 0.001));
    }

    #[test]
    fn normalize_two_values() {
        let mut raw = vec![0.0f32; 1000];
        raw[..3].fill(65535.0);
        let b = normalize([0; 3], 10, &raw);
        assert_eq!(b.data[0], 1.0);
        assert_eq!(b.data[999], 0.0);
        let mut raw = vec![0.0f32; 1000];
        raw[..100].fill(65535.0);
        let b = normalize([0; 3], 10, &raw);
        assert_eq!((b.data[0], b.data[999]), (1.0, 0.0));
    }

    #[test]
    fn normalize_constant_is_zero() {
        let b = normalize([0; 3], 2, &[7.0; 8]);
        assert!(b.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn percentile_interpolates() {
        let s = [0.0f32, 10.0, 20.0, 30.0, 40.0];
        assert_eq!(percentile(&s, 50.0), 20.0);
        assert!((percentile(&s, 1.0) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_data() {
        assert!(matches!(
            Volume::new([2, 2, 2], vec![0.0; 7], [1.0; 3]),
            Err(VolumeError::Length { expected: 8, found: 7 })
        ));
        assert!(Volume::new([1, 1, 1], vec![-1.0], [1.0; 3]).is_err());
    }
}
