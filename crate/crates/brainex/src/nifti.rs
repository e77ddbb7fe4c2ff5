//! Uncompressed single-file NIfTI-1 (`.nii`) reading and writing.
//!
//! Reads datatypes uint8 (2), int16 (4), float32 (16) and float64 (64);
//! writes uint8 for labels and float32 for everything else. Probability
//! volumes are stored as 4-D files with one 3-D block per label.

use std::fs;
use std::path::Path;

use brainex_core::{Grid, LabelVolume, ProbVolume, UncertaintyVolume, Volume3D};

use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_DESCRIP: usize = 148;
const OFF_MAGIC: usize = 344;

/// A decoded NIfTI image: its 3-D grid, the number of volumes along the
/// fourth axis (1 for plain volumes) and the scaled voxel values.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    pub grid: Grid,
    pub volumes: usize,
    pub datatype: i16,
    pub data: Vec<f64>,
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn i32_at(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format { offset, message: message.into() }
}

/// Decodes a NIfTI-1 byte image. `max_dims` is 3 for volumes and 4 for
/// multi-volume files.
pub fn decode(bytes: &[u8], max_dims: usize) -> Result<NiftiImage> {
    if bytes.len() < HEADER_SIZE {
        return Err(format_err(bytes.len(), format!("file has {} bytes, header needs 348", bytes.len())));
    }
    let sizeof_hdr = i32_at(bytes, 0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            return Err(format_err(0, "big-endian NIfTI files are not supported"));
        }
        return Err(format_err(0, format!("sizeof_hdr is {sizeof_hdr}, expected 348")));
    }
    if &bytes[OFF_MAGIC..OFF_MAGIC + 4] != b"n+1\0" {
        return Err(format_err(OFF_MAGIC, "magic is not \"n+1\" (only single-file .nii is supported)"));
    }
    let raw_dims: Vec<i16> = (0..8).map(|k| i16_at(bytes, OFF_DIM + 2 * k)).collect();
    let mut ndim = raw_dims[0];
    if !(1..=7).contains(&ndim) {
        return Err(format_err(OFF_DIM, format!("dim[0] is {ndim}, expected 1..=7")));
    }
    for k in 1..=ndim as usize {
        if raw_dims[k] < 1 {
            return Err(format_err(OFF_DIM + 2 * k, format!("dim[{k}] is {}, must be positive", raw_dims[k])));
        }
    }
    while ndim as usize > 3 && raw_dims[ndim as usize] == 1 {
        ndim -= 1;
    }
    let ndim = ndim as usize;
    if ndim < 3 || ndim > max_dims {
        let expect = if max_dims == 3 { "3" } else { "3 or 4" };
        return Err(Error::Dimensionality(format!(
            "image has {ndim} non-singleton dimensions, expected {expect}"
        )));
    }
    let dims = [raw_dims[1] as usize, raw_dims[2] as usize, raw_dims[3] as usize];
    let volumes = if ndim == 4 { raw_dims[4] as usize } else { 1 };
    let mut spacing = [0.0; 3];
    for (k, s) in spacing.iter_mut().enumerate() {
        let off = OFF_PIXDIM + 4 * (k + 1);
        let v = f32_at(bytes, off) as f64;
        if !(v > 0.0) || !v.is_finite() {
            return Err(format_err(off, format!("pixdim[{}] is {v}, must be positive", k + 1)));
        }
        *s = v;
    }
    let grid = Grid::new(dims, spacing).map_err(|e| format_err(OFF_DIM, e.to_string()))?;
    let datatype = i16_at(bytes, OFF_DATATYPE);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    let bitpix = i16_at(bytes, OFF_BITPIX);
    if bitpix as usize != 8 * width {
        return Err(format_err(OFF_BITPIX, format!("bitpix {bitpix} does not match datatype {datatype}")));
    }
    let vox_offset = f32_at(bytes, OFF_VOX_OFFSET);
    if !(vox_offset >= VOX_OFFSET as f32) || vox_offset.fract() != 0.0 {
        return Err(format_err(OFF_VOX_OFFSET, format!("vox_offset {vox_offset} is invalid, must be an integer >= 352")));
    }
    let start = vox_offset as usize;
    let count = grid.len() * volumes;
    let end = start + count * width;
    if bytes.len() < end {
        return Err(format_err(bytes.len(), format!("data truncated: need {end} bytes, file has {}", bytes.len())));
    }
    let body = &bytes[start..end];
    let mut data: Vec<f64> = match datatype {
        DT_UINT8 => body.iter().map(|&v| v as f64).collect(),
        DT_INT16 => body.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f64).collect(),
        DT_FLOAT32 => body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        _ => body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    };
    let slope = f32_at(bytes, OFF_SCL_SLOPE) as f64;
    let inter = f32_at(bytes, OFF_SCL_INTER) as f64;
    if slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0) {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(format_err(start + i * width, "non-finite voxel value"));
    }
    Ok(NiftiImage { grid, volumes, datatype, data })
}

/// Encodes a header plus body. `volumes > 1` produces a 4-D file.
pub fn encode(grid: &Grid, volumes: usize, datatype: i16, data: &[f64]) -> Vec<u8> {
    let width = match datatype {
        DT_UINT8 => 1,
        DT_FLOAT32 => 4,
        other => panic!("writing datatype {other} is not supported"),
    };
    let mut h = vec![0u8; VOX_OFFSET];
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    let dims = grid.dims();
    let ndim: i16 = if volumes > 1 { 4 } else { 3 };
    let mut dim = [1i16; 8];
    dim[0] = ndim;
    for k in 0..3 {
        dim[k + 1] = dims[k] as i16;
    }
    dim[4] = volumes as i16;
    for (k, d) in dim.iter().enumerate() {
        h[OFF_DIM + 2 * k..OFF_DIM + 2 * k + 2].copy_from_slice(&d.to_le_bytes());
    }
    h[OFF_DATATYPE..OFF_DATATYPE + 2].copy_from_slice(&datatype.to_le_bytes());
    h[OFF_BITPIX..OFF_BITPIX + 2].copy_from_slice(&((8 * width) as i16).to_le_bytes());
    let spacing = grid.spacing();
    let mut pixdim = [1.0f32; 8];
    for k in 0..3 {
        pixdim[k + 1] = spacing[k] as f32;
    }
    for (k, p) in pixdim.iter().enumerate() {
        h[OFF_PIXDIM + 4 * k..OFF_PIXDIM + 4 * k + 4].copy_from_slice(&p.to_le_bytes());
    }
    h[OFF_VOX_OFFSET..OFF_VOX_OFFSET + 4].copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
    h[OFF_SCL_SLOPE..OFF_SCL_SLOPE + 4].copy_from_slice(&1.0f32.to_le_bytes());
    // millimetres
    h[OFF_XYZT_UNITS] = 2;
    let descrip = b"brainex";
    h[OFF_DESCRIP..OFF_DESCRIP + descrip.len()].copy_from_slice(descrip);
    h[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(b"n+1\0");
    h.reserve(data.len() * width);
    match datatype {
        DT_UINT8 => h.extend(data.iter().map(|&v| v as u8)),
        _ => {
            for &v in data {
                h.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    h
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_file(path))
}

pub fn read_nifti(path: &Path) -> Result<NiftiImage> {
    with_path(path, decode(&read_bytes(path)?, 3))
}

pub fn read_volume(path: &Path) -> Result<Volume3D> {
    let img = read_nifti(path)?;
    with_path(path, Volume3D::new(img.grid, img.data).map_err(Error::from))
}

/// Reads an integer label image. Values must be whole numbers below
/// `num_labels`.
pub fn read_labels(path: &Path, num_labels: usize) -> Result<LabelVolume> {
    let img = read_nifti(path)?;
    with_path(path, LabelVolume::from_real(img.grid, num_labels, &img.data).map_err(Error::from))
}

pub fn read_uncertainty(path: &Path) -> Result<UncertaintyVolume> {
    let img = read_nifti(path)?;
    with_path(path, UncertaintyVolume::new(img.grid, img.data).map_err(Error::from))
}

/// Reads a 4-D probability file (one 3-D block per label) and renormalizes
/// each voxel to the simplex, which removes float32 rounding.
pub fn read_probs(path: &Path) -> Result<ProbVolume> {
    let img = with_path(path, decode(&read_bytes(path)?, 4))?;
    let n = img.grid.len();
    let l = img.volumes;
    if l < 2 {
        return Err(Error::Dimensionality(format!(
            "{}: probability file has {l} label volume(s), need at least 2",
            path.display()
        )));
    }
    let mut data = vec![0.0; n * l];
    for v in 0..n {
        let sum: f64 = (0..l).map(|c| img.data[c * n + v].max(0.0)).sum();
        for c in 0..l {
            let p = img.data[c * n + v].max(0.0);
            data[v * l + c] = if sum > 0.0 { p / sum } else { 1.0 / l as f64 };
        }
    }
    with_path(path, ProbVolume::new(img.grid, l, data).map_err(Error::from))
}

pub fn write_volume(vol: &Volume3D, path: &Path) -> Result<()> {
    write_bytes(path, &encode(vol.grid(), 1, DT_FLOAT32, vol.data()))
}

pub fn write_labels(labels: &LabelVolume, path: &Path) -> Result<()> {
    let data: Vec<f64> = labels.data().iter().map(|&v| v as f64).collect();
    write_bytes(path, &encode(labels.grid(), 1, DT_UINT8, &data))
}

pub fn write_uncertainty(u: &UncertaintyVolume, path: &Path) -> Result<()> {
    write_bytes(path, &encode(u.grid(), 1, DT_FLOAT32, u.data()))
}

pub fn write_probs(p: &ProbVolume, path: &Path) -> Result<()> {
    let (n, l) = (p.grid().len(), p.num_labels());
    let mut planar = vec![0.0; n * l];
    for v in 0..n {
        for c in 0..l {
            planar[c * n + v] = p.data()[v * l + c];
        }
    }
    write_bytes(path, &encode(p.grid(), l, DT_FLOAT32, &planar))
}
