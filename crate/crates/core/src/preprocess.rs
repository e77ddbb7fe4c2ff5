//! Intensity normalization, 3D to 2D slice decomposition, per-slice resizing
//! and reassembly.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::volume::{Axis, Grid, LabelVolume, ProbVolume, Volume3D};
use crate::{math, Error, Result};

/// A 2D image with one or more channel planes.
///
/// Pixel `(u, v)` of channel `c` is stored at `c * h * w + v * w + u`, where
/// `u` runs along the first in-plane axis of the source volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    /// Index of the slice this image was cut from.
    pub source_index: Option<usize>,
}

impl Image2D {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "image dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "image data length {} != {height}x{width}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume("image holds non-finite values".into()));
        }
        Ok(Image2D { height, width, channels, data, source_index: None })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, channel: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    pub fn get_channel(&self, channel: usize, u: usize, v: usize) -> f64 {
        self.data[(channel * self.height + v) * self.width + u]
    }

    fn with_source(mut self, source: Option<usize>) -> Self {
        self.source_index = source;
        self
    }
}

/// Min-max scales intensities to `[0, 1]`. A constant volume maps to zeros
/// with a warning.
pub fn normalize_intensity(vol: &Volume3D) -> Volume3D {
    let (lo, hi) = vol.min_max();
    let range = hi - lo;
    let data = if range > 0.0 {
        vol.data().iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
    } else {
        log::warn!("constant volume (value {lo}); normalized to all zeros");
        vec![0.0; vol.data().len()]
    };
    Volume3D::new(*vol.grid(), data).expect("normalized data is finite")
}

/// Anything that can be cut into per-slice images.
pub trait Sliceable {
    fn grid(&self) -> &Grid;
    fn channels(&self) -> usize;
    fn value(&self, voxel: usize, channel: usize) -> f64;
}

impl Sliceable for Volume3D {
    fn grid(&self) -> &Grid {
        Volume3D::grid(self)
    }
    fn channels(&self) -> usize {
        1
    }
    fn value(&self, voxel: usize, _: usize) -> f64 {
        self.data()[voxel]
    }
}

impl Sliceable for LabelVolume {
    fn grid(&self) -> &Grid {
        LabelVolume::grid(self)
    }
    fn channels(&self) -> usize {
        1
    }
    fn value(&self, voxel: usize, _: usize) -> f64 {
        f64::from(self.data()[voxel])
    }
}

impl Sliceable for ProbVolume {
    fn grid(&self) -> &Grid {
        ProbVolume::grid(self)
    }
    fn channels(&self) -> usize {
        self.num_labels()
    }
    fn value(&self, voxel: usize, channel: usize) -> f64 {
        self.data()[voxel * self.num_labels() + channel]
    }
}

fn voxel_at(grid: &Grid, axis: Axis, slice: usize, u: usize, v: usize) -> usize {
    let (a, b) = axis.in_plane();
    let mut c = [0usize; 3];
    c[axis.index()] = slice;
    c[a] = u;
    c[b] = v;
    grid.index(c[0], c[1], c[2])
}

/// Cuts a volume into one image per index along `axis`, in order.
pub fn slice_stack<V: Sliceable>(vol: &V, axis: Axis) -> Vec<Image2D> {
    let grid = vol.grid();
    let dims = grid.dims();
    let (a, b) = axis.in_plane();
    let (width, height) = (dims[a], dims[b]);
    let channels = vol.channels();
    (0..dims[axis.index()])
        .map(|s| {
            let mut data = Vec::with_capacity(width * height * channels);
            for c in 0..channels {
                for v in 0..height {
                    for u in 0..width {
                        data.push(vol.value(voxel_at(grid, axis, s, u, v), c));
                    }
                }
            }
            Image2D { height, width, channels, data, source_index: Some(s) }
        })
        .collect()
}

/// Inverse of [`slice_stack`]: returns the grid and per-voxel interleaved
/// channel data.
fn restack_raw(slices: &[Image2D], axis: Axis, spacing: [f64; 3]) -> Result<(Grid, usize, Vec<f64>)> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Shape("cannot restack an empty slice sequence".into()))?;
    for (i, s) in slices.iter().enumerate() {
        if s.dims() != first.dims() || s.channels != first.channels {
            return Err(Error::Shape(format!(
                "slice {i} is {}x{}x{}, expected {}x{}x{}",
                s.height, s.width, s.channels, first.height, first.width, first.channels
            )));
        }
    }
    let (a, b) = axis.in_plane();
    let mut dims = [0usize; 3];
    dims[axis.index()] = slices.len();
    dims[a] = first.width;
    dims[b] = first.height;
    let grid = Grid::new(dims, spacing)?;
    let channels = first.channels;
    let mut data = vec![0.0; grid.len() * channels];
    for (s, img) in slices.iter().enumerate() {
        for c in 0..channels {
            for v in 0..img.height {
                for u in 0..img.width {
                    let voxel = voxel_at(&grid, axis, s, u, v);
                    data[voxel * channels + c] = img.get_channel(c, u, v);
                }
            }
        }
    }
    Ok((grid, channels, data))
}

pub fn restack(slices: &[Image2D], axis: Axis, spacing: [f64; 3]) -> Result<Volume3D> {
    let (grid, channels, data) = restack_raw(slices, axis, spacing)?;
    if channels != 1 {
        return Err(Error::Shape(format!("expected single-channel slices, got {channels}")));
    }
    Volume3D::new(grid, data)
}

pub fn restack_labels(
    slices: &[Image2D],
    axis: Axis,
    spacing: [f64; 3],
    num_labels: usize,
) -> Result<LabelVolume> {
    let (grid, channels, data) = restack_raw(slices, axis, spacing)?;
    if channels != 1 {
        return Err(Error::Shape(format!("expected single-channel slices, got {channels}")));
    }
    LabelVolume::from_real(grid, num_labels, &data)
}

/// Restacks probability slices (one channel per label).
pub fn restack_probs(slices: &[Image2D], axis: Axis, spacing: [f64; 3]) -> Result<ProbVolume> {
    let (grid, channels, data) = restack_raw(slices, axis, spacing)?;
    ProbVolume::new(grid, channels, data)
}

/// Source coordinate of output sample `i` for an `input -> output` resize
/// with the half-pixel (align-corners-false) convention.
#[inline]
fn source_coord(i: usize, input: usize, output: usize) -> f64 {
    (i as f64 + 0.5) * input as f64 / output as f64 - 0.5
}

/// Bilinear resize with half-pixel centers; samples are clamped to the
/// border so no value leaves the input range.
pub fn resize_bilinear(img: &Image2D, target: (usize, usize)) -> Result<Image2D> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Argument(format!("resize target must be positive, got {th}x{tw}")));
    }
    if target == img.dims() {
        return Ok(img.clone());
    }
    let (h, w) = img.dims();
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|i| {
                let s = source_coord(i, inp, out).clamp(0.0, (inp - 1) as f64);
                let i0 = math::floor(s) as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let rows = taps(th, h);
    let cols = taps(tw, w);
    let mut data = Vec::with_capacity(th * tw * img.channels);
    for c in 0..img.channels {
        let plane = img.plane(c);
        for &(r0, r1, fy) in &rows {
            for &(c0, c1, fx) in &cols {
                let top = plane[r0 * w + c0] * (1.0 - fx) + plane[r0 * w + c1] * fx;
                let bottom = plane[r1 * w + c0] * (1.0 - fx) + plane[r1 * w + c1] * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(Image2D::new(th, tw, img.channels, data)?.with_source(img.source_index))
}

/// Nearest-neighbour resize on the same sampling grid as [`resize_bilinear`].
pub fn resize_nearest(img: &Image2D, target: (usize, usize)) -> Result<Image2D> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Argument(format!("resize target must be positive, got {th}x{tw}")));
    }
    let (h, w) = img.dims();
    let pick = |i: usize, inp: usize, out: usize| -> usize {
        let s = math::floor(source_coord(i, inp, out) + 0.5);
        (s.max(0.0) as usize).min(inp - 1)
    };
    let rows: Vec<usize> = (0..th).map(|i| pick(i, h, th)).collect();
    let cols: Vec<usize> = (0..tw).map(|i| pick(i, w, tw)).collect();
    let mut data = Vec::with_capacity(th * tw * img.channels);
    for c in 0..img.channels {
        let plane = img.plane(c);
        for &r in &rows {
            for &col in &cols {
                data.push(plane[r * w + col]);
            }
        }
    }
    Ok(Image2D::new(th, tw, img.channels, data)?.with_source(img.source_index))
}

/// Clamps negatives and rescales each pixel's channel vector to sum to one.
pub fn renormalize_simplex(img: &mut Image2D) {
    let n = img.height * img.width;
    let l = img.channels;
    for p in 0..n {
        let mut sum = 0.0;
        for c in 0..l {
            let v = &mut img.data[c * n + p];
            *v = v.max(0.0);
            sum += *v;
        }
        for c in 0..l {
            let v = &mut img.data[c * n + p];
            *v = if sum > 0.0 { (*v / sum).min(1.0) } else { 1.0 / l as f64 };
        }
    }
}

/// Smallest multiple of `2^depth` that is at least `n`.
pub fn padded_size(n: usize, depth: usize) -> usize {
    let m = 1usize << depth;
    n.div_ceil(m) * m
}
