//! Volumetric containers shared by every stage of the pipeline.
//!
//! All volumes store voxels with x varying fastest, then y, then z. Label
//! probabilities are interleaved per voxel (`L` consecutive values).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{math, Error, Result};

/// Tolerance on the per-voxel probability sum.
pub const SIMPLEX_TOL: f64 = 1e-5;

/// A volume axis. `Z` is the superior-inferior (longitudinal) axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    /// The two remaining axes, in increasing order. The first one varies
    /// fastest inside a slice.
    pub fn in_plane(self) -> (usize, usize) {
        match self {
            Axis::X => (1, 2),
            Axis::Y => (0, 2),
            Axis::Z => (0, 1),
        }
    }
}

impl core::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            other => Err(Error::Argument(format!("unknown axis `{other}`"))),
        }
    }
}

/// Voxel dimensions plus voxel spacing in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dims: [usize; 3],
    spacing: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        Ok(Grid { dims, spacing })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims[0] && y < self.dims[1] && z < self.dims[2]);
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let rest = index / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    /// Checks that two grids describe the same voxel lattice.
    pub fn ensure_same(&self, other: &Grid, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        if self.spacing != other.spacing {
            return Err(Error::Shape(format!(
                "{what}: spacing {:?} vs {:?}",
                self.spacing, other.spacing
            )));
        }
        Ok(())
    }
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::InvalidVolume(format!("{what}: non-finite value at voxel {i}"))),
        None => Ok(()),
    }
}

fn check_len(grid: &Grid, per_voxel: usize, len: usize, what: &str) -> Result<()> {
    let want = grid.len() * per_voxel;
    if len != want {
        return Err(Error::InvalidVolume(format!(
            "{what}: data length {len} does not match {:?} x {per_voxel} = {want}",
            grid.dims
        )));
    }
    Ok(())
}

/// Scalar intensity field.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    grid: Grid,
    data: Vec<f64>,
}

impl Volume3D {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        check_len(&grid, 1, data.len(), "volume")?;
        check_finite(&data, "volume")?;
        Ok(Volume3D { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        Volume3D { grid, data: vec![0.0; grid.len()] }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(grid.len());
        let [nx, ny, nz] = grid.dims;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume3D::new(grid, data)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Label volume viewed as a real field (0/1 for binary masks).
    pub fn from_labels(labels: &LabelVolume) -> Self {
        Volume3D {
            grid: labels.grid,
            data: labels.data.iter().map(|&l| f64::from(l)).collect(),
        }
    }
}

/// Integer label field with `num_labels` classes. Label 1 is brain, 0 is
/// background for binary masks.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    grid: Grid,
    num_labels: usize,
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(grid: Grid, num_labels: usize, data: Vec<u8>) -> Result<Self> {
        if !(2..=256).contains(&num_labels) {
            return Err(Error::InvalidVolume(format!(
                "num_labels must be in [2, 256], got {num_labels}"
            )));
        }
        check_len(&grid, 1, data.len(), "labels")?;
        if let Some(i) = data.iter().position(|&l| usize::from(l) >= num_labels) {
            return Err(Error::InvalidVolume(format!(
                "label {} at voxel {i} outside [0, {num_labels})",
                data[i]
            )));
        }
        Ok(LabelVolume { grid, num_labels, data })
    }

    /// Binary mask from a predicate on voxel coordinates.
    pub fn mask_from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        let [nx, ny, nz] = grid.dims;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(u8::from(f(x, y, z)));
                }
            }
        }
        LabelVolume { grid, num_labels: 2, data }
    }

    pub fn zeros(grid: Grid, num_labels: usize) -> Result<Self> {
        LabelVolume::new(grid, num_labels, vec![0; grid.len()])
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }

    pub fn is_binary(&self) -> bool {
        self.num_labels == 2
    }

    /// Errors unless this is a two-label mask.
    pub fn ensure_binary(&self, what: &str) -> Result<()> {
        if self.is_binary() {
            Ok(())
        } else {
            Err(Error::Type(format!(
                "{what}: expected a binary mask, got {} labels",
                self.num_labels
            )))
        }
    }

    /// Builds a label volume from real-valued data that must hold exact
    /// integers in `[0, num_labels)`.
    pub fn from_real(grid: Grid, num_labels: usize, data: &[f64]) -> Result<Self> {
        let mut labels = Vec::with_capacity(data.len());
        for (i, &v) in data.iter().enumerate() {
            if v != math::floor(v) || v < 0.0 || v >= num_labels as f64 {
                return Err(Error::InvalidVolume(format!(
                    "voxel {i} holds {v}, not a label in [0, {num_labels})"
                )));
            }
            labels.push(v as u8);
        }
        LabelVolume::new(grid, num_labels, labels)
    }
}

/// Per-voxel probability distribution over `num_labels` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    grid: Grid,
    num_labels: usize,
    data: Vec<f64>,
}

impl ProbVolume {
    pub fn new(grid: Grid, num_labels: usize, data: Vec<f64>) -> Result<Self> {
        if num_labels < 2 {
            return Err(Error::InvalidVolume(format!("num_labels must be >= 2, got {num_labels}")));
        }
        check_len(&grid, num_labels, data.len(), "probabilities")?;
        for (v, p) in data.chunks_exact(num_labels).enumerate() {
            if p.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::InvalidVolume(format!(
                    "probability outside [0, 1] at voxel {v}: {p:?}"
                )));
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::InvalidVolume(format!(
                    "probabilities at voxel {v} sum to {sum}"
                )));
            }
        }
        Ok(ProbVolume { grid, num_labels, data })
    }

    /// Certain distribution (one-hot) for every voxel of a label volume.
    pub fn one_hot(labels: &LabelVolume) -> Self {
        let l = labels.num_labels;
        let mut data = vec![0.0; labels.data.len() * l];
        for (i, &lab) in labels.data.iter().enumerate() {
            data[i * l + usize::from(lab)] = 1.0;
        }
        ProbVolume { grid: labels.grid, num_labels: l, data }
    }

    /// Reassembles per-label channels (e.g. read back from separate files).
    pub fn from_channels(channels: &[Volume3D]) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::Argument("no probability channels".into()))?;
        for (i, c) in channels.iter().enumerate().skip(1) {
            c.grid.ensure_same(&first.grid, &format!("probability channel {i}"))?;
        }
        let l = channels.len();
        let mut data = vec![0.0; first.data.len() * l];
        for (lab, c) in channels.iter().enumerate() {
            for (i, &v) in c.data.iter().enumerate() {
                data[i * l + lab] = v;
            }
        }
        ProbVolume::new(first.grid, l, data)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Distribution at voxel `index`.
    pub fn voxel(&self, index: usize) -> &[f64] {
        &self.data[index * self.num_labels..(index + 1) * self.num_labels]
    }

    pub fn channel(&self, label: usize) -> Volume3D {
        assert!(label < self.num_labels, "label {label} out of range");
        Volume3D {
            grid: self.grid,
            data: self.data.iter().skip(label).step_by(self.num_labels).copied().collect(),
        }
    }

    /// Per-voxel most probable label; ties go to the lower label index.
    pub fn argmax(&self) -> LabelVolume {
        let data = self
            .data
            .chunks_exact(self.num_labels)
            .map(|p| crate::math::argmax(p) as u8)
            .collect();
        LabelVolume { grid: self.grid, num_labels: self.num_labels, data }
    }
}

/// Non-negative per-voxel model uncertainty.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyVolume {
    grid: Grid,
    data: Vec<f64>,
}

impl UncertaintyVolume {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        check_len(&grid, 1, data.len(), "uncertainty")?;
        check_finite(&data, "uncertainty")?;
        if let Some(i) = data.iter().position(|&v| v < 0.0) {
            return Err(Error::InvalidVolume(format!(
                "negative uncertainty {} at voxel {i}",
                data[i]
            )));
        }
        Ok(UncertaintyVolume { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        UncertaintyVolume { grid, data: vec![0.0; grid.len()] }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    pub fn to_volume(&self) -> Volume3D {
        Volume3D { grid: self.grid, data: self.data.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(d: [usize; 3]) -> Grid {
        Grid::new(d, [1.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn rejects_bad_spacing_and_length() {
        assert!(Grid::new([2, 2, 2], [1.0, 0.0, 1.0]).is_err());
        assert!(Grid::new([0, 2, 2], [1.0; 3]).is_err());
        assert!(Volume3D::new(grid([2, 2, 2]), vec![0.0; 7]).is_err());
        assert!(Volume3D::new(grid([1, 1, 2]), vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn label_range_is_enforced() {
        assert!(LabelVolume::new(grid([1, 1, 2]), 2, vec![0, 2]).is_err());
        assert!(LabelVolume::new(grid([1, 1, 2]), 3, vec![0, 2]).is_ok());
    }

    #[test]
    fn prob_simplex_is_enforced() {
        let g = grid([1, 1, 2]);
        assert!(ProbVolume::new(g, 2, vec![0.5, 0.5, 0.2, 0.7]).is_err());
        assert!(ProbVolume::new(g, 2, vec![0.5, 0.5, -0.1, 1.1]).is_err());
        let p = ProbVolume::new(g, 2, vec![0.5, 0.5, 0.3, 0.7]).unwrap();
        assert_eq!(p.argmax().data(), &[0, 1]);
    }

    #[test]
    fn channels_reassemble() {
        let g = grid([2, 1, 1]);
        let p = ProbVolume::new(g, 3, vec![0.2, 0.3, 0.5, 1.0, 0.0, 0.0]).unwrap();
        let chans: Vec<_> = (0..3).map(|l| p.channel(l)).collect();
        assert_eq!(ProbVolume::from_channels(&chans).unwrap(), p);
    }

    #[test]
    fn negative_uncertainty_rejected() {
        assert!(UncertaintyVolume::new(grid([1, 1, 1]), vec![-1e-3]).is_err());
    }

    proptest! {
        #[test]
        fn flatten_unflatten_bijection(nx in 1usize..9, ny in 1usize..9, nz in 1usize..9, seed in any::<u64>()) {
            let g = grid([nx, ny, nz]);
            let i = (seed as usize) % g.len();
            let [x, y, z] = g.coords(i);
            prop_assert_eq!(g.index(x, y, z), i);
            prop_assert!(x < nx && y < ny && z < nz);
        }
    }
}
