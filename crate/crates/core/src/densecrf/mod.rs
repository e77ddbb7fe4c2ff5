//! Fully connected CRF over a voxel grid: Gaussian appearance and smoothness
//! kernels, Potts compatibility, parallel mean-field inference.

mod grid;
mod lattice;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use grid::{GridFilter, GridSource};
pub use lattice::{Lattice, MAX_DIM};

use crate::volume::{Grid, LabelVolume, ProbVolume, Volume3D};
use crate::{math, Error, Result};

/// Largest point count the exact O(N^2) filter and energy accept by default.
pub const NAIVE_CAP: usize = 20_000;
/// Largest labeling space `exact_map_bruteforce` enumerates.
pub const BRUTEFORCE_CAP: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfParams {
    /// Appearance kernel weight.
    pub w1: f64,
    /// Smoothness kernel weight.
    pub w2: f64,
    /// Appearance spatial scale in voxels.
    pub theta_alpha: f64,
    /// Appearance intensity scale in normalized intensity units.
    pub theta_beta: f64,
    /// Smoothness spatial scale in voxels.
    pub theta_gamma: f64,
    pub iterations: usize,
    pub unary_floor: f64,
    pub normalization: Normalization,
}

/// Scaling of the pairwise kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Raw kernel values.
    None,
    /// `k_ij / sqrt(d_i d_j)` with degree `d_i = sum_j k_ij`, self included.
    #[default]
    Symmetric,
}

impl core::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Normalization::None),
            "symmetric" => Ok(Normalization::Symmetric),
            _ => Err(Error::Argument(format!("unknown normalization '{s}', expected none or symmetric"))),
        }
    }
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams {
            w1: 3.0,
            w2: 1.0,
            theta_alpha: 4.0,
            theta_beta: 1.0,
            theta_gamma: 4.0,
            iterations: 5,
            unary_floor: 1e-10,
            normalization: Normalization::Symmetric,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("w1", self.w1), ("w2", self.w2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        for (name, v) in [
            ("theta_alpha", self.theta_alpha),
            ("theta_beta", self.theta_beta),
            ("theta_gamma", self.theta_gamma),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be finite and positive, got {v}")));
            }
        }
        if !(self.unary_floor > 0.0 && self.unary_floor <= 1.0) {
            return Err(Error::Config(format!("unary_floor must lie in (0, 1], got {}", self.unary_floor)));
        }
        Ok(())
    }
}

/// Message-passing filter used by mean-field inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    /// Linear-time filtering: exact separable filtering when the features
    /// come from a voxel grid, the permutohedral lattice otherwise.
    #[default]
    Fast,
    /// Always the permutohedral lattice.
    Lattice,
    /// Exact O(N^2) pairwise sums.
    Naive,
}

impl core::str::FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(FilterKind::Fast),
            "lattice" => Ok(FilterKind::Lattice),
            "naive" => Ok(FilterKind::Naive),
            _ => Err(Error::Argument(format!("unknown filter '{s}', expected fast, lattice or naive"))),
        }
    }
}

/// Per-voxel, per-label unary energies, interleaved like [`ProbVolume`].
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryField {
    grid: Grid,
    num_labels: usize,
    data: Vec<f64>,
}

impl UnaryField {
    pub fn new(grid: Grid, num_labels: usize, data: Vec<f64>) -> Result<Self> {
        if num_labels < 2 {
            return Err(Error::Argument(format!("need at least 2 labels, got {num_labels}")));
        }
        if data.len() != grid.len() * num_labels {
            return Err(Error::Shape(format!(
                "unary field has {} entries, expected {} voxels x {num_labels} labels",
                data.len(),
                grid.len()
            )));
        }
        if let Some(i) = data.iter().position(|u| !(u.is_finite() && *u >= 0.0)) {
            return Err(Error::InvalidVolume(format!(
                "unary entry {i} is {}, must be finite and non-negative",
                data[i]
            )));
        }
        Ok(UnaryField { grid, num_labels, data })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn voxel(&self, index: usize) -> &[f64] {
        &self.data[index * self.num_labels..(index + 1) * self.num_labels]
    }
}

/// `u_i(l) = -ln(max(p_i(l), floor))`.
pub fn unary_from_prob(probs: &ProbVolume, floor: f64) -> UnaryField {
    let floor = floor.max(f64::MIN_POSITIVE);
    let data = probs.data().iter().map(|&p| -math::ln(p.max(floor))).collect();
    UnaryField { grid: *probs.grid(), num_labels: probs.num_labels(), data }
}

/// Point features, `dim` values per point.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    dim: usize,
    data: Vec<f64>,
}

impl Features {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Shape(format!("{} feature values do not split into {dim}-vectors", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume(format!("feature value {i} is not finite")));
        }
        Ok(Features { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn dist2(&self, i: usize, j: usize) -> f64 {
        self.point(i).iter().zip(self.point(j)).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

/// Appearance `(x, y, z, I)` and smoothness `(x, y, z)` features, already
/// divided by their kernel scales.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    grid: Grid,
    appearance: Features,
    smoothness: Features,
    source: Option<GridSource>,
}

impl FeatureSet {
    pub fn from_image(image: &Volume3D, params: &CrfParams) -> Result<Self> {
        params.validate()?;
        let (lo, hi) = image.min_max();
        if lo < -1e-9 || hi > 1.0 + 1e-9 {
            return Err(Error::Argument(format!(
                "CRF intensities must be normalized to [0, 1], got [{lo}, {hi}]"
            )));
        }
        let grid = *image.grid();
        let mut app = Vec::with_capacity(grid.len() * 4);
        let mut sm = Vec::with_capacity(grid.len() * 3);
        for (i, &v) in image.data().iter().enumerate() {
            let c = grid.coords(i);
            for k in c {
                app.push(k as f64 / params.theta_alpha);
            }
            app.push(v / params.theta_beta);
            for k in c {
                sm.push(k as f64 / params.theta_gamma);
            }
        }
        let mut set = Self::from_parts(grid, Features::new(4, app)?, Features::new(3, sm)?)?;
        set.source = Some(GridSource {
            dims: grid.dims(),
            theta_alpha: params.theta_alpha,
            theta_gamma: params.theta_gamma,
            intensity: image.data().iter().map(|v| v / params.theta_beta).collect(),
        });
        Ok(set)
    }

    pub fn from_parts(grid: Grid, appearance: Features, smoothness: Features) -> Result<Self> {
        for (name, f) in [("appearance", &appearance), ("smoothness", &smoothness)] {
            if f.len() != grid.len() {
                return Err(Error::Shape(format!(
                    "{name} features cover {} points, grid has {} voxels",
                    f.len(),
                    grid.len()
                )));
            }
        }
        Ok(FeatureSet { grid, appearance, smoothness, source: None })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn appearance(&self) -> &Features {
        &self.appearance
    }

    pub fn smoothness(&self) -> &Features {
        &self.smoothness
    }
}

fn check_values(values: &[f64], channels: usize, features: &Features) -> Result<()> {
    if channels == 0 || values.len() != features.len() * channels {
        return Err(Error::Shape(format!(
            "{} values for {} points with {channels} channels",
            values.len(),
            features.len()
        )));
    }
    Ok(())
}

/// Exact `out_i = sum_{j != i} exp(-|f_i - f_j|^2 / 2) v_j` over
/// `channels`-interleaved values. Refuses more than [`NAIVE_CAP`] points.
pub fn gaussian_filter_naive(values: &[f64], channels: usize, features: &Features) -> Result<Vec<f64>> {
    gaussian_filter_naive_capped(values, channels, features, NAIVE_CAP)
}

pub fn gaussian_filter_naive_capped(
    values: &[f64],
    channels: usize,
    features: &Features,
    cap: usize,
) -> Result<Vec<f64>> {
    check_values(values, channels, features)?;
    let n = features.len();
    if n > cap {
        return Err(Error::Refused(format!(
            "naive filter over {n} points exceeds the cap of {cap}; use the fast filter"
        )));
    }
    let c = channels;
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        for j in i + 1..n {
            let k = math::exp(-0.5 * features.dist2(i, j));
            for ch in 0..c {
                out[i * c + ch] += k * values[j * c + ch];
                out[j * c + ch] += k * values[i * c + ch];
            }
        }
    }
    Ok(out)
}

/// Permutohedral-lattice approximation of [`gaussian_filter_naive`].
pub fn gaussian_filter_fast(values: &[f64], channels: usize, features: &Features) -> Result<Vec<f64>> {
    check_values(values, channels, features)?;
    Lattice::new(features)?.filter(values, channels)
}

enum Engine {
    Naive,
    Grid(GridFilter),
    Lattice { appearance: Lattice, smoothness: Lattice },
}

/// Message-passing filters bound to one feature set.
pub struct Pairwise<'a> {
    features: &'a FeatureSet,
    engine: Engine,
    /// `1 / sqrt(degree)` per voxel for the appearance and smoothness kernels.
    scaling: Option<[Vec<f64>; 2]>,
}

impl<'a> Pairwise<'a> {
    pub fn new(features: &'a FeatureSet, kind: FilterKind, normalization: Normalization) -> Result<Self> {
        let engine = match kind {
            FilterKind::Naive => {
                let n = features.grid.len();
                if n > NAIVE_CAP {
                    return Err(Error::Refused(format!(
                        "naive filter over {n} voxels exceeds the cap of {NAIVE_CAP}; use the fast filter"
                    )));
                }
                Engine::Naive
            }
            FilterKind::Fast => match features.source.as_ref().and_then(GridFilter::new) {
                Some(g) => Engine::Grid(g),
                None => Self::lattices(features)?,
            },
            FilterKind::Lattice => Self::lattices(features)?,
        };
        let mut pairwise = Pairwise { features, engine, scaling: None };
        if normalization == Normalization::Symmetric {
            let ones = vec![1.0; features.grid.len()];
            let scaling = [true, false].map(|app| {
                pairwise.filter(&ones, 1, app).map(|f| f.iter().map(|k| 1.0 / math::sqrt((1.0 + k).max(1e-12))).collect())
            });
            let [a, b] = scaling;
            pairwise.scaling = Some([a?, b?]);
        }
        Ok(pairwise)
    }

    fn filter(&self, values: &[f64], channels: usize, appearance: bool) -> Result<Vec<f64>> {
        Ok(match &self.engine {
            Engine::Naive => {
                let f = if appearance { &self.features.appearance } else { &self.features.smoothness };
                gaussian_filter_naive(values, channels, f)?
            }
            Engine::Grid(g) if appearance => g.appearance(values, channels),
            Engine::Grid(g) => g.smoothness(values, channels),
            Engine::Lattice { appearance: a, .. } if appearance => a.filter(values, channels)?,
            Engine::Lattice { smoothness: s, .. } => s.filter(values, channels)?,
        })
    }

    fn lattices(features: &FeatureSet) -> Result<Engine> {
        Ok(Engine::Lattice {
            appearance: Lattice::new(&features.appearance)?,
            smoothness: Lattice::new(&features.smoothness)?,
        })
    }

    pub fn features(&self) -> &FeatureSet {
        self.features
    }

    /// `w1 * appearance(q) + w2 * smoothness(q)` per voxel and label.
    pub fn messages(&self, q: &[f64], labels: usize, params: &CrfParams) -> Result<Vec<f64>> {
        let mut out = vec![0.0; q.len()];
        for (k, (w, appearance)) in [(params.w1, true), (params.w2, false)].into_iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            match &self.scaling {
                None => {
                    let filtered = self.filter(q, labels, appearance)?;
                    for (o, f) in out.iter_mut().zip(filtered) {
                        *o += w * f;
                    }
                }
                Some(scaling) => {
                    let s = &scaling[k];
                    let scaled: Vec<f64> =
                        q.iter().enumerate().map(|(i, v)| v * s[i / labels]).collect();
                    let filtered = self.filter(&scaled, labels, appearance)?;
                    for (i, (o, f)) in out.iter_mut().zip(filtered).enumerate() {
                        *o += w * s[i / labels] * f;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// One parallel mean-field update:
/// `Q'_i(l) ∝ exp(-u_i(l) - sum_{l' != l} m_i(l'))`.
pub fn meanfield_step(
    q: &ProbVolume,
    unary: &UnaryField,
    pairwise: &Pairwise<'_>,
    params: &CrfParams,
) -> Result<ProbVolume> {
    q.grid().ensure_same(unary.grid(), "Q vs unary")?;
    q.grid().ensure_same(pairwise.features.grid(), "Q vs features")?;
    let labels = q.num_labels();
    if unary.num_labels() != labels {
        return Err(Error::Shape(format!("Q has {labels} labels, unary {}", unary.num_labels())));
    }
    let m = pairwise.messages(q.data(), labels, params)?;
    let mut out = vec![0.0; q.data().len()];
    let mut logits = vec![0.0; labels];
    for i in 0..q.grid().len() {
        let mi = &m[i * labels..(i + 1) * labels];
        let total: f64 = mi.iter().sum();
        for (l, logit) in logits.iter_mut().enumerate() {
            *logit = -(unary.voxel(i)[l] + (total - mi[l]));
        }
        math::softmax(&logits, &mut out[i * labels..(i + 1) * labels]);
    }
    ProbVolume::new(*q.grid(), labels, out)
}

/// Refines `probs` with `params.iterations` mean-field steps using `image`
/// as the appearance intensity. Returns the final Q and its argmax.
pub fn infer(
    probs: &ProbVolume,
    image: &Volume3D,
    params: &CrfParams,
    kind: FilterKind,
) -> Result<(ProbVolume, LabelVolume)> {
    params.validate()?;
    probs.grid().ensure_same(image.grid(), "probabilities vs image")?;
    if params.iterations == 0 {
        return Ok((probs.clone(), probs.argmax()));
    }
    let unary = unary_from_prob(probs, params.unary_floor);
    let features = FeatureSet::from_image(image, params)?;
    let pairwise = Pairwise::new(&features, kind, params.normalization)?;
    let mut q = probs.clone();
    for it in 0..params.iterations {
        q = meanfield_step(&q, &unary, &pairwise, params)?;
        log::debug!("mean-field iteration {} done", it + 1);
    }
    let labels = q.argmax();
    Ok((q, labels))
}

fn check_energy_inputs(unary: &UnaryField, features: &FeatureSet) -> Result<usize> {
    unary.grid().ensure_same(features.grid(), "unary vs features")?;
    let n = unary.grid().len();
    if n > NAIVE_CAP {
        return Err(Error::Refused(format!(
            "exact pairwise energy over {n} voxels exceeds the cap of {NAIVE_CAP}"
        )));
    }
    Ok(n)
}

/// Exact pairwise weights `w1 k_app + w2 k_smooth` (normalized as configured)
/// for every pair `i < j`, visited in row-major order.
fn for_each_pair(features: &FeatureSet, params: &CrfParams, mut f: impl FnMut(usize, usize, f64)) {
    let n = features.grid.len();
    let inv_sqrt_degree = |fs: &Features| -> Option<Vec<f64>> {
        if params.normalization == Normalization::None {
            return None;
        }
        let mut d = vec![1.0; n];
        for i in 0..n {
            for j in i + 1..n {
                let k = math::exp(-0.5 * fs.dist2(i, j));
                d[i] += k;
                d[j] += k;
            }
        }
        Some(d.iter().map(|v| 1.0 / math::sqrt(*v)).collect())
    };
    let sa = inv_sqrt_degree(&features.appearance);
    let ss = inv_sqrt_degree(&features.smoothness);
    for i in 0..n {
        for j in i + 1..n {
            let mut ka = math::exp(-0.5 * features.appearance.dist2(i, j));
            let mut ks = math::exp(-0.5 * features.smoothness.dist2(i, j));
            if let (Some(sa), Some(ss)) = (&sa, &ss) {
                ka *= sa[i] * sa[j];
                ks *= ss[i] * ss[j];
            }
            f(i, j, params.w1 * ka + params.w2 * ks);
        }
    }
}

/// `E(x) = sum_i u_i(x_i) + sum_{i<j} [x_i != x_j] (w1 k_app + w2 k_smooth)`.
pub fn gibbs_energy(
    labeling: &LabelVolume,
    unary: &UnaryField,
    features: &FeatureSet,
    params: &CrfParams,
) -> Result<f64> {
    let n = check_energy_inputs(unary, features)?;
    labeling.grid().ensure_same(unary.grid(), "labeling vs unary")?;
    if labeling.num_labels() != unary.num_labels() {
        return Err(Error::Shape(format!(
            "labeling has {} labels, unary {}",
            labeling.num_labels(),
            unary.num_labels()
        )));
    }
    let x = labeling.data();
    let mut e: f64 = (0..n).map(|i| unary.voxel(i)[x[i] as usize]).sum();
    for_each_pair(features, params, |i, j, w| {
        if x[i] != x[j] {
            e += w;
        }
    });
    Ok(e)
}

/// Global energy minimizer by enumeration; ties go to the lexicographically
/// smallest labeling (voxel 0 most significant).
pub fn exact_map_bruteforce(
    unary: &UnaryField,
    features: &FeatureSet,
    params: &CrfParams,
) -> Result<LabelVolume> {
    let n = check_energy_inputs(unary, features)?;
    let labels = unary.num_labels();
    let states = (labels as u64).checked_pow(n as u32).filter(|&s| s <= BRUTEFORCE_CAP);
    let Some(states) = states else {
        return Err(Error::Refused(format!(
            "{labels}^{n} labelings exceed the enumeration cap of {BRUTEFORCE_CAP}"
        )));
    };
    let mut weights = vec![0.0; n * n];
    for_each_pair(features, params, |i, j, w| weights[i * n + j] = w);
    let mut x = vec![0u8; n];
    let mut best = vec![0u8; n];
    let mut best_e = f64::INFINITY;
    for _ in 0..states {
        let mut e: f64 = (0..n).map(|i| unary.voxel(i)[x[i] as usize]).sum();
        for i in 0..n {
            for j in i + 1..n {
                if x[i] != x[j] {
                    e += weights[i * n + j];
                }
            }
        }
        if e < best_e {
            best_e = e;
            best.copy_from_slice(&x);
        }
        // odometer with the last voxel as least significant digit
        for k in (0..n).rev() {
            x[k] += 1;
            if (x[k] as usize) < labels {
                break;
            }
            x[k] = 0;
        }
    }
    LabelVolume::new(*unary.grid(), labels, best)
}
