//! Segmentation metrics, error maps, uncertainty aggregates and paired
//! statistics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::preprocess::Image2D;
use crate::volume::{Axis, Grid, LabelVolume, UncertaintyVolume, Volume3D};
use crate::{math, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

fn check_pair(m: &LabelVolume, r: &LabelVolume) -> Result<()> {
    m.grid().ensure_same(r.grid(), "mask vs reference")?;
    m.ensure_binary("mask")?;
    r.ensure_binary("reference")
}

/// Voxel-wise confusion counts of mask `m` against reference `r`.
pub fn confusion(m: &LabelVolume, r: &LabelVolume) -> Result<ConfusionCounts> {
    check_pair(m, r)?;
    let mut c = ConfusionCounts::default();
    for (&a, &b) in m.data().iter().zip(r.data()) {
        match (a, b) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `2TP / (2TP + FP + FN)`; two empty masks count as perfect agreement.
pub fn dice(c: &ConfusionCounts) -> f64 {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        log::warn!("dice of two empty masks defined as 1");
        return 1.0;
    }
    (2 * c.tp) as f64 / den as f64
}

pub fn sensitivity(c: &ConfusionCounts) -> Result<f64> {
    let den = c.tp + c.fn_;
    if den == 0 {
        return Err(Error::Undefined("sensitivity with an empty reference (TP + FN = 0)".into()));
    }
    Ok(c.tp as f64 / den as f64)
}

pub fn specificity(c: &ConfusionCounts) -> Result<f64> {
    let den = c.tn + c.fp;
    if den == 0 {
        return Err(Error::Undefined("specificity with no reference background (TN + FP = 0)".into()));
    }
    Ok(c.tn as f64 / den as f64)
}

/// Mask voxels with at least one of their six face neighbours outside the
/// mask. Faces on the volume border count as outside.
pub fn extract_boundary(mask: &LabelVolume) -> Result<Vec<[usize; 3]>> {
    mask.ensure_binary("extract_boundary")?;
    let grid = mask.grid();
    let [nx, ny, nz] = grid.dims();
    let d = mask.data();
    let inside = |x: usize, y: usize, z: usize| d[grid.index(x, y, z)] == 1;
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !inside(x, y, z) {
                    continue;
                }
                let exposed = x == 0
                    || y == 0
                    || z == 0
                    || x + 1 == nx
                    || y + 1 == ny
                    || z + 1 == nz
                    || !inside(x - 1, y, z)
                    || !inside(x + 1, y, z)
                    || !inside(x, y - 1, z)
                    || !inside(x, y + 1, z)
                    || !inside(x, y, z - 1)
                    || !inside(x, y, z + 1);
                if exposed {
                    out.push([x, y, z]);
                }
            }
        }
    }
    Ok(out)
}

/// Squared physical distance between voxel centers. Both surface-distance
/// paths use this exact expression so their results agree bit for bit.
#[inline]
pub fn dist2(a: [usize; 3], b: [usize; 3], spacing: [f64; 3]) -> f64 {
    let d = |k: usize| (a[k] as f64 - b[k] as f64) * spacing[k];
    let (dx, dy, dz) = (d(0), d(1), d(2));
    (dx * dx + dy * dy) + dz * dz
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    pub hausdorff: f64,
    pub assd: f64,
}

/// How nearest-surface queries are answered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceSearch {
    /// Full double loop over both surfaces.
    Exhaustive,
    /// Bucketed spatial search.
    Bucketed,
    /// Exhaustive for small surfaces, bucketed otherwise.
    Auto,
}

const EXHAUSTIVE_LIMIT: usize = 1 << 20;
const BUCKET: usize = 4;

struct Buckets<'a> {
    counts: [usize; 3],
    cells: Vec<Vec<[usize; 3]>>,
    spacing: [f64; 3],
    _points: core::marker::PhantomData<&'a ()>,
}

impl<'a> Buckets<'a> {
    fn new(points: &[[usize; 3]], grid: &Grid) -> Self {
        let dims = grid.dims();
        let counts = dims.map(|d| d.div_ceil(BUCKET));
        let mut cells = vec![Vec::new(); counts[0] * counts[1] * counts[2]];
        for &p in points {
            let b = p.map(|c| c / BUCKET);
            cells[b[0] + counts[0] * (b[1] + counts[1] * b[2])].push(p);
        }
        Buckets { counts, cells, spacing: grid.spacing(), _points: core::marker::PhantomData }
    }

    /// Smallest squared distance from `q` to any stored point.
    fn nearest2(&self, q: [usize; 3]) -> f64 {
        let qb = q.map(|c| (c / BUCKET) as i64);
        let min_step = self.spacing.iter().copied().fold(f64::INFINITY, f64::min);
        let max_ring = self.counts.iter().copied().max().unwrap_or(1) as i64;
        let mut best = f64::INFINITY;
        for ring in 0..=max_ring {
            for bz in qb[2] - ring..=qb[2] + ring {
                for by in qb[1] - ring..=qb[1] + ring {
                    for bx in qb[0] - ring..=qb[0] + ring {
                        let cheb = (bx - qb[0]).abs().max((by - qb[1]).abs()).max((bz - qb[2]).abs());
                        if cheb != ring {
                            continue;
                        }
                        let inb = |v: i64, n: usize| v >= 0 && (v as usize) < n;
                        if !(inb(bx, self.counts[0]) && inb(by, self.counts[1]) && inb(bz, self.counts[2])) {
                            continue;
                        }
                        let cell = &self.cells
                            [bx as usize + self.counts[0] * (by as usize + self.counts[1] * bz as usize)];
                        for &p in cell {
                            let d = dist2(q, p, self.spacing);
                            if d < best {
                                best = d;
                            }
                        }
                    }
                }
            }
            // anything in a farther ring is at least ring * BUCKET voxels away
            let bound = (ring as usize * BUCKET) as f64 * min_step;
            if best.is_finite() && best <= bound * bound {
                break;
            }
        }
        best
    }
}

fn directed(
    from: &[[usize; 3]],
    to: &[[usize; 3]],
    grid: &Grid,
    search: SurfaceSearch,
) -> (f64, f64) {
    let spacing = grid.spacing();
    let exhaustive = match search {
        SurfaceSearch::Exhaustive => true,
        SurfaceSearch::Bucketed => false,
        SurfaceSearch::Auto => from.len().saturating_mul(to.len()) <= EXHAUSTIVE_LIMIT,
    };
    let mut max = 0.0f64;
    let mut sum = 0.0;
    if exhaustive {
        for &a in from {
            let best = to.iter().map(|&b| dist2(a, b, spacing)).fold(f64::INFINITY, f64::min);
            let d = math::sqrt(best);
            max = max.max(d);
            sum += d;
        }
    } else {
        let buckets = Buckets::new(to, grid);
        for &a in from {
            let d = math::sqrt(buckets.nearest2(a));
            max = max.max(d);
            sum += d;
        }
    }
    (max, sum)
}

/// Hausdorff distance and average symmetric surface distance in mm.
pub fn surface_distances(
    m: &LabelVolume,
    r: &LabelVolume,
    search: SurfaceSearch,
) -> Result<SurfaceDistances> {
    check_pair(m, r)?;
    let bm = extract_boundary(m)?;
    let br = extract_boundary(r)?;
    if bm.is_empty() || br.is_empty() {
        return Err(Error::Undefined(format!(
            "undefined surface distance: mask surface has {} voxels, reference surface {}",
            bm.len(),
            br.len()
        )));
    }
    let (max_mr, sum_mr) = directed(&bm, &br, m.grid(), search);
    let (max_rm, sum_rm) = directed(&br, &bm, m.grid(), search);
    Ok(SurfaceDistances {
        hausdorff: max_mr.max(max_rm),
        assd: (sum_mr + sum_rm) / (bm.len() + br.len()) as f64,
    })
}

pub fn hausdorff(m: &LabelVolume, r: &LabelVolume) -> Result<f64> {
    Ok(surface_distances(m, r, SurfaceSearch::Auto)?.hausdorff)
}

pub fn assd(m: &LabelVolume, r: &LabelVolume) -> Result<f64> {
    Ok(surface_distances(m, r, SurfaceSearch::Auto)?.assd)
}

/// False-positive, false-negative and absolute error maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMaps {
    pub false_positive: LabelVolume,
    pub false_negative: LabelVolume,
    pub absolute: LabelVolume,
}

pub fn error_maps(m: &LabelVolume, r: &LabelVolume) -> Result<ErrorMaps> {
    check_pair(m, r)?;
    let grid = *m.grid();
    let n = grid.len();
    let (mut fp, mut fn_, mut abs) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (&a, &b) in m.data().iter().zip(r.data()) {
        let p = a == 1 && b == 0;
        let q = a == 0 && b == 1;
        fp.push(u8::from(p));
        fn_.push(u8::from(q));
        abs.push(u8::from(p || q));
    }
    Ok(ErrorMaps {
        false_positive: LabelVolume::new(grid, 2, fp)?,
        false_negative: LabelVolume::new(grid, 2, fn_)?,
        absolute: LabelVolume::new(grid, 2, abs)?,
    })
}

/// Averages aligned maps voxel-wise, averages along `axis`, and returns
/// `ln(mean + eps)` as an image (pixel layout as in slice decomposition).
pub fn average_log_collapse(maps: &[Volume3D], axis: Axis, eps: f64) -> Result<Image2D> {
    let first = maps.first().ok_or_else(|| Error::Argument("no maps to average".into()))?;
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("eps must be positive, got {eps}")));
    }
    for (i, v) in maps.iter().enumerate() {
        v.grid().ensure_same(first.grid(), &format!("map {i}"))?;
    }
    let grid = first.grid();
    let dims = grid.dims();
    let (a, b) = axis.in_plane();
    let (w, h, depth) = (dims[a], dims[b], dims[axis.index()]);
    let mut acc = vec![0.0; w * h];
    for i in 0..grid.len() {
        let c = grid.coords(i);
        let mean: f64 = maps.iter().map(|v| v.data()[i]).sum::<f64>() / maps.len() as f64;
        acc[c[b] * w + c[a]] += mean;
    }
    let data = acc.iter().map(|&s| math::ln(s / depth as f64 + eps)).collect();
    Image2D::new(h, w, 1, data)
}

/// Root of the sum of squared per-voxel uncertainty over the ROI (or the
/// whole volume).
pub fn total_uncertainty(u: &UncertaintyVolume, roi: Option<&LabelVolume>) -> Result<f64> {
    let sum: f64 = match roi {
        None => u.data().iter().map(|v| v * v).sum(),
        Some(roi) => {
            roi.grid().ensure_same(u.grid(), "uncertainty ROI")?;
            roi.ensure_binary("uncertainty ROI")?;
            u.data()
                .iter()
                .zip(roi.data())
                .filter(|(_, &m)| m == 1)
                .map(|(v, _)| v * v)
                .sum()
        }
    };
    Ok(math::sqrt(sum))
}

/// Full evaluation of one mask against its reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice: f64,
    pub hd_mm: f64,
    pub assd_mm: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub total_uncertainty: Option<f64>,
}

impl MetricsReport {
    pub fn counts(&self) -> ConfusionCounts {
        ConfusionCounts { tp: self.tp, tn: self.tn, fp: self.fp, fn_: self.fn_ }
    }
}

pub fn evaluate(
    m: &LabelVolume,
    r: &LabelVolume,
    uncertainty: Option<&UncertaintyVolume>,
    roi: Option<&LabelVolume>,
) -> Result<MetricsReport> {
    let c = confusion(m, r)?;
    let sd = surface_distances(m, r, SurfaceSearch::Auto)?;
    let total_uncertainty = match uncertainty {
        Some(u) => {
            u.grid().ensure_same(m.grid(), "uncertainty vs mask")?;
            Some(total_uncertainty(u, roi)?)
        }
        None => None,
    };
    Ok(MetricsReport {
        dice: dice(&c),
        hd_mm: sd.hausdorff,
        assd_mm: sd.assd,
        sensitivity: sensitivity(&c)?,
        specificity: specificity(&c)?,
        tp: c.tp,
        tn: c.tn,
        fp: c.fp,
        fn_: c.fn_,
        total_uncertainty,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PValueMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Number of non-zero differences.
    pub n: usize,
    pub p_value: f64,
    pub method: PValueMethod,
}

impl WilcoxonResult {
    pub fn signed_statistic(&self) -> f64 {
        self.w_plus - self.w_minus
    }
}

/// Largest `n` for which the p-value is computed by exact enumeration.
pub const EXACT_MAX_N: usize = 12;
pub const MIN_PAIRS: usize = 5;

/// Ranked non-zero differences.
struct SignedRanks {
    /// Twice the (average) rank of each difference; always an integer.
    doubled: Vec<u64>,
    positive: Vec<bool>,
    /// Sizes of tied groups.
    ties: Vec<usize>,
}

impl SignedRanks {
    fn new(a: &[f64], b: &[f64]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::Argument(format!(
                "paired samples differ in length: {} vs {}",
                a.len(),
                b.len()
            )));
        }
        if let Some(i) = a.iter().chain(b).position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("non-finite sample value at position {i}")));
        }
        let mut diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
        if diffs.is_empty() {
            return Err(Error::Degenerate("all paired differences are zero".into()));
        }
        if diffs.len() < MIN_PAIRS {
            return Err(Error::Degenerate(format!(
                "only {} non-zero differences, need at least {MIN_PAIRS}",
                diffs.len()
            )));
        }
        diffs.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
        let n = diffs.len();
        let mut doubled = vec![0; n];
        let mut ties = Vec::new();
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && diffs[j + 1].abs() == diffs[i].abs() {
                j += 1;
            }
            // ranks i+1 ..= j+1 share their average (i + j + 2) / 2
            for d in &mut doubled[i..=j] {
                *d = (i + j + 2) as u64;
            }
            ties.push(j - i + 1);
            i = j + 1;
        }
        let positive = diffs.iter().map(|&d| d > 0.0).collect();
        Ok(SignedRanks { doubled, positive, ties })
    }

    fn doubled_sums(&self) -> (u64, u64) {
        let mut plus = 0;
        let mut minus = 0;
        for (&r, &p) in self.doubled.iter().zip(&self.positive) {
            if p {
                plus += r;
            } else {
                minus += r;
            }
        }
        (plus, minus)
    }

    fn exact_p(&self) -> f64 {
        let (plus, minus) = self.doubled_sums();
        let w = plus.min(minus) as usize;
        let total: u64 = self.doubled.iter().sum();
        // counts[s] = number of sign patterns whose positive doubled-rank sum is s
        let mut counts = vec![0u64; total as usize + 1];
        counts[0] = 1;
        for &r in &self.doubled {
            let r = r as usize;
            for s in (r..counts.len()).rev() {
                counts[s] += counts[s - r];
            }
        }
        let below: u64 = counts[..=w].iter().sum();
        let patterns = 1u64 << self.doubled.len();
        (2.0 * below as f64 / patterns as f64).min(1.0)
    }

    fn normal_p(&self) -> Result<f64> {
        let n = self.doubled.len() as f64;
        let (plus, _) = self.doubled_sums();
        let mean = n * (n + 1.0) / 4.0;
        let tie_term: f64 = self.ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term;
        if !(var > 0.0) {
            return Err(Error::Degenerate("zero variance of the signed-rank statistic".into()));
        }
        let z = (((plus as f64 / 2.0) - mean).abs() - 0.5).max(0.0) / math::sqrt(var);
        Ok(math::erfc(z / core::f64::consts::SQRT_2).min(1.0))
    }

    fn result(&self, p_value: f64, method: PValueMethod) -> WilcoxonResult {
        let (plus, minus) = self.doubled_sums();
        let (wp, wm) = (plus as f64 / 2.0, minus as f64 / 2.0);
        WilcoxonResult { statistic: wp.min(wm), w_plus: wp, w_minus: wm, n: self.doubled.len(), p_value, method }
    }
}

/// Two-sided Wilcoxon signed-rank test with exact p-values for up to
/// [`EXACT_MAX_N`] non-zero differences and a tie- and continuity-corrected
/// normal approximation beyond.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    let ranks = SignedRanks::new(a, b)?;
    if ranks.doubled.len() <= EXACT_MAX_N {
        Ok(ranks.result(ranks.exact_p(), PValueMethod::Exact))
    } else {
        Ok(ranks.result(ranks.normal_p()?, PValueMethod::Normal))
    }
}

/// Forces the p-value method regardless of sample size.
pub fn wilcoxon_with(a: &[f64], b: &[f64], method: PValueMethod) -> Result<WilcoxonResult> {
    let ranks = SignedRanks::new(a, b)?;
    let p = match method {
        PValueMethod::Exact => {
            if ranks.doubled.len() > 62 {
                return Err(Error::Refused(format!(
                    "exact enumeration over 2^{} sign patterns",
                    ranks.doubled.len()
                )));
            }
            ranks.exact_p()
        }
        PValueMethod::Normal => ranks.normal_p()?,
    };
    Ok(ranks.result(p, method))
}

/// Bonferroni adjustment `min(1, m p)` for `m` comparisons.
pub fn bonferroni(p_values: &[f64], m: usize) -> Result<Vec<f64>> {
    if m < p_values.len() || m == 0 {
        return Err(Error::Argument(format!(
            "comparison count {m} smaller than the {} p-values",
            p_values.len()
        )));
    }
    Ok(p_values.iter().map(|&p| (p * m as f64).min(1.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(d: [usize; 3], s: f64) -> Grid {
        Grid::new(d, [s; 3]).unwrap()
    }

    fn mask(d: [usize; 3], f: impl FnMut(usize, usize, usize) -> bool) -> LabelVolume {
        LabelVolume::mask_from_fn(grid(d, 1.0), f)
    }

    #[test]
    fn confusion_identity_and_complement() {
        let m = mask([4, 4, 4], |x, y, _| x < 2 && y < 3);
        let c = confusion(&m, &m).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 24, tn: 40, fp: 0, fn_: 0 });
        let inv = mask([4, 4, 4], |x, y, _| !(x < 2 && y < 3));
        let c = confusion(&m, &inv).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert_eq!(c.total(), 64);
    }

    #[test]
    fn confusion_errors() {
        let a = mask([2, 2, 2], |_, _, _| true);
        let b = mask([2, 2, 3], |_, _, _| true);
        assert!(matches!(confusion(&a, &b), Err(Error::Shape(_))));
        let multi = LabelVolume::new(*a.grid(), 3, vec![0; 8]).unwrap();
        assert!(matches!(confusion(&a, &multi), Err(Error::Type(_))));
    }

    #[test]
    fn dice_fixtures() {
        let c = ConfusionCounts { tp: 2, tn: 10, fp: 2, fn_: 2 };
        assert_eq!(dice(&c), 0.5);
        let same = ConfusionCounts { tp: 5, tn: 3, fp: 0, fn_: 0 };
        assert_eq!((dice(&same), sensitivity(&same).unwrap(), specificity(&same).unwrap()), (1.0, 1.0, 1.0));
        let disjoint = ConfusionCounts { tp: 0, tn: 3, fp: 2, fn_: 2 };
        assert_eq!((dice(&disjoint), sensitivity(&disjoint).unwrap()), (0.0, 0.0));
        let empty = ConfusionCounts { tp: 0, tn: 8, fp: 0, fn_: 0 };
        assert_eq!(dice(&empty), 1.0);
        assert!(matches!(sensitivity(&empty), Err(Error::Undefined(_))));
    }

    #[test]
    fn boundary_fixtures() {
        let single = mask([3, 3, 3], |x, y, z| (x, y, z) == (1, 1, 1));
        assert_eq!(extract_boundary(&single).unwrap(), vec![[1, 1, 1]]);
        let cube = mask([5, 5, 5], |x, y, z| (1..4).contains(&x) && (1..4).contains(&y) && (1..4).contains(&z));
        let b = extract_boundary(&cube).unwrap();
        assert_eq!(b.len(), 26);
        assert!(!b.contains(&[2, 2, 2]));
        let plane = mask([4, 4, 3], |_, _, z| z == 1);
        assert_eq!(extract_boundary(&plane).unwrap().len(), 16);
        let empty = mask([2, 2, 2], |_, _, _| false);
        assert!(extract_boundary(&empty).unwrap().is_empty());
    }

    #[test]
    fn surface_distance_fixtures() {
        let g = grid([8, 3, 3], 0.5);
        let a = LabelVolume::mask_from_fn(g, |x, y, z| (x, y, z) == (1, 1, 1));
        let b = LabelVolume::mask_from_fn(g, |x, y, z| (x, y, z) == (4, 1, 1));
        for s in [SurfaceSearch::Exhaustive, SurfaceSearch::Bucketed] {
            let d = surface_distances(&a, &b, s).unwrap();
            assert_eq!((d.hausdorff, d.assd), (1.5, 1.5));
            let z = surface_distances(&a, &a, s).unwrap();
            assert_eq!((z.hausdorff, z.assd), (0.0, 0.0));
        }
        let empty = LabelVolume::mask_from_fn(g, |_, _, _| false);
        assert!(matches!(hausdorff(&a, &empty), Err(Error::Undefined(_))));
    }

    #[test]
    fn error_map_fixtures() {
        let m = mask([3, 3, 1], |x, _, _| x < 2);
        let r = mask([3, 3, 1], |x, _, _| x > 0);
        let e = error_maps(&m, &r).unwrap();
        assert_eq!(e.false_positive.count(1), 3);
        assert_eq!(e.false_negative.count(1), 3);
        assert_eq!(e.absolute.count(1), 6);
        let same = error_maps(&m, &m).unwrap();
        assert_eq!(same.absolute.count(1), 0);
    }

    #[test]
    fn log_collapse_fixtures() {
        let g = grid([2, 3, 4], 1.0);
        let zero = Volume3D::zeros(g);
        let one = Volume3D::new(g, vec![1.0; 24]).unwrap();
        let eps = 1e-6;
        for (maps, want) in [
            (vec![zero.clone()], math::ln(eps)),
            (vec![one.clone()], math::ln(1.0 + eps)),
            (vec![zero, one], math::ln(0.5 + eps)),
        ] {
            for axis in Axis::ALL {
                let img = average_log_collapse(&maps, axis, eps).unwrap();
                assert!(img.data().iter().all(|&v| (v - want).abs() < 1e-12));
            }
        }
        let img = average_log_collapse(&[Volume3D::zeros(g)], Axis::Z, eps).unwrap();
        assert_eq!(img.dims(), (3, 2));
    }

    #[test]
    fn total_uncertainty_fixtures() {
        let g = grid([2, 1, 1], 1.0);
        let u = UncertaintyVolume::new(g, vec![0.3, 0.4]).unwrap();
        assert!((total_uncertainty(&u, None).unwrap() - 0.5).abs() < 1e-15);
        let roi = LabelVolume::new(g, 2, vec![1, 0]).unwrap();
        assert_eq!(total_uncertainty(&u, Some(&roi)).unwrap(), 0.3);
        let all = LabelVolume::new(g, 2, vec![1, 1]).unwrap();
        assert_eq!(total_uncertainty(&u, Some(&all)).unwrap(), total_uncertainty(&u, None).unwrap());
        assert_eq!(total_uncertainty(&UncertaintyVolume::zeros(g), None).unwrap(), 0.0);
    }

    #[test]
    fn wilcoxon_textbook_case() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [0.0; 6];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.w_plus, 21.0);
        assert_eq!(r.p_value, 0.03125);
        assert_eq!(r.method, PValueMethod::Exact);
        let s = wilcoxon_signed_rank(&b, &a).unwrap();
        assert_eq!(s.p_value, r.p_value);
        assert_eq!(s.signed_statistic(), -r.signed_statistic());
    }

    #[test]
    fn wilcoxon_degenerate_paths() {
        let a = [1.0, 2.0, 3.0];
        assert!(matches!(wilcoxon_signed_rank(&a, &a), Err(Error::Degenerate(_))));
        let b = [1.0, 2.0, 3.5];
        assert!(matches!(wilcoxon_signed_rank(&a, &b), Err(Error::Degenerate(_))));
        assert!(matches!(wilcoxon_signed_rank(&a, &b[..2]), Err(Error::Argument(_))));
    }

    #[test]
    fn wilcoxon_ties_use_average_ranks() {
        let a = [1.0, -1.0, 2.0, 2.0, 3.0, 4.0];
        let r = wilcoxon_signed_rank(&a, &[0.0; 6]).unwrap();
        // |d| ranks: 1.5, 1.5, 3.5, 3.5, 5, 6
        assert_eq!(r.w_minus, 1.5);
        assert_eq!(r.w_plus, 19.5);
    }

    #[test]
    fn wilcoxon_large_n_uses_normal() {
        let a: Vec<f64> = (1..=20).map(f64::from).collect();
        let r = wilcoxon_signed_rank(&a, &[0.0; 20]).unwrap();
        assert_eq!(r.method, PValueMethod::Normal);
        assert!(r.p_value < 1e-3);
    }

    #[test]
    fn bonferroni_fixtures() {
        assert!((bonferroni(&[0.01], 5).unwrap()[0] - 0.05).abs() < 1e-15);
        assert_eq!(bonferroni(&[0.5], 3).unwrap(), vec![1.0]);
        assert_eq!(bonferroni(&[0.2, 0.3], 2).unwrap(), vec![0.4, 0.6]);
        assert_eq!(bonferroni(&[0.2], 1).unwrap(), vec![0.2]);
        assert!(bonferroni(&[0.1, 0.2], 1).is_err());
    }

    #[test]
    fn report_dice_is_recomputable() {
        let m = mask([6, 6, 6], |x, y, z| x > 1 && y > 1 && z > 1);
        let r = mask([6, 6, 6], |x, y, z| x > 2 && y > 1 && z > 1);
        let rep = evaluate(&m, &r, None, None).unwrap();
        assert_eq!(rep.dice, dice(&rep.counts()));
        assert!(rep.assd_mm <= rep.hd_mm);
    }
}
