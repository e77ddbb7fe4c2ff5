//! Exact Gaussian filtering for features that lie on the voxel grid.
//!
//! The spatial part of both kernels factors over the three axes. The
//! intensity part `exp(-(a_i - a_j)^2 / 2)` is expanded as
//! `e^{-a_i^2/2} e^{-a_j^2/2} sum_n (a_i a_j)^n / n!` around the intensity
//! midpoint, so each series term is one more separable pass.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

/// Spatial taps are cut where the kernel drops below this value.
const TAIL: f64 = 1e-12;
/// Series terms are added until the remainder bound falls below this.
const SERIES_TOL: f64 = 1e-13;
/// Beyond this many series terms the lattice is used instead.
pub(crate) const MAX_TERMS: usize = 48;

/// Per-voxel intensity features of a grid, in kernel units.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct GridSource {
    pub dims: [usize; 3],
    pub theta_alpha: f64,
    pub theta_gamma: f64,
    pub intensity: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct GridFilter {
    dims: [usize; 3],
    taps_alpha: [Vec<f64>; 3],
    taps_gamma: [Vec<f64>; 3],
    envelope: Vec<f64>,
    centered: Vec<f64>,
    terms: usize,
}

fn taps(theta: f64, n: usize) -> Vec<f64> {
    let cut = math::ceil(theta * math::sqrt(-2.0 * math::ln(TAIL))) as usize;
    let r = cut.min(n.saturating_sub(1));
    (0..=r).map(|k| math::exp(-0.5 * (k as f64 / theta) * (k as f64 / theta))).collect()
}

fn series_terms(rho: f64) -> Option<usize> {
    // remainder after terms 0..=n is bounded by rho^(n+1) / (n+1)! * e^rho
    let mut bound = math::exp(rho);
    for n in 0..=MAX_TERMS {
        bound *= rho / (n + 1) as f64;
        if bound <= SERIES_TOL {
            return Some(n);
        }
    }
    None
}

/// `out[t] = sum_k g[|k|] line[t + k]` with zeros outside the line. `padded`
/// holds the line with `r` zeros on both sides.
fn convolve_line(padded: &[f64], g: &[f64], out: &mut [f64]) {
    let r = g.len() - 1;
    let n = out.len();
    for (o, &v) in out.iter_mut().zip(&padded[r..r + n]) {
        *o = g[0] * v;
    }
    for (k, &w) in g.iter().enumerate().skip(1) {
        let lo = &padded[r - k..r - k + n];
        let hi = &padded[r + k..r + k + n];
        for ((o, &a), &b) in out.iter_mut().zip(lo).zip(hi) {
            *o += w * (a + b);
        }
    }
}

impl GridFilter {
    pub fn new(src: &GridSource) -> Option<Self> {
        let (lo, hi) = src
            .intensity
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let (mid, half) = if lo.is_finite() { (0.5 * (lo + hi), 0.5 * (hi - lo)) } else { (0.0, 0.0) };
        let terms = series_terms(half * half)?;
        let centered: Vec<f64> = src.intensity.iter().map(|v| v - mid).collect();
        let envelope = centered.iter().map(|a| math::exp(-0.5 * a * a)).collect();
        let d = src.dims;
        Some(GridFilter {
            dims: d,
            taps_alpha: [0, 1, 2].map(|k| taps(src.theta_alpha, d[k])),
            taps_gamma: [0, 1, 2].map(|k| taps(src.theta_gamma, d[k])),
            envelope,
            centered,
            terms,
        })
    }

    /// Separable Gaussian blur of one scalar field, in place.
    fn blur(&self, field: &mut [f64], taps: &[Vec<f64>; 3]) {
        let [nx, ny, nz] = self.dims;
        let strides = [1, nx, nx * ny];
        for axis in 0..3 {
            let n = self.dims[axis];
            let g = &taps[axis];
            let r = g.len() - 1;
            if r == 0 {
                continue;
            }
            let stride = strides[axis];
            let (o1, o2) = match axis {
                0 => ((ny, nx), (nz, nx * ny)),
                1 => ((nx, 1), (nz, nx * ny)),
                _ => ((nx, 1), (ny, nx)),
            };
            let mut padded = vec![0.0; n + 2 * r];
            let mut out = vec![0.0; n];
            for b in 0..o2.0 {
                for a in 0..o1.0 {
                    let base = a * o1.1 + b * o2.1;
                    for t in 0..n {
                        padded[r + t] = field[base + t * stride];
                    }
                    convolve_line(&padded, g, &mut out);
                    for (t, &v) in out.iter().enumerate() {
                        field[base + t * stride] = v;
                    }
                }
            }
        }
    }

    fn for_each_channel(
        &self,
        values: &[f64],
        channels: usize,
        mut f: impl FnMut(&[f64]) -> Vec<f64>,
    ) -> Vec<f64> {
        let n = values.len() / channels;
        let mut out = vec![0.0; values.len()];
        let mut plane = vec![0.0; n];
        for ch in 0..channels {
            for (i, p) in plane.iter_mut().enumerate() {
                *p = values[i * channels + ch];
            }
            let filtered = f(&plane);
            for (i, &v) in filtered.iter().enumerate() {
                out[i * channels + ch] = v;
            }
        }
        out
    }

    /// Smoothness kernel over `channels`-interleaved values, self term
    /// excluded.
    pub fn smoothness(&self, values: &[f64], channels: usize) -> Vec<f64> {
        self.for_each_channel(values, channels, |v| {
            let mut out = v.to_vec();
            self.blur(&mut out, &self.taps_gamma);
            for (o, x) in out.iter_mut().zip(v) {
                *o -= x;
            }
            out
        })
    }

    /// Appearance kernel over `channels`-interleaved values, self term
    /// excluded.
    pub fn appearance(&self, values: &[f64], channels: usize) -> Vec<f64> {
        self.for_each_channel(values, channels, |v| {
            let n = v.len();
            let mut out = vec![0.0; n];
            // source side carries e^{-a^2/2} a^k, target side e^{-a^2/2} a^k / k!
            let mut src_pow = self.envelope.clone();
            let mut dst_coef = self.envelope.clone();
            let mut buf = vec![0.0; n];
            for k in 0..=self.terms {
                if k > 0 {
                    let inv = 1.0 / k as f64;
                    for i in 0..n {
                        src_pow[i] *= self.centered[i];
                        dst_coef[i] *= self.centered[i] * inv;
                    }
                }
                for i in 0..n {
                    buf[i] = src_pow[i] * v[i];
                }
                self.blur(&mut buf, &self.taps_alpha);
                for i in 0..n {
                    out[i] += dst_coef[i] * buf[i];
                }
            }
            for (o, x) in out.iter_mut().zip(v) {
                *o -= x;
            }
            out
        })
    }
}
