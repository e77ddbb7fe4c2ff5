//! Permutohedral lattice (Adams, Baek & Davis) for approximate Gaussian
//! filtering in feature spaces of up to eight dimensions.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use hashbrown::HashMap;

use super::Features;
use crate::{math, Error, Result};

pub const MAX_DIM: usize = 8;
const NONE: u32 = u32::MAX;

type Key = [i32; MAX_DIM];

/// A lattice built over a fixed point set. Immutable once built; one lattice
/// filters any number of value fields over the same points.
#[derive(Debug, Clone)]
pub struct Lattice {
    dim: usize,
    points: usize,
    vertices: usize,
    /// Enclosing simplex vertices of each point, `dim + 1` per point.
    offsets: Vec<u32>,
    /// Barycentric weights matching `offsets`.
    weights: Vec<f64>,
    /// For each blur direction and vertex, the two neighbours along it.
    neighbours: Vec<[u32; 2]>,
    /// Response of each point to a unit value at itself.
    self_response: Vec<f64>,
    alpha: f64,
    norm: f64,
}

/// Lattice resolution relative to the textbook `sqrt(2/3) (d + 1)`. The
/// splat and slice interpolation widen the effective kernel; a slightly finer
/// lattice brings its short-range shape closer to the unit Gaussian.
const BANDWIDTH: f64 = 1.04;

fn scale_factors(d: usize) -> Vec<f64> {
    let inv_std = BANDWIDTH * math::sqrt(2.0 / 3.0) * (d + 1) as f64;
    (0..d).map(|i| inv_std / math::sqrt(((i + 1) * (i + 2)) as f64)).collect()
}

fn elevate(f: &[f64], scale: &[f64], out: &mut [f64]) {
    let d = f.len();
    let mut sm = 0.0;
    for j in (1..=d).rev() {
        let cf = f[j - 1] * scale[j - 1];
        out[j] = sm - j as f64 * cf;
        sm += cf;
    }
    out[0] = sm;
}

fn blur_neighbours(key: &Key, j: usize, d: usize) -> [Key; 2] {
    let mut n1 = *key;
    let mut n2 = *key;
    for i in 0..d {
        n1[i] -= 1;
        n2[i] += 1;
    }
    if j < d {
        n1[j] = key[j] + d as i32;
        n2[j] = key[j] - d as i32;
    }
    [n1, n2]
}

fn determinant(mut a: Vec<f64>, n: usize) -> f64 {
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&p, &q| a[p * n + col].abs().total_cmp(&a[q * n + col].abs()))
            .unwrap_or(col);
        if a[pivot * n + col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(pivot * n + k, col * n + k);
            }
            det = -det;
        }
        let p = a[col * n + col];
        det *= p;
        for row in col + 1..n {
            let factor = a[row * n + col] / p;
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
        }
    }
    det
}

/// Feature-space volume per lattice vertex.
fn cell_volume(d: usize, scale: &[f64]) -> f64 {
    // columns of the elevation map
    let mut m = vec![0.0; (d + 1) * d];
    let mut unit = vec![0.0; d];
    let mut col = vec![0.0; d + 1];
    for c in 0..d {
        unit.iter_mut().for_each(|u| *u = 0.0);
        unit[c] = 1.0;
        elevate(&unit, scale, &mut col);
        for r in 0..=d {
            m[r * d + c] = col[r];
        }
    }
    // lattice basis (1, ..., 1) - (d + 1) e_c in elevated coordinates
    let basis = |r: usize, c: usize| if r == c { 1.0 - (d + 1) as f64 } else { 1.0 };
    let mut mtm = vec![0.0; d * d];
    let mut mtb = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            for r in 0..=d {
                mtm[i * d + j] += m[r * d + i] * m[r * d + j];
                mtb[i * d + j] += m[r * d + i] * basis(r, j);
            }
        }
    }
    (determinant(mtb, d) / determinant(mtm, d)).abs()
}

impl Lattice {
    pub fn new(features: &Features) -> Result<Self> {
        let d = features.dim();
        if d == 0 || d > MAX_DIM {
            return Err(Error::Argument(format!(
                "unsupported feature dimension {d}: the lattice handles 1 to {MAX_DIM}"
            )));
        }
        let n = features.len();
        let scale = scale_factors(d);
        let mut canonical = vec![0i32; (d + 1) * (d + 1)];
        for i in 0..=d {
            for j in 0..=d - i {
                canonical[i * (d + 1) + j] = i as i32;
            }
            for j in d - i + 1..=d {
                canonical[i * (d + 1) + j] = i as i32 - (d + 1) as i32;
            }
        }

        let mut table: HashMap<Key, u32> = HashMap::with_capacity(n);
        let mut keys: Vec<Key> = Vec::new();
        let mut offsets = Vec::with_capacity(n * (d + 1));
        let mut weights = Vec::with_capacity(n * (d + 1));
        let mut elevated = [0.0; MAX_DIM + 1];
        let mut rem0 = [0i32; MAX_DIM + 1];
        let mut rank = [0i32; MAX_DIM + 1];
        let mut bary = [0.0; MAX_DIM + 2];
        let down = 1.0 / (d + 1) as f64;
        let dp1 = (d + 1) as i32;

        for p in 0..n {
            elevate(features.point(p), &scale, &mut elevated[..=d]);
            let mut sum = 0i32;
            for i in 0..=d {
                let rd = math::round(down * elevated[i]) as i32;
                rem0[i] = rd * dp1;
                sum += rd;
            }
            rank[..=d].iter_mut().for_each(|r| *r = 0);
            for i in 0..d {
                let di = elevated[i] - rem0[i] as f64;
                for j in i + 1..=d {
                    if di < elevated[j] - rem0[j] as f64 {
                        rank[i] += 1;
                    } else {
                        rank[j] += 1;
                    }
                }
            }
            for i in 0..=d {
                rank[i] += sum;
                if rank[i] < 0 {
                    rank[i] += dp1;
                    rem0[i] += dp1;
                } else if rank[i] > d as i32 {
                    rank[i] -= dp1;
                    rem0[i] -= dp1;
                }
            }
            bary[..d + 2].iter_mut().for_each(|b| *b = 0.0);
            for i in 0..=d {
                let v = (elevated[i] - rem0[i] as f64) * down;
                let r = rank[i] as usize;
                bary[d - r] += v;
                bary[d - r + 1] -= v;
            }
            bary[0] += 1.0 + bary[d + 1];
            for r in 0..=d {
                let mut key = [0i32; MAX_DIM];
                for i in 0..d {
                    key[i] = rem0[i] + canonical[r * (d + 1) + rank[i] as usize];
                }
                let next = keys.len() as u32;
                let idx = *table.entry(key).or_insert_with(|| {
                    keys.push(key);
                    next
                });
                offsets.push(idx);
                weights.push(bary[r]);
            }
        }

        // add the blur neighbours of every occupied vertex so that short blur
        // paths between nearby points are not cut off
        let occupied = keys.len();
        for v in 0..occupied {
            let key = keys[v];
            for j in 0..=d {
                for n in blur_neighbours(&key, j, d) {
                    let next = keys.len() as u32;
                    if let hashbrown::hash_map::Entry::Vacant(e) = table.entry(n) {
                        e.insert(next);
                        keys.push(n);
                    }
                }
            }
        }

        let vertices = keys.len();
        let mut neighbours = vec![[NONE; 2]; (d + 1) * vertices];
        for (v, key) in keys.iter().enumerate() {
            for j in 0..=d {
                let [n1, n2] = blur_neighbours(key, j, d);
                let look = |k: &Key| table.get(k).copied().unwrap_or(NONE);
                neighbours[j * vertices + v] = [look(&n1), look(&n2)];
            }
        }

        let alpha = 1.0 / (1.0 + math::powf(2.0, -(d as f64)));
        let gaussian_mass = math::powf(2.0 * core::f64::consts::PI, d as f64 / 2.0);
        let lattice_mass = alpha * cell_volume(d, &scale) * math::powf(2.0, (d + 1) as f64);
        let mut lattice = Lattice {
            dim: d,
            points: n,
            vertices,
            offsets,
            weights,
            neighbours,
            self_response: Vec::new(),
            alpha,
            norm: gaussian_mass / lattice_mass,
        };
        lattice.self_response = lattice.compute_self_response();
        Ok(lattice)
    }

    pub fn num_points(&self) -> usize {
        self.points
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices
    }

    /// Blur response between the vertices of one simplex, `(d+1)^2` entries
    /// indexed `[target * (d+1) + source]`.
    fn simplex_response(&self, simplex: &[u32]) -> Vec<f64> {
        let d1 = self.dim + 1;
        let mut out = vec![0.0; d1 * d1];
        let mut state: Vec<(u32, f64)> = Vec::new();
        let mut next: Vec<(u32, f64)> = Vec::new();
        for (s, &src) in simplex.iter().enumerate() {
            state.clear();
            state.push((src, 1.0));
            for j in 0..d1 {
                next.clear();
                let table = &self.neighbours[j * self.vertices..(j + 1) * self.vertices];
                for &(p, w) in &state {
                    next.push((p, w));
                    for q in table[p as usize] {
                        if q != NONE {
                            next.push((q, 0.5 * w));
                        }
                    }
                }
                next.sort_unstable_by_key(|e| e.0);
                state.clear();
                for &(p, w) in &next {
                    match state.last_mut() {
                        Some(last) if last.0 == p => last.1 += w,
                        _ => state.push((p, w)),
                    }
                }
            }
            for (t, &tgt) in simplex.iter().enumerate() {
                if let Ok(k) = state.binary_search_by_key(&tgt, |e| e.0) {
                    out[t * d1 + s] = state[k].1;
                }
            }
        }
        out
    }

    fn compute_self_response(&self) -> Vec<f64> {
        let d1 = self.dim + 1;
        let mut cache: HashMap<[u32; MAX_DIM + 1], Vec<f64>> = HashMap::new();
        let mut out = Vec::with_capacity(self.points);
        for p in 0..self.points {
            let simplex = &self.offsets[p * d1..(p + 1) * d1];
            let w = &self.weights[p * d1..(p + 1) * d1];
            let mut key = [NONE; MAX_DIM + 1];
            key[..d1].copy_from_slice(simplex);
            let response = cache.entry(key).or_insert_with(|| self.simplex_response(simplex));
            let mut s = 0.0;
            for t in 0..d1 {
                for r in 0..d1 {
                    s += w[t] * w[r] * response[t * d1 + r];
                }
            }
            out.push(self.alpha * s);
        }
        out
    }

    /// Filters `channels`-interleaved values: approximately
    /// `out_i = sum_{j != i} exp(-|f_i - f_j|^2 / 2) v_j`.
    pub fn filter(&self, values: &[f64], channels: usize) -> Result<Vec<f64>> {
        if values.len() != self.points * channels {
            return Err(Error::Shape(format!(
                "{} values for {} points with {channels} channels",
                values.len(),
                self.points
            )));
        }
        let d1 = self.dim + 1;
        let c = channels;
        let mut lat = vec![0.0; self.vertices * c];
        for p in 0..self.points {
            let v = &values[p * c..(p + 1) * c];
            for r in 0..d1 {
                let o = self.offsets[p * d1 + r] as usize;
                let w = self.weights[p * d1 + r];
                for (dst, &src) in lat[o * c..(o + 1) * c].iter_mut().zip(v) {
                    *dst += w * src;
                }
            }
        }
        let mut tmp = vec![0.0; self.vertices * c];
        for j in 0..d1 {
            let table = &self.neighbours[j * self.vertices..(j + 1) * self.vertices];
            for (v, nb) in table.iter().enumerate() {
                for k in 0..c {
                    let mut acc = lat[v * c + k];
                    if nb[0] != NONE {
                        acc += 0.5 * lat[nb[0] as usize * c + k];
                    }
                    if nb[1] != NONE {
                        acc += 0.5 * lat[nb[1] as usize * c + k];
                    }
                    tmp[v * c + k] = acc;
                }
            }
            core::mem::swap(&mut lat, &mut tmp);
        }
        let mut out = vec![0.0; self.points * c];
        for p in 0..self.points {
            let dst = &mut out[p * c..(p + 1) * c];
            for r in 0..d1 {
                let o = self.offsets[p * d1 + r] as usize;
                let w = self.alpha * self.weights[p * d1 + r];
                for (acc, &src) in dst.iter_mut().zip(&lat[o * c..(o + 1) * c]) {
                    *acc += w * src;
                }
            }
            let s = self.self_response[p];
            for (acc, &v) in dst.iter_mut().zip(&values[p * c..(p + 1) * c]) {
                *acc = (*acc - s * v) * self.norm;
            }
        }
        Ok(out)
    }
}
