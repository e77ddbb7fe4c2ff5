//! Synthetic head phantoms with a known brain mask, and the perturbations
//! used by the uncertainty experiments (rotation, label corruption, contrast
//! shift).
//!
//! Geometry is expressed in voxel units. The y axis runs posterior (low y)
//! to anterior (high y); the eyes sit anterior to the brain with a shell of
//! adipose tissue behind them, and a narrow frontal lobe protrudes forward
//! from the main brain ellipsoid.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::volume::{Axis, Grid, LabelVolume, Volume3D};
use crate::{math, rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    /// Normalized radius squared: `<= 1` inside.
    #[inline]
    pub fn radius2(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|k| {
                let d = (p[k] - self.center[k]) / self.semi_axes[k];
                d * d
            })
            .sum()
    }

    #[inline]
    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.radius2(p) <= 1.0
    }

    /// Same center, every semi-axis grown by `t`.
    pub fn inflated(&self, t: f64) -> Ellipsoid {
        Ellipsoid { center: self.center, semi_axes: self.semi_axes.map(|a| a + t) }
    }

    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        (
            core::array::from_fn(|k| self.center[k] - self.semi_axes[k]),
            core::array::from_fn(|k| self.center[k] + self.semi_axes[k]),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
}

impl Sphere {
    fn dist2(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|k| (p[k] - self.center[k]) * (p[k] - self.center[k])).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueIntensities {
    pub background: f64,
    pub skull: f64,
    pub brain: f64,
    pub eyes: f64,
    pub adipose: f64,
}

impl Default for TissueIntensities {
    fn default() -> Self {
        TissueIntensities { background: 0.05, skull: 0.3, brain: 0.7, eyes: 0.9, adipose: 0.85 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tissue {
    Background,
    Skull,
    Adipose,
    Eye,
    Brain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub brain: Ellipsoid,
    /// Elongated anterior protrusion, part of the brain label.
    pub frontal_lobe: Option<Ellipsoid>,
    pub eyes: [Sphere; 2],
    /// Thickness of the adipose shell on the posterior side of each eye.
    pub adipose_thickness: f64,
    /// Dark gap between the brain surface and the inner skull surface.
    pub skull_gap: f64,
    pub skull_thickness: f64,
    pub intensities: TissueIntensities,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [64, 64, 48],
            spacing: [0.5, 0.5, 0.5],
            brain: Ellipsoid { center: [31.5, 27.5, 24.0], semi_axes: [19.0, 20.0, 14.0] },
            frontal_lobe: Some(Ellipsoid {
                center: [31.5, 44.0, 20.0],
                semi_axes: [7.0, 9.0, 6.0],
            }),
            eyes: [
                Sphere { center: [20.5, 55.0, 15.0], radius: 4.0 },
                Sphere { center: [42.5, 55.0, 15.0], radius: 4.0 },
            ],
            adipose_thickness: 3.0,
            skull_gap: 1.5,
            skull_thickness: 2.5,
            intensities: TissueIntensities::default(),
            noise_sigma: 0.03,
            seed: 0,
        }
    }
}

/// Ranges of the per-subject random variation applied by
/// [`PhantomConfig::subject`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubjectVariation {
    /// Relative jitter of every semi-axis and eye radius.
    pub scale: f64,
    /// Whole-head translation in voxels (x, y, z).
    pub shift: [f64; 3],
    /// Relative jitter of the tissue intensities.
    pub intensity: f64,
}

impl Default for SubjectVariation {
    fn default() -> Self {
        SubjectVariation { scale: 0.06, shift: [2.0, 1.5, 1.5], intensity: 0.05 }
    }
}

impl SubjectVariation {
    /// The same variation for a phantom scaled by `ratio`: shifts are in
    /// voxels and scale with it, relative jitters do not.
    pub fn scaled(&self, ratio: f64) -> SubjectVariation {
        SubjectVariation { shift: self.shift.map(|s| s * ratio), ..*self }
    }
}

impl PhantomConfig {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims, self.spacing)
    }

    /// A copy scaled to new dims: every geometric quantity is multiplied by
    /// the per-axis ratio (isotropic quantities by the mean ratio).
    pub fn rescaled(&self, dims: [usize; 3]) -> PhantomConfig {
        let r: [f64; 3] = core::array::from_fn(|k| dims[k] as f64 / self.dims[k] as f64);
        let mean = (r[0] + r[1] + r[2]) / 3.0;
        let pos = |c: [f64; 3]| -> [f64; 3] {
            core::array::from_fn(|k| (c[k] + 0.5) * r[k] - 0.5)
        };
        let ell = |e: &Ellipsoid| Ellipsoid {
            center: pos(e.center),
            semi_axes: core::array::from_fn(|k| e.semi_axes[k] * r[k]),
        };
        PhantomConfig {
            dims,
            brain: ell(&self.brain),
            frontal_lobe: self.frontal_lobe.as_ref().map(ell),
            eyes: self.eyes.map(|s| Sphere { center: pos(s.center), radius: s.radius * mean }),
            adipose_thickness: self.adipose_thickness * mean,
            skull_gap: self.skull_gap * mean,
            skull_thickness: self.skull_thickness * mean,
            ..self.clone()
        }
    }

    /// Per-subject geometry and contrast drawn deterministically from `seed`.
    /// The returned config carries `seed` as its noise seed too.
    pub fn subject(&self, seed: u64, var: &SubjectVariation) -> PhantomConfig {
        let mut r = rng::rng_from(rng::derive(seed, &[0x5u64]));
        let mut jit = |amp: f64| if amp > 0.0 { r.random_range(-amp..=amp) } else { 0.0 };
        let shift: [f64; 3] = core::array::from_fn(|k| jit(var.shift[k]));
        let scale: [f64; 3] = core::array::from_fn(|_| 1.0 + jit(var.scale));
        let move_pt = |c: [f64; 3], anchor: [f64; 3]| -> [f64; 3] {
            core::array::from_fn(|k| anchor[k] + (c[k] - anchor[k]) * scale[k] + shift[k])
        };
        let anchor = self.brain.center;
        let ell = |e: &Ellipsoid| Ellipsoid {
            center: move_pt(e.center, anchor),
            semi_axes: core::array::from_fn(|k| e.semi_axes[k] * scale[k]),
        };
        let mean_scale = (scale[0] + scale[1] + scale[2]) / 3.0;
        let mut out = PhantomConfig {
            brain: ell(&self.brain),
            frontal_lobe: self.frontal_lobe.as_ref().map(ell),
            eyes: self
                .eyes
                .map(|s| Sphere { center: move_pt(s.center, anchor), radius: s.radius * mean_scale }),
            seed,
            ..self.clone()
        };
        let it = &mut out.intensities;
        for v in [&mut it.skull, &mut it.brain, &mut it.eyes, &mut it.adipose] {
            *v = (*v * (1.0 + jit(var.intensity))).clamp(0.0, 1.0);
        }
        out
    }

    fn skull_inner(&self) -> (Ellipsoid, Option<Ellipsoid>) {
        let t = self.skull_gap;
        (self.brain.inflated(t), self.frontal_lobe.map(|l| l.inflated(t)))
    }

    fn skull_outer(&self) -> (Ellipsoid, Option<Ellipsoid>) {
        let t = self.skull_gap + self.skull_thickness;
        (self.brain.inflated(t), self.frontal_lobe.map(|l| l.inflated(t)))
    }

    /// Checks every invariant, naming the offending primitive.
    pub fn validate(&self) -> Result<()> {
        self.grid().map_err(|e| Error::Config(format!("grid: {e}")))?;
        let it = &self.intensities;
        for (name, v) in [
            ("background", it.background),
            ("skull", it.skull),
            ("brain", it.brain),
            ("eyes", it.eyes),
            ("adipose", it.adipose),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} intensity {v} outside [0, 1]")));
            }
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!("noise sigma {} must be >= 0", self.noise_sigma)));
        }
        for (name, v) in [
            ("adipose thickness", self.adipose_thickness),
            ("skull gap", self.skull_gap),
            ("skull thickness", self.skull_thickness),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} {v} must be >= 0")));
            }
        }
        let upper: [f64; 3] = core::array::from_fn(|k| (self.dims[k] - 1) as f64);
        let fits = |name: &str, lo: [f64; 3], hi: [f64; 3]| -> Result<()> {
            for k in 0..3 {
                if lo[k] < 0.0 || hi[k] > upper[k] {
                    return Err(Error::Config(format!(
                        "{name} spans [{:.2}, {:.2}] on axis {k}, outside [0, {}]",
                        lo[k], hi[k], upper[k]
                    )));
                }
            }
            Ok(())
        };
        let check_ell = |name: &str, e: &Ellipsoid| -> Result<()> {
            if e.semi_axes.iter().any(|&a| !(a > 0.0)) {
                return Err(Error::Config(format!("{name} semi-axes must be positive")));
            }
            let (lo, hi) = e.bounds();
            fits(name, lo, hi)
        };
        check_ell("brain ellipsoid", &self.brain)?;
        if let Some(l) = &self.frontal_lobe {
            check_ell("frontal lobe", l)?;
        }
        let (outer, outer_lobe) = self.skull_outer();
        check_ell("skull", &outer)?;
        if let Some(l) = &outer_lobe {
            check_ell("skull around frontal lobe", l)?;
        }
        for (i, eye) in self.eyes.iter().enumerate() {
            if !(eye.radius > 0.0) {
                return Err(Error::Config(format!("eye {i} radius must be positive")));
            }
            fits(
                &format!("eye {i}"),
                eye.center.map(|c| c - eye.radius),
                eye.center.map(|c| c + eye.radius),
            )?;
            let r = eye.radius + self.adipose_thickness;
            let mut hi = eye.center.map(|c| c + r);
            hi[1] = eye.center[1];
            fits(&format!("adipose shell of eye {i}"), eye.center.map(|c| c - r), hi)?;
        }
        Ok(())
    }

    /// Tissue class at a voxel center.
    pub fn tissue_at(&self, p: [f64; 3]) -> Tissue {
        let in_brain = self.brain.contains(p) || self.frontal_lobe.is_some_and(|l| l.contains(p));
        if in_brain {
            return Tissue::Brain;
        }
        if self.eyes.iter().any(|e| e.dist2(p) <= e.radius * e.radius) {
            return Tissue::Eye;
        }
        let behind_eye = self.eyes.iter().any(|e| {
            let r = e.radius + self.adipose_thickness;
            p[1] <= e.center[1] && e.dist2(p) <= r * r
        });
        if behind_eye {
            return Tissue::Adipose;
        }
        let (outer, outer_lobe) = self.skull_outer();
        let (inner, inner_lobe) = self.skull_inner();
        let in_outer = outer.contains(p) || outer_lobe.is_some_and(|l| l.contains(p));
        let in_inner = inner.contains(p) || inner_lobe.is_some_and(|l| l.contains(p));
        if in_outer && !in_inner {
            Tissue::Skull
        } else {
            Tissue::Background
        }
    }

    /// Noise-free tissue map over the whole grid.
    pub fn tissue_map(&self) -> Vec<Tissue> {
        let [nx, ny, nz] = self.dims;
        let mut out = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    out.push(self.tissue_at([x as f64, y as f64, z as f64]));
                }
            }
        }
        out
    }

    fn tissue_mask(&self, which: Tissue) -> Result<LabelVolume> {
        let grid = self.grid()?;
        Ok(LabelVolume::mask_from_fn(grid, |x, y, z| {
            self.tissue_at([x as f64, y as f64, z as f64]) == which
        }))
    }

    /// Voxels labelled as adipose tissue behind the eyes.
    pub fn adipose_mask(&self) -> Result<LabelVolume> {
        self.tissue_mask(Tissue::Adipose)
    }

    /// The ground-truth brain mask.
    pub fn brain_mask(&self) -> Result<LabelVolume> {
        self.tissue_mask(Tissue::Brain)
    }
}

/// Builds the noisy intensity volume and its brain mask.
///
/// Intensities are tissue means plus i.i.d. Gaussian noise, clamped to
/// `[0, 1]`. The mask does not depend on the noise or the seed.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<(Volume3D, LabelVolume)> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let tissues = cfg.tissue_map();
    let it = &cfg.intensities;
    let mut rng = rng::rng_from(rng::derive(cfg.seed, &[0x0153]));
    let noise = Normal::new(0.0, cfg.noise_sigma)
        .map_err(|e| Error::Config(format!("noise sigma: {e}")))?;
    let mut data = Vec::with_capacity(tissues.len());
    let mut mask = Vec::with_capacity(tissues.len());
    for &t in &tissues {
        let base = match t {
            Tissue::Background => it.background,
            Tissue::Skull => it.skull,
            Tissue::Adipose => it.adipose,
            Tissue::Eye => it.eyes,
            Tissue::Brain => it.brain,
        };
        let n = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        data.push((base + n).clamp(0.0, 1.0));
        mask.push(u8::from(t == Tissue::Brain));
    }
    Ok((Volume3D::new(grid, data)?, LabelVolume::new(grid, 2, mask)?))
}

/// Rotates intensities (bilinear) and labels (nearest) by `degrees` about the
/// volume center, in the plane orthogonal to `axis`. Samples falling outside
/// the field get `background` / label 0.
pub fn rotate_volume(
    vol: &Volume3D,
    mask: &LabelVolume,
    degrees: f64,
    axis: Axis,
    background: f64,
) -> Result<(Volume3D, LabelVolume)> {
    vol.grid().ensure_same(mask.grid(), "rotate_volume")?;
    if !(degrees.abs() <= 180.0) {
        return Err(Error::Argument(format!("rotation {degrees} outside [-180, 180] degrees")));
    }
    if degrees == 0.0 {
        return Ok((vol.clone(), mask.clone()));
    }
    let grid = *vol.grid();
    let dims = grid.dims();
    let (a, b) = axis.in_plane();
    let (na, nb) = (dims[a], dims[b]);
    let (ca, cb) = ((na as f64 - 1.0) / 2.0, (nb as f64 - 1.0) / 2.0);
    let (sin, cos) = math::sin_cos(degrees.to_radians());
    let mut out = Vec::with_capacity(grid.len());
    let mut out_mask = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let c = grid.coords(i);
        let (pa, pb) = (c[a] as f64 - ca, c[b] as f64 - cb);
        // inverse rotation maps the output voxel back into the source
        let sa = cos * pa + sin * pb + ca;
        let sb = -sin * pa + cos * pb + cb;
        let mut src = c;
        let inside = |s: f64, n: usize| s >= -0.5 && s <= n as f64 - 0.5;
        if inside(sa, na) && inside(sb, nb) {
            let ra = math::round(sa).clamp(0.0, (na - 1) as f64) as usize;
            let rb = math::round(sb).clamp(0.0, (nb - 1) as f64) as usize;
            src[a] = ra;
            src[b] = rb;
            out_mask.push(mask.data()[grid.index(src[0], src[1], src[2])]);
        } else {
            out_mask.push(0);
        }
        if sa >= 0.0 && sa <= (na - 1) as f64 && sb >= 0.0 && sb <= (nb - 1) as f64 {
            let a0 = math::floor(sa) as usize;
            let b0 = math::floor(sb) as usize;
            let a1 = (a0 + 1).min(na - 1);
            let b1 = (b0 + 1).min(nb - 1);
            let (fa, fb) = (sa - a0 as f64, sb - b0 as f64);
            let at = |ia: usize, ib: usize| {
                let mut s = c;
                s[a] = ia;
                s[b] = ib;
                vol.data()[grid.index(s[0], s[1], s[2])]
            };
            let v = (at(a0, b0) * (1.0 - fa) + at(a1, b0) * fa) * (1.0 - fb)
                + (at(a0, b1) * (1.0 - fa) + at(a1, b1) * fa) * fb;
            out.push(v);
        } else {
            out.push(background);
        }
    }
    Ok((Volume3D::new(grid, out)?, LabelVolume::new(grid, mask.num_labels(), out_mask)?))
}

/// Characteristic over-inclusion errors of a sub-optimal automatic labeller.
#[derive(Debug, Clone, Copy)]
pub enum Corruption<'a> {
    /// Dilate the mask by 2 voxels within the anterior third of its y-extent.
    FrontalBulge,
    /// Frontal bulge plus the adipose tissue behind the eyes.
    EyeAdipose { adipose: &'a LabelVolume },
}

/// Dilation radius (voxels) of the frontal-bulge corruption.
pub const BULGE_RADIUS: i64 = 2;

/// Adds mislabelled voxels to a binary brain mask. Never removes a voxel.
pub fn corrupt_labels(mask: &LabelVolume, mode: Corruption<'_>) -> Result<LabelVolume> {
    mask.ensure_binary("corrupt_labels")?;
    let grid = *mask.grid();
    let [nx, ny, nz] = grid.dims();
    let src = mask.data();
    let mut out = src.to_vec();
    let ys: Vec<usize> = (0..src.len()).filter(|&i| src[i] == 1).map(|i| grid.coords(i)[1]).collect();
    if let (Some(&ymin), Some(&ymax)) = (ys.iter().min(), ys.iter().max()) {
        // anterior third of the mask's y-extent
        let extent = (ymax - ymin + 1) as f64;
        let y_cut = ymax as f64 + 1.0 - extent / 3.0;
        let r = BULGE_RADIUS;
        for i in 0..src.len() {
            if src[i] != 0 {
                continue;
            }
            let [x, y, z] = grid.coords(i);
            if (y as f64) < y_cut {
                continue;
            }
            let mut hit = false;
            'search: for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx * dx + dy * dy + dz * dz > r * r {
                            continue;
                        }
                        let (qx, qy, qz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if qx < 0 || qy < 0 || qz < 0 || qx >= nx as i64 || qy >= ny as i64 || qz >= nz as i64 {
                            continue;
                        }
                        if src[grid.index(qx as usize, qy as usize, qz as usize)] == 1 {
                            hit = true;
                            break 'search;
                        }
                    }
                }
            }
            if hit {
                out[i] = 1;
            }
        }
    }
    if let Corruption::EyeAdipose { adipose } = mode {
        adipose.grid().ensure_same(&grid, "adipose region")?;
        adipose.ensure_binary("adipose region")?;
        for (o, &a) in out.iter_mut().zip(adipose.data()) {
            if a == 1 {
                *o = 1;
            }
        }
    }
    LabelVolume::new(grid, 2, out)
}

/// Off-site contrast proxy: `v -> v^gamma` on `[0, 1]` intensities.
pub fn gamma_shift(vol: &Volume3D, gamma: f64) -> Result<Volume3D> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Argument(format!("gamma {gamma} must be positive")));
    }
    let data = vol.data().iter().map(|&v| math::powf(v.clamp(0.0, 1.0), gamma)).collect();
    Volume3D::new(*vol.grid(), data)
}
