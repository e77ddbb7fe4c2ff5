//! Phantom datasets on disk, manifests and cross-validation folds.

use std::fs;
use std::path::{Path, PathBuf};

use brainex_core::phantom::generate_phantom;
use brainex_core::rng::rng_from;
use brainex_core::{LabelVolume, Volume3D};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::nifti;
use crate::seeds::{stage_seed, subject_seed};

/// One subject: image and mask paths (relative to the manifest's
/// directory unless absolute) and the seed that generated it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| Error::from(e).in_file(path))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Manifest { dir, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.entries)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() { p.to_path_buf() } else { self.dir.join(p) }
    }

    pub fn load_subject(&self, index: usize) -> Result<(Volume3D, LabelVolume)> {
        let e = &self.entries[index];
        let vol = nifti::read_volume(&self.resolve(&e.image))?;
        let mask = nifti::read_labels(&self.resolve(&e.mask), 2)?;
        vol.grid().ensure_same(mask.grid(), "mask").map_err(|err| Error::from(err).in_file(&e.mask))?;
        Ok((vol, mask))
    }
}

/// Generates `count` phantom subjects with seeds `master + i` into `dir`
/// and writes `manifest.json` next to them.
pub fn write_phantoms(cfg: &PipelineConfig, count: usize, master: u64, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let seed = subject_seed(master, i);
        let (vol, mask) = generate_phantom(&cfg.phantom.subject(seed, &cfg.variation))?;
        let name = format!("phantom_{i:03}");
        let image = PathBuf::from(format!("{name}_img.nii"));
        let mask_path = PathBuf::from(format!("{name}_mask.nii"));
        nifti::write_volume(&vol, &dir.join(&image))?;
        nifti::write_labels(&mask, &dir.join(&mask_path))?;
        entries.push(ManifestEntry { image, mask: mask_path, seed });
    }
    let manifest = Manifest { dir: dir.to_path_buf(), entries };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Splits `0..n` into `k` disjoint folds of near-equal size after a seeded
/// permutation.
pub fn fold_split(n: usize, k: usize, master: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::Invalid(format!("cannot split {n} subjects into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(stage_seed(master, "folds", 0)));
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = n / k + usize::from(f < n % k);
        let mut fold = order[start..start + size].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += size;
    }
    Ok(folds)
}

/// `(train, test)` subject indices for fold `fold`.
pub fn fold_indices(n: usize, k: usize, fold: usize, master: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if fold >= k {
        return Err(Error::Invalid(format!("fold {fold} out of range for {k} folds")));
    }
    let folds = fold_split(n, k, master)?;
    let test = folds[fold].clone();
    let mut train: Vec<usize> = folds.iter().enumerate().filter(|(i, _)| *i != fold).flat_map(|(_, f)| f.clone()).collect();
    train.sort_unstable();
    Ok((train, test))
}
