//! Uncertainty experiments: how training-set size, label corruption and
//! train/test mismatch (rotation, contrast) move the model uncertainty.
//!
//! Everything runs in memory. For each repeat, a pool of training and test
//! phantoms is generated from the repeat's seed; each condition trains (or
//! reuses) a model and records one row per test subject.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use brainex_core::bayesnet::NetworkWeights;
use brainex_core::metrics::total_uncertainty;
use brainex_core::phantom::{corrupt_labels, gamma_shift, generate_phantom, rotate_volume, Corruption};
use brainex_core::{Axis, LabelVolume, Volume3D};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::pipeline::{csv_io, evaluate_mask, predict, train_subjects};
use crate::seeds::stage_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    TrainSize,
    LabelCorruption,
    Rotation,
    ContrastShift,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::TrainSize, Variant::LabelCorruption, Variant::Rotation, Variant::ContrastShift];

    pub fn name(self) -> &'static str {
        match self {
            Variant::TrainSize => "train-size",
            Variant::LabelCorruption => "label-corruption",
            Variant::Rotation => "rotation",
            Variant::ContrastShift => "contrast-shift",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown experiment variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Independent repeats; repeat `r` uses master seed `seed + r`.
    pub repeats: usize,
    pub test_subjects: usize,
    pub train_sizes: Vec<usize>,
    /// Training-set size for every variant except train-size.
    pub full_train: usize,
    pub corrupted_counts: Vec<usize>,
    pub rotations: Vec<f64>,
    pub gamma: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            repeats: 5,
            test_subjects: 5,
            train_sizes: vec![5, 10, 20],
            full_train: 20,
            corrupted_counts: vec![0, 5, 10],
            rotations: vec![0.0, 10.0, 20.0, 30.0],
            gamma: 1.2,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 || self.test_subjects == 0 {
            return Err(Error::Invalid("experiments need at least one repeat and one test subject".into()));
        }
        if self.train_sizes.contains(&0) || self.full_train == 0 {
            return Err(Error::Invalid("training sets must be non-empty".into()));
        }
        if let Some(&c) = self.corrupted_counts.iter().find(|&&c| c > self.full_train) {
            return Err(Error::Invalid(format!("cannot corrupt {c} of {} training labels", self.full_train)));
        }
        if self.rotations.iter().any(|r| !(r.abs() <= 180.0)) {
            return Err(Error::Invalid("rotations must be within [-180, 180] degrees".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Invalid(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }

    fn pool_size(&self) -> usize {
        self.train_sizes.iter().copied().chain([self.full_train]).max().unwrap_or(0)
    }
}

/// One test subject under one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub variant: Variant,
    pub condition: String,
    /// Numeric value of the condition (subjects, corrupted labels, degrees
    /// or gamma).
    pub level: f64,
    pub subject: usize,
    pub seed: u64,
    pub dice: f64,
    pub assd_mm: f64,
    pub total_uncertainty: f64,
    /// Total uncertainty inside the region the label corruption affects.
    pub roi_total_uncertainty: f64,
}

struct Subject {
    vol: Volume3D,
    mask: LabelVolume,
    /// Voxels the eye-adipose corruption would add to this subject's mask.
    roi: LabelVolume,
    corrupted: LabelVolume,
}

fn make_subject(cfg: &PipelineConfig, seed: u64) -> Result<Subject> {
    let pc = cfg.phantom.subject(seed, &cfg.variation);
    let (vol, mask) = generate_phantom(&pc)?;
    let adipose = pc.adipose_mask()?;
    let corrupted = corrupt_labels(&mask, Corruption::EyeAdipose { adipose: &adipose })?;
    let roi_data: Vec<u8> = corrupted.data().iter().zip(mask.data()).map(|(&c, &m)| c & !m & 1).collect();
    let roi = LabelVolume::new(*mask.grid(), 2, roi_data)?;
    Ok(Subject { vol, mask, roi, corrupted })
}

struct Repeat {
    seed: u64,
    train: Vec<Subject>,
    test: Vec<Subject>,
    models: HashMap<(usize, usize), NetworkWeights>,
}

/// Runs experiment variants, sharing trained models between variants that
/// use the same training set.
pub struct ExperimentRunner<'a> {
    cfg: &'a PipelineConfig,
    exp: &'a ExperimentConfig,
    repeats: Vec<Repeat>,
}

impl<'a> ExperimentRunner<'a> {
    pub fn new(cfg: &'a PipelineConfig, exp: &'a ExperimentConfig) -> Result<Self> {
        exp.validate()?;
        let mut repeats = Vec::with_capacity(exp.repeats);
        for r in 0..exp.repeats {
            let seed = cfg.seed.wrapping_add(r as u64);
            let gen = |stage: &str, n: usize| -> Result<Vec<Subject>> {
                (0..n).map(|i| make_subject(cfg, stage_seed(seed, stage, i as u64))).collect()
            };
            let train = gen("experiment-train-subject", exp.pool_size()).map_err(|e| e.in_stage("phantom"))?;
            let test = gen("experiment-test-subject", exp.test_subjects).map_err(|e| e.in_stage("phantom"))?;
            repeats.push(Repeat { seed, train, test, models: HashMap::new() });
        }
        Ok(ExperimentRunner { cfg, exp, repeats })
    }

    fn model(&mut self, r: usize, n_train: usize, n_corrupt: usize) -> Result<NetworkWeights> {
        let cfg = self.cfg;
        let rep = &mut self.repeats[r];
        if let Some(w) = rep.models.get(&(n_train, n_corrupt)) {
            return Ok(w.clone());
        }
        let data: Vec<(Volume3D, LabelVolume)> = rep.train[..n_train]
            .iter()
            .enumerate()
            .map(|(i, s)| (s.vol.clone(), if i < n_corrupt { s.corrupted.clone() } else { s.mask.clone() }))
            .collect();
        log::info!("repeat {r}: training on {n_train} subjects, {n_corrupt} with corrupted labels");
        let (w, _) = train_subjects(&data, cfg, stage_seed(rep.seed, "experiment-train", 0))
            .map_err(|e| e.in_stage("train"))?;
        rep.models.insert((n_train, n_corrupt), w.clone());
        Ok(w)
    }

    fn evaluate_condition(
        &self,
        r: usize,
        weights: &NetworkWeights,
        variant: Variant,
        condition: String,
        level: f64,
        transform: &dyn Fn(&Subject) -> Result<(Volume3D, LabelVolume, LabelVolume)>,
    ) -> Result<Vec<ExperimentRecord>> {
        let rep = &self.repeats[r];
        let mut out = Vec::new();
        for (j, s) in rep.test.iter().enumerate() {
            let (vol, mask, roi) = transform(s)?;
            let pred = predict(weights, &vol, self.cfg, stage_seed(rep.seed, "experiment-predict", j as u64), false)
                .map_err(|e| e.in_stage("predict"))?;
            let seg = pred.mean.argmax();
            let report = evaluate_mask(&seg, &mask, Some(&pred.uncertainty), None).map_err(|e| e.in_stage("eval"))?;
            let roi_total = total_uncertainty(&pred.uncertainty, Some(&roi))?;
            out.push(ExperimentRecord {
                variant,
                condition: condition.clone(),
                level,
                subject: j,
                seed: rep.seed,
                dice: report.dice,
                assd_mm: report.assd_mm,
                total_uncertainty: report.total_uncertainty.unwrap_or(0.0),
                roi_total_uncertainty: roi_total,
            });
        }
        Ok(out)
    }

    pub fn run(&mut self, variant: Variant) -> Result<Vec<ExperimentRecord>> {
        let exp = self.exp.clone();
        let mut records = Vec::new();
        let plain = |s: &Subject| Ok((s.vol.clone(), s.mask.clone(), s.roi.clone()));
        for r in 0..self.repeats.len() {
            match variant {
                Variant::TrainSize => {
                    for &n in &exp.train_sizes {
                        let w = self.model(r, n, 0)?;
                        records.extend(self.evaluate_condition(r, &w, variant, format!("train={n}"), n as f64, &plain)?);
                    }
                }
                Variant::LabelCorruption => {
                    for &c in &exp.corrupted_counts {
                        let w = self.model(r, exp.full_train, c)?;
                        records.extend(self.evaluate_condition(
                            r,
                            &w,
                            variant,
                            format!("corrupted={c}"),
                            c as f64,
                            &plain,
                        )?);
                    }
                }
                Variant::Rotation => {
                    let w = self.model(r, exp.full_train, 0)?;
                    for &deg in &exp.rotations {
                        let rotate = |s: &Subject| -> Result<(Volume3D, LabelVolume, LabelVolume)> {
                            let bg = self.cfg.phantom.intensities.background;
                            let (v, m) = rotate_volume(&s.vol, &s.mask, deg, Axis::Z, bg)?;
                            let (_, roi) = rotate_volume(&s.vol, &s.roi, deg, Axis::Z, bg)?;
                            Ok((v, m, roi))
                        };
                        records.extend(self.evaluate_condition(
                            r,
                            &w,
                            variant,
                            format!("rotation={deg}"),
                            deg,
                            &rotate,
                        )?);
                    }
                }
                Variant::ContrastShift => {
                    let w = self.model(r, exp.full_train, 0)?;
                    for gamma in [1.0, exp.gamma] {
                        let shift = |s: &Subject| -> Result<(Volume3D, LabelVolume, LabelVolume)> {
                            Ok((gamma_shift(&s.vol, gamma)?, s.mask.clone(), s.roi.clone()))
                        };
                        records.extend(self.evaluate_condition(
                            r,
                            &w,
                            variant,
                            format!("gamma={gamma}"),
                            gamma,
                            &shift,
                        )?);
                    }
                }
            }
        }
        Ok(records)
    }
}

/// Median of a non-empty sample.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

/// Per-condition summary, in first-appearance order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub variant: Variant,
    pub condition: String,
    pub level: f64,
    pub n: usize,
    pub median_total_uncertainty: f64,
    pub median_roi_total_uncertainty: f64,
    pub median_dice: f64,
    pub median_assd_mm: f64,
}

pub fn summarize(records: &[ExperimentRecord]) -> Vec<ConditionSummary> {
    let mut keys: Vec<(Variant, String, f64)> = Vec::new();
    for r in records {
        if !keys.iter().any(|(v, c, _)| *v == r.variant && *c == r.condition) {
            keys.push((r.variant, r.condition.clone(), r.level));
        }
    }
    keys.into_iter()
        .map(|(variant, condition, level)| {
            let rows: Vec<&ExperimentRecord> =
                records.iter().filter(|r| r.variant == variant && r.condition == condition).collect();
            let col = |f: fn(&ExperimentRecord) -> f64| median(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            ConditionSummary {
                variant,
                condition,
                level,
                n: rows.len(),
                median_total_uncertainty: col(|r| r.total_uncertainty),
                median_roi_total_uncertainty: col(|r| r.roi_total_uncertainty),
                median_dice: col(|r| r.dice),
                median_assd_mm: col(|r| r.assd_mm),
            }
        })
        .collect()
}

pub fn write_records_csv(records: &[ExperimentRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(e, path))?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_summary_csv(summary: &[ConditionSummary], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(e, path))?;
    for s in summary {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
