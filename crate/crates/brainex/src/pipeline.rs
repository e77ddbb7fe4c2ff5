//! The per-subject stages: training on slices, MC prediction, CRF
//! refinement and evaluation.

use std::path::Path;

use brainex_core::bayesnet::{
    labeled_slices, mc_predict, train, LabeledSlice, McOptions, McPrediction, NetworkWeights, TrainConfig,
    TrainingLog,
};
use brainex_core::densecrf::{infer, CrfParams, FilterKind};
use brainex_core::metrics::{evaluate, MetricsReport};
use brainex_core::preprocess::normalize_intensity;
use brainex_core::{LabelVolume, ProbVolume, UncertaintyVolume, Volume3D};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};

/// Normalizes each subject and cuts it into network-sized training slices.
pub fn training_slices(subjects: &[(Volume3D, LabelVolume)], cfg: &PipelineConfig) -> Result<Vec<LabeledSlice>> {
    let mut out = Vec::new();
    for (vol, mask) in subjects {
        let norm = normalize_intensity(vol);
        out.extend(labeled_slices(&norm, mask, cfg.axis, cfg.input_size(), cfg.net.depth)?);
    }
    Ok(out)
}

/// Trains a fresh network on the subjects with the given optimizer seed.
pub fn train_subjects(
    subjects: &[(Volume3D, LabelVolume)],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(NetworkWeights, TrainingLog)> {
    let data = training_slices(subjects, cfg)?;
    log::info!("training on {} slices from {} subjects", data.len(), subjects.len());
    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
    Ok(train(&data, &cfg.net, &train_cfg)?)
}

/// Normalizes `vol` and runs `cfg.mc_samples` dropout passes.
pub fn predict(
    weights: &NetworkWeights,
    vol: &Volume3D,
    cfg: &PipelineConfig,
    seed: u64,
    keep_samples: bool,
) -> Result<McPrediction> {
    let opts = McOptions {
        samples: cfg.mc_samples,
        axis: cfg.axis,
        input_size: cfg.input_size(),
        seed,
        keep_samples,
        ..McOptions::default()
    };
    Ok(mc_predict(weights, &normalize_intensity(vol), &opts)?)
}

/// CRF refinement against the normalized intensities of `vol`.
pub fn refine(
    probs: &ProbVolume,
    vol: &Volume3D,
    params: &CrfParams,
    filter: FilterKind,
) -> Result<(ProbVolume, LabelVolume)> {
    Ok(infer(probs, &normalize_intensity(vol), params, filter)?)
}

pub fn evaluate_mask(
    mask: &LabelVolume,
    reference: &LabelVolume,
    uncertainty: Option<&UncertaintyVolume>,
    roi: Option<&LabelVolume>,
) -> Result<MetricsReport> {
    Ok(evaluate(mask, reference, uncertainty, roi)?)
}

/// Writes the training log as CSV: one row per iteration with the loss,
/// and per-class pixel accuracy on the last iteration of each epoch.
pub fn write_training_log(log: &TrainingLog, num_labels: usize, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(e, path))?;
    let mut header = vec!["iteration".to_string(), "epoch".to_string(), "loss".to_string()];
    header.extend((0..num_labels).map(|l| format!("accuracy_{l}")));
    w.write_record(&header)?;
    let mut epochs = log.epochs.iter().peekable();
    let mut epoch = 0;
    for (it, loss) in log.losses.iter().enumerate() {
        let mut row = vec![it.to_string(), epoch.to_string(), format!("{loss:.17e}")];
        match epochs.peek() {
            Some(e) if e.iteration == it => {
                row.extend(e.per_class.iter().map(|a| a.map(|v| v.to_string()).unwrap_or_default()));
                epochs.next();
                epoch += 1;
            }
            _ => row.extend((0..num_labels).map(|_| String::new())),
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub(crate) fn csv_io(e: csv::Error, path: &Path) -> Error {
    Error::from(e).in_file(path)
}
