//! Mini-batch SGD training loop.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::layers::Tensor;
use super::net::{train_step, update_running_stats};
use super::{sgd_update, Gradients, NetworkConfig, NetworkWeights, TrainConfig};
use crate::preprocess::{padded_size, resize_bilinear, resize_nearest, slice_stack, Image2D};
use crate::volume::{Axis, LabelVolume, Volume3D};
use crate::rng::{derive, rng_from};
use crate::{Error, Result};

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_DROPOUT: u64 = 3;

/// One training example: an image slice and its per-pixel labels in
/// row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSlice {
    pub image: Image2D,
    pub labels: Vec<u8>,
}

/// Pixel accuracy per label over the training passes of one epoch. `None`
/// when the label never occurred.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochAccuracy {
    pub epoch: usize,
    /// Last iteration belonging to the epoch.
    pub iteration: usize,
    pub per_class: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Mini-batch loss before each update.
    pub losses: Vec<f64>,
    pub epochs: Vec<EpochAccuracy>,
}

/// Stacks same-sized images into a `[c][n][h][w]` batch.
pub fn batch_tensor(images: &[&Image2D]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Argument("empty batch".into()))?;
    let (h, w) = first.dims();
    let c = first.channels();
    let mut t = Tensor::zeros(c, images.len(), h, w);
    let plane = h * w;
    for (n, img) in images.iter().enumerate() {
        if img.dims() != (h, w) || img.channels() != c {
            return Err(Error::Shape(format!(
                "batch mixes {}x{}x{} and {}x{}x{} images",
                h,
                w,
                c,
                img.height(),
                img.width(),
                img.channels()
            )));
        }
        for ch in 0..c {
            t.data[(ch * images.len() + n) * plane..][..plane].copy_from_slice(img.plane(ch));
        }
    }
    Ok(t)
}

/// Cuts a volume and its labels into training slices along `axis`,
/// resized to `target` (default: native size rounded up to a multiple of
/// `2^depth`). Images are resized bilinearly and labels by nearest
/// neighbour.
pub fn labeled_slices(
    vol: &Volume3D,
    labels: &LabelVolume,
    axis: Axis,
    target: Option<(usize, usize)>,
    depth: usize,
) -> Result<Vec<LabeledSlice>> {
    vol.grid().ensure_same(labels.grid(), "labels")?;
    let images = slice_stack(vol, axis);
    let masks = slice_stack(labels, axis);
    let native = images[0].dims();
    let target = target.unwrap_or((padded_size(native.0, depth), padded_size(native.1, depth)));
    images
        .iter()
        .zip(&masks)
        .map(|(img, m)| {
            let image = resize_bilinear(img, target)?;
            let labels = resize_nearest(m, target)?.data().iter().map(|&v| v as u8).collect();
            Ok(LabeledSlice { image, labels })
        })
        .collect()
}

struct Accuracy {
    correct: Vec<u64>,
    total: Vec<u64>,
}

impl Accuracy {
    fn new(l: usize) -> Self {
        Accuracy { correct: vec![0; l], total: vec![0; l] }
    }

    fn add(&mut self, predicted: &[u8], truth: &[u8]) {
        for (&p, &t) in predicted.iter().zip(truth) {
            self.total[t as usize] += 1;
            if p == t {
                self.correct[t as usize] += 1;
            }
        }
    }

    fn take(&mut self) -> Vec<Option<f64>> {
        let out = self
            .correct
            .iter()
            .zip(&self.total)
            .map(|(&c, &t)| (t > 0).then(|| c as f64 / t as f64))
            .collect();
        self.correct.iter_mut().for_each(|v| *v = 0);
        self.total.iter_mut().for_each(|v| *v = 0);
        out
    }
}

/// Trains freshly initialized weights; initialization is seeded from
/// `cfg.seed`.
pub fn train(data: &[LabeledSlice], net: &NetworkConfig, cfg: &TrainConfig) -> Result<(NetworkWeights, TrainingLog)> {
    let weights = NetworkWeights::init(net, derive(cfg.seed, &[TAG_INIT]))?;
    train_from(weights, data, cfg)
}

/// Continues training from `weights` for `cfg.iterations` mini-batches.
pub fn train_from(
    mut weights: NetworkWeights,
    data: &[LabeledSlice],
    cfg: &TrainConfig,
) -> Result<(NetworkWeights, TrainingLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let (h, w) = data[0].image.dims();
    for (i, s) in data.iter().enumerate() {
        if s.image.dims() != (h, w) {
            return Err(Error::Shape(format!("slice {i} is {:?}, expected {:?}", s.image.dims(), (h, w))));
        }
        if s.labels.len() != h * w {
            return Err(Error::Shape(format!("slice {i} has {} labels for {} pixels", s.labels.len(), h * w)));
        }
    }
    let labels = weights.config().num_labels;
    let mut velocity = Gradients::zeros(weights.config());
    let mut log = TrainingLog::default();
    let mut acc = Accuracy::new(labels);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch = 0;
    let mut pos = data.len();
    let mut in_epoch = false;
    for it in 0..cfg.iterations {
        if pos >= data.len() {
            if in_epoch {
                log.epochs.push(EpochAccuracy { epoch, iteration: it - 1, per_class: acc.take() });
                epoch += 1;
            }
            order.sort_unstable();
            order.shuffle(&mut rng_from(derive(cfg.seed, &[TAG_SHUFFLE, epoch as u64])));
            pos = 0;
        }
        in_epoch = true;
        let idx = &order[pos..(pos + cfg.batch_size).min(data.len())];
        pos += idx.len();
        let images: Vec<&Image2D> = idx.iter().map(|&i| &data[i].image).collect();
        let batch = batch_tensor(&images)?;
        let truth: Vec<u8> = idx.iter().flat_map(|&i| data[i].labels.iter().copied()).collect();
        let seeds: Vec<u64> =
            (0..idx.len()).map(|k| derive(cfg.seed, &[TAG_DROPOUT, it as u64, k as u64])).collect();
        let step = match train_step(&weights, &batch, &truth, &seeds) {
            Ok(s) => s,
            Err(Error::NonFinite { layer }) => {
                log::error!("non-finite activations in `{layer}` at iteration {it}");
                return Err(Error::Diverged { iteration: it });
            }
            Err(e) => return Err(e),
        };
        if !step.loss.is_finite() || step.grads.tensors.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { iteration: it });
        }
        log.losses.push(step.loss);
        acc.add(&step.predicted, &truth);
        update_running_stats(&mut weights, &step.stats);
        sgd_update(&mut weights, &step.grads, &mut velocity, cfg)?;
        if (it + 1) % 100 == 0 {
            log::info!("iteration {}: loss {:.5}", it + 1, step.loss);
        }
    }
    if in_epoch {
        log.epochs.push(EpochAccuracy { epoch, iteration: cfg.iterations - 1, per_class: acc.take() });
    }
    Ok((weights, log))
}
