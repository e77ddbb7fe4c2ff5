//! Monte Carlo dropout prediction over a volume.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::layers::Tensor;
use super::net::{forward, Mode};
use super::train::batch_tensor;
use super::NetworkWeights;
use crate::preprocess::{padded_size, renormalize_simplex, resize_bilinear, restack_probs, slice_stack, Image2D};
use crate::rng::derive;
use crate::volume::{Axis, ProbVolume, UncertaintyVolume, Volume3D};
use crate::{math, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct McOptions {
    /// Number of stochastic passes T.
    pub samples: usize,
    pub axis: Axis,
    /// In-plane size `(height, width)` fed to the network. Defaults to the
    /// native size rounded up to the network's size multiple.
    pub input_size: Option<(usize, usize)>,
    pub seed: u64,
    /// Keep every per-pass probability volume in the result.
    pub keep_samples: bool,
    /// Slices per forward call. Does not affect the result.
    pub slices_per_batch: usize,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions { samples: 6, axis: Axis::Z, input_size: None, seed: 0, keep_samples: false, slices_per_batch: 8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McPrediction {
    /// Mean of the per-pass probabilities.
    pub mean: ProbVolume,
    /// Population variance of the brain probability across passes (mean
    /// of per-label variances when there are more than two labels).
    pub uncertainty: UncertaintyVolume,
    /// Per-pass probabilities, in pass order, when requested.
    pub samples: Vec<ProbVolume>,
}

fn softmax_slices(logits: &Tensor, native: (usize, usize)) -> Result<Vec<Image2D>> {
    let (l, p, plane) = (logits.c, logits.pixels(), logits.h * logits.w);
    let mut z = vec![0.0; l];
    let mut s = vec![0.0; l];
    let mut out = Vec::with_capacity(logits.n);
    for n in 0..logits.n {
        let mut data = vec![0.0; l * plane];
        for k in 0..plane {
            for c in 0..l {
                z[c] = logits.data[c * p + n * plane + k];
            }
            math::softmax(&z, &mut s);
            for c in 0..l {
                data[c * plane + k] = s[c];
            }
        }
        let img = Image2D::new(logits.h, logits.w, l, data)?;
        let mut back = resize_bilinear(&img, native)?;
        renormalize_simplex(&mut back);
        out.push(back);
    }
    Ok(out)
}

/// Runs `samples` dropout passes over every slice of `vol` along
/// `opts.axis`. Pass `t` of slice `s` draws its masks from a seed derived
/// from `(opts.seed, t, s)`, so results do not depend on batching.
pub fn mc_predict(weights: &NetworkWeights, vol: &Volume3D, opts: &McOptions) -> Result<McPrediction> {
    let t_count = opts.samples;
    if t_count == 0 {
        return Err(Error::Argument("sample count T must be at least 1".into()));
    }
    let cfg = weights.config();
    let slices = slice_stack(vol, opts.axis);
    let native = slices[0].dims();
    let target = opts
        .input_size
        .unwrap_or((padded_size(native.0, cfg.depth), padded_size(native.1, cfg.depth)));
    let m = cfg.size_multiple();
    if target.0 % m != 0 || target.1 % m != 0 {
        return Err(Error::Shape(format!("network input {}x{} is not divisible by {m}", target.0, target.1)));
    }
    let inputs = slices.iter().map(|s| resize_bilinear(s, target)).collect::<Result<Vec<_>>>()?;
    let chunk = opts.slices_per_batch.max(1);
    let l = cfg.num_labels;
    let len = vol.grid().len();
    let mut sum = vec![0.0; len * l];
    // shifted accumulators for the variance, per voxel and tracked label
    let tracked: Vec<usize> = if l == 2 { vec![1] } else { (0..l).collect() };
    let mut shift = vec![0.0; len * tracked.len()];
    let mut s1 = vec![0.0; shift.len()];
    let mut s2 = vec![0.0; shift.len()];
    let mut kept = Vec::new();
    for t in 0..t_count {
        let mut probs = Vec::with_capacity(slices.len());
        for (c, group) in inputs.chunks(chunk).enumerate() {
            let refs: Vec<&Image2D> = group.iter().collect();
            let batch = batch_tensor(&refs)?;
            let seeds: Vec<u64> =
                (0..group.len()).map(|k| derive(opts.seed, &[t as u64, (c * chunk + k) as u64])).collect();
            let logits = forward(weights, &batch, Mode::McTest, &seeds)?;
            probs.extend(softmax_slices(&logits, native)?);
        }
        let sample = restack_probs(&probs, opts.axis, vol.spacing())?;
        for (acc, &v) in sum.iter_mut().zip(sample.data()) {
            *acc += v;
        }
        for voxel in 0..len {
            for (j, &label) in tracked.iter().enumerate() {
                let x = sample.data()[voxel * l + label];
                let k = voxel * tracked.len() + j;
                if t == 0 {
                    shift[k] = x;
                }
                let d = x - shift[k];
                s1[k] += d;
                s2[k] += d * d;
            }
        }
        if opts.keep_samples {
            kept.push(sample);
        }
    }
    let tf = t_count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / tf).collect();
    let per = tracked.len();
    let var: Vec<f64> = (0..len)
        .map(|voxel| {
            let total: f64 = (0..per)
                .map(|j| {
                    let k = voxel * per + j;
                    ((s2[k] - s1[k] * s1[k] / tf) / tf).max(0.0)
                })
                .sum();
            total / per as f64
        })
        .collect();
    Ok(McPrediction {
        mean: ProbVolume::new(*vol.grid(), l, mean)?,
        uncertainty: UncertaintyVolume::new(*vol.grid(), var)?,
        samples: kept,
    })
}
