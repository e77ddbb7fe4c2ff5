//! Forward and reverse passes through the whole network.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use super::layers::{self, BatchStats, BnCache, Tensor};
use super::{Gradients, NetworkWeights};
use crate::rng::rng_from;
use crate::{Error, Result};

/// How dropout and batch norm behave during a pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout on, batch statistics.
    Train,
    /// Dropout on, running statistics.
    McTest,
    /// Dropout off, running statistics.
    Deterministic,
}

struct BlockTape {
    input: Tensor,
    cols: Vec<f64>,
    bn: BnCache,
    out: Tensor,
}

struct Tape {
    enc: Vec<BlockTape>,
    dec: Vec<BlockTape>,
    pool_idx: Vec<Vec<u32>>,
    masks: Vec<Vec<f64>>,
    cls_input: Tensor,
}

pub(crate) struct ForwardPass {
    pub logits: Tensor,
    tape: Option<Tape>,
    /// Batch statistics per block, indexed like the weight blocks.
    pub stats: Vec<Option<BatchStats>>,
}

fn check(t: &Tensor, layer: &dyn Fn() -> String) -> Result<()> {
    match t.first_non_finite() {
        Some(_) => Err(Error::NonFinite { layer: layer() }),
        None => Ok(()),
    }
}

struct Runner<'a> {
    w: &'a NetworkWeights,
    mode: Mode,
    record: bool,
    stats: Vec<Option<BatchStats>>,
}

impl Runner<'_> {
    /// conv -> BN -> ReLU for the block whose tensors start at `base`.
    fn block(&mut self, x: Tensor, base: usize, name: &str) -> Result<(Tensor, Option<BlockTape>)> {
        let t = &self.w.tensors;
        let eps = self.w.config.bn_eps;
        let (y, cols) = layers::conv_forward(&x, &t[base], &t[base + 1], 3);
        check(&y, &|| format!("{name}.conv"))?;
        let (mut y, cache) = if self.mode == Mode::Train {
            let (y, cache, stats) = layers::bn_forward_train(&y, &t[base + 2], &t[base + 3], eps);
            self.stats[base / 6] = Some(stats);
            (y, Some(cache))
        } else {
            (layers::bn_forward_eval(&y, &t[base + 2], &t[base + 3], &t[base + 4], &t[base + 5], eps), None)
        };
        check(&y, &|| format!("{name}.bn"))?;
        layers::relu_forward(&mut y);
        let tape = match (self.record, cache) {
            (true, Some(bn)) => Some(BlockTape { input: x, cols, bn, out: y.clone() }),
            _ => None,
        };
        Ok((y, tape))
    }
}

fn validate_batch(w: &NetworkWeights, batch: &Tensor, mode: Mode, seeds: &[u64]) -> Result<()> {
    let cfg = &w.config;
    let m = cfg.size_multiple();
    if batch.h == 0 || batch.w == 0 || batch.h % m != 0 || batch.w % m != 0 {
        return Err(Error::Shape(format!(
            "input {}x{} is not divisible by 2^{} = {m}",
            batch.h, batch.w, cfg.depth
        )));
    }
    if batch.c != cfg.input_channels {
        return Err(Error::Shape(format!(
            "input has {} channels, network expects {}",
            batch.c, cfg.input_channels
        )));
    }
    if batch.n == 0 || batch.data.len() != batch.c * batch.pixels() {
        return Err(Error::Shape("empty or inconsistent input batch".into()));
    }
    if mode != Mode::Deterministic && seeds.len() != batch.n {
        return Err(Error::Argument(format!("{} dropout seeds for a batch of {}", seeds.len(), batch.n)));
    }
    Ok(())
}

pub(crate) fn run(w: &NetworkWeights, batch: &Tensor, mode: Mode, seeds: &[u64], record: bool) -> Result<ForwardPass> {
    validate_batch(w, batch, mode, seeds)?;
    let cfg = &w.config;
    let depth = cfg.depth;
    let record = record && mode == Mode::Train;
    let mut rngs: Vec<ChaCha8Rng> = match mode {
        Mode::Deterministic => Vec::new(),
        _ => seeds.iter().map(|&s| rng_from(s)).collect(),
    };
    let mut r = Runner { w, mode, record, stats: (0..2 * depth).map(|_| None).collect() };
    let mut enc = Vec::new();
    let mut pool_idx = Vec::new();
    let mut h = batch.clone();
    for level in 0..depth {
        let (y, tape) = r.block(h, cfg.enc_base(level), &format!("enc{level}"))?;
        enc.extend(tape);
        let (p, idx) = layers::maxpool_forward(&y);
        pool_idx.push(idx);
        h = p;
    }
    let mut masks = Vec::new();
    let mut dec = Vec::new();
    for level in (0..depth).rev() {
        if mode != Mode::Deterministic && cfg.dropout > 0.0 {
            let mask = layers::dropout_mask(h.c, h.n, h.h * h.w, cfg.dropout, &mut rngs);
            layers::apply_mask(&mut h, &mask);
            masks.push(mask);
        } else {
            masks.push(Vec::new());
        }
        let up = layers::unpool_forward(&h, &pool_idx[level], h.h * 2, h.w * 2);
        let (y, tape) = r.block(up, cfg.dec_base(level), &format!("dec{level}"))?;
        dec.extend(tape);
        h = y;
    }
    let base = cfg.cls_base();
    let (logits, _) = layers::conv_forward(&h, &w.tensors[base], &w.tensors[base + 1], 1);
    check(&logits, &|| String::from("classifier"))?;
    let tape = record.then(|| {
        // index decoder tapes and masks by level
        dec.reverse();
        masks.reverse();
        Tape { enc, dec, pool_idx, masks, cls_input: h }
    });
    Ok(ForwardPass { logits, tape, stats: r.stats })
}

/// Per-pixel logits for a batch in `[c][n][h][w]` layout. `seeds` gives one
/// dropout seed per batch item (ignored in deterministic mode).
pub fn forward(weights: &NetworkWeights, batch: &Tensor, mode: Mode, seeds: &[u64]) -> Result<Tensor> {
    run(weights, batch, mode, seeds, false).map(|p| p.logits)
}

pub(crate) struct StepResult {
    pub loss: f64,
    pub grads: Gradients,
    pub predicted: Vec<u8>,
    pub stats: Vec<Option<BatchStats>>,
}

fn backward(w: &NetworkWeights, tape: &Tape, dlogits: &Tensor) -> Gradients {
    let cfg = &w.config;
    let t = &w.tensors;
    let mut g = Gradients::zeros(cfg);
    let base = cfg.cls_base();
    let cg = layers::conv_backward(&tape.cls_input, &[], &t[base], dlogits, 1);
    g.tensors[base] = cg.dweight;
    g.tensors[base + 1] = cg.dbias;
    let mut d = cg.dx;

    let block_back = |d: &mut Tensor, bt: &BlockTape, base: usize, g: &mut Gradients| -> Tensor {
        layers::relu_backward(d, &bt.out);
        let (dbn, dscale, dshift) = layers::bn_backward(d, &t[base + 2], &bt.bn);
        let cg = layers::conv_backward(&bt.input, &bt.cols, &t[base], &dbn, 3);
        g.tensors[base] = cg.dweight;
        g.tensors[base + 1] = cg.dbias;
        g.tensors[base + 2] = dscale;
        g.tensors[base + 3] = dshift;
        cg.dx
    };

    for level in 0..cfg.depth {
        let bt = &tape.dec[level];
        let dx = block_back(&mut d, bt, cfg.dec_base(level), &mut g);
        d = layers::unpool_backward(&dx, &tape.pool_idx[level], dx.h / 2, dx.w / 2);
        if !tape.masks[level].is_empty() {
            layers::apply_mask(&mut d, &tape.masks[level]);
        }
    }
    for level in (0..cfg.depth).rev() {
        let bt = &tape.enc[level];
        let mut dy = layers::maxpool_backward(&d, &tape.pool_idx[level], bt.out.h, bt.out.w);
        d = block_back(&mut dy, bt, cfg.enc_base(level), &mut g);
    }
    g
}

fn check_labels(w: &NetworkWeights, batch: &Tensor, labels: &[u8]) -> Result<()> {
    if labels.len() != batch.pixels() {
        return Err(Error::Shape(format!("{} labels for {} pixels", labels.len(), batch.pixels())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= w.config.num_labels) {
        return Err(Error::Argument(format!("label {bad} outside 0..{}", w.config.num_labels)));
    }
    Ok(())
}

pub(crate) fn train_step(w: &NetworkWeights, batch: &Tensor, labels: &[u8], seeds: &[u64]) -> Result<StepResult> {
    check_labels(w, batch, labels)?;
    let pass = run(w, batch, Mode::Train, seeds, true)?;
    let (loss, dlogits, predicted) = layers::softmax_cross_entropy(&pass.logits, labels);
    let tape = pass.tape.as_ref().expect("train mode records a tape");
    let grads = backward(w, tape, &dlogits);
    Ok(StepResult { loss, grads, predicted, stats: pass.stats })
}

/// Mean softmax cross-entropy over all pixels of a training-mode pass and
/// its gradient with respect to every trainable tensor. `labels` are in
/// `(n, y, x)` order.
pub fn loss_and_grad(
    weights: &NetworkWeights,
    batch: &Tensor,
    labels: &[u8],
    seeds: &[u64],
) -> Result<(f64, Gradients)> {
    train_step(weights, batch, labels, seeds).map(|s| (s.loss, s.grads))
}

/// Folds a training pass's batch statistics into the running averages.
/// The running variance uses the unbiased batch variance.
pub(crate) fn update_running_stats(w: &mut NetworkWeights, stats: &[Option<BatchStats>]) {
    let m = w.config.bn_momentum;
    for (block, s) in stats.iter().enumerate() {
        let Some(s) = s else { continue };
        let base = 6 * block;
        let unbias = if s.count > 1 { s.count as f64 / (s.count - 1) as f64 } else { 1.0 };
        for (rm, &mu) in w.tensors[base + 4].iter_mut().zip(&s.mean) {
            *rm = (1.0 - m) * *rm + m * mu;
        }
        for (rv, &v) in w.tensors[base + 5].iter_mut().zip(&s.var) {
            *rv = (1.0 - m) * *rv + m * v * unbias;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayesnet::NetworkConfig;
    use alloc::vec;

    fn small() -> NetworkConfig {
        NetworkConfig { depth: 2, channels: vec![4, 6], ..NetworkConfig::default() }
    }

    fn batch(n: usize, h: usize, w: usize) -> Tensor {
        let mut t = Tensor::zeros(1, n, h, w);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = libm::sin(i as f64 * 0.7) * 0.5 + 0.5;
        }
        t
    }

    #[test]
    fn rejects_indivisible_input_before_compute() {
        let w = NetworkWeights::init(&small(), 1).unwrap();
        let err = forward(&w, &batch(1, 6, 8), Mode::Deterministic, &[]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }

    #[test]
    fn deterministic_mode_ignores_seeds() {
        let w = NetworkWeights::init(&small(), 1).unwrap();
        let x = batch(2, 8, 8);
        let a = forward(&w, &x, Mode::Deterministic, &[1, 2]).unwrap();
        let b = forward(&w, &x, Mode::Deterministic, &[3, 4]).unwrap();
        assert_eq!(a, b);
        let c = forward(&w, &x, Mode::McTest, &[1, 2]).unwrap();
        let d = forward(&w, &x, Mode::McTest, &[3, 4]).unwrap();
        assert_ne!(c, d);
        assert_eq!(c, forward(&w, &x, Mode::McTest, &[1, 2]).unwrap());
    }

    #[test]
    fn zero_classifier_gives_uniform_softmax() {
        let cfg = small();
        let mut w = NetworkWeights::init(&cfg, 1).unwrap();
        let base = cfg.cls_base();
        w.tensors[base].iter_mut().for_each(|v| *v = 0.0);
        let logits = forward(&w, &Tensor::zeros(1, 1, 8, 8), Mode::Deterministic, &[]).unwrap();
        assert!(logits.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_items_do_not_interact_at_test_time() {
        let w = NetworkWeights::init(&small(), 5).unwrap();
        let x = batch(3, 8, 8);
        let all = forward(&w, &x, Mode::McTest, &[7, 8, 9]).unwrap();
        let mut one = Tensor::zeros(1, 1, 8, 8);
        one.data.copy_from_slice(&x.data[64..128]);
        let single = forward(&w, &one, Mode::McTest, &[8]).unwrap();
        for c in 0..2 {
            assert_eq!(&all.channel(c)[64..128], single.channel(c));
        }
    }

    #[test]
    fn nan_input_names_the_layer() {
        let w = NetworkWeights::init(&small(), 1).unwrap();
        let mut x = batch(1, 8, 8);
        x.data[5] = f64::NAN;
        let err = forward(&w, &x, Mode::Deterministic, &[]).unwrap_err();
        assert_eq!(err, Error::NonFinite { layer: "enc0.conv".into() });
    }
}
