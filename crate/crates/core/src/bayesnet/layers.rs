//! Layer primitives with their reverse passes.
//!
//! Activations are stored channel-major as `[c][n][h][w]`, so a 3x3
//! convolution over a whole batch is a single matrix product against the
//! im2col buffer.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::linalg::{gemm, Mat};
use crate::math;

/// Activation tensor in `[c][n][h][w]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Tensor { c, n, h, w, data: vec![0.0; c * n * h * w] }
    }

    /// Pixels per channel across the batch.
    pub fn pixels(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.pixels();
        &self.data[c * p..(c + 1) * p]
    }

    pub(crate) fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

/// im2col for a 3x3 kernel with zero padding 1: row `ci*9 + ky*3 + kx`,
/// column `(n, y, x)`.
pub(crate) fn im2col3(x: &Tensor) -> Vec<f64> {
    let (h, w) = (x.h, x.w);
    let p = x.pixels();
    let mut cols = vec![0.0; x.c * 9 * p];
    for ci in 0..x.c {
        let src = x.channel(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                for n in 0..x.n {
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &src[(n * h + sy as usize) * w..][..w];
                        let drow = &mut row[(n * h + y) * w..][..w];
                        match kx {
                            0 => drow[1..].copy_from_slice(&srow[..w - 1]),
                            1 => drow.copy_from_slice(srow),
                            _ => drow[..w - 1].copy_from_slice(&srow[1..]),
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`].
pub(crate) fn col2im3(cols: &[f64], c: usize, n: usize, h: usize, w: usize) -> Tensor {
    let mut x = Tensor::zeros(c, n, h, w);
    let p = n * h * w;
    for ci in 0..c {
        let dst = &mut x.data[ci * p..(ci + 1) * p];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                for b in 0..n {
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let drow = &mut dst[(b * h + sy as usize) * w..][..w];
                        let srow = &row[(b * h + y) * w..][..w];
                        match kx {
                            0 => drow[..w - 1].iter_mut().zip(&srow[1..]).for_each(|(d, s)| *d += s),
                            1 => drow.iter_mut().zip(srow).for_each(|(d, s)| *d += s),
                            _ => drow[1..].iter_mut().zip(&srow[..w - 1]).for_each(|(d, s)| *d += s),
                        }
                    }
                }
            }
        }
    }
    x
}

/// Convolution with square kernel `k` (1 or 3). `weight` is
/// `[c_out][c_in][k][k]`. Returns the output and the column buffer needed
/// by the reverse pass (empty for `k = 1`, whose columns are the input).
pub(crate) fn conv_forward(x: &Tensor, weight: &[f64], bias: &[f64], k: usize) -> (Tensor, Vec<f64>) {
    let c_out = bias.len();
    let p = x.pixels();
    let mut y = Tensor::zeros(c_out, x.n, x.h, x.w);
    for (co, &b) in bias.iter().enumerate() {
        y.data[co * p..(co + 1) * p].fill(b);
    }
    let kk = x.c * k * k;
    let cols = if k == 3 { im2col3(x) } else { Vec::new() };
    let rhs = if k == 3 { &cols[..] } else { &x.data[..] };
    gemm(Mat::new(weight, c_out, kk), Mat::new(rhs, kk, p), 1.0, &mut y.data);
    (y, cols)
}

pub(crate) struct ConvGrads {
    pub dx: Tensor,
    pub dweight: Vec<f64>,
    pub dbias: Vec<f64>,
}

pub(crate) fn conv_backward(x: &Tensor, cols: &[f64], weight: &[f64], dy: &Tensor, k: usize) -> ConvGrads {
    let c_out = dy.c;
    let p = dy.pixels();
    let kk = x.c * k * k;
    let inputs = if k == 3 { cols } else { &x.data[..] };
    let mut dweight = vec![0.0; c_out * kk];
    gemm(Mat::new(&dy.data, c_out, p), Mat::new(inputs, kk, p).t(), 0.0, &mut dweight);
    let dbias = (0..c_out).map(|co| dy.channel(co).iter().sum()).collect();
    let mut dcols = vec![0.0; kk * p];
    gemm(Mat::new(weight, c_out, kk).t(), Mat::new(&dy.data, c_out, p), 0.0, &mut dcols);
    let dx = if k == 3 {
        col2im3(&dcols, x.c, x.n, x.h, x.w)
    } else {
        Tensor { c: x.c, n: x.n, h: x.h, w: x.w, data: dcols }
    };
    ConvGrads { dx, dweight, dbias }
}

/// Values kept from a training-mode batch-norm pass.
pub(crate) struct BnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Per-channel batch mean and biased variance.
pub(crate) struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

pub(crate) fn bn_forward_train(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Tensor, BnCache, BatchStats) {
    let p = x.pixels();
    let mut y = Tensor::zeros(x.c, x.n, x.h, x.w);
    let mut xhat = vec![0.0; x.data.len()];
    let mut mean = vec![0.0; x.c];
    let mut var = vec![0.0; x.c];
    let mut inv_std = vec![0.0; x.c];
    for c in 0..x.c {
        let src = x.channel(c);
        let mu = src.iter().sum::<f64>() / p as f64;
        let v = src.iter().map(|&a| (a - mu) * (a - mu)).sum::<f64>() / p as f64;
        let is = 1.0 / math::sqrt(v + eps);
        let xh = &mut xhat[c * p..(c + 1) * p];
        let out = &mut y.data[c * p..(c + 1) * p];
        for ((o, h), &a) in out.iter_mut().zip(xh.iter_mut()).zip(src) {
            *h = (a - mu) * is;
            *o = gamma[c] * *h + beta[c];
        }
        mean[c] = mu;
        var[c] = v;
        inv_std[c] = is;
    }
    (y, BnCache { xhat, inv_std }, BatchStats { mean, var, count: p })
}

pub(crate) fn bn_forward_eval(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Tensor {
    let p = x.pixels();
    let mut y = x.clone();
    for c in 0..x.c {
        let scale = gamma[c] / math::sqrt(running_var[c] + eps);
        let shift = beta[c] - running_mean[c] * scale;
        for v in &mut y.data[c * p..(c + 1) * p] {
            *v = *v * scale + shift;
        }
    }
    y
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn bn_backward(dy: &Tensor, gamma: &[f64], cache: &BnCache) -> (Tensor, Vec<f64>, Vec<f64>) {
    let p = dy.pixels();
    let m = p as f64;
    let mut dx = Tensor::zeros(dy.c, dy.n, dy.h, dy.w);
    let mut dgamma = vec![0.0; dy.c];
    let mut dbeta = vec![0.0; dy.c];
    for c in 0..dy.c {
        let g = dy.channel(c);
        let xh = &cache.xhat[c * p..(c + 1) * p];
        let sum_g: f64 = g.iter().sum();
        let sum_gx: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
        dgamma[c] = sum_gx;
        dbeta[c] = sum_g;
        let k = gamma[c] * cache.inv_std[c] / m;
        for ((d, &gi), &xi) in dx.data[c * p..(c + 1) * p].iter_mut().zip(g).zip(xh) {
            *d = k * (m * gi - sum_g - xi * sum_gx);
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn relu_forward(x: &mut Tensor) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gradient through a ReLU whose output was `y`.
pub(crate) fn relu_backward(dy: &mut Tensor, y: &Tensor) {
    for (d, &o) in dy.data.iter_mut().zip(&y.data) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
}

/// 2x2 max pooling with stride 2. Each output also records the position
/// of its maximum as an index into the input plane; ties keep the first
/// element in row-major order.
pub fn maxpool_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.c, x.n, h2, w2);
    let mut idx = vec![0u32; y.data.len()];
    let plane = x.h * x.w;
    for pl in 0..x.c * x.n {
        let src = &x.data[pl * plane..(pl + 1) * plane];
        let base = pl * h2 * w2;
        for oy in 0..h2 {
            for ox in 0..w2 {
                let mut best = (oy * 2) * x.w + ox * 2;
                for cand in [best + 1, best + x.w, best + x.w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                let o = base + oy * w2 + ox;
                y.data[o] = src[best];
                idx[o] = best as u32;
            }
        }
    }
    (y, idx)
}

/// Places each value at its recorded position in an `h x w` plane, zeros
/// elsewhere.
pub fn unpool_forward(x: &Tensor, indices: &[u32], h: usize, w: usize) -> Tensor {
    let mut y = Tensor::zeros(x.c, x.n, h, w);
    let (small, large) = (x.h * x.w, h * w);
    for pl in 0..x.c * x.n {
        let dst = &mut y.data[pl * large..(pl + 1) * large];
        for k in 0..small {
            dst[indices[pl * small + k] as usize] = x.data[pl * small + k];
        }
    }
    y
}

/// Gradient of [`unpool_forward`]: gathers from the recorded positions.
pub(crate) fn unpool_backward(dy: &Tensor, indices: &[u32], h: usize, w: usize) -> Tensor {
    let mut dx = Tensor::zeros(dy.c, dy.n, h, w);
    let (small, large) = (h * w, dy.h * dy.w);
    for pl in 0..dy.c * dy.n {
        for k in 0..small {
            dx.data[pl * small + k] = dy.data[pl * large + indices[pl * small + k] as usize];
        }
    }
    dx
}

/// Gradient of [`maxpool_forward`]: scatters to the recorded positions.
pub(crate) fn maxpool_backward(dy: &Tensor, indices: &[u32], h: usize, w: usize) -> Tensor {
    let mut dx = Tensor::zeros(dy.c, dy.n, h, w);
    let (small, large) = (dy.h * dy.w, h * w);
    for pl in 0..dy.c * dy.n {
        for k in 0..small {
            dx.data[pl * large + indices[pl * small + k] as usize] += dy.data[pl * small + k];
        }
    }
    dx
}

/// Inverted dropout mask for a tensor: each entry is 0 with probability
/// `rate` and `1 / (1 - rate)` otherwise. Item `n` of the batch draws from
/// `rngs[n]`, channel by channel, so a sample's mask does not depend on
/// what else is in the batch.
pub fn dropout_mask(c: usize, n: usize, plane: usize, rate: f64, rngs: &mut [ChaCha8Rng]) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    let mut mask = vec![0.0; c * n * plane];
    for (b, rng) in rngs.iter_mut().enumerate().take(n) {
        for ch in 0..c {
            for v in &mut mask[(ch * n + b) * plane..][..plane] {
                *v = if rng.random::<f64>() < rate { 0.0 } else { keep };
            }
        }
    }
    mask
}

pub(crate) fn apply_mask(x: &mut Tensor, mask: &[f64]) {
    for (v, m) in x.data.iter_mut().zip(mask) {
        *v *= m;
    }
}

/// Mean softmax cross-entropy over all pixels, its gradient with respect
/// to the logits, and the per-pixel predicted labels.
pub(crate) fn softmax_cross_entropy(logits: &Tensor, labels: &[u8]) -> (f64, Tensor, Vec<u8>) {
    let l = logits.c;
    let p = logits.pixels();
    let mut grad = Tensor::zeros(l, logits.n, logits.h, logits.w);
    let mut pred = vec![0u8; p];
    let mut z = vec![0.0; l];
    let mut s = vec![0.0; l];
    let mut loss = 0.0;
    let inv = 1.0 / p as f64;
    for i in 0..p {
        for c in 0..l {
            z[c] = logits.data[c * p + i];
        }
        let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + math::ln(z.iter().map(|&v| math::exp(v - m)).sum::<f64>());
        math::softmax(&z, &mut s);
        let t = labels[i] as usize;
        loss += lse - z[t];
        for c in 0..l {
            let onehot = if c == t { 1.0 } else { 0.0 };
            grad.data[c * p + i] = (s[c] - onehot) * inv;
        }
        pred[i] = math::argmax(&z) as u8;
    }
    (loss * inv, grad, pred)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn ramp(c: usize, n: usize, h: usize, w: usize) -> Tensor {
        let mut t = Tensor::zeros(c, n, h, w);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = ((i * 37) % 23) as f64 - 11.0 + 0.01 * i as f64;
        }
        t
    }

    #[test]
    fn conv3_matches_direct_sum() {
        let x = ramp(2, 2, 4, 5);
        let weight: Vec<f64> = (0..3 * 2 * 9).map(|i| libm::sin(i as f64 * 0.37)).collect();
        let bias = [0.5, -1.0, 2.0];
        let (y, _) = conv_forward(&x, &weight, &bias, 3);
        for co in 0..3 {
            for b in 0..2 {
                for yy in 0..4 {
                    for xx in 0..5 {
                        let mut acc = bias[co];
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = yy as isize + ky as isize - 1;
                                    let sx = xx as isize + kx as isize - 1;
                                    if sy < 0 || sy >= 4 || sx < 0 || sx >= 5 {
                                        continue;
                                    }
                                    let v = x.data[((ci * 2 + b) * 4 + sy as usize) * 5 + sx as usize];
                                    acc += weight[((co * 2 + ci) * 3 + ky) * 3 + kx] * v;
                                }
                            }
                        }
                        let got = y.data[((co * 2 + b) * 4 + yy) * 5 + xx];
                        assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let x = ramp(2, 1, 3, 4);
        let cols = im2col3(&x);
        let r: Vec<f64> = (0..cols.len()).map(|i| libm::cos(i as f64 * 0.11)).collect();
        let lhs: f64 = cols.iter().zip(&r).map(|(a, b)| a * b).sum();
        let back = col2im3(&r, 2, 1, 3, 4);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn unpool_of_maxpool_keeps_window_maxima() {
        let x = ramp(3, 2, 6, 8);
        let (y, idx) = maxpool_forward(&x);
        let u = unpool_forward(&y, &idx, 6, 8);
        for pl in 0..6 {
            for wy in 0..3 {
                for wx in 0..4 {
                    let cells = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .map(|(dy, dx)| pl * 48 + (wy * 2 + dy) * 8 + wx * 2 + dx);
                    let max = cells.iter().map(|&i| x.data[i]).fold(f64::NEG_INFINITY, f64::max);
                    let nonzero: Vec<usize> = cells.iter().copied().filter(|&i| u.data[i] != 0.0).collect();
                    assert_eq!(nonzero.len(), 1);
                    assert_eq!(u.data[nonzero[0]], max);
                    assert_eq!(x.data[nonzero[0]], max);
                }
            }
        }
    }

    #[test]
    fn dropout_preserves_expectation() {
        let rate = 0.5;
        let trials = 10_000;
        let mut rngs = [rng_from(3)];
        let mut sum = 0.0;
        for _ in 0..trials {
            let mask = dropout_mask(1, 1, 4, rate, &mut rngs);
            sum += mask.iter().map(|m| 2.5 * m).sum::<f64>() / 4.0;
        }
        let mean = sum / trials as f64;
        assert!((mean / 2.5 - 1.0).abs() < 0.01, "{mean}");
    }

    #[test]
    fn uniform_logits_give_ln_l() {
        let logits = Tensor::zeros(3, 1, 2, 2);
        let (loss, _, _) = softmax_cross_entropy(&logits, &[0, 1, 2, 0]);
        assert!((loss - math::ln(3.0)).abs() < 1e-15);
        let mut sharp = Tensor::zeros(2, 1, 1, 2);
        sharp.data = vec![50.0, -50.0, -50.0, 50.0];
        let (loss, _, pred) = softmax_cross_entropy(&sharp, &[0, 1]);
        assert!(loss < 1e-40);
        assert_eq!(pred, [0, 1]);
    }

    #[test]
    fn batchnorm_normalizes_each_channel() {
        let x = ramp(2, 3, 2, 2);
        let (y, _, stats) = bn_forward_train(&x, &[1.0, 2.0], &[0.0, 1.0], 0.0);
        for c in 0..2 {
            let ch = y.channel(c);
            let mean = ch.iter().sum::<f64>() / 12.0;
            assert!((mean - [0.0, 1.0][c]).abs() < 1e-12);
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 12.0;
            assert!((var - [1.0, 4.0][c]).abs() < 1e-9);
        }
        assert_eq!(stats.count, 12);
    }
}
