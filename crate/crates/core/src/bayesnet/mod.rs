//! Bayesian encoder-decoder: a small SegNet-style network with batch norm,
//! index unpooling and dropout in the central blocks, trained by SGD with
//! momentum and sampled at test time with dropout left on.

mod layers;
mod net;
mod predict;
mod train;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::{derive, rng_from};
use crate::{Error, Result};

pub use layers::{dropout_mask, maxpool_forward, unpool_forward, Tensor};
pub use net::{forward, loss_and_grad, Mode};
pub use predict::{mc_predict, McOptions, McPrediction};
pub use train::{batch_tensor, labeled_slices, train, train_from, EpochAccuracy, LabeledSlice, TrainingLog};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of encoder blocks; the decoder mirrors it.
    pub depth: usize,
    /// Output channels of each encoder block, outermost first.
    pub channels: Vec<usize>,
    pub input_channels: usize,
    pub num_labels: usize,
    pub dropout: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            depth: 3,
            channels: vec![16, 32, 64],
            input_channels: 1,
            num_labels: 2,
            dropout: 0.5,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("network depth must be at least 1".into()));
        }
        if self.channels.len() != self.depth {
            return Err(Error::Config(format!(
                "{} channel counts given for depth {}",
                self.channels.len(),
                self.depth
            )));
        }
        if self.channels.contains(&0) || self.input_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(2..=256).contains(&self.num_labels) {
            return Err(Error::Config(format!("num_labels must be in 2..=256, got {}", self.num_labels)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {}", self.dropout)));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("batch-norm eps must be positive and momentum in [0, 1]".into()));
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    /// `(in, out)` channels of the conv in encoder block `level`.
    fn enc_channels(&self, level: usize) -> (usize, usize) {
        let cin = if level == 0 { self.input_channels } else { self.channels[level - 1] };
        (cin, self.channels[level])
    }

    /// `(in, out)` channels of the conv in decoder block `level`.
    fn dec_channels(&self, level: usize) -> (usize, usize) {
        let cout = if level == 0 { self.channels[0] } else { self.channels[level - 1] };
        (self.channels[level], cout)
    }

    /// Index of the first tensor of encoder block `level`.
    fn enc_base(&self, level: usize) -> usize {
        6 * level
    }

    /// Decoder blocks are declared in execution order, innermost first.
    fn dec_base(&self, level: usize) -> usize {
        6 * (self.depth + self.depth - 1 - level)
    }

    fn cls_base(&self) -> usize {
        12 * self.depth
    }

    /// Name, shape and trainability of every tensor in declaration order.
    pub fn layout(&self) -> Vec<TensorSpec> {
        let mut specs = Vec::new();
        let block = |specs: &mut Vec<TensorSpec>, name: String, cin: usize, cout: usize| {
            specs.push(TensorSpec::new(format!("{name}.conv.weight"), vec![cout, cin, 3, 3], true));
            specs.push(TensorSpec::new(format!("{name}.conv.bias"), vec![cout], true));
            specs.push(TensorSpec::new(format!("{name}.bn.scale"), vec![cout], true));
            specs.push(TensorSpec::new(format!("{name}.bn.shift"), vec![cout], true));
            specs.push(TensorSpec::new(format!("{name}.bn.running_mean"), vec![cout], false));
            specs.push(TensorSpec::new(format!("{name}.bn.running_var"), vec![cout], false));
        };
        for level in 0..self.depth {
            let (cin, cout) = self.enc_channels(level);
            block(&mut specs, format!("enc{level}"), cin, cout);
        }
        for level in (0..self.depth).rev() {
            let (cin, cout) = self.dec_channels(level);
            block(&mut specs, format!("dec{level}"), cin, cout);
        }
        specs.push(TensorSpec::new("classifier.weight".into(), vec![self.num_labels, self.channels[0], 1, 1], true));
        specs.push(TensorSpec::new("classifier.bias".into(), vec![self.num_labels], true));
        specs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl TensorSpec {
    fn new(name: String, shape: Vec<usize>, trainable: bool) -> Self {
        TensorSpec { name, shape, trainable }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Optimizer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.01, momentum: 0.9, batch_size: 4, iterations: 1000, seed: 0 }
    }
}

impl TrainConfig {
    /// A zero learning rate is allowed so that the optimizer can be run as
    /// a no-op.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// All network tensors in declaration order plus the optimizer step count.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    config: NetworkConfig,
    tensors: Vec<Vec<f64>>,
    step: u64,
}

/// Per-tensor gradients (or optimizer velocities), laid out like the
/// weights. Entries for running statistics stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros(config: &NetworkConfig) -> Self {
        Gradients { tensors: config.layout().iter().map(|s| vec![0.0; s.len()]).collect() }
    }
}

const MAGIC: &[u8; 6] = b"BSEGW1";

impl NetworkWeights {
    /// He-normal kernels, zero biases, unit BN scale, zero BN shift,
    /// running statistics (0, 1).
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut tensors = Vec::new();
        for (i, spec) in config.layout().iter().enumerate() {
            let t = match spec.name.rsplit('.').next() {
                Some("weight") => {
                    let fan_in: usize = spec.shape[1..].iter().product();
                    let std = crate::math::sqrt(2.0 / fan_in as f64);
                    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("{e}")))?;
                    let mut rng = rng_from(derive(seed, &[0x1417, i as u64]));
                    (0..spec.len()).map(|_| normal.sample(&mut rng)).collect()
                }
                Some("scale") | Some("running_var") => vec![1.0; spec.len()],
                _ => vec![0.0; spec.len()],
            };
            tensors.push(t);
        }
        Ok(NetworkWeights { config: config.clone(), tensors, step: 0 })
    }

    /// Builds weights from explicit tensors, checking every shape.
    pub fn from_tensors(config: &NetworkConfig, tensors: Vec<Vec<f64>>, step: u64) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if tensors.len() != layout.len() {
            return Err(Error::Shape(format!("expected {} tensors, got {}", layout.len(), tensors.len())));
        }
        for (spec, t) in layout.iter().zip(&tensors) {
            if t.len() != spec.len() {
                return Err(Error::Shape(format!(
                    "tensor `{}` has {} values, config implies {}",
                    spec.name,
                    t.len(),
                    spec.len()
                )));
            }
            if spec.name.ends_with("running_var") && t.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::InvalidVolume(format!("`{}` has a negative entry", spec.name)));
            }
        }
        Ok(NetworkWeights { config: config.clone(), tensors, step })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.tensors
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Tensors the optimizer updates, in declaration order.
    pub fn trainable(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.config.layout().into_iter().zip(&self.tensors).filter(|(s, _)| s.trainable).map(|(_, t)| t)
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().map(Vec::len).sum()
    }

    /// Serializes as `BSEGW1`, a config block, then every tensor as
    /// little-endian `f64` in declaration order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [c.depth, c.input_channels, c.num_labels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &ch in &c.channels {
            out.extend_from_slice(&(ch as u32).to_le_bytes());
        }
        for v in [c.dropout, c.bn_eps, c.bn_momentum] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(6)? != MAGIC {
            return Err(Error::Type("missing BSEGW1 magic at byte 0".into()));
        }
        let depth = r.u32()? as usize;
        let input_channels = r.u32()? as usize;
        let num_labels = r.u32()? as usize;
        if depth > 16 {
            return Err(Error::Type(format!("implausible network depth {depth} at byte 6")));
        }
        let channels = (0..depth).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let config = NetworkConfig {
            depth,
            channels,
            input_channels,
            num_labels,
            dropout: r.f64()?,
            bn_eps: r.f64()?,
            bn_momentum: r.f64()?,
        };
        config.validate()?;
        let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let count = r.u32()? as usize;
        let layout = config.layout();
        if count != layout.len() {
            return Err(Error::Shape(format!(
                "file declares {count} tensors, config implies {}",
                layout.len()
            )));
        }
        let mut tensors = Vec::with_capacity(count);
        for spec in &layout {
            let t = (0..spec.len()).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push(t);
        }
        if r.pos != bytes.len() {
            return Err(Error::Type(format!("{} trailing bytes after tensor data", bytes.len() - r.pos)));
        }
        NetworkWeights::from_tensors(&config, tensors, step)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Type(format!("weights truncated at byte {}", self.bytes.len())));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// One momentum step on a single tensor: `v = momentum * v - lr * g`,
/// `w = w + v`.
pub fn sgd_step(w: &mut [f64], g: &[f64], v: &mut [f64], learning_rate: f64, momentum: f64) {
    for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *vi = momentum * *vi - learning_rate * gi;
        *wi += *vi;
    }
}

/// Applies [`sgd_step`] to every trainable tensor and advances the step
/// counter.
pub fn sgd_update(
    weights: &mut NetworkWeights,
    grads: &Gradients,
    velocity: &mut Gradients,
    cfg: &TrainConfig,
) -> Result<()> {
    let layout = weights.config.layout();
    if grads.tensors.len() != layout.len() || velocity.tensors.len() != layout.len() {
        return Err(Error::Shape("gradient layout does not match the network".into()));
    }
    for (i, spec) in layout.iter().enumerate() {
        if grads.tensors[i].len() != spec.len() || velocity.tensors[i].len() != spec.len() {
            return Err(Error::Shape(format!("gradient for `{}` has the wrong length", spec.name)));
        }
        if spec.trainable {
            sgd_step(&mut weights.tensors[i], &grads.tensors[i], &mut velocity.tensors[i], cfg.learning_rate, cfg.momentum);
        }
    }
    weights.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_examples() {
        let (mut w, mut v) = ([0.0], [0.0]);
        sgd_step(&mut w, &[1.0], &mut v, 0.01, 0.0);
        assert_eq!(w[0], -0.01);

        let (mut w, mut v) = ([0.7], [0.0]);
        sgd_step(&mut w, &[0.0], &mut v, 0.01, 0.9);
        assert_eq!(w[0], 0.7);

        let (mut w, mut v) = ([0.0], [0.0]);
        let (lr, g) = (0.01, 2.0);
        sgd_step(&mut w, &[g], &mut v, lr, 0.9);
        sgd_step(&mut w, &[g], &mut v, lr, 0.9);
        assert!((w[0] - (-lr * g * 2.9)).abs() < 1e-15);
    }

    #[test]
    fn layout_matches_architecture() {
        let cfg = NetworkConfig::default();
        let layout = cfg.layout();
        assert_eq!(layout.len(), 6 * 6 + 2);
        assert_eq!(layout[0].shape, [16, 1, 3, 3]);
        assert_eq!(layout[cfg.dec_base(2)].name, "dec2.conv.weight");
        assert_eq!(layout[cfg.dec_base(2)].shape, [32, 64, 3, 3]);
        assert_eq!(layout[cfg.dec_base(0)].shape, [16, 16, 3, 3]);
        assert_eq!(layout[cfg.cls_base()].shape, [2, 16, 1, 1]);
    }

    #[test]
    fn weights_round_trip_through_bytes() {
        let cfg = NetworkConfig { depth: 2, channels: vec![3, 5], ..NetworkConfig::default() };
        let w = NetworkWeights::init(&cfg, 9).unwrap();
        let bytes = w.to_bytes();
        assert_eq!(&bytes[..6], b"BSEGW1");
        assert_eq!(NetworkWeights::from_bytes(&bytes).unwrap(), w);
        assert!(NetworkWeights::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(NetworkWeights::from_bytes(&bad).is_err());
    }

    #[test]
    fn init_is_seeded_he_normal() {
        let cfg = NetworkConfig::default();
        let a = NetworkWeights::init(&cfg, 1).unwrap();
        assert_eq!(a, NetworkWeights::init(&cfg, 1).unwrap());
        assert_ne!(a, NetworkWeights::init(&cfg, 2).unwrap());
        let w = &a.tensors()[cfg.enc_base(2)];
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let expect = 2.0 / (32.0 * 9.0);
        assert!((var / expect - 1.0).abs() < 0.1, "{var} vs {expect}");
        assert!(a.tensors()[cfg.enc_base(2) + 1].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(NetworkConfig::default().validate().is_ok());
        assert!(NetworkConfig { depth: 0, channels: vec![], ..Default::default() }.validate().is_err());
        assert!(NetworkConfig { dropout: 1.0, ..Default::default() }.validate().is_err());
        assert!(NetworkConfig { channels: vec![16, 0, 64], ..Default::default() }.validate().is_err());
    }
}
