//! Quantization-aware training: SGD with Nesterov momentum, global-norm
//! gradient clipping, a step learning-rate schedule and class-balanced
//! batches. Also the checkpoint file format.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{augment, derive_seed, AugmentConfig, DatasetSplit, Label, LabeledWindow};
use crate::fxp::QuantPair;
use crate::metrics::{Evaluation, MetricReport};
use crate::nn::{
    bce_loss, forward_train, is_positive, network_backward, Accumulator, BatchNormParams,
    DsConvLayer, FeatureMap, NnError, QuantMode, QuantizedNetwork, RunningStats, BN_MOMENTUM,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("training diverged at epoch {epoch}, step {step}: loss is {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_initial: f64,
    /// Epochs after which the learning rate is divided by `lr_drop_factor`.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Defaults to one pass over the training windows.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
    /// Evaluate the validation partition after every epoch.
    #[serde(default = "default_true")]
    pub validate_each_epoch: bool,
}

fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr_initial: 0.01,
            lr_drop_epochs: vec![15, 25],
            lr_drop_factor: 10.0,
            momentum: 0.9,
            nesterov: true,
            grad_clip_norm: 1.0,
            batch_size: 32,
            seed: 0,
            steps_per_epoch: None,
            augment: Some(AugmentConfig::default()),
            validate_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr_initial >= 0.0) || !self.lr_initial.is_finite() {
            return bad("lr_initial must be a non-negative number");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.lr_drop_factor >= 1.0) {
            return bad("lr_drop_factor must be at least 1");
        }
        if let Some(a) = &self.augment {
            a.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Learning rate in effect during a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|d| epoch > **d).count();
        let mut lr = self.lr_initial;
        for _ in 0..drops {
            lr /= self.lr_drop_factor;
        }
        lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub max_grad_norm: f64,
    pub max_clipped_norm: f64,
    pub validation_loss: Option<f64>,
    pub validation: Option<MetricReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

/// Nesterov momentum buffers, one per trainable slice.
struct Optimizer {
    velocity: Vec<Vec<f64>>,
    momentum: f64,
    nesterov: bool,
}

impl Optimizer {
    fn new(net: &QuantizedNetwork, cfg: &TrainConfig) -> Self {
        Self {
            velocity: net.trainable().iter().map(|s| vec![0.0; s.len()]).collect(),
            momentum: cfg.momentum,
            nesterov: cfg.nesterov,
        }
    }

    fn step(&mut self, net: &mut QuantizedNetwork, grads: &[&[f64]], lr: f64) {
        for ((p, g), v) in net.trainable_mut().into_iter().zip(grads).zip(self.velocity.iter_mut()) {
            for i in 0..p.len() {
                v[i] = self.momentum * v[i] + g[i];
                let d = if self.nesterov { g[i] + self.momentum * v[i] } else { v[i] };
                p[i] -= lr * d;
            }
        }
    }
}

/// Scales the gradients so their global L2 norm is at most `max_norm`.
/// Returns the norms before and after.
pub fn clip_gradients(g: &mut crate::nn::Gradients, max_norm: f64) -> (f64, f64) {
    let norm = g.norm();
    if norm > max_norm {
        g.scale_by(max_norm / norm);
        let mut after = g.norm();
        // The rescaled norm can land an ulp above the bound.
        while after > max_norm {
            g.scale_by(1.0 - f64::EPSILON);
            after = g.norm();
        }
        (norm, after)
    } else {
        (norm, norm)
    }
}

/// Draws a batch with equal expected frequency for every label present.
fn balanced_batch(by_label: &[Vec<usize>], size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let present: Vec<&Vec<usize>> = by_label.iter().filter(|v| !v.is_empty()).collect();
    (0..size)
        .map(|_| {
            let group = present[rng.random_range(0..present.len())];
            group[rng.random_range(0..group.len())]
        })
        .collect()
}

/// Eval-mode loss and counts over a window set.
pub fn evaluate_windows(net: &QuantizedNetwork, windows: &[LabeledWindow]) -> Result<(f64, Evaluation)> {
    let plan = net.eval_plan()?;
    let logits: std::result::Result<Vec<f64>, NnError> = windows.iter().map(|w| plan.forward(&w.samples)).collect();
    let logits = logits?;
    let targets: Vec<f64> = windows.iter().map(|w| w.label.target()).collect();
    let eval = Evaluation::from_predictions(windows.iter().map(|w| w.label).zip(logits.iter().map(|l| is_positive(*l))))
        .map_err(|e| TrainError::Config(e.to_string()))?;
    Ok((bce_loss(&logits, &targets), eval))
}

/// Trains a copy of `net` on the training partition.
pub fn train(net: &QuantizedNetwork, split: &DatasetSplit, cfg: &TrainConfig) -> Result<(QuantizedNetwork, TrainHistory)> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(TrainError::Config("training partition is empty".into()));
    }
    let len = split.train[0].len();
    net.output_shapes(len)?;
    let mut net = net.clone();
    let mut by_label = vec![Vec::new(); 3];
    for (i, w) in split.train.iter().enumerate() {
        let slot = Label::ALL.iter().position(|l| *l == w.label).unwrap();
        by_label[slot].push(i);
    }
    let steps = cfg.steps_per_epoch.unwrap_or_else(|| split.train.len().div_ceil(cfg.batch_size)).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x7EA1, 0));
    let mut opt = Optimizer::new(&net, cfg);
    let mut bn_stats = RunningStats::new(&net, BN_MOMENTUM);
    let mut history = TrainHistory::default();
    let mut stream = 0u64;
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut max_norm = 0.0f64;
        let mut max_clipped = 0.0f64;
        for step in 0..steps {
            let idx = balanced_batch(&by_label, cfg.batch_size, &mut rng);
            let batch: Vec<FeatureMap> = idx
                .iter()
                .map(|&i| {
                    let w = &split.train[i];
                    stream += 1;
                    match &cfg.augment {
                        Some(a) => augment(w, &AugmentConfig { seed: derive_seed(cfg.seed, a.seed, 1), ..a.clone() }, stream)
                            .samples,
                        None => w.samples.clone(),
                    }
                })
                .collect();
            let targets: Vec<f64> = idx.iter().map(|&i| split.train[i].label.target()).collect();
            let cache = forward_train(&net, &batch, QuantMode::Quantize)?;
            let loss = bce_loss(&cache.logits, &targets);
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, step, loss });
            }
            loss_sum += loss;
            let mut grads = network_backward(&net, &cache, &targets)?;
            let (pre, post) = clip_gradients(&mut grads, cfg.grad_clip_norm);
            if !pre.is_finite() {
                return Err(TrainError::Diverged { epoch, step, loss: pre });
            }
            max_norm = max_norm.max(pre);
            max_clipped = max_clipped.max(post);
            opt.step(&mut net, &grads.slices(), lr);
            bn_stats.update(&mut net, &cache.batch_stats());
        }
        let (validation_loss, validation) = if cfg.validate_each_epoch && !split.validation.is_empty() {
            let (l, e) = evaluate_windows(&net, &split.validation)?;
            (Some(l), Some(e.report()))
        } else {
            (None, None)
        };
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / steps as f64,
            max_grad_norm: max_norm,
            max_clipped_norm: max_clipped,
            validation_loss,
            validation,
        });
    }
    Ok((net, history))
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_MAGIC: &[u8; 4] = b"AFCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerMeta {
    kernel: usize,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
    relu: bool,
    epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    genome: Option<String>,
    quant: QuantPair,
    input_channels: usize,
    accumulator: Accumulator,
    layers: Vec<LayerMeta>,
    config: Option<TrainConfig>,
    history: TrainHistory,
}

/// A trained network with the settings and history that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub genome: Option<String>,
    pub net: QuantizedNetwork,
    pub config: Option<TrainConfig>,
    pub history: TrainHistory,
}

fn param_slices(net: &QuantizedNetwork) -> Vec<&[f64]> {
    let mut out: Vec<&[f64]> = Vec::new();
    for l in &net.layers {
        out.extend([&l.depthwise[..], &l.pointwise[..], &l.bn.scale[..], &l.bn.bias[..], &l.bn.mean[..], &l.bn.variance[..]]);
    }
    out.push(&net.head_weights);
    out.push(std::slice::from_ref(&net.head_bias));
    out
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = CheckpointMeta {
            genome: self.genome.clone(),
            quant: self.net.quant,
            input_channels: self.net.input_channels,
            accumulator: self.net.accumulator,
            layers: self
                .net
                .layers
                .iter()
                .map(|l| LayerMeta {
                    kernel: l.kernel,
                    in_channels: l.in_channels,
                    out_channels: l.out_channels,
                    stride: l.stride,
                    relu: l.relu,
                    epsilon: l.bn.epsilon,
                })
                .collect(),
            config: self.config.clone(),
            history: self.history.clone(),
        };
        let json = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for s in param_slices(&self.net) {
            for v in s {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let err = |msg: String| TrainError::Checkpoint { path: path.to_string(), msg };
        if bytes.len() < 10 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(err("bad magic at offset 0".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(err(format!("unsupported version {version} at offset 4")));
        }
        let n = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        let json = bytes.get(10..10 + n).ok_or_else(|| err(format!("metadata truncated at offset {}", bytes.len())))?;
        let meta: CheckpointMeta = serde_json::from_slice(json).map_err(|e| err(format!("metadata at offset 10: {e}")))?;
        let mut net = QuantizedNetwork {
            layers: meta
                .layers
                .iter()
                .map(|l| DsConvLayer {
                    kernel: l.kernel,
                    in_channels: l.in_channels,
                    out_channels: l.out_channels,
                    stride: l.stride,
                    depthwise: vec![0.0; l.kernel * l.in_channels],
                    pointwise: vec![0.0; l.in_channels * l.out_channels],
                    bn: BatchNormParams { epsilon: l.epsilon, ..BatchNormParams::identity(l.out_channels) },
                    relu: l.relu,
                })
                .collect(),
            head_weights: vec![0.0; meta.layers.last().map_or(meta.input_channels, |l| l.out_channels)],
            head_bias: 0.0,
            quant: meta.quant,
            input_channels: meta.input_channels,
            accumulator: meta.accumulator,
        };
        let mut offset = 10 + n;
        {
            let mut slices: Vec<&mut [f64]> = Vec::new();
            for l in net.layers.iter_mut() {
                slices.push(&mut l.depthwise);
                slices.push(&mut l.pointwise);
                slices.push(&mut l.bn.scale);
                slices.push(&mut l.bn.bias);
                slices.push(&mut l.bn.mean);
                slices.push(&mut l.bn.variance);
            }
            slices.push(&mut net.head_weights);
            slices.push(std::slice::from_mut(&mut net.head_bias));
            for s in slices {
                for v in s.iter_mut() {
                    let b = bytes.get(offset..offset + 8).ok_or_else(|| err(format!("parameters truncated at offset {offset}")))?;
                    *v = f64::from_le_bytes(b.try_into().unwrap());
                    offset += 8;
                }
            }
        }
        if offset != bytes.len() {
            return Err(err(format!("{} trailing bytes at offset {offset}", bytes.len() - offset)));
        }
        net.validate().map_err(|e| err(e.to_string()))?;
        Ok(Checkpoint { genome: meta.genome, net, config: meta.config, history: meta.history })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| TrainError::Checkpoint { path: path.display().to_string(), msg: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| TrainError::Checkpoint { path: path.display().to_string(), msg: e.to_string() })?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
