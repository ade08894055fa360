//! Quantized 1D depthwise-separable CNNs: forward passes for training and
//! inference, and hand-derived backpropagation with straight-through
//! estimators.
//!
//! A layer computes `Q_a(Q_a(Q_a(X) * Q_w(W_d)) * Q_w(W_p))` (depthwise stage
//! with stride, then pointwise), followed by quantized batch normalization and
//! an optional ReLU. The network ends with a fused global-average-pool and
//! fully-connected head that produces one logit.
//!
//! Feature maps are stored time-major: element `(t, c)` sits at `t * C + c`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fxp::{pow2, round_half_away, round_to_frac, FxpFormat, Grid, QuantPair};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("infeasible shape: layer {layer} receives length {length} but needs at least kernel {kernel}")]
    InfeasibleShape { layer: usize, length: usize, kernel: usize },
}

pub type Result<T> = std::result::Result<T, NnError>;

fn contract(msg: impl Into<String>) -> NnError {
    NnError::Contract(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    length: usize,
    channels: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(length: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if length == 0 || channels == 0 {
            return Err(contract("feature map needs at least one sample and one channel"));
        }
        if values.len() != length * channels {
            return Err(contract(format!("expected {} values, got {}", length * channels, values.len())));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(contract(format!("non-finite feature value {v}")));
        }
        Ok(Self { length, channels, values })
    }

    pub fn zeros(length: usize, channels: usize) -> Self {
        assert!(length > 0 && channels > 0);
        Self { length, channels, values: vec![0.0; length * channels] }
    }

    pub fn from_fn(length: usize, channels: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(length > 0 && channels > 0);
        let mut values = Vec::with_capacity(length * channels);
        for t in 0..length {
            for c in 0..channels {
                values.push(f(t, c));
            }
        }
        Self { length, channels, values }
    }

    /// Single-channel map from a sequence.
    pub fn from_column(xs: &[f64]) -> Result<Self> {
        Self::new(xs.len(), 1, xs.to_vec())
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.channels + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.length).map(|t| self.get(t, c)).collect()
    }
}

/// How MAC results are held before re-quantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Accumulator {
    /// Full precision; every product and sum is kept exactly.
    Exact,
    /// Sums rounded (half away from zero) to this many fractional bits.
    FracBits(u32),
}

impl Default for Accumulator {
    fn default() -> Self {
        Accumulator::FracBits(12)
    }
}

impl Accumulator {
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Accumulator::Exact => x,
            Accumulator::FracBits(f) => round_to_frac(x, f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Quantizer behaviour in the forward pass. `Surrogate` replaces every
/// quantizer by its straight-through surrogate (clip only) and accumulators by
/// identity, which turns the network into the function whose exact gradient
/// the backward pass computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    Quantize,
    Surrogate,
}

#[derive(Debug, Clone, Copy)]
struct Numerics {
    mode: QuantMode,
    a: Grid,
    w: Grid,
    /// Scale and step of the accumulator grid; `None` when exact.
    acc: Option<(f64, f64)>,
}

impl Numerics {
    fn new(mode: QuantMode, quant: QuantPair, acc: Accumulator) -> Self {
        let acc = match acc {
            Accumulator::Exact => None,
            Accumulator::FracBits(f) => Some((pow2(f as i32), pow2(-(f as i32)))),
        };
        Self { mode, a: quant.activations.grid(), w: quant.weights.grid(), acc }
    }

    #[inline(always)]
    fn qa(&self, x: f64) -> f64 {
        match self.mode {
            QuantMode::Quantize => self.a.apply(x),
            QuantMode::Surrogate => self.a.clip(x),
        }
    }

    #[inline(always)]
    fn qw(&self, x: f64) -> f64 {
        match self.mode {
            QuantMode::Quantize => self.w.apply(x),
            QuantMode::Surrogate => self.w.clip(x),
        }
    }

    #[inline(always)]
    fn racc(&self, x: f64) -> f64 {
        match (self.mode, self.acc) {
            (QuantMode::Quantize, Some((scale, lsb))) => round_half_away(x * scale) * lsb,
            _ => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
    pub epsilon: f64,
}

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

/// Per-channel affine `y * scale + bias` equivalent to an eval-mode batchnorm,
/// with both vectors on the weight grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedAffine {
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
}

impl BatchNormParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            variance: vec![1.0; channels],
            scale: vec![1.0; channels],
            bias: vec![0.0; channels],
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    fn check(&self, channels: usize) -> Result<()> {
        let n = channels;
        if self.mean.len() != n || self.variance.len() != n || self.scale.len() != n || self.bias.len() != n {
            return Err(contract(format!("batchnorm parameters do not match {n} channels")));
        }
        if !(self.epsilon > 0.0) {
            return Err(contract("batchnorm epsilon must be positive"));
        }
        if self.variance.iter().any(|v| *v < 0.0) {
            return Err(contract("batchnorm variance must be non-negative"));
        }
        Ok(())
    }

    /// Folds the stored statistics into a per-channel scale and bias:
    /// `s = Q_w(Q_w(γ) / sqrt(Q_w(σ)² + ε))`, `b = Q_w(Q_w(β) − Q_w(μ)·s)`.
    pub fn fold(&self, weights: FxpFormat) -> FoldedAffine {
        let mut scale = Vec::with_capacity(self.channels());
        let mut bias = Vec::with_capacity(self.channels());
        for c in 0..self.channels() {
            let sigma = weights.apply(self.variance[c].sqrt());
            let denom = (sigma * sigma + self.epsilon).sqrt();
            let s = weights.apply(weights.apply(self.scale[c]) / denom);
            let b = weights.apply(weights.apply(self.bias[c]) - weights.apply(self.mean[c]) * s);
            scale.push(s);
            bias.push(b);
        }
        FoldedAffine { scale, bias }
    }
}

/// Kernel size, output channels and stride of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerShape {
    pub kernel: usize,
    pub channels: usize,
    pub stride: usize,
}

impl LayerShape {
    pub fn new(kernel: usize, channels: usize, stride: usize) -> Self {
        Self { kernel, channels, stride }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsConvLayer {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// `K x C_in`, index `k * C_in + c`.
    pub depthwise: Vec<f64>,
    /// `C_in x C_out`, index `c * C_out + o`.
    pub pointwise: Vec<f64>,
    pub bn: BatchNormParams,
    pub relu: bool,
}

impl DsConvLayer {
    pub fn output_length(&self, input_length: usize) -> Option<usize> {
        conv_output_length(input_length, self.kernel, self.stride)
    }

    fn check(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(contract("layer dimensions must be positive"));
        }
        if self.depthwise.len() != self.kernel * self.in_channels {
            return Err(contract("depthwise weight shape mismatch"));
        }
        if self.pointwise.len() != self.in_channels * self.out_channels {
            return Err(contract("pointwise weight shape mismatch"));
        }
        self.bn.check(self.out_channels)
    }

    pub fn param_count(&self) -> usize {
        layer_param_count(self.kernel, self.in_channels, self.out_channels)
    }
}

/// Valid-padding output length `⌊(H − K)/S⌋ + 1`, or `None` when `H < K`.
pub fn conv_output_length(input_length: usize, kernel: usize, stride: usize) -> Option<usize> {
    if input_length < kernel || stride == 0 {
        None
    } else {
        Some((input_length - kernel) / stride + 1)
    }
}

/// Depthwise + pointwise weights plus batchnorm scale and bias.
pub fn layer_param_count(kernel: usize, in_channels: usize, out_channels: usize) -> usize {
    kernel * in_channels + in_channels * out_channels + 2 * out_channels
}

/// Parameters of a full network: every layer plus the `C_last + 1` head.
pub fn architecture_param_count(input_channels: usize, layers: &[LayerShape]) -> usize {
    let mut c_in = input_channels;
    let mut total = 0;
    for l in layers {
        total += layer_param_count(l.kernel, c_in, l.channels);
        c_in = l.channels;
    }
    total + c_in + 1
}

/// Output `(length, channels)` of each layer, or the index of the first
/// layer whose input is shorter than its kernel.
pub fn architecture_output_shapes(
    input_length: usize,
    layers: &[LayerShape],
) -> std::result::Result<Vec<(usize, usize)>, (usize, usize)> {
    let mut h = input_length;
    let mut shapes = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        h = conv_output_length(h, l.kernel, l.stride).ok_or((i, h))?;
        shapes.push((h, l.channels));
    }
    Ok(shapes)
}

/// Multiply-accumulates of one depthwise-separable layer producing
/// `output_positions` time steps: `positions · C_in · (K + C_out)`.
pub fn dsconv_mac_count(output_positions: usize, in_channels: usize, kernel: usize, out_channels: usize) -> u64 {
    (output_positions * in_channels * (kernel + out_channels)) as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedNetwork {
    pub layers: Vec<DsConvLayer>,
    pub head_weights: Vec<f64>,
    pub head_bias: f64,
    pub quant: QuantPair,
    pub input_channels: usize,
    #[serde(default)]
    pub accumulator: Accumulator,
}

pub const DEFAULT_INPUT_CHANNELS: usize = 2;
pub const MAX_LAYERS: usize = 5;

fn glorot(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, fan_out: usize, fmt: FxpFormat) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| fmt.apply(rng.random_range(-limit..=limit))).collect()
}

impl QuantizedNetwork {
    /// Randomly initialized network; every layer but the last gets a ReLU.
    pub fn init(input_channels: usize, shapes: &[LayerShape], quant: QuantPair, seed: u64) -> Result<Self> {
        if shapes.is_empty() {
            return Err(contract("a network needs at least one layer"));
        }
        if shapes.len() > MAX_LAYERS {
            return Err(contract(format!("at most {MAX_LAYERS} layers are supported")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wf = quant.weights;
        let mut layers = Vec::with_capacity(shapes.len());
        let mut c_in = input_channels;
        for s in shapes {
            if s.kernel == 0 || s.channels == 0 || s.stride == 0 {
                return Err(contract("layer dimensions must be positive"));
            }
            layers.push(DsConvLayer {
                kernel: s.kernel,
                in_channels: c_in,
                out_channels: s.channels,
                stride: s.stride,
                depthwise: glorot(&mut rng, s.kernel * c_in, s.kernel, s.kernel, wf),
                pointwise: glorot(&mut rng, c_in * s.channels, c_in, s.channels, wf),
                bn: BatchNormParams::identity(s.channels),
                relu: true,
            });
            c_in = s.channels;
        }
        let head_weights = glorot(&mut rng, c_in, c_in, 1, wf);
        Ok(Self { layers, head_weights, head_bias: 0.0, quant, input_channels, accumulator: Accumulator::default() })
    }

    pub fn with_final_relu(mut self, relu: bool) -> Self {
        if let Some(l) = self.layers.last_mut() {
            l.relu = relu;
        }
        self
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        self.layers.iter().map(|l| LayerShape::new(l.kernel, l.out_channels, l.stride)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(contract("a network needs at least one layer"));
        }
        if self.layers.len() > MAX_LAYERS {
            return Err(contract(format!("at most {MAX_LAYERS} layers are supported")));
        }
        let mut c = self.input_channels;
        for (i, l) in self.layers.iter().enumerate() {
            l.check()?;
            if l.in_channels != c {
                return Err(contract(format!("layer {i} expects {} channels but receives {c}", l.in_channels)));
            }
            c = l.out_channels;
        }
        if self.head_weights.len() != c {
            return Err(contract("head weights do not match final channel count"));
        }
        Ok(())
    }

    pub fn final_channels(&self) -> usize {
        self.layers.last().map(|l| l.out_channels).unwrap_or(self.input_channels)
    }

    /// Every trainable and statistical parameter slice, in a fixed order.
    pub fn param_count(&self) -> Result<usize> {
        self.validate()?;
        Ok(architecture_param_count(self.input_channels, &self.shapes()))
    }

    pub fn output_shapes(&self, input_length: usize) -> Result<Vec<(usize, usize)>> {
        self.validate()?;
        architecture_output_shapes(input_length, &self.shapes())
            .map_err(|(layer, length)| NnError::InfeasibleShape { layer, length, kernel: self.layers[layer].kernel })
    }

    /// Mutable views of the trainable parameters, in the order used by [`Gradients`].
    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(self.layers.len() * 4 + 2);
        for l in self.layers.iter_mut() {
            out.push(&mut l.depthwise);
            out.push(&mut l.pointwise);
            out.push(&mut l.bn.scale);
            out.push(&mut l.bn.bias);
        }
        out.push(&mut self.head_weights);
        out.push(std::slice::from_mut(&mut self.head_bias));
        out
    }

    pub fn trainable(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(self.layers.len() * 4 + 2);
        for l in self.layers.iter() {
            out.push(&l.depthwise);
            out.push(&l.pointwise);
            out.push(&l.bn.scale);
            out.push(&l.bn.bias);
        }
        out.push(&self.head_weights);
        out.push(std::slice::from_ref(&self.head_bias));
        out
    }

    fn numerics(&self, mode: QuantMode) -> Numerics {
        Numerics::new(mode, self.quant, self.accumulator)
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        if x.channels != self.input_channels {
            return Err(contract(format!("input has {} channels, network expects {}", x.channels, self.input_channels)));
        }
        Ok(())
    }

    /// Precomputed quantized weights and folded batchnorms for inference.
    pub fn eval_plan(&self) -> Result<EvalPlan> {
        self.validate()?;
        let nm = self.numerics(QuantMode::Quantize);
        let layers = self
            .layers
            .iter()
            .map(|l| EvalLayer {
                kernel: l.kernel,
                stride: l.stride,
                in_channels: l.in_channels,
                out_channels: l.out_channels,
                depthwise: l.depthwise.iter().map(|w| nm.qw(*w)).collect(),
                pointwise: l.pointwise.iter().map(|w| nm.qw(*w)).collect(),
                affine: l.bn.fold(self.quant.weights),
                relu: l.relu,
            })
            .collect();
        Ok(EvalPlan {
            layers,
            head_weights: self.head_weights.iter().map(|w| nm.qw(*w)).collect(),
            head_bias: nm.qw(self.head_bias),
            quant: self.quant,
            accumulator: self.accumulator,
            input_channels: self.input_channels,
        })
    }
}

/// Quantized depthwise stage: returns the accumulator values fed to `Q_a`.
fn depthwise_pre(
    xq: &[f64],
    h_in: usize,
    c: usize,
    wdq: &[f64],
    k: usize,
    s: usize,
    nm: &Numerics,
    macs: &mut u64,
) -> (Vec<f64>, usize) {
    let h_out = (h_in - k) / s + 1;
    let mut out = vec![0.0; h_out * c];
    for (t, row) in out.chunks_exact_mut(c).enumerate() {
        let window = &xq[t * s * c..(t * s + k) * c];
        for (src, w) in window.chunks_exact(c).zip(wdq.chunks_exact(c)) {
            for ((r, x), w) in row.iter_mut().zip(src).zip(w) {
                *r += x * w;
            }
            *macs += src.len() as u64;
        }
        for v in row.iter_mut() {
            *v = nm.racc(*v);
        }
    }
    (out, h_out)
}

/// Pointwise stage over already-quantized depthwise outputs.
fn pointwise_pre(d: &[f64], h: usize, c_in: usize, wpq: &[f64], c_out: usize, nm: &Numerics, macs: &mut u64) -> Vec<f64> {
    let mut out = vec![0.0; h * c_out];
    for (row, src) in out.chunks_exact_mut(c_out).zip(d[..h * c_in].chunks_exact(c_in)) {
        for (&a, w) in src.iter().zip(wpq.chunks_exact(c_out)) {
            for (r, w) in row.iter_mut().zip(w) {
                *r += a * w;
            }
            *macs += w.len() as u64;
        }
        for v in row.iter_mut() {
            *v = nm.racc(*v);
        }
    }
    out
}

/// Quantized depthwise-separable convolution. Returns the activation-quantized
/// output and the number of multiply-accumulates performed.
pub fn dsconv_forward(x: &FeatureMap, layer: &DsConvLayer, quant: QuantPair, acc: Accumulator) -> Result<(FeatureMap, u64)> {
    layer.check()?;
    if x.channels != layer.in_channels {
        return Err(contract(format!("input has {} channels, layer expects {}", x.channels, layer.in_channels)));
    }
    if x.length < layer.kernel {
        return Err(NnError::InfeasibleShape { layer: 0, length: x.length, kernel: layer.kernel });
    }
    let nm = Numerics::new(QuantMode::Quantize, quant, acc);
    let xq: Vec<f64> = x.values.iter().map(|v| nm.qa(*v)).collect();
    let wdq: Vec<f64> = layer.depthwise.iter().map(|w| nm.qw(*w)).collect();
    let wpq: Vec<f64> = layer.pointwise.iter().map(|w| nm.qw(*w)).collect();
    let mut macs = 0;
    let (u, h_out) = depthwise_pre(&xq, x.length, layer.in_channels, &wdq, layer.kernel, layer.stride, &nm, &mut macs);
    let d: Vec<f64> = u.iter().map(|v| nm.qa(*v)).collect();
    let v = pointwise_pre(&d, h_out, layer.in_channels, &wpq, layer.out_channels, &nm, &mut macs);
    let y: Vec<f64> = v.iter().map(|v| nm.qa(*v)).collect();
    Ok((FeatureMap { length: h_out, channels: layer.out_channels, values: y }, macs))
}

/// Batch statistics produced by a training-mode batchnorm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Quantized batch normalization of a single map.
///
/// In `Train` mode the statistics are taken from `x` itself and returned; in
/// `Eval` mode the stored statistics are folded into a per-channel affine on
/// the weight grid. The result is activation-quantized.
pub fn batchnorm_forward(
    x: &FeatureMap,
    bn: &BatchNormParams,
    quant: QuantPair,
    mode: Mode,
) -> Result<(FeatureMap, Option<BatchStats>)> {
    bn.check(x.channels)?;
    let nm = Numerics::new(QuantMode::Quantize, quant, Accumulator::Exact);
    let c = x.channels;
    match mode {
        Mode::Eval => {
            let aff = bn.fold(quant.weights);
            let mut values = Vec::with_capacity(x.values.len());
            for row in x.values.chunks_exact(c) {
                for ((v, s), b) in row.iter().zip(&aff.scale).zip(&aff.bias) {
                    values.push(nm.qa(nm.qa(*v) * s + b));
                }
            }
            Ok((FeatureMap { length: x.length, channels: c, values }, None))
        }
        Mode::Train => {
            let xq: Vec<f64> = x.values.iter().map(|v| nm.qa(*v)).collect();
            let stats = channel_stats(std::slice::from_ref(&xq), c);
            let values = normalize_train(&xq, c, &stats, bn, &nm);
            Ok((FeatureMap { length: x.length, channels: c, values }, Some(stats)))
        }
    }
}

fn channel_stats(maps: &[Vec<f64>], c: usize) -> BatchStats {
    let n: usize = maps.iter().map(|m| m.len() / c).sum();
    let mut mean = vec![0.0; c];
    for m in maps {
        for row in m.chunks_exact(c) {
            for (acc, v) in mean.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut variance = vec![0.0; c];
    for m in maps {
        for row in m.chunks_exact(c) {
            for ((acc, v), mu) in variance.iter_mut().zip(row).zip(&mean) {
                let d = v - mu;
                *acc += d * d;
            }
        }
    }
    variance.iter_mut().for_each(|v| *v /= n as f64);
    BatchStats { mean, variance }
}

/// Training-mode normalization constants for one channel.
#[derive(Debug, Clone, Copy)]
struct BnChannel {
    sigma: f64,
    mu_q: f64,
    sigma_q: f64,
    denom: f64,
    gamma_q: f64,
    beta_q: f64,
}

fn bn_channels(stats: &BatchStats, bn: &BatchNormParams, nm: &Numerics) -> Vec<BnChannel> {
    (0..stats.mean.len())
        .map(|c| {
            let sigma = stats.variance[c].sqrt();
            let mu_q = nm.qw(stats.mean[c]);
            let sigma_q = nm.qw(sigma);
            BnChannel {
                sigma,
                mu_q,
                sigma_q,
                denom: (sigma_q * sigma_q + bn.epsilon).sqrt(),
                gamma_q: nm.qw(bn.scale[c]),
                beta_q: nm.qw(bn.bias[c]),
            }
        })
        .collect()
}

fn normalize_train(xq: &[f64], c: usize, stats: &BatchStats, bn: &BatchNormParams, nm: &Numerics) -> Vec<f64> {
    let ch = bn_channels(stats, bn, nm);
    let mut out = Vec::with_capacity(xq.len());
    for row in xq.chunks_exact(c) {
        for (v, k) in row.iter().zip(&ch) {
            out.push(nm.qa((v - k.mu_q) / k.denom * k.gamma_q + k.beta_q));
        }
    }
    out
}

/// Fused global-average-pool and fully-connected head.
///
/// Keeps one running sum per channel and takes a single dot product at the
/// end: `(Σ_c Q_w(w_c)·Σ_t x[t,c] + Q_w(b)·H) / H`.
pub fn gap_fc_forward(x: &FeatureMap, head_weights: &[f64], head_bias: f64, quant: QuantPair) -> Result<f64> {
    if head_weights.len() != x.channels {
        return Err(contract("head weights do not match channel count"));
    }
    let nm = Numerics::new(QuantMode::Quantize, quant, Accumulator::Exact);
    let wq: Vec<f64> = head_weights.iter().map(|w| nm.qw(*w)).collect();
    Ok(head_logit(&x.values, x.length, x.channels, &wq, nm.qw(head_bias)))
}

fn channel_sums(values: &[f64], c: usize) -> Vec<f64> {
    let mut sums = vec![0.0; c];
    for row in values.chunks_exact(c) {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    sums
}

fn head_logit(values: &[f64], h: usize, c: usize, wq: &[f64], bq: f64) -> f64 {
    let sums = channel_sums(values, c);
    let dot: f64 = sums.iter().zip(wq).map(|(s, w)| s * w).sum();
    (dot + bq * h as f64) / h as f64
}

#[derive(Debug, Clone)]
pub struct EvalLayer {
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub depthwise: Vec<f64>,
    pub pointwise: Vec<f64>,
    pub affine: FoldedAffine,
    pub relu: bool,
}

/// Inference-ready view of a network (weights already quantized).
#[derive(Debug, Clone)]
pub struct EvalPlan {
    pub layers: Vec<EvalLayer>,
    pub head_weights: Vec<f64>,
    pub head_bias: f64,
    pub quant: QuantPair,
    pub accumulator: Accumulator,
    pub input_channels: usize,
}

/// Per-stage extremes seen during evaluation, used to size accumulators.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RangeProfile {
    /// Per layer: max |value| at the depthwise, pointwise and affine accumulators.
    pub layers: Vec<[f64; 3]>,
    pub head: f64,
}

impl RangeProfile {
    pub fn merge(&mut self, other: &RangeProfile) {
        if self.layers.len() < other.layers.len() {
            self.layers.resize(other.layers.len(), [0.0; 3]);
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for i in 0..3 {
                a[i] = a[i].max(b[i]);
            }
        }
        self.head = self.head.max(other.head);
    }
}

fn max_abs(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

impl EvalPlan {
    /// Activation-quantized logit.
    pub fn forward(&self, x: &FeatureMap) -> Result<f64> {
        self.run(x, None).map(|(l, _)| l)
    }

    pub fn forward_profiled(&self, x: &FeatureMap, profile: &mut RangeProfile) -> Result<f64> {
        self.run(x, Some(profile)).map(|(l, _)| l)
    }

    /// Logit plus the number of multiply-accumulates in the convolution stages.
    pub fn forward_counted(&self, x: &FeatureMap) -> Result<(f64, u64)> {
        self.run(x, None)
    }

    fn run(&self, x: &FeatureMap, mut profile: Option<&mut RangeProfile>) -> Result<(f64, u64)> {
        if x.channels != self.input_channels {
            return Err(contract(format!("input has {} channels, network expects {}", x.channels, self.input_channels)));
        }
        let nm = Numerics::new(QuantMode::Quantize, self.quant, self.accumulator);
        if let Some(p) = profile.as_deref_mut() {
            if p.layers.len() < self.layers.len() {
                p.layers.resize(self.layers.len(), [0.0; 3]);
            }
        }
        let mut cur: Vec<f64> = x.values.iter().map(|v| nm.qa(*v)).collect();
        let mut h = x.length;
        let mut macs = 0;
        for (i, l) in self.layers.iter().enumerate() {
            if h < l.kernel {
                return Err(NnError::InfeasibleShape { layer: i, length: h, kernel: l.kernel });
            }
            let (u, h_out) = depthwise_pre(&cur, h, l.in_channels, &l.depthwise, l.kernel, l.stride, &nm, &mut macs);
            let d: Vec<f64> = u.iter().map(|v| nm.qa(*v)).collect();
            let v = pointwise_pre(&d, h_out, l.in_channels, &l.pointwise, l.out_channels, &nm, &mut macs);
            let c = l.out_channels;
            let mut aff_max = 0.0f64;
            let mut out = Vec::with_capacity(v.len());
            for row in v.chunks_exact(c) {
                for ((vv, sc), bi) in row.iter().zip(&l.affine.scale).zip(&l.affine.bias) {
                    let a = nm.racc(nm.qa(*vv) * sc + bi);
                    aff_max = aff_max.max(a.abs());
                    let z = nm.qa(a);
                    out.push(if l.relu { z.max(0.0) } else { z });
                }
            }
            if let Some(p) = profile.as_deref_mut() {
                let e = &mut p.layers[i];
                e[0] = e[0].max(max_abs(&u));
                e[1] = e[1].max(max_abs(&v));
                e[2] = e[2].max(aff_max);
            }
            cur = out;
            h = h_out;
        }
        let c = self.layers.last().map(|l| l.out_channels).unwrap_or(self.input_channels);
        let sums = channel_sums(&cur, c);
        let dot: f64 = sums.iter().zip(&self.head_weights).map(|(s, w)| s * w).sum();
        let num = dot + self.head_bias * h as f64;
        if let Some(p) = profile {
            p.head = p.head.max(num.abs()).max(max_abs(&sums));
        }
        Ok((head_quantize(num, h, self.quant), macs))
    }
}

/// `Q_a(num / h)` with the division done exactly. `num` lies on the
/// `2^-(p_a + p_w)` grid, so scaling it to an integer loses nothing.
fn head_quantize(num: f64, h: usize, quant: QuantPair) -> f64 {
    let (a, w) = (quant.activations, quant.weights);
    let n = (num * ((a.precision_bits + w.precision_bits) as f64).exp2()).round();
    if n.abs() >= 2f64.powi(100) {
        return a.apply(num / h as f64);
    }
    let den = (h as i128) << w.precision_bits;
    let code = crate::fxp::div_round(n as i128, den).clamp(a.min_code() as i128, a.max_code() as i128);
    code as f64 / a.scale()
}

/// Forward pass for a single input. `Eval` returns the activation-quantized
/// logit; `Train` uses the input's own batch statistics and returns the raw logit.
pub fn network_forward(net: &QuantizedNetwork, x: &FeatureMap, mode: Mode) -> Result<f64> {
    net.check_input(x)?;
    match mode {
        Mode::Eval => net.eval_plan()?.forward(x),
        Mode::Train => Ok(forward_train(net, std::slice::from_ref(x), QuantMode::Quantize)?.logits[0]),
    }
}

/// AF decision for an eval-mode logit.
pub fn is_positive(logit: f64) -> bool {
    logit > 0.0
}

struct LayerCache {
    h_in: usize,
    h_out: usize,
    /// Per sample: layer input (activation-quantized), raw layer input value
    /// seen by the input quantizer, depthwise and pointwise accumulators, and
    /// the pre-quantization batchnorm output.
    xq: Vec<Vec<f64>>,
    x_raw: Option<Vec<Vec<f64>>>,
    u: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    z_pre: Vec<Vec<f64>>,
    stats: BatchStats,
    channels: Vec<BnChannel>,
}

/// Everything the backward pass needs from a training-mode forward.
pub struct TrainCache {
    mode: QuantMode,
    layers: Vec<LayerCache>,
    final_out: Vec<Vec<f64>>,
    final_len: usize,
    pub logits: Vec<f64>,
}

impl TrainCache {
    /// Batch statistics of every layer, for updating the moving averages.
    pub fn batch_stats(&self) -> Vec<BatchStats> {
        self.layers.iter().map(|l| l.stats.clone()).collect()
    }

    /// Sign and saturation state of every intermediate value: which ReLUs
    /// fire and which quantizer inputs lie inside the clip range. Two forward
    /// passes with equal patterns are on the same smooth piece.
    pub fn activation_pattern(&self, quant: QuantPair) -> Vec<u8> {
        let af = quant.activations;
        let mut out = Vec::new();
        for l in &self.layers {
            for sample in l.u.iter().chain(&l.v) {
                out.extend(sample.iter().map(|x| af.passes_gradient(*x) as u8));
            }
            for sample in &l.z_pre {
                out.extend(sample.iter().map(|x| (af.passes_gradient(*x) as u8) << 1 | (*x > 0.0) as u8));
            }
        }
        out
    }
}

/// Training-mode forward over a batch (batchnorm uses batch statistics).
pub fn forward_train(net: &QuantizedNetwork, batch: &[FeatureMap], mode: QuantMode) -> Result<TrainCache> {
    net.validate()?;
    if batch.is_empty() {
        return Err(contract("empty batch"));
    }
    let len = batch[0].length;
    for x in batch {
        net.check_input(x)?;
        if x.length != len {
            return Err(contract("all windows in a batch must have the same length"));
        }
    }
    let nm = net.numerics(mode);
    let mut raw: Vec<Vec<f64>> = batch.iter().map(|x| x.values.clone()).collect();
    let mut h = len;
    let mut caches = Vec::with_capacity(net.layers.len());
    let mut macs = 0;
    for (i, l) in net.layers.iter().enumerate() {
        if h < l.kernel {
            return Err(NnError::InfeasibleShape { layer: i, length: h, kernel: l.kernel });
        }
        let wdq: Vec<f64> = l.depthwise.iter().map(|w| nm.qw(*w)).collect();
        let wpq: Vec<f64> = l.pointwise.iter().map(|w| nm.qw(*w)).collect();
        let xq: Vec<Vec<f64>> = raw.iter().map(|x| x.iter().map(|v| nm.qa(*v)).collect()).collect();
        let mut us = Vec::with_capacity(batch.len());
        let mut vs = Vec::with_capacity(batch.len());
        let mut ys = Vec::with_capacity(batch.len());
        let mut h_out = 0;
        for x in &xq {
            let (u, ho) = depthwise_pre(x, h, l.in_channels, &wdq, l.kernel, l.stride, &nm, &mut macs);
            h_out = ho;
            let d: Vec<f64> = u.iter().map(|v| nm.qa(*v)).collect();
            let v = pointwise_pre(&d, h_out, l.in_channels, &wpq, l.out_channels, &nm, &mut macs);
            // Q_a is idempotent: the convolution's output quantizer and the
            // batchnorm's input quantizer collapse into one.
            ys.push(v.iter().map(|v| nm.qa(*v)).collect::<Vec<f64>>());
            us.push(u);
            vs.push(v);
        }
        let c = l.out_channels;
        let stats = channel_stats(&ys, c);
        let channels = bn_channels(&stats, &l.bn, &nm);
        let mut z_pre = Vec::with_capacity(batch.len());
        let mut next = Vec::with_capacity(batch.len());
        for y in &ys {
            let mut zp = Vec::with_capacity(y.len());
            for row in y.chunks_exact(c) {
                for (v, k) in row.iter().zip(&channels) {
                    zp.push((v - k.mu_q) / k.denom * k.gamma_q + k.beta_q);
                }
            }
            next.push(
                zp.iter()
                    .map(|v| {
                        let z = nm.qa(*v);
                        if l.relu {
                            z.max(0.0)
                        } else {
                            z
                        }
                    })
                    .collect::<Vec<f64>>(),
            );
            z_pre.push(zp);
        }
        caches.push(LayerCache {
            h_in: h,
            h_out,
            x_raw: if i == 0 { None } else { Some(raw) },
            xq,
            u: us,
            v: vs,
            z_pre,
            stats,
            channels,
        });
        raw = next;
        h = h_out;
    }
    let c = net.final_channels();
    let wq: Vec<f64> = net.head_weights.iter().map(|w| nm.qw(*w)).collect();
    let bq = nm.qw(net.head_bias);
    let logits = raw.iter().map(|r| head_logit(r, h, c, &wq, bq)).collect();
    Ok(TrainCache { mode, layers: caches, final_out: raw, final_len: h, logits })
}

/// Numerically stable `log(1 + e^x)`.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean sigmoid cross-entropy of logits against 0/1 targets.
pub fn bce_loss(logits: &[f64], targets: &[f64]) -> f64 {
    let n = logits.len() as f64;
    logits.iter().zip(targets).map(|(l, y)| softplus(*l) - y * l).sum::<f64>() / n
}

/// Gradients in the same layout as [`QuantizedNetwork::trainable`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradients>,
    pub head_weights: Vec<f64>,
    pub head_bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub depthwise: Vec<f64>,
    pub pointwise: Vec<f64>,
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradients {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.push(&l.depthwise);
            out.push(&l.pointwise);
            out.push(&l.scale);
            out.push(&l.bias);
        }
        out.push(&self.head_weights);
        out.push(std::slice::from_ref(&self.head_bias));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in self.layers.iter_mut() {
            out.push(&mut l.depthwise);
            out.push(&mut l.pointwise);
            out.push(&mut l.scale);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head_weights);
        out.push(std::slice::from_mut(&mut self.head_bias));
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().into_iter().flatten().copied().collect()
    }

    pub fn norm(&self) -> f64 {
        self.slices().into_iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale_by(&mut self, k: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|g| *g *= k);
        }
    }
}

/// Exact gradients of the mean sigmoid cross-entropy with respect to every
/// trainable parameter, with quantizers differentiated by [`crate::fxp::ste_grad`].
pub fn network_backward(net: &QuantizedNetwork, cache: &TrainCache, targets: &[f64]) -> Result<Gradients> {
    let b = cache.logits.len();
    if targets.len() != b {
        return Err(contract("one target per batch element is required"));
    }
    let nm = net.numerics(cache.mode);
    let wf = net.quant.weights;
    let af = net.quant.activations;
    let ste = |g: f64, x: f64, f: FxpFormat| if f.passes_gradient(x) { g } else { 0.0 };

    let dlogit: Vec<f64> = cache.logits.iter().zip(targets).map(|(l, y)| (sigmoid(*l) - y) / b as f64).collect();

    // head
    let c_last = net.final_channels();
    let h = cache.final_len;
    let wq: Vec<f64> = net.head_weights.iter().map(|w| nm.qw(*w)).collect();
    let mut d_hw = vec![0.0; c_last];
    let mut d_hb = 0.0;
    let mut d_out: Vec<Vec<f64>> = Vec::with_capacity(b);
    for (bi, r) in cache.final_out.iter().enumerate() {
        let g = dlogit[bi];
        let sums = channel_sums(r, c_last);
        for c in 0..c_last {
            d_hw[c] += g * sums[c] / h as f64;
        }
        d_hb += g;
        let per: Vec<f64> = (0..c_last).map(|c| g * wq[c] / h as f64).collect();
        d_out.push(per.iter().copied().cycle().take(r.len()).collect());
    }
    let head_weights = d_hw.iter().zip(&net.head_weights).map(|(g, w)| ste(*g, *w, wf)).collect();
    let head_bias = ste(d_hb, net.head_bias, wf);

    let mut layer_grads = Vec::with_capacity(net.layers.len());
    for (li, l) in net.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];
        let c = l.out_channels;
        let cin = l.in_channels;
        let n = (b * lc.h_out) as f64;

        // ReLU and the output quantizer.
        let mut dz: Vec<Vec<f64>> = Vec::with_capacity(b);
        for (bi, zp) in lc.z_pre.iter().enumerate() {
            dz.push(
                zp.iter()
                    .zip(&d_out[bi])
                    .map(|(p, g)| {
                        let z = nm.qa(*p);
                        let g = if l.relu && z <= 0.0 { 0.0 } else { *g };
                        ste(g, *p, af)
                    })
                    .collect(),
            );
        }

        // batchnorm with batch statistics
        let mut d_gamma_q = vec![0.0; c];
        let mut d_beta_q = vec![0.0; c];
        let mut sum_dn = vec![0.0; c];
        let mut sum_dn_n = vec![0.0; c];
        let ys: Vec<Vec<f64>> = lc.v.iter().map(|v| v.iter().map(|x| nm.qa(*x)).collect()).collect();
        for bi in 0..b {
            for (grow, yrow) in dz[bi].chunks_exact(c).zip(ys[bi].chunks_exact(c)) {
                for (ch, (g, y)) in grow.iter().zip(yrow).enumerate() {
                    let k = &lc.channels[ch];
                    let nv = (y - k.mu_q) / k.denom;
                    d_gamma_q[ch] += g * nv;
                    d_beta_q[ch] += g;
                    let dn = g * k.gamma_q;
                    sum_dn[ch] += dn;
                    sum_dn_n[ch] += dn * nv;
                }
            }
        }
        // per-channel gradient terms flowing into the batch statistics
        let mut dmu_b = vec![0.0; c];
        let mut dvar_b = vec![0.0; c];
        for ch in 0..c {
            let k = &lc.channels[ch];
            let d_mu_q = -sum_dn[ch] / k.denom;
            let d_denom = -sum_dn_n[ch] / k.denom;
            let d_sigma_q = d_denom * k.sigma_q / k.denom;
            let d_sigma = ste(d_sigma_q, k.sigma, wf);
            dvar_b[ch] = if k.sigma > 0.0 { d_sigma / (2.0 * k.sigma) } else { 0.0 };
            dmu_b[ch] = ste(d_mu_q, lc.stats.mean[ch], wf);
        }
        let scale = d_gamma_q.iter().zip(&l.bn.scale).map(|(g, w)| ste(*g, *w, wf)).collect();
        let bias = d_beta_q.iter().zip(&l.bn.bias).map(|(g, w)| ste(*g, *w, wf)).collect();

        let wdq: Vec<f64> = l.depthwise.iter().map(|w| nm.qw(*w)).collect();
        let wpq: Vec<f64> = l.pointwise.iter().map(|w| nm.qw(*w)).collect();
        let mut d_wpq = vec![0.0; cin * c];
        let mut d_wdq = vec![0.0; l.kernel * cin];
        let mut d_in: Vec<Vec<f64>> = Vec::with_capacity(b);
        for bi in 0..b {
            // dy, then through Q_a(Q_a(v))
            let mut dv = vec![0.0; lc.h_out * c];
            let rows = dv.chunks_exact_mut(c).zip(dz[bi].chunks_exact(c)).zip(ys[bi].chunks_exact(c)).zip(lc.v[bi].chunks_exact(c));
            for (((dvrow, grow), yrow), vrow) in rows {
                for ch in 0..c {
                    let k = &lc.channels[ch];
                    let mut dy = grow[ch] * k.gamma_q / k.denom;
                    dy += dvar_b[ch] * 2.0 * (yrow[ch] - lc.stats.mean[ch]) / n;
                    dy += dmu_b[ch] / n;
                    let v = vrow[ch];
                    dvrow[ch] = ste(ste(dy, nm.qa(v), af), v, af);
                }
            }
            // pointwise
            let u = &lc.u[bi];
            let mut du = vec![0.0; lc.h_out * cin];
            for ((gv, urow), durow) in dv.chunks_exact(c).zip(u.chunks_exact(cin)).zip(du.chunks_exact_mut(cin)) {
                let per_input = urow.iter().zip(wpq.chunks_exact(c)).zip(d_wpq.chunks_exact_mut(c)).zip(durow.iter_mut());
                for (((&uv, w), dw), d) in per_input {
                    let dval = nm.qa(uv);
                    let mut acc = 0.0;
                    for ((g, w), dw) in gv.iter().zip(w).zip(dw.iter_mut()) {
                        acc += g * w;
                        *dw += dval * g;
                    }
                    *d = ste(acc, uv, af);
                }
            }
            // depthwise
            let xq = &lc.xq[bi];
            let mut dx = if li > 0 { vec![0.0; lc.h_in * cin] } else { Vec::new() };
            for (t, gu) in du.chunks_exact(cin).enumerate() {
                for kk in 0..l.kernel {
                    let off = (t * l.stride + kk) * cin;
                    let dwk = &mut d_wdq[kk * cin..(kk + 1) * cin];
                    for ((d, g), x) in dwk.iter_mut().zip(gu).zip(&xq[off..off + cin]) {
                        *d += g * x;
                    }
                    if li > 0 {
                        let wk = &wdq[kk * cin..(kk + 1) * cin];
                        for ((d, g), w) in dx[off..off + cin].iter_mut().zip(gu).zip(wk) {
                            *d += g * w;
                        }
                    }
                }
            }
            if let Some(raw) = &lc.x_raw {
                for (g, x) in dx.iter_mut().zip(&raw[bi]) {
                    *g = ste(*g, *x, af);
                }
            }
            d_in.push(dx);
        }
        let depthwise = d_wdq.iter().zip(&l.depthwise).map(|(g, w)| ste(*g, *w, wf)).collect();
        let pointwise = d_wpq.iter().zip(&l.pointwise).map(|(g, w)| ste(*g, *w, wf)).collect();
        layer_grads.push(LayerGradients { depthwise, pointwise, scale, bias });
        d_out = d_in;
    }
    layer_grads.reverse();
    Ok(Gradients { layers: layer_grads, head_weights, head_bias })
}

/// Bias-corrected moving average of batch statistics. After `n` updates the
/// stored value is `Σ m^(n-i)(1-m) s_i / (1 - m^n)`, so a short run is not
/// dominated by the initial identity statistics.
#[derive(Debug, Clone)]
pub struct RunningStats {
    momentum: f64,
    mean: Vec<Vec<f64>>,
    variance: Vec<Vec<f64>>,
    weight: f64,
}

impl RunningStats {
    pub fn new(net: &QuantizedNetwork, momentum: f64) -> Self {
        let zeros = || net.layers.iter().map(|l| vec![0.0; l.out_channels]).collect();
        Self { momentum, mean: zeros(), variance: zeros(), weight: 0.0 }
    }

    /// Folds in one batch and writes the corrected averages into `net`.
    pub fn update(&mut self, net: &mut QuantizedNetwork, stats: &[BatchStats]) {
        let m = self.momentum;
        self.weight = m * self.weight + (1.0 - m);
        for (li, (l, s)) in net.layers.iter_mut().zip(stats).enumerate() {
            for c in 0..l.out_channels {
                self.mean[li][c] = m * self.mean[li][c] + (1.0 - m) * s.mean[c];
                self.variance[li][c] = m * self.variance[li][c] + (1.0 - m) * s.variance[c];
                l.bn.mean[c] = self.mean[li][c] / self.weight;
                l.bn.variance[c] = self.variance[li][c] / self.weight;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fmt(w: u32, p: u32) -> FxpFormat {
        FxpFormat::new(w, p).unwrap()
    }

    fn single_layer(k: usize, cin: usize, cout: usize, s: usize, wd: Vec<f64>, wp: Vec<f64>) -> DsConvLayer {
        DsConvLayer {
            kernel: k,
            in_channels: cin,
            out_channels: cout,
            stride: s,
            depthwise: wd,
            pointwise: wp,
            bn: BatchNormParams::identity(cout),
            relu: false,
        }
    }

    /// Identity batchnorm in the sense of the stored statistics: μ=0, σ²=1−ε.
    fn pass_through_bn(c: usize) -> BatchNormParams {
        BatchNormParams { variance: vec![1.0 - DEFAULT_EPSILON; c], ..BatchNormParams::identity(c) }
    }

    #[test]
    fn identity_kernel_reproduces_quantized_input() {
        let q = QuantPair::generous();
        let x = FeatureMap::from_fn(16, 1, |t, _| (t as f64 * 0.37).sin() * 3.0);
        let layer = single_layer(1, 1, 1, 1, vec![1.0], vec![1.0]);
        let (y, _) = dsconv_forward(&x, &layer, q, Accumulator::Exact).unwrap();
        let expected: Vec<f64> = x.values().iter().map(|v| q.activations.apply(*v)).collect();
        assert_eq!(y.values(), &expected[..]);
    }

    #[test]
    fn strided_pairwise_means() {
        let q = QuantPair::new(fmt(16, 8), fmt(16, 8));
        let x = FeatureMap::from_column(&[1.0, 1.0, 2.0, 2.0, 4.0, 4.0, 8.0, 8.0]).unwrap();
        let layer = single_layer(2, 1, 1, 2, vec![0.5, 0.5], vec![1.0]);
        let (y, macs) = dsconv_forward(&x, &layer, q, Accumulator::default()).unwrap();
        assert_eq!(y.values(), &[1.0, 2.0, 4.0, 8.0]);
        assert_eq!(macs, dsconv_mac_count(4, 1, 2, 1));
    }

    #[test]
    fn mac_formula_reference_value() {
        assert_eq!(dsconv_mac_count(1024, 8, 16, 32), 393_216);
        // measured: an input of 1039 samples yields 1024 valid positions at K=16
        let layer = single_layer(16, 8, 32, 1, vec![0.01; 16 * 8], vec![0.01; 8 * 32]);
        let x = FeatureMap::zeros(1039, 8);
        let (_, macs) = dsconv_forward(&x, &layer, QuantPair::generous(), Accumulator::Exact).unwrap();
        assert_eq!(macs, 393_216);
    }

    #[test]
    fn dsconv_rejects_bad_shapes() {
        let layer = single_layer(4, 2, 2, 1, vec![0.0; 8], vec![0.0; 4]);
        let short = FeatureMap::zeros(3, 2);
        assert!(matches!(
            dsconv_forward(&short, &layer, QuantPair::generous(), Accumulator::Exact),
            Err(NnError::InfeasibleShape { .. })
        ));
        let wrong = FeatureMap::zeros(8, 3);
        assert!(matches!(
            dsconv_forward(&wrong, &layer, QuantPair::generous(), Accumulator::Exact),
            Err(NnError::Contract(_))
        ));
    }

    #[test]
    fn batchnorm_eval_examples() {
        let q = QuantPair::new(fmt(16, 8), fmt(16, 8));
        let x = FeatureMap::from_fn(10, 2, |t, c| (t as f64 - 4.3) * (c as f64 + 0.7));
        let (y, _) = batchnorm_forward(&x, &pass_through_bn(2), q, Mode::Eval).unwrap();
        let expected: Vec<f64> = x.values().iter().map(|v| q.activations.apply(*v)).collect();
        assert_eq!(y.values(), &expected[..]);

        let two = FeatureMap::from_fn(6, 2, |_, _| 2.0);
        for gamma in [0.25, 1.0, 3.5] {
            let bn = BatchNormParams {
                mean: vec![2.0; 2],
                scale: vec![gamma; 2],
                bias: vec![0.5; 2],
                ..BatchNormParams::identity(2)
            };
            let (y, _) = batchnorm_forward(&two, &bn, q, Mode::Eval).unwrap();
            assert!(y.values().iter().all(|v| *v == 0.5), "gamma {gamma}: {:?}", y.values());
        }

        let zero = BatchNormParams { scale: vec![0.0; 2], bias: vec![0.0; 2], ..BatchNormParams::identity(2) };
        let (y, _) = batchnorm_forward(&x, &zero, q, Mode::Eval).unwrap();
        assert!(y.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn batchnorm_train_normalizes_batch() {
        let q = QuantPair::generous();
        let x = FeatureMap::from_fn(64, 1, |t, _| t as f64 * 0.125);
        let (y, stats) = batchnorm_forward(&x, &BatchNormParams::identity(1), q, Mode::Train).unwrap();
        let stats = stats.unwrap();
        assert!((stats.mean[0] - 3.9375).abs() < 1e-12);
        let m: f64 = y.values().iter().sum::<f64>() / 64.0;
        assert!(m.abs() < 1e-3);
    }

    #[test]
    fn batchnorm_channel_mismatch() {
        let x = FeatureMap::zeros(4, 3);
        let r = batchnorm_forward(&x, &BatchNormParams::identity(2), QuantPair::generous(), Mode::Eval);
        assert!(matches!(r, Err(NnError::Contract(_))));
    }

    #[test]
    fn gap_fc_examples() {
        let q = QuantPair::generous();
        let z = FeatureMap::zeros(5, 3);
        assert_eq!(gap_fc_forward(&z, &[0.3, -0.2, 0.1], 0.7, q).unwrap(), q.weights.apply(0.7));
        let ones = FeatureMap::from_fn(7, 3, |_, _| 1.0);
        let w = [0.3, -0.2, 0.1];
        let expected: f64 = w.iter().map(|v| q.weights.apply(*v)).sum::<f64>() + q.weights.apply(0.25);
        assert!((gap_fc_forward(&ones, &w, 0.25, q).unwrap() - expected).abs() < 1e-12);
        let x = FeatureMap::from_column(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(gap_fc_forward(&x, &[2.0], 0.0, q).unwrap(), 5.0);
        assert!(gap_fc_forward(&x, &[2.0, 1.0], 0.0, q).is_err());
    }

    fn one_layer_net() -> QuantizedNetwork {
        let q = QuantPair::new(fmt(16, 8), fmt(16, 8));
        let mut layer = single_layer(2, 1, 1, 2, vec![0.5, 0.5], vec![1.0]);
        layer.bn = pass_through_bn(1);
        QuantizedNetwork {
            layers: vec![layer],
            head_weights: vec![1.0],
            head_bias: 0.0,
            quant: q,
            input_channels: 1,
            accumulator: Accumulator::default(),
        }
    }

    #[test]
    fn network_composition() {
        let net = one_layer_net();
        let x = FeatureMap::from_column(&[1.0, 1.0, 2.0, 2.0, 4.0, 4.0, 8.0, 8.0]).unwrap();
        assert_eq!(network_forward(&net, &x, Mode::Eval).unwrap(), 3.75);
    }

    #[test]
    fn zero_input_gives_head_bias() {
        let q = QuantPair::new(fmt(16, 8), fmt(16, 8));
        let shapes = [LayerShape::new(4, 8, 2), LayerShape::new(2, 4, 1)];
        let mut net = QuantizedNetwork::init(2, &shapes, q, 3).unwrap();
        net.head_bias = 0.4;
        let x = FeatureMap::zeros(32, 2);
        assert_eq!(network_forward(&net, &x, Mode::Eval).unwrap(), q.weights.apply(0.4));
    }

    #[test]
    fn infeasible_shape_detected() {
        let q = QuantPair::generous();
        let net = QuantizedNetwork::init(2, &[LayerShape::new(8, 4, 1)], q, 1).unwrap();
        let x = FeatureMap::zeros(4, 2);
        assert!(matches!(network_forward(&net, &x, Mode::Eval), Err(NnError::InfeasibleShape { .. })));
        assert!(matches!(network_forward(&net, &x, Mode::Train), Err(NnError::InfeasibleShape { .. })));
    }

    #[test]
    fn param_counts() {
        let q = QuantPair::generous();
        let net = QuantizedNetwork::init(2, &[LayerShape::new(16, 32, 1)], q, 0).unwrap();
        assert_eq!(net.param_count().unwrap(), 32 + 64 + 64 + 33);
        assert!(QuantizedNetwork::init(2, &[], q, 0).is_err());
        let shapes = [LayerShape::new(1, 4, 1), LayerShape::new(2, 8, 1), LayerShape::new(4, 256, 1), LayerShape::new(2, 16, 1)];
        assert_eq!(architecture_param_count(3, &shapes), 7328);
    }

    #[test]
    fn output_shapes_follow_valid_padding() {
        let q = QuantPair::generous();
        let net = QuantizedNetwork::init(2, &[LayerShape::new(16, 16, 8), LayerShape::new(8, 32, 4)], q, 0).unwrap();
        assert_eq!(net.output_shapes(3840).unwrap(), vec![(479, 16), (118, 32)]);
    }

    #[test]
    fn head_bias_gradient_on_zero_input() {
        let q = QuantPair::new(fmt(16, 8), fmt(16, 8));
        let mut net = QuantizedNetwork::init(2, &[LayerShape::new(2, 4, 1)], q, 9).unwrap();
        for s in net.trainable_mut() {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
        net.head_bias = 0.3;
        let x = FeatureMap::zeros(8, 2);
        let cache = forward_train(&net, std::slice::from_ref(&x), QuantMode::Quantize).unwrap();
        for target in [0.0, 1.0] {
            let g = network_backward(&net, &cache, &[target]).unwrap();
            assert!((g.head_bias - (sigmoid(q.weights.apply(0.3)) - target)).abs() < 1e-15);
        }
    }

    #[test]
    fn untouched_pointwise_column_has_zero_gradient() {
        let q = QuantPair::generous();
        let mut net = QuantizedNetwork::init(2, &[LayerShape::new(2, 3, 1)], q, 4).unwrap();
        // output channel 1 never reaches the logit
        net.head_weights[1] = 0.0;
        let x = FeatureMap::from_fn(12, 2, |t, c| ((t * 3 + c) as f64 * 0.41).sin());
        let cache = forward_train(&net, &[x.clone(), x], QuantMode::Quantize).unwrap();
        let g = network_backward(&net, &cache, &[1.0, 0.0]).unwrap();
        for ci in 0..2 {
            assert_eq!(g.layers[0].pointwise[ci * 3 + 1], 0.0);
        }
        assert_eq!(g.layers[0].scale[1], 0.0);
        assert_eq!(g.layers[0].bias[1], 0.0);
    }

    #[test]
    fn generous_quantized_forward_equals_float() {
        // weights and inputs on the 2^-4 grid stay exact through every stage
        let q = QuantPair::generous();
        let mut net = QuantizedNetwork::init(2, &[LayerShape::new(4, 4, 2)], q, 5).unwrap();
        net.accumulator = Accumulator::Exact;
        for s in net.trainable_mut() {
            s.iter_mut().for_each(|v| *v = (*v * 16.0).round() / 16.0);
        }
        let x = FeatureMap::from_fn(20, 2, |t, c| ((t + 2 * c) % 7) as f64 / 4.0 - 0.75);
        let l = &net.layers[0];
        // float reference
        let mut float_out = vec![0.0; 9 * 4];
        for t in 0..9 {
            for o in 0..4 {
                let mut acc = 0.0;
                for ci in 0..2 {
                    let mut d = 0.0;
                    for k in 0..4 {
                        d += x.get(2 * t + k, ci) * l.depthwise[k * 2 + ci];
                    }
                    acc += d * l.pointwise[ci * 4 + o];
                }
                float_out[t * 4 + o] = acc;
            }
        }
        let (y, _) = dsconv_forward(&x, l, q, Accumulator::Exact).unwrap();
        assert_eq!(y.values(), &float_out[..]);
    }
}
