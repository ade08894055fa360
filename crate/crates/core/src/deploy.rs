//! Integer-only deployment path: batchnorm folding, a streaming pipeline
//! emulator with bounded queues, and the binary model format.
//!
//! All arithmetic on the streaming path is on integer codes. A value with code
//! `c` in format `(w, p)` is `c / 2^p`. Products of an activation code and a
//! weight code carry `p_a + p_w` fractional bits and are summed at full width
//! before being rounded to the accumulator grid and requantized.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::LabeledWindow;
use crate::fxp::{div_round, requantize_code, shift_round, to_code, FxpFormat, UpperClip};
use crate::nn::{Accumulator, FeatureMap, NnError, QuantizedNetwork, RangeProfile};

#[derive(Debug, Error)]
pub enum DeployError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("pipeline deadlock: {trace}")]
    Deadlock { trace: String },
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, DeployError>;

pub const MAGIC: &[u8; 4] = b"AFNN";
pub const FORMAT_VERSION: u16 = 1;
const EXACT_ACC: u8 = 0xFF;
/// Integer bits added on top of the profiled range.
pub const PROFILE_MARGIN_BITS: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldedLayer {
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub relu: bool,
    /// `[k * C_in + c]`, weight format.
    pub depthwise: Vec<i64>,
    /// `[c * C_out + o]`, weight format, before the per-channel scale.
    pub pointwise: Vec<i64>,
    /// Folded batchnorm scale per output channel, weight format.
    pub scale: Vec<i64>,
    /// Folded batchnorm bias per output channel, weight format.
    pub bias: Vec<i64>,
    /// Integer bits of the depthwise, pointwise and affine accumulators.
    pub acc_int_bits: [u8; 3],
}

impl FoldedLayer {
    pub fn code_count(&self) -> usize {
        self.depthwise.len() + self.pointwise.len() + self.scale.len() + self.bias.len()
    }
}

/// A trained network reduced to integer codes plus the metadata needed to
/// reproduce its eval-mode arithmetic exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldedModel {
    pub input_channels: usize,
    pub weights: FxpFormat,
    pub activations: FxpFormat,
    /// Fractional bits of every accumulator; `None` keeps full product precision.
    pub acc_frac_bits: Option<u32>,
    pub layers: Vec<FoldedLayer>,
    pub head_weights: Vec<i64>,
    pub head_bias: i64,
    /// Integer bits of the averaged head accumulator.
    pub head_int_bits: u8,
}

fn bits_for(max_abs: f64) -> u8 {
    let mut n = 0u8;
    while n < 100 && (n as f64).exp2() <= max_abs {
        n += 1;
    }
    n
}

fn max_code(codes: &[i64]) -> i64 {
    codes.iter().map(|c| c.abs()).max().unwrap_or(0)
}

/// Folds every batchnorm into a per-channel integer affine and converts all
/// parameters to codes. Accumulator widths start at a worst-case bound; call
/// [`FoldedModel::profile`] to narrow them.
pub fn fold_batchnorm(net: &QuantizedNetwork) -> Result<FoldedModel> {
    for (i, l) in net.layers.iter().enumerate() {
        for v in &l.bn.variance {
            if !(v + l.bn.epsilon > 0.0) {
                return Err(DeployError::Numeric(format!("layer {i}: variance + epsilon is not positive")));
            }
        }
    }
    let plan = net.eval_plan()?;
    let wf = net.quant.weights;
    let codes = |xs: &[f64]| -> Result<Vec<i64>> {
        xs.iter().map(|x| to_code(*x, wf).map_err(|e| DeployError::Internal(e.to_string()))).collect()
    };
    let acc_frac_bits = match net.accumulator {
        Accumulator::Exact => None,
        Accumulator::FracBits(f) => Some(f),
    };
    let mut layers = Vec::with_capacity(plan.layers.len());
    for l in &plan.layers {
        layers.push(FoldedLayer {
            kernel: l.kernel,
            stride: l.stride,
            in_channels: l.in_channels,
            out_channels: l.out_channels,
            relu: l.relu,
            depthwise: codes(&l.depthwise)?,
            pointwise: codes(&l.pointwise)?,
            scale: codes(&l.affine.scale)?,
            bias: codes(&l.affine.bias)?,
            acc_int_bits: [0; 3],
        });
    }
    let mut m = FoldedModel {
        input_channels: net.input_channels,
        weights: wf,
        activations: net.quant.activations,
        acc_frac_bits,
        layers,
        head_weights: codes(&plan.head_weights)?,
        head_bias: codes(&[plan.head_bias])?[0],
        head_int_bits: 0,
    };
    m.set_worst_case_widths();
    Ok(m)
}

impl FoldedModel {
    pub fn code_count(&self) -> usize {
        self.layers.iter().map(|l| l.code_count()).sum::<usize>() + self.head_weights.len() + 1
    }

    pub fn bytes_per_code(&self) -> usize {
        (self.weights.width_bits as usize).div_ceil(8)
    }

    /// Size of the code section of the export blob.
    pub fn payload_bytes(&self) -> usize {
        self.code_count() * self.bytes_per_code()
    }

    pub fn final_channels(&self) -> usize {
        self.layers.last().map_or(self.input_channels, |l| l.out_channels)
    }

    /// Pointwise weights with the folded scale multiplied in and requantized,
    /// `Q_w(s_o · W_p[c][o])`, as real values.
    pub fn scaled_pointwise(&self, layer: usize) -> Vec<f64> {
        let l = &self.layers[layer];
        let lsb = self.weights.lsb();
        l.pointwise
            .iter()
            .enumerate()
            .map(|(i, w)| self.weights.apply(*w as f64 * lsb * l.scale[i % l.out_channels] as f64 * lsb))
            .collect()
    }

    fn set_worst_case_widths(&mut self) {
        let a = self.activations.max_value().abs().max(self.activations.min_value().abs());
        let lsb = self.weights.lsb();
        for l in &mut self.layers {
            let dw = l.kernel as f64 * a * max_code(&l.depthwise) as f64 * lsb;
            let pw = l.in_channels as f64 * a * max_code(&l.pointwise) as f64 * lsb;
            let af = a * max_code(&l.scale) as f64 * lsb + max_code(&l.bias) as f64 * lsb;
            // One extra unit covers rounding onto the accumulator grid.
            l.acc_int_bits = [bits_for(dw + 1.0), bits_for(pw + 1.0), bits_for(af + 1.0)];
        }
        let head = a * self.head_weights.iter().map(|w| w.abs()).sum::<i64>() as f64 * lsb
            + self.head_bias.abs() as f64 * lsb;
        self.head_int_bits = bits_for(head + 1.0);
    }

    /// Narrows the per-layer accumulator widths to the ranges seen on `windows`
    /// plus [`PROFILE_MARGIN_BITS`]. The head keeps its worst-case width.
    pub fn profile(&mut self, net: &QuantizedNetwork, windows: &[LabeledWindow]) -> Result<RangeProfile> {
        let plan = net.eval_plan()?;
        if plan.layers.len() != self.layers.len() {
            return Err(DeployError::Contract("network does not match the folded model".into()));
        }
        let mut profile = RangeProfile::default();
        for w in windows {
            plan.forward_profiled(&w.samples, &mut profile)?;
        }
        for (l, p) in self.layers.iter_mut().zip(&profile.layers) {
            for i in 0..3 {
                l.acc_int_bits[i] = bits_for(p[i]) + PROFILE_MARGIN_BITS;
            }
        }
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DeployError::Contract(m));
        if self.layers.is_empty() {
            return bad("model has no layers".into());
        }
        let mut c = self.input_channels;
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel == 0 || l.stride == 0 || l.out_channels == 0 {
                return bad(format!("layer {i} has a zero dimension"));
            }
            if l.in_channels != c {
                return bad(format!("layer {i} expects {} channels, gets {c}", l.in_channels));
            }
            if l.depthwise.len() != l.kernel * l.in_channels
                || l.pointwise.len() != l.in_channels * l.out_channels
                || l.scale.len() != l.out_channels
                || l.bias.len() != l.out_channels
            {
                return bad(format!("layer {i} parameter sizes do not match its shape"));
            }
            let all = l.depthwise.iter().chain(&l.pointwise).chain(&l.scale).chain(&l.bias);
            if let Some(code) = all.into_iter().find(|c| !self.weights.fits_code(**c)) {
                return bad(format!("layer {i} code {code} does not fit the weight format"));
            }
            c = l.out_channels;
        }
        if self.head_weights.len() != c {
            return bad("head weights do not match the final channel count".into());
        }
        if let Some(code) = self.head_weights.iter().chain(std::iter::once(&self.head_bias)).find(|c| !self.weights.fits_code(**c)) {
            return bad(format!("head code {code} does not fit the weight format"));
        }
        Ok(())
    }
}

/// Shared integer arithmetic for one model.
struct Arith {
    wf: FxpFormat,
    af: FxpFormat,
    acc_frac: Option<u32>,
}

impl Arith {
    fn new(m: &FoldedModel) -> Self {
        Self { wf: m.weights, af: m.activations, acc_frac: m.acc_frac_bits }
    }

    fn product_frac(&self) -> u32 {
        self.wf.precision_bits + self.af.precision_bits
    }

    /// Round a full-precision sum to the accumulator grid, saturate to the
    /// declared width and requantize to an activation code.
    fn finish(&self, v: i128, int_bits: u8, overflows: &mut u64) -> i64 {
        let pf = self.product_frac();
        let (v, f) = match self.acc_frac {
            Some(f) if pf > f => (shift_round(v, pf - f), f),
            Some(f) => (v << (f - pf), f),
            None => (v, pf),
        };
        let v = saturate(v, int_bits as u32 + f, overflows);
        requantize_code(v, f, self.af)
    }

    fn input_code(&self, x: f64) -> Result<i64> {
        if !x.is_finite() {
            return Err(DeployError::Contract(format!("non-finite input sample {x}")));
        }
        to_code(self.af.apply(x), self.af).map_err(|e| DeployError::Internal(e.to_string()))
    }
}

fn saturate(v: i128, magnitude_bits: u32, overflows: &mut u64) -> i128 {
    if magnitude_bits >= 126 {
        return v;
    }
    let lim = 1i128 << magnitude_bits;
    if v >= lim {
        *overflows += 1;
        lim - 1
    } else if v < -lim {
        *overflows += 1;
        -lim
    } else {
        v
    }
}

/// Streaming state of one depthwise-separable layer. Holds at most
/// `max(K, S)` input vectors.
struct LayerUnit<'a> {
    layer: &'a FoldedLayer,
    retained: VecDeque<Vec<i64>>,
    base: usize,
    received: usize,
    next_out: usize,
    overflows: u64,
}

impl<'a> LayerUnit<'a> {
    fn new(layer: &'a FoldedLayer) -> Self {
        Self { layer, retained: VecDeque::new(), base: 0, received: 0, next_out: 0, overflows: 0 }
    }

    fn push(&mut self, ar: &Arith, x: Vec<i64>) -> Option<Vec<i64>> {
        let l = self.layer;
        self.retained.push_back(x);
        self.received += 1;
        let start = self.next_out * l.stride;
        if self.received < start + l.kernel {
            return None;
        }
        let c = l.in_channels;
        let mut d = vec![0i64; c];
        for (ch, dv) in d.iter_mut().enumerate() {
            let mut acc: i128 = 0;
            for k in 0..l.kernel {
                let x = self.retained[start + k - self.base][ch];
                acc += x as i128 * l.depthwise[k * c + ch] as i128;
            }
            *dv = ar.finish(acc, l.acc_int_bits[0], &mut self.overflows);
        }
        let co = l.out_channels;
        let mut out = vec![0i64; co];
        let bias_shift = ar.af.precision_bits;
        for (o, ov) in out.iter_mut().enumerate() {
            let mut acc: i128 = 0;
            for (ch, dv) in d.iter().enumerate() {
                acc += *dv as i128 * l.pointwise[ch * co + o] as i128;
            }
            let y = ar.finish(acc, l.acc_int_bits[1], &mut self.overflows);
            let a = y as i128 * l.scale[o] as i128 + ((l.bias[o] as i128) << bias_shift);
            let z = ar.finish(a, l.acc_int_bits[2], &mut self.overflows);
            *ov = if l.relu { z.max(0) } else { z };
        }
        self.next_out += 1;
        let keep_from = self.next_out * l.stride;
        while self.base < keep_from && !self.retained.is_empty() {
            self.retained.pop_front();
            self.base += 1;
        }
        Some(out)
    }
}

/// Global-average-pool plus linear head over activation codes.
struct HeadUnit<'a> {
    model: &'a FoldedModel,
    sums: Vec<i128>,
    count: usize,
}

impl<'a> HeadUnit<'a> {
    fn new(model: &'a FoldedModel) -> Self {
        Self { model, sums: vec![0; model.final_channels()], count: 0 }
    }

    fn push(&mut self, x: &[i64]) {
        for (s, v) in self.sums.iter_mut().zip(x) {
            *s += *v as i128;
        }
        self.count += 1;
    }

    fn finish(&self, ar: &Arith, overflows: &mut u64) -> Result<i64> {
        if self.count == 0 {
            return Err(DeployError::Contract("no positions reached the head".into()));
        }
        let m = self.model;
        let h = self.count as i128;
        let dot: i128 = self.sums.iter().zip(&m.head_weights).map(|(s, w)| s * *w as i128).sum();
        let num = dot + ((m.head_bias as i128 * h) << ar.af.precision_bits);
        // The averaged value must fit `head_int_bits`; compare before dividing.
        let lim = (h << ar.product_frac()).checked_shl(m.head_int_bits as u32).unwrap_or(i128::MAX);
        let num = if num.abs() >= lim {
            *overflows += 1;
            num.signum() * (lim - 1)
        } else {
            num
        };
        let code = div_round(num, h << ar.wf.precision_bits);
        Ok(code.clamp(ar.af.min_code() as i128, ar.af.max_code() as i128) as i64)
    }
}

/// Result of one streamed window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Inference {
    pub logit_code: i64,
    pub positive: bool,
    /// Number of accumulator values that hit their declared width.
    pub overflows: u64,
}

impl Inference {
    pub fn logit(&self, m: &FoldedModel) -> f64 {
        self.logit_code as f64 / m.activations.scale()
    }
}

/// How pipeline stages are interleaved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheduler {
    /// Whole layers one after another, no queues.
    Sequential,
    /// One step of every stage in turn.
    RoundRobin,
    /// A seeded random runnable stage at every step.
    Random(u64),
    /// One thread per stage connected by bounded channels.
    Threaded,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StreamOptions {
    /// Queue capacities in elements, one per layer input plus one before the
    /// head. Defaults to `K·C_in` per layer and one vector before the head.
    pub capacities: Option<Vec<usize>>,
}

fn default_capacities(m: &FoldedModel) -> Vec<usize> {
    let mut caps: Vec<usize> = m.layers.iter().map(|l| l.kernel * l.in_channels).collect();
    caps.push(m.final_channels());
    caps
}

fn check_input(m: &FoldedModel, x: &FeatureMap) -> Result<()> {
    if x.channels() != m.input_channels {
        return Err(DeployError::Contract(format!(
            "input has {} channels, model expects {}",
            x.channels(),
            m.input_channels
        )));
    }
    let mut h = x.length();
    for (i, l) in m.layers.iter().enumerate() {
        if h < l.kernel {
            return Err(NnError::InfeasibleShape { layer: i, length: h, kernel: l.kernel }.into());
        }
        h = (h - l.kernel) / l.stride + 1;
    }
    Ok(())
}

/// Streams one window through the integer pipeline.
pub fn stream_infer(m: &FoldedModel, x: &FeatureMap, scheduler: Scheduler, opts: &StreamOptions) -> Result<Inference> {
    m.validate()?;
    check_input(m, x)?;
    let caps = match &opts.capacities {
        Some(c) if c.len() != m.layers.len() + 1 => {
            return Err(DeployError::Contract(format!("expected {} queue capacities", m.layers.len() + 1)))
        }
        Some(c) => c.clone(),
        None => default_capacities(m),
    };
    let ar = Arith::new(m);
    let input: Vec<i64> = x.values().iter().map(|v| ar.input_code(*v)).collect::<Result<_>>()?;
    match scheduler {
        Scheduler::Sequential => run_sequential(m, &ar, &input, x.length()),
        Scheduler::RoundRobin => Pipeline::new(m, &ar, &input, x.length(), &caps).run(None),
        Scheduler::Random(seed) => Pipeline::new(m, &ar, &input, x.length(), &caps).run(Some(seed)),
        Scheduler::Threaded => run_threaded(m, &ar, &input, x.length(), &caps),
    }
}

fn run_sequential(m: &FoldedModel, ar: &Arith, input: &[i64], h: usize) -> Result<Inference> {
    let c = m.input_channels;
    let mut cur: Vec<Vec<i64>> = (0..h).map(|t| input[t * c..(t + 1) * c].to_vec()).collect();
    let mut overflows = 0;
    for l in &m.layers {
        let mut unit = LayerUnit::new(l);
        cur = cur.into_iter().filter_map(|v| unit.push(ar, v)).collect();
        overflows += unit.overflows;
    }
    let mut head = HeadUnit::new(m);
    for v in &cur {
        head.push(v);
    }
    let logit_code = head.finish(ar, &mut overflows)?;
    Ok(Inference { logit_code, positive: logit_code > 0, overflows })
}

fn run_threaded(m: &FoldedModel, ar: &Arith, input: &[i64], h: usize, caps: &[usize]) -> Result<Inference> {
    let c = m.input_channels;
    let slots = |i: usize, width: usize| (caps[i] / width.max(1)).max(1);
    std::thread::scope(|scope| {
        let (tx0, mut rx) = mpsc::sync_channel::<Vec<i64>>(slots(0, c));
        scope.spawn(move || {
            for t in 0..h {
                if tx0.send(input[t * c..(t + 1) * c].to_vec()).is_err() {
                    break;
                }
            }
        });
        let mut workers = Vec::new();
        for (i, l) in m.layers.iter().enumerate() {
            let (tx, next_rx) = mpsc::sync_channel::<Vec<i64>>(slots(i + 1, l.out_channels));
            let this_rx = std::mem::replace(&mut rx, next_rx);
            workers.push(scope.spawn(move || {
                let mut unit = LayerUnit::new(l);
                for v in this_rx {
                    if let Some(out) = unit.push(ar, v) {
                        if tx.send(out).is_err() {
                            break;
                        }
                    }
                }
                unit.overflows
            }));
        }
        let mut head = HeadUnit::new(m);
        for v in rx {
            head.push(&v);
        }
        let mut overflows = 0;
        for w in workers {
            overflows += w.join().map_err(|_| DeployError::Internal("pipeline worker panicked".into()))?;
        }
        let logit_code = head.finish(ar, &mut overflows)?;
        Ok(Inference { logit_code, positive: logit_code > 0, overflows })
    })
}

struct Queue {
    items: VecDeque<Vec<i64>>,
    width: usize,
    capacity: usize,
    closed: bool,
}

impl Queue {
    fn has_room(&self) -> bool {
        (self.items.len() + 1) * self.width <= self.capacity
    }
    fn occupancy(&self) -> usize {
        self.items.len() * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    Worked,
    Blocked,
    Done,
}

/// Single-threaded pipeline emulator: stage 0 is the input source, stages
/// `1..=L` the layers, stage `L+1` the head. Queue `i` feeds stage `i + 1`.
struct Pipeline<'a> {
    ar: &'a Arith,
    input: &'a [i64],
    h: usize,
    emitted: usize,
    queues: Vec<Queue>,
    units: Vec<LayerUnit<'a>>,
    pending: Vec<Option<Vec<i64>>>,
    head: HeadUnit<'a>,
    done: Vec<bool>,
    head_count: usize,
}

impl<'a> Pipeline<'a> {
    fn new(m: &'a FoldedModel, ar: &'a Arith, input: &'a [i64], h: usize, caps: &[usize]) -> Self {
        let widths: Vec<usize> = m.layers.iter().map(|l| l.in_channels).chain(std::iter::once(m.final_channels())).collect();
        let queues = widths
            .iter()
            .zip(caps)
            .map(|(w, c)| Queue { items: VecDeque::new(), width: *w, capacity: *c, closed: false })
            .collect();
        Self {
            ar,
            input,
            h,
            emitted: 0,
            queues,
            units: m.layers.iter().map(LayerUnit::new).collect(),
            pending: vec![None; m.layers.len()],
            head: HeadUnit::new(m),
            done: vec![false; m.layers.len() + 2],
            head_count: 0,
        }
    }

    fn stages(&self) -> usize {
        self.done.len()
    }

    fn step(&mut self, s: usize) -> Step {
        if self.done[s] {
            return Step::Done;
        }
        let last = self.stages() - 1;
        let r = if s == 0 {
            self.step_source()
        } else if s == last {
            self.step_head()
        } else {
            self.step_layer(s - 1)
        };
        if r == Step::Done {
            // Finishing is progress: downstream may now see a closed queue.
            self.done[s] = true;
            return Step::Worked;
        }
        r
    }

    fn step_source(&mut self) -> Step {
        let q = &mut self.queues[0];
        if self.emitted == self.h {
            q.closed = true;
            return Step::Done;
        }
        if !q.has_room() {
            return Step::Blocked;
        }
        let c = q.width;
        q.items.push_back(self.input[self.emitted * c..(self.emitted + 1) * c].to_vec());
        self.emitted += 1;
        Step::Worked
    }

    fn step_layer(&mut self, i: usize) -> Step {
        if let Some(v) = self.pending[i].take() {
            let out = &mut self.queues[i + 1];
            if !out.has_room() {
                self.pending[i] = Some(v);
                return Step::Blocked;
            }
            out.items.push_back(v);
            return Step::Worked;
        }
        match self.queues[i].items.pop_front() {
            Some(v) => {
                self.pending[i] = self.units[i].push(self.ar, v);
                Step::Worked
            }
            None if self.queues[i].closed => {
                self.queues[i + 1].closed = true;
                Step::Done
            }
            None => Step::Blocked,
        }
    }

    fn step_head(&mut self) -> Step {
        let q = self.queues.last_mut().expect("head queue");
        match q.items.pop_front() {
            Some(v) => {
                self.head.push(&v);
                self.head_count += 1;
                Step::Worked
            }
            None if q.closed => Step::Done,
            None => Step::Blocked,
        }
    }

    fn trace(&self) -> String {
        let mut parts = vec![format!("source emitted {}/{}", self.emitted, self.h)];
        for (i, q) in self.queues.iter().enumerate() {
            let consumer = if i + 1 == self.queues.len() { "head".to_string() } else { format!("layer{i}") };
            parts.push(format!("queue->{consumer} {}/{} elements", q.occupancy(), q.capacity));
            if i < self.units.len() {
                let u = &self.units[i];
                parts.push(format!(
                    "layer{i} in={} out={} pending={}",
                    u.received,
                    u.next_out,
                    self.pending[i].is_some()
                ));
            }
        }
        parts.push(format!("head received {}", self.head_count));
        parts.join("; ")
    }

    fn run(mut self, seed: Option<u64>) -> Result<Inference> {
        let n = self.stages();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
        loop {
            if self.done.iter().all(|d| *d) {
                break;
            }
            let mut progressed = false;
            match rng.as_mut() {
                None => {
                    for s in 0..n {
                        progressed |= self.step(s) == Step::Worked;
                    }
                }
                Some(r) => {
                    order.shuffle(r);
                    for &s in &order {
                        if self.step(s) == Step::Worked {
                            progressed = true;
                            break;
                        }
                    }
                }
            }
            if !progressed && !self.done.iter().all(|d| *d) {
                return Err(DeployError::Deadlock { trace: self.trace() });
            }
        }
        let mut overflows: u64 = self.units.iter().map(|u| u.overflows).sum();
        let logit_code = self.head.finish(self.ar, &mut overflows)?;
        Ok(Inference { logit_code, positive: logit_code > 0, overflows })
    }
}

/// One line of the prediction stream.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub window_id: String,
    pub logit_code: i64,
    pub label: crate::data::Label,
    pub positive: bool,
}

pub const PREDICTION_HEADER: &str = "window_id,logit_code,label,predicted";

impl fmt::Display for PredictionRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = if self.positive { "AF" } else { "NOT_AF" };
        write!(f, "{},{},{},{}", self.window_id, self.logit_code, self.label, p)
    }
}

/// Runs every window through the integer path. Windows are spread over the
/// rayon pool, so each one uses the sequential scheduler.
pub fn infer_windows<'w>(m: &FoldedModel, windows: &'w [LabeledWindow]) -> Result<Vec<(Inference, &'w LabeledWindow)>> {
    use rayon::prelude::*;
    windows
        .par_iter()
        .map(|w| {
            let r = stream_infer(m, &w.samples, Scheduler::Sequential, &StreamOptions::default())?;
            Ok((r, w))
        })
        .collect()
}

// Export format, all integers little-endian:
//   "AFNN" u16 version u8 layers u8 input_channels u8 acc_frac (0xFF exact)
//   u8 upper-clip flags (bit 0 weights, bit 1 activations) u8 head_int_bits
//   per layer: u16 K, C_in, C_out, S; u8 w_w, p_w, w_a, p_a, relu; u8 x3 acc int bits
//   codes: per layer depthwise, pointwise, scale, bias; then head weights, head bias,
//   each two's complement in ceil(w_w/8) bytes.

const FILE_HEADER_BYTES: usize = 11;
const LAYER_HEADER_BYTES: usize = 16;

pub fn to_bytes(m: &FoldedModel) -> Result<Vec<u8>> {
    m.validate()?;
    let u8c = |v: usize, what: &str| u8::try_from(v).map_err(|_| DeployError::Contract(format!("{what} {v} exceeds u8")));
    let u16c = |v: usize, what: &str| u16::try_from(v).map_err(|_| DeployError::Contract(format!("{what} {v} exceeds u16")));
    let mut out = Vec::with_capacity(FILE_HEADER_BYTES + m.layers.len() * LAYER_HEADER_BYTES + m.payload_bytes());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(u8c(m.layers.len(), "layer count")?);
    out.push(u8c(m.input_channels, "input channels")?);
    out.push(match m.acc_frac_bits {
        None => EXACT_ACC,
        Some(f) if f < EXACT_ACC as u32 => f as u8,
        Some(f) => return Err(DeployError::Contract(format!("accumulator fraction {f} too large"))),
    });
    let flag = |f: &FxpFormat| u8::from(f.upper == UpperClip::LargestCode);
    out.push(flag(&m.weights) | flag(&m.activations) << 1);
    out.push(m.head_int_bits);
    for l in &m.layers {
        for v in [l.kernel, l.in_channels, l.out_channels, l.stride] {
            out.extend_from_slice(&u16c(v, "layer dimension")?.to_le_bytes());
        }
        out.extend_from_slice(&[
            m.weights.width_bits as u8,
            m.weights.precision_bits as u8,
            m.activations.width_bits as u8,
            m.activations.precision_bits as u8,
            u8::from(l.relu),
        ]);
        out.extend_from_slice(&l.acc_int_bits);
    }
    let nb = m.bytes_per_code();
    let mut put = |c: i64| out.extend_from_slice(&c.to_le_bytes()[..nb]);
    for l in &m.layers {
        l.depthwise.iter().chain(&l.pointwise).chain(&l.scale).chain(&l.bias).for_each(|c| put(*c));
    }
    m.head_weights.iter().for_each(|c| put(*c));
    put(m.head_bias);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(DeployError::Format { offset: self.pos, msg: format!("truncated while reading {what}") });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
    fn code(&mut self, nb: usize, fmt: FxpFormat) -> Result<i64> {
        let at = self.pos;
        let b = self.take(nb, "weight code")?;
        let mut raw = [0u8; 8];
        raw[..nb].copy_from_slice(b);
        let shift = 64 - 8 * nb as u32;
        let v = (i64::from_le_bytes(raw) << shift) >> shift;
        if !fmt.fits_code(v) {
            return Err(DeployError::Format { offset: at, msg: format!("code {v} does not fit the weight format") });
        }
        Ok(v)
    }
    fn codes(&mut self, n: usize, nb: usize, fmt: FxpFormat) -> Result<Vec<i64>> {
        (0..n).map(|_| self.code(nb, fmt)).collect()
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<FoldedModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(DeployError::Format { offset: 0, msg: "bad magic".into() });
    }
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(DeployError::Format { offset: 4, msg: format!("unsupported version {version}") });
    }
    let n_layers = r.u8("layer count")? as usize;
    let input_channels = r.u8("input channels")? as usize;
    let acc = r.u8("accumulator fraction")?;
    let acc_frac_bits = if acc == EXACT_ACC { None } else { Some(acc as u32) };
    let flags_at = r.pos;
    let flags = r.u8("flags")?;
    if flags > 3 {
        return Err(DeployError::Format { offset: flags_at, msg: format!("unknown flags {flags:#x}") });
    }
    let upper = |bit: u8| if flags & bit != 0 { UpperClip::LargestCode } else { UpperClip::Literal };
    let head_int_bits = r.u8("head width")?;
    let mut formats: Option<(FxpFormat, FxpFormat)> = None;
    let mut shapes = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let at = r.pos;
        let mut d = [0usize; 4];
        for v in d.iter_mut() {
            *v = r.u16("layer header")? as usize;
        }
        let b = r.take(5, "layer header")?;
        let (ww, pw, wa, pa, relu) = (b[0] as u32, b[1] as u32, b[2] as u32, b[3] as u32, b[4]);
        let bad = |msg: String| DeployError::Format { offset: at, msg };
        let wf = FxpFormat::with_upper(ww, pw, upper(1)).map_err(|e| bad(e.to_string()))?;
        let af = FxpFormat::with_upper(wa, pa, upper(2)).map_err(|e| bad(e.to_string()))?;
        match formats {
            None => formats = Some((wf, af)),
            Some(f) if f != (wf, af) => return Err(bad(format!("layer {i} formats differ from layer 0"))),
            _ => {}
        }
        if relu > 1 {
            return Err(bad(format!("layer {i} relu flag {relu}")));
        }
        let acc = r.take(3, "accumulator widths")?;
        shapes.push((d, relu == 1, [acc[0], acc[1], acc[2]]));
    }
    let Some((weights, activations)) = formats else {
        return Err(DeployError::Format { offset: r.pos, msg: "model has no layers".into() });
    };
    let nb = (weights.width_bits as usize).div_ceil(8);
    let mut layers = Vec::with_capacity(n_layers);
    for ([k, ci, co, s], relu, acc_int_bits) in shapes {
        layers.push(FoldedLayer {
            kernel: k,
            in_channels: ci,
            out_channels: co,
            stride: s,
            relu,
            depthwise: r.codes(k * ci, nb, weights)?,
            pointwise: r.codes(ci * co, nb, weights)?,
            scale: r.codes(co, nb, weights)?,
            bias: r.codes(co, nb, weights)?,
            acc_int_bits,
        });
    }
    let c_last = layers.last().map_or(input_channels, |l| l.out_channels);
    let head_weights = r.codes(c_last, nb, weights)?;
    let head_bias = r.code(nb, weights)?;
    if r.pos != buf.len() {
        return Err(DeployError::Format { offset: r.pos, msg: "trailing bytes".into() });
    }
    let m = FoldedModel { input_channels, weights, activations, acc_frac_bits, layers, head_weights, head_bias, head_int_bits };
    m.validate().map_err(|e| DeployError::Format { offset: 0, msg: e.to_string() })?;
    Ok(m)
}

pub fn export(m: &FoldedModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(m)?;
    let io = |source| DeployError::Io { path: path.display().to_string(), source };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<FoldedModel> {
    let bytes = std::fs::read(path).map_err(|source| DeployError::Io { path: path.display().to_string(), source })?;
    from_bytes(&bytes)
}
