//! ECG records and windows: synthetic generation, CSV/RAW ingestion,
//! 120 s windowing, proband-level splits and training augmentations.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::FeatureMap;

pub const WINDOW_SECONDS: f64 = 120.0;
pub const CHANNELS: usize = 2;
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 128.0;
pub const DESK_SAMPLE_RATE_HZ: f64 = 32.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{path}: line {line}: {msg}")]
    ParseLine { path: String, line: usize, msg: String },
    #[error("{path}: byte offset {offset}: {msg}")]
    ParseBinary { path: String, offset: u64, msg: String },
    #[error("{path}: configuration error: {msg}")]
    Config { path: String, msg: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Label {
    Af,
    Normal,
    Noise,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Af, Label::Normal, Label::Noise];

    /// Binary training target: AF is the only positive class.
    pub fn target(self) -> f64 {
        if self == Label::Af {
            1.0
        } else {
            0.0
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Af => "AF",
            Label::Normal => "NORMAL",
            Label::Noise => "NOISE",
        })
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_uppercase().as_str() {
            "AF" => Ok(Label::Af),
            "NORMAL" | "N" => Ok(Label::Normal),
            "NOISE" => Ok(Label::Noise),
            other => Err(format!("unknown label '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledWindow {
    /// `H x 2`, millivolts.
    pub samples: FeatureMap,
    pub sample_rate: f64,
    pub label: Label,
    pub source_id: String,
}

impl LabeledWindow {
    pub fn len(&self) -> usize {
        self.samples.length()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Samples per canonical window at a given rate.
pub fn window_length(sample_rate: f64) -> usize {
    (WINDOW_SECONDS * sample_rate).round() as usize
}

/// Labeled interval `[start, end)` in sample indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelSpan {
    pub start: usize,
    pub end: usize,
    pub label: Label,
}

/// A continuous two-channel recording with labeled spans.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub source_id: String,
    pub sample_rate: f64,
    pub samples: Vec<[f64; 2]>,
    pub spans: Vec<LabelSpan>,
}

/// Label of `[start, end)`: NOISE when noise covers at least half of it,
/// otherwise AF when any AF is present, otherwise NORMAL.
pub fn window_label(spans: &[LabelSpan], start: usize, end: usize) -> Label {
    let overlap = |l: Label| -> usize {
        spans
            .iter()
            .filter(|s| s.label == l)
            .map(|s| s.end.min(end).saturating_sub(s.start.max(start)))
            .sum()
    };
    let len = end - start;
    if 2 * overlap(Label::Noise) >= len {
        Label::Noise
    } else if overlap(Label::Af) > 0 {
        Label::Af
    } else {
        Label::Normal
    }
}

/// Cuts a record into consecutive canonical windows; a trailing partial
/// window is dropped.
pub fn window_record(rec: &Record) -> Vec<LabeledWindow> {
    let h = window_length(rec.sample_rate);
    if h == 0 {
        return Vec::new();
    }
    (0..rec.samples.len() / h)
        .map(|i| {
            let chunk = &rec.samples[i * h..(i + 1) * h];
            LabeledWindow {
                samples: FeatureMap::from_fn(h, CHANNELS, |t, c| chunk[t][c]),
                sample_rate: rec.sample_rate,
                label: window_label(&rec.spans, i * h, (i + 1) * h),
                source_id: rec.source_id.clone(),
            }
        })
        .collect()
}

/// Concatenates windows of one source back into a record.
pub fn record_from_windows(source_id: &str, windows: &[LabeledWindow]) -> Result<Record> {
    let first = windows.first().ok_or_else(|| DataError::Contract("no windows".into()))?;
    let fs = first.sample_rate;
    let mut samples = Vec::new();
    let mut spans: Vec<LabelSpan> = Vec::new();
    for w in windows {
        if w.sample_rate != fs || w.samples.channels() != CHANNELS {
            return Err(DataError::Contract("windows differ in rate or channel count".into()));
        }
        let start = samples.len();
        samples.extend((0..w.len()).map(|t| [w.samples.get(t, 0), w.samples.get(t, 1)]));
        match spans.last_mut() {
            Some(s) if s.label == w.label && s.end == start => s.end = samples.len(),
            _ => spans.push(LabelSpan { start, end: samples.len(), label: w.label }),
        }
    }
    Ok(Record { source_id: source_id.to_string(), sample_rate: fs, samples, spans })
}

// ---------------------------------------------------------------------------
// Synthesis

/// Per-subject waveform traits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubjectTraits {
    pub heart_rate_bpm: f64,
    pub amplitude: f64,
    pub lead2_gain: f64,
    pub noise_floor_mv: f64,
}

impl Default for SubjectTraits {
    fn default() -> Self {
        Self { heart_rate_bpm: 72.0, amplitude: 1.0, lead2_gain: 0.8, noise_floor_mv: 0.01 }
    }
}

impl SubjectTraits {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            heart_rate_bpm: rng.random_range(55.0..90.0),
            amplitude: rng.random_range(0.7..1.3),
            lead2_gain: rng.random_range(0.5..1.0),
            noise_floor_mv: rng.random_range(0.005..0.02),
        }
    }
}

/// One wave of the beat template: amplitude per lead (mV), offset from the
/// R peak (s) and width (s).
struct Wave {
    amp: [f64; 2],
    offset: f64,
    width: f64,
}

const P_WAVE: usize = 0;
const TEMPLATE: [Wave; 5] = [
    Wave { amp: [0.15, 0.10], offset: -0.20, width: 0.025 },
    Wave { amp: [-0.10, -0.05], offset: -0.035, width: 0.010 },
    Wave { amp: [1.20, 0.70], offset: 0.0, width: 0.012 },
    Wave { amp: [-0.25, -0.40], offset: 0.035, width: 0.012 },
    Wave { amp: [0.35, 0.25], offset: 0.28, width: 0.050 },
];

fn add_gaussian(buf: &mut [[f64; 2]], fs: f64, center: f64, width: f64, amp: [f64; 2]) {
    // widen by half a sample so narrow waves are not lost between samples
    let sigma = (width * width + (0.5 / fs) * (0.5 / fs)).sqrt();
    let lo = ((center - 5.0 * sigma) * fs).floor().max(0.0) as usize;
    let hi = (((center + 5.0 * sigma) * fs).ceil().max(0.0) as usize).min(buf.len());
    for (i, s) in buf.iter_mut().enumerate().take(hi).skip(lo) {
        let d = (i as f64 / fs - center) / sigma;
        let g = (-0.5 * d * d).exp();
        s[0] += amp[0] * g;
        s[1] += amp[1] * g;
    }
}

fn add_beats(buf: &mut [[f64; 2]], fs: f64, beats: &[f64], traits: &SubjectTraits, scale: f64, p_waves: bool) {
    for &t in beats {
        for (i, w) in TEMPLATE.iter().enumerate() {
            if i == P_WAVE && !p_waves {
                continue;
            }
            let a = traits.amplitude * scale;
            add_gaussian(buf, fs, t + w.offset, w.width, [w.amp[0] * a, w.amp[1] * a * traits.lead2_gain]);
        }
    }
}

fn regular_beats(rng: &mut ChaCha8Rng, duration: f64, mean_rr: f64) -> Vec<f64> {
    let mut t = rng.random_range(0.0..mean_rr);
    let mut beats = Vec::new();
    while t < duration + 0.5 {
        beats.push(t);
        t += mean_rr * (1.0 + rng.random_range(-0.03..0.03));
    }
    beats
}

fn irregular_beats(rng: &mut ChaCha8Rng, duration: f64, mean_rr: f64, cv: f64) -> Vec<f64> {
    let dist = Normal::new(mean_rr, cv * mean_rr).expect("valid normal");
    let mut t = rng.random_range(0.0..mean_rr);
    let mut beats = Vec::new();
    while t < duration + 0.5 {
        beats.push(t);
        t += dist.sample(rng).max(0.3);
    }
    beats
}

fn add_baseline_wander(buf: &mut [[f64; 2]], fs: f64, rng: &mut ChaCha8Rng, amp: f64, freq: (f64, f64)) {
    let f = rng.random_range(freq.0..freq.1);
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    let ratio = rng.random_range(0.5..1.0);
    for (i, s) in buf.iter_mut().enumerate() {
        let v = amp * (2.0 * PI * f * i as f64 / fs + phase).sin();
        s[0] += v;
        s[1] += v * ratio;
    }
}

fn add_white(buf: &mut [[f64; 2]], rng: &mut ChaCha8Rng, sigma: f64) {
    for s in buf.iter_mut() {
        let a: f64 = StandardNormal.sample(rng);
        let b: f64 = StandardNormal.sample(rng);
        s[0] += a * sigma;
        s[1] += b * sigma;
    }
}

/// Continuous fibrillatory oscillation whose frequency wanders inside 4-9 Hz.
fn add_f_waves(buf: &mut [[f64; 2]], fs: f64, rng: &mut ChaCha8Rng, amp: f64) {
    let f0 = rng.random_range(5.0..8.0);
    let drift = rng.random_range(0.3..1.0);
    let rate = rng.random_range(0.05..0.3);
    let mut phase: f64 = rng.random_range(0.0..2.0 * PI);
    let ratio = rng.random_range(0.5..0.9);
    for (i, s) in buf.iter_mut().enumerate() {
        let t = i as f64 / fs;
        let f = (f0 + drift * (2.0 * PI * rate * t).sin()).clamp(4.0, 9.0);
        phase += 2.0 * PI * f / fs;
        let a = amp * (1.0 + 0.3 * (2.0 * PI * 0.2 * t).sin());
        s[0] += a * phase.sin();
        s[1] += a * ratio * (phase + 0.7).sin();
    }
}

/// Motion artifact bursts, electrode pops and heavy wander.
fn add_artifacts(buf: &mut [[f64; 2]], fs: f64, duration: f64, rng: &mut ChaCha8Rng) {
    for _ in 0..rng.random_range(2..4) {
        let amp = rng.random_range(0.4..1.5);
        add_baseline_wander(buf, fs, rng, amp, (0.15, 1.0));
    }
    let n = buf.len();
    let bursts = ((duration / 120.0) * rng.random_range(6.0..14.0)).round() as usize;
    let smooth = ((fs / 10.0).round() as usize).max(1);
    for _ in 0..bursts {
        let len = ((rng.random_range(1.0..6.0) * fs) as usize).clamp(1, n);
        let start = rng.random_range(0..=n - len);
        let amp = rng.random_range(0.5..2.5);
        let raw: Vec<[f64; 2]> = (0..len + smooth)
            .map(|_| [StandardNormal.sample(rng), StandardNormal.sample(rng)])
            .collect();
        // moving average keeps the burst below roughly 10 Hz
        let mut acc = [0.0f64; 2];
        let mut filtered = Vec::with_capacity(len);
        for (i, r) in raw.iter().enumerate() {
            acc[0] += r[0];
            acc[1] += r[1];
            if i >= smooth {
                acc[0] -= raw[i - smooth][0];
                acc[1] -= raw[i - smooth][1];
                filtered.push([acc[0], acc[1]]);
            }
        }
        let peak = filtered.iter().fold(1e-12f64, |m, v| m.max(v[0].abs()).max(v[1].abs()));
        for (i, f) in filtered.iter().enumerate() {
            let env = (PI * i as f64 / len as f64).sin();
            buf[start + i][0] += amp * env * f[0] / peak;
            buf[start + i][1] += amp * env * f[1] / peak;
        }
    }
    for _ in 0..rng.random_range(1..5) {
        let start = rng.random_range(0..n);
        let jump = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
        let tau = rng.random_range(0.5..2.0) * fs;
        for (i, s) in buf.iter_mut().enumerate().skip(start) {
            let decay = (-((i - start) as f64) / tau).exp();
            if decay < 1e-4 {
                break;
            }
            s[0] += jump[0] * decay;
            s[1] += jump[1] * decay;
        }
    }
}

fn synthesize_signal(label: Label, duration: f64, fs: f64, traits: &SubjectTraits, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let n = (duration * fs).round() as usize;
    let mut buf = vec![[0.0; 2]; n];
    let mean_rr = 60.0 / traits.heart_rate_bpm;
    match label {
        Label::Normal => {
            let beats = regular_beats(rng, duration, mean_rr);
            add_beats(&mut buf, fs, &beats, traits, 1.0, true);
            let wander = rng.random_range(0.0..0.1);
            add_baseline_wander(&mut buf, fs, rng, wander, (0.1, 0.4));
        }
        Label::Af => {
            let cv = rng.random_range(0.2..0.3);
            let rr = mean_rr * rng.random_range(0.7..0.95);
            let beats = irregular_beats(rng, duration, rr, cv);
            add_beats(&mut buf, fs, &beats, traits, 1.0, false);
            let f_amp = traits.amplitude * rng.random_range(0.15..0.3);
            add_f_waves(&mut buf, fs, rng, f_amp);
            let wander = rng.random_range(0.0..0.1);
            add_baseline_wander(&mut buf, fs, rng, wander, (0.1, 0.4));
        }
        Label::Noise => {
            let scale = rng.random_range(0.1..0.3);
            let beats = regular_beats(rng, duration, mean_rr);
            add_beats(&mut buf, fs, &beats, traits, scale, true);
            add_artifacts(&mut buf, fs, duration, rng);
            let sigma = rng.random_range(0.03..0.08);
            add_white(&mut buf, rng, sigma);
        }
    }
    add_white(&mut buf, rng, traits.noise_floor_mv);
    buf
}

fn check_rate_duration(sample_rate: f64, duration_s: f64) -> Result<()> {
    if !(sample_rate > 0.0) || !sample_rate.is_finite() {
        return Err(DataError::Contract(format!("sample rate must be positive, got {sample_rate}")));
    }
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(DataError::Contract(format!("duration must be positive, got {duration_s}")));
    }
    Ok(())
}

/// Synthetic single-class recording, cut into canonical windows.
pub fn synthesize_record(label: Label, duration_s: f64, sample_rate: f64, seed: u64) -> Result<Vec<LabeledWindow>> {
    synthesize_record_with(label, duration_s, sample_rate, seed, &SubjectTraits::default(), &format!("synth-{seed}"))
}

pub fn synthesize_record_with(
    label: Label,
    duration_s: f64,
    sample_rate: f64,
    seed: u64,
    traits: &SubjectTraits,
    source_id: &str,
) -> Result<Vec<LabeledWindow>> {
    check_rate_duration(sample_rate, duration_s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = synthesize_signal(label, duration_s, sample_rate, traits, &mut rng);
    let n = samples.len();
    let rec = Record {
        source_id: source_id.to_string(),
        sample_rate,
        samples,
        spans: vec![LabelSpan { start: 0, end: n, label }],
    };
    Ok(window_record(&rec))
}

/// Synthetic multi-subject corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub probands: usize,
    pub windows_per_proband: usize,
    pub sample_rate_hz: f64,
    /// Relative class frequencies (AF, NORMAL, NOISE).
    pub class_weights: [f64; 3],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            probands: 30,
            windows_per_proband: 20,
            sample_rate_hz: DESK_SAMPLE_RATE_HZ,
            class_weights: [0.35, 0.45, 0.20],
            seed: 0,
        }
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // SplitMix64 finalizer over the combined words
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a base seed and two indices.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    mix(seed, a, b)
}

/// Generates the corpus; the result depends only on `cfg`.
pub fn synthesize_dataset(cfg: &SynthConfig) -> Result<Vec<LabeledWindow>> {
    check_rate_duration(cfg.sample_rate_hz, WINDOW_SECONDS)?;
    if cfg.probands == 0 || cfg.windows_per_proband == 0 {
        return Err(DataError::Contract("need at least one proband and one window".into()));
    }
    let total: f64 = cfg.class_weights.iter().sum();
    if cfg.class_weights.iter().any(|w| *w < 0.0) || !(total > 0.0) {
        return Err(DataError::Contract("class weights must be non-negative with a positive sum".into()));
    }
    let jobs: Vec<(usize, usize)> =
        (0..cfg.probands).flat_map(|p| (0..cfg.windows_per_proband).map(move |w| (p, w))).collect();
    let traits: Vec<SubjectTraits> = (0..cfg.probands)
        .map(|p| SubjectTraits::random(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, p as u64, u64::MAX))))
        .collect();
    jobs.par_iter()
        .map(|&(p, w)| {
            let seed = mix(cfg.seed, p as u64, w as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = rng.random_range(0.0..total);
            let label = if u < cfg.class_weights[0] {
                Label::Af
            } else if u < cfg.class_weights[0] + cfg.class_weights[1] {
                Label::Normal
            } else {
                Label::Noise
            };
            let source = format!("P{p:03}");
            let mut ws =
                synthesize_record_with(label, WINDOW_SECONDS, cfg.sample_rate_hz, rng.random(), &traits[p], &source)?;
            Ok(ws.remove(0))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Readers and writers

/// Options for CSV ingestion; CSV carries no rate of its own.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvOptions {
    pub sample_rate_hz: f64,
    pub default_label: Label,
    /// Defaults to the file stem.
    pub source_id: Option<String>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self { sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ, default_label: Label::Normal, source_id: None }
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "record".into())
}

fn spans_from_labels(labels: &[Label]) -> Vec<LabelSpan> {
    let mut spans: Vec<LabelSpan> = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match spans.last_mut() {
            Some(s) if s.label == *l && s.end == i => s.end = i + 1,
            _ => spans.push(LabelSpan { start: i, end: i + 1, label: *l }),
        }
    }
    spans
}

/// Parses a CSV recording: one row per sample, `ch1,ch2[,...][,label]`.
/// A non-numeric first row is treated as a header; extra channels are dropped.
pub fn parse_csv_record(path: &Path, opts: &CsvOptions) -> Result<Record> {
    check_rate_duration(opts.sample_rate_hz, 1.0)?;
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let pstr = path.display().to_string();
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let (values, label) = match fields.last().map(|f| f.parse::<Label>()) {
            Some(Ok(l)) if fields.len() > 1 => (&fields[..fields.len() - 1], Some(l)),
            _ => (&fields[..], None),
        };
        let parsed: std::result::Result<Vec<f64>, _> = values.iter().map(|v| v.parse::<f64>()).collect();
        let nums = match parsed {
            Ok(n) => n,
            Err(_) if samples.is_empty() && i == 0 => continue,
            Err(e) => return Err(DataError::ParseLine { path: pstr, line: i + 1, msg: format!("bad number: {e}") }),
        };
        if nums.len() < CHANNELS {
            return Err(DataError::ParseLine {
                path: pstr,
                line: i + 1,
                msg: format!("expected at least {CHANNELS} channel columns, found {}", nums.len()),
            });
        }
        if nums[..CHANNELS].iter().any(|v| !v.is_finite()) {
            return Err(DataError::ParseLine { path: pstr, line: i + 1, msg: "non-finite sample".into() });
        }
        samples.push([nums[0], nums[1]]);
        labels.push(label.unwrap_or(opts.default_label));
    }
    Ok(Record {
        source_id: opts.source_id.clone().unwrap_or_else(|| stem(path)),
        sample_rate: opts.sample_rate_hz,
        samples,
        spans: spans_from_labels(&labels),
    })
}

pub fn read_csv_record(path: &Path, opts: &CsvOptions) -> Result<Vec<LabeledWindow>> {
    Ok(window_record(&parse_csv_record(path, opts)?))
}

pub fn write_csv_record(path: &Path, rec: &Record) -> Result<()> {
    let mut labels = vec![Label::Normal; rec.samples.len()];
    for s in &rec.spans {
        for l in &mut labels[s.start..s.end.min(rec.samples.len())] {
            *l = s.label;
        }
    }
    let mut out = String::with_capacity(rec.samples.len() * 24);
    out.push_str("ch1,ch2,label\n");
    for (s, l) in rec.samples.iter().zip(&labels) {
        out.push_str(&format!("{},{},{}\n", s[0], s[1], l));
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Sidecar metadata of a RAW recording.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMeta {
    pub sample_rate_hz: f64,
    pub gain_uv_per_lsb: f64,
    pub channels: usize,
    /// `(start_s, end_s, label)`.
    pub labels: Vec<(f64, f64, Label)>,
    pub source_id: Option<String>,
}

/// Default sidecar location: `<path>.meta`.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta");
    PathBuf::from(p)
}

pub fn parse_raw_meta(path: &Path) -> Result<RawMeta> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let pstr = path.display().to_string();
    let cfg = |msg: String| DataError::Config { path: pstr.clone(), msg };
    let mut kv = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| cfg(format!("line {}: expected key=value", i + 1)))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| kv.get(k).ok_or_else(|| cfg(format!("missing key '{k}'")));
    let num = |k: &str| -> Result<f64> {
        get(k)?.parse::<f64>().map_err(|e| cfg(format!("key '{k}': {e}")))
    };
    let sample_rate_hz = num("sample_rate_hz")?;
    let gain_uv_per_lsb = num("gain_uv_per_lsb")?;
    if !(sample_rate_hz > 0.0) || !(gain_uv_per_lsb > 0.0) {
        return Err(cfg("sample_rate_hz and gain_uv_per_lsb must be positive".into()));
    }
    let channels = match kv.get("channels") {
        Some(c) => c.parse::<usize>().map_err(|e| cfg(format!("key 'channels': {e}")))?,
        None => CHANNELS,
    };
    if channels < CHANNELS {
        return Err(cfg(format!("need at least {CHANNELS} channels, got {channels}")));
    }
    let mut labels = Vec::new();
    for item in get("labels")?.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let parts: Vec<&str> = item.split(':').collect();
        if parts.len() != 3 {
            return Err(cfg(format!("label interval '{item}' is not start:end:LABEL")));
        }
        let start = parts[0].parse::<f64>().map_err(|e| cfg(format!("interval '{item}': {e}")))?;
        let end = parts[1].parse::<f64>().map_err(|e| cfg(format!("interval '{item}': {e}")))?;
        let label = parts[2].parse::<Label>().map_err(|e| cfg(format!("interval '{item}': {e}")))?;
        if !(end >= start) || start < 0.0 {
            return Err(cfg(format!("interval '{item}' is empty or negative")));
        }
        labels.push((start, end, label));
    }
    Ok(RawMeta { sample_rate_hz, gain_uv_per_lsb, channels, labels, source_id: kv.get("source_id").cloned() })
}

/// Parses little-endian int16 interleaved samples; the first two channels are kept.
pub fn parse_raw_record(path: &Path, meta: &RawMeta) -> Result<Record> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let frame = 2 * meta.channels;
    if bytes.len() % frame != 0 {
        let offset = (bytes.len() / frame * frame) as u64;
        return Err(DataError::ParseBinary {
            path: path.display().to_string(),
            offset,
            msg: format!("truncated frame: {} trailing bytes of a {frame}-byte frame", bytes.len() % frame),
        });
    }
    let scale = meta.gain_uv_per_lsb / 1000.0;
    let samples = bytes
        .chunks_exact(frame)
        .map(|f| {
            let a = i16::from_le_bytes([f[0], f[1]]) as f64;
            let b = i16::from_le_bytes([f[2], f[3]]) as f64;
            [a * scale, b * scale]
        })
        .collect::<Vec<_>>();
    let fs = meta.sample_rate_hz;
    let spans = meta
        .labels
        .iter()
        .map(|(s, e, l)| LabelSpan {
            start: (s * fs).round() as usize,
            end: ((e * fs).round() as usize).min(samples.len()),
            label: *l,
        })
        .collect();
    Ok(Record { source_id: meta.source_id.clone().unwrap_or_else(|| stem(path)), sample_rate: fs, samples, spans })
}

pub fn read_raw_record(path: &Path, meta: &RawMeta) -> Result<Vec<LabeledWindow>> {
    Ok(window_record(&parse_raw_record(path, meta)?))
}

/// Writes samples as int16 and a sidecar next to it. Values outside the
/// int16 range saturate.
pub fn write_raw_record(path: &Path, rec: &Record, gain_uv_per_lsb: f64) -> Result<()> {
    let mut bytes = Vec::with_capacity(rec.samples.len() * 4);
    for s in &rec.samples {
        for v in s {
            let code = (v * 1000.0 / gain_uv_per_lsb).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
            bytes.extend_from_slice(&code.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))?;
    let fs = rec.sample_rate;
    let labels: Vec<String> =
        rec.spans.iter().map(|s| format!("{}:{}:{}", s.start as f64 / fs, s.end as f64 / fs, s.label)).collect();
    let meta = meta_path(path);
    let mut f = std::fs::File::create(&meta).map_err(|e| io_err(&meta, e))?;
    write!(
        f,
        "sample_rate_hz={}\ngain_uv_per_lsb={}\nchannels=2\nsource_id={}\nlabels={}\n",
        fs,
        gain_uv_per_lsb,
        rec.source_id,
        labels.join(",")
    )
    .map_err(|e| io_err(&meta, e))
}

/// Loads every `.csv` and `.raw` recording in a directory (sorted by name).
pub fn load_directory(dir: &Path, csv: &CsvOptions) -> Result<Vec<LabeledWindow>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    let mut out = Vec::new();
    for p in entries {
        match p.extension().and_then(|e| e.to_str()) {
            Some("csv") => out.extend(read_csv_record(&p, &CsvOptions { source_id: None, ..csv.clone() })?),
            Some("raw") => {
                let meta = parse_raw_meta(&meta_path(&p))?;
                out.extend(read_raw_record(&p, &meta)?);
            }
            _ => {}
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledWindow>,
    pub validation: Vec<LabeledWindow>,
    pub test: Vec<LabeledWindow>,
}

pub const SPLIT_FRACTIONS: [f64; 3] = [0.70, 0.15, 0.15];

fn split_cost(sizes: &[usize; 3], targets: &[f64; 3]) -> f64 {
    sizes.iter().zip(targets).map(|(s, t)| (*s as f64 - t).abs()).sum()
}

/// Assigns whole sources to train/validation/test (indices 0/1/2) so that
/// window counts come close to 70/15/15. Every partition gets at least one
/// source. Returns the partition index of each input entry.
pub fn partition_sources(counts: &[(String, usize)], seed: u64) -> Result<Vec<usize>> {
    if counts.len() < 3 {
        return Err(DataError::Contract(format!("need at least 3 sources, got {}", counts.len())));
    }
    let total: usize = counts.iter().map(|c| c.1).sum();
    let targets = SPLIT_FRACTIONS.map(|f| f * total as f64);
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by(|a, b| counts[*b].1.cmp(&counts[*a].1));

    let mut assign = vec![0usize; counts.len()];
    let mut sizes = [0usize; 3];
    let mut members = [0usize; 3];
    for (rank, &i) in order.iter().enumerate() {
        let remaining = counts.len() - rank;
        let empty: Vec<usize> = (0..3).filter(|p| members[*p] == 0).collect();
        let part = if empty.len() >= remaining {
            empty[0]
        } else {
            (0..3)
                .max_by(|a, b| {
                    let da = (targets[*a] - sizes[*a] as f64) / targets[*a].max(1.0);
                    let db = (targets[*b] - sizes[*b] as f64) / targets[*b].max(1.0);
                    da.partial_cmp(&db).unwrap().then(b.cmp(a))
                })
                .unwrap()
        };
        assign[i] = part;
        sizes[part] += counts[i].1;
        members[part] += 1;
    }

    // local search over single moves and pairwise swaps
    loop {
        let current = split_cost(&sizes, &targets);
        let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
        for &i in &order {
            let from = assign[i];
            if members[from] == 1 {
                continue;
            }
            for to in 0..3 {
                if to == from {
                    continue;
                }
                let mut s = sizes;
                s[from] -= counts[i].1;
                s[to] += counts[i].1;
                let c = split_cost(&s, &targets);
                if c + 1e-9 < best.as_ref().map_or(current, |b| b.0) {
                    best = Some((c, vec![(i, to)]));
                }
            }
        }
        for (x, &i) in order.iter().enumerate() {
            for &j in &order[x + 1..] {
                let (pi, pj) = (assign[i], assign[j]);
                if pi == pj {
                    continue;
                }
                let mut s = sizes;
                s[pi] = s[pi] - counts[i].1 + counts[j].1;
                s[pj] = s[pj] - counts[j].1 + counts[i].1;
                let c = split_cost(&s, &targets);
                if c + 1e-9 < best.as_ref().map_or(current, |b| b.0) {
                    best = Some((c, vec![(i, pj), (j, pi)]));
                }
            }
        }
        match best {
            None => break,
            Some((_, moves)) => {
                for (i, to) in moves {
                    let from = assign[i];
                    sizes[from] -= counts[i].1;
                    members[from] -= 1;
                    sizes[to] += counts[i].1;
                    members[to] += 1;
                    assign[i] = to;
                }
            }
        }
    }
    Ok(assign)
}

/// Proband-level 70/15/15 split; window order within a partition follows the input.
pub fn make_split(windows: Vec<LabeledWindow>, seed: u64) -> Result<DatasetSplit> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for w in &windows {
        *counts.entry(w.source_id.clone()).or_default() += 1;
    }
    let list: Vec<(String, usize)> = counts.into_iter().collect();
    let assign = partition_sources(&list, seed)?;
    let part: BTreeMap<&str, usize> = list.iter().zip(&assign).map(|((s, _), p)| (s.as_str(), *p)).collect();
    let mut split = DatasetSplit { train: Vec::new(), validation: Vec::new(), test: Vec::new() };
    for w in windows {
        match part[w.source_id.as_str()] {
            0 => split.train.push(w),
            1 => split.validation.push(w),
            _ => split.test.push(w),
        }
    }
    Ok(split)
}

impl DatasetSplit {
    pub fn sources(&self) -> [BTreeSet<String>; 3] {
        let ids = |ws: &[LabeledWindow]| ws.iter().map(|w| w.source_id.clone()).collect();
        [ids(&self.train), ids(&self.validation), ids(&self.test)]
    }
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub noise_band: (f64, f64),
    pub noise_amplitude_frac: f64,
    pub baseline_shift_frac: f64,
    pub amplitude_scale_frac: f64,
    pub frequency_shift_frac: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_band: (25.0, 100.0),
            noise_amplitude_frac: 0.05,
            baseline_shift_frac: 0.10,
            amplitude_scale_frac: 0.20,
            frequency_shift_frac: 0.10,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            noise_amplitude_frac: 0.0,
            baseline_shift_frac: 0.0,
            amplitude_scale_frac: 0.0,
            frequency_shift_frac: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fr = [self.noise_amplitude_frac, self.baseline_shift_frac, self.amplitude_scale_frac, self.frequency_shift_frac];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(DataError::Contract("augmentation fractions must lie in [0, 1]".into()));
        }
        if !(self.noise_band.0 >= 0.0 && self.noise_band.1 > self.noise_band.0) {
            return Err(DataError::Contract("noise band must be an increasing pair of frequencies".into()));
        }
        Ok(())
    }
}

/// The random draws of one augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraws {
    pub resample_factor: f64,
    pub gain: f64,
    /// Per channel, as a fraction of that channel's peak-to-peak.
    pub offset_frac: [f64; 2],
    /// Per channel, target max |noise| as a fraction of peak-to-peak.
    pub noise_frac: [f64; 2],
    pub noise_seed: u64,
}

impl AugmentDraws {
    pub fn identity() -> Self {
        Self { resample_factor: 1.0, gain: 1.0, offset_frac: [0.0; 2], noise_frac: [0.0; 2], noise_seed: 0 }
    }

    pub fn draw(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let mut sym = |f: f64| if f > 0.0 { rng.random_range(-f..=f) } else { 0.0 };
        let resample_factor = 1.0 + sym(cfg.frequency_shift_frac);
        let gain = 1.0 + sym(cfg.amplitude_scale_frac);
        let offset_frac = [sym(cfg.baseline_shift_frac), sym(cfg.baseline_shift_frac)];
        let mut up = |f: f64| if f > 0.0 { rng.random_range(0.0..=f) } else { 0.0 };
        let noise_frac = [up(cfg.noise_amplitude_frac), up(cfg.noise_amplitude_frac)];
        Self { resample_factor, gain, offset_frac, noise_frac, noise_seed: rng.random() }
    }
}

/// White noise restricted to `[lo, hi]` Hz by zeroing FFT bins, scaled to
/// a maximum absolute value of `amplitude`. Empty when the band holds no bins.
pub fn band_limited_noise(n: usize, sample_rate: f64, band: (f64, f64), amplitude: f64, seed: u64) -> Vec<f64> {
    if amplitude == 0.0 || band.0 >= sample_rate / 2.0 || band.1 < band.0 {
        return vec![0.0; n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf: Vec<Complex<f64>> =
        (0..n).map(|_| Complex::new(StandardNormal.sample(&mut rng), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let df = sample_rate / n as f64;
    let mut any = false;
    for (k, b) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * df;
        if f < band.0 || f > band.1 || f >= sample_rate / 2.0 || k == 0 {
            *b = Complex::new(0.0, 0.0);
        } else {
            any = true;
        }
    }
    if !any || amplitude == 0.0 {
        return vec![0.0; n];
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let real: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let peak = real.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return vec![0.0; n];
    }
    real.iter().map(|v| v * amplitude / peak).collect()
}

/// Applies the given draws: resample, gain, baseline offset, band-limited noise.
pub fn augment_with(w: &LabeledWindow, cfg: &AugmentConfig, d: &AugmentDraws) -> LabeledWindow {
    let h = w.len();
    let c = w.samples.channels();
    let ptp: Vec<f64> = (0..c)
        .map(|ch| {
            let col = w.samples.column(ch);
            let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
            hi - lo
        })
        .collect();
    let mut out = vec![0.0; h * c];
    for t in 0..h {
        let pos = t as f64 * d.resample_factor;
        let i0 = pos.floor() as usize;
        for ch in 0..c {
            let v = if d.resample_factor == 1.0 {
                w.samples.get(t, ch)
            } else if i0 + 1 >= h {
                w.samples.get(h - 1, ch)
            } else {
                let frac = pos - i0 as f64;
                w.samples.get(i0, ch) * (1.0 - frac) + w.samples.get(i0 + 1, ch) * frac
            };
            out[t * c + ch] = v * d.gain + d.offset_frac[ch.min(1)] * ptp[ch];
        }
    }
    for ch in 0..c.min(2) {
        let amp = d.noise_frac[ch] * ptp[ch];
        if amp > 0.0 {
            let noise = band_limited_noise(h, w.sample_rate, cfg.noise_band, amp, derive_seed(d.noise_seed, ch as u64, 0));
            for t in 0..h {
                out[t * c + ch] += noise[t];
            }
        }
    }
    LabeledWindow {
        samples: FeatureMap::new(h, c, out).expect("augmentation keeps values finite"),
        sample_rate: w.sample_rate,
        label: w.label,
        source_id: w.source_id.clone(),
    }
}

/// Randomly augments a window; `stream` selects an independent draw
/// sequence under the same config seed.
pub fn augment(w: &LabeledWindow, cfg: &AugmentConfig, stream: u64) -> LabeledWindow {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream, 0xA5));
    let d = AugmentDraws::draw(cfg, &mut rng);
    augment_with(w, cfg, &d)
}
