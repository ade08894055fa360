//! Multi-objective evolutionary architecture search with constrained
//! Pareto selection.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{self, ConstraintConfig, CostReport, InputShape, Violation};
use crate::data::{derive_seed, DatasetSplit};
use crate::fxp::{search_formats, FxpFormat, QuantPair};
use crate::metrics::MetricReport;
use crate::nn::{LayerShape, QuantizedNetwork, MAX_LAYERS};
use crate::train::{evaluate_windows, train, TrainConfig};

pub const KERNEL_CHOICES: [usize; 9] = [1, 2, 4, 8, 16, 32, 64, 128, 256];
pub const CHANNEL_CHOICES: [usize; 9] = [4, 8, 16, 32, 64, 128, 256, 512, 1024];
pub const STRIDE_CHOICES: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];

/// Violation recorded for individuals whose training failed.
pub const FAILED_VIOLATION: f64 = 1e9;

/// Reference point for hypervolume, one entry per objective.
pub const HV_REFERENCE: [f64; 7] = [1.0, 1.0, 1.0, 5.0, 1e6, 64.0, 1e7];

#[derive(Debug, Error)]
pub enum NasError {
    #[error("genome generation failed: {0}")]
    Generation(String),
    #[error("invalid genome string '{0}': {1}")]
    Parse(String, String),
    #[error("invalid search configuration: {0}")]
    Config(String),
    #[error("run log {path}: {msg}")]
    Log { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, NasError>;

/// Architecture candidate: layer shapes plus one quantization pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Genome {
    pub layers: Vec<LayerShape>,
    pub quant: QuantPair,
}

impl Genome {
    pub fn network(&self, input_channels: usize, seed: u64) -> std::result::Result<QuantizedNetwork, crate::nn::NnError> {
        QuantizedNetwork::init(input_channels, &self.layers, self.quant, seed)
    }
}

impl fmt::Display for Genome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let layers: Vec<String> = self.layers.iter().map(|l| format!("{}:{}:{}", l.kernel, l.channels, l.stride)).collect();
        let q = |x: FxpFormat| format!("{}.{}", x.width_bits, x.precision_bits);
        write!(f, "{}@{}/{}", layers.join(","), q(self.quant.weights), q(self.quant.activations))
    }
}

impl FromStr for Genome {
    type Err = NasError;

    /// `K:C:S[,K:C:S...]@w.p/w.p` (weights, then activations).
    fn from_str(s: &str) -> Result<Self> {
        let bad = |m: &str| NasError::Parse(s.to_string(), m.to_string());
        let (layers, quant) = s.trim().split_once('@').ok_or_else(|| bad("missing '@' before the formats"))?;
        let num = |x: &str| x.trim().parse::<usize>().map_err(|_| bad(&format!("'{x}' is not a number")));
        let mut shapes = Vec::new();
        for l in layers.split(',').filter(|l| !l.trim().is_empty()) {
            let parts: Vec<&str> = l.split(':').collect();
            if parts.len() != 3 {
                return Err(bad("layers are written K:C:S"));
            }
            shapes.push(LayerShape::new(num(parts[0])?, num(parts[1])?, num(parts[2])?));
        }
        let fmt = |x: &str| -> Result<FxpFormat> {
            let (w, p) = x.split_once('.').ok_or_else(|| bad("formats are written w.p"))?;
            FxpFormat::new(num(w)? as u32, num(p)? as u32).map_err(|e| bad(&e.to_string()))
        };
        let (w, a) = quant.split_once('/').ok_or_else(|| bad("formats are written weights/activations"))?;
        Ok(Genome { layers: shapes, quant: QuantPair::new(fmt(w)?, fmt(a)?) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveVector {
    pub fnr: f64,
    pub fpr: f64,
    pub noise_fpr: f64,
    pub n_layers: usize,
    pub params: usize,
    pub total_bits: u32,
    pub max_layer_output: usize,
}

impl ObjectiveVector {
    pub fn as_array(&self) -> [f64; 7] {
        [
            self.fnr,
            self.fpr,
            self.noise_fpr,
            self.n_layers as f64,
            self.params as f64,
            self.total_bits as f64,
            self.max_layer_output as f64,
        ]
    }

    pub fn worst() -> Self {
        Self {
            fnr: 1.0,
            fpr: 1.0,
            noise_fpr: 1.0,
            n_layers: HV_REFERENCE[3] as usize,
            params: HV_REFERENCE[4] as usize,
            total_bits: HV_REFERENCE[5] as u32,
            max_layer_output: HV_REFERENCE[6] as usize,
        }
    }
}

/// Pareto dominance on minimized objectives.
pub fn dominates(a: &ObjectiveVector, b: &ObjectiveVector) -> bool {
    let (a, b) = (a.as_array(), b.as_array());
    a.iter().zip(&b).all(|(x, y)| x <= y) && a.iter().zip(&b).any(|(x, y)| x < y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub id: String,
    #[serde(with = "genome_string")]
    pub genome: Genome,
    pub objectives: ObjectiveVector,
    pub feasible: bool,
    pub violation: f64,
    pub train_seed: u64,
    #[serde(default)]
    pub failed: bool,
    pub cost: Option<CostReport>,
    pub validation: Option<MetricReport>,
    pub test: Option<MetricReport>,
}

mod genome_string {
    use super::Genome;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(g: &Genome, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&g.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Genome, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Feasible beats infeasible; among infeasibles the lower violation wins;
/// among feasibles plain Pareto dominance applies.
pub fn constrained_dominates(a: &Individual, b: &Individual) -> bool {
    match (a.feasible, b.feasible) {
        (true, false) => true,
        (false, true) => false,
        (false, false) => a.violation < b.violation,
        (true, true) => dominates(&a.objectives, &b.objectives),
    }
}

/// Indices of the non-dominated members; failed individuals never qualify.
pub fn pareto_front_indices(pop: &[Individual]) -> Vec<usize> {
    let live: Vec<usize> = (0..pop.len()).filter(|i| !pop[*i].failed).collect();
    if live.iter().any(|i| pop[*i].feasible) {
        // only feasible members can survive; sort lexicographically so a
        // dominator is always seen before the members it dominates
        let mut feas: Vec<usize> = live.into_iter().filter(|i| pop[*i].feasible).collect();
        feas.sort_by(|a, b| {
            let (x, y) = (pop[*a].objectives.as_array(), pop[*b].objectives.as_array());
            x.partial_cmp(&y).unwrap().then(a.cmp(b))
        });
        let mut front: Vec<usize> = Vec::new();
        for i in feas {
            if !front.iter().any(|f| dominates(&pop[*f].objectives, &pop[i].objectives)) {
                front.push(i);
            }
        }
        front.sort();
        front
    } else {
        let best = live.iter().map(|i| pop[*i].violation).fold(f64::INFINITY, f64::min);
        live.into_iter().filter(|i| pop[*i].violation == best).collect()
    }
}

pub fn pareto_front(pop: &[Individual]) -> Vec<Individual> {
    pareto_front_indices(pop).into_iter().map(|i| pop[i].clone()).collect()
}

/// Crowding distance of each member of a front.
pub fn crowding_distance(front: &[&Individual]) -> Vec<f64> {
    let n = front.len();
    let mut d = vec![0.0; n];
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    for m in 0..7 {
        let mut idx: Vec<usize> = (0..n).collect();
        let val = |i: usize| front[i].objectives.as_array()[m];
        idx.sort_by(|a, b| val(*a).partial_cmp(&val(*b)).unwrap().then(a.cmp(b)));
        let span = val(idx[n - 1]) - val(idx[0]);
        d[idx[0]] = f64::INFINITY;
        d[idx[n - 1]] = f64::INFINITY;
        if span > 0.0 {
            for k in 1..n - 1 {
                d[idx[k]] += (val(idx[k + 1]) - val(idx[k - 1])) / span;
            }
        }
    }
    d
}

/// Monte Carlo hypervolume of the feasible members, as a fraction of the
/// box between the origin and [`HV_REFERENCE`]. The sample set is fixed, so
/// adding points never lowers the estimate.
pub fn hypervolume(pop: &[Individual], samples: usize) -> f64 {
    let pts: Vec<[f64; 7]> = pop.iter().filter(|i| i.feasible && !i.failed).map(|i| i.objectives.as_array()).collect();
    if pts.is_empty() {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x4856);
    let mut hit = 0usize;
    for _ in 0..samples {
        let mut s = [0.0; 7];
        for (k, v) in s.iter_mut().enumerate() {
            *v = rng.random_range(0.0..HV_REFERENCE[k]);
        }
        if pts.iter().any(|p| p.iter().zip(&s).all(|(a, b)| a <= b)) {
            hit += 1;
        }
    }
    hit as f64 / samples as f64
}

// ---------------------------------------------------------------------------
// Variation operators

fn random_format_pair(rng: &mut impl Rng) -> QuantPair {
    let f = search_formats();
    QuantPair::new(f[rng.random_range(0..f.len())], f[rng.random_range(0..f.len())])
}

fn random_layer(rng: &mut impl Rng) -> LayerShape {
    LayerShape::new(
        KERNEL_CHOICES[rng.random_range(0..KERNEL_CHOICES.len())],
        CHANNEL_CHOICES[rng.random_range(0..CHANNEL_CHOICES.len())],
        STRIDE_CHOICES[rng.random_range(0..STRIDE_CHOICES.len())],
    )
}

pub const GENOME_RETRIES: usize = 200_000;

/// Uniform draw from the search space, repaired into the constraints and
/// redrawn only when repair fails. Plain rejection would almost never keep a
/// deep network under a compute budget.
pub fn random_genome(seed: u64, cfg: &ConstraintConfig, input: InputShape) -> Result<Genome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..GENOME_RETRIES {
        let n = rng.random_range(1..=MAX_LAYERS.min(cfg.max_layers.max(1)));
        let g = Genome { layers: (0..n).map(|_| random_layer(&mut rng)).collect(), quant: random_format_pair(&mut rng) };
        if let Some(g) = repair(&g, cfg, input) {
            return Ok(g);
        }
    }
    Err(NasError::Generation(format!("no valid genome after {GENOME_RETRIES} draws")))
}

fn step(choices: &[usize], value: usize, up: bool) -> usize {
    let i = choices.iter().position(|c| *c == value).unwrap_or(0);
    let j = if up { (i + 1).min(choices.len() - 1) } else { i.saturating_sub(1) };
    choices[j]
}

/// Brings a genome back inside the constraints: strides clamped to their
/// kernels and kernels to the limit, then strides, channels and kernels
/// shrunk until shapes, parameters and compute fit. `None` when that fails.
pub fn repair(g: &Genome, cfg: &ConstraintConfig, input: InputShape) -> Option<Genome> {
    let mut g = g.clone();
    g.layers.truncate(cfg.max_layers.min(MAX_LAYERS));
    if g.layers.is_empty() {
        return None;
    }
    let snap = |choices: &[usize], v: usize| *choices.iter().rev().find(|c| **c <= v).unwrap_or(&choices[0]);
    for l in g.layers.iter_mut() {
        l.kernel = snap(&KERNEL_CHOICES, l.kernel.min(cfg.max_kernel));
        l.channels = snap(&CHANNEL_CHOICES, l.channels);
        l.stride = snap(&STRIDE_CHOICES, l.stride.min(l.kernel));
    }
    for _ in 0..64 {
        let v = match cost::validate(&g, cfg, input) {
            Ok(()) => return Some(g),
            Err(v) => v,
        };
        let shape = v.iter().any(|x| matches!(x, Violation::ShapeInfeasible { .. }));
        let big = v.iter().any(|x| matches!(x, Violation::TooManyParams { .. } | Violation::MacBudgetExceeded { .. }));
        if !shape && !big {
            return None;
        }
        let largest = |f: fn(&LayerShape) -> usize, min: usize, g: &Genome| {
            (0..g.layers.len()).filter(|i| f(&g.layers[*i]) > min).max_by_key(|i| (f(&g.layers[*i]), usize::MAX - i))
        };
        if shape {
            if let Some(i) = largest(|l| l.stride, 1, &g) {
                g.layers[i].stride /= 2;
                continue;
            }
            if let Some(i) = largest(|l| l.kernel, 1, &g) {
                g.layers[i].kernel /= 2;
                g.layers[i].stride = g.layers[i].stride.min(g.layers[i].kernel);
                continue;
            }
            return None;
        }
        if let Some(i) = largest(|l| l.channels, CHANNEL_CHOICES[0], &g) {
            g.layers[i].channels /= 2;
            continue;
        }
        if let Some(i) = largest(|l| l.kernel, 1, &g) {
            g.layers[i].kernel /= 2;
            g.layers[i].stride = g.layers[i].stride.min(g.layers[i].kernel);
            continue;
        }
        // compute dominated by the first layer's length: stride up
        if let Some(i) = (0..g.layers.len()).find(|i| g.layers[*i].stride < g.layers[*i].kernel) {
            g.layers[i].stride *= 2;
            continue;
        }
        return None;
    }
    None
}

/// Per-field mutation at probability `rate`, followed by repair. Falls back
/// to the parent when repair fails.
pub fn mutate(g: &Genome, rate: f64, rng: &mut impl Rng, cfg: &ConstraintConfig, input: InputShape) -> Genome {
    if rate <= 0.0 {
        return g.clone();
    }
    let mut child = g.clone();
    for l in child.layers.iter_mut() {
        if rng.random_bool(rate) {
            l.kernel = step(&KERNEL_CHOICES, l.kernel, rng.random_bool(0.5));
        }
        if rng.random_bool(rate) {
            l.channels = step(&CHANNEL_CHOICES, l.channels, rng.random_bool(0.5));
        }
        if rng.random_bool(rate) {
            l.stride = step(&STRIDE_CHOICES, l.stride, rng.random_bool(0.5));
        }
    }
    if rng.random_bool(rate) {
        child.quant = random_format_pair(rng);
    }
    if rng.random_bool(rate) {
        let n = child.layers.len();
        let grow = if n <= 1 {
            true
        } else if n >= MAX_LAYERS.min(cfg.max_layers) {
            false
        } else {
            rng.random_bool(0.5)
        };
        if grow {
            let at = rng.random_range(0..=n);
            child.layers.insert(at, random_layer(rng));
        } else {
            let at = rng.random_range(0..n);
            child.layers.remove(at);
        }
    }
    repair(&child, cfg, input).unwrap_or_else(|| g.clone())
}

/// Single-point splice of the layer lists and a uniform choice of
/// quantization pair, followed by repair. Falls back to `a`.
pub fn crossover(a: &Genome, b: &Genome, rng: &mut impl Rng, cfg: &ConstraintConfig, input: InputShape) -> Genome {
    let cut = rng.random_range(1..=a.layers.len().min(b.layers.len()));
    let mut layers = a.layers[..cut].to_vec();
    layers.extend_from_slice(&b.layers[cut..]);
    let quant = if rng.random_bool(0.5) { a.quant } else { b.quant };
    repair(&Genome { layers, quant }, cfg, input).unwrap_or_else(|| a.clone())
}

// ---------------------------------------------------------------------------
// Evaluation and search

/// Rate-constraint shortfall: `Σ max(0, floor − metric)`, with undefined
/// metrics counted as 0.
pub fn metric_violation(report: &MetricReport, floor: f64) -> f64 {
    [report.sensitivity, report.specificity, report.noise_specificity]
        .iter()
        .map(|m| (floor - m.unwrap_or(0.0)).max(0.0))
        .sum()
}

/// Trains a genome and scores it on the validation partition.
pub fn evaluate(
    id: &str,
    g: &Genome,
    split: &DatasetSplit,
    budget: &TrainConfig,
    cfg: &ConstraintConfig,
    input_channels: usize,
    seed: u64,
) -> Individual {
    let length = split.train.first().map_or(0, |w| w.len());
    let input = InputShape::new(length, input_channels);
    let base = Individual {
        id: id.to_string(),
        genome: g.clone(),
        objectives: ObjectiveVector::worst(),
        feasible: false,
        violation: 0.0,
        train_seed: seed,
        failed: false,
        cost: None,
        validation: None,
        test: None,
    };
    if let Err(v) = cost::validate(g, cfg, input) {
        return Individual { violation: 3.0 * cfg.metric_floor + v.len() as f64, ..base };
    }
    let report = cost::report(g, input).expect("validated genome has a cost report");
    let failed = Individual { failed: true, violation: FAILED_VIOLATION, cost: Some(report), ..base.clone() };
    let Ok(net) = g.network(input_channels, seed) else { return failed };
    let budget = TrainConfig { seed, validate_each_epoch: false, ..budget.clone() };
    let Ok((trained, _)) = train(&net, split, &budget) else { return failed };
    let Ok((_, val)) = evaluate_windows(&trained, &split.validation) else { return failed };
    let val = val.report();
    let test = evaluate_windows(&trained, &split.test).ok().map(|(_, e)| e.report());
    let violation = metric_violation(&val, cfg.metric_floor);
    Individual {
        objectives: ObjectiveVector {
            fnr: 1.0 - val.sensitivity.unwrap_or(0.0),
            fpr: 1.0 - val.specificity.unwrap_or(0.0),
            noise_fpr: 1.0 - val.noise_specificity.unwrap_or(0.0),
            n_layers: g.layers.len(),
            params: report.params,
            total_bits: report.total_bits,
            max_layer_output: report.max_layer_output,
        },
        feasible: violation == 0.0,
        violation,
        cost: Some(report),
        validation: Some(val),
        test,
        ..base
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub generations: usize,
    pub offspring_per_gen: usize,
    pub seed: u64,
    pub mutation_rate: f64,
    pub input_channels: usize,
    pub train: TrainConfig,
    pub constraints: ConstraintConfig,
    pub hypervolume_samples: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            generations: 190,
            offspring_per_gen: 8,
            seed: 0,
            mutation_rate: 0.2,
            input_channels: 2,
            train: TrainConfig::default(),
            constraints: ConstraintConfig::default(),
            hypervolume_samples: 20_000,
        }
    }
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub seed: u64,
    pub offspring: Vec<Individual>,
    /// Ids of the archive front after this generation.
    pub front: Vec<String>,
    pub hypervolume: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub archive: Vec<Individual>,
    pub front: Vec<Individual>,
    pub log: Vec<GenerationRecord>,
}

fn tournament<'a>(front: &[&'a Individual], crowd: &[f64], rng: &mut impl Rng) -> &'a Individual {
    let a = rng.random_range(0..front.len());
    let b = rng.random_range(0..front.len());
    if crowd[b] > crowd[a] {
        front[b]
    } else {
        front[a]
    }
}

fn breed(archive: &[Individual], cfg: &SearchConfig, generation: usize, input: InputShape) -> Result<Vec<(Genome, u64)>> {
    let gen_seed = derive_seed(cfg.seed, generation as u64, 0x6E6);
    let mut rng = ChaCha8Rng::seed_from_u64(gen_seed);
    let seeds: Vec<u64> = (0..cfg.offspring_per_gen).map(|i| derive_seed(cfg.seed, generation as u64, i as u64)).collect();
    if generation == 1 || archive.is_empty() {
        return seeds
            .iter()
            .map(|s| Ok((random_genome(derive_seed(*s, 0x9E, 0), &cfg.constraints, input)?, *s)))
            .collect();
    }
    let front_idx = pareto_front_indices(archive);
    let front: Vec<&Individual> = if front_idx.is_empty() {
        archive.iter().collect()
    } else {
        front_idx.iter().map(|i| &archive[*i]).collect()
    };
    let crowd = crowding_distance(&front);
    Ok(seeds
        .iter()
        .map(|s| {
            let a = tournament(&front, &crowd, &mut rng);
            let b = tournament(&front, &crowd, &mut rng);
            let child = crossover(&a.genome, &b.genome, &mut rng, &cfg.constraints, input);
            (mutate(&child, cfg.mutation_rate, &mut rng, &cfg.constraints, input), *s)
        })
        .collect())
}

/// Reads a run log written by [`run_search`].
pub fn read_log(path: &Path) -> Result<Vec<GenerationRecord>> {
    let err = |msg: String| NasError::Log { path: path.display().to_string(), msg };
    let f = std::fs::File::open(path).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Runs (or resumes) the search. With `log_path`, generations already in the
/// log are replayed instead of recomputed and new ones are appended.
pub fn run_search(cfg: &SearchConfig, split: &DatasetSplit, log_path: Option<&Path>) -> Result<SearchResult> {
    if cfg.generations == 0 || cfg.offspring_per_gen == 0 {
        return Err(NasError::Config("generations and offspring_per_gen must be at least 1".into()));
    }
    let length = split.train.first().map(|w| w.len()).ok_or_else(|| NasError::Config("empty training partition".into()))?;
    let input = InputShape::new(length, cfg.input_channels);
    let mut log = match log_path {
        Some(p) if p.exists() => read_log(p)?,
        _ => Vec::new(),
    };
    for (i, rec) in log.iter().enumerate() {
        if rec.generation != i + 1 || rec.seed != cfg.seed {
            return Err(NasError::Log {
                path: log_path.unwrap().display().to_string(),
                msg: format!("entry {} does not continue this run", i + 1),
            });
        }
    }
    log.truncate(cfg.generations);
    let mut archive: Vec<Individual> = log.iter().flat_map(|r| r.offspring.clone()).collect();
    let mut writer = match log_path {
        Some(p) => Some(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| NasError::Log { path: p.display().to_string(), msg: e.to_string() })?,
        ),
        None => None,
    };
    for generation in log.len() + 1..=cfg.generations {
        let children = breed(&archive, cfg, generation, input)?;
        let offspring: Vec<Individual> = children
            .par_iter()
            .enumerate()
            .map(|(i, (g, s))| {
                evaluate(&format!("g{generation}-{i}"), g, split, &cfg.train, &cfg.constraints, cfg.input_channels, *s)
            })
            .collect();
        archive.extend(offspring.iter().cloned());
        let front: Vec<String> = pareto_front_indices(&archive).into_iter().map(|i| archive[i].id.clone()).collect();
        let rec = GenerationRecord {
            generation,
            seed: cfg.seed,
            offspring,
            front,
            hypervolume: hypervolume(&archive, cfg.hypervolume_samples),
        };
        if let (Some(w), Some(p)) = (writer.as_mut(), log_path) {
            let line = serde_json::to_string(&rec).expect("log record serializes");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| NasError::Log { path: p.display().to_string(), msg: e.to_string() })?;
        }
        log.push(rec);
    }
    let front = pareto_front(&archive);
    Ok(SearchResult { archive, front, log })
}

/// Pareto scatter data: one row per individual.
pub fn pareto_csv(archive: &[Individual], front_ids: &[String]) -> String {
    let mut out = String::from("id,genome,fnr,fpr,noise_fpr,n_layers,params,total_bits,max_layer_output,feasible,on_front\n");
    for i in archive {
        let o = &i.objectives;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            i.id,
            i.genome,
            o.fnr,
            o.fpr,
            o.noise_fpr,
            o.n_layers,
            o.params,
            o.total_bits,
            o.max_layer_output,
            i.feasible,
            front_ids.contains(&i.id)
        ));
    }
    out
}
