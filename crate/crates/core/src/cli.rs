//! Command-line driver: config resolution, subcommands and run manifests.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::cost::{self, ConstraintConfig, InputShape};
use crate::data::{self, DataError, DatasetSplit, Label, LabeledWindow, SynthConfig, CHANNELS};
use crate::deploy::{self, DeployError, Scheduler, StreamOptions, PREDICTION_HEADER};
use crate::metrics::{Evaluation, MetricReport, MetricsError};
use crate::nas::{self, Genome, NasError, SearchConfig};
use crate::nn::NnError;
use crate::train::{self, Checkpoint, TrainConfig, TrainError};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("AFNAS_GIT_DESCRIBE"), ")");

/// Training genome used when none is given.
pub const DEFAULT_GENOME: &str = "8:8:2,8:8:2,8:8:2@16.10/16.8";

pub const THREADS_ENV: &str = "AFNAS_THREADS";

// ---------------------------------------------------------------------------
// Errors

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Infeasible,
    Internal,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Infeasible => 3,
            ErrorKind::Internal => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::Usage => "usage",
            ErrorKind::Data => "data",
            ErrorKind::Infeasible => "infeasible",
            ErrorKind::Internal => "internal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    fn usage(m: impl Into<String>) -> Self {
        Self::new(ErrorKind::Usage, m)
    }

    fn data(m: impl Into<String>) -> Self {
        Self::new(ErrorKind::Data, m)
    }
}

impl fmt::Display for CliError {
    /// `afnas: error[kind]: message`, one line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "afnas: error[{}]: {}", self.kind.name(), self.message.replace('\n', " "))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::InfeasibleShape { .. } => Self::new(ErrorKind::Infeasible, e.to_string()),
            NnError::Contract(_) => Self::data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Nn(n) => n.into(),
            TrainError::Config(_) => Self::usage(e.to_string()),
            TrainError::Checkpoint { .. } => Self::data(e.to_string()),
            TrainError::Diverged { .. } => Self::new(ErrorKind::Internal, e.to_string()),
        }
    }
}

impl From<NasError> for CliError {
    fn from(e: NasError) -> Self {
        match e {
            NasError::Parse(..) | NasError::Config(_) => Self::usage(e.to_string()),
            NasError::Log { .. } => Self::data(e.to_string()),
            NasError::Generation(_) => Self::new(ErrorKind::Infeasible, e.to_string()),
        }
    }
}

impl From<DeployError> for CliError {
    fn from(e: DeployError) -> Self {
        match e {
            DeployError::Nn(n) => n.into(),
            DeployError::Format { .. } | DeployError::Io { .. } | DeployError::Contract(_) => Self::data(e.to_string()),
            DeployError::Numeric(_) | DeployError::Deadlock { .. } | DeployError::Internal(_) => {
                Self::new(ErrorKind::Internal, e.to_string())
            }
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Nn(n) => n.into(),
            _ => Self::data(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_error(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_error(path, e))
}

// ---------------------------------------------------------------------------
// Options

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Paper,
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SplitName {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RecordFormat {
    Csv,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulerName {
    Sequential,
    RoundRobin,
    Random,
    Threaded,
}

/// Settings shared by every subcommand. Each one can also be given as a key
/// of the same name (with underscores) in the `--config` file; flags win.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Options {
    /// TOML file with any of the keys below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory of .csv/.raw recordings; synthetic data when absent.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub sample_rate_hz: Option<f64>,
    #[arg(long)]
    pub generations: Option<usize>,
    #[arg(long)]
    pub offspring: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_kernel: Option<usize>,
    #[arg(long)]
    pub probands: Option<usize>,
    #[arg(long)]
    pub windows_per_proband: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub max_macs: Option<u64>,
    #[arg(long)]
    pub max_layer_output: Option<usize>,
    /// Architecture for `train`, written `K:C:S[,K:C:S...]@w.p/w.p`.
    #[arg(long)]
    pub genome: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Exported model blob.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Prediction CSV written by `infer`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Search run log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<SplitName>,
    #[arg(long, value_enum)]
    pub format: Option<RecordFormat>,
    #[arg(long, value_enum)]
    pub scheduler: Option<SchedulerName>,
}

macro_rules! overlay {
    ($top:expr, $base:expr; $($f:ident),*) => {
        Options { config: $top.config.clone(), $($f: $top.$f.clone().or_else(|| $base.$f.clone())),* }
    };
}

impl Options {
    /// `self` with unset fields taken from `base`.
    pub fn over(&self, base: &Options) -> Options {
        overlay!(self, base; profile, seed, out, dataset, sample_rate_hz, generations, offspring, epochs,
            max_kernel, probands, windows_per_proband, lr, batch_size, steps_per_epoch, max_macs,
            max_layer_output, genome, checkpoint, model, predictions, log, split, format, scheduler)
    }

    pub fn from_toml(text: &str) -> std::result::Result<Options, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "afnas", version = VERSION, about = "Search, train and deploy fixed-point ECG AF detectors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus as recordings.
    SynthData(Options),
    /// Train one genome and save a checkpoint.
    Train(Options),
    /// Print sensitivity, specificity and noise specificity.
    Eval(Options),
    /// Run the architecture search.
    Search(Options),
    /// Fold a checkpoint and write the integer model blob.
    Export(Options),
    /// Stream windows through a model blob and write predictions.
    Infer(Options),
    /// Pareto scatter and cost table from a search log.
    Report(Options),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthData(_) => "synth-data",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Search(_) => "search",
            Command::Export(_) => "export",
            Command::Infer(_) => "infer",
            Command::Report(_) => "report",
        }
    }

    fn options(&self) -> &Options {
        match self {
            Command::SynthData(o)
            | Command::Train(o)
            | Command::Eval(o)
            | Command::Search(o)
            | Command::Export(o)
            | Command::Infer(o)
            | Command::Report(o) => o,
        }
    }
}

// ---------------------------------------------------------------------------
// Resolved configuration

/// Everything a run depends on, after profile defaults, config file and flags.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: Option<PathBuf>,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub constraints: ConstraintConfig,
    pub generations: usize,
    pub offspring: usize,
    pub genome: String,
    pub checkpoint: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub split: SplitName,
    pub format: RecordFormat,
    pub scheduler: SchedulerName,
}

/// Learning-rate drop epochs for a budget of `epochs`: halfway and at five
/// sixths, which gives 15 and 25 for 30 epochs.
pub fn lr_drops(epochs: usize) -> Vec<usize> {
    vec![epochs / 2, epochs * 5 / 6]
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (generations, epochs, rate) = match profile {
            Profile::Paper => (190, 30, data::DEFAULT_SAMPLE_RATE_HZ),
            Profile::Desk => (10, 10, data::DESK_SAMPLE_RATE_HZ),
        };
        let mut train = TrainConfig { epochs, lr_drop_epochs: lr_drops(epochs), ..TrainConfig::default() };
        let mut constraints = ConstraintConfig::default();
        if profile == Profile::Desk {
            // Short budgets need a larger step and a cap on compute per window
            // to keep the whole search on one core.
            train.lr_initial = 0.05;
            train.steps_per_epoch = Some(12);
            constraints.max_macs_per_window = Some(300_000);
            constraints.max_layer_output = Some(16_384);
        }
        Self {
            profile,
            seed: 0,
            out: PathBuf::from("afnas-out"),
            dataset: None,
            synth: SynthConfig { sample_rate_hz: rate, ..SynthConfig::default() },
            train,
            constraints,
            generations,
            offspring: 8,
            genome: DEFAULT_GENOME.to_string(),
            checkpoint: None,
            model: None,
            predictions: None,
            log: None,
            split: SplitName::Test,
            format: RecordFormat::Csv,
            scheduler: SchedulerName::Sequential,
        }
    }

    /// Profile defaults overridden by `o`.
    pub fn resolve(o: &Options) -> Result<Self> {
        let mut c = Self::for_profile(o.profile.unwrap_or(Profile::Desk));
        if let Some(s) = o.seed {
            c.seed = s;
        }
        c.synth.seed = c.seed;
        c.train.seed = c.seed;
        if let Some(p) = &o.out {
            c.out = p.clone();
        }
        c.dataset = o.dataset.clone();
        if let Some(r) = o.sample_rate_hz {
            if !(r.is_finite() && r > 0.0) {
                return Err(CliError::usage("sample_rate_hz must be a positive number"));
            }
            c.synth.sample_rate_hz = r;
        }
        if let Some(g) = o.generations {
            c.generations = g;
        }
        if let Some(n) = o.offspring {
            c.offspring = n;
        }
        if let Some(e) = o.epochs {
            c.train.epochs = e;
            c.train.lr_drop_epochs = lr_drops(e);
        }
        if let Some(k) = o.max_kernel {
            c.constraints.max_kernel = k;
        }
        if let Some(p) = o.probands {
            c.synth.probands = p;
        }
        if let Some(w) = o.windows_per_proband {
            c.synth.windows_per_proband = w;
        }
        if let Some(lr) = o.lr {
            c.train.lr_initial = lr;
        }
        if let Some(b) = o.batch_size {
            c.train.batch_size = b;
        }
        if let Some(s) = o.steps_per_epoch {
            c.train.steps_per_epoch = Some(s);
        }
        if let Some(m) = o.max_macs {
            c.constraints.max_macs_per_window = Some(m);
        }
        if let Some(m) = o.max_layer_output {
            c.constraints.max_layer_output = Some(m);
        }
        if let Some(g) = &o.genome {
            c.genome = g.clone();
        }
        c.checkpoint = o.checkpoint.clone();
        c.model = o.model.clone();
        c.predictions = o.predictions.clone();
        c.log = o.log.clone();
        if let Some(s) = o.split {
            c.split = s;
        }
        if let Some(f) = o.format {
            c.format = f;
        }
        if let Some(s) = o.scheduler {
            c.scheduler = s;
        }
        c.train.validate()?;
        Ok(c)
    }

    fn out_file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn search_config(&self) -> SearchConfig {
        SearchConfig {
            generations: self.generations,
            offspring_per_gen: self.offspring,
            seed: self.seed,
            train: self.train.clone(),
            constraints: self.constraints.clone(),
            input_channels: CHANNELS,
            ..SearchConfig::default()
        }
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a RunConfig,
    outputs: Vec<String>,
}

fn write_manifest(cfg: &RunConfig, command: &str, outputs: &[&str]) -> Result<()> {
    let m = Manifest {
        tool: "afnas",
        version: VERSION,
        command,
        config: cfg,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::new(ErrorKind::Internal, e.to_string()))?;
    write_file(&cfg.out_file(&format!("manifest-{command}.json")), text + "\n")
}

// ---------------------------------------------------------------------------
// Data plumbing

fn load_windows(cfg: &RunConfig) -> Result<Vec<LabeledWindow>> {
    let windows = match &cfg.dataset {
        Some(dir) => {
            let csv = data::CsvOptions { sample_rate_hz: cfg.synth.sample_rate_hz, ..data::CsvOptions::default() };
            data::load_directory(dir, &csv)?
        }
        None => data::synthesize_dataset(&cfg.synth)?,
    };
    if windows.is_empty() {
        return Err(CliError::data("dataset contains no complete windows"));
    }
    Ok(windows)
}

fn load_split(cfg: &RunConfig) -> Result<DatasetSplit> {
    Ok(data::make_split(load_windows(cfg)?, cfg.seed)?)
}

fn select(split: &DatasetSplit, which: SplitName) -> Vec<LabeledWindow> {
    match which {
        SplitName::Train => split.train.clone(),
        SplitName::Validation => split.validation.clone(),
        SplitName::Test => split.test.clone(),
        SplitName::All => split.train.iter().chain(&split.validation).chain(&split.test).cloned().collect(),
    }
}

/// `source:n`, where `n` counts the source's windows in order.
pub fn window_ids(windows: &[LabeledWindow]) -> Vec<String> {
    let mut seen = std::collections::HashMap::<&str, usize>::new();
    windows
        .iter()
        .map(|w| {
            let n = seen.entry(w.source_id.as_str()).or_default();
            *n += 1;
            format!("{}:{}", w.source_id, *n - 1)
        })
        .collect()
}

fn ensure_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).map_err(|e| io_error(&cfg.out, e))
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str, command: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| CliError::usage(format!("{command} needs --{flag}")))
}

fn print_report(r: &MetricReport) {
    println!("{r}");
}

// ---------------------------------------------------------------------------
// Subcommands

fn synth_data(cfg: &RunConfig) -> Result<()> {
    ensure_out(cfg)?;
    let windows = data::synthesize_dataset(&cfg.synth)?;
    let dir = cfg.out_file("data");
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    let mut sources: Vec<&str> = windows.iter().map(|w| w.source_id.as_str()).collect();
    sources.sort_unstable();
    sources.dedup();
    for s in &sources {
        let ws: Vec<LabeledWindow> = windows.iter().filter(|w| w.source_id == *s).cloned().collect();
        let rec = data::record_from_windows(s, &ws)?;
        match cfg.format {
            RecordFormat::Csv => data::write_csv_record(&dir.join(format!("{s}.csv")), &rec)?,
            RecordFormat::Raw => data::write_raw_record(&dir.join(format!("{s}.raw")), &rec, 1.0)?,
        }
    }
    eprintln!("wrote {} windows from {} probands to {}", windows.len(), sources.len(), dir.display());
    write_manifest(cfg, "synth-data", &["data"])
}

fn parse_genome(cfg: &RunConfig, input: InputShape) -> Result<Genome> {
    let g: Genome = cfg.genome.parse()?;
    if let Err(v) = cost::validate(&g, &cfg.constraints, input) {
        let codes: Vec<String> = v.iter().map(|v| format!("{} ({v})", v.code())).collect();
        return Err(CliError::new(ErrorKind::Infeasible, format!("genome {g} violates {}", codes.join(", "))));
    }
    Ok(g)
}

#[derive(Serialize)]
struct TrainMetrics {
    genome: String,
    validation: MetricReport,
    test: MetricReport,
}

fn train_cmd(cfg: &RunConfig) -> Result<()> {
    ensure_out(cfg)?;
    let split = load_split(cfg)?;
    let input = InputShape::new(split.train.first().map_or(0, |w| w.len()), CHANNELS);
    let g = parse_genome(cfg, input)?;
    let net = g.network(CHANNELS, cfg.seed)?;
    let (trained, history) = train::train(&net, &split, &cfg.train)?;
    let ck = Checkpoint { genome: Some(g.to_string()), net: trained, config: Some(cfg.train.clone()), history };
    ck.save(&cfg.out_file("checkpoint.afck"))?;
    let mut log = String::new();
    for e in &ck.history.epochs {
        log.push_str(&serde_json::to_string(e).map_err(|e| CliError::new(ErrorKind::Internal, e.to_string()))?);
        log.push('\n');
    }
    write_file(&cfg.out_file("train_log.jsonl"), log)?;
    let (_, val) = train::evaluate_windows(&ck.net, &split.validation)?;
    let (_, test) = train::evaluate_windows(&ck.net, &split.test)?;
    let m = TrainMetrics { genome: g.to_string(), validation: val.report(), test: test.report() };
    let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::new(ErrorKind::Internal, e.to_string()))?;
    write_file(&cfg.out_file("metrics.json"), text + "\n")?;
    print_report(&m.test);
    write_manifest(cfg, "train", &["checkpoint.afck", "train_log.jsonl", "metrics.json"])
}

/// Parses a prediction CSV back into `(label, predicted AF)` pairs.
pub fn read_predictions(path: &Path) -> Result<Vec<(Label, bool)>> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line.trim() != PREDICTION_HEADER {
                return Err(CliError::data(format!("{}: line 1: expected header '{PREDICTION_HEADER}'", path.display())));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| CliError::data(format!("{}: line {}: {m}", path.display(), i + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        f[1].trim().parse::<i64>().map_err(|_| bad("logit code is not an integer"))?;
        let label: Label = f[2].parse().map_err(|e: String| bad(&e))?;
        let predicted = match f[3].trim() {
            "AF" => true,
            "NOT_AF" => false,
            other => return Err(bad(&format!("unknown prediction '{other}'"))),
        };
        out.push((label, predicted));
    }
    Ok(out)
}

fn eval_cmd(cfg: &RunConfig) -> Result<()> {
    ensure_out(cfg)?;
    let ev = if let Some(p) = &cfg.predictions {
        Evaluation::from_predictions(read_predictions(p)?)?
    } else if let Some(p) = &cfg.model {
        let m = deploy::load(p)?;
        let windows = select(&load_split(cfg)?, cfg.split);
        let results = deploy::infer_windows(&m, &windows)?;
        Evaluation::from_predictions(results.iter().map(|(r, w)| (w.label, r.positive)))?
    } else if let Some(p) = &cfg.checkpoint {
        let ck = Checkpoint::load(p)?;
        let windows = select(&load_split(cfg)?, cfg.split);
        crate::metrics::evaluate(&ck.net, &windows)?
    } else {
        return Err(CliError::usage("eval needs --predictions, --model or --checkpoint"));
    };
    let r = ev.report();
    let text = serde_json::to_string_pretty(&r).map_err(|e| CliError::new(ErrorKind::Internal, e.to_string()))?;
    write_file(&cfg.out_file("eval.json"), text + "\n")?;
    print_report(&r);
    write_manifest(cfg, "eval", &["eval.json"])
}

fn search_cmd(cfg: &RunConfig) -> Result<()> {
    ensure_out(cfg)?;
    let split = load_split(cfg)?;
    let log_path = cfg.log.clone().unwrap_or_else(|| cfg.out_file("search_log.jsonl"));
    let result = nas::run_search(&cfg.search_config(), &split, Some(&log_path))?;
    let ids: Vec<String> = result.front.iter().map(|i| i.id.clone()).collect();
    write_file(&cfg.out_file("pareto.csv"), nas::pareto_csv(&result.archive, &ids))?;
    let text =
        serde_json::to_string_pretty(&result.front).map_err(|e| CliError::new(ErrorKind::Internal, e.to_string()))?;
    write_file(&cfg.out_file("front.json"), text + "\n")?;
    let feasible = result.front.iter().filter(|i| i.feasible).count();
    println!("evaluated={}", result.archive.len());
    println!("front={}", result.front.len());
    println!("feasible_front={feasible}");
    for i in &result.front {
        let t = i.test.as_ref();
        let show = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"));
        println!(
            "{} {} params={} test_sens={} test_spec={} test_noise_spec={}",
            i.id,
            i.genome,
            i.objectives.params,
            show(t.and_then(|r| r.sensitivity)),
            show(t.and_then(|r| r.specificity)),
            show(t.and_then(|r| r.noise_specificity))
        );
    }
    write_manifest(cfg, "search", &["search_log.jsonl", "pareto.csv", "front.json"])
}

fn export_cmd(cfg: &RunConfig) -> Result<()> {
    ensure_out(cfg)?;
    let ck = Checkpoint::load(require(&cfg.checkpoint, "checkpoint", "export")?)?;
    let mut m = deploy::fold_batchnorm(&ck.net)?;
    let split = load_split(cfg)?;
    let profile_set: Vec<LabeledWindow> = split.train.iter().chain(&split.validation).cloned().collect();
    m.profile(&ck.net, &profile_set)?;
    deploy::export(&m, &cfg.out_file("model.afnn"))?;
    println!("codes={}", m.code_count());
    println!("payload_bytes={}", m.payload_bytes());
    write_manifest(cfg, "export", &["model.afnn"])
}

fn infer_cmd(cfg: &RunConfig) -> Result<()> {
    ensure_out(cfg)?;
    let m = deploy::load(require(&cfg.model, "model", "infer")?)?;
    let windows = select(&load_split(cfg)?, cfg.split);
    let results: Vec<deploy::Inference> = match cfg.scheduler {
        SchedulerName::Sequential => deploy::infer_windows(&m, &windows)?.into_iter().map(|(r, _)| r).collect(),
        s => {
            let opts = StreamOptions::default();
            let mut out = Vec::with_capacity(windows.len());
            for (i, w) in windows.iter().enumerate() {
                let sched = match s {
                    SchedulerName::RoundRobin => Scheduler::RoundRobin,
                    SchedulerName::Threaded => Scheduler::Threaded,
                    _ => Scheduler::Random(data::derive_seed(cfg.seed, i as u64, 0x5C)),
                };
                out.push(deploy::stream_infer(&m, &w.samples, sched, &opts)?);
            }
            out
        }
    };
    let mut csv = format!("{PREDICTION_HEADER}\n");
    let mut overflows = 0;
    for ((r, w), id) in results.iter().zip(&windows).zip(window_ids(&windows)) {
        let row = deploy::PredictionRow { window_id: id, logit_code: r.logit_code, label: w.label, positive: r.positive };
        csv.push_str(&format!("{row}\n"));
        overflows += r.overflows;
    }
    write_file(&cfg.out_file("predictions.csv"), csv)?;
    println!("windows={}", windows.len());
    println!("overflows={overflows}");
    write_manifest(cfg, "infer", &["predictions.csv"])
}

fn report_cmd(cfg: &RunConfig) -> Result<()> {
    ensure_out(cfg)?;
    let log_path = cfg.log.clone().unwrap_or_else(|| cfg.out_file("search_log.jsonl"));
    let log = nas::read_log(&log_path)?;
    let last = log.last().ok_or_else(|| CliError::data(format!("{}: empty run log", log_path.display())))?;
    let archive: Vec<nas::Individual> = log.iter().flat_map(|r| r.offspring.iter().cloned()).collect();
    write_file(&cfg.out_file("pareto_scatter.csv"), nas::pareto_csv(&archive, &last.front))?;
    let mut table = String::from(
        "id,genome,params,weight_bytes,macs_per_window,max_layer_output,activation_bytes,linebuffer_bytes,total_bits\n",
    );
    for i in &archive {
        if let Some(c) = &i.cost {
            table.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                i.id,
                i.genome,
                c.params,
                c.weight_bytes,
                c.macs_per_window,
                c.max_layer_output,
                c.activation_bytes,
                c.linebuffer_bytes,
                c.total_bits
            ));
        }
    }
    write_file(&cfg.out_file("cost_table.csv"), table)?;
    println!("generations={}", log.len());
    println!("individuals={}", archive.len());
    println!("front={}", last.front.len());
    write_manifest(cfg, "report", &["pareto_scatter.csv", "cost_table.csv"])
}

// ---------------------------------------------------------------------------
// Entry point

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::usage(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
    // A pool may already exist when called twice in one process; keep it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs a parsed command.
pub fn run(cmd: &Command) -> Result<()> {
    let flags = cmd.options();
    let opts = match &flags.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
            let file = Options::from_toml(&text).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
            flags.over(&file)
        }
        None => flags.clone(),
    };
    let cfg = RunConfig::resolve(&opts)?;
    configure_threads()?;
    match cmd {
        Command::SynthData(_) => synth_data(&cfg),
        Command::Train(_) => train_cmd(&cfg),
        Command::Eval(_) => eval_cmd(&cfg),
        Command::Search(_) => search_cmd(&cfg),
        Command::Export(_) => export_cmd(&cfg),
        Command::Infer(_) => infer_cmd(&cfg),
        Command::Report(_) => report_cmd(&cfg),
    }
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", CliError::usage(first));
            return ErrorKind::Usage.exit_code();
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.kind.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles() {
        let p = RunConfig::for_profile(Profile::Paper);
        assert_eq!((p.generations, p.offspring, p.train.epochs, p.synth.sample_rate_hz), (190, 8, 30, 128.0));
        assert_eq!(p.train.lr_drop_epochs, vec![15, 25]);
        assert_eq!(p.train.lr_initial, 0.01);
        let d = RunConfig::for_profile(Profile::Desk);
        assert_eq!((d.generations, d.offspring, d.train.epochs, d.synth.sample_rate_hz), (10, 8, 10, 32.0));
        assert_eq!(d.train.lr_drop_epochs, vec![5, 8]);
    }

    #[test]
    fn config_file_and_flag_precedence() {
        let file = Options::from_toml("profile = \"paper\"\nseed = 3\nepochs = 12\nmax_kernel = 16\n").unwrap();
        let flags = Options { seed: Some(9), ..Options::default() };
        let c = RunConfig::resolve(&flags.over(&file)).unwrap();
        assert_eq!((c.profile, c.seed, c.train.epochs, c.constraints.max_kernel), (Profile::Paper, 9, 12, 16));
        assert_eq!(c.train.lr_drop_epochs, vec![6, 10]);
        assert!(Options::from_toml("epochz = 3\n").is_err());
        assert!(Options::from_toml("config = \"x.toml\"\n").is_err());
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let o = Options { lr: Some(-1.0), ..Options::default() };
        assert_eq!(RunConfig::resolve(&o).unwrap_err().kind, ErrorKind::Usage);
        let o = Options { sample_rate_hz: Some(0.0), ..Options::default() };
        assert_eq!(RunConfig::resolve(&o).unwrap_err().kind, ErrorKind::Usage);
    }

    #[test]
    fn error_line_format() {
        let e = CliError::new(ErrorKind::Infeasible, "two\nlines");
        assert_eq!(e.to_string(), "afnas: error[infeasible]: two lines");
        assert_eq!(e.kind.exit_code(), 3);
    }

    #[test]
    fn window_ids_count_per_source() {
        let w = |s: &str| LabeledWindow {
            samples: crate::nn::FeatureMap::zeros(4, 2),
            sample_rate: 32.0,
            label: Label::Normal,
            source_id: s.into(),
        };
        assert_eq!(window_ids(&[w("a"), w("b"), w("a")]), ["a:0", "b:0", "a:1"]);
    }
}
