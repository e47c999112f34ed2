//! Command-line entry point.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dtits_core::aggregate::{aggregate_instances, aggregate_sliding_window, filter_and_assign, intersect_instance_maps};
use dtits_core::baselines::{knn1_predict, ncc_fit, ncc_predict_all, Metric};
use dtits_core::eval::{confusion, label_clusters_limited, label_clusters_majority, map_clusters, mean_accuracy_of, Selection};
use dtits_core::losses::Mode;
use dtits_core::model::{gradient_check, CheckDims, Model, Stage};
use dtits_core::preprocess::{channel_stats, gap_fill_dataset, normalize, threshold_clouds, GapFill};
use dtits_core::synth::{generate, SynthConfig};
use dtits_core::train::{assign_with, train_curriculum, InitMode, TrainConfig, TrainRun};
use dtits_core::transform::{apply_offset, fit_warp, warp_at, WarpConfig};
use dtits_core::{validate_dataset, ChannelStats, Dataset, HyperParams, TimeSeries};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{parse_list, Config};
use crate::error::{CliError, Result};
use crate::{io, svg};

#[derive(Debug, Parser)]
#[command(name = "dtits", version, about = "Deformable prototypes for classifying and clustering multivariate time series")]
pub struct Cli {
    /// Worker threads for parallel evaluation (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cloud masking, gap filling and per-channel normalization.
    Preprocess(PreprocessArgs),
    /// Generate a synthetic labeled train/test pair.
    Synth(SynthArgs),
    /// Train prototypes and the transformation predictor.
    Train(TrainArgs),
    /// Assign every series to its best-reconstructing prototype.
    Cluster(ClusterArgs),
    /// Predict class labels with a trained checkpoint.
    Predict(PredictArgs),
    /// Nearest-centroid and nearest-neighbor baselines.
    Baseline(BaselineArgs),
    /// Overall and mean accuracy of a prediction file.
    Eval(EvalArgs),
    /// Post-process label or instance rasters.
    Aggregate(AggregateArgs),
    /// Write a time-warp and offset example as CSV and SVG.
    WarpDemo(WarpDemoArgs),
    /// Compare analytic gradients with finite differences.
    GradCheck(GradCheckArgs),
    /// Train unsupervised models for several K and report accuracy.
    SweepK(SweepKArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Sup,
    Unsup,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Sup => Mode::Supervised,
            ModeArg::Unsup => Mode::Unsupervised,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GapFillArg {
    None,
    Previous,
    Movavg,
    Gaussian,
}

impl From<GapFillArg> for GapFill {
    fn from(g: GapFillArg) -> Self {
        match g {
            GapFillArg::None => GapFill::None,
            GapFillArg::Previous => GapFill::Previous,
            GapFillArg::Movavg => GapFill::MovingAverage,
            GapFillArg::Gaussian => GapFill::Gaussian,
        }
    }
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub gap_fill: Option<GapFillArg>,
    /// Gaussian / moving-average width in time steps.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Channel (0-based) whose values above the threshold mark clouds.
    #[arg(long)]
    pub cloud_band: Option<usize>,
    #[arg(long)]
    pub cloud_threshold: Option<f64>,
    /// Standardize channels with mask-weighted statistics.
    #[arg(long)]
    pub normalize: bool,
    /// Apply statistics from this file instead of computing them.
    #[arg(long)]
    pub stats_in: Option<PathBuf>,
    /// Write the statistics used for normalization.
    #[arg(long)]
    pub stats_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub len: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub shift_range: Option<f64>,
    #[arg(long)]
    pub offset_range: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub missing_rate: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub test_shift_bias: Option<f64>,
    #[arg(long)]
    pub phase_spread: Option<f64>,
    #[arg(long)]
    pub max_frequency: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the binary dataset format.
    #[arg(long)]
    pub binary: bool,
}

/// Options shared by `train` and `sweep-k`.
#[derive(Debug, Args, Clone, Default)]
pub struct TrainOpts {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Encoder filters per conv block, e.g. 128,256,128.
    #[arg(long)]
    pub filters: Option<String>,
    #[arg(long)]
    pub landmarks: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub validation_interval: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Last curriculum stage: prototypes, warp, offset or contrastive.
    #[arg(long)]
    pub last_stage: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub warp_scale: Option<f64>,
    /// Prototype initialization: ncc or kmeans.
    #[arg(long)]
    pub init: Option<String>,
    /// Fraction of the training file held out for validation when no
    /// validation file is given.
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Number of prototypes (unsupervised).
    #[arg(long)]
    pub k: Option<usize>,
    #[command(flatten)]
    pub opts: TrainOpts,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SelectionArg {
    Closest,
    Random,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Labeled data used to name clusters of an unsupervised checkpoint.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Label each cluster from only this many members.
    #[arg(long)]
    pub limited: Option<usize>,
    #[arg(long, value_enum, default_value = "closest")]
    pub selection: SelectionArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineMethod {
    Ncc,
    #[value(name = "1nn")]
    Nn,
    #[value(name = "1nn-dtw")]
    NnDtw,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long, value_enum)]
    pub method: BaselineMethod,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Fraction of training series kept for nearest-neighbor search.
    #[arg(long, default_value_t = 1.0)]
    pub train_subsample: f64,
    /// DTW band half-width.
    #[arg(long)]
    pub band: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction CSV (index,label).
    #[arg(long)]
    pub predictions: PathBuf,
    /// Labeled dataset holding the reference labels.
    #[arg(long)]
    pub truth: PathBuf,
    /// Write the confusion matrix as CSV.
    #[arg(long)]
    pub confusion: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AggregateMethod {
    Instances,
    Window,
    Intersect,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    #[arg(long, value_enum)]
    pub method: AggregateMethod,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub instances: Option<PathBuf>,
    /// Per-frame instance rasters (repeat the flag or separate with commas).
    #[arg(long, value_delimiter = ',')]
    pub frames: Vec<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct WarpDemoArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 365)]
    pub len: usize,
    /// Landmark shifts in time steps.
    #[arg(long, default_value = "-7,0,7", allow_hyphen_values = true)]
    pub shifts: String,
    #[arg(long, default_value_t = 0.3, allow_hyphen_values = true)]
    pub offset: f64,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 100)]
    pub configs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 40)]
    pub max_len: usize,
    /// Coordinates probed per tensor.
    #[arg(long, default_value_t = 8)]
    pub per_input: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct SweepKArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, default_value = "4,8,16,32")]
    pub ks: String,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub opts: TrainOpts,
}

/// Parses `args` and runs the command; returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    if cli.threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Preprocess(a) => preprocess(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Cluster(a) => cluster(a),
        Command::Predict(a) => predict(a),
        Command::Baseline(a) => baseline(a),
        Command::Eval(a) => eval(a),
        Command::Aggregate(a) => aggregate(a),
        Command::WarpDemo(a) => warp_demo(a),
        Command::GradCheck(a) => grad_check(a),
        Command::SweepK(a) => sweep_k(a),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

/// Config echo written next to a single output file.
fn echo_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "output".into());
    output.with_file_name(format!("{stem}.config.txt"))
}

/// Reads a dataset and rejects it if any invariant is broken.
pub fn read_valid(path: &Path) -> Result<Dataset> {
    let d = io::read_dataset(path)?;
    let v = validate_dataset(&d);
    if !v.is_empty() {
        let shown: Vec<String> = v.iter().take(5).map(ToString::to_string).collect();
        let more = if v.len() > 5 { format!(" (+{} more)", v.len() - 5) } else { String::new() };
        return Err(CliError::Data(format!("{}: {}{more}", path.display(), shown.join("; "))));
    }
    Ok(d)
}

fn require_labels(d: &Dataset, path: &Path) -> Result<Vec<usize>> {
    d.labels.clone().ok_or_else(|| CliError::Data(format!("{}: dataset has no labels", path.display())))
}

const PREPROCESS_KEYS: &[&str] = &["gap_fill", "sigma", "cloud_band", "cloud_threshold", "normalize"];

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    cfg.check_keys(PREPROCESS_KEYS)?;
    cfg.overlay("gap_fill", a.gap_fill.map(|g| g.to_possible_value().expect("no skipped variants").get_name().to_string()));
    cfg.overlay("sigma", a.sigma);
    cfg.overlay("cloud_band", a.cloud_band);
    cfg.overlay("cloud_threshold", a.cloud_threshold);
    if a.normalize {
        cfg.set("normalize", true);
    }
    let gap: GapFill = cfg.get_or("gap_fill", GapFill::None)?;
    let sigma: f64 = cfg.get_or("sigma", 7.0)?;
    let mut d = read_valid(&a.input)?;
    if let Some(band) = cfg.get::<usize>("cloud_band")? {
        let thr: f64 = cfg.get("cloud_threshold")?.ok_or_else(|| CliError::Usage("--cloud-band needs --cloud-threshold".into()))?;
        for i in 0..d.len() {
            d.masks[i] = threshold_clouds(&d.series[i], &d.masks[i], band, thr)?;
        }
        if let Some(i) = d.masks.iter().position(|m| !(m.mass() > 0.0)) {
            return Err(CliError::Data(format!("series {}: every stamp is masked after cloud thresholding", i + 1)));
        }
    }
    d = gap_fill_dataset(&d, gap, sigma)?;
    if cfg.get_or("normalize", false)? || a.stats_in.is_some() {
        let stats = match &a.stats_in {
            Some(p) => read_stats(p)?,
            None => {
                let (s, warnings) = channel_stats(&d)?;
                warnings.iter().for_each(|w| warn!("{w}"));
                s
            }
        };
        if let Some(p) = &a.stats_out {
            write_stats(p, &stats)?;
        }
        d = normalize(&d, &stats);
    }
    io::write_dataset(&a.output, &d)?;
    io::write_text(&echo_path(&a.output), &cfg.render())?;
    println!("wrote {} series to {}", d.len(), a.output.display());
    Ok(())
}

fn write_stats(path: &Path, s: &ChannelStats) -> Result<()> {
    let j = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    io::write_text(path, &format!("mean={}\nstd={}\n", j(&s.mean), j(&s.std)))
}

fn read_stats(path: &Path) -> Result<ChannelStats> {
    let c = Config::load(path)?;
    let mean: Vec<f64> = c.get_list("mean")?.ok_or_else(|| CliError::Data(format!("{}: missing mean", path.display())))?;
    let std: Vec<f64> = c.get_list("std")?.ok_or_else(|| CliError::Data(format!("{}: missing std", path.display())))?;
    if mean.len() != std.len() || std.iter().any(|s| !(*s > 0.0)) {
        return Err(CliError::Data(format!("{}: inconsistent statistics", path.display())));
    }
    Ok(ChannelStats { mean, std })
}

const SYNTH_KEYS: &[&str] = &[
    "classes", "n_train", "n_test", "len", "channels", "shift_range", "offset_range", "noise", "missing_rate",
    "test_shift_bias", "phase_spread", "max_frequency", "seed",
];

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    cfg.check_keys(SYNTH_KEYS)?;
    cfg.overlay("classes", a.classes);
    cfg.overlay("n_train", a.n_train);
    cfg.overlay("n_test", a.n_test);
    cfg.overlay("len", a.len);
    cfg.overlay("channels", a.channels);
    cfg.overlay("shift_range", a.shift_range);
    cfg.overlay("offset_range", a.offset_range);
    cfg.overlay("noise", a.noise);
    cfg.overlay("missing_rate", a.missing_rate);
    cfg.overlay("test_shift_bias", a.test_shift_bias);
    cfg.overlay("phase_spread", a.phase_spread);
    cfg.overlay("max_frequency", a.max_frequency);
    cfg.overlay("seed", a.seed);
    let d = SynthConfig::default();
    let sc = SynthConfig {
        classes: cfg.get_or("classes", d.classes)?,
        n_train: cfg.get_or("n_train", d.n_train)?,
        n_test: cfg.get_or("n_test", d.n_test)?,
        len: cfg.get_or("len", d.len)?,
        channels: cfg.get_or("channels", d.channels)?,
        shift_range: cfg.get_or("shift_range", d.shift_range)?,
        offset_range: cfg.get_or("offset_range", d.offset_range)?,
        noise_sd: cfg.get_or("noise", d.noise_sd)?,
        missing_rate: cfg.get_or("missing_rate", d.missing_rate)?,
        test_shift_bias: cfg.get_or("test_shift_bias", d.test_shift_bias)?,
        phase_spread: cfg.get_or("phase_spread", d.phase_spread)?,
        max_frequency: cfg.get_or("max_frequency", d.max_frequency)?,
        seed: cfg.get_or("seed", d.seed)?,
        ..d
    };
    sc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let data = generate(&sc)?;
    let ext = if a.binary { "bin" } else { "txt" };
    io::write_dataset(&a.out_dir.join(format!("train.{ext}")), &data.train)?;
    io::write_dataset(&a.out_dir.join(format!("test.{ext}")), &data.test)?;
    write_series_csv(&a.out_dir.join("templates.csv"), "class", &data.templates)?;
    io::write_text(&a.out_dir.join("templates.svg"), &series_svg("class templates", &data.templates))?;
    io::write_text(&a.out_dir.join("config.txt"), &cfg.render())?;
    println!("wrote {} train and {} test series to {}", data.train.len(), data.test.len(), a.out_dir.display());
    Ok(())
}

/// Long-format CSV `<key>,t,c1..cC` with 1-based keys and times.
fn write_series_csv(path: &Path, key: &str, series: &[TimeSeries]) -> Result<()> {
    let ch = series.first().map_or(0, TimeSeries::channels);
    let mut s = format!("{key},t");
    for c in 1..=ch {
        let _ = write!(s, ",c{c}");
    }
    s.push('\n');
    for (k, x) in series.iter().enumerate() {
        for t in 0..x.len() {
            let _ = write!(s, "{},{}", k + 1, t + 1);
            for v in x.row(t) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    io::write_text(path, &s)
}

/// First channel of every series as one polyline.
fn series_svg(title: &str, series: &[TimeSeries]) -> String {
    let lines: Vec<(String, Vec<(f64, f64)>)> = series
        .iter()
        .enumerate()
        .map(|(k, x)| (format!("{} {}", title, k + 1), (0..x.len()).map(|t| ((t + 1) as f64, x.get(t, 0))).collect()))
        .collect();
    svg::polylines(title, &lines)
}

const TRAIN_KEYS: &[&str] = &[
    "mode", "k", "seed", "learning_rate", "batch_size", "filters", "landmarks", "patience", "validation_interval",
    "max_steps", "last_stage", "lambda", "mu", "nu", "warp_scale", "init", "val_fraction", "cont_normalized",
    "kmeans_iters", "eval_chunk",
];

fn overlay_train_opts(cfg: &mut Config, o: &TrainOpts) {
    cfg.overlay("seed", o.seed);
    cfg.overlay("learning_rate", o.learning_rate);
    cfg.overlay("batch_size", o.batch_size);
    cfg.overlay("filters", o.filters.clone());
    cfg.overlay("landmarks", o.landmarks);
    cfg.overlay("patience", o.patience);
    cfg.overlay("validation_interval", o.validation_interval);
    cfg.overlay("max_steps", o.max_steps);
    cfg.overlay("last_stage", o.last_stage.clone());
    cfg.overlay("lambda", o.lambda);
    cfg.overlay("mu", o.mu);
    cfg.overlay("nu", o.nu);
    cfg.overlay("warp_scale", o.warp_scale);
    cfg.overlay("init", o.init.clone());
    cfg.overlay("val_fraction", o.val_fraction);
}

/// Training configuration from config values, for series of length `len`.
pub fn train_config(cfg: &Config, len: usize) -> Result<TrainConfig> {
    let mode: Mode = cfg.get_or("mode", Mode::Supervised)?;
    let d = HyperParams::for_length(len);
    let hp = HyperParams {
        lambda: cfg.get_or("lambda", d.lambda)?,
        mu: cfg.get_or("mu", d.mu)?,
        nu: cfg.get_or("nu", d.nu)?,
        learning_rate: cfg.get_or("learning_rate", d.learning_rate)?,
        landmarks: cfg.get_or("landmarks", d.landmarks)?,
        prototypes: cfg.get_or("k", d.prototypes)?,
        warp_scale: cfg.get_or("warp_scale", d.warp_scale)?,
        patience: cfg.get_or("patience", d.patience)?,
        batch_size: cfg.get_or("batch_size", d.batch_size)?,
        validation_interval: cfg.get_or("validation_interval", d.validation_interval)?,
        cont_normalized: cfg.get_or("cont_normalized", d.cont_normalized)?,
        max_steps: cfg.get_or("max_steps", d.max_steps)?,
        ..d
    };
    hp.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut tc = TrainConfig::new(mode, hp);
    if let Some(f) = cfg.get_list::<usize>("filters")? {
        tc.filters = f.try_into().map_err(|_| CliError::Usage("filters needs exactly three values".into()))?;
    }
    tc.seed = cfg.get_or("seed", 0)?;
    tc.last_stage = cfg.get_or("last_stage", Stage::Contrastive)?;
    if let Some(init) = cfg.get::<InitMode>("init")? {
        tc.init = init;
    }
    tc.kmeans_iters = cfg.get_or("kmeans_iters", tc.kmeans_iters)?;
    tc.eval_chunk = cfg.get_or("eval_chunk", tc.eval_chunk)?;
    Ok(tc)
}

/// Splits off a deterministic validation subset.
fn split_validation(d: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CliError::Usage(format!("val_fraction must lie in (0, 1), got {fraction}")));
    }
    if d.len() < 2 {
        return Err(CliError::Data("need at least two series to hold out a validation split".into()));
    }
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7a11));
    let n_val = ((d.len() as f64 * fraction).round() as usize).clamp(1, d.len() - 1);
    let (val, train) = idx.split_at(n_val);
    let mut train = train.to_vec();
    let mut val = val.to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok((d.subset(&train), d.subset(&val)))
}

fn load_train_val(train: &Path, val: &Option<PathBuf>, cfg: &Config) -> Result<(Dataset, Dataset)> {
    let d = read_valid(train)?;
    match val {
        Some(p) => {
            let v = read_valid(p)?;
            if v.shape() != d.shape() {
                return Err(CliError::Data("train and validation series differ in shape".into()));
            }
            let classes = d.classes.max(v.classes);
            Ok((d.with_classes(classes), v.with_classes(classes)))
        }
        None => split_validation(&d, cfg.get_or("val_fraction", 0.1)?, cfg.get_or("seed", 0)?),
    }
}

fn run_training(tc: TrainConfig, train: &Dataset, val: &Dataset, log_path: &Path) -> Result<TrainRun> {
    let mut log = String::from("step,stage,train_loss,metric,val_rec,improved,patience_left\n");
    let run = TrainRun::init(tc, train)?;
    let metric_name = if run.config.mode == Mode::Supervised { "val MA" } else { "val L_rec" };
    let result = train_curriculum(run, train, val, |r| {
        let _ = writeln!(
            log,
            "{},{},{},{},{},{},{}",
            r.step,
            r.stage.name(),
            r.train_loss,
            r.metric,
            r.val_rec,
            u8::from(r.improved),
            r.patience_left
        );
        info!("step {} [{}] {metric_name} {:.5} (train loss {:.5})", r.step, r.stage.name(), r.metric, r.train_loss);
    });
    io::write_text(log_path, &log)?;
    Ok(result?)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.opts.config)?;
    cfg.check_keys(TRAIN_KEYS)?;
    cfg.overlay("mode", a.mode.map(|m| if m == ModeArg::Sup { "sup" } else { "unsup" }));
    cfg.overlay("k", a.k);
    overlay_train_opts(&mut cfg, &a.opts);
    let (train, val) = load_train_val(&a.train, &a.val, &cfg)?;
    let (len, _) = train.shape().ok_or(CliError::Data("empty training set".into()))?;
    let tc = train_config(&cfg, len)?;
    if tc.mode == Mode::Supervised {
        require_labels(&train, &a.train)?;
        require_labels(&val, a.val.as_deref().unwrap_or(&a.train))?;
    }
    io::write_text(&a.out_dir.join("config.txt"), &cfg.render())?;
    let mode = tc.mode;
    let run = run_training(tc, &train, &val, &a.out_dir.join("log.csv"))?;
    let class_map = match (&train.labels, mode) {
        (Some(labels), Mode::Unsupervised) => {
            let (assign, _) = run.assign(&train)?;
            Some(label_clusters_majority(&assign, labels, run.model.prototypes(), train.classes)?)
        }
        _ => None,
    };
    let ck = Checkpoint { model: run.model.clone(), mode, stage: run.stage, class_map };
    checkpoint::save(&a.out_dir.join("model.ckpt"), &ck)?;
    let protos: Vec<TimeSeries> = (0..run.model.prototypes()).map(|k| run.model.bank.prototype(k)).collect();
    write_series_csv(&a.out_dir.join("prototypes.csv"), "prototype", &protos)?;
    io::write_text(&a.out_dir.join("prototypes.svg"), &series_svg("prototype", &protos))?;
    let best = run.stage_results.iter().find(|r| r.stage == run.stage).map_or(f64::NAN, |r| r.metric);
    println!(
        "trained {} prototypes for {} steps; best stage {} with {} {:.4}",
        run.model.prototypes(),
        run.steps,
        run.stage.name(),
        if mode == Mode::Supervised { "val MA" } else { "val L_rec" },
        best
    );
    println!("wrote {}", a.out_dir.join("model.ckpt").display());
    Ok(())
}

fn check_shape(ck: &Checkpoint, d: &Dataset, path: &Path) -> Result<()> {
    let want = (ck.model.bank.len(), ck.model.bank.channels());
    if d.shape() != Some(want) {
        return Err(CliError::Data(format!("{}: series shape {:?} does not match the checkpoint {want:?}", path.display(), d.shape())));
    }
    Ok(())
}

fn cluster(a: ClusterArgs) -> Result<()> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let d = read_valid(&a.input)?;
    check_shape(&ck, &d, &a.input)?;
    let (assign, err) = assign_with(&ck.model, ck.stage, &d, 512)?;
    let mut s = String::from("index,cluster,error\n");
    for (i, (k, e)) in assign.iter().zip(&err).enumerate() {
        let _ = writeln!(s, "{},{},{}", i + 1, k + 1, e);
    }
    io::write_text(&a.output, &s)?;
    let mut counts = vec![0usize; ck.model.prototypes()];
    assign.iter().for_each(|&k| counts[k] += 1);
    println!("cluster,size");
    for (k, n) in counts.iter().enumerate() {
        println!("{},{}", k + 1, n);
    }
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let d = read_valid(&a.input)?;
    check_shape(&ck, &d, &a.input)?;
    let (assign, _) = assign_with(&ck.model, ck.stage, &d, 512)?;
    let pred = match ck.mode {
        Mode::Supervised => assign,
        Mode::Unsupervised => {
            let map = match (&a.train, &ck.class_map, a.limited) {
                (Some(p), _, _) => cluster_map(&ck.model, ck.stage, p, a.limited, a.selection, a.seed)?,
                (None, Some(m), None) => m.clone(),
                (None, _, Some(_)) => return Err(CliError::Usage("--limited needs --train".into())),
                (None, None, None) => return Err(CliError::Usage("unsupervised checkpoint without a class map: pass --train".into())),
            };
            map_clusters(&assign, &map)
        }
    };
    io::write_predictions(&a.output, &pred)?;
    println!("wrote {} predictions to {}", pred.len(), a.output.display());
    Ok(())
}

fn cluster_map(model: &Model, stage: Stage, train_path: &Path, limited: Option<usize>, sel: SelectionArg, seed: u64) -> Result<Vec<usize>> {
    let train = read_valid(train_path)?;
    let labels = require_labels(&train, train_path)?;
    let (assign, err) = assign_with(model, stage, &train, 512)?;
    let k = model.prototypes();
    Ok(match limited {
        None => label_clusters_majority(&assign, &labels, k, train.classes)?,
        Some(n) => {
            let s = if sel == SelectionArg::Closest { Selection::Closest } else { Selection::Random };
            label_clusters_limited(&assign, &err, &labels, k, train.classes, n, s, seed)?
        }
    })
}

fn print_metrics(pred: &[usize], truth: &[usize], classes: usize) -> Result<dtits_core::ConfusionCounts> {
    let cm = confusion(pred, truth, classes)?;
    let oa = cm.correct as f64 / cm.total as f64;
    let ma = mean_accuracy_of(&cm)?;
    println!("metric,value");
    println!("OA,{oa:.4}");
    println!("MA,{ma:.4}");
    for c in 0..classes {
        let n = cm.support(c);
        if n > 0 {
            println!("acc_class_{},{:.4}", c + 1, cm.true_positives(c) as f64 / n as f64);
        }
    }
    Ok(cm)
}

fn baseline(a: BaselineArgs) -> Result<()> {
    let train = read_valid(&a.train)?;
    let test = read_valid(&a.test)?;
    if train.shape() != test.shape() && a.method != BaselineMethod::NnDtw {
        return Err(CliError::Data("train and test series differ in shape".into()));
    }
    require_labels(&train, &a.train)?;
    let classes = train.classes.max(test.classes);
    let pred = match a.method {
        BaselineMethod::Ncc => ncc_predict_all(&ncc_fit(&train.clone().with_classes(classes))?, &test)?,
        BaselineMethod::Nn | BaselineMethod::NnDtw => {
            if !(a.train_subsample > 0.0 && a.train_subsample <= 1.0) {
                return Err(CliError::Usage("--train-subsample must lie in (0, 1]".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let keep: Vec<usize> = (0..train.len()).filter(|_| rng.random_bool(a.train_subsample)).collect();
            if keep.is_empty() {
                return Err(CliError::Data("train subsample is empty".into()));
            }
            let sub = train.subset(&keep);
            let metric = if a.method == BaselineMethod::Nn { Metric::Euclidean } else { Metric::Dtw { band: a.band } };
            test.series.iter().zip(&test.masks).map(|(x, m)| knn1_predict(&sub, x, m, metric)).collect::<dtits_core::Result<Vec<_>>>()?
        }
    };
    if let Some(p) = &a.output {
        io::write_predictions(p, &pred)?;
    }
    match &test.labels {
        Some(truth) => {
            print_metrics(&pred, truth, classes)?;
        }
        None => println!("predicted {} series (test set unlabeled)", pred.len()),
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let pred = io::read_predictions(&a.predictions)?;
    let truth_d = io::read_dataset(&a.truth)?;
    let truth = require_labels(&truth_d, &a.truth)?;
    if pred.len() != truth.len() {
        return Err(CliError::Data(format!("{} predictions for {} labeled series", pred.len(), truth.len())));
    }
    let classes = truth_d.classes.max(pred.iter().max().map_or(0, |m| m + 1));
    let cm = print_metrics(&pred, &truth, classes)?;
    if let Some(p) = &a.confusion {
        let mut s = String::from("truth\\pred");
        for c in 1..=classes {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for (t, row) in cm.matrix.iter().enumerate() {
            let _ = write!(s, "{}", t + 1);
            for n in row {
                let _ = write!(s, ",{n}");
            }
            s.push('\n');
        }
        io::write_text(p, &s)?;
    }
    Ok(())
}

fn aggregate(a: AggregateArgs) -> Result<()> {
    let need = |p: &Option<PathBuf>, flag: &str| p.clone().ok_or_else(|| CliError::Usage(format!("--method needs --{flag}")));
    match a.method {
        AggregateMethod::Instances => {
            let labels = io::read_label_raster(&need(&a.labels, "labels")?)?;
            let inst = io::read_instance_raster(&need(&a.instances, "instances")?)?;
            io::write_raster(&a.output, &aggregate_instances(&labels, &inst)?)?;
        }
        AggregateMethod::Window => {
            let labels = io::read_label_raster(&need(&a.labels, "labels")?)?;
            let out = aggregate_sliding_window(&labels, a.window).map_err(|e| CliError::Usage(e.to_string()))?;
            io::write_raster(&a.output, &out)?;
        }
        AggregateMethod::Intersect => {
            if a.frames.is_empty() {
                return Err(CliError::Usage("--method intersect needs --frames".into()));
            }
            let frames = a.frames.iter().map(|p| io::read_instance_raster(p)).collect::<Result<Vec<_>>>()?;
            let fine = intersect_instance_maps(&frames)?;
            io::write_raster(&a.output, &filter_and_assign(&fine, &frames)?)?;
        }
    }
    println!("wrote {}", a.output.display());
    Ok(())
}

/// Smooth single-channel curve with one seasonal peak, for the demo.
fn demo_prototype(len: usize) -> TimeSeries {
    let vals = (0..len)
        .map(|t| {
            let u = t as f64 / (len - 1).max(1) as f64;
            0.2 + 0.6 * (-((u - 0.5) / 0.15).powi(2)).exp()
        })
        .collect();
    TimeSeries::univariate(vals).expect("len >= 2 checked by the caller")
}

fn warp_demo(a: WarpDemoArgs) -> Result<()> {
    let shifts: Vec<f64> = parse_list(&a.shifts).map_err(CliError::Usage)?;
    if a.len < 2 || shifts.len() < 2 {
        return Err(CliError::Usage("warp-demo needs len >= 2 and at least two shifts".into()));
    }
    let cfg = WarpConfig::uniform(a.len, shifts.len())?;
    let h = fit_warp(&cfg, &shifts)?;
    let proto = demo_prototype(a.len);
    let positions: Vec<f64> = (1..=a.len).map(|t| h.eval(t as f64)).collect();
    let warped = warp_at(&proto, &positions);
    let shifted = apply_offset(&proto, &[a.offset]);
    let mut warp_csv = String::from("t,h\n");
    let mut curves = String::from("t,prototype,warped,offset\n");
    for t in 0..a.len {
        let _ = writeln!(warp_csv, "{},{}", t + 1, positions[t]);
        let _ = writeln!(curves, "{},{},{},{}", t + 1, proto.get(t, 0), warped.get(t, 0), shifted.get(t, 0));
    }
    let mut lm = String::from("landmark,t,shift,h\n");
    for (m, (&t, &s)) in cfg.landmarks().iter().zip(&shifts).enumerate() {
        let _ = writeln!(lm, "{},{},{},{}", m + 1, t, s, h.eval(t));
    }
    io::write_text(&a.out_dir.join("warp.csv"), &warp_csv)?;
    io::write_text(&a.out_dir.join("landmarks.csv"), &lm)?;
    io::write_text(&a.out_dir.join("curves.csv"), &curves)?;
    let pts = |s: &TimeSeries| (0..a.len).map(|t| ((t + 1) as f64, s.get(t, 0))).collect::<Vec<_>>();
    let plot = svg::polylines(
        "time warp and offset",
        &[("prototype".into(), pts(&proto)), ("warped".into(), pts(&warped)), ("offset".into(), pts(&shifted))],
    );
    io::write_text(&a.out_dir.join("curves.svg"), &plot)?;
    let hplot = svg::polylines("warp h(t) - t", &[("h(t) - t".into(), positions.iter().enumerate().map(|(t, p)| ((t + 1) as f64, p - (t + 1) as f64)).collect())]);
    io::write_text(&a.out_dir.join("warp.svg"), &hplot)?;
    let mut echo = Config::default();
    echo.set("len", a.len);
    echo.set("shifts", &a.shifts);
    echo.set("offset", a.offset);
    io::write_text(&a.out_dir.join("config.txt"), &echo.render())?;
    println!("landmark,t,shift,h(t)-t");
    for (m, (&t, &s)) in cfg.landmarks().iter().zip(&shifts).enumerate() {
        println!("{},{},{},{}", m + 1, t, s, h.eval(t) - t);
    }
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut worst: f64 = 0.0;
    let (mut checked, mut skipped) = (0, 0);
    for i in 0..a.configs {
        let dims = CheckDims::random(&mut rng, a.max_len);
        for mode in [Mode::Unsupervised, Mode::Supervised] {
            let r = gradient_check(dims, mode, a.seed.wrapping_mul(1000).wrapping_add(i as u64), a.per_input)?;
            worst = worst.max(r.max_rel_err);
            checked += r.checked;
            skipped += r.skipped_kinks;
        }
    }
    println!("configs,checked,skipped_kinks,max_rel_err");
    println!("{},{checked},{skipped},{worst:.3e}", a.configs);
    if worst >= a.tolerance {
        return Err(CliError::Data(format!("gradient mismatch: max relative error {worst:.3e} >= {}", a.tolerance)));
    }
    Ok(())
}

fn sweep_k(a: SweepKArgs) -> Result<()> {
    let ks: Vec<usize> = parse_list(&a.ks).map_err(CliError::Usage)?;
    let mut cfg = load_config(&a.opts.config)?;
    cfg.check_keys(TRAIN_KEYS)?;
    overlay_train_opts(&mut cfg, &a.opts);
    cfg.set("mode", "unsup");
    let (train, val) = load_train_val(&a.train, &a.val, &cfg)?;
    let test = read_valid(&a.test)?;
    let labels = require_labels(&train, &a.train)?;
    let truth = require_labels(&test, &a.test)?;
    let classes = train.classes.max(test.classes);
    let (len, _) = train.shape().ok_or(CliError::Data("empty training set".into()))?;
    io::write_text(&a.out_dir.join("config.txt"), &(cfg.render() + &format!("ks={}\n", a.ks)))?;
    let mut table = String::from("k,parameters,val_rec,test_oa,test_ma\n");
    println!("k,parameters,val_rec,test_oa,test_ma");
    for k in ks {
        let mut c = cfg.clone();
        c.set("k", k);
        let tc = train_config(&c, len)?;
        let run = run_training(tc, &train, &val, &a.out_dir.join(format!("log_k{k}.csv")))?;
        let (assign, _) = run.assign(&train)?;
        let map = label_clusters_majority(&assign, &labels, k, classes)?;
        let (ta, _) = run.assign(&test)?;
        let pred = map_clusters(&ta, &map);
        let cm = confusion(&pred, &truth, classes)?;
        let params = run.model.bank.data().len() + run.model.encoder.trainable_sizes().iter().sum::<usize>();
        let rec = run.stage_results.iter().find(|r| r.stage == run.stage).map_or(f64::NAN, |r| r.val_rec);
        let line = format!("{k},{params},{rec:.6},{:.4},{:.4}", cm.correct as f64 / cm.total as f64, mean_accuracy_of(&cm)?);
        println!("{line}");
        table += &line;
        table.push('\n');
    }
    io::write_text(&a.out_dir.join("sweep.csv"), &table)
}
