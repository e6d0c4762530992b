//! Subcommand argument tables, config merging, and the command bodies.
//!
//! Each subcommand follows the same shape: a serde config struct whose keys
//! name the flags exactly, a clap args struct with one optional flag per
//! key, and a body that merges file and flags, runs the work, and writes a
//! `run_manifest.json` into the output directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use wmhseg_core::arch::{
    self, FusionMode, InjectionPoint, Network, NetworkSpec, DEFAULT_ALPHA, DEFAULT_ALPHA_SWEEP,
};
use wmhseg_core::error::Error as CoreError;
use wmhseg_core::eval::{self, EvalReport, DEFAULT_ABLATION_FRACTIONS};
use wmhseg_core::inference;
use wmhseg_core::locfeat::{self, DEFAULT_PRIOR_SIGMA};
use wmhseg_core::sampler::{build_balanced_dataset, PreparedCase};
use wmhseg_core::synth::{generate_cohort, SynthConfig};
use wmhseg_core::trainer::{self, Precision, TrainConfig, TrainOutcome};
use wmhseg_core::volume::{
    load_case, save_case, write_f32_volume, write_manifest, ManifestEntry, Split,
    NUM_LOCATION_FEATURES,
};

use crate::support::{
    create_out_dir, evaluate_cases, load_config, override_field, parse_split, probability_map,
    tuned_threshold, write_run_manifest, Cohort,
};
use crate::{Cli, Command};

pub use crate::support::UsageError;

fn require<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| {
        UsageError(format!(
            "missing required flag --{flag} (set it on the command line or in --config)"
        ))
        .into()
    })
}

fn array<const N: usize, T: Copy + fmt::Debug>(flag: &str, v: &[T]) -> Result<[T; N]> {
    <[T; N]>::try_from(v).map_err(|_| {
        UsageError(format!("--{flag} takes exactly {N} comma-separated values, got {v:?}")).into()
    })
}

/// Cap the global worker pool when `--threads` was given. Results are
/// independent of the thread count; this only bounds parallelism.
fn init_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("initializing the worker thread pool")?;
    }
    Ok(())
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth_cmd(a),
        Command::Features(a) => features_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Segment(a) => segment_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Compare(a) => compare_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    }
}

// ---------------------------------------------------------------------------
// synth

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthCmdConfig {
    pub cases: usize,
    pub dims: [usize; 3],
    pub voxel_size_mm: [f64; 3],
    pub lesion_contrast: [f64; 2],
    pub lesions_per_case: [usize; 2],
    pub decoy_rate: f64,
    pub noise_sigma: f64,
    pub split_fractions: [f64; 3],
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl Default for SynthCmdConfig {
    fn default() -> Self {
        let c = SynthConfig::default();
        SynthCmdConfig {
            cases: c.cases,
            dims: c.dims,
            voxel_size_mm: c.voxel_size_mm,
            lesion_contrast: c.lesion_contrast,
            lesions_per_case: c.lesions_per_case,
            decoy_rate: c.decoy_rate,
            noise_sigma: c.noise_sigma,
            split_fractions: c.split_fractions,
            seed: c.seed,
            out: None,
            threads: None,
        }
    }
}

impl SynthCmdConfig {
    fn to_core(&self) -> SynthConfig {
        SynthConfig {
            cases: self.cases,
            dims: self.dims,
            voxel_size_mm: self.voxel_size_mm,
            lesion_contrast: self.lesion_contrast,
            lesions_per_case: self.lesions_per_case,
            decoy_rate: self.decoy_rate,
            noise_sigma: self.noise_sigma,
            split_fractions: self.split_fractions,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
pub struct SynthArgs {
    /// JSON config file; flags given here override its values
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Number of cases to generate
    #[arg(long)]
    pub cases: Option<usize>,
    /// Volume dimensions in voxels, as X,Y,Z
    #[arg(long, value_delimiter = ',', value_name = "X,Y,Z")]
    pub dims: Option<Vec<usize>>,
    /// Voxel size in millimetres, as X,Y,Z
    #[arg(long, value_delimiter = ',', value_name = "X,Y,Z")]
    pub voxel_size_mm: Option<Vec<f64>>,
    /// Range of FLAIR contrast added inside a blob, as LO,HI
    #[arg(long, value_delimiter = ',', value_name = "LO,HI")]
    pub lesion_contrast: Option<Vec<f64>>,
    /// Inclusive range of lesion blobs per case, as LO,HI
    #[arg(long, value_delimiter = ',', value_name = "LO,HI")]
    pub lesions_per_case: Option<Vec<usize>>,
    /// Decoy blobs per lesion blob
    #[arg(long)]
    pub decoy_rate: Option<f64>,
    /// Standard deviation of the additive Gaussian intensity noise
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Train, validation, test fractions, as A,B,C summing to 1
    #[arg(long, value_delimiter = ',', value_name = "A,B,C")]
    pub split_fractions: Option<Vec<f64>>,
    /// Root seed; identical seeds reproduce the cohort bit-exactly
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output cohort directory
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Cap on worker threads (results do not depend on it)
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let mut cfg: SynthCmdConfig = load_config(a.config.as_deref())?;
    override_field(&mut cfg.cases, a.cases);
    if let Some(v) = a.dims {
        cfg.dims = array("dims", &v)?;
    }
    if let Some(v) = a.voxel_size_mm {
        cfg.voxel_size_mm = array("voxel-size-mm", &v)?;
    }
    if let Some(v) = a.lesion_contrast {
        cfg.lesion_contrast = array("lesion-contrast", &v)?;
    }
    if let Some(v) = a.lesions_per_case {
        cfg.lesions_per_case = array("lesions-per-case", &v)?;
    }
    override_field(&mut cfg.decoy_rate, a.decoy_rate);
    override_field(&mut cfg.noise_sigma, a.noise_sigma);
    if let Some(v) = a.split_fractions {
        cfg.split_fractions = array("split-fractions", &v)?;
    }
    override_field(&mut cfg.seed, a.seed);
    override_field(&mut cfg.out, a.out.map(Some));
    override_field(&mut cfg.threads, a.threads.map(Some));
    let out = require(cfg.out.clone(), "out")?;
    init_threads(cfg.threads)?;

    let started = Instant::now();
    create_out_dir(&out)?;
    let entries = generate_cohort(&cfg.to_core(), &out)?;
    let count = |s: Split| entries.iter().filter(|e| e.split == s).count();
    println!(
        "generated {} cases into {} ({} train / {} val / {} test)",
        entries.len(),
        out.display(),
        count(Split::Train),
        count(Split::Validation),
        count(Split::Test),
    );
    write_run_manifest(&out, "synth", &cfg, Some(cfg.seed), &[], &[&out], started)
}

// ---------------------------------------------------------------------------
// features

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesCmdConfig {
    pub prior_sigma: f64,
    pub cohort: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl Default for FeaturesCmdConfig {
    fn default() -> Self {
        FeaturesCmdConfig {
            prior_sigma: DEFAULT_PRIOR_SIGMA,
            cohort: None,
            out: None,
            threads: None,
        }
    }
}

#[derive(Args)]
pub struct FeaturesArgs {
    /// JSON config file; flags given here override its values
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// In-plane smoothing (in voxels) for the lesion-frequency prior
    #[arg(long)]
    pub prior_sigma: Option<f64>,
    /// Input cohort directory (or path to its manifest.json)
    #[arg(long, value_name = "DIR")]
    pub cohort: Option<PathBuf>,
    /// Output cohort directory; receives every case plus its feature volumes
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Cap on worker threads (results do not depend on it)
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
}

fn features_cmd(a: FeaturesArgs) -> Result<()> {
    let mut cfg: FeaturesCmdConfig = load_config(a.config.as_deref())?;
    override_field(&mut cfg.prior_sigma, a.prior_sigma);
    override_field(&mut cfg.cohort, a.cohort.map(Some));
    override_field(&mut cfg.out, a.out.map(Some));
    override_field(&mut cfg.threads, a.threads.map(Some));
    let cohort_dir = require(cfg.cohort.clone(), "cohort")?;
    let out = require(cfg.out.clone(), "out")?;
    init_threads(cfg.threads)?;

    let started = Instant::now();
    let cohort = Cohort::load(&cohort_dir)?;
    let mut records = Vec::with_capacity(cohort.entries.len());
    for (path, split) in &cohort.entries {
        let name = path
            .file_name()
            .ok_or_else(|| CoreError::invalid(format!("case path {} has no name", path.display())))?
            .to_string_lossy()
            .into_owned();
        let record = load_case(path).with_context(|| format!("loading case {}", path.display()))?;
        records.push((name, *split, record));
    }

    // The prior may only see training annotations; validation and test
    // cases receive it read-only.
    let train_annotations: Vec<_> = records
        .iter()
        .filter(|(_, s, _)| *s == Split::Train)
        .map(|(_, _, r)| &r.annotation)
        .collect();
    if train_annotations.is_empty() {
        bail!("cohort {} has no training cases to build the lesion prior from", cohort_dir.display());
    }
    let prior = locfeat::build_lesion_prior(&train_annotations, cfg.prior_sigma)?;

    create_out_dir(&out)?;
    let mut entries = Vec::with_capacity(records.len());
    for (name, split, mut record) in records {
        record.location = Some(locfeat::compute_case_features(&record, &prior)?);
        save_case(&out.join(&name), &record)
            .with_context(|| format!("writing case {}", out.join(&name).display()))?;
        entries.push(ManifestEntry { path: name, split });
    }
    write_manifest(&out.join("manifest.json"), &entries)?;
    println!(
        "wrote {} feature volumes for {} cases into {}",
        NUM_LOCATION_FEATURES,
        entries.len(),
        out.display()
    );
    write_run_manifest(&out, "features", &cfg, None, &[&cohort_dir], &[&out], started)
}

// ---------------------------------------------------------------------------
// train

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCmdConfig {
    pub fusion: FusionMode,
    pub inject: InjectionPoint,
    pub alpha: f64,
    /// Sweep alpha over `alpha_sweep` and keep the best validation Az.
    pub sweep_alpha: bool,
    pub alpha_sweep: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rmsprop_rho: f64,
    pub rmsprop_eps: f64,
    pub dropout: f64,
    pub precision: Precision,
    pub seed: u64,
    pub cohort: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainCmdConfig {
            fusion: FusionMode::Ss,
            inject: InjectionPoint::None,
            alpha: DEFAULT_ALPHA,
            sweep_alpha: false,
            alpha_sweep: DEFAULT_ALPHA_SWEEP.to_vec(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            rmsprop_rho: t.rmsprop_rho,
            rmsprop_eps: t.rmsprop_eps,
            dropout: t.dropout,
            precision: t.precision,
            seed: t.seed,
            cohort: None,
            out: None,
            threads: None,
        }
    }
}

impl TrainCmdConfig {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            rmsprop_rho: self.rmsprop_rho,
            rmsprop_eps: self.rmsprop_eps,
            epochs: self.epochs,
            dropout: self.dropout,
            seed: self.seed,
            alpha_sweep: self.alpha_sweep.clone(),
            precision: self.precision,
        }
    }
}

#[derive(Args)]
pub struct TrainArgs {
    /// JSON config file; flags given here override its values
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Multi-scale fusion mode
    #[arg(long, value_parser = ["ss", "msef", "msiw", "msws"])]
    pub fusion: Option<String>,
    /// Location-feature injection point
    #[arg(long, value_parser = ["none", "lcl", "ffcl", "sfcl"])]
    pub inject: Option<String>,
    /// Scale factor applied to the injected location features
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Sweep alpha over --alpha-sweep and keep the best validation Az
    #[arg(long, action = clap::ArgAction::SetTrue)]
    pub sweep_alpha: bool,
    /// Comma-separated alpha values for --sweep-alpha
    #[arg(long, value_delimiter = ',', value_name = "A,B,...")]
    pub alpha_sweep: Option<Vec<f64>>,
    /// Training epochs; the best-validation-Az epoch is kept
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// RMSProp learning rate
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// RMSProp decay of the squared-gradient average
    #[arg(long)]
    pub rmsprop_rho: Option<f64>,
    /// RMSProp denominator fuzz term
    #[arg(long)]
    pub rmsprop_eps: Option<f64>,
    /// Dropout rate on the fully connected layers
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Arithmetic precision of the run (checkpoints are always f32)
    #[arg(long, value_parser = ["f32", "f64"])]
    pub precision: Option<String>,
    /// Root seed for sampling, initialization, shuffling, and dropout
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cohort directory with location features where injection needs them
    #[arg(long, value_name = "DIR")]
    pub cohort: Option<PathBuf>,
    /// Output run directory; receives checkpoint.bin and stats.csv
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Cap on worker threads (results do not depend on it)
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainCmdConfig = load_config(a.config.as_deref())?;
    if let Some(s) = a.fusion {
        cfg.fusion = s.parse::<FusionMode>()?;
    }
    if let Some(s) = a.inject {
        cfg.inject = s.parse::<InjectionPoint>()?;
    }
    override_field(&mut cfg.alpha, a.alpha);
    if a.sweep_alpha {
        cfg.sweep_alpha = true;
    }
    override_field(&mut cfg.alpha_sweep, a.alpha_sweep);
    override_field(&mut cfg.epochs, a.epochs);
    override_field(&mut cfg.batch_size, a.batch_size);
    override_field(&mut cfg.learning_rate, a.learning_rate);
    override_field(&mut cfg.rmsprop_rho, a.rmsprop_rho);
    override_field(&mut cfg.rmsprop_eps, a.rmsprop_eps);
    override_field(&mut cfg.dropout, a.dropout);
    if let Some(s) = a.precision {
        cfg.precision = s.parse::<Precision>()?;
    }
    override_field(&mut cfg.seed, a.seed);
    override_field(&mut cfg.cohort, a.cohort.map(Some));
    override_field(&mut cfg.out, a.out.map(Some));
    override_field(&mut cfg.threads, a.threads.map(Some));
    let cohort_dir = require(cfg.cohort.clone(), "cohort")?;
    let out = require(cfg.out.clone(), "out")?;
    init_threads(cfg.threads)?;

    let started = Instant::now();
    let cohort = Cohort::load(&cohort_dir)?;
    let train_cases = cohort.prepared_cases(Split::Train)?;
    let val_cases = cohort.prepared_cases(Split::Validation)?;
    let train_set = build_balanced_dataset(&train_cases, cfg.seed)?;
    let val_set = build_balanced_dataset(&val_cases, cfg.seed)?;
    println!(
        "training {} on {} samples ({} cases), validating on {} samples ({} cases)",
        describe_spec(cfg.fusion, cfg.inject),
        train_set.len(),
        train_cases.len(),
        val_set.len(),
        val_cases.len(),
    );

    let spec = NetworkSpec::standard(cfg.fusion, cfg.inject, cfg.alpha);
    let tc = cfg.train_config();
    let outcome = if cfg.sweep_alpha {
        let sweep = trainer::sweep_alpha(&spec, &train_set, &val_set, &tc)?;
        let mut csv = String::from("alpha,best_epoch,best_val_az\n");
        for run in &sweep.runs {
            csv.push_str(&format!("{},{},{}\n", run.alpha, run.best_epoch, run.best_val_az));
        }
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        std::fs::write(out.join("alpha_sweep.csv"), csv)
            .with_context(|| format!("writing {}", out.join("alpha_sweep.csv").display()))?;
        println!("alpha sweep kept alpha = {}", sweep.best.spec.alpha);
        sweep.best
    } else {
        trainer::train(&spec, &train_set, &val_set, &tc)?
    };

    create_out_dir(&out)?;
    outcome.save_checkpoint(&out.join("checkpoint.bin"))?;
    outcome.write_stats_csv(&out.join("stats.csv"))?;
    println!(
        "kept epoch {}/{} with validation Az {:.4} ({:.1}s)",
        outcome.best_epoch,
        cfg.epochs,
        outcome.best_val_az,
        started.elapsed().as_secs_f64(),
    );
    write_run_manifest(&out, "train", &cfg, Some(cfg.seed), &[&cohort_dir], &[&out], started)
}

fn describe_spec(fusion: FusionMode, inject: InjectionPoint) -> String {
    match inject {
        InjectionPoint::None => fusion.label().to_string(),
        other => format!("{}+{}", fusion.label(), other.label()),
    }
}

// ---------------------------------------------------------------------------
// segment

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentCmdConfig {
    pub split: String,
    pub threshold: f64,
    pub batch_size: usize,
    pub cohort: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl Default for SegmentCmdConfig {
    fn default() -> Self {
        SegmentCmdConfig {
            split: "test".to_string(),
            threshold: 0.5,
            batch_size: 512,
            cohort: None,
            checkpoint: None,
            out: None,
            threads: None,
        }
    }
}

#[derive(Args)]
pub struct SegmentArgs {
    /// JSON config file; flags given here override its values
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Cohort split to segment
    #[arg(long, value_parser = ["train", "val", "test"])]
    pub split: Option<String>,
    /// Probability cut for the binary mask (strictly greater than)
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Patch batch size for sliding-window inference
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Cohort directory
    #[arg(long, value_name = "DIR")]
    pub cohort: Option<PathBuf>,
    /// Trained checkpoint file (checkpoint.bin of a train run)
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Output directory; one subdirectory per case
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Cap on worker threads (results do not depend on it)
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
}

fn segment_cmd(a: SegmentArgs) -> Result<()> {
    let mut cfg: SegmentCmdConfig = load_config(a.config.as_deref())?;
    override_field(&mut cfg.split, a.split);
    override_field(&mut cfg.threshold, a.threshold);
    override_field(&mut cfg.batch_size, a.batch_size);
    override_field(&mut cfg.cohort, a.cohort.map(Some));
    override_field(&mut cfg.checkpoint, a.checkpoint.map(Some));
    override_field(&mut cfg.out, a.out.map(Some));
    override_field(&mut cfg.threads, a.threads.map(Some));
    let cohort_dir = require(cfg.cohort.clone(), "cohort")?;
    let checkpoint = require(cfg.checkpoint.clone(), "checkpoint")?;
    let out = require(cfg.out.clone(), "out")?;
    if !(0.0..=1.0).contains(&cfg.threshold) {
        bail!("threshold {} outside [0, 1]", cfg.threshold);
    }
    init_threads(cfg.threads)?;

    let started = Instant::now();
    let (net, store) = load_network(&checkpoint)?;
    let cohort = Cohort::load(&cohort_dir)?;
    let cases = cohort.prepared_cases(parse_split(&cfg.split)?)?;
    create_out_dir(&out)?;
    for case in &cases {
        let t0 = Instant::now();
        let map = probability_map(&net, &store, case, cfg.batch_size)?;
        let pred = inference::apply_threshold(&map, cfg.threshold);
        let dir = out.join(&case.case_id);
        create_out_dir(&dir)?;
        write_f32_volume(&dir.join("prob.f32"), &map)?;
        std::fs::write(dir.join("segmentation.u8"), &pred.data)
            .with_context(|| format!("writing {}", dir.join("segmentation.u8").display()))?;
        let lesion_voxels = pred.data.iter().filter(|&&v| v != 0).count();
        println!(
            "{}: {} voxels above {} ({:.1}s)",
            case.case_id,
            lesion_voxels,
            cfg.threshold,
            t0.elapsed().as_secs_f64(),
        );
    }
    write_run_manifest(
        &out,
        "segment",
        &cfg,
        None,
        &[&cohort_dir, &checkpoint],
        &[&out],
        started,
    )
}

fn load_network(checkpoint: &Path) -> Result<(Network, wmhseg_core::engine::ParameterStore<f32>)> {
    let (spec, params) = arch::load_checkpoint(checkpoint)?;
    let net = Network::new(spec)?;
    let mut store = net.register_store::<f32>();
    store.load_f32(&params)?;
    Ok((net, store))
}

// ---------------------------------------------------------------------------
// eval

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalCmdConfig {
    pub split: String,
    /// Fixed probability cut; absent means tune on the validation split.
    pub threshold: Option<f64>,
    pub batch_size: usize,
    pub cohort: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl Default for EvalCmdConfig {
    fn default() -> Self {
        EvalCmdConfig {
            split: "test".to_string(),
            threshold: None,
            batch_size: 512,
            cohort: None,
            checkpoint: None,
            out: None,
            threads: None,
        }
    }
}

#[derive(Args)]
pub struct EvalArgs {
    /// JSON config file; flags given here override its values
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Cohort split to evaluate
    #[arg(long, value_parser = ["train", "val", "test"])]
    pub split: Option<String>,
    /// Fixed probability cut; omit to tune it on the validation split
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Patch batch size for sliding-window inference
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Cohort directory
    #[arg(long, value_name = "DIR")]
    pub cohort: Option<PathBuf>,
    /// Trained checkpoint file (checkpoint.bin of a train run)
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Output directory; receives metrics.json and roc.csv
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Cap on worker threads (results do not depend on it)
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let mut cfg: EvalCmdConfig = load_config(a.config.as_deref())?;
    override_field(&mut cfg.split, a.split);
    override_field(&mut cfg.threshold, a.threshold.map(Some));
    override_field(&mut cfg.batch_size, a.batch_size);
    override_field(&mut cfg.cohort, a.cohort.map(Some));
    override_field(&mut cfg.checkpoint, a.checkpoint.map(Some));
    override_field(&mut cfg.out, a.out.map(Some));
    override_field(&mut cfg.threads, a.threads.map(Some));
    let cohort_dir = require(cfg.cohort.clone(), "cohort")?;
    let checkpoint = require(cfg.checkpoint.clone(), "checkpoint")?;
    let out = require(cfg.out.clone(), "out")?;
    init_threads(cfg.threads)?;

    let started = Instant::now();
    let (net, store) = load_network(&checkpoint)?;
    let cohort = Cohort::load(&cohort_dir)?;
    let threshold = match cfg.threshold {
        Some(t) => {
            if !(0.0..=1.0).contains(&t) {
                bail!("threshold {t} outside [0, 1]");
            }
            t
        }
        None => {
            let val_cases = cohort.prepared_cases(Split::Validation)?;
            let t = tuned_threshold(&net, &store, &val_cases, cfg.batch_size)?;
            println!("tuned threshold {t} on {} validation cases", val_cases.len());
            t
        }
    };
    let cases = cohort.prepared_cases(parse_split(&cfg.split)?)?;
    let (report, roc) = evaluate_cases(&net, &store, &cases, threshold, cfg.batch_size)?;
    create_out_dir(&out)?;
    eval::write_json(&out.join("metrics.json"), &report)?;
    eval::write_roc_csv(&out.join("roc.csv"), &roc)?;
    println!(
        "{} split: pooled Dice {:.4}, mean case Dice {:.4}, Az {:.4} over {} cases",
        cfg.split,
        report.pooled_dice,
        report.mean_case_dice,
        report.az,
        report.per_case.len(),
    );
    write_run_manifest(
        &out,
        "eval",
        &cfg,
        None,
        &[&cohort_dir, &checkpoint],
        &[&out],
        started,
    )
}

// ---------------------------------------------------------------------------
// compare

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareCmdConfig {
    pub bootstraps: usize,
    pub seed: u64,
    pub method_a: Option<PathBuf>,
    pub method_b: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl Default for CompareCmdConfig {
    fn default() -> Self {
        CompareCmdConfig {
            bootstraps: 1000,
            seed: 1,
            method_a: None,
            method_b: None,
            out: None,
            threads: None,
        }
    }
}

/// `metrics.json` payload of a comparison: the paired patient-level
/// bootstrap of method B against method A.
#[derive(Serialize)]
struct CompareSummary {
    method_a: String,
    method_b: String,
    replicates: usize,
    pooled_dice_a: f64,
    pooled_dice_b: f64,
    /// Replicates where B's pooled Dice strictly beat A's.
    wins_b: usize,
    ties: usize,
    /// `(wins_b + ties/2) / replicates`: small values favor A.
    p_value: f64,
    p_display: String,
}

#[derive(Args)]
pub struct CompareArgs {
    /// JSON config file; flags given here override its values
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Bootstrap replicates
    #[arg(long)]
    pub bootstraps: Option<usize>,
    /// Seed for the bootstrap resampling
    #[arg(long)]
    pub seed: Option<u64>,
    /// Eval output directory of method A (must contain metrics.json)
    #[arg(long, value_name = "DIR")]
    pub method_a: Option<PathBuf>,
    /// Eval output directory of method B (must contain metrics.json)
    #[arg(long, value_name = "DIR")]
    pub method_b: Option<PathBuf>,
    /// Output directory for the comparison metrics.json (default: .)
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Cap on worker threads (results do not depend on it)
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
}

fn compare_cmd(a: CompareArgs) -> Result<()> {
    let mut cfg: CompareCmdConfig = load_config(a.config.as_deref())?;
    override_field(&mut cfg.bootstraps, a.bootstraps);
    override_field(&mut cfg.seed, a.seed);
    override_field(&mut cfg.method_a, a.method_a.map(Some));
    override_field(&mut cfg.method_b, a.method_b.map(Some));
    override_field(&mut cfg.out, a.out.map(Some));
    override_field(&mut cfg.threads, a.threads.map(Some));
    let dir_a = require(cfg.method_a.clone(), "method-a")?;
    let dir_b = require(cfg.method_b.clone(), "method-b")?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("."));
    init_threads(cfg.threads)?;

    let started = Instant::now();
    let report_a = read_eval_report(&dir_a)?;
    let report_b = read_eval_report(&dir_b)?;
    let ids = |r: &EvalReport| -> Vec<String> { r.per_case.iter().map(|c| c.case_id.clone()).collect() };
    let counts = |r: &EvalReport| -> Vec<_> { r.per_case.iter().map(|c| c.counts).collect() };
    let boot = eval::bootstrap_compare(
        &ids(&report_a),
        &counts(&report_a),
        &counts(&report_b),
        &ids(&report_b),
        cfg.bootstraps,
        cfg.seed,
    )?;
    let summary = CompareSummary {
        method_a: dir_a.display().to_string(),
        method_b: dir_b.display().to_string(),
        replicates: boot.replicates,
        pooled_dice_a: report_a.pooled_dice,
        pooled_dice_b: report_b.pooled_dice,
        wins_b: boot.wins_b,
        ties: boot.ties,
        p_value: boot.p_value,
        p_display: boot.p_display.clone(),
    };
    create_out_dir(&out)?;
    eval::write_json(&out.join("metrics.json"), &summary)?;
    println!(
        "pooled Dice {:.4} (A) vs {:.4} (B); B won {}/{} replicates, {} ties; p = {}",
        summary.pooled_dice_a,
        summary.pooled_dice_b,
        summary.wins_b,
        summary.replicates,
        summary.ties,
        summary.p_display,
    );
    write_run_manifest(
        &out,
        "compare",
        &cfg,
        Some(cfg.seed),
        &[&dir_a, &dir_b],
        &[&out],
        started,
    )
}

fn read_eval_report(dir: &Path) -> Result<EvalReport> {
    let path = dir.join("metrics.json");
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading {} (run `wmhseg eval` first)", path.display()))?;
    let report: EvalReport =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if report.per_case.is_empty() {
        bail!("{} lists no cases", path.display());
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// ablate

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateCmdConfig {
    pub fusion: FusionMode,
    pub inject: InjectionPoint,
    pub alpha: f64,
    pub fractions: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rmsprop_rho: f64,
    pub rmsprop_eps: f64,
    pub dropout: f64,
    pub precision: Precision,
    pub seed: u64,
    pub cohort: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl Default for AblateCmdConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        AblateCmdConfig {
            fusion: FusionMode::Ss,
            inject: InjectionPoint::None,
            alpha: DEFAULT_ALPHA,
            fractions: DEFAULT_ABLATION_FRACTIONS.to_vec(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            rmsprop_rho: t.rmsprop_rho,
            rmsprop_eps: t.rmsprop_eps,
            dropout: t.dropout,
            precision: t.precision,
            seed: t.seed,
            cohort: None,
            out: None,
            threads: None,
        }
    }
}

#[derive(Args)]
pub struct AblateArgs {
    /// JSON config file; flags given here override its values
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Multi-scale fusion mode
    #[arg(long, value_parser = ["ss", "msef", "msiw", "msws"])]
    pub fusion: Option<String>,
    /// Location-feature injection point
    #[arg(long, value_parser = ["none", "lcl", "ffcl", "sfcl"])]
    pub inject: Option<String>,
    /// Scale factor applied to the injected location features
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Training-set fractions to ablate over, nested by construction
    #[arg(long, value_delimiter = ',', value_name = "A,B,...")]
    pub fractions: Option<Vec<f64>>,
    /// Training epochs per fraction
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// RMSProp learning rate
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// RMSProp decay of the squared-gradient average
    #[arg(long)]
    pub rmsprop_rho: Option<f64>,
    /// RMSProp denominator fuzz term
    #[arg(long)]
    pub rmsprop_eps: Option<f64>,
    /// Dropout rate on the fully connected layers
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Arithmetic precision of the run (checkpoints are always f32)
    #[arg(long, value_parser = ["f32", "f64"])]
    pub precision: Option<String>,
    /// Root seed for subset order, sampling, and training
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cohort directory with location features where injection needs them
    #[arg(long, value_name = "DIR")]
    pub cohort: Option<PathBuf>,
    /// Output directory; receives ablation.csv
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Cap on worker threads (results do not depend on it)
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let mut cfg: AblateCmdConfig = load_config(a.config.as_deref())?;
    if let Some(s) = a.fusion {
        cfg.fusion = s.parse::<FusionMode>()?;
    }
    if let Some(s) = a.inject {
        cfg.inject = s.parse::<InjectionPoint>()?;
    }
    override_field(&mut cfg.alpha, a.alpha);
    override_field(&mut cfg.fractions, a.fractions);
    override_field(&mut cfg.epochs, a.epochs);
    override_field(&mut cfg.batch_size, a.batch_size);
    override_field(&mut cfg.learning_rate, a.learning_rate);
    override_field(&mut cfg.rmsprop_rho, a.rmsprop_rho);
    override_field(&mut cfg.rmsprop_eps, a.rmsprop_eps);
    override_field(&mut cfg.dropout, a.dropout);
    if let Some(s) = a.precision {
        cfg.precision = s.parse::<Precision>()?;
    }
    override_field(&mut cfg.seed, a.seed);
    override_field(&mut cfg.cohort, a.cohort.map(Some));
    override_field(&mut cfg.out, a.out.map(Some));
    override_field(&mut cfg.threads, a.threads.map(Some));
    let cohort_dir = require(cfg.cohort.clone(), "cohort")?;
    let out = require(cfg.out.clone(), "out")?;
    init_threads(cfg.threads)?;

    let started = Instant::now();
    let cohort = Cohort::load(&cohort_dir)?;
    let train_cases = cohort.prepared_cases(Split::Train)?;
    let val_cases = cohort.prepared_cases(Split::Validation)?;
    let test_cases = cohort.prepared_cases(Split::Test)?;
    let val_set = build_balanced_dataset(&val_cases, cfg.seed)?;

    let spec = NetworkSpec::standard(cfg.fusion, cfg.inject, cfg.alpha);
    let tc = TrainConfig {
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        rmsprop_rho: cfg.rmsprop_rho,
        rmsprop_eps: cfg.rmsprop_eps,
        epochs: cfg.epochs,
        dropout: cfg.dropout,
        seed: cfg.seed,
        alpha_sweep: vec![cfg.alpha],
        precision: cfg.precision,
    };
    let rows = eval::dataset_size_ablation(train_cases.len(), &cfg.fractions, cfg.seed, |indices| {
        let subset: Vec<PreparedCase> = indices.iter().map(|&i| train_cases[i].clone()).collect();
        let train_set = build_balanced_dataset(&subset, cfg.seed)?;
        let outcome = trainer::train(&spec, &train_set, &val_set, &tc)?;
        let dice = pooled_test_dice(&outcome, &val_cases, &test_cases, cfg.batch_size)
            .map_err(|e| CoreError::invalid(format!("{e:#}")))?;
        println!("fraction with {} cases: test pooled Dice {:.4}", indices.len(), dice);
        Ok(dice)
    })?;
    create_out_dir(&out)?;
    eval::write_ablation_csv(&out.join("ablation.csv"), &rows)?;
    println!("wrote {} rows to {}", rows.len(), out.join("ablation.csv").display());
    write_run_manifest(&out, "ablate", &cfg, Some(cfg.seed), &[&cohort_dir], &[&out], started)
}

/// Validation-tuned threshold, then pooled Dice over the test cases.
fn pooled_test_dice(
    outcome: &TrainOutcome,
    val_cases: &[PreparedCase],
    test_cases: &[PreparedCase],
    batch_size: usize,
) -> Result<f64> {
    let net = Network::new(outcome.spec.clone())?;
    let mut store = net.register_store::<f32>();
    store.load_f32(&outcome.best_params)?;
    let threshold = tuned_threshold(&net, &store, val_cases, batch_size)?;
    let (report, _) = evaluate_cases(&net, &store, test_cases, threshold, batch_size)?;
    Ok(report.pooled_dice)
}

// ---------------------------------------------------------------------------
