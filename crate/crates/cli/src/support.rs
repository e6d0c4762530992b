//! Shared plumbing for the subcommands: config-file merging, run manifests,
//! cohort loading, and the model-evaluation protocol.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

use wmhseg_core::arch::{FusionMode, Network};
use wmhseg_core::engine::ParameterStore;
use wmhseg_core::eval;
use wmhseg_core::inference;
use wmhseg_core::sampler::{prepare_case, PreparedCase};
use wmhseg_core::volume::{load_case, load_manifest, resolve_manifest_path, Split, Volume};

/// Record of one invocation, written as `run_manifest.json` next to the
/// subcommand's artifacts so a run can be reproduced exactly.
#[derive(Serialize)]
pub struct RunManifest {
    pub subcommand: &'static str,
    /// Fully resolved config after file/flag merging.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub version: &'static str,
    pub wall_seconds: f64,
}

pub fn write_run_manifest(
    out_dir: &Path,
    subcommand: &'static str,
    config: &impl Serialize,
    seed: Option<u64>,
    inputs: &[&Path],
    outputs: &[&Path],
    started: Instant,
) -> Result<()> {
    let manifest = RunManifest {
        subcommand,
        config: serde_json::to_value(config)?,
        seed,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        version: env!("CARGO_PKG_VERSION"),
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    let path = out_dir.join("run_manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Bad invocation detected after flag parsing: a required flag missing from
/// both the command line and the config file, a malformed value list, or an
/// unusable `--config` file. Mapped to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Load a subcommand config: the `--config` file when given, else defaults.
/// Individual command-line flags override the result field by field. The
/// file sets the same keys the flags do; unknown keys are rejected.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| UsageError(format!("reading config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| UsageError(format!("config {}: {e}", p.display())).into())
        }
    }
}

/// Replace `field` with the command-line value when one was given.
pub fn override_field<T>(field: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *field = v;
    }
}

pub struct Cohort {
    pub entries: Vec<(PathBuf, Split)>,
}

impl Cohort {
    pub fn load(dir: &Path) -> Result<Cohort> {
        let manifest = resolve_manifest_path(dir);
        let entries = load_manifest(&manifest)
            .with_context(|| format!("loading cohort manifest {}", manifest.display()))?;
        if entries.is_empty() {
            bail!("cohort manifest {} lists no cases", manifest.display());
        }
        Ok(Cohort { entries })
    }

    pub fn case_dirs(&self, split: Split) -> Vec<&Path> {
        self.entries
            .iter()
            .filter(|(_, s)| *s == split)
            .map(|(p, _)| p.as_path())
            .collect()
    }

    /// Load and normalize every case of a split, ready for sampling or
    /// inference.
    pub fn prepared_cases(&self, split: Split) -> Result<Vec<PreparedCase>> {
        let dirs = self.case_dirs(split);
        if dirs.is_empty() {
            bail!("cohort has no {split:?} cases");
        }
        dirs.into_iter()
            .map(|d| {
                let record =
                    load_case(d).with_context(|| format!("loading case {}", d.display()))?;
                prepare_case(record).with_context(|| format!("preparing case {}", d.display()))
            })
            .collect()
    }
}

/// Voxelwise positive-class probability map. Single-scale networks run
/// densely (fully convolutional); multi-scale ones fall back to the
/// sliding window.
pub fn probability_map(
    net: &Network,
    store: &ParameterStore<f32>,
    case: &PreparedCase,
    batch_size: usize,
) -> Result<Volume<f32>> {
    let map = if net.spec.fusion == FusionMode::Ss {
        let dense = inference::convert_to_fully_convolutional(net, store)?;
        inference::segment_dense(&dense, case)?
    } else {
        inference::segment_sliding_window(net, store, case, batch_size)?
    };
    Ok(map)
}

/// Per-case metrics plus pooled voxel scores for one split at a threshold.
pub fn evaluate_cases(
    net: &Network,
    store: &ParameterStore<f32>,
    cases: &[PreparedCase],
    threshold: f64,
    batch_size: usize,
) -> Result<(eval::EvalReport, eval::RocCurve)> {
    let mut per_case = Vec::with_capacity(cases.len());
    let mut scores = Vec::new();
    for case in cases {
        let map = probability_map(net, store, case, batch_size)?;
        let pred = inference::apply_threshold(&map, threshold);
        let counts = eval::confusion_counts(&pred, &case.annotation, &case.brain_mask)?;
        per_case.push(eval::CaseMetrics {
            case_id: case.case_id.clone(),
            dice: counts.dice(),
            both_empty: counts.both_empty(),
            counts,
        });
        for (i, (&p, &b)) in map.data.iter().zip(&case.brain_mask.data).enumerate() {
            if b != 0 {
                scores.push((p as f64, case.annotation.data[i]));
            }
        }
    }
    let roc = eval::roc_and_az(&scores)?;
    let az = roc.az;
    Ok((eval::EvalReport::from_cases(threshold, az, per_case), roc))
}

/// Dice-optimal probability threshold over a split (the validation split in
/// the standard protocol).
pub fn tuned_threshold(
    net: &Network,
    store: &ParameterStore<f32>,
    cases: &[PreparedCase],
    batch_size: usize,
) -> Result<f64> {
    let maps: Vec<Volume<f32>> = cases
        .iter()
        .map(|c| probability_map(net, store, c, batch_size))
        .collect::<Result<_>>()?;
    let triples: Vec<_> = cases
        .iter()
        .zip(&maps)
        .map(|(c, m)| (m, &c.annotation, &c.brain_mask))
        .collect();
    let (t, _) = eval::optimal_threshold(&triples)?;
    Ok(t)
}

pub fn create_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn parse_split(s: &str) -> Result<Split> {
    match s.to_ascii_lowercase().as_str() {
        "train" => Ok(Split::Train),
        "val" | "validation" => Ok(Split::Validation),
        "test" => Ok(Split::Test),
        other => bail!("unknown split `{other}` (expected train|val|test)"),
    }
}
