//! Mini-batch training with per-epoch validation-Az model selection.
//!
//! One run walks the training set in seeded per-epoch shuffles, optimizes
//! with RMSPROP, scores the balanced validation set after every epoch, and
//! keeps the parameters from the epoch with the highest validation Az
//! (ties resolve to the earliest epoch). Alpha sweeps repeat the run per
//! candidate and pick the best Az, ties resolving to the smallest alpha.

use crate::arch::{self, Batch, Mode, Network, NetworkSpec, Workspace, DEFAULT_ALPHA_SWEEP, DEFAULT_DROPOUT};
use crate::engine::rmsprop::RmsProp;
use crate::error::{Error, Result};
use crate::eval;
use crate::sampler::{batch_ranges, epoch_order, SampleSet};
use crate::tensor::Scalar;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

/// Arithmetic type the run is carried out in. Checkpoints are always f32.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::config(format!("unknown precision {other:?} (use f32 or f64)"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rmsprop_rho: f64,
    pub rmsprop_eps: f64,
    pub epochs: usize,
    pub dropout: f64,
    pub seed: u64,
    pub alpha_sweep: Vec<f64>,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            learning_rate: 1e-3,
            rmsprop_rho: 0.9,
            rmsprop_eps: 1e-8,
            epochs: 30,
            dropout: DEFAULT_DROPOUT,
            seed: 1,
            alpha_sweep: DEFAULT_ALPHA_SWEEP.to_vec(),
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(format!("learning_rate {} not positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.rmsprop_rho) {
            return Err(Error::config(format!("rmsprop_rho {} outside [0, 1)", self.rmsprop_rho)));
        }
        if !(self.rmsprop_eps.is_finite() && self.rmsprop_eps > 0.0) {
            return Err(Error::config(format!("rmsprop_eps {} not positive", self.rmsprop_eps)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based epoch index.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_az: f64,
    pub seconds: f64,
}

/// Index of the checkpoint-winning row: argmax validation Az, first on ties.
pub fn select_best(stats: &[EpochStats]) -> usize {
    let mut best = 0;
    for (i, s) in stats.iter().enumerate() {
        if s.val_az > stats[best].val_az {
            best = i;
        }
    }
    best
}

/// `stats.csv` bytes: one row per epoch. The seconds column is wall time
/// and is the only field excluded from determinism comparisons.
pub fn write_stats_csv(path: &Path, stats: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_az,seconds\n");
    for s in stats {
        out.push_str(&format!("{},{},{},{}\n", s.epoch, s.train_loss, s.val_az, s.seconds));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The spec actually trained (dropout taken from the config).
    pub spec: NetworkSpec,
    pub stats: Vec<EpochStats>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_az: f64,
    /// Flat f32 parameters from the best epoch, canonical tensor order.
    pub best_params: Vec<f32>,
}

impl TrainOutcome {
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let net = Network::new(self.spec.clone())?;
        let mut store = net.register_store::<f32>();
        store.load_f32(&self.best_params)?;
        arch::save_checkpoint(path, &self.spec, &store)
    }

    pub fn write_stats_csv(&self, path: &Path) -> Result<()> {
        write_stats_csv(path, &self.stats)
    }
}

/// Validation Az of a network's positive-class probabilities against the
/// set's labels. Rejects single-class sets (Az is undefined there).
pub fn evaluate_epoch_az<F: Scalar>(
    net: &Network,
    store: &crate::engine::ParameterStore<F>,
    set: &SampleSet,
    batch_size: usize,
    ws: &mut Workspace<F>,
) -> Result<f64> {
    let mut scores = Vec::with_capacity(set.len());
    for range in batch_ranges(set.len(), batch_size) {
        let indices: Vec<usize> = range.collect();
        let batch: Batch<F> = Batch::from_sample_set(set, &indices, &net.spec.scales);
        net.forward(store, &batch, Mode::Infer, ws)?;
        for (p, &label) in ws.positive_probs().iter().zip(&batch.labels) {
            scores.push((p.to_f64(), label));
        }
    }
    Ok(eval::roc_and_az(&scores)?.az)
}

fn check_sets(spec: &NetworkSpec, train_set: &SampleSet, val_set: &SampleSet) -> Result<()> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::config("training and validation sets must be non-empty"));
    }
    if spec.injection != crate::arch::InjectionPoint::None
        && !(train_set.has_location && val_set.has_location)
    {
        return Err(Error::config(format!(
            "injection point {} needs location features, but the sample sets carry none",
            spec.injection
        )));
    }
    let val_pos = val_set.labels.iter().filter(|&&l| l != 0).count();
    if val_pos == 0 || val_pos == val_set.len() {
        return Err(Error::config(
            "validation set has a single class; validation Az is undefined",
        ));
    }
    Ok(())
}

/// Train `spec` (with the config's dropout rate) and return per-epoch stats
/// plus the parameters of the best-validation-Az epoch.
pub fn train(
    spec: &NetworkSpec,
    train_set: &SampleSet,
    val_set: &SampleSet,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut spec = spec.clone();
    spec.dropout = config.dropout;
    check_sets(&spec, train_set, val_set)?;
    match config.precision {
        Precision::F32 => run::<f32>(spec, train_set, val_set, config),
        Precision::F64 => run::<f64>(spec, train_set, val_set, config),
    }
}

fn run<F: Scalar>(
    spec: NetworkSpec,
    train_set: &SampleSet,
    val_set: &SampleSet,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let net = Network::new(spec)?;
    let mut store = net.init_store::<F>(config.seed);
    let mut opt = RmsProp::new(&store, config.learning_rate, config.rmsprop_rho, config.rmsprop_eps);
    let mut ws = Workspace::new();
    let n = train_set.len();

    let mut stats: Vec<EpochStats> = Vec::with_capacity(config.epochs);
    let mut best_idx = 0usize;
    let mut best_params: Vec<f32> = Vec::new();
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let order = epoch_order(n, config.seed, epoch as u64);
        let mut loss_sum = 0.0f64;
        for range in batch_ranges(n, config.batch_size) {
            let base_index = range.start as u64;
            let batch: Batch<F> = Batch::from_sample_set(train_set, &order[range], &net.spec.scales);
            let mode = Mode::Train { seed: config.seed, epoch: epoch as u64, base_index };
            let loss = net
                .forward(&store, &batch, mode, &mut ws)?
                .expect("training batches are labeled")
                .to_f64();
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite training loss ({loss}) at epoch {}, batch starting at sample {base_index}",
                    epoch + 1
                )));
            }
            net.backward(&mut store, &batch, &mut ws);
            opt.step(&mut store);
            loss_sum += loss * batch.n as f64;
        }
        let val_az = evaluate_epoch_az(&net, &store, val_set, config.batch_size, &mut ws)?;
        stats.push(EpochStats {
            epoch: epoch + 1,
            train_loss: loss_sum / n as f64,
            val_az,
            seconds: started.elapsed().as_secs_f64(),
        });
        if best_params.is_empty() || val_az > stats[best_idx].val_az {
            best_idx = epoch;
            best_params = store.flatten_f32();
        }
    }
    debug_assert_eq!(best_idx, select_best(&stats));
    Ok(TrainOutcome {
        spec: net.spec.clone(),
        best_epoch: stats[best_idx].epoch,
        best_val_az: stats[best_idx].val_az,
        best_params,
        stats,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct AlphaRun {
    pub alpha: f64,
    pub best_epoch: usize,
    pub best_val_az: f64,
}

#[derive(Debug)]
pub struct AlphaSweepOutcome {
    /// One summary per swept value, in sweep-list order.
    pub runs: Vec<AlphaRun>,
    /// Full outcome of the winning run.
    pub best: TrainOutcome,
}

/// Train once per alpha in `config.alpha_sweep` and keep the run with the
/// highest validation Az; on ties the smallest alpha wins.
pub fn sweep_alpha(
    spec: &NetworkSpec,
    train_set: &SampleSet,
    val_set: &SampleSet,
    config: &TrainConfig,
) -> Result<AlphaSweepOutcome> {
    if spec.injection == crate::arch::InjectionPoint::None {
        return Err(Error::config("alpha sweep needs an injection point"));
    }
    if config.alpha_sweep.is_empty() {
        return Err(Error::config("alpha sweep list is empty"));
    }
    let mut runs = Vec::with_capacity(config.alpha_sweep.len());
    let mut best: Option<TrainOutcome> = None;
    for &alpha in &config.alpha_sweep {
        let mut candidate = spec.clone();
        candidate.alpha = alpha;
        let outcome = train(&candidate, train_set, val_set, config)?;
        runs.push(AlphaRun {
            alpha,
            best_epoch: outcome.best_epoch,
            best_val_az: outcome.best_val_az,
        });
        let better = match &best {
            None => true,
            Some(b) => {
                outcome.best_val_az > b.best_val_az
                    || (outcome.best_val_az == b.best_val_az && alpha < b.spec.alpha)
            }
        };
        if better {
            best = Some(outcome);
        }
    }
    Ok(AlphaSweepOutcome { runs, best: best.expect("sweep list is non-empty") })
}
