//! Segmentation metrics: Dice over confusion counts, integer-exact ROC/Az,
//! validation-optimal thresholding, paired patient-level bootstrap testing,
//! and the dataset-size ablation harness.

use crate::error::{Error, Result};
use crate::rng;
use crate::volume::Volume;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Voxel confusion counts within a brain mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    /// Dice overlap `2·TP / (FP + FN + 2·TP)`. Two empty masks agree
    /// perfectly and score 1 (callers can flag this via [`both_empty`]).
    ///
    /// [`both_empty`]: ConfusionCounts::both_empty
    pub fn dice(&self) -> f64 {
        if self.both_empty() {
            return 1.0;
        }
        2.0 * self.tp as f64 / (self.fp + self.fn_ + 2 * self.tp) as f64
    }

    /// True when neither mask marks any voxel (TP = FP = FN = 0).
    pub fn both_empty(&self) -> bool {
        self.tp == 0 && self.fp == 0 && self.fn_ == 0
    }

    /// Pool counts from another volume or case.
    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

/// Tally prediction vs. reference over brain-mask voxels only.
pub fn confusion_counts(
    prediction: &Volume<u8>,
    reference: &Volume<u8>,
    brain_mask: &Volume<u8>,
) -> Result<ConfusionCounts> {
    if prediction.dims != reference.dims || prediction.dims != brain_mask.dims {
        return Err(Error::invalid(format!(
            "dimension mismatch: prediction {:?}, reference {:?}, brain mask {:?}",
            prediction.dims, reference.dims, brain_mask.dims
        )));
    }
    let mut c = ConfusionCounts::default();
    for ((&p, &r), &m) in prediction
        .data
        .iter()
        .zip(reference.data.iter())
        .zip(brain_mask.data.iter())
    {
        if m == 0 {
            continue;
        }
        match (p != 0, r != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug)]
pub struct RocCurve {
    /// One operating point per distinct score, threshold-ascending.
    pub points: Vec<RocPoint>,
    pub az: f64,
}

/// ROC curve and area under it.
///
/// Az is computed from integer counts: the trapezoidal numerator
/// `Σ Δfp·(tp_before + tp_after)` equals exactly twice the pairwise
/// statistic `#{s⁺ > s⁻} + ½·#{ties}`, so trapezoidal integration and the
/// pairwise definition agree to the bit.
pub fn roc_and_az(scores: &[(f64, u8)]) -> Result<RocCurve> {
    if scores.iter().any(|&(s, _)| !s.is_finite()) {
        return Err(Error::invalid("non-finite score in ROC input"));
    }
    let pos = scores.iter().filter(|&&(_, l)| l != 0).count() as u64;
    let neg = scores.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(format!(
            "ROC needs both classes, got {pos} positive / {neg} negative"
        )));
    }
    let mut sorted: Vec<(f64, u8)> = scores.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let mut points = Vec::new();
    let mut tp: u64 = 0;
    let mut fp: u64 = 0;
    let mut num: u128 = 0; // 2 · az · pos · neg
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        let mut tp_add = 0u64;
        let mut fp_add = 0u64;
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 != 0 {
                tp_add += 1;
            } else {
                fp_add += 1;
            }
            i += 1;
        }
        num += fp_add as u128 * (2 * tp + tp_add) as u128;
        tp += tp_add;
        fp += fp_add;
        points.push(RocPoint {
            threshold: v,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    points.reverse();
    let az = num as f64 / (2 * pos as u128 * neg as u128) as f64;
    Ok(RocCurve { points, az })
}

/// The exhaustive pairwise statistic `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)`; the
/// test-oracle twin of [`roc_and_az`].
pub fn pairwise_az(scores: &[(f64, u8)]) -> Result<f64> {
    let mut num: u128 = 0;
    let mut pairs: u128 = 0;
    for &(sp, lp) in scores.iter().filter(|&&(_, l)| l != 0) {
        for &(sn, _) in scores.iter().filter(|&&(_, l)| l == 0) {
            pairs += 1;
            if sp > sn {
                num += 2;
            } else if sp == sn {
                num += 1;
            }
        }
        let _ = lp;
    }
    if pairs == 0 {
        return Err(Error::invalid("ROC needs both classes"));
    }
    Ok(num as f64 / (2 * pairs) as f64)
}

/// Threshold grid searched by [`optimal_threshold`]: {0.00, 0.01, …, 1.00}.
pub const THRESHOLD_GRID_STEPS: usize = 101;

fn grid_threshold(i: usize) -> f64 {
    i as f64 / 100.0
}

/// Validation-optimal threshold: the grid value maximizing the overall Dice
/// with confusion counts pooled across cases before the Dice formula
/// (per-case means are a separate, secondary statistic). Ties resolve to
/// the smallest threshold. Returns `(t*, pooled Dice at t*)`.
pub fn optimal_threshold(
    cases: &[(&Volume<f32>, &Volume<u8>, &Volume<u8>)],
) -> Result<(f64, f64)> {
    if cases.is_empty() {
        return Err(Error::invalid("optimal_threshold needs at least one case"));
    }
    let mut tp = [0u64; THRESHOLD_GRID_STEPS];
    let mut fp = [0u64; THRESHOLD_GRID_STEPS];
    let mut fn_ = [0u64; THRESHOLD_GRID_STEPS];
    for &(prob, reference, brain) in cases {
        if prob.dims != reference.dims || prob.dims != brain.dims {
            return Err(Error::invalid("optimal_threshold: case volumes disagree on dims"));
        }
        for ((&p, &r), &m) in prob
            .data
            .iter()
            .zip(reference.data.iter())
            .zip(brain.data.iter())
        {
            if m == 0 {
                continue;
            }
            let p = p as f64;
            for i in 0..THRESHOLD_GRID_STEPS {
                let predicted = p > grid_threshold(i);
                match (predicted, r != 0) {
                    (true, true) => tp[i] += 1,
                    (true, false) => fp[i] += 1,
                    (false, true) => fn_[i] += 1,
                    (false, false) => {}
                }
            }
        }
    }
    let mut best = (0usize, -1.0f64);
    for i in 0..THRESHOLD_GRID_STEPS {
        let c = ConfusionCounts { tp: tp[i], fp: fp[i], fn_: fn_[i], tn: 0 };
        let d = c.dice();
        if d > best.1 {
            best = (i, d);
        }
    }
    Ok((grid_threshold(best.0), best.1))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub replicates: usize,
    /// Per-replicate pooled Dice for each method.
    pub dice_a: Vec<f64>,
    pub dice_b: Vec<f64>,
    /// Replicates where method B's Dice strictly exceeded method A's.
    pub wins_b: usize,
    pub ties: usize,
    /// `(wins_b + ties/2) / replicates`.
    pub p_value: f64,
    /// `"<0.01"` when no replicate favored or tied B; else the number.
    pub p_display: String,
}

/// Paired patient-level bootstrap: each replicate resamples the case list
/// with replacement, re-pools each method's confusion counts over the drawn
/// cases, and compares Dice values. Ties count one half (two identical
/// methods give p = 0.5, where the strict rule would call them different).
pub fn bootstrap_compare(
    case_ids: &[String],
    counts_a: &[ConfusionCounts],
    counts_b: &[ConfusionCounts],
    case_ids_b: &[String],
    replicates: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    if case_ids != case_ids_b {
        return Err(Error::invalid(
            "bootstrap_compare: the two methods cover different case lists",
        ));
    }
    if case_ids.len() != counts_a.len() || case_ids.len() != counts_b.len() {
        return Err(Error::invalid("bootstrap_compare: counts do not match the case list"));
    }
    if case_ids.len() < 2 {
        return Err(Error::invalid("bootstrap_compare needs at least two cases"));
    }
    if replicates == 0 {
        return Err(Error::invalid("bootstrap_compare needs at least one replicate"));
    }
    let n = case_ids.len();
    let mut dice_a = Vec::with_capacity(replicates);
    let mut dice_b = Vec::with_capacity(replicates);
    let mut wins_b = 0usize;
    let mut ties = 0usize;
    for r in 0..replicates {
        let mut draw = rng::stream(seed, rng::purpose::BOOTSTRAP, r as u64, 0);
        let mut pooled_a = ConfusionCounts::default();
        let mut pooled_b = ConfusionCounts::default();
        for _ in 0..n {
            let i = draw.gen_range(0..n);
            pooled_a.add(&counts_a[i]);
            pooled_b.add(&counts_b[i]);
        }
        let (da, db) = (pooled_a.dice(), pooled_b.dice());
        dice_a.push(da);
        dice_b.push(db);
        if db > da {
            wins_b += 1;
        } else if db == da {
            ties += 1;
        }
    }
    let p_value = (wins_b as f64 + ties as f64 / 2.0) / replicates as f64;
    let p_display = if wins_b == 0 && ties == 0 {
        "<0.01".to_string()
    } else {
        format!("{p_value}")
    };
    Ok(BootstrapResult {
        replicates,
        dice_a,
        dice_b,
        wins_b,
        ties,
        p_value,
        p_display,
    })
}

pub const DEFAULT_ABLATION_FRACTIONS: [f64; 5] = [1.0, 0.5, 0.25, 0.125, 0.0625];

#[derive(Clone, Copy, Debug, Serialize)]
pub struct AblationRow {
    pub fraction: f64,
    pub cases: usize,
    pub dice: f64,
}

/// Dataset-size ablation over nested training subsets. One seeded shuffle
/// of the case indices fixes a priority order; fraction `f` trains on the
/// first `ceil(f·n)` cases, so every smaller subset is contained in every
/// larger one. `run` receives the subset indices and returns its test Dice.
pub fn dataset_size_ablation(
    n_train: usize,
    fractions: &[f64],
    seed: u64,
    mut run: impl FnMut(&[usize]) -> Result<f64>,
) -> Result<Vec<AblationRow>> {
    if n_train == 0 {
        return Err(Error::invalid("no training cases to ablate"));
    }
    if fractions.is_empty() {
        return Err(Error::invalid("no ablation fractions given"));
    }
    let mut order: Vec<usize> = (0..n_train).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng::stream(seed, rng::purpose::ABLATION, 0, 0));

    let mut rows = Vec::with_capacity(fractions.len());
    for &f in fractions {
        if !(0.0..=1.0).contains(&f) || f <= 0.0 {
            return Err(Error::invalid(format!("ablation fraction {f} outside (0, 1]")));
        }
        let k = ((f * n_train as f64).ceil() as usize).min(n_train);
        if k == 0 {
            return Err(Error::invalid(format!(
                "fraction {f} of {n_train} training cases selects no case"
            )));
        }
        let dice = run(&order[..k])?;
        rows.push(AblationRow { fraction: f, cases: k, dice });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// report writers

/// Per-case block of `metrics.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dice: f64,
    pub both_empty: bool,
    pub counts: ConfusionCounts,
}

/// `metrics.json` payload for one evaluated method.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub pooled_dice: f64,
    pub mean_case_dice: f64,
    pub az: f64,
    pub per_case: Vec<CaseMetrics>,
}

impl EvalReport {
    /// Assemble from per-case counts at a fixed threshold plus a voxel-level
    /// Az computed by the caller.
    pub fn from_cases(threshold: f64, az: f64, per_case: Vec<CaseMetrics>) -> EvalReport {
        let mut pooled = ConfusionCounts::default();
        for c in &per_case {
            pooled.add(&c.counts);
        }
        let mean_case_dice = if per_case.is_empty() {
            0.0
        } else {
            per_case.iter().map(|c| c.dice).sum::<f64>() / per_case.len() as f64
        };
        EvalReport {
            threshold,
            pooled_dice: pooled.dice(),
            mean_case_dice,
            az,
            per_case,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| Error::invalid(format!("{}: cannot serialize: {e}", path.display())))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| Error::invalid(format!("{}: cannot parse: {e}", path.display())))
}

pub fn write_roc_csv(path: &Path, curve: &RocCurve) -> Result<()> {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in &curve.points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut out = String::from("fraction,cases,dice\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.fraction, r.cases, r.dice));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
