//! Network architectures: the four fusion modes and spatial-feature
//! injection.
//!
//! A [`Network`] is pure topology — parameter ids, layer geometry, and the
//! fusion wiring. Parameter values live in a [`ParameterStore`] created by
//! [`Network::init_store`], so the same topology can run in f32 (training,
//! inference) and f64 (gradient checking), and a frozen store can serve
//! concurrent readers.
//!
//! Wiring per fusion mode:
//!
//! - `SS`: one conv stream over the 2-channel scale-32 patch, flatten,
//!   FC 300 → 200 → 2.
//! - `MSEF`: as SS but the stream input stacks all three scales as channels
//!   (FLAIR then T1 per scale, scale-ascending → 6 channels).
//! - `MSIW`: three conv streams with independent parameters, each with its
//!   own width-300 FC; the three outputs concatenate (900) before the joint
//!   FC 200 → 2.
//! - `MSWS`: as MSIW but all three streams reference one shared set of conv
//!   tensors; the per-stream FC layers stay separate.
//!
//! Injection concatenates the 8 location features, each scaled by α, onto
//! the input of the designated layer, widening that layer's weight matrix
//! by 8 columns: `LCL` widens the per-stream FC (single-stream modes only),
//! `FFCL` the first joint FC, `SFCL` the final FC.

use crate::engine::conv::{self, ConvScratch};
use crate::engine::ops::{self};
use crate::engine::{fc, ParamId, ParameterStore};
use crate::error::{Error, Result};
use crate::rng;
use crate::sampler::{SampleSet, NUM_CHANNELS, PATCH_LEN, PATCH_SIDE, SCALES};
use crate::tensor::Scalar;
use crate::volume::NUM_LOCATION_FEATURES;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Ss,
    Msef,
    Msiw,
    Msws,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::Ss,
        FusionMode::Msef,
        FusionMode::Msiw,
        FusionMode::Msws,
    ];

    /// Report label, e.g. for result tables.
    pub fn label(self) -> &'static str {
        match self {
            FusionMode::Ss => "SS",
            FusionMode::Msef => "MSEF",
            FusionMode::Msiw => "MSIW",
            FusionMode::Msws => "MSWS",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ss" => Ok(FusionMode::Ss),
            "msef" => Ok(FusionMode::Msef),
            "msiw" => Ok(FusionMode::Msiw),
            "msws" => Ok(FusionMode::Msws),
            other => Err(Error::config(format!(
                "unknown fusion mode `{other}` (expected ss|msef|msiw|msws)"
            ))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FusionMode::Ss => "ss",
            FusionMode::Msef => "msef",
            FusionMode::Msiw => "msiw",
            FusionMode::Msws => "msws",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InjectionPoint {
    None,
    Lcl,
    Ffcl,
    Sfcl,
}

impl InjectionPoint {
    pub fn label(self) -> &'static str {
        match self {
            InjectionPoint::None => "none",
            InjectionPoint::Lcl => "LCL",
            InjectionPoint::Ffcl => "FFCL",
            InjectionPoint::Sfcl => "SFCL",
        }
    }
}

impl std::str::FromStr for InjectionPoint {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(InjectionPoint::None),
            "lcl" => Ok(InjectionPoint::Lcl),
            "ffcl" => Ok(InjectionPoint::Ffcl),
            "sfcl" => Ok(InjectionPoint::Sfcl),
            other => Err(Error::config(format!(
                "unknown injection point `{other}` (expected none|lcl|ffcl|sfcl)"
            ))),
        }
    }
}

impl std::fmt::Display for InjectionPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            InjectionPoint::None => "none",
            InjectionPoint::Lcl => "lcl",
            InjectionPoint::Ffcl => "ffcl",
            InjectionPoint::Sfcl => "sfcl",
        };
        f.write_str(s)
    }
}

pub const STANDARD_CONV_STACK: [(usize, usize); 4] = [(20, 7), (40, 5), (80, 3), (110, 3)];
pub const STANDARD_FC_WIDTHS: [usize; 3] = [300, 200, 2];
pub const DEFAULT_DROPOUT: f64 = 0.3;
pub const DEFAULT_ALPHA: f64 = 1.0;
/// Default validation sweep for the injection scale factor.
pub const DEFAULT_ALPHA_SWEEP: [f64; 5] = [0.1, 0.3, 1.0, 3.0, 10.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub fusion: FusionMode,
    pub injection: InjectionPoint,
    pub alpha: f64,
    /// Per conv layer: (filters, kernel size).
    pub conv_stack: Vec<(usize, usize)>,
    /// Per-stream FC width, joint FC width, output width (must end in 2).
    pub fc_widths: Vec<usize>,
    pub dropout: f64,
    pub scales: Vec<usize>,
}

impl NetworkSpec {
    /// Standard topology for a fusion mode.
    pub fn standard(fusion: FusionMode, injection: InjectionPoint, alpha: f64) -> Self {
        let scales = match fusion {
            FusionMode::Ss => vec![32],
            _ => SCALES.to_vec(),
        };
        NetworkSpec {
            fusion,
            injection,
            alpha,
            conv_stack: STANDARD_CONV_STACK.to_vec(),
            fc_widths: STANDARD_FC_WIDTHS.to_vec(),
            dropout: DEFAULT_DROPOUT,
            scales,
        }
    }

    pub fn num_streams(&self) -> usize {
        match self.fusion {
            FusionMode::Ss | FusionMode::Msef => 1,
            FusionMode::Msiw | FusionMode::Msws => 3,
        }
    }

    /// Input channels of each conv stream (MSEF stacks all scales).
    pub fn stream_in_channels(&self) -> usize {
        match self.fusion {
            FusionMode::Msef => NUM_CHANNELS * self.scales.len(),
            _ => NUM_CHANNELS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::config(m));
        match self.fusion {
            FusionMode::Ss => {
                if self.scales != [32] {
                    return cfg(format!("ss takes the single scale [32], got {:?}", self.scales));
                }
            }
            _ => {
                if self.scales != SCALES {
                    return cfg(format!(
                        "{} takes scales {SCALES:?}, got {:?}",
                        self.fusion, self.scales
                    ));
                }
            }
        }
        if self.conv_stack.is_empty() {
            return cfg("conv_stack must have at least one layer".into());
        }
        let mut side = PATCH_SIDE;
        for &(c, k) in &self.conv_stack {
            if c == 0 || k == 0 || k > side {
                return cfg(format!(
                    "conv layer ({c} filters, kernel {k}) is invalid for input side {side}"
                ));
            }
            side = conv::out_side(side, k);
        }
        if self.fc_widths.len() != 3 || *self.fc_widths.last().unwrap() != 2 {
            return cfg(format!(
                "fc_widths must be [per-stream, joint, 2], got {:?}",
                self.fc_widths
            ));
        }
        if self.fc_widths.iter().any(|&w| w == 0) {
            return cfg("fc widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return cfg(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.injection != InjectionPoint::None && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return cfg(format!("alpha must be positive and finite, got {}", self.alpha));
        }
        if self.injection == InjectionPoint::Lcl
            && matches!(self.fusion, FusionMode::Msiw | FusionMode::Msws)
        {
            return cfg(format!(
                "lcl injection is ambiguous for {} (three last-conv outputs); use ffcl or sfcl",
                self.fusion
            ));
        }
        Ok(())
    }
}

/// Computed layer sizes for one spec.
#[derive(Clone, Debug)]
pub struct Geometry {
    /// Per conv layer: (output channels, output side).
    pub conv_dims: Vec<(usize, usize)>,
    pub in_channels: usize,
    /// Flattened last-conv length per stream (channels × side²).
    pub flat_len: usize,
    pub fc1_in: usize,
    pub fc1_out: usize,
    pub concat_len: usize,
    pub fc2_in: usize,
    pub fc2_out: usize,
    pub fc3_in: usize,
}

impl Geometry {
    fn from_spec(spec: &NetworkSpec) -> Geometry {
        let in_channels = spec.stream_in_channels();
        let mut side = PATCH_SIDE;
        let conv_dims: Vec<(usize, usize)> = spec
            .conv_stack
            .iter()
            .map(|&(c, k)| {
                side = conv::out_side(side, k);
                (c, side)
            })
            .collect();
        let (c_last, s_last) = *conv_dims.last().unwrap();
        let flat_len = c_last * s_last * s_last;
        let inj = |p: InjectionPoint| {
            if spec.injection == p {
                NUM_LOCATION_FEATURES
            } else {
                0
            }
        };
        let fc1_out = spec.fc_widths[0];
        let concat_len = spec.num_streams() * fc1_out;
        Geometry {
            conv_dims,
            in_channels,
            flat_len,
            fc1_in: flat_len + inj(InjectionPoint::Lcl),
            fc1_out,
            concat_len,
            fc2_in: concat_len + inj(InjectionPoint::Ffcl),
            fc2_out: spec.fc_widths[1],
            fc3_in: spec.fc_widths[1] + inj(InjectionPoint::Sfcl),
        }
    }

    /// Conv input (channels, side) of layer `l`.
    pub(crate) fn conv_in(&self, l: usize) -> (usize, usize) {
        if l == 0 {
            (self.in_channels, PATCH_SIDE)
        } else {
            self.conv_dims[l - 1]
        }
    }
}

/// Dropout-site keys for the per-sample mask streams.
const DROP_SITE_FC2: u64 = 8;
const DROP_SITE_FC3: u64 = 9;

/// Forward-pass mode. Train mode applies inverted dropout with masks keyed
/// by (seed, epoch, sample slot, site); inference applies none.
#[derive(Clone, Copy, Debug)]
pub enum Mode {
    Infer,
    Train {
        seed: u64,
        epoch: u64,
        /// Epoch-order slot of the batch's first sample; slot `base + i`
        /// keys sample `i`'s masks, so masks are independent of batching.
        base_index: u64,
    },
}

impl Mode {
    fn mask_stream(&self, i: usize, site: u64) -> Option<rand_chacha::ChaCha8Rng> {
        match *self {
            Mode::Infer => None,
            Mode::Train { seed, epoch, base_index } => Some(rng::stream(
                seed,
                rng::purpose::DROPOUT,
                rng::pair(epoch, base_index + i as u64),
                site,
            )),
        }
    }
}

/// One batch of samples in the engine's scalar type. `patches` holds one
/// buffer per entry of the spec's `scales`, each `n × PATCH_LEN`.
#[derive(Clone, Debug)]
pub struct Batch<F> {
    pub n: usize,
    pub patches: Vec<Vec<F>>,
    /// `n × 8`.
    pub locations: Vec<F>,
    /// Empty for pure inference batches.
    pub labels: Vec<u8>,
}

impl<F: Scalar> Batch<F> {
    /// Gather `indices` out of a sample set, converting to the engine type.
    pub fn from_sample_set(set: &SampleSet, indices: &[usize], scales: &[usize]) -> Batch<F> {
        let n = indices.len();
        let mut patches = Vec::with_capacity(scales.len());
        for &scale in scales {
            let si = SCALES
                .iter()
                .position(|&s| s == scale)
                .expect("scale not in the sampled set");
            let mut buf = Vec::with_capacity(n * PATCH_LEN);
            for &i in indices {
                buf.extend(set.patch(si, i).iter().map(|&v| F::from_f32(v)));
            }
            patches.push(buf);
        }
        let mut locations = Vec::with_capacity(n * NUM_LOCATION_FEATURES);
        let mut labels = Vec::with_capacity(n);
        for &i in indices {
            locations.extend(set.location(i).iter().map(|&v| F::from_f32(v)));
            labels.push(set.labels[i]);
        }
        Batch { n, patches, locations, labels }
    }
}

/// Reusable forward/backward buffers. All activations are sample-major
/// `[n, dim]`.
#[derive(Default)]
pub struct Workspace<F> {
    n: usize,
    stream_in: Vec<F>,
    /// `[stream][conv layer]`, post-ReLU.
    acts: Vec<Vec<Vec<F>>>,
    /// Per stream: widened + masked FC input, mask, post-ReLU output.
    fc1_x: Vec<Vec<F>>,
    fc1_mask: Vec<Vec<F>>,
    fc1_act: Vec<Vec<F>>,
    concat: Vec<F>,
    fc2_x: Vec<F>,
    fc2_mask: Vec<F>,
    fc2_act: Vec<F>,
    fc3_x: Vec<F>,
    fc3_mask: Vec<F>,
    logits: Vec<F>,
    /// Per-sample class probabilities, `n × 2`.
    pub probs: Vec<F>,
    /// Per-sample unscaled `p - onehot(label)`, filled when labels present.
    d_logits: Vec<F>,
    // backward ping-pong buffers and FC gradients
    d_cur: Vec<F>,
    d_nxt: Vec<F>,
    d_fc1_x: Vec<F>,
    d_fc1_act: Vec<F>,
    d_concat: Vec<F>,
    d_fc2_x: Vec<F>,
    d_fc2_act: Vec<F>,
    d_fc3_x: Vec<F>,
    scratch: ConvScratch<F>,
}

impl<F: Scalar> Workspace<F> {
    pub fn new() -> Self {
        Workspace::default()
    }

    pub fn positive_probs(&self) -> Vec<F> {
        self.probs.chunks_exact(2).map(|p| p[1]).collect()
    }

    fn prepare(&mut self, net: &Network, n: usize, train: bool) {
        let g = &net.geom;
        let streams = net.spec.num_streams();
        self.n = n;
        if net.spec.fusion == FusionMode::Msef {
            self.stream_in.resize(n * g.in_channels * PATCH_SIDE * PATCH_SIDE, F::ZERO);
        }
        self.acts.resize_with(streams, Vec::new);
        self.fc1_x.resize_with(streams, Vec::new);
        self.fc1_mask.resize_with(streams, Vec::new);
        self.fc1_act.resize_with(streams, Vec::new);
        for s in 0..streams {
            self.acts[s].resize_with(g.conv_dims.len(), Vec::new);
            for (l, &(c, side)) in g.conv_dims.iter().enumerate() {
                self.acts[s][l].resize(n * c * side * side, F::ZERO);
            }
            self.fc1_x[s].resize(n * g.fc1_in, F::ZERO);
            self.fc1_act[s].resize(n * g.fc1_out, F::ZERO);
            if train {
                self.fc1_mask[s].resize(n * g.fc1_in, F::ZERO);
            }
        }
        self.concat.resize(n * g.concat_len, F::ZERO);
        self.fc2_x.resize(n * g.fc2_in, F::ZERO);
        self.fc2_act.resize(n * g.fc2_out, F::ZERO);
        self.fc3_x.resize(n * g.fc3_in, F::ZERO);
        if train {
            self.fc2_mask.resize(n * g.fc2_in, F::ZERO);
            self.fc3_mask.resize(n * g.fc3_in, F::ZERO);
        }
        self.logits.resize(n * 2, F::ZERO);
        self.probs.resize(n * 2, F::ZERO);
    }
}

/// Network topology over a [`ParameterStore`]. Tensor registration order is
/// the canonical checkpoint order.
#[derive(Clone, Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    pub geom: Geometry,
    /// Conv (weight, bias) ids per parameter set (1 set, or 3 for MSIW).
    conv_sets: Vec<Vec<(ParamId, ParamId)>>,
    /// Stream index → conv set index (all zero except MSIW).
    stream_set: Vec<usize>,
    /// Per-stream first FC (weight, bias).
    fc1: Vec<(ParamId, ParamId)>,
    fc2: (ParamId, ParamId),
    fc3: (ParamId, ParamId),
}

/// Tensor name and shape in canonical registration order.
fn tensor_plan(spec: &NetworkSpec, geom: &Geometry) -> Vec<(String, Vec<usize>)> {
    let mut plan = Vec::new();
    let sets = if spec.fusion == FusionMode::Msiw { 3 } else { 1 };
    for set in 0..sets {
        let prefix = if sets > 1 { format!("s{set}.") } else { String::new() };
        for (l, &(c_out, k)) in spec.conv_stack.iter().enumerate() {
            let (c_in, _) = geom.conv_in(l);
            plan.push((format!("{prefix}conv{}.w", l + 1), vec![c_out, c_in, k, k]));
            plan.push((format!("{prefix}conv{}.b", l + 1), vec![c_out]));
        }
    }
    for s in 0..spec.num_streams() {
        let prefix = if spec.num_streams() > 1 { format!("s{s}.") } else { String::new() };
        plan.push((format!("{prefix}fc1.w"), vec![geom.fc1_out, geom.fc1_in]));
        plan.push((format!("{prefix}fc1.b"), vec![geom.fc1_out]));
    }
    plan.push(("fc2.w".into(), vec![geom.fc2_out, geom.fc2_in]));
    plan.push(("fc2.b".into(), vec![geom.fc2_out]));
    plan.push(("fc3.w".into(), vec![2, geom.fc3_in]));
    plan.push(("fc3.b".into(), vec![2]));
    plan
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Network> {
        spec.validate()?;
        let geom = Geometry::from_spec(&spec);
        let n_layers = spec.conv_stack.len();
        let sets = if spec.fusion == FusionMode::Msiw { 3 } else { 1 };
        let streams = spec.num_streams();

        // ids follow tensor_plan order
        let mut next = 0usize;
        let mut take = || {
            next += 1;
            next - 1
        };
        let conv_sets: Vec<Vec<(ParamId, ParamId)>> = (0..sets)
            .map(|_| (0..n_layers).map(|_| (take(), take())).collect())
            .collect();
        let fc1: Vec<(ParamId, ParamId)> = (0..streams).map(|_| (take(), take())).collect();
        let fc2 = (take(), take());
        let fc3 = (take(), take());
        let stream_set = (0..streams)
            .map(|s| if spec.fusion == FusionMode::Msiw { s } else { 0 })
            .collect();
        Ok(Network { spec, geom, conv_sets, stream_set, fc1, fc2, fc3 })
    }

    /// Register all tensors, zero-valued, in canonical order.
    pub fn register_store<F: Scalar>(&self) -> ParameterStore<F> {
        let mut store = ParameterStore::new();
        for (name, dims) in tensor_plan(&self.spec, &self.geom) {
            store.register(name, &dims);
        }
        store
    }

    /// Register and Glorot-initialize a store. Conv fans are
    /// `c_in·k²`/`c_out·k²`; FC fans are the (possibly widened) in/out
    /// widths. Biases start at zero.
    pub fn init_store<F: Scalar>(&self, seed: u64) -> ParameterStore<F> {
        let mut store = self.register_store::<F>();
        for set in &self.conv_sets {
            for (l, &(w, _)) in set.iter().enumerate() {
                let (c_in, _) = self.geom.conv_in(l);
                let (c_out, k) = self.spec.conv_stack[l];
                store.init_glorot(w, c_in * k * k, c_out * k * k, seed);
            }
        }
        for &(w, _) in &self.fc1 {
            store.init_glorot(w, self.geom.fc1_in, self.geom.fc1_out, seed);
        }
        store.init_glorot(self.fc2.0, self.geom.fc2_in, self.geom.fc2_out, seed);
        store.init_glorot(self.fc3.0, self.geom.fc3_in, 2, seed);
        store
    }

    /// Number of distinct convolutional parameters (MSWS counts its shared
    /// set once).
    pub fn conv_parameter_count(&self) -> usize {
        let per_set: usize = self
            .spec
            .conv_stack
            .iter()
            .enumerate()
            .map(|(l, &(c_out, k))| {
                let (c_in, _) = self.geom.conv_in(l);
                c_out * (c_in * k * k) + c_out
            })
            .sum();
        per_set * self.conv_sets.len()
    }

    /// Total distinct parameters.
    pub fn total_parameter_count(&self) -> usize {
        tensor_plan(&self.spec, &self.geom)
            .iter()
            .map(|(_, dims)| dims.iter().product::<usize>())
            .sum()
    }

    pub fn flat_len(&self) -> usize {
        self.geom.flat_len
    }

    /// Ids of the per-stream FC, joint FC, and output FC layers (weight,
    /// bias). Used by the dense fully-convolutional conversion.
    pub(crate) fn fc_ids(&self) -> (&[(ParamId, ParamId)], (ParamId, ParamId), (ParamId, ParamId)) {
        (&self.fc1, self.fc2, self.fc3)
    }

    pub(crate) fn conv_ids(&self, stream: usize) -> &[(ParamId, ParamId)] {
        &self.conv_sets[self.stream_set[stream]]
    }

    fn check_batch<F: Scalar>(&self, batch: &Batch<F>) -> Result<()> {
        if batch.patches.len() != self.spec.scales.len() {
            return Err(Error::invalid(format!(
                "batch carries {} scales, the network takes {}",
                batch.patches.len(),
                self.spec.scales.len()
            )));
        }
        for (i, p) in batch.patches.iter().enumerate() {
            if p.len() != batch.n * PATCH_LEN {
                return Err(Error::invalid(format!(
                    "scale {} buffer holds {} values, expected {}",
                    self.spec.scales[i],
                    p.len(),
                    batch.n * PATCH_LEN
                )));
            }
        }
        if batch.locations.len() != batch.n * NUM_LOCATION_FEATURES {
            return Err(Error::invalid("location buffer size mismatch"));
        }
        if !batch.labels.is_empty() && batch.labels.len() != batch.n {
            return Err(Error::invalid("label count does not match batch size"));
        }
        Ok(())
    }

    /// Forward pass. Fills `ws.probs`; returns the mean cross-entropy loss
    /// when the batch carries labels.
    pub fn forward<F: Scalar>(
        &self,
        store: &ParameterStore<F>,
        batch: &Batch<F>,
        mode: Mode,
        ws: &mut Workspace<F>,
    ) -> Result<Option<F>> {
        self.check_batch(batch)?;
        let n = batch.n;
        let g = &self.geom;
        let train = matches!(mode, Mode::Train { .. }) && self.spec.dropout > 0.0;
        ws.prepare(self, n, train);
        let alpha = F::from_f64(self.spec.alpha);
        let streams = self.spec.num_streams();
        let in_len = g.in_channels * PATCH_SIDE * PATCH_SIDE;

        // MSEF: stack the scales as channels per sample
        if self.spec.fusion == FusionMode::Msef {
            for i in 0..n {
                for (si, p) in batch.patches.iter().enumerate() {
                    let dst = i * in_len + si * PATCH_LEN;
                    ws.stream_in[dst..dst + PATCH_LEN]
                        .copy_from_slice(&p[i * PATCH_LEN..(i + 1) * PATCH_LEN]);
                }
            }
        }

        for s in 0..streams {
            let conv_ids = self.conv_ids(s);
            let stream_input: &[F] = if self.spec.fusion == FusionMode::Msef {
                &ws.stream_in
            } else {
                &batch.patches[s]
            };
            // conv stack, one sample at a time
            for (l, &(w_id, b_id)) in conv_ids.iter().enumerate() {
                let (c_in, side_in) = g.conv_in(l);
                let (c_out, side_out) = g.conv_dims[l];
                let k = self.spec.conv_stack[l].1;
                let in_sz = c_in * side_in * side_in;
                let out_sz = c_out * side_out * side_out;
                let (w, b) = (store.value(w_id), store.value(b_id));
                let (before, after) = ws.acts[s].split_at_mut(l);
                let input: &[F] = if l == 0 { stream_input } else { &before[l - 1] };
                let out = &mut after[0];
                for i in 0..n {
                    conv::conv2d_forward(
                        &input[i * in_sz..(i + 1) * in_sz],
                        c_in,
                        side_in,
                        side_in,
                        w,
                        b,
                        c_out,
                        k,
                        &mut out[i * out_sz..(i + 1) * out_sz],
                        &mut ws.scratch,
                    );
                }
                ops::relu_forward(out);
            }

            // widen with α-scaled location features at LCL, then dropout
            let flat = &ws.acts[s][conv_ids.len() - 1];
            for i in 0..n {
                let row = &mut ws.fc1_x[s][i * g.fc1_in..(i + 1) * g.fc1_in];
                row[..g.flat_len].copy_from_slice(&flat[i * g.flat_len..(i + 1) * g.flat_len]);
                if self.spec.injection == InjectionPoint::Lcl {
                    for (d, &v) in row[g.flat_len..]
                        .iter_mut()
                        .zip(&batch.locations[i * NUM_LOCATION_FEATURES..])
                    {
                        *d = alpha * v;
                    }
                }
            }
            if train {
                for i in 0..n {
                    let mrow = &mut ws.fc1_mask[s][i * g.fc1_in..(i + 1) * g.fc1_in];
                    let mut r = mode.mask_stream(i, s as u64).unwrap();
                    ops::dropout_mask(self.spec.dropout, &mut r, mrow);
                    ops::apply_mask(&mut ws.fc1_x[s][i * g.fc1_in..(i + 1) * g.fc1_in], mrow);
                }
            }
            fc::fc_forward(
                &ws.fc1_x[s],
                store.value(self.fc1[s].0),
                store.value(self.fc1[s].1),
                &mut ws.fc1_act[s],
                n,
                g.fc1_in,
                g.fc1_out,
            );
            ops::relu_forward(&mut ws.fc1_act[s]);
            // concatenate stream outputs
            for i in 0..n {
                ws.concat[i * g.concat_len + s * g.fc1_out..][..g.fc1_out]
                    .copy_from_slice(&ws.fc1_act[s][i * g.fc1_out..(i + 1) * g.fc1_out]);
            }
        }

        // joint FC with optional FFCL widening
        for i in 0..n {
            let row = &mut ws.fc2_x[i * g.fc2_in..(i + 1) * g.fc2_in];
            row[..g.concat_len].copy_from_slice(&ws.concat[i * g.concat_len..(i + 1) * g.concat_len]);
            if self.spec.injection == InjectionPoint::Ffcl {
                for (d, &v) in row[g.concat_len..]
                    .iter_mut()
                    .zip(&batch.locations[i * NUM_LOCATION_FEATURES..])
                {
                    *d = alpha * v;
                }
            }
        }
        if train {
            for i in 0..n {
                let mrow = &mut ws.fc2_mask[i * g.fc2_in..(i + 1) * g.fc2_in];
                let mut r = mode.mask_stream(i, DROP_SITE_FC2).unwrap();
                ops::dropout_mask(self.spec.dropout, &mut r, mrow);
                ops::apply_mask(&mut ws.fc2_x[i * g.fc2_in..(i + 1) * g.fc2_in], mrow);
            }
        }
        fc::fc_forward(
            &ws.fc2_x,
            store.value(self.fc2.0),
            store.value(self.fc2.1),
            &mut ws.fc2_act,
            n,
            g.fc2_in,
            g.fc2_out,
        );
        ops::relu_forward(&mut ws.fc2_act);

        // final FC with optional SFCL widening
        for i in 0..n {
            let row = &mut ws.fc3_x[i * g.fc3_in..(i + 1) * g.fc3_in];
            row[..g.fc2_out].copy_from_slice(&ws.fc2_act[i * g.fc2_out..(i + 1) * g.fc2_out]);
            if self.spec.injection == InjectionPoint::Sfcl {
                for (d, &v) in row[g.fc2_out..]
                    .iter_mut()
                    .zip(&batch.locations[i * NUM_LOCATION_FEATURES..])
                {
                    *d = alpha * v;
                }
            }
        }
        if train {
            for i in 0..n {
                let mrow = &mut ws.fc3_mask[i * g.fc3_in..(i + 1) * g.fc3_in];
                let mut r = mode.mask_stream(i, DROP_SITE_FC3).unwrap();
                ops::dropout_mask(self.spec.dropout, &mut r, mrow);
                ops::apply_mask(&mut ws.fc3_x[i * g.fc3_in..(i + 1) * g.fc3_in], mrow);
            }
        }
        fc::fc_forward(
            &ws.fc3_x,
            store.value(self.fc3.0),
            store.value(self.fc3.1),
            &mut ws.logits,
            n,
            g.fc3_in,
            2,
        );

        if batch.labels.is_empty() {
            for i in 0..n {
                let p = ops::softmax2(&ws.logits[i * 2..i * 2 + 2]);
                ws.probs[i * 2] = p[0];
                ws.probs[i * 2 + 1] = p[1];
            }
            ws.d_logits.clear();
            Ok(None)
        } else {
            ws.d_logits.resize(n * 2, F::ZERO);
            let mut loss_sum = F::ZERO;
            for i in 0..n {
                let (loss, p, d) =
                    ops::softmax_xent(&ws.logits[i * 2..i * 2 + 2], batch.labels[i] as usize);
                loss_sum += loss;
                ws.probs[i * 2] = p[0];
                ws.probs[i * 2 + 1] = p[1];
                ws.d_logits[i * 2] = d[0];
                ws.d_logits[i * 2 + 1] = d[1];
            }
            Ok(Some(loss_sum / F::from_f64(n as f64)))
        }
    }

    /// Backward pass for the mean loss over the batch; accumulates into the
    /// store's gradients. Requires a preceding labeled `forward` on the same
    /// batch and workspace (whose dropout masks it reuses).
    pub fn backward<F: Scalar>(
        &self,
        store: &mut ParameterStore<F>,
        batch: &Batch<F>,
        ws: &mut Workspace<F>,
    ) {
        let n = batch.n;
        let g = &self.geom;
        assert_eq!(ws.d_logits.len(), n * 2, "backward requires a labeled forward pass");
        let train = !ws.fc3_mask.is_empty();
        let inv_n = F::from_f64(1.0 / n as f64);

        // d loss / d logits, scaled for the batch mean
        let d_y: Vec<F> = ws.d_logits.iter().map(|&d| d * inv_n).collect();

        // fc3
        ws.d_fc3_x.resize(n * g.fc3_in, F::ZERO);
        {
            let (wp, bp) = store.pair_mut(self.fc3.0, self.fc3.1);
            fc::fc_backward(
                &ws.fc3_x,
                &wp.value,
                &d_y,
                &mut wp.grad,
                &mut bp.grad,
                Some(&mut ws.d_fc3_x),
                n,
                g.fc3_in,
                2,
            );
        }
        if train {
            ops::apply_mask(&mut ws.d_fc3_x, &ws.fc3_mask);
        }
        ws.d_fc2_act.resize(n * g.fc2_out, F::ZERO);
        for i in 0..n {
            ws.d_fc2_act[i * g.fc2_out..(i + 1) * g.fc2_out]
                .copy_from_slice(&ws.d_fc3_x[i * g.fc3_in..i * g.fc3_in + g.fc2_out]);
        }
        ops::relu_backward(&ws.fc2_act, &mut ws.d_fc2_act);

        // fc2
        ws.d_fc2_x.resize(n * g.fc2_in, F::ZERO);
        {
            let (wp, bp) = store.pair_mut(self.fc2.0, self.fc2.1);
            fc::fc_backward(
                &ws.fc2_x,
                &wp.value,
                &ws.d_fc2_act,
                &mut wp.grad,
                &mut bp.grad,
                Some(&mut ws.d_fc2_x),
                n,
                g.fc2_in,
                g.fc2_out,
            );
        }
        if train {
            ops::apply_mask(&mut ws.d_fc2_x, &ws.fc2_mask);
        }
        ws.d_concat.resize(n * g.concat_len, F::ZERO);
        for i in 0..n {
            ws.d_concat[i * g.concat_len..(i + 1) * g.concat_len]
                .copy_from_slice(&ws.d_fc2_x[i * g.fc2_in..i * g.fc2_in + g.concat_len]);
        }

        let max_act = g.conv_dims.iter().map(|&(c, s)| c * s * s).max().unwrap();
        ws.d_cur.resize(n * max_act, F::ZERO);
        ws.d_nxt.resize(n * max_act, F::ZERO);

        for s in 0..self.spec.num_streams() {
            // per-stream FC
            ws.d_fc1_act.resize(n * g.fc1_out, F::ZERO);
            for i in 0..n {
                ws.d_fc1_act[i * g.fc1_out..(i + 1) * g.fc1_out].copy_from_slice(
                    &ws.d_concat[i * g.concat_len + s * g.fc1_out..][..g.fc1_out],
                );
            }
            ops::relu_backward(&ws.fc1_act[s], &mut ws.d_fc1_act);
            ws.d_fc1_x.resize(n * g.fc1_in, F::ZERO);
            {
                let (wp, bp) = store.pair_mut(self.fc1[s].0, self.fc1[s].1);
                fc::fc_backward(
                    &ws.fc1_x[s],
                    &wp.value,
                    &ws.d_fc1_act,
                    &mut wp.grad,
                    &mut bp.grad,
                    Some(&mut ws.d_fc1_x),
                    n,
                    g.fc1_in,
                    g.fc1_out,
                );
            }
            if train {
                ops::apply_mask(&mut ws.d_fc1_x, &ws.fc1_mask[s]);
            }

            // conv stack, last layer first
            let conv_ids = self.conv_ids(s);
            let n_layers = conv_ids.len();
            for i in 0..n {
                ws.d_cur[i * g.flat_len..(i + 1) * g.flat_len]
                    .copy_from_slice(&ws.d_fc1_x[i * g.fc1_in..i * g.fc1_in + g.flat_len]);
            }
            for l in (0..n_layers).rev() {
                let (c_in, side_in) = g.conv_in(l);
                let (c_out, side_out) = g.conv_dims[l];
                let k = self.spec.conv_stack[l].1;
                let in_sz = c_in * side_in * side_in;
                let out_sz = c_out * side_out * side_out;
                ops::relu_backward(&ws.acts[s][l], &mut ws.d_cur[..n * out_sz]);
                let stream_input: &[F] = if self.spec.fusion == FusionMode::Msef {
                    &ws.stream_in
                } else {
                    &batch.patches[s]
                };
                let input: &[F] = if l == 0 { stream_input } else { &ws.acts[s][l - 1] };
                let (w_id, b_id) = conv_ids[l];
                let (wp, bp) = store.pair_mut(w_id, b_id);
                for i in 0..n {
                    let d_in = if l > 0 {
                        Some(&mut ws.d_nxt[i * in_sz..(i + 1) * in_sz])
                    } else {
                        None
                    };
                    conv::conv2d_backward(
                        &input[i * in_sz..(i + 1) * in_sz],
                        c_in,
                        side_in,
                        side_in,
                        &wp.value,
                        c_out,
                        k,
                        &ws.d_cur[i * out_sz..(i + 1) * out_sz],
                        &mut wp.grad,
                        &mut bp.grad,
                        d_in,
                        &mut ws.scratch,
                    );
                }
                std::mem::swap(&mut ws.d_cur, &mut ws.d_nxt);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// checkpoints

const CHECKPOINT_MAGIC: &[u8; 4] = b"LSNN";
const CHECKPOINT_VERSION: u32 = 1;

/// Write a checkpoint: magic, version, spec JSON, then every tensor's values
/// as f32 in canonical order.
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    spec: &NetworkSpec,
    store: &ParameterStore<F>,
) -> Result<()> {
    let json = serde_json::to_vec(spec)
        .map_err(|e| Error::invalid(format!("cannot serialize network spec: {e}")))?;
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    let io = |e| Error::io(path, e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    let flat = store.flatten_f32();
    w.write_all(&(flat.len() as u64).to_le_bytes()).map_err(io)?;
    for v in flat {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Read back a checkpoint's spec and flat f32 parameters.
pub fn load_checkpoint(path: &Path) -> Result<(NetworkSpec, Vec<f32>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let bad = |msg: String| Error::invalid(format!("{}: {msg}", path.display()));
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:?}, not a checkpoint")));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b).map_err(io)?;
    let version = u32::from_le_bytes(u32b);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    r.read_exact(&mut u32b).map_err(io)?;
    let json_len = u32::from_le_bytes(u32b) as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json).map_err(io)?;
    let spec: NetworkSpec = serde_json::from_slice(&json)
        .map_err(|e| bad(format!("unreadable network spec: {e}")))?;
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b).map_err(io)?;
    let count = u64::from_le_bytes(u64b) as usize;
    let mut flat = Vec::with_capacity(count);
    let mut f32b = [0u8; 4];
    for i in 0..count {
        r.read_exact(&mut f32b)
            .map_err(|_| bad(format!("truncated at parameter {i} of {count}")))?;
        flat.push(f32::from_le_bytes(f32b));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(io)? != 0 {
        return Err(bad("trailing bytes after parameters".to_string()));
    }
    Ok((spec, flat))
}

/// Rebuild a network and its f32 store from a checkpoint.
pub fn load_network(path: &Path) -> Result<(Network, ParameterStore<f32>)> {
    let (spec, flat) = load_checkpoint(path)?;
    let net = Network::new(spec)?;
    let mut store = net.register_store::<f32>();
    store.load_f32(&flat)?;
    Ok((net, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::gradcheck;
    use rand::Rng;

    /// Small stack for fast tests: 32→28→26, flatten 4·26² = 2704.
    fn tiny_spec(fusion: FusionMode, injection: InjectionPoint) -> NetworkSpec {
        NetworkSpec {
            fusion,
            injection,
            alpha: 1.0,
            conv_stack: vec![(3, 5), (4, 3)],
            fc_widths: vec![10, 6, 2],
            dropout: 0.3,
            scales: match fusion {
                FusionMode::Ss => vec![32],
                _ => SCALES.to_vec(),
            },
        }
    }

    fn random_batch<F: Scalar>(spec: &NetworkSpec, n: usize, seed: u64, labels: bool) -> Batch<F> {
        let mut r = crate::rng::stream(seed, 98, 0, 0);
        let patches = (0..spec.scales.len())
            .map(|_| (0..n * PATCH_LEN).map(|_| F::from_f64(r.gen_range(-1.0..1.0))).collect())
            .collect();
        let locations = (0..n * NUM_LOCATION_FEATURES)
            .map(|_| F::from_f64(r.gen_range(0.0..1.0)))
            .collect();
        let labels = if labels {
            (0..n).map(|_| r.gen_range(0..2u8)).collect()
        } else {
            Vec::new()
        };
        Batch { n, patches, locations, labels }
    }

    #[test]
    fn parameter_count_oracles() {
        let ss = Network::new(NetworkSpec::standard(FusionMode::Ss, InjectionPoint::None, 1.0))
            .unwrap();
        assert_eq!(ss.flat_len(), 35_640);
        assert_eq!(ss.conv_parameter_count(), 130_210);
        assert_eq!(ss.total_parameter_count(), 10_883_112);
        assert!(ss.total_parameter_count() > 1_000_000);
        assert_eq!(
            ss.geom.conv_dims,
            vec![(20, 26), (40, 22), (80, 20), (110, 18)]
        );

        let msiw =
            Network::new(NetworkSpec::standard(FusionMode::Msiw, InjectionPoint::None, 1.0))
                .unwrap();
        assert_eq!(msiw.conv_parameter_count(), 3 * 130_210);
        let msws =
            Network::new(NetworkSpec::standard(FusionMode::Msws, InjectionPoint::None, 1.0))
                .unwrap();
        assert_eq!(msws.conv_parameter_count(), 130_210);

        let msef =
            Network::new(NetworkSpec::standard(FusionMode::Msef, InjectionPoint::None, 1.0))
                .unwrap();
        assert_eq!(msef.geom.in_channels, 6);

        // store registration matches the counting
        let store = ss.register_store::<f32>();
        assert_eq!(store.total_parameters(), ss.total_parameter_count());
    }

    #[test]
    fn invalid_specs_rejected() {
        for fusion in [FusionMode::Msiw, FusionMode::Msws] {
            let spec = NetworkSpec::standard(fusion, InjectionPoint::Lcl, 1.0);
            assert!(Network::new(spec).is_err(), "lcl on {fusion} must be rejected");
        }
        let mut spec = NetworkSpec::standard(FusionMode::Ss, InjectionPoint::Ffcl, 1.0);
        spec.alpha = 0.0;
        assert!(Network::new(spec).is_err(), "alpha 0 with injection must be rejected");
        let mut spec = NetworkSpec::standard(FusionMode::Ss, InjectionPoint::None, 1.0);
        spec.scales = vec![32, 64, 128];
        assert!(Network::new(spec).is_err(), "ss takes one scale");
        let mut spec = NetworkSpec::standard(FusionMode::Ss, InjectionPoint::None, 1.0);
        spec.fc_widths = vec![300, 200, 3];
        assert!(Network::new(spec).is_err(), "output width must be 2");
    }

    #[test]
    fn forward_is_simplex_and_deterministic_for_every_fusion() {
        for fusion in FusionMode::ALL {
            let net = Network::new(NetworkSpec::standard(fusion, InjectionPoint::None, 1.0))
                .unwrap();
            let store = net.init_store::<f32>(3);
            let batch = random_batch::<f32>(&net.spec, 2, 4, false);
            let mut ws = Workspace::new();
            net.forward(&store, &batch, Mode::Infer, &mut ws).unwrap();
            assert_eq!(ws.probs.len(), 4);
            for p in ws.probs.chunks_exact(2) {
                assert!(p[0] >= 0.0 && p[1] >= 0.0, "{fusion}: {p:?}");
                assert!((p[0] + p[1] - 1.0).abs() < 1e-6, "{fusion}: {p:?}");
                assert!(p[1] > 0.001 && p[1] < 0.999, "{fusion}: fresh net too confident {p:?}");
            }
            let first = ws.probs.clone();
            net.forward(&store, &batch, Mode::Infer, &mut ws).unwrap();
            assert_eq!(first, ws.probs, "{fusion}: inference must be bitwise repeatable");
        }
    }

    #[test]
    fn train_mode_dropout_is_keyed() {
        let net = Network::new(tiny_spec(FusionMode::Ss, InjectionPoint::None)).unwrap();
        let store = net.init_store::<f32>(5);
        let batch = random_batch::<f32>(&net.spec, 3, 6, true);
        let mut ws = Workspace::new();
        let mode = Mode::Train { seed: 11, epoch: 0, base_index: 0 };
        let l1 = net.forward(&store, &batch, mode, &mut ws).unwrap().unwrap();
        let p1 = ws.probs.clone();
        let l2 = net.forward(&store, &batch, mode, &mut ws).unwrap().unwrap();
        assert_eq!(l1, l2);
        assert_eq!(p1, ws.probs);
        let l3 = net
            .forward(&store, &batch, Mode::Train { seed: 11, epoch: 1, base_index: 0 }, &mut ws)
            .unwrap()
            .unwrap();
        assert_ne!(l1, l3, "a different epoch must draw different masks");
        let l4 = net.forward(&store, &batch, Mode::Infer, &mut ws).unwrap().unwrap();
        assert_ne!(l1, l4, "train and infer modes must differ under dropout");
    }

    #[test]
    fn zero_location_features_match_column_dropped_twin() {
        for injection in [InjectionPoint::Lcl, InjectionPoint::Ffcl, InjectionPoint::Sfcl] {
            let inj_net = Network::new(tiny_spec(FusionMode::Ss, injection)).unwrap();
            let inj_store = inj_net.init_store::<f32>(7);
            let plain_net = Network::new(tiny_spec(FusionMode::Ss, InjectionPoint::None)).unwrap();
            let mut plain_store = plain_net.register_store::<f32>();

            // copy parameters, dropping the 8 injected columns of the
            // widened layer
            for (pid, param) in inj_store.iter().enumerate() {
                let dst = plain_store.find(&param.name).unwrap();
                let narrow_in = match (injection, param.name.as_str()) {
                    (InjectionPoint::Lcl, "fc1.w") => Some(plain_net.geom.fc1_in),
                    (InjectionPoint::Ffcl, "fc2.w") => Some(plain_net.geom.fc2_in),
                    (InjectionPoint::Sfcl, "fc3.w") => Some(plain_net.geom.fc3_in),
                    _ => None,
                };
                let src = inj_store.value(pid);
                let out = plain_store.value_mut(dst);
                match narrow_in {
                    None => out.copy_from_slice(src),
                    Some(w_in) => {
                        let wide_in = w_in + NUM_LOCATION_FEATURES;
                        for (o, row) in src.chunks_exact(wide_in).enumerate() {
                            out[o * w_in..(o + 1) * w_in].copy_from_slice(&row[..w_in]);
                        }
                    }
                }
            }

            let mut batch = random_batch::<f32>(&inj_net.spec, 3, 8, false);
            batch.locations.iter_mut().for_each(|v| *v = 0.0);
            let mut ws = Workspace::new();
            inj_net.forward(&inj_store, &batch, Mode::Infer, &mut ws).unwrap();
            let inj_probs = ws.probs.clone();
            let mut ws2 = Workspace::new();
            plain_net.forward(&plain_store, &batch, Mode::Infer, &mut ws2).unwrap();
            assert_eq!(
                inj_probs, ws2.probs,
                "{injection:?}: zero features must match the column-dropped twin"
            );
        }
    }

    #[test]
    fn alpha_reparameterization_is_exactly_invariant() {
        // power-of-two scale so both rescalings are exact in binary fp
        let c = 8.0f64;
        let base = Network::new(tiny_spec(FusionMode::Ss, InjectionPoint::Ffcl)).unwrap();
        let base_store = base.init_store::<f32>(9);
        let mut scaled_spec = base.spec.clone();
        scaled_spec.alpha = base.spec.alpha * c;
        let scaled = Network::new(scaled_spec).unwrap();
        let mut scaled_store = base_store.clone();
        let w_id = scaled_store.find("fc2.w").unwrap();
        let fc2_in = base.geom.fc2_in;
        let concat = base.geom.concat_len;
        for row in scaled_store.value_mut(w_id).chunks_exact_mut(fc2_in) {
            for v in &mut row[concat..] {
                *v /= c as f32;
            }
        }
        let batch = random_batch::<f32>(&base.spec, 4, 10, false);
        let mut ws1 = Workspace::new();
        base.forward(&base_store, &batch, Mode::Infer, &mut ws1).unwrap();
        let mut ws2 = Workspace::new();
        scaled.forward(&scaled_store, &batch, Mode::Infer, &mut ws2).unwrap();
        assert_eq!(ws1.probs, ws2.probs, "reparameterized forward must be bitwise identical");
    }

    #[test]
    fn msws_ties_conv_gradients_across_streams() {
        let msws = Network::new(tiny_spec(FusionMode::Msws, InjectionPoint::None)).unwrap();
        let mut msws_store = msws.init_store::<f64>(13);
        let msiw = Network::new(tiny_spec(FusionMode::Msiw, InjectionPoint::None)).unwrap();
        let mut msiw_store = msiw.register_store::<f64>();

        // clone MSWS parameters into MSIW (conv set duplicated per stream)
        for param in msiw_store.params_mut() {
            let src_name = param.name.strip_prefix("s0.").or_else(|| param.name.strip_prefix("s1."))
                .or_else(|| param.name.strip_prefix("s2."));
            let lookup = match src_name {
                Some(stripped) if stripped.starts_with("conv") => stripped.to_string(),
                _ => param.name.clone(),
            };
            let src = msws_store.find(&lookup).unwrap();
            param.value.copy_from_slice(msws_store.value(src));
        }

        let batch = random_batch::<f64>(&msws.spec, 3, 14, true);
        let mut ws = Workspace::new();
        let l_ws = msws.forward(&msws_store, &batch, Mode::Infer, &mut ws).unwrap().unwrap();
        msws.backward(&mut msws_store, &batch, &mut ws);
        let mut ws2 = Workspace::new();
        let l_iw = msiw.forward(&msiw_store, &batch, Mode::Infer, &mut ws2).unwrap().unwrap();
        msiw.backward(&mut msiw_store, &batch, &mut ws2);
        assert_eq!(l_ws, l_iw, "identical parameters must give identical loss");

        // the shared gradient equals the sum of the three per-stream ones
        for l in 1..=2 {
            for suffix in ["w", "b"] {
                let name = format!("conv{l}.{suffix}");
                let shared = msws_store.grad(msws_store.find(&name).unwrap());
                let per_stream: Vec<&[f64]> = (0..3)
                    .map(|s| msiw_store.grad(msiw_store.find(&format!("s{s}.{name}")).unwrap()))
                    .collect();
                for (i, &g) in shared.iter().enumerate() {
                    let sum: f64 = per_stream.iter().map(|p| p[i]).sum();
                    assert!(
                        (g - sum).abs() <= 1e-9 * sum.abs().max(1.0),
                        "{name}[{i}]: shared {g} vs stream sum {sum}"
                    );
                }
            }
        }
    }

    #[test]
    fn full_network_gradients_match_finite_differences() {
        // whole-net gradient check on a small topology, dropout off
        let mut spec = tiny_spec(FusionMode::Msws, InjectionPoint::Ffcl);
        spec.dropout = 0.0;
        let net = Network::new(spec).unwrap();
        let mut store = net.init_store::<f64>(21);
        let batch = random_batch::<f64>(&net.spec, 2, 22, true);

        let mut ws = Workspace::new();
        let net2 = net.clone();
        let batch2 = batch.clone();
        let mut ws2 = Workspace::new();
        let report = gradcheck::gradient_check(
            &mut store,
            |st| {
                st.zero_grads();
                let loss = net.forward(st, &batch, Mode::Infer, &mut ws).unwrap().unwrap();
                net.backward(st, &batch, &mut ws);
                loss.to_f64()
            },
            |st| {
                net2.forward(st, &batch2, Mode::Infer, &mut ws2)
                    .unwrap()
                    .unwrap()
                    .to_f64()
            },
            Some(6),
            23,
            gradcheck::DEFAULT_STEP,
        );
        assert!(
            report.passes(gradcheck::DEFAULT_TOLERANCE),
            "max rel err {} at {}[{}]",
            report.max_rel_err,
            report.worst_param,
            report.worst_index
        );
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let net = Network::new(tiny_spec(FusionMode::Msef, InjectionPoint::Sfcl)).unwrap();
        let store = net.init_store::<f32>(31);
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("model.lsnn");
        save_checkpoint(&path, &net.spec, &store).unwrap();
        let (spec2, flat) = load_checkpoint(&path).unwrap();
        assert_eq!(spec2, net.spec);
        assert_eq!(flat, store.flatten_f32());
        let (net2, store2) = load_network(&path).unwrap();
        assert_eq!(net2.spec, net.spec);
        assert_eq!(store2.flatten_f32(), store.flatten_f32());

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[1] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn spec_json_uses_contracted_keys() {
        let spec = NetworkSpec::standard(FusionMode::Msws, InjectionPoint::Ffcl, 1.0);
        let json = serde_json::to_value(&spec).unwrap();
        let obj = json.as_object().unwrap();
        for key in ["fusion", "injection", "alpha", "conv_stack", "fc_widths", "dropout", "scales"] {
            assert!(obj.contains_key(key), "missing key {key}");
        }
        assert_eq!(obj["fusion"], "msws");
        assert_eq!(obj["injection"], "ffcl");
        let back: NetworkSpec = serde_json::from_value(json).unwrap();
        assert_eq!(back, spec);
    }
}
