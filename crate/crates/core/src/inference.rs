//! Whole-volume segmentation.
//!
//! The reference path slides the patch network across every brain-mask
//! voxel in batches. Single-scale networks can instead be converted to a
//! fully convolutional form — the first FC layer becomes a convolution over
//! the last feature map, the later FC layers become 1×1 convolutions — and
//! run densely over whole (zero-padded) slices, reusing the shared
//! convolution work; injected location features enter as α-scaled
//! per-voxel channels at the matching dense layer.

use crate::arch::{Batch, FusionMode, InjectionPoint, Mode, Network, NetworkSpec, Workspace};
use crate::engine::conv::{self, ConvScratch};
use crate::engine::ops::softmax2;
use crate::engine::ParameterStore;
use crate::error::{Error, Result};
use crate::sampler::{self, PreparedCase, PATCH_LEN, PATCH_SIDE};
use crate::volume::{Volume, NUM_LOCATION_FEATURES};

/// Half-window extents of a patch around its center voxel: the patch covers
/// `[c - PAD_BEFORE, c + PAD_AFTER]` in x and y.
const PAD_BEFORE: usize = PATCH_SIDE / 2;
const PAD_AFTER: usize = PATCH_SIDE / 2 - 1;

fn location_volumes<'c>(
    spec: &NetworkSpec,
    case: &'c PreparedCase,
) -> Result<Option<&'c [Volume<f32>]>> {
    if spec.injection == InjectionPoint::None {
        return Ok(None);
    }
    match &case.location {
        Some(loc) => Ok(Some(loc)),
        None => Err(Error::config(format!(
            "{}: network injects location features at {} but the case has none \
             (compute them with the features step first)",
            case.case_id, spec.injection
        ))),
    }
}

/// Classify every brain-mask voxel with the patch network, in batches.
/// Voxels outside the mask get probability 0.
pub fn segment_sliding_window(
    net: &Network,
    store: &ParameterStore<f32>,
    case: &PreparedCase,
    batch_size: usize,
) -> Result<Volume<f32>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let loc = location_volumes(&net.spec, case)?;
    let dims = case.dims;
    let mut map = Volume::zeros(dims);
    let voxels: Vec<usize> = (0..dims.numel())
        .filter(|&i| case.brain_mask.data[i] != 0)
        .collect();
    let mut ws = Workspace::new();
    let mut patch = vec![0.0f32; PATCH_LEN];
    for chunk in voxels.chunks(batch_size) {
        let n = chunk.len();
        let mut batch: Batch<f32> = Batch {
            n,
            patches: net
                .spec
                .scales
                .iter()
                .map(|_| Vec::with_capacity(n * PATCH_LEN))
                .collect(),
            locations: Vec::with_capacity(n * NUM_LOCATION_FEATURES),
            labels: Vec::new(),
        };
        for (si, &scale) in net.spec.scales.iter().enumerate() {
            for &vi in chunk {
                let (x, y, z) = dims.coords(vi);
                sampler::extract_patch(case, x, y, z, scale, &mut patch);
                batch.patches[si].extend_from_slice(&patch);
            }
        }
        for &vi in chunk {
            let (x, y, z) = dims.coords(vi);
            match loc {
                Some(loc) => batch
                    .locations
                    .extend(loc.iter().map(|v| v.get(x, y, z))),
                None => batch.locations.extend([0.0; NUM_LOCATION_FEATURES]),
            }
        }
        net.forward(store, &batch, Mode::Infer, &mut ws)?;
        for (i, &vi) in chunk.iter().enumerate() {
            map.data[vi] = ws.probs[i * 2 + 1];
        }
    }
    Ok(map)
}

/// Binary mask: voxel → 1 iff probability strictly exceeds `t`.
pub fn apply_threshold(map: &Volume<f32>, t: f64) -> Volume<u8> {
    Volume {
        dims: map.dims,
        data: map.data.iter().map(|&p| u8::from(p as f64 > t)).collect(),
    }
}

#[derive(Debug)]
struct DenseConv {
    weight: Vec<f32>,
    bias: Vec<f32>,
    c_in: usize,
    c_out: usize,
    k: usize,
}

#[derive(Debug)]
struct DenseFc {
    /// Former FC weight over the base features, reshaped `[c_out, c_in·k²]`.
    weight: Vec<f32>,
    /// Columns of the 8 injected features, `[c_out, 8]`, when this layer
    /// was the injection point.
    loc_weight: Option<Vec<f32>>,
    bias: Vec<f32>,
    c_in: usize,
    c_out: usize,
    k: usize,
}

/// A single-scale network reshaped for dense execution.
#[derive(Debug)]
pub struct DenseNetwork {
    pub spec: NetworkSpec,
    conv: Vec<DenseConv>,
    fc: Vec<DenseFc>,
}

/// Reshape an SS-family network's parameters for dense execution: the first
/// FC layer becomes a `last-side × last-side` convolution over the final
/// feature map, the remaining FC layers become 1×1 convolutions. Weights
/// are copied, not retrained.
pub fn convert_to_fully_convolutional(
    net: &Network,
    store: &ParameterStore<f32>,
) -> Result<DenseNetwork> {
    if net.spec.fusion != FusionMode::Ss {
        return Err(Error::config(format!(
            "fully convolutional execution supports the single-scale architecture, not {}",
            net.spec.fusion
        )));
    }
    let g = &net.geom;
    let conv = net
        .conv_ids(0)
        .iter()
        .enumerate()
        .map(|(l, &(w_id, b_id))| {
            let (c_in, _) = g.conv_in(l);
            let (c_out, k) = (net.spec.conv_stack[l].0, net.spec.conv_stack[l].1);
            DenseConv {
                weight: store.value(w_id).to_vec(),
                bias: store.value(b_id).to_vec(),
                c_in,
                c_out,
                k,
            }
        })
        .collect();

    let (fc1, fc2, fc3) = net.fc_ids();
    let last_side = g.conv_dims.last().unwrap().1;
    let plan = [
        // (ids, c_in of the base features, c_out, kernel, injected here?)
        (fc1[0], g.conv_dims.last().unwrap().0, g.fc1_out, last_side, InjectionPoint::Lcl),
        (fc2, g.concat_len, g.fc2_out, 1, InjectionPoint::Ffcl),
        (fc3, g.fc2_out, 2, 1, InjectionPoint::Sfcl),
    ];
    let fc = plan
        .iter()
        .map(|&((w_id, b_id), c_in, c_out, k, point)| {
            let w = store.value(w_id);
            let base = c_in * k * k;
            let injected = net.spec.injection == point;
            let in_dim = base + if injected { NUM_LOCATION_FEATURES } else { 0 };
            debug_assert_eq!(w.len(), c_out * in_dim);
            let mut weight = Vec::with_capacity(c_out * base);
            let mut loc_weight = injected.then(|| Vec::with_capacity(c_out * NUM_LOCATION_FEATURES));
            for row in w.chunks_exact(in_dim) {
                weight.extend_from_slice(&row[..base]);
                if let Some(lw) = loc_weight.as_mut() {
                    lw.extend_from_slice(&row[base..]);
                }
            }
            DenseFc {
                weight,
                loc_weight,
                bias: store.value(b_id).to_vec(),
                c_in,
                c_out,
                k,
            }
        })
        .collect();
    Ok(DenseNetwork { spec: net.spec.clone(), conv, fc })
}

/// Forward one 2-channel `h×w` slice through the dense network in valid
/// mode. `loc_planes`, when the network injects location features, holds 8
/// planes aligned to the *output* grid `(h-31) × (w-31)`: plane value at
/// output `(oy, ox)` is the feature at that position's patch center.
/// Returns the positive-class probability plane.
pub fn dense_forward(
    dn: &DenseNetwork,
    input: &[f32],
    h: usize,
    w: usize,
    loc_planes: Option<&[Vec<f32>]>,
) -> Result<Vec<f32>> {
    if h < PATCH_SIDE || w < PATCH_SIDE {
        return Err(Error::config(format!(
            "dense input {h}×{w} smaller than the {PATCH_SIDE}-voxel receptive field"
        )));
    }
    let needs_loc = dn.fc.iter().any(|l| l.loc_weight.is_some());
    let (out_h, out_w) = (h - PATCH_SIDE + 1, w - PATCH_SIDE + 1);
    match loc_planes {
        Some(planes) => {
            if !needs_loc {
                return Err(Error::config("location planes given to an uninjected network"));
            }
            if planes.len() != NUM_LOCATION_FEATURES
                || planes.iter().any(|p| p.len() != out_h * out_w)
            {
                return Err(Error::config(format!(
                    "need {NUM_LOCATION_FEATURES} location planes of {out_h}×{out_w}"
                )));
            }
        }
        None if needs_loc => {
            return Err(Error::config(
                "network injects location features but no planes were given",
            ));
        }
        None => {}
    }

    let mut scratch = ConvScratch::default();
    let mut cur = input.to_vec();
    let (mut c, mut ch, mut cw) = (2usize, h, w);
    debug_assert_eq!(cur.len(), c * ch * cw);
    for layer in &dn.conv {
        let (oh, ow) = (conv::out_side(ch, layer.k), conv::out_side(cw, layer.k));
        let mut out = vec![0.0f32; layer.c_out * oh * ow];
        conv::conv2d_forward(
            &cur, layer.c_in, ch, cw, &layer.weight, &layer.bias, layer.c_out, layer.k,
            &mut out, &mut scratch,
        );
        crate::engine::ops::relu_forward(&mut out);
        (cur, c, ch, cw) = (out, layer.c_out, oh, ow);
    }

    let alpha = dn.spec.alpha as f32;
    for (li, layer) in dn.fc.iter().enumerate() {
        let (oh, ow) = (conv::out_side(ch, layer.k), conv::out_side(cw, layer.k));
        debug_assert_eq!((oh, ow), (out_h, out_w));
        let mut out = vec![0.0f32; layer.c_out * oh * ow];
        if layer.k == 1 {
            conv::conv2d_forward(
                &cur, layer.c_in, ch, cw, &layer.weight, &layer.bias, layer.c_out, 1,
                &mut out, &mut scratch,
            );
        } else {
            // Large-kernel layer: run one output row at a time so the patch
            // matrix stays small (the full one would be c_in·k² × oh·ow).
            let mut slab = vec![0.0f32; layer.c_in * layer.k * cw];
            let mut row_out = vec![0.0f32; layer.c_out * ow];
            for oy in 0..oh {
                for ci in 0..layer.c_in {
                    let src = &cur[(ci * ch + oy) * cw..][..layer.k * cw];
                    slab[ci * layer.k * cw..][..layer.k * cw].copy_from_slice(src);
                }
                conv::conv2d_forward(
                    &slab, layer.c_in, layer.k, cw, &layer.weight, &layer.bias,
                    layer.c_out, layer.k, &mut row_out, &mut scratch,
                );
                for o in 0..layer.c_out {
                    out[(o * oh + oy) * ow..][..ow].copy_from_slice(&row_out[o * ow..][..ow]);
                }
            }
        }
        if let Some(lw) = &layer.loc_weight {
            let planes = loc_planes.expect("validated above");
            for o in 0..layer.c_out {
                let row = &mut out[o * oh * ow..][..oh * ow];
                for (j, plane) in planes.iter().enumerate() {
                    let wv = lw[o * NUM_LOCATION_FEATURES + j];
                    for (d, &v) in row.iter_mut().zip(plane.iter()) {
                        *d = (alpha * v).mul_add(wv, *d);
                    }
                }
            }
        }
        if li + 1 < dn.fc.len() {
            crate::engine::ops::relu_forward(&mut out);
        }
        (cur, c, ch, cw) = (out, layer.c_out, oh, ow);
    }
    debug_assert_eq!(c, 2);

    let pixels = out_h * out_w;
    let mut probs = vec![0.0f32; pixels];
    for p in 0..pixels {
        probs[p] = softmax2(&[cur[p], cur[pixels + p]])[1];
    }
    Ok(probs)
}

/// Dense whole-volume segmentation: each slice is zero-padded by the patch
/// half-window (matching the sliding window's out-of-volume rule), run
/// through the dense network, and masked to the brain.
pub fn segment_dense(dn: &DenseNetwork, case: &PreparedCase) -> Result<Volume<f32>> {
    let loc = location_volumes(&dn.spec, case)?;
    let dims = case.dims;
    let (x_len, y_len) = (dims.x, dims.y);
    let (ph, pw) = (
        y_len + PAD_BEFORE + PAD_AFTER,
        x_len + PAD_BEFORE + PAD_AFTER,
    );
    let mut map = Volume::zeros(dims);
    let mut input = vec![0.0f32; 2 * ph * pw];
    let mut planes: Vec<Vec<f32>> = match loc {
        Some(_) => (0..NUM_LOCATION_FEATURES)
            .map(|_| vec![0.0f32; x_len * y_len])
            .collect(),
        None => Vec::new(),
    };
    for z in 0..dims.z {
        input.iter_mut().for_each(|v| *v = 0.0);
        for (ci, vol) in [&case.flair, &case.t1].into_iter().enumerate() {
            for y in 0..y_len {
                for x in 0..x_len {
                    input[(ci * ph + y + PAD_BEFORE) * pw + x + PAD_BEFORE] = vol.get(x, y, z);
                }
            }
        }
        if let Some(loc) = loc {
            for (j, plane) in planes.iter_mut().enumerate() {
                for y in 0..y_len {
                    for x in 0..x_len {
                        plane[y * x_len + x] = loc[j].get(x, y, z);
                    }
                }
            }
        }
        let probs = dense_forward(dn, &input, ph, pw, loc.map(|_| planes.as_slice()))?;
        for y in 0..y_len {
            for x in 0..x_len {
                if case.brain_mask.get(x, y, z) != 0 {
                    map.set(x, y, z, probs[y * x_len + x]);
                }
            }
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;
    use rand::Rng;

    fn tiny_spec(injection: InjectionPoint) -> NetworkSpec {
        NetworkSpec {
            fusion: FusionMode::Ss,
            injection,
            alpha: 1.5,
            conv_stack: vec![(3, 5), (4, 3)],
            fc_widths: vec![12, 6, 2],
            dropout: 0.3,
            scales: vec![32],
        }
    }

    fn random_case(dims: Dims, seed: u64, with_location: bool) -> PreparedCase {
        let mut r = crate::rng::stream(seed, 98, 0, 0);
        let mut rand_vol = |lo: f32, hi: f32| Volume {
            dims,
            data: (0..dims.numel()).map(|_| r.gen_range(lo..hi)).collect(),
        };
        let flair = rand_vol(-1.0, 3.0);
        let t1 = rand_vol(-1.0, 3.0);
        let location = with_location.then(|| (0..NUM_LOCATION_FEATURES).map(|_| rand_vol(0.0, 1.0)).collect());
        let mut r2 = crate::rng::stream(seed, 98, 1, 0);
        let brain_mask = Volume {
            dims,
            data: (0..dims.numel()).map(|_| u8::from(r2.gen_bool(0.7))).collect(),
        };
        PreparedCase {
            case_id: format!("case_{seed}"),
            dims,
            voxel_size_mm: [1.0, 1.0, 3.0],
            flair,
            t1,
            brain_mask,
            annotation: Volume::zeros(dims),
            location,
        }
    }

    #[test]
    fn sliding_window_matches_single_sample_forward() {
        let net = Network::new(tiny_spec(InjectionPoint::Ffcl)).unwrap();
        let store = net.init_store::<f32>(31);
        let case = random_case(Dims::new(20, 18, 3), 32, true);
        let map = segment_sliding_window(&net, &store, &case, 64).unwrap();

        let mut ws = Workspace::new();
        let mut patch = vec![0.0f32; PATCH_LEN];
        let mut checked = 0;
        for vi in (0..case.dims.numel()).step_by(97) {
            let (x, y, z) = case.dims.coords(vi);
            if case.brain_mask.data[vi] == 0 {
                assert_eq!(map.data[vi], 0.0, "outside brain must be exactly 0");
                continue;
            }
            sampler::extract_patch(&case, x, y, z, 32, &mut patch);
            let loc = case.location.as_ref().unwrap();
            let batch = Batch {
                n: 1,
                patches: vec![patch.clone()],
                locations: loc.iter().map(|v| v.get(x, y, z)).collect(),
                labels: Vec::new(),
            };
            net.forward(&store, &batch, Mode::Infer, &mut ws).unwrap();
            assert_eq!(map.data[vi], ws.probs[1], "voxel ({x},{y},{z})");
            checked += 1;
        }
        assert!(checked > 5);
    }

    #[test]
    fn sliding_window_is_batch_size_invariant() {
        let net = Network::new(tiny_spec(InjectionPoint::None)).unwrap();
        let store = net.init_store::<f32>(33);
        let case = random_case(Dims::new(12, 12, 2), 34, false);
        let a = segment_sliding_window(&net, &store, &case, 1).unwrap();
        let b = segment_sliding_window(&net, &store, &case, 7).unwrap();
        let c = segment_sliding_window(&net, &store, &case, 256).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.data, c.data);
    }

    #[test]
    fn injected_network_requires_location_features() {
        let net = Network::new(tiny_spec(InjectionPoint::Sfcl)).unwrap();
        let store = net.init_store::<f32>(35);
        let case = random_case(Dims::new(8, 8, 2), 36, false);
        let err = segment_sliding_window(&net, &store, &case, 16).unwrap_err().to_string();
        assert!(err.contains("location"), "{err:?}");
        let dn = convert_to_fully_convolutional(&net, &store).unwrap();
        assert!(segment_dense(&dn, &case).is_err());
    }

    #[test]
    fn dense_agrees_with_sliding_window() {
        for injection in [InjectionPoint::None, InjectionPoint::Ffcl] {
            let net = Network::new(tiny_spec(injection)).unwrap();
            let store = net.init_store::<f32>(37);
            let case = random_case(Dims::new(40, 38, 2), 38, injection != InjectionPoint::None);
            let reference = segment_sliding_window(&net, &store, &case, 128).unwrap();
            let dn = convert_to_fully_convolutional(&net, &store).unwrap();
            let dense = segment_dense(&dn, &case).unwrap();
            let mut max_err = 0.0f32;
            for (i, (&d, &r)) in dense.data.iter().zip(reference.data.iter()).enumerate() {
                let e = (d - r).abs();
                if e > max_err {
                    max_err = e;
                }
                assert!(
                    e <= 1e-5,
                    "{injection}: voxel {i} dense {d} vs window {r} (|Δ| = {e})"
                );
            }
            assert!(max_err > 0.0, "paths should differ in rounding, not be identical");
        }
    }

    #[test]
    fn dense_degenerate_and_region_shapes() {
        let net = Network::new(tiny_spec(InjectionPoint::None)).unwrap();
        let store = net.init_store::<f32>(39);
        let dn = convert_to_fully_convolutional(&net, &store).unwrap();

        // a bare 32×32 input yields exactly one pixel, equal to the patch net
        let mut r = crate::rng::stream(40, 98, 2, 0);
        let input: Vec<f32> = (0..2 * 32 * 32).map(|_| r.gen_range(-1.0..1.0f32)).collect();
        let probs = dense_forward(&dn, &input, 32, 32, None).unwrap();
        assert_eq!(probs.len(), 1);
        let batch = Batch {
            n: 1,
            patches: vec![input.clone()],
            locations: vec![0.0; NUM_LOCATION_FEATURES],
            labels: Vec::new(),
        };
        let mut ws = Workspace::new();
        net.forward(&store, &batch, Mode::Infer, &mut ws).unwrap();
        assert!((probs[0] - ws.probs[1]).abs() <= 1e-5);

        // a 64×64 region evaluates (64-31)² positions in one pass
        let input: Vec<f32> = (0..2 * 64 * 64).map(|_| r.gen_range(-1.0..1.0f32)).collect();
        let probs = dense_forward(&dn, &input, 64, 64, None).unwrap();
        assert_eq!(probs.len(), 33 * 33);

        assert!(dense_forward(&dn, &input[..2 * 16 * 16], 16, 16, None).is_err());
    }

    #[test]
    fn dense_conversion_rejects_multi_scale() {
        let spec = NetworkSpec::standard(FusionMode::Msef, InjectionPoint::None, 1.0);
        let net = Network::new(spec).unwrap();
        let store = net.init_store::<f32>(41);
        let err = convert_to_fully_convolutional(&net, &store).unwrap_err().to_string();
        assert!(err.contains("single-scale"), "{err:?}");
    }

    #[test]
    fn threshold_is_strict() {
        let dims = Dims::new(2, 2, 1);
        let map = Volume { dims, data: vec![0.0f32, 0.5, 0.75, 1.0] };
        assert_eq!(apply_threshold(&map, 0.5).data, vec![0, 0, 1, 1]);
        assert_eq!(apply_threshold(&map, 1.0).data, vec![0, 0, 0, 0]);
        assert_eq!(apply_threshold(&map, 0.0).data, vec![0, 1, 1, 1]);
    }

    #[test]
    fn probability_map_round_trips_bit_exactly() {
        let net = Network::new(tiny_spec(InjectionPoint::None)).unwrap();
        let store = net.init_store::<f32>(43);
        let case = random_case(Dims::new(8, 8, 2), 44, false);
        let map = segment_sliding_window(&net, &store, &case, 32).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("prob.f32");
        crate::volume::write_f32_volume(&path, &map).unwrap();
        let back = crate::volume::read_f32_volume(&path, map.dims).unwrap();
        assert!(map.data.iter().zip(&back.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
