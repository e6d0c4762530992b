//! Spatial-location features.
//!
//! Eight per-voxel features, each normalized to [0, 1]:
//!
//! | index | feature                               |
//! |-------|---------------------------------------|
//! | 0     | in-plane x within the brain bounding box |
//! | 1     | in-plane y within the brain bounding box |
//! | 2     | slice coordinate z within the bounding box |
//! | 3     | distance to the left lateral ventricle |
//! | 4     | distance to the right lateral ventricle |
//! | 5     | distance to the cortex (brain-mask boundary) |
//! | 6     | distance to the midsagittal plane |
//! | 7     | smoothed lesion prior from the training annotations |
//!
//! Distances are exact per-slice 2-D Euclidean distance transforms in
//! millimeters (slice thickness typically dominates in-plane spacing, so
//! distances are computed within each axial slice), normalized per case by
//! the maximum over brain voxels. Slices without any structure voxel get
//! the per-case maximum computed distance (the volume diagonal if the
//! structure is absent everywhere).

use crate::error::{Error, Result};
use crate::volume::{CaseRecord, Dims, Volume, NUM_LOCATION_FEATURES};

pub const FEATURE_NAMES: [&str; NUM_LOCATION_FEATURES] = [
    "coord_x",
    "coord_y",
    "coord_z",
    "dist_ventricle_left",
    "dist_ventricle_right",
    "dist_cortex",
    "dist_midsagittal",
    "lesion_prior",
];

/// Default in-plane smoothing (in voxels) for the lesion prior.
pub const DEFAULT_PRIOR_SIGMA: f64 = 2.0;

// ---------------------------------------------------------------------------
// exact squared Euclidean distance transform
//
// Distances are computed on an integer grid: spacings are quantized to
// micrometers and all arithmetic (parabola heights, envelope intersections,
// final evaluations) is integer-exact — intersections are compared as i128
// rationals instead of floating-point quotients. The result is therefore
// *identical* to a brute-force minimum over seed voxels, not approximately
// equal.

/// Squared-distance sentinel for "no seed reachable". Any value at or above
/// half of this is treated as unreachable.
pub const EDT_UNREACHABLE: i64 = i64::MAX / 4;

/// Lower envelope of parabolas for one scan line. `f` holds squared
/// distances (or `EDT_UNREACHABLE`), `s2` the squared grid spacing in
/// integer units. Writes `d[i] = min_j f[j] + s2*(i-j)^2` exactly.
fn envelope_1d(
    f: &[i64],
    s2: i64,
    d: &mut [i64],
    v: &mut Vec<usize>,
    zn: &mut Vec<i128>,
    zd: &mut Vec<i128>,
) {
    let n = f.len();
    debug_assert!(n > 0);
    v.clear();
    v.resize(n + 1, 0);
    zn.clear();
    zn.resize(n + 2, 0);
    zd.clear();
    zd.resize(n + 2, 1);

    let intersect = |q: usize, p: usize| -> (i128, i128) {
        // boundary between parabolas rooted at p < q:
        //   x = ((f q + s2 q^2) - (f p + s2 p^2)) / (2 s2 (q - p))
        let fq = f[q] as i128 + s2 as i128 * (q * q) as i128;
        let fp = f[p] as i128 + s2 as i128 * (p * p) as i128;
        (fq - fp, 2 * s2 as i128 * (q - p) as i128)
    };

    let mut k = 0usize;
    v[0] = 0;
    // z[0] is conceptually -inf (handled by the k == 0 guard);
    // z[k+1] is +inf until a boundary is pushed.
    zn[1] = i128::MAX / 2;
    zd[1] = 1;
    for q in 1..n {
        loop {
            let (num, den) = intersect(q, v[k]);
            if k > 0 && num * zd[k] <= zn[k] * den {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                zn[k] = num;
                zd[k] = den;
                zn[k + 1] = i128::MAX / 2;
                zd[k + 1] = 1;
                break;
            }
        }
    }

    let mut k = 0usize;
    for i in 0..n {
        while zn[k + 1] < i as i128 * zd[k + 1] {
            k += 1;
        }
        let p = v[k];
        let dx = i as i64 - p as i64;
        d[i] = f[p].saturating_add(s2 * dx * dx);
    }
}

/// Exact squared 2-D EDT of one slice. `seeds[y*w + x]`; spacings `sx`,
/// `sy` in integer units (micrometers). Returns squared distances in those
/// units²; unreachable cells hold at least `EDT_UNREACHABLE`.
pub fn edt2d_squared(seeds: &[bool], w: usize, h: usize, sx: i64, sy: i64) -> Vec<i64> {
    assert_eq!(seeds.len(), w * h);
    assert!(sx > 0 && sy > 0, "spacings must be positive");
    let mut g = vec![0i64; w * h];
    for (gv, &s) in g.iter_mut().zip(seeds.iter()) {
        *gv = if s { 0 } else { EDT_UNREACHABLE };
    }
    let (mut v, mut zn, mut zd) = (Vec::new(), Vec::new(), Vec::new());
    // pass 1: along x within each row
    let mut row_in = vec![0i64; w];
    let mut row_out = vec![0i64; w];
    for y in 0..h {
        row_in.copy_from_slice(&g[y * w..][..w]);
        envelope_1d(&row_in, sx * sx, &mut row_out, &mut v, &mut zn, &mut zd);
        g[y * w..][..w].copy_from_slice(&row_out);
    }
    // pass 2: along y within each column
    let mut col_in = vec![0i64; h];
    let mut col_out = vec![0i64; h];
    for x in 0..w {
        for y in 0..h {
            col_in[y] = g[y * w + x];
        }
        envelope_1d(&col_in, sy * sy, &mut col_out, &mut v, &mut zn, &mut zd);
        for y in 0..h {
            g[y * w + x] = col_out[y];
        }
    }
    g
}

/// Quantize a millimeter spacing to the integer micrometer grid the EDT
/// runs on.
pub fn quantize_spacing_mm(s: f64) -> i64 {
    let q = (s * 1000.0).round() as i64;
    q.max(1)
}

// ---------------------------------------------------------------------------
// per-case distance features

/// Per-slice EDT of an arbitrary seed predicate, returning raw distances in
/// millimeters with `f64::INFINITY` where a slice has no seed.
fn slice_distances(
    dims: Dims,
    voxel_size_mm: [f64; 3],
    mut is_seed: impl FnMut(usize, usize, usize) -> bool,
) -> Volume<f64> {
    let sx = quantize_spacing_mm(voxel_size_mm[0]);
    let sy = quantize_spacing_mm(voxel_size_mm[1]);
    let mut out = Volume::<f64>::zeros(dims);
    let mut seeds = vec![false; dims.x * dims.y];
    for z in 0..dims.z {
        let mut any = false;
        for y in 0..dims.y {
            for x in 0..dims.x {
                let s = is_seed(x, y, z);
                seeds[y * dims.x + x] = s;
                any |= s;
            }
        }
        if !any {
            for y in 0..dims.y {
                for x in 0..dims.x {
                    out.set(x, y, z, f64::INFINITY);
                }
            }
            continue;
        }
        let sq = edt2d_squared(&seeds, dims.x, dims.y, sx, sy);
        for y in 0..dims.y {
            for x in 0..dims.x {
                let s = sq[y * dims.x + x];
                let d = if s >= EDT_UNREACHABLE / 2 {
                    f64::INFINITY
                } else {
                    (s as f64).sqrt() / 1000.0
                };
                out.set(x, y, z, d);
            }
        }
    }
    out
}

/// Substitute the empty-slice sentinel and normalize to [0, 1] by the
/// maximum over brain voxels.
fn normalize_distance(raw: &mut Volume<f64>, brain: &Volume<u8>, voxel_size_mm: [f64; 3]) -> Volume<f32> {
    let dims = raw.dims;
    let mut finite_max = 0.0f64;
    let mut any_finite = false;
    for (d, m) in raw.data.iter().zip(brain.data.iter()) {
        if *m != 0 && d.is_finite() {
            finite_max = finite_max.max(*d);
            any_finite = true;
        }
    }
    let sentinel = if any_finite {
        finite_max
    } else {
        // structure absent everywhere: in-plane slice diagonal
        let wx = dims.x as f64 * voxel_size_mm[0];
        let wy = dims.y as f64 * voxel_size_mm[1];
        (wx * wx + wy * wy).sqrt()
    };
    for d in raw.data.iter_mut() {
        if !d.is_finite() {
            *d = sentinel;
        }
    }
    let mut dmax = 0.0f64;
    for (d, m) in raw.data.iter().zip(brain.data.iter()) {
        if *m != 0 {
            dmax = dmax.max(*d);
        }
    }
    let mut out = Volume::<f32>::zeros(dims);
    if dmax > 0.0 {
        for (o, d) in out.data.iter_mut().zip(raw.data.iter()) {
            *o = (d / dmax).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

fn bounding_box(mask: &Volume<u8>) -> Result<([usize; 3], [usize; 3])> {
    let dims = mask.dims;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for z in 0..dims.z {
        for y in 0..dims.y {
            for x in 0..dims.x {
                if mask.get(x, y, z) != 0 {
                    let c = [x, y, z];
                    for a in 0..3 {
                        lo[a] = lo[a].min(c[a]);
                        hi[a] = hi[a].max(c[a]);
                    }
                }
            }
        }
    }
    if lo[0] == usize::MAX {
        return Err(Error::invalid("brain mask is empty".to_string()));
    }
    Ok((lo, hi))
}

fn coordinate_feature(dims: Dims, lo: usize, hi: usize, axis: usize) -> Volume<f32> {
    let span = hi.saturating_sub(lo).max(1) as f64;
    let mut out = Volume::<f32>::zeros(dims);
    for z in 0..dims.z {
        for y in 0..dims.y {
            for x in 0..dims.x {
                let c = [x, y, z][axis] as f64;
                out.set(x, y, z, ((c - lo as f64) / span).clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

/// A cortex voxel is a brain-mask voxel with at least one in-slice
/// 4-neighbor outside the mask (volume borders count as outside).
pub fn is_cortex_voxel(mask: &Volume<u8>, x: usize, y: usize, z: usize) -> bool {
    if mask.get(x, y, z) == 0 {
        return false;
    }
    let dims = mask.dims;
    (x == 0 || mask.get(x - 1, y, z) == 0)
        || (x + 1 >= dims.x || mask.get(x + 1, y, z) == 0)
        || (y == 0 || mask.get(x, y - 1, z) == 0)
        || (y + 1 >= dims.y || mask.get(x, y + 1, z) == 0)
}

/// Mean of the training annotations smoothed with a zero-padded in-plane
/// Gaussian (σ in voxels), then scaled so the maximum is 1.
pub fn build_lesion_prior(annotations: &[&Volume<u8>], sigma: f64) -> Result<Volume<f32>> {
    let first = annotations
        .first()
        .ok_or_else(|| Error::invalid("lesion prior needs at least one training annotation"))?;
    let dims = first.dims;
    for a in annotations {
        if a.dims != dims {
            return Err(Error::invalid(format!(
                "lesion prior requires identical dims across cases (got {:?} and {:?})",
                (dims.x, dims.y, dims.z),
                (a.dims.x, a.dims.y, a.dims.z)
            )));
        }
    }
    let mut mean = Volume::<f64>::zeros(dims);
    let scale = 1.0 / annotations.len() as f64;
    for a in annotations {
        for (m, &v) in mean.data.iter_mut().zip(a.data.iter()) {
            *m += v as f64 * scale;
        }
    }

    // separable truncated Gaussian, zero padding at slice borders
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let ksum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= ksum);

    let mut tmp = Volume::<f64>::zeros(dims);
    for z in 0..dims.z {
        for y in 0..dims.y {
            for x in 0..dims.x {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let xi = x as i64 + ki as i64 - radius;
                    if xi >= 0 && (xi as usize) < dims.x {
                        acc += kv * mean.get(xi as usize, y, z);
                    }
                }
                tmp.set(x, y, z, acc);
            }
        }
    }
    let mut smooth = Volume::<f64>::zeros(dims);
    for z in 0..dims.z {
        for y in 0..dims.y {
            for x in 0..dims.x {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let yi = y as i64 + ki as i64 - radius;
                    if yi >= 0 && (yi as usize) < dims.y {
                        acc += kv * tmp.get(x, yi as usize, z);
                    }
                }
                smooth.set(x, y, z, acc);
            }
        }
    }

    let maxv = smooth.data.iter().cloned().fold(0.0f64, f64::max);
    let mut out = Volume::<f32>::zeros(dims);
    if maxv > 0.0 {
        for (o, s) in out.data.iter_mut().zip(smooth.data.iter()) {
            *o = (s / maxv).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(out)
}

/// Compute all eight feature volumes for one case. `prior` must share the
/// case's dims.
pub fn compute_case_features(case: &CaseRecord, prior: &Volume<f32>) -> Result<Vec<Volume<f32>>> {
    let dims = case.dims();
    if prior.dims != dims {
        return Err(Error::invalid(
            "lesion prior dims disagree with case dims".to_string(),
        ));
    }
    let vs = case.meta.voxel_size_mm;
    let (lo, hi) = bounding_box(&case.brain_mask)?;

    let coord_x = coordinate_feature(dims, lo[0], hi[0], 0);
    let coord_y = coordinate_feature(dims, lo[1], hi[1], 1);
    let coord_z = coordinate_feature(dims, lo[2], hi[2], 2);

    let vl = &case.ventricle_left;
    let mut d_left = slice_distances(dims, vs, |x, y, z| vl.get(x, y, z) != 0);
    let d_left = normalize_distance(&mut d_left, &case.brain_mask, vs);

    let vr = &case.ventricle_right;
    let mut d_right = slice_distances(dims, vs, |x, y, z| vr.get(x, y, z) != 0);
    let d_right = normalize_distance(&mut d_right, &case.brain_mask, vs);

    let bm = &case.brain_mask;
    let mut d_cortex = slice_distances(dims, vs, |x, y, z| is_cortex_voxel(bm, x, y, z));
    let d_cortex = normalize_distance(&mut d_cortex, &case.brain_mask, vs);

    // midsagittal plane at the brain-mask centroid x
    let (mut cx, mut count) = (0.0f64, 0usize);
    for z in 0..dims.z {
        for y in 0..dims.y {
            for x in 0..dims.x {
                if case.brain_mask.get(x, y, z) != 0 {
                    cx += x as f64;
                    count += 1;
                }
            }
        }
    }
    let cx = cx / count as f64;
    let mut d_mid = Volume::<f64>::zeros(dims);
    for z in 0..dims.z {
        for y in 0..dims.y {
            for x in 0..dims.x {
                d_mid.set(x, y, z, (x as f64 - cx).abs() * vs[0]);
            }
        }
    }
    let d_mid = normalize_distance(&mut d_mid, &case.brain_mask, vs);

    Ok(vec![
        coord_x,
        coord_y,
        coord_z,
        d_left,
        d_right,
        d_cortex,
        d_mid,
        prior.clone(),
    ])
}

/// Gather the 8-feature vector at one voxel.
pub fn location_vector(features: &[Volume<f32>], x: usize, y: usize, z: usize) -> [f32; 8] {
    debug_assert_eq!(features.len(), NUM_LOCATION_FEATURES);
    let mut out = [0.0f32; 8];
    for (o, f) in out.iter_mut().zip(features.iter()) {
        *o = f.get(x, y, z);
    }
    out
}
