//! Multi-scale patch sampling.
//!
//! Every sample is centered on a voxel and carries three 32×32 two-channel
//! (FLAIR, T1) patches:
//!
//! - scale 32: the raw 32×32 in-plane neighborhood;
//! - scale 64: the 64×64 neighborhood mean-pooled 2×2;
//! - scale 128: the 128×128 neighborhood mean-pooled 4×4.
//!
//! The patch covers `[c - scale/2, c + scale/2 - 1]` along each in-plane
//! axis, so the center voxel sits at patch index 16 at scale 32. Voxels
//! outside the volume contribute zero (the post-normalization background
//! value). All pooling goes through [`pool_cell`]; whole-volume inference
//! reuses the same function, which is what makes its dense fast path
//! bit-identical to per-patch extraction.

use crate::error::{Error, Result};
use crate::locfeat;
use crate::rng;
use crate::volume::{CaseRecord, Dims, Volume, NUM_LOCATION_FEATURES};
use rand::seq::index::sample as index_sample;
use rand::seq::SliceRandom;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

pub const PATCH_SIDE: usize = 32;
pub const SCALES: [usize; 3] = [32, 64, 128];
pub const NUM_CHANNELS: usize = 2;
/// Values per scale patch: 2 channels × 32 × 32.
pub const PATCH_LEN: usize = NUM_CHANNELS * PATCH_SIDE * PATCH_SIDE;

/// A case with normalized intensities, ready for sampling and inference.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub case_id: String,
    pub dims: Dims,
    pub voxel_size_mm: [f64; 3],
    pub flair: Volume<f32>,
    pub t1: Volume<f32>,
    pub brain_mask: Volume<u8>,
    pub annotation: Volume<u8>,
    pub location: Option<Vec<Volume<f32>>>,
}

/// Normalize a loaded case's intensities in place and repackage it.
pub fn prepare_case(mut case: CaseRecord) -> Result<PreparedCase> {
    crate::volume::normalize_intensities(&mut case.flair, &case.brain_mask)?;
    crate::volume::normalize_intensities(&mut case.t1, &case.brain_mask)?;
    Ok(PreparedCase {
        case_id: case.meta.case_id,
        dims: case.flair.dims,
        voxel_size_mm: case.meta.voxel_size_mm,
        flair: case.flair,
        t1: case.t1,
        brain_mask: case.brain_mask,
        annotation: case.annotation,
        location: case.location,
    })
}

/// Mean over an `f`×`f` in-plane cell whose corner is `(x0, y0)` in slice
/// `z`; samples outside the volume contribute zero. Summation order is
/// fixed (y then x ascending) and the divisor is a power of two, so the
/// result is a pure function of the cell contents.
#[inline]
pub fn pool_cell(vol: &Volume<f32>, x0: i64, y0: i64, z: usize, f: usize) -> f32 {
    let mut acc = 0.0f32;
    for dy in 0..f as i64 {
        let y = y0 + dy;
        if y < 0 || y as usize >= vol.dims.y {
            continue;
        }
        for dx in 0..f as i64 {
            let x = x0 + dx;
            if x < 0 || x as usize >= vol.dims.x {
                continue;
            }
            acc += vol.get(x as usize, y as usize, z);
        }
    }
    acc * (1.0 / (f * f) as f32)
}

/// Extract one 32×32 patch of `vol` at the given scale, centered on
/// `(cx, cy)` in slice `cz`. Writes `PATCH_SIDE * PATCH_SIDE` values.
pub fn extract_scale_plane(
    vol: &Volume<f32>,
    cx: usize,
    cy: usize,
    cz: usize,
    scale: usize,
    out: &mut [f32],
) {
    debug_assert!(SCALES.contains(&scale));
    debug_assert_eq!(out.len(), PATCH_SIDE * PATCH_SIDE);
    let f = scale / PATCH_SIDE;
    let x_start = cx as i64 - (scale / 2) as i64;
    let y_start = cy as i64 - (scale / 2) as i64;
    for ty in 0..PATCH_SIDE {
        for tx in 0..PATCH_SIDE {
            out[ty * PATCH_SIDE + tx] = pool_cell(
                vol,
                x_start + (tx * f) as i64,
                y_start + (ty * f) as i64,
                cz,
                f,
            );
        }
    }
}

/// Extract the two-channel patch (FLAIR then T1) at one scale.
pub fn extract_patch(case: &PreparedCase, cx: usize, cy: usize, cz: usize, scale: usize, out: &mut [f32]) {
    debug_assert_eq!(out.len(), PATCH_LEN);
    let plane = PATCH_SIDE * PATCH_SIDE;
    extract_scale_plane(&case.flair, cx, cy, cz, scale, &mut out[..plane]);
    extract_scale_plane(&case.t1, cx, cy, cz, scale, &mut out[plane..]);
}

/// A materialized set of samples in structure-of-arrays layout.
#[derive(Clone, Debug, Default)]
pub struct SampleSet {
    pub case_ids: Vec<String>,
    pub case_idx: Vec<u32>,
    pub voxel_idx: Vec<u64>,
    pub labels: Vec<u8>,
    /// `len × 8`, zero-filled when `has_location` is false.
    pub locations: Vec<f32>,
    /// One buffer per scale, each `len × PATCH_LEN`.
    pub patches: [Vec<f32>; 3],
    pub has_location: bool,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn patch(&self, scale_index: usize, sample: usize) -> &[f32] {
        &self.patches[scale_index][sample * PATCH_LEN..][..PATCH_LEN]
    }

    pub fn location(&self, sample: usize) -> &[f32] {
        &self.locations[sample * NUM_LOCATION_FEATURES..][..NUM_LOCATION_FEATURES]
    }
}

/// Build a class-balanced sample set: half of all annotated voxels
/// (rounded up), plus an equal number of non-lesion brain voxels drawn
/// without replacement. Candidates are enumerated in (case_id, voxel index)
/// order before any seeded draw, so the result does not depend on the
/// order cases are passed in.
pub fn build_balanced_dataset(cases: &[PreparedCase], seed: u64) -> Result<SampleSet> {
    if cases.is_empty() {
        return Err(Error::invalid("cannot sample from an empty case list"));
    }
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.sort_by(|&a, &b| cases[a].case_id.cmp(&cases[b].case_id));

    let has_location = match cases.iter().filter(|c| c.location.is_some()).count() {
        0 => false,
        n if n == cases.len() => true,
        _ => {
            return Err(Error::invalid(
                "location features present for some cases but not all; run the feature stage over the whole cohort",
            ))
        }
    };

    // candidate lists as (ordered case position, flat voxel index)
    let mut positives: Vec<(u32, u64)> = Vec::new();
    let mut negatives: Vec<(u32, u64)> = Vec::new();
    for (pos, &ci) in order.iter().enumerate() {
        let case = &cases[ci];
        for (idx, (&ann, &brain)) in case
            .annotation
            .data
            .iter()
            .zip(case.brain_mask.data.iter())
            .enumerate()
        {
            if brain == 0 {
                continue;
            }
            if ann != 0 {
                positives.push((pos as u32, idx as u64));
            } else {
                negatives.push((pos as u32, idx as u64));
            }
        }
    }
    if positives.is_empty() {
        return Err(Error::invalid("no annotated voxels in the given cases"));
    }
    let n_pos = positives.len().div_ceil(2);
    if negatives.len() < n_pos {
        return Err(Error::invalid(format!(
            "need {n_pos} negative voxels but only {} are available",
            negatives.len()
        )));
    }

    let mut pos_sel = index_sample(
        &mut rng::stream(seed, rng::purpose::POS_SUBSET, 0, 0),
        positives.len(),
        n_pos,
    )
    .into_vec();
    pos_sel.sort_unstable();
    let mut neg_sel = index_sample(
        &mut rng::stream(seed, rng::purpose::NEG_SAMPLE, 0, 0),
        negatives.len(),
        n_pos,
    )
    .into_vec();
    neg_sel.sort_unstable();

    let n = 2 * n_pos;
    let mut set = SampleSet {
        case_ids: order.iter().map(|&ci| cases[ci].case_id.clone()).collect(),
        case_idx: Vec::with_capacity(n),
        voxel_idx: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        locations: Vec::with_capacity(n * NUM_LOCATION_FEATURES),
        patches: [
            Vec::with_capacity(n * PATCH_LEN),
            Vec::with_capacity(n * PATCH_LEN),
            Vec::with_capacity(n * PATCH_LEN),
        ],
        has_location,
    };

    let mut patch_buf = vec![0.0f32; PATCH_LEN];
    let mut push = |set: &mut SampleSet, case_pos: u32, voxel: u64, label: u8| {
        let case = &cases[order[case_pos as usize]];
        let (x, y, z) = case.dims.coords(voxel as usize);
        set.case_idx.push(case_pos);
        set.voxel_idx.push(voxel);
        set.labels.push(label);
        if let Some(loc) = &case.location {
            set.locations.extend(locfeat::location_vector(loc, x, y, z));
        } else {
            set.locations.extend([0.0f32; NUM_LOCATION_FEATURES]);
        }
        for (si, &scale) in SCALES.iter().enumerate() {
            extract_patch(case, x, y, z, scale, &mut patch_buf);
            set.patches[si].extend_from_slice(&patch_buf);
        }
    };

    for &i in &pos_sel {
        let (c, v) = positives[i];
        push(&mut set, c, v, 1);
    }
    for &i in &neg_sel {
        let (c, v) = negatives[i];
        push(&mut set, c, v, 0);
    }
    Ok(set)
}

/// Seeded permutation of sample indices for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::purpose::EPOCH_SHUFFLE, epoch, 0));
    order
}

/// Contiguous minibatch ranges; the final batch keeps the remainder
/// (300 samples at batch 128 yields sizes 128, 128, 44).
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<Range<usize>> {
    assert!(batch_size > 0);
    let mut out = Vec::with_capacity(n.div_ceil(batch_size));
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        out.push(start..end);
        start = end;
    }
    out
}

// ---------------------------------------------------------------------------
// binary sample cache

const CACHE_MAGIC: &[u8; 4] = b"LSSC";
const CACHE_VERSION: u32 = 1;

/// Serialize a sample set to the binary cache format.
pub fn save_sample_cache(path: &Path, set: &SampleSet) -> Result<()> {
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    let io = |e| Error::io(path, e);
    w.write_all(CACHE_MAGIC).map_err(io)?;
    w.write_all(&CACHE_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&[u8::from(set.has_location)]).map_err(io)?;
    w.write_all(&[SCALES.len() as u8]).map_err(io)?;
    for s in SCALES {
        w.write_all(&(s as u32).to_le_bytes()).map_err(io)?;
    }
    w.write_all(&(set.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(set.case_ids.len() as u32).to_le_bytes()).map_err(io)?;
    for id in &set.case_ids {
        let bytes = id.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes()).map_err(io)?;
        w.write_all(bytes).map_err(io)?;
    }
    for i in 0..set.len() {
        w.write_all(&set.case_idx[i].to_le_bytes()).map_err(io)?;
        w.write_all(&set.voxel_idx[i].to_le_bytes()).map_err(io)?;
        w.write_all(&[set.labels[i]]).map_err(io)?;
        for v in set.location(i) {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for si in 0..SCALES.len() {
            for v in set.patch(si, i) {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

/// Load a sample cache written by [`save_sample_cache`].
pub fn load_sample_cache(path: &Path) -> Result<SampleSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let bad = |msg: String| Error::invalid(format!("{}: {msg}", path.display()));
    let io = |e| Error::io(path, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CACHE_MAGIC {
        return Err(bad(format!("bad magic {magic:?}, not a sample cache")));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b).map_err(io)?;
    let version = u32::from_le_bytes(u32b);
    if version != CACHE_VERSION {
        return Err(bad(format!(
            "cache version {version}, this build reads {CACHE_VERSION}"
        )));
    }
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1).map_err(io)?;
    let has_location = match b1[0] {
        0 => false,
        1 => true,
        v => return Err(bad(format!("invalid location flag {v}"))),
    };
    r.read_exact(&mut b1).map_err(io)?;
    if b1[0] as usize != SCALES.len() {
        return Err(bad(format!("cache holds {} scales, expected {}", b1[0], SCALES.len())));
    }
    for expect in SCALES {
        r.read_exact(&mut u32b).map_err(io)?;
        let s = u32::from_le_bytes(u32b) as usize;
        if s != expect {
            return Err(bad(format!("cache scale {s}, expected {expect}")));
        }
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b).map_err(io)?;
    let n = u64::from_le_bytes(u64b) as usize;
    r.read_exact(&mut u32b).map_err(io)?;
    let n_cases = u32::from_le_bytes(u32b) as usize;
    let mut case_ids = Vec::with_capacity(n_cases);
    for _ in 0..n_cases {
        let mut u16b = [0u8; 2];
        r.read_exact(&mut u16b).map_err(io)?;
        let len = u16::from_le_bytes(u16b) as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(io)?;
        case_ids.push(
            String::from_utf8(buf).map_err(|e| bad(format!("case id not utf-8: {e}")))?,
        );
    }

    let mut set = SampleSet {
        case_ids,
        case_idx: Vec::with_capacity(n),
        voxel_idx: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        locations: Vec::with_capacity(n * NUM_LOCATION_FEATURES),
        patches: [
            Vec::with_capacity(n * PATCH_LEN),
            Vec::with_capacity(n * PATCH_LEN),
            Vec::with_capacity(n * PATCH_LEN),
        ],
        has_location,
    };
    let mut f32b = [0u8; 4];
    let mut patch = vec![0u8; PATCH_LEN * 4];
    for i in 0..n {
        r.read_exact(&mut u32b)
            .map_err(|_| bad(format!("truncated at sample {i} of {n}")))?;
        set.case_idx.push(u32::from_le_bytes(u32b));
        r.read_exact(&mut u64b).map_err(io)?;
        set.voxel_idx.push(u64::from_le_bytes(u64b));
        r.read_exact(&mut b1).map_err(io)?;
        if b1[0] > 1 {
            return Err(bad(format!("sample {i} label {} not 0/1", b1[0])));
        }
        set.labels.push(b1[0]);
        for _ in 0..NUM_LOCATION_FEATURES {
            r.read_exact(&mut f32b).map_err(io)?;
            set.locations.push(f32::from_le_bytes(f32b));
        }
        for si in 0..SCALES.len() {
            r.read_exact(&mut patch)
                .map_err(|_| bad(format!("truncated patch data at sample {i}")))?;
            set.patches[si].extend(
                patch
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
            );
        }
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(io)? != 0 {
        return Err(bad("trailing bytes after final sample".to_string()));
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_case(id: &str, dims: Dims, lesion_voxels: usize, seed: u64) -> PreparedCase {
        let mut r = crate::rng::stream(seed, 97, 0, 0);
        let n = dims.numel();
        let flair = Volume {
            dims,
            data: (0..n).map(|_| r.gen_range(0.0..1.0)).collect(),
        };
        let t1 = Volume {
            dims,
            data: (0..n).map(|_| r.gen_range(0.0..1.0)).collect(),
        };
        let brain = Volume::filled(dims, 1u8);
        let mut ann = Volume::<u8>::zeros(dims);
        let mut placed = 0;
        while placed < lesion_voxels {
            let i = r.gen_range(0..n);
            if ann.data[i] == 0 {
                ann.data[i] = 1;
                placed += 1;
            }
        }
        PreparedCase {
            case_id: id.to_string(),
            dims,
            voxel_size_mm: [1.0, 1.0, 3.0],
            flair,
            t1,
            brain_mask: brain,
            annotation: ann,
            location: None,
        }
    }

    #[test]
    fn scale32_patch_is_raw_neighborhood_with_zero_padding() {
        let case = random_case("a", Dims::new(10, 9, 3), 4, 1);
        let (cx, cy, cz) = (2usize, 3usize, 1usize);
        let mut out = vec![0.0f32; PATCH_SIDE * PATCH_SIDE];
        extract_scale_plane(&case.flair, cx, cy, cz, 32, &mut out);
        for ty in 0..PATCH_SIDE {
            for tx in 0..PATCH_SIDE {
                let x = cx as i64 - 16 + tx as i64;
                let y = cy as i64 - 16 + ty as i64;
                let want = if x >= 0 && (x as usize) < 10 && y >= 0 && (y as usize) < 9 {
                    case.flair.get(x as usize, y as usize, cz)
                } else {
                    0.0
                };
                assert_eq!(out[ty * PATCH_SIDE + tx], want, "at ({tx},{ty})");
            }
        }
        // center convention: patch index 16 is the center voxel
        assert_eq!(out[16 * PATCH_SIDE + 16], case.flair.get(cx, cy, cz));
    }

    #[test]
    fn pooled_scales_match_direct_means() {
        let case = random_case("a", Dims::new(40, 40, 2), 4, 2);
        for (scale, f) in [(64usize, 2i64), (128, 4)] {
            let (cx, cy, cz) = (20usize, 19usize, 1usize);
            let mut out = vec![0.0f32; PATCH_SIDE * PATCH_SIDE];
            extract_scale_plane(&case.flair, cx, cy, cz, scale, &mut out);
            for ty in 0..PATCH_SIDE {
                for tx in 0..PATCH_SIDE {
                    let x0 = cx as i64 - (scale / 2) as i64 + tx as i64 * f;
                    let y0 = cy as i64 - (scale / 2) as i64 + ty as i64 * f;
                    let mut want = 0.0f64;
                    for dy in 0..f {
                        for dx in 0..f {
                            let (x, y) = (x0 + dx, y0 + dy);
                            if x >= 0 && (x as usize) < 40 && y >= 0 && (y as usize) < 40 {
                                want += case.flair.get(x as usize, y as usize, cz) as f64;
                            }
                        }
                    }
                    want /= (f * f) as f64;
                    let got = out[ty * PATCH_SIDE + tx] as f64;
                    assert!((got - want).abs() < 1e-6, "scale {scale} ({tx},{ty}): {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn balanced_dataset_is_balanced_and_seeded() {
        let cases = vec![
            random_case("case_b", Dims::new(12, 12, 4), 30, 3),
            random_case("case_a", Dims::new(12, 12, 4), 25, 4),
        ];
        let set = build_balanced_dataset(&cases, 9).unwrap();
        let n_pos = set.labels.iter().filter(|&&l| l == 1).count();
        let n_neg = set.len() - n_pos;
        assert_eq!(n_pos, n_neg);
        assert_eq!(n_pos, (30 + 25 + 1) / 2);
        // labels must agree with the annotations; negatives stay in-brain
        for i in 0..set.len() {
            let case = cases
                .iter()
                .find(|c| c.case_id == set.case_ids[set.case_idx[i] as usize])
                .unwrap();
            let v = set.voxel_idx[i] as usize;
            assert_eq!(set.labels[i], case.annotation.data[v]);
            assert_eq!(case.brain_mask.data[v], 1);
        }
        // case order in the input must not matter
        let swapped = vec![cases[1].clone(), cases[0].clone()];
        let set2 = build_balanced_dataset(&swapped, 9).unwrap();
        assert_eq!(set.voxel_idx, set2.voxel_idx);
        assert_eq!(set.case_idx, set2.case_idx);
        assert_eq!(set.patches[0], set2.patches[0]);
        // a different seed picks a different subset
        let set3 = build_balanced_dataset(&cases, 10).unwrap();
        assert_ne!(set.voxel_idx, set3.voxel_idx);
    }

    #[test]
    fn minibatch_ranges_match_contract() {
        let sizes: Vec<usize> = batch_ranges(300, 128).iter().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![128, 128, 44]);
        assert_eq!(batch_ranges(128, 128).len(), 1);
        assert_eq!(batch_ranges(0, 128).len(), 0);

        let o1 = epoch_order(100, 5, 0);
        let o2 = epoch_order(100, 5, 0);
        assert_eq!(o1, o2);
        assert_ne!(o1, epoch_order(100, 5, 1));
        let mut sorted = o1.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn sample_cache_round_trip() {
        let cases = vec![random_case("case_x", Dims::new(10, 10, 3), 12, 5)];
        let set = build_balanced_dataset(&cases, 1).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("train.lssc");
        save_sample_cache(&path, &set).unwrap();
        let loaded = load_sample_cache(&path).unwrap();
        assert_eq!(loaded.case_ids, set.case_ids);
        assert_eq!(loaded.case_idx, set.case_idx);
        assert_eq!(loaded.voxel_idx, set.voxel_idx);
        assert_eq!(loaded.labels, set.labels);
        assert_eq!(loaded.locations, set.locations);
        for si in 0..3 {
            assert_eq!(loaded.patches[si], set.patches[si]);
        }
        assert_eq!(loaded.has_location, set.has_location);

        // corrupted magic is rejected
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_sample_cache(&path).unwrap_err().to_string().contains("magic"));

        // truncation is rejected
        std::fs::write(&path, &bytes[..100]).unwrap();
        assert!(load_sample_cache(&path).is_err());
    }
}
