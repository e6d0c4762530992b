//! Cohort data model and on-disk case format.
//!
//! A case is a directory:
//!
//! ```text
//! case_000/
//!   meta.json            { "case_id", "dims": [x,y,z], "voxel_size_mm": [sx,sy,sz] }
//!   flair.f32            little-endian f32, x fastest, then y, then z
//!   t1.f32
//!   brain_mask.u8        one byte per voxel, 0 or 1
//!   annotation.u8
//!   ventricle_left.u8
//!   ventricle_right.u8
//!   location/feat_0.f32 .. feat_7.f32     (optional, written by the
//!                                          feature stage)
//! ```

use crate::error::{Error, Result};
use crate::rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

/// Number of spatial-location features per voxel.
pub const NUM_LOCATION_FEATURES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl Dims {
    pub fn new(x: usize, y: usize, z: usize) -> Self {
        Dims { x, y, z }
    }

    pub fn numel(&self) -> usize {
        self.x * self.y * self.z
    }

    /// Flat index with x fastest, then y, then z.
    #[inline(always)]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.x && y < self.y && z < self.z);
        (z * self.y + y) * self.x + x
    }

    /// Inverse of [`Dims::index`].
    #[inline(always)]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let x = idx % self.x;
        let y = (idx / self.x) % self.y;
        let z = idx / (self.x * self.y);
        (x, y, z)
    }
}

/// Dense voxel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    pub dims: Dims,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Volume<T> {
    pub fn filled(dims: Dims, value: T) -> Self {
        Volume {
            dims,
            data: vec![value; dims.numel()],
        }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, T::default())
    }

    #[inline(always)]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.dims.index(x, y, z)]
    }

    #[inline(always)]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.dims.index(x, y, z);
        self.data[i] = v;
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CaseMeta {
    pub case_id: String,
    pub dims: [usize; 3],
    pub voxel_size_mm: [f64; 3],
}

impl CaseMeta {
    pub fn dims(&self) -> Dims {
        Dims::new(self.dims[0], self.dims[1], self.dims[2])
    }
}

/// One loaded case with all of its volumes.
#[derive(Clone, Debug)]
pub struct CaseRecord {
    pub meta: CaseMeta,
    pub flair: Volume<f32>,
    pub t1: Volume<f32>,
    pub brain_mask: Volume<u8>,
    pub annotation: Volume<u8>,
    pub ventricle_left: Volume<u8>,
    pub ventricle_right: Volume<u8>,
    /// Spatial-location feature volumes, present once the feature stage ran.
    pub location: Option<Vec<Volume<f32>>>,
}

impl CaseRecord {
    pub fn dims(&self) -> Dims {
        self.flair.dims
    }
}

// ---------------------------------------------------------------------------
// raw volume file I/O

pub fn read_f32_volume(path: &Path, dims: Dims) -> Result<Volume<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expect = dims.numel() * 4;
    if bytes.len() != expect {
        return Err(Error::invalid(format!(
            "{}: holds {} bytes, dims {:?} require {}",
            path.display(),
            bytes.len(),
            (dims.x, dims.y, dims.z),
            expect
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Volume { dims, data })
}

pub fn write_f32_volume(path: &Path, vol: &Volume<f32>) -> Result<()> {
    let mut bytes = Vec::with_capacity(vol.data.len() * 4);
    for v in &vol.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a binary mask volume, insisting every byte is 0 or 1.
pub fn read_mask_volume(path: &Path, dims: Dims) -> Result<Volume<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expect = dims.numel();
    if bytes.len() != expect {
        return Err(Error::invalid(format!(
            "{}: holds {} bytes, dims {:?} require {}",
            path.display(),
            bytes.len(),
            (dims.x, dims.y, dims.z),
            expect
        )));
    }
    if let Some(i) = bytes.iter().position(|&b| b > 1) {
        return Err(Error::invalid(format!(
            "{}: voxel {} has value {}, masks must be 0 or 1",
            path.display(),
            i,
            bytes[i]
        )));
    }
    Ok(Volume { dims, data: bytes })
}

pub fn write_mask_volume(path: &Path, vol: &Volume<u8>) -> Result<()> {
    fs::write(path, &vol.data).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// case directories

pub fn load_case(dir: &Path) -> Result<CaseRecord> {
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CaseMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::invalid(format!("{}: {e}", meta_path.display())))?;
    if meta.dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!(
            "{}: dims {:?} must all be positive",
            meta_path.display(),
            meta.dims
        )));
    }
    if meta.voxel_size_mm.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid(format!(
            "{}: voxel_size_mm {:?} must all be positive",
            meta_path.display(),
            meta.voxel_size_mm
        )));
    }
    let dims = meta.dims();

    let flair = read_f32_volume(&dir.join("flair.f32"), dims)?;
    let t1 = read_f32_volume(&dir.join("t1.f32"), dims)?;
    let brain_mask = read_mask_volume(&dir.join("brain_mask.u8"), dims)?;
    let annotation = read_mask_volume(&dir.join("annotation.u8"), dims)?;
    let ventricle_left = read_mask_volume(&dir.join("ventricle_left.u8"), dims)?;
    let ventricle_right = read_mask_volume(&dir.join("ventricle_right.u8"), dims)?;

    let loc_dir = dir.join("location");
    let location = if loc_dir.is_dir() {
        let mut feats = Vec::with_capacity(NUM_LOCATION_FEATURES);
        for i in 0..NUM_LOCATION_FEATURES {
            feats.push(read_f32_volume(&loc_dir.join(format!("feat_{i}.f32")), dims)?);
        }
        Some(feats)
    } else {
        None
    };

    Ok(CaseRecord {
        meta,
        flair,
        t1,
        brain_mask,
        annotation,
        ventricle_left,
        ventricle_right,
        location,
    })
}

pub fn save_case(dir: &Path, case: &CaseRecord) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta_path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&case.meta)
        .map_err(|e| Error::invalid(format!("meta serialization: {e}")))?;
    fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))?;
    write_f32_volume(&dir.join("flair.f32"), &case.flair)?;
    write_f32_volume(&dir.join("t1.f32"), &case.t1)?;
    write_mask_volume(&dir.join("brain_mask.u8"), &case.brain_mask)?;
    write_mask_volume(&dir.join("annotation.u8"), &case.annotation)?;
    write_mask_volume(&dir.join("ventricle_left.u8"), &case.ventricle_left)?;
    write_mask_volume(&dir.join("ventricle_right.u8"), &case.ventricle_right)?;
    if let Some(loc) = &case.location {
        let loc_dir = dir.join("location");
        fs::create_dir_all(&loc_dir).map_err(|e| Error::io(&loc_dir, e))?;
        for (i, vol) in loc.iter().enumerate() {
            write_f32_volume(&loc_dir.join(format!("feat_{i}.f32")), vol)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// intensity normalization

/// Rescale so the masked minimum maps to 0 and the masked maximum to 1.
/// Voxels outside the mask go through the same affine map and are then
/// clamped to [0, 1]. A constant volume (masked max == min) becomes all
/// zeros.
pub fn normalize_intensities(vol: &mut Volume<f32>, mask: &Volume<u8>) -> Result<()> {
    assert_eq!(vol.dims, mask.dims, "volume/mask dims disagree");
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    let mut inside = 0usize;
    for (v, m) in vol.data.iter().zip(mask.data.iter()) {
        if *m != 0 {
            lo = lo.min(*v);
            hi = hi.max(*v);
            inside += 1;
        }
    }
    if inside == 0 {
        return Err(Error::invalid(
            "normalize_intensities: brain mask is empty".to_string(),
        ));
    }
    if hi == lo {
        vol.data.iter_mut().for_each(|v| *v = 0.0);
        return Ok(());
    }
    let scale = 1.0 / (hi - lo);
    for v in vol.data.iter_mut() {
        *v = ((*v - lo) * scale).clamp(0.0, 1.0);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// cohort split and manifest

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Validation => write!(f, "validation"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!(
                "unknown split '{other}', expected train|validation|test"
            ))),
        }
    }
}

/// Assign `n` cases to train/validation/test.
///
/// Counts are `floor(n * fraction)` per split with the remainder added to
/// the split with the largest fraction (earliest wins a tie), then a seeded
/// shuffle decides which case lands where. 10 cases at (0.8, 0.1, 0.1)
/// always yields an 8/1/1 split.
pub fn split_cohort(n: usize, fractions: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| f < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let mut counts: [usize; 3] = [0; 3];
    for (c, f) in counts.iter_mut().zip(fractions.iter()) {
        *c = (n as f64 * f).floor() as usize;
    }
    let assigned: usize = counts.iter().sum();
    let largest = (0..3)
        .max_by(|&a, &b| fractions[a].partial_cmp(&fractions[b]).unwrap().then(b.cmp(&a)))
        .unwrap();
    counts[largest] += n - assigned;

    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, rng::purpose::SPLIT, 0, 0);
    order.shuffle(&mut r);

    let mut out = vec![Split::Train; n];
    let mut cursor = 0;
    for (split, &count) in Split::ALL.iter().zip(counts.iter()) {
        for &case in &order[cursor..cursor + count] {
            out[case] = *split;
        }
        cursor += count;
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub split: Split,
}

/// Write a cohort manifest: a JSON array of `{path, split}` entries with
/// paths relative to the manifest's own directory.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let text = serde_json::to_string_pretty(entries)
        .map_err(|e| Error::invalid(format!("manifest serialization: {e}")))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Load a cohort manifest, resolving case paths against the manifest's
/// directory.
pub fn load_manifest(path: &Path) -> Result<Vec<(PathBuf, Split)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    Ok(entries
        .into_iter()
        .map(|e| (base.join(&e.path), e.split))
        .collect())
}

/// Resolve a cohort argument: either a manifest file or a directory
/// containing `manifest.json`.
pub fn resolve_manifest_path(cohort: &Path) -> PathBuf {
    if cohort.is_dir() {
        cohort.join("manifest.json")
    } else {
        cohort.to_path_buf()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_case(id: &str) -> CaseRecord {
        let dims = Dims::new(3, 2, 2);
        let n = dims.numel();
        let meta = CaseMeta {
            case_id: id.to_string(),
            dims: [dims.x, dims.y, dims.z],
            voxel_size_mm: [1.0, 1.0, 3.0],
        };
        let mut mask = Volume::zeros(dims);
        mask.data[..n - 1].iter_mut().for_each(|v| *v = 1);
        CaseRecord {
            meta,
            flair: Volume {
                dims,
                data: (0..n).map(|i| i as f32 * 0.5).collect(),
            },
            t1: Volume::filled(dims, 1.5),
            brain_mask: mask,
            annotation: Volume::zeros(dims),
            ventricle_left: Volume::zeros(dims),
            ventricle_right: Volume::zeros(dims),
            location: None,
        }
    }

    #[test]
    fn save_load_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("case_000");
        let mut case = tiny_case("case_000");
        case.location = Some(
            (0..NUM_LOCATION_FEATURES)
                .map(|i| Volume::filled(case.dims(), i as f32 * 0.1))
                .collect(),
        );
        save_case(&dir, &case).unwrap();
        let loaded = load_case(&dir).unwrap();
        assert_eq!(loaded.meta, case.meta);
        assert_eq!(loaded.flair, case.flair);
        assert_eq!(loaded.t1, case.t1);
        assert_eq!(loaded.brain_mask, case.brain_mask);
        assert_eq!(loaded.location.as_ref().unwrap()[3], case.location.as_ref().unwrap()[3]);
    }

    #[test]
    fn load_diagnostics_name_the_problem() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("case_bad");
        let case = tiny_case("case_bad");
        save_case(&dir, &case).unwrap();

        // missing file
        std::fs::remove_file(dir.join("t1.f32")).unwrap();
        let err = load_case(&dir).unwrap_err().to_string();
        assert!(err.contains("t1.f32"), "got: {err}");

        // size mismatch
        std::fs::write(dir.join("t1.f32"), [0u8; 10]).unwrap();
        let err = load_case(&dir).unwrap_err().to_string();
        assert!(err.contains("t1.f32") && err.contains("10"), "got: {err}");

        // restore, then corrupt the annotation at a known voxel
        write_f32_volume(&dir.join("t1.f32"), &case.t1).unwrap();
        let mut bytes = case.annotation.data.clone();
        bytes[5] = 7;
        std::fs::write(dir.join("annotation.u8"), &bytes).unwrap();
        let err = load_case(&dir).unwrap_err().to_string();
        assert!(
            err.contains("annotation.u8") && err.contains("voxel 5") && err.contains('7'),
            "got: {err}"
        );
    }

    #[test]
    fn rejects_bad_meta() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("case_meta");
        let case = tiny_case("case_meta");
        save_case(&dir, &case).unwrap();
        std::fs::write(
            dir.join("meta.json"),
            r#"{"case_id":"x","dims":[0,2,2],"voxel_size_mm":[1,1,1]}"#,
        )
        .unwrap();
        assert!(load_case(&dir).unwrap_err().to_string().contains("dims"));
    }

    #[test]
    fn normalize_known_values() {
        let dims = Dims::new(4, 1, 1);
        let mut vol = Volume {
            dims,
            data: vec![2.0f32, 4.0, 6.0, 100.0],
        };
        let mask = Volume {
            dims,
            data: vec![1u8, 1, 1, 0],
        };
        normalize_intensities(&mut vol, &mask).unwrap();
        assert_eq!(vol.data, vec![0.0, 0.5, 1.0, 1.0]); // outside voxel clamped

        let mut constant = Volume {
            dims,
            data: vec![3.0f32; 4],
        };
        normalize_intensities(&mut constant, &mask).unwrap();
        assert_eq!(constant.data, vec![0.0; 4]);

        let empty = Volume {
            dims,
            data: vec![0u8; 4],
        };
        let mut v = Volume {
            dims,
            data: vec![1.0f32; 4],
        };
        assert!(normalize_intensities(&mut v, &empty).is_err());
    }

    #[test]
    fn split_counts_are_floor_with_remainder_to_largest() {
        let splits = split_cohort(10, [0.8, 0.1, 0.1], 42).unwrap();
        let count = |s: Split| splits.iter().filter(|&&x| x == s).count();
        assert_eq!(count(Split::Train), 8);
        assert_eq!(count(Split::Validation), 1);
        assert_eq!(count(Split::Test), 1);

        let splits = split_cohort(13, [0.8, 0.1, 0.1], 42).unwrap();
        let count = |s: Split| splits.iter().filter(|&&x| x == s).count();
        assert_eq!(count(Split::Train), 11);
        assert_eq!(count(Split::Validation), 1);
        assert_eq!(count(Split::Test), 1);

        assert_eq!(
            split_cohort(10, [0.8, 0.1, 0.1], 42).unwrap(),
            split_cohort(10, [0.8, 0.1, 0.1], 42).unwrap()
        );
        assert_ne!(
            split_cohort(100, [0.8, 0.1, 0.1], 1).unwrap(),
            split_cohort(100, [0.8, 0.1, 0.1], 2).unwrap()
        );
        assert!(split_cohort(10, [0.5, 0.2, 0.2], 1).is_err());
    }

    #[test]
    fn manifest_round_trip_resolves_relative_paths() {
        let tmp = tempfile::tempdir().unwrap();
        let manifest = tmp.path().join("manifest.json");
        write_manifest(
            &manifest,
            &[
                ManifestEntry {
                    path: "case_000".into(),
                    split: Split::Train,
                },
                ManifestEntry {
                    path: "case_001".into(),
                    split: Split::Test,
                },
            ],
        )
        .unwrap();
        let loaded = load_manifest(&manifest).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, tmp.path().join("case_000"));
        assert_eq!(loaded[0].1, Split::Train);
        assert_eq!(loaded[1].1, Split::Test);
    }
}
