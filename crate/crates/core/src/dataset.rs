//! Scene ingestion, non-overlapping patch extraction, annotation,
//! normalization, deduplication, and split planning.

use crate::error::{Error, Result};
use crate::npy::{self, NpyData};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashSet;
use std::path::Path;

/// A height x width x bands scene with an aligned ground-truth raster.
/// Ground-truth value 0 is the background/unclassified class.
#[derive(Debug, Clone)]
pub struct HsiCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// Row-major h x w x b reflectance values.
    pub reflectance: Vec<f32>,
    /// Row-major h x w labels in [0, num_classes].
    pub gt: Vec<u32>,
    pub num_classes: u32,
}

impl HsiCube {
    pub fn gt_at(&self, row: usize, col: usize) -> u32 {
        self.gt[row * self.width + col]
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let base = (row * self.width + col) * self.bands;
        &self.reflectance[base..base + self.bands]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// p x p x bands values, row-major.
    pub pixels: Vec<f32>,
    /// Top-left (row, col) in the source scene; multiples of the stride.
    pub origin: (usize, usize),
    /// Sorted distinct non-background class ids present in the patch.
    pub label_multi: Vec<u32>,
    /// Centre-pixel class, single-label task only; never background.
    pub label_single: Option<u32>,
    /// Census flag: more than one distinct ground-truth value (background
    /// counts as a distinct value) within the patch.
    pub is_mixed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Multi,
    Single,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Task::Multi => write!(f, "multi"),
            Task::Single => write!(f, "single"),
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi" => Ok(Task::Multi),
            "single" => Ok(Task::Single),
            other => Err(Error::InvalidArgument(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
    pub patch_size: usize,
    pub bands: usize,
    pub num_classes: u32,
    pub task: Task,
    /// Checksum of the source cube, carried into manifests.
    pub source_digest: String,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Flattened feature length per patch.
    pub fn features(&self) -> usize {
        self.patch_size * self.patch_size * self.bands
    }

    pub fn census(&self) -> Census {
        let mixed = self.patches.iter().filter(|p| p.is_mixed).count();
        Census {
            total: self.patches.len(),
            mixed,
            uniform: self.patches.len() - mixed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Census {
    pub total: usize,
    pub mixed: usize,
    pub uniform: usize,
}

/// Index lists for one seed: an independent 90/10 pretrain shuffle plus a
/// 10% test / 80% train / 10% val classifier split, with the train and val
/// lists optionally subsampled by a reduction fraction (test untouched).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub pretrain_train: Vec<usize>,
    pub pretrain_val: Vec<usize>,
    pub cls_train: Vec<usize>,
    pub cls_val: Vec<usize>,
    pub cls_test: Vec<usize>,
    pub reduction: f64,
}

pub const ALLOWED_REDUCTIONS: [f64; 4] = [1.0, 0.5, 0.4, 0.2];

/// Per-band mean/std computed on the classifier training split only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn load_cube(data_path: &Path, gt_path: &Path) -> Result<HsiCube> {
    let data = npy::read(data_path)?;
    let gt = npy::read(gt_path)?;
    if data.shape.len() != 3 {
        return Err(Error::Npy {
            path: data_path.to_path_buf(),
            reason: format!("expected 3-d cube, got shape {:?}", data.shape),
        });
    }
    if gt.shape.len() != 2 {
        return Err(Error::Npy {
            path: gt_path.to_path_buf(),
            reason: format!("expected 2-d ground truth, got shape {:?}", gt.shape),
        });
    }
    let (h, w, b) = (data.shape[0], data.shape[1], data.shape[2]);
    if gt.shape != [h, w] {
        return Err(Error::shape(
            "load_cube",
            format!("gt extents {h}x{w}"),
            format!("{}x{}", gt.shape[0], gt.shape[1]),
        ));
    }
    let reflectance = match data.data {
        NpyData::F32(v) => v,
        NpyData::I64(v) => v.into_iter().map(|x| x as f32).collect(),
    };
    let gt_vals: Vec<i64> = match gt.data {
        NpyData::I64(v) => v,
        NpyData::F32(_) => {
            return Err(Error::Npy {
                path: gt_path.to_path_buf(),
                reason: "ground truth must be an integer array".into(),
            })
        }
    };
    if let Some(&bad) = gt_vals.iter().find(|&&v| v < 0) {
        return Err(Error::InvalidArgument(format!(
            "ground-truth value {bad} outside [0, C]"
        )));
    }
    let gt: Vec<u32> = gt_vals.into_iter().map(|v| v as u32).collect();
    let num_classes = gt.iter().copied().max().unwrap_or(0);
    Ok(HsiCube {
        height: h,
        width: w,
        bands: b,
        reflectance,
        gt,
        num_classes,
    })
}

fn cube_digest(cube: &HsiCube) -> String {
    let mut hasher = Sha256::new();
    for v in &cube.reflectance {
        hasher.update(v.to_le_bytes());
    }
    for v in &cube.gt {
        hasher.update(v.to_le_bytes());
    }
    format!("{:x}", hasher.finalize())
}

/// Tile the scene at stride = patch size (trailing remainder dropped) and
/// annotate per task. Multi-label: all-background patches excluded, labels
/// are the distinct non-background classes present. Single-label: patches
/// whose centre pixel is background excluded, label is the centre class.
pub fn sample_patches(cube: &HsiCube, patch_size: usize, task: Task) -> Result<PatchSet> {
    if patch_size < 1 {
        return Err(Error::InvalidArgument("patch size must be >= 1".into()));
    }
    if patch_size > cube.height || patch_size > cube.width {
        return Err(Error::InvalidArgument(format!(
            "patch size {patch_size} larger than scene {}x{}",
            cube.height, cube.width
        )));
    }
    if task == Task::Single && patch_size.is_multiple_of(2) {
        return Err(Error::InvalidArgument(
            "single-label sampling requires an odd patch size (centre pixel)".into(),
        ));
    }
    let p = patch_size;
    let mut patches = Vec::new();
    for pr in 0..cube.height / p {
        for pc in 0..cube.width / p {
            let (r0, c0) = (pr * p, pc * p);
            let mut values = HashSet::new();
            let mut classes = HashSet::new();
            for r in r0..r0 + p {
                for c in c0..c0 + p {
                    let v = cube.gt_at(r, c);
                    values.insert(v);
                    if v != 0 {
                        classes.insert(v);
                    }
                }
            }
            let is_mixed = values.len() > 1;
            let (label_multi, label_single) = match task {
                Task::Multi => {
                    if classes.is_empty() {
                        continue;
                    }
                    let mut labels: Vec<u32> = classes.into_iter().collect();
                    labels.sort_unstable();
                    (labels, None)
                }
                Task::Single => {
                    let centre = cube.gt_at(r0 + p / 2, c0 + p / 2);
                    if centre == 0 {
                        continue;
                    }
                    (Vec::new(), Some(centre))
                }
            };
            let mut pixels = Vec::with_capacity(p * p * cube.bands);
            for r in r0..r0 + p {
                for c in c0..c0 + p {
                    pixels.extend_from_slice(cube.pixel(r, c));
                }
            }
            patches.push(Patch {
                pixels,
                origin: (r0, c0),
                label_multi,
                label_single,
                is_mixed,
            });
        }
    }
    Ok(PatchSet {
        patches,
        patch_size: p,
        bands: cube.bands,
        num_classes: cube.num_classes,
        task,
        source_digest: cube_digest(cube),
    })
}

/// Per-band statistics over the patches at `indices`. A band with std below
/// 1e-8 gets std 1 so constant bands normalize to zero.
pub fn compute_band_stats(set: &PatchSet, indices: &[usize]) -> Result<BandStats> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument(
            "band stats need at least one patch index".into(),
        ));
    }
    let b = set.bands;
    let pixels_per_patch = set.patch_size * set.patch_size;
    let mut mean = vec![0.0f64; b];
    let mut count = 0usize;
    for &i in indices {
        let patch = &set.patches[i];
        for px in 0..pixels_per_patch {
            for (m, &v) in mean.iter_mut().zip(&patch.pixels[px * b..(px + 1) * b]) {
                *m += v as f64;
            }
        }
        count += pixels_per_patch;
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    let mut var = vec![0.0f64; b];
    for &i in indices {
        let patch = &set.patches[i];
        for px in 0..pixels_per_patch {
            for band in 0..b {
                let d = patch.pixels[px * b + band] as f64 - mean[band];
                var[band] += d * d;
            }
        }
    }
    let std = var
        .into_iter()
        .map(|v| {
            let s = (v / count as f64).sqrt();
            if s < 1e-8 {
                1.0
            } else {
                s
            }
        })
        .collect();
    Ok(BandStats { mean, std })
}

/// Apply (x - mean) / std per band to every pixel of every patch.
pub fn normalize(set: &PatchSet, stats: &BandStats) -> PatchSet {
    let b = set.bands;
    let mut out = set.clone();
    for patch in out.patches.iter_mut() {
        for (i, v) in patch.pixels.iter_mut().enumerate() {
            let band = i % b;
            *v = ((*v as f64 - stats.mean[band]) / stats.std[band]) as f32;
        }
    }
    out
}

/// Remove exact bitwise-duplicate patch tensors, keeping first occurrences
/// and the original order. Used during contrastive pretraining only.
pub fn dedup_batch(batch: Vec<Patch>) -> Vec<Patch> {
    let mut seen: HashSet<Vec<u32>> = HashSet::with_capacity(batch.len());
    batch
        .into_iter()
        .filter(|p| seen.insert(p.pixels.iter().map(|v| v.to_bits()).collect()))
        .collect()
}

/// Build a seeded split plan over `n` patches. The classifier shuffle yields
/// 10% test / 80% train / 10% val; reduction subsamples train and val by the
/// fraction, leaving test untouched. The pretrain 90/10 split uses an
/// independent shuffle of the same seed.
pub fn make_splits(n: usize, seed: u64, reduction: f64) -> Result<SplitPlan> {
    if n < 10 {
        return Err(Error::InvalidArgument(format!(
            "need at least 10 patches to split, got {n}"
        )));
    }
    if !ALLOWED_REDUCTIONS.contains(&reduction) {
        return Err(Error::InvalidArgument(format!(
            "reduction {reduction} not in {ALLOWED_REDUCTIONS:?}"
        )));
    }
    let root = Rng::new(seed);

    let mut cls_perm: Vec<usize> = (0..n).collect();
    root.fork(0x636c73).shuffle(&mut cls_perm);
    let n_test = n / 10;
    let n_train = (n * 8) / 10;
    let cls_test = cls_perm[..n_test].to_vec();
    let full_train = &cls_perm[n_test..n_test + n_train];
    let full_val = &cls_perm[n_test + n_train..];
    let keep_train = ((n_train as f64) * reduction).floor() as usize;
    let keep_val = ((full_val.len() as f64) * reduction).floor() as usize;
    let cls_train = full_train[..keep_train].to_vec();
    let cls_val = full_val[..keep_val.max(1)].to_vec();

    let mut pre_perm: Vec<usize> = (0..n).collect();
    root.fork(0x707265).shuffle(&mut pre_perm);
    let n_pre_train = (n * 9) / 10;
    let pretrain_train = pre_perm[..n_pre_train].to_vec();
    let pretrain_val = pre_perm[n_pre_train..].to_vec();

    Ok(SplitPlan {
        pretrain_train,
        pretrain_val,
        cls_train,
        cls_val,
        cls_test,
        reduction,
    })
}

/// Digest of the test indices, used by the harness to assert test-set
/// stability across sweep points.
pub fn test_index_digest(plan: &SplitPlan) -> String {
    let mut hasher = Sha256::new();
    for &i in &plan.cls_test {
        hasher.update((i as u64).to_le_bytes());
    }
    format!("{:x}", hasher.finalize())
}

#[derive(Debug, Serialize, Deserialize)]
struct PatchSetManifest {
    patch_size: usize,
    stride: usize,
    bands: usize,
    num_classes: u32,
    task: Task,
    count: usize,
    source_digest: String,
}

/// Persist a patch set as a directory: patches.npy, labels_multi.csv,
/// labels_single.csv, origins.csv, manifest.json.
pub fn save_patchset(set: &PatchSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let n = set.len();
    let p = set.patch_size;
    let mut flat = Vec::with_capacity(n * set.features());
    for patch in &set.patches {
        flat.extend_from_slice(&patch.pixels);
    }
    npy::write_f32(&dir.join("patches.npy"), &[n, p, p, set.bands], &flat)?;

    let mut multi = csv::Writer::from_path(dir.join("labels_multi.csv"))?;
    multi.write_record(["patch_id", "classes"])?;
    for (i, patch) in set.patches.iter().enumerate() {
        let labels = patch
            .label_multi
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(";");
        multi.write_record([i.to_string(), labels])?;
    }
    multi.flush()?;

    let mut single = csv::Writer::from_path(dir.join("labels_single.csv"))?;
    single.write_record(["patch_id", "class"])?;
    for (i, patch) in set.patches.iter().enumerate() {
        let label = patch.label_single.map(|c| c.to_string()).unwrap_or_default();
        single.write_record([i.to_string(), label])?;
    }
    single.flush()?;

    let mut origins = csv::Writer::from_path(dir.join("origins.csv"))?;
    origins.write_record(["patch_id", "row", "col", "mixed"])?;
    for (i, patch) in set.patches.iter().enumerate() {
        origins.write_record([
            i.to_string(),
            patch.origin.0.to_string(),
            patch.origin.1.to_string(),
            (patch.is_mixed as u8).to_string(),
        ])?;
    }
    origins.flush()?;

    let manifest = PatchSetManifest {
        patch_size: p,
        stride: p,
        bands: set.bands,
        num_classes: set.num_classes,
        task: set.task,
        count: n,
        source_digest: set.source_digest.clone(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_patchset(dir: &Path) -> Result<PatchSet> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::DataNotFound(manifest_path));
    }
    let manifest: PatchSetManifest =
        serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
    let arr = npy::read(&dir.join("patches.npy"))?;
    let flat = match arr.data {
        NpyData::F32(v) => v,
        _ => {
            return Err(Error::Npy {
                path: dir.join("patches.npy"),
                reason: "patches must be <f4".into(),
            })
        }
    };
    let feat = manifest.patch_size * manifest.patch_size * manifest.bands;
    if flat.len() != manifest.count * feat {
        return Err(Error::shape(
            "load_patchset",
            format!("{} values", manifest.count * feat),
            format!("{}", flat.len()),
        ));
    }

    let read_csv = |name: &str| -> Result<Vec<csv::StringRecord>> {
        let mut rdr = csv::Reader::from_path(dir.join(name))?;
        Ok(rdr.records().collect::<std::result::Result<Vec<_>, _>>()?)
    };
    let multi = read_csv("labels_multi.csv")?;
    let single = read_csv("labels_single.csv")?;
    let origins = read_csv("origins.csv")?;

    let mut patches = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let label_multi: Vec<u32> = multi[i][1]
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::Config(format!("bad class id {s:?}"))))
            .collect::<Result<_>>()?;
        let label_single = if single[i][1].is_empty() {
            None
        } else {
            Some(
                single[i][1]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad class id {:?}", &single[i][1])))?,
            )
        };
        patches.push(Patch {
            pixels: flat[i * feat..(i + 1) * feat].to_vec(),
            origin: (
                origins[i][1].parse().unwrap_or(0),
                origins[i][2].parse().unwrap_or(0),
            ),
            label_multi,
            label_single,
            is_mixed: &origins[i][3] == "1",
        });
    }
    Ok(PatchSet {
        patches,
        patch_size: manifest.patch_size,
        bands: manifest.bands,
        num_classes: manifest.num_classes,
        task: manifest.task,
        source_digest: manifest.source_digest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Small synthetic scene: h x w with a given gt raster, bands = 2,
    /// reflectance derived from position so patches are distinct.
    pub fn synthetic_cube(h: usize, w: usize, gt: Vec<u32>) -> HsiCube {
        assert_eq!(gt.len(), h * w);
        let bands = 2;
        let mut reflectance = Vec::with_capacity(h * w * bands);
        for r in 0..h {
            for c in 0..w {
                reflectance.push(r as f32 + 0.1 * c as f32);
                reflectance.push(c as f32 - 0.1 * r as f32);
            }
        }
        let num_classes = gt.iter().copied().max().unwrap_or(0);
        HsiCube {
            height: h,
            width: w,
            bands,
            reflectance,
            gt,
            num_classes,
        }
    }

    #[test]
    fn all_background_scene_gives_empty_multi_set() {
        let cube = synthetic_cube(6, 6, vec![0; 36]);
        let set = sample_patches(&cube, 3, Task::Multi).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn tiling_count_matches_floor_formula() {
        let cube = synthetic_cube(7, 8, vec![1; 56]);
        let set = sample_patches(&cube, 3, Task::Multi).unwrap();
        assert_eq!(set.len(), (7 / 3) * (8 / 3));
    }

    #[test]
    fn multi_label_collects_nonbackground_classes() {
        // 3x3 scene, one patch: background + classes 2 and 5
        let gt = vec![0, 2, 2, 0, 5, 2, 0, 0, 0];
        let cube = synthetic_cube(3, 3, gt);
        let set = sample_patches(&cube, 3, Task::Multi).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.patches[0].label_multi, vec![2, 5]);
        assert!(set.patches[0].is_mixed);
    }

    #[test]
    fn single_label_takes_centre_and_skips_background_centre() {
        let gt = vec![
            1, 1, 1, 1, 1, 1, // row 0
            1, 2, 1, 1, 0, 1, // centre of left patch = 2, right = 0
            1, 1, 1, 1, 1, 1,
        ];
        let cube = synthetic_cube(3, 6, gt);
        let set = sample_patches(&cube, 3, Task::Single).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.patches[0].label_single, Some(2));
        assert!(set.patches[0].label_single != Some(0));
    }

    #[test]
    fn single_label_requires_odd_patch() {
        let cube = synthetic_cube(4, 4, vec![1; 16]);
        assert!(sample_patches(&cube, 2, Task::Single).is_err());
    }

    #[test]
    fn uniform_patch_census() {
        // left patch uniform class 1; right patch mixed (1 and 0)
        let gt = vec![1, 1, 1, 1, 1, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1];
        let cube = synthetic_cube(3, 6, gt);
        let set = sample_patches(&cube, 3, Task::Multi).unwrap();
        let census = set.census();
        assert_eq!(census.total, 2);
        assert_eq!(census.mixed, 1);
        assert_eq!(census.uniform, 1);
    }

    #[test]
    fn patch_too_large_rejected() {
        let cube = synthetic_cube(3, 3, vec![1; 9]);
        assert!(sample_patches(&cube, 5, Task::Multi).is_err());
    }

    #[test]
    fn normalize_constant_band_to_zeros() {
        let cube = synthetic_cube(3, 3, vec![1; 9]);
        let mut set = sample_patches(&cube, 3, Task::Multi).unwrap();
        for p in set.patches.iter_mut() {
            for (i, v) in p.pixels.iter_mut().enumerate() {
                if i % 2 == 0 {
                    *v = 7.0; // band 0 constant
                }
            }
        }
        let stats = compute_band_stats(&set, &[0]).unwrap();
        let normed = normalize(&set, &stats);
        for p in &normed.patches {
            for (i, &v) in p.pixels.iter().enumerate() {
                if i % 2 == 0 {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn normalize_two_values_to_plus_minus_one() {
        let cube = synthetic_cube(3, 6, vec![1; 18]);
        let mut set = sample_patches(&cube, 3, Task::Multi).unwrap();
        assert_eq!(set.len(), 2);
        for (pi, p) in set.patches.iter_mut().enumerate() {
            let v = if pi == 0 { 1.0 } else { 3.0 };
            for x in p.pixels.iter_mut() {
                *x = v;
            }
        }
        let stats = compute_band_stats(&set, &[0, 1]).unwrap();
        let normed = normalize(&set, &stats);
        for &v in &normed.patches[0].pixels {
            assert!((v + 1.0).abs() < 1e-6);
        }
        for &v in &normed.patches[1].pixels {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn training_split_stats_are_zscore() {
        let cube = synthetic_cube(12, 12, vec![1; 144]);
        let set = sample_patches(&cube, 3, Task::Multi).unwrap();
        let idx: Vec<usize> = (0..set.len()).collect();
        let stats = compute_band_stats(&set, &idx).unwrap();
        let normed = normalize(&set, &stats);
        let after = compute_band_stats(&normed, &idx).unwrap();
        for band in 0..set.bands {
            assert!(after.mean[band].abs() < 1e-4);
            assert!((after.std[band] - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn dedup_keeps_first_occurrence_in_order() {
        let cube = synthetic_cube(3, 9, vec![1; 27]);
        let set = sample_patches(&cube, 3, Task::Multi).unwrap();
        let a = set.patches[0].clone();
        let b = set.patches[1].clone();
        let out = dedup_batch(vec![a.clone(), a.clone(), b.clone()]);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], a);
        assert_eq!(out[1], b);
        let out = dedup_batch(vec![a.clone(); 5]);
        assert_eq!(out.len(), 1);
        let out = dedup_batch(vec![a, b]);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn split_arithmetic_n1000() {
        let plan = make_splits(1000, 1, 1.0).unwrap();
        assert_eq!(plan.cls_test.len(), 100);
        assert_eq!(plan.cls_train.len(), 800);
        assert_eq!(plan.cls_val.len(), 100);
        assert_eq!(plan.pretrain_train.len(), 900);
        assert_eq!(plan.pretrain_val.len(), 100);

        let half = make_splits(1000, 1, 0.5).unwrap();
        assert_eq!(half.cls_train.len(), 400);
        assert_eq!(half.cls_test.len(), 100);
    }

    #[test]
    fn split_determinism_and_test_stability() {
        let a = make_splits(543, 7, 1.0).unwrap();
        let b = make_splits(543, 7, 1.0).unwrap();
        assert_eq!(a, b);
        for r in [0.5, 0.4, 0.2] {
            let reduced = make_splits(543, 7, r).unwrap();
            assert_eq!(reduced.cls_test, a.cls_test);
        }
    }

    #[test]
    fn split_rejects_bad_reduction() {
        assert!(make_splits(100, 1, 0.3).is_err());
    }

    #[test]
    fn split_disjoint_and_covering() {
        let plan = make_splits(237, 3, 1.0).unwrap();
        let mut all: Vec<usize> = plan
            .cls_train
            .iter()
            .chain(&plan.cls_val)
            .chain(&plan.cls_test)
            .copied()
            .collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all, (0..237).collect::<Vec<_>>());
    }

    #[test]
    fn patchset_round_trip() {
        let gt = vec![
            1, 1, 1, 2, 2, 2, //
            1, 0, 1, 2, 2, 2, //
            1, 1, 1, 2, 2, 2,
        ];
        let cube = synthetic_cube(3, 6, gt);
        let set = sample_patches(&cube, 3, Task::Multi).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_patchset(&set, dir.path()).unwrap();
        let loaded = load_patchset(dir.path()).unwrap();
        assert_eq!(loaded.len(), set.len());
        assert_eq!(loaded.num_classes, set.num_classes);
        for (a, b) in loaded.patches.iter().zip(&set.patches) {
            assert_eq!(a, b);
        }
    }
}
