//! Synthetic multi-modality lesion volumes.
//!
//! Every sample is packed into a fixed `m`-channel array: channel `k` carries
//! universe modality `k` when the dataset has it and is exactly zero otherwise.
//! A present channel is a modality-specific view of one shared smooth anatomy
//! field plus a lesion contrast whose sign and size depend on the
//! (pathology, modality) pair, so different datasets look genuinely different
//! while the modalities inside one dataset stay redundant.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use crate::domain::{DomainToken, ModalityUniverse};
use crate::error::{ensure, Error, Result};
use crate::tensor::{index3, voxel_count, Dims};

pub const DEFAULT_P_DROP: f64 = 0.3;
pub const DEFAULT_FG_BIAS: f64 = 0.5;

/// Generator knobs for lesions and per-modality appearance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionParams {
    /// Inclusive range of lesion count per volume.
    pub count: [usize; 2],
    /// Range of ellipsoid semi-axes, in voxels.
    pub radius: [f64; 2],
    /// Signed lesion contrast per modality, in units of anatomy std.
    pub contrasts: BTreeMap<String, f64>,
    /// Std of independent per-channel noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Inclusive range of unannotated look-alike blobs per volume. They share
    /// the lesion contrast but stay background in the mask, the way one
    /// dataset's protocol leaves another pathology's findings unlabelled.
    #[serde(default)]
    pub distractors: [usize; 2],
    #[serde(default = "default_distractor_radius")]
    pub distractor_radius: [f64; 2],
}

fn default_distractor_radius() -> [f64; 2] {
    [1.3, 2.0]
}

fn default_noise() -> f64 {
    0.35
}

// (modality, anatomy gain) pairs; the gain sign mimics T1/T2-style inversion.
const ANATOMY_GAIN: [(&str, f64); 6] = [
    ("PD", 0.8),
    ("FLAIR", -0.6),
    ("T1", 1.0),
    ("T1c", 0.9),
    ("T2", -1.0),
    ("DWI", 0.5),
];

fn anatomy_gain(modality: &str) -> f64 {
    ANATOMY_GAIN
        .iter()
        .find(|(n, _)| *n == modality)
        .map(|(_, g)| *g)
        .unwrap_or(0.7)
}

impl LesionParams {
    /// Size prior and contrast signature for a pathology.
    pub fn for_pathology(pathology: &str, universe: &ModalityUniverse) -> Self {
        // PD, FLAIR, T1, T1c, T2, DWI
        let (count, radius, distractors, table): ([usize; 2], [f64; 2], [usize; 2], [f64; 6]) = match pathology {
            "Tumor" => ([1, 1], [2.5, 4.0], [1, 3], [1.5, 2.2, -1.6, 2.6, 2.0, 1.0]),
            "Stroke lesion" => ([1, 2], [2.0, 3.2], [1, 3], [1.0, 1.8, -2.2, -0.6, 1.6, 3.0]),
            "Sclerosis lesions" => ([2, 4], [1.3, 2.0], [0, 0], [2.2, 2.4, -1.2, 1.2, 2.2, 0.6]),
            "White matter hyperintensity" => {
                ([1, 3], [1.5, 2.5], [0, 1], [1.2, 2.8, -1.0, -0.4, 1.8, 0.4])
            }
            _ => ([1, 2], [1.5, 3.0], [0, 0], [1.5; 6]),
        };
        let contrasts = universe
            .names
            .iter()
            .map(|n| {
                let c = ANATOMY_GAIN
                    .iter()
                    .position(|(m, _)| m == n)
                    .map(|i| table[i])
                    .unwrap_or(1.5);
                (n.clone(), c)
            })
            .collect();
        Self {
            count,
            radius,
            contrasts,
            noise: default_noise(),
            distractors,
            distractor_radius: default_distractor_radius(),
        }
    }
}

/// Declarative description of one synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub id: String,
    pub modalities: Vec<String>,
    pub pathology: String,
    pub n_train: usize,
    pub n_test: usize,
    pub volume_shape: Dims,
    /// Falls back to [`LesionParams::for_pathology`] when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lesion_params: Option<LesionParams>,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self, universe: &ModalityUniverse) -> Result<()> {
        ensure!(!self.id.is_empty(), "dataset id must be non-empty");
        ensure!(
            !self.modalities.is_empty(),
            "dataset {}: modalities must be non-empty",
            self.id
        );
        for (i, m) in self.modalities.iter().enumerate() {
            universe
                .modality_index(m)
                .map_err(|e| Error::validation(format!("dataset {}: {e}", self.id)))?;
            ensure!(
                !self.modalities[..i].contains(m),
                "dataset {}: duplicate modality {m:?}",
                self.id
            );
        }
        universe
            .pathology_index(&self.pathology)
            .map_err(|e| Error::validation(format!("dataset {}: {e}", self.id)))?;
        ensure!(
            self.n_train >= 1 && self.n_test >= 1,
            "dataset {}: n_train and n_test must be >= 1",
            self.id
        );
        ensure!(
            self.volume_shape.iter().all(|&s| s >= 8),
            "dataset {}: every volume dimension must be >= 8, got {:?}",
            self.id,
            self.volume_shape
        );
        if let Some(lp) = &self.lesion_params {
            ensure!(
                lp.count[0] >= 1 && lp.count[0] <= lp.count[1],
                "dataset {}: lesion count range must satisfy 1 <= min <= max",
                self.id
            );
            ensure!(
                lp.radius[0] > 0.0 && lp.radius[0] <= lp.radius[1],
                "dataset {}: lesion radius range must satisfy 0 < min <= max",
                self.id
            );
            ensure!(lp.noise >= 0.0, "dataset {}: noise must be >= 0", self.id);
            ensure!(
                lp.distractors[0] <= lp.distractors[1],
                "dataset {}: distractor count range must satisfy min <= max",
                self.id
            );
            ensure!(
                lp.distractor_radius[0] > 0.0 && lp.distractor_radius[0] <= lp.distractor_radius[1],
                "dataset {}: distractor radius range must satisfy 0 < min <= max",
                self.id
            );
        }
        Ok(())
    }

    pub fn resolved_lesion_params(&self, universe: &ModalityUniverse) -> LesionParams {
        self.lesion_params
            .clone()
            .unwrap_or_else(|| LesionParams::for_pathology(&self.pathology, universe))
    }

    pub fn token(&self, universe: &ModalityUniverse) -> Result<DomainToken> {
        DomainToken::build(&self.modalities, &self.pathology, universe)
    }
}

/// One packed multi-channel volume with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSample {
    /// `[m, D, H, W]`, C order.
    pub packed: Vec<f32>,
    /// `[D, H, W]`, values in {0, 1}.
    pub mask: Vec<u8>,
    pub dims: Dims,
    pub token: DomainToken,
    pub present: Vec<bool>,
}

impl VolumeSample {
    pub fn channels(&self) -> usize {
        self.present.len()
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn channel(&self, k: usize) -> &[f32] {
        let n = self.voxels();
        &self.packed[k * n..(k + 1) * n]
    }

    pub fn lesion_voxels(&self) -> usize {
        self.mask.iter().map(|&v| v as usize).sum()
    }

    /// Checks zero-fill closure, token/present agreement and shapes.
    pub fn check_invariants(&self, universe: &ModalityUniverse) -> Result<()> {
        let n = self.voxels();
        ensure!(
            self.present.len() == universe.m(),
            "present vector has length {} but universe has {} modalities",
            self.present.len(),
            universe.m()
        );
        ensure!(
            self.packed.len() == universe.m() * n,
            "packed length mismatch"
        );
        ensure!(self.mask.len() == n, "mask length mismatch");
        ensure!(self.mask.iter().all(|&v| v <= 1), "mask must be binary");
        let bits = self.token.modality_bits(universe);
        for k in 0..universe.m() {
            ensure!(
                (bits[k] == 1) == self.present[k],
                "token bit {k} disagrees with present vector"
            );
            if !self.present[k] {
                ensure!(
                    self.channel(k).iter().all(|&v| v == 0.0),
                    "absent channel {k} is not zero-filled"
                );
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: DatasetSpec,
    pub train: Vec<VolumeSample>,
    pub test: Vec<VolumeSample>,
}

/// SplitMix64 finalizer; used to derive independent seeds from (seed, tag).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_dataset(spec: &DatasetSpec, universe: &ModalityUniverse) -> Result<SyntheticDataset> {
    universe.validate()?;
    spec.validate(universe)?;
    let params = spec.resolved_lesion_params(universe);
    let token = spec.token(universe)?;
    let mut present = vec![false; universe.m()];
    for m in &spec.modalities {
        present[universe.modality_index(m)?] = true;
    }
    let make = |split: u64, i: usize| {
        let seed = derive_seed(derive_seed(spec.seed, split), i as u64);
        generate_sample(spec.volume_shape, &present, &token, universe, &params, seed)
    };
    let train = (0..spec.n_train).into_par_iter().map(|i| make(1, i)).collect();
    let test = (0..spec.n_test).into_par_iter().map(|i| make(2, i)).collect();
    Ok(SyntheticDataset {
        spec: spec.clone(),
        train,
        test,
    })
}

fn box_blur_axis(field: &mut [f64], dims: Dims, axis: usize) {
    let src = field.to_vec();
    let len = dims[axis];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let pos = [z, y, x];
                let c = pos[axis];
                let lo = c.saturating_sub(1);
                let hi = (c + 1).min(len - 1);
                let mut acc = 0.0;
                for t in lo..=hi {
                    let mut p = pos;
                    p[axis] = t;
                    acc += src[index3(dims, p[0], p[1], p[2])];
                }
                field[index3(dims, z, y, x)] = acc / (hi - lo + 1) as f64;
            }
        }
    }
}

fn standardize(field: &mut [f64]) {
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let sd = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    field.iter_mut().for_each(|v| *v = (*v - mean) / sd);
}

fn draw_ellipsoid(dims: Dims, radius: [f64; 2], rng: &mut ChaCha8Rng) -> ([f64; 3], Vec<u8>) {
    let radii: [f64; 3] = std::array::from_fn(|_| rng.gen_range(radius[0]..=radius[1]));
    let center: [f64; 3] = std::array::from_fn(|a| {
        let lo = radii[a].min(dims[a] as f64 / 2.0 - 1.0).max(0.0);
        let hi = (dims[a] as f64 - 1.0 - lo).max(lo);
        rng.gen_range(lo..=hi)
    });
    let mut blob = vec![0u8; voxel_count(dims)];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let q = [(z as f64 - center[0]) / radii[0], (y as f64 - center[1]) / radii[1], (x as f64 - center[2]) / radii[2]];
                if q.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                    blob[index3(dims, z, y, x)] = 1;
                }
            }
        }
    }
    (center, blob)
}

fn generate_sample(
    dims: Dims,
    present: &[bool],
    token: &DomainToken,
    universe: &ModalityUniverse,
    params: &LesionParams,
    seed: u64,
) -> VolumeSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = voxel_count(dims);

    let mut anatomy: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    for _ in 0..2 {
        for axis in 0..3 {
            box_blur_axis(&mut anatomy, dims, axis);
        }
    }
    standardize(&mut anatomy);

    let mut mask = vec![0u8; n];
    let count = rng.gen_range(params.count[0]..=params.count[1]);
    for _ in 0..count {
        let (center, blob) = draw_ellipsoid(dims, params.radius, &mut rng);
        mask.iter_mut().zip(&blob).for_each(|(m, &b)| *m |= b);
        if blob.iter().all(|&v| v == 0) {
            let c = center.map(|v| v.round() as usize);
            mask[index3(dims, c[0].min(dims[0] - 1), c[1].min(dims[1] - 1), c[2].min(dims[2] - 1))] = 1;
        }
    }
    // look-alikes never overwrite annotated voxels
    let mut signal: Vec<f64> = mask.iter().map(|&m| m as f64).collect();
    let extra = rng.gen_range(params.distractors[0]..=params.distractors[1]);
    for _ in 0..extra {
        let (_, blob) = draw_ellipsoid(dims, params.distractor_radius, &mut rng);
        for (s, &b) in signal.iter_mut().zip(&blob) {
            if b == 1 {
                *s = 1.0;
            }
        }
    }

    let mut packed = vec![0f32; universe.m() * n];
    for (k, name) in universe.names.iter().enumerate() {
        // Draw noise for every channel so the noise stream does not depend on the modality set.
        let noise: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        if !present[k] {
            continue;
        }
        let gain = anatomy_gain(name);
        let contrast = params.contrasts.get(name).copied().unwrap_or(0.0);
        let dst = &mut packed[k * n..(k + 1) * n];
        for i in 0..n {
            let v = gain * anatomy[i] + params.noise * noise[i] + contrast * signal[i];
            dst[i] = v as f32;
        }
    }

    VolumeSample {
        packed,
        mask,
        dims,
        token: token.clone(),
        present: present.to_vec(),
    }
}

/// Per-channel z-scoring of present channels.
///
/// Returns the normalized sample and the indices of present channels whose
/// variance was zero; those are left as `x - mean`, i.e. all zero.
pub fn znormalize(sample: &VolumeSample) -> (VolumeSample, Vec<usize>) {
    let mut out = sample.clone();
    let n = sample.voxels();
    let mut degenerate = Vec::new();
    for k in 0..sample.channels() {
        if !sample.present[k] {
            continue;
        }
        let ch = &mut out.packed[k * n..(k + 1) * n];
        let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        if var > 0.0 {
            let sd = var.sqrt();
            ch.iter_mut().for_each(|v| *v = ((*v as f64 - mean) / sd) as f32);
        } else {
            log::warn!("channel {k} has zero variance; left as x - mean");
            degenerate.push(k);
            ch.iter_mut().for_each(|v| *v = (*v as f64 - mean) as f32);
        }
    }
    (out, degenerate)
}

/// Training-time modality dropout. At least one present channel always survives.
pub fn drop_modalities<R: Rng + ?Sized>(sample: &VolumeSample, p_drop: f64, rng: &mut R) -> VolumeSample {
    debug_assert!((0.0..1.0).contains(&p_drop));
    let present: Vec<usize> = (0..sample.channels()).filter(|&k| sample.present[k]).collect();
    if present.len() <= 1 || p_drop <= 0.0 {
        return sample.clone();
    }
    let keep = loop {
        let keep: Vec<bool> = present.iter().map(|_| !rng.gen_bool(p_drop)).collect();
        if keep.iter().any(|&k| k) {
            break keep;
        }
    };
    let mut out = sample.clone();
    let n = sample.voxels();
    for (&k, &kept) in present.iter().zip(&keep) {
        if !kept {
            out.present[k] = false;
            out.packed[k * n..(k + 1) * n].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out.token = sample.token.with_modalities(&out.present);
    out
}

fn crop(sample: &VolumeSample, start: Dims, shape: Dims) -> VolumeSample {
    let n_out = voxel_count(shape);
    let n_in = sample.voxels();
    let mut packed = vec![0f32; sample.channels() * n_out];
    let mut mask = vec![0u8; n_out];
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            let src = index3(sample.dims, start[0] + z, start[1] + y, start[2]);
            let dst = index3(shape, z, y, 0);
            for k in 0..sample.channels() {
                packed[k * n_out + dst..k * n_out + dst + shape[2]]
                    .copy_from_slice(&sample.packed[k * n_in + src..k * n_in + src + shape[2]]);
            }
            mask[dst..dst + shape[2]].copy_from_slice(&sample.mask[src..src + shape[2]]);
        }
    }
    VolumeSample {
        packed,
        mask,
        dims: shape,
        token: sample.token.clone(),
        present: sample.present.clone(),
    }
}

/// Random spatial crop; with probability `fg_bias` it is centered on a random lesion voxel.
pub fn sample_patch<R: Rng + ?Sized>(
    sample: &VolumeSample,
    patch_shape: Dims,
    rng: &mut R,
    fg_bias: f64,
) -> Result<VolumeSample> {
    ensure!(
        (0..3).all(|a| patch_shape[a] >= 1 && patch_shape[a] <= sample.dims[a]),
        "patch {:?} does not fit in volume {:?}",
        patch_shape,
        sample.dims
    );
    if patch_shape == sample.dims {
        return Ok(sample.clone());
    }
    let lesion: Vec<usize> = sample
        .mask
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 1)
        .map(|(i, _)| i)
        .collect();
    let use_fg = rng.gen_bool(fg_bias.clamp(0.0, 1.0)) && !lesion.is_empty();
    let start: Dims = if use_fg {
        let i = *lesion.choose(rng).expect("non-empty");
        let [_, h, w] = sample.dims;
        let c = [i / (h * w), (i / w) % h, i % w];
        std::array::from_fn(|a| {
            let lo = c[a] as isize - (patch_shape[a] / 2) as isize;
            lo.clamp(0, (sample.dims[a] - patch_shape[a]) as isize) as usize
        })
    } else {
        std::array::from_fn(|a| rng.gen_range(0..=sample.dims[a] - patch_shape[a]))
    };
    Ok(crop(sample, start, patch_shape))
}

/// Rotates by `quarter_turns * 90°` in the plane spanned by `axes` (which must have equal length).
pub fn rotate90(sample: &VolumeSample, axes: (usize, usize), quarter_turns: usize) -> VolumeSample {
    let (a, b) = axes;
    assert!(a < 3 && b < 3 && a != b && sample.dims[a] == sample.dims[b]);
    let k = quarter_turns % 4;
    if k == 0 {
        return sample.clone();
    }
    let dims = sample.dims;
    let len = dims[a];
    let n = sample.voxels();
    let mut out = sample.clone();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let src = [z, y, x];
                let mut dst = src;
                let (u, v) = (src[a], src[b]);
                let (nu, nv) = match k {
                    1 => (len - 1 - v, u),
                    2 => (len - 1 - u, len - 1 - v),
                    _ => (v, len - 1 - u),
                };
                dst[a] = nu;
                dst[b] = nv;
                let si = index3(dims, src[0], src[1], src[2]);
                let di = index3(dims, dst[0], dst[1], dst[2]);
                out.mask[di] = sample.mask[si];
                for c in 0..sample.channels() {
                    out.packed[c * n + di] = sample.packed[c * n + si];
                }
            }
        }
    }
    out
}

/// Random 90° rotation in a randomly chosen plane whose two axes have equal length.
pub fn random_rotate90<R: Rng + ?Sized>(sample: &VolumeSample, rng: &mut R) -> VolumeSample {
    let planes: Vec<(usize, usize)> = [(0, 1), (0, 2), (1, 2)]
        .into_iter()
        .filter(|&(a, b)| sample.dims[a] == sample.dims[b])
        .collect();
    if planes.is_empty() {
        return sample.clone();
    }
    let plane = planes[rng.gen_range(0..planes.len())];
    let k = rng.gen_range(0..4);
    rotate90(sample, plane, k)
}

// ---------------------------------------------------------------------------
// On-disk layout: <root>/<id>/manifest.json, <root>/<id>/{train,test}/sample_####.{raw,mask.raw}
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub file: String,
    pub mask_file: String,
    /// `[m, D, H, W]`
    pub shape: [usize; 4],
    pub present: Vec<bool>,
    pub token: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub universe: ModalityUniverse,
    pub spec: DatasetSpec,
    pub train: Vec<SampleEntry>,
    pub test: Vec<SampleEntry>,
}

pub fn dataset_dir(root: &Path, id: &str) -> PathBuf {
    root.join(id)
}

fn write_f32(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ensure!(
        bytes.len() == expected * 4,
        "{}: expected {} floats, found {} bytes",
        path.display(),
        expected,
        bytes.len()
    );
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes the dataset below `root` and returns the manifest path.
pub fn save_dataset(ds: &SyntheticDataset, universe: &ModalityUniverse, root: &Path) -> Result<PathBuf> {
    let dir = dataset_dir(root, &ds.spec.id);
    let entries = |split: &str, samples: &[VolumeSample]| -> Result<Vec<SampleEntry>> {
        let sdir = dir.join(split);
        fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let file = format!("{split}/sample_{i:04}.raw");
                let mask_file = format!("{split}/sample_{i:04}.mask.raw");
                write_f32(&dir.join(&file), s.packed.iter().copied())?;
                write_f32(&dir.join(&mask_file), s.mask.iter().map(|&v| v as f32))?;
                Ok(SampleEntry {
                    file,
                    mask_file,
                    shape: [s.channels(), s.dims[0], s.dims[1], s.dims[2]],
                    present: s.present.clone(),
                    token: s.token.bits().to_vec(),
                })
            })
            .collect()
    };
    let train = entries("train", &ds.train)?;
    let test = entries("test", &ds.test)?;
    let manifest = DatasetManifest {
        universe: universe.clone(),
        spec: ds.spec.clone(),
        train,
        test,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(root: &Path, id: &str) -> Result<DatasetManifest> {
    let path = dataset_dir(root, id).join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_dataset(root: &Path, id: &str) -> Result<(SyntheticDataset, ModalityUniverse)> {
    let manifest = read_manifest(root, id)?;
    let dir = dataset_dir(root, id);
    let universe = manifest.universe.clone();
    let load = |entries: &[SampleEntry]| -> Result<Vec<VolumeSample>> {
        entries
            .iter()
            .map(|e| {
                let dims = [e.shape[1], e.shape[2], e.shape[3]];
                let n = voxel_count(dims);
                let packed = read_f32(&dir.join(&e.file), e.shape[0] * n)?;
                let mask = read_f32(&dir.join(&e.mask_file), n)?
                    .into_iter()
                    .map(|v| {
                        if v == 0.0 {
                            Ok(0u8)
                        } else if v == 1.0 {
                            Ok(1u8)
                        } else {
                            Err(Error::validation(format!("{}: non-binary mask value {v}", e.mask_file)))
                        }
                    })
                    .collect::<Result<Vec<u8>>>()?;
                let s = VolumeSample {
                    packed,
                    mask,
                    dims,
                    token: DomainToken::from_bits(e.token.clone(), &universe)?,
                    present: e.present.clone(),
                };
                s.check_invariants(&universe)?;
                Ok(s)
            })
            .collect()
    };
    let ds = SyntheticDataset {
        spec: manifest.spec.clone(),
        train: load(&manifest.train)?,
        test: load(&manifest.test)?,
    };
    Ok((ds, universe))
}
