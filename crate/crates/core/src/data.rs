//! Synthetic shapes: attribute sampling, binned labels, simulated frozen
//! backbones and the on-disk dataset format.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fs;
use std::path::Path;

use gwsel_autodiff::checkpoint::atomic_write;
use gwsel_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::modality::{Modality, Task};
use crate::seed::{self, stream};

pub const CATEGORIES: [&str; 3] = ["diamond", "triangle", "egg"];
pub const SIZE_MIN: f64 = 7.0;
pub const SIZE_MAX: f64 = 14.0;
pub const POSITION_LIMIT: f64 = 3.0;
pub const ENCODING_DIM: usize = 11;
pub const BACKBONE_HIDDEN: usize = 64;

/// (r, g) over a 3x3 grid, b fixed. Color label = 3 * r_index + g_index.
pub const PALETTE: [[f64; 3]; 9] = {
    const L: [f64; 3] = [0.1, 0.5, 0.9];
    let mut out = [[0.0; 3]; 9];
    let mut i = 0;
    while i < 9 {
        out[i] = [L[i / 3], L[i % 3], 0.5];
        i += 1;
    }
    out
};

/// Cell centers in label order: bottom, top, left, right.
pub const POSITIONS: [(f64, f64); 4] = [(0.0, -2.0), (0.0, 2.0), (-2.0, 0.0), (2.0, 0.0)];
pub const POSITION_HALF_WIDTH: f64 = 0.5;
pub const ROTATION_HALF_WIDTH: f64 = PI / 16.0;
pub const SIZE_BIN_WIDTH: f64 = (SIZE_MAX - SIZE_MIN) / 4.0;
/// Classification sizes stay within this distance of their bin center.
pub const SIZE_JITTER: f64 = SIZE_BIN_WIDTH / 4.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeAttributes {
    pub category: usize,
    pub x: f64,
    pub y: f64,
    pub size: f64,
    /// Radians in `[0, 2pi)`.
    pub rotation: f64,
    pub color: [f64; 3],
}

impl ShapeAttributes {
    pub fn in_range(&self) -> bool {
        self.category < 3
            && self.x.abs() <= POSITION_LIMIT
            && self.y.abs() <= POSITION_LIMIT
            && (SIZE_MIN..=SIZE_MAX).contains(&self.size)
            && (0.0..TAU).contains(&self.rotation)
            && self.color.iter().all(|c| (0.0..=1.0).contains(c))
    }

    /// `[onehot(3), x, y, size, cos, sin, r, g, b]`, each roughly in `[-1, 1]`.
    pub fn encode(&self) -> [f64; ENCODING_DIM] {
        let mut u = [0.0; ENCODING_DIM];
        u[self.category] = 1.0;
        u[3] = self.x / POSITION_LIMIT;
        u[4] = self.y / POSITION_LIMIT;
        let mid = 0.5 * (SIZE_MIN + SIZE_MAX);
        u[5] = (self.size - mid) / (0.5 * (SIZE_MAX - SIZE_MIN));
        u[6] = self.rotation.cos();
        u[7] = self.rotation.sin();
        for k in 0..3 {
            u[8 + k] = 2.0 * self.color[k] - 1.0;
        }
        u
    }
}

fn wrap_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    if t >= TAU {
        0.0
    } else {
        t
    }
}

pub fn sample_attributes<R: Rng + ?Sized>(rng: &mut R) -> ShapeAttributes {
    ShapeAttributes {
        category: rng.random_range(0..3),
        x: rng.random_range(-POSITION_LIMIT..POSITION_LIMIT),
        y: rng.random_range(-POSITION_LIMIT..POSITION_LIMIT),
        size: rng.random_range(SIZE_MIN..SIZE_MAX),
        rotation: rng.random_range(0.0..TAU),
        color: [rng.random(), rng.random(), rng.random()],
    }
}

/// Labels in [`Task::ALL`] order.
pub type Labels = [usize; 5];

pub fn rotation_label(theta: f64) -> Option<usize> {
    (0..4).find(|&k| {
        let c = k as f64 * FRAC_PI_2;
        let d = (theta - c + PI).rem_euclid(TAU) - PI;
        (-ROTATION_HALF_WIDTH..ROTATION_HALF_WIDTH).contains(&d)
    })
}

pub fn position_label(x: f64, y: f64) -> Option<usize> {
    let h = POSITION_HALF_WIDTH;
    POSITIONS
        .iter()
        .position(|&(cx, cy)| (cx - h..cx + h).contains(&x) && (cy - h..cy + h).contains(&y))
}

pub fn size_label(size: f64) -> Option<usize> {
    if !(SIZE_MIN..=SIZE_MAX).contains(&size) {
        return None;
    }
    Some((((size - SIZE_MIN) / SIZE_BIN_WIDTH) as usize).min(3))
}

pub fn color_label(color: [f64; 3]) -> Option<usize> {
    PALETTE
        .iter()
        .position(|p| p.iter().zip(&color).all(|(a, b)| (a - b).abs() < 1e-12))
}

pub fn make_classification_labels(a: &ShapeAttributes) -> Result<Labels> {
    let reject = |what: &str| Error::Rejected(format!("{what} of {a:?}"));
    if a.category >= 3 {
        return Err(reject("category"));
    }
    Ok([
        a.category,
        color_label(a.color).ok_or_else(|| reject("color"))?,
        rotation_label(a.rotation).ok_or_else(|| reject("rotation"))?,
        position_label(a.x, a.y).ok_or_else(|| reject("position"))?,
        size_label(a.size).ok_or_else(|| reject("size"))?,
    ])
}

/// Draws attributes inside the kept bins selected by `labels`.
pub fn sample_classification<R: Rng + ?Sized>(labels: Labels, rng: &mut R) -> ShapeAttributes {
    let [category, color, rotation, position, size] = labels;
    let (cx, cy) = POSITIONS[position];
    let h = POSITION_HALF_WIDTH;
    let size_center = SIZE_MIN + (size as f64 + 0.5) * SIZE_BIN_WIDTH;
    ShapeAttributes {
        category,
        x: cx + rng.random_range(-h..h),
        y: cy + rng.random_range(-h..h),
        size: size_center + rng.random_range(-SIZE_JITTER..SIZE_JITTER),
        rotation: wrap_angle(rotation as f64 * FRAC_PI_2 + rng.random_range(-ROTATION_HALF_WIDTH..ROTATION_HALF_WIDTH)),
        color: PALETTE[color],
    }
}

#[derive(Clone, Debug, PartialEq)]
struct FeatureMap {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    out: usize,
}

/// Fixed two-layer tanh maps from the 11-dim encoding to each modality,
/// followed by per-coordinate standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneSim {
    maps: Vec<FeatureMap>,
    mean: Vec<Vec<f64>>,
    std: Vec<Vec<f64>>,
}

const BACKBONE_WEIGHT_SCALE: f64 = 0.5;
const BACKBONE_BIAS_STD: f64 = 0.1;

impl BackboneSim {
    /// Unfitted maps (identity standardization) drawn from `seed`.
    pub fn new(seed: u64) -> Self {
        let mut maps = Vec::with_capacity(3);
        for m in Modality::ALL {
            let mut rng = seed::rng(seed, stream::BACKBONE, m.index() as u64);
            let mut draw = |n: usize, std: f64| -> Vec<f64> {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            };
            let h = BACKBONE_HIDDEN;
            let d = m.dim();
            let w1 = draw(ENCODING_DIM * h, BACKBONE_WEIGHT_SCALE / (ENCODING_DIM as f64).sqrt());
            let b1 = draw(h, BACKBONE_BIAS_STD);
            let w2 = draw(h * d, BACKBONE_WEIGHT_SCALE / (h as f64).sqrt());
            let b2 = draw(d, BACKBONE_BIAS_STD);
            maps.push(FeatureMap { w1, b1, w2, b2, out: d });
        }
        Self {
            mean: Modality::ALL.iter().map(|m| vec![0.0; m.dim()]).collect(),
            std: Modality::ALL.iter().map(|m| vec![1.0; m.dim()]).collect(),
            maps,
        }
    }

    fn raw_row(&self, m: Modality, u: &[f64; ENCODING_DIM], out: &mut [f64]) {
        let f = &self.maps[m.index()];
        let h = BACKBONE_HIDDEN;
        let mut hidden = f.b1.clone();
        for (k, &uk) in u.iter().enumerate() {
            if uk != 0.0 {
                for (hj, w) in hidden.iter_mut().zip(&f.w1[k * h..(k + 1) * h]) {
                    *hj += uk * w;
                }
            }
        }
        hidden.iter_mut().for_each(|v| *v = v.tanh());
        out.copy_from_slice(&f.b2);
        for (j, &hj) in hidden.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&f.w2[j * f.out..(j + 1) * f.out]) {
                *o += hj * w;
            }
        }
        out.iter_mut().for_each(|v| *v = v.tanh());
    }

    /// Unstandardized map outputs, `[n, d_m]`.
    pub fn raw(&self, m: Modality, attrs: &[ShapeAttributes]) -> Tensor {
        let d = m.dim();
        let mut data = vec![0.0; attrs.len() * d];
        for (a, row) in attrs.iter().zip(data.chunks_mut(d)) {
            self.raw_row(m, &a.encode(), row);
        }
        Tensor::matrix(attrs.len(), d, data).expect("sized buffer")
    }

    /// Sets the standardization statistics from `attrs` (the training set).
    pub fn fit(&mut self, attrs: &[ShapeAttributes]) {
        for m in Modality::ALL {
            let raw = self.raw(m, attrs);
            let (n, d) = (raw.rows() as f64, m.dim());
            let mut mean = vec![0.0; d];
            for row in raw.data().chunks(d) {
                mean.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            mean.iter_mut().for_each(|a| *a /= n);
            let mut var = vec![0.0; d];
            for row in raw.data().chunks(d) {
                for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - mu) * (v - mu);
                }
            }
            self.std[m.index()] = var.iter().map(|s| (s / n).sqrt().max(1e-12)).collect();
            self.mean[m.index()] = mean;
        }
    }

    pub fn encode_backbone(&self, attrs: &[ShapeAttributes], m: Modality) -> Tensor {
        let mut t = self.raw(m, attrs);
        let d = m.dim();
        let (mean, std) = (&self.mean[m.index()], &self.std[m.index()]);
        for row in t.data_mut().chunks_mut(d) {
            for ((v, mu), s) in row.iter_mut().zip(mean).zip(std) {
                *v = (*v - mu) / s;
            }
        }
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub representation: usize,
    pub validation: usize,
    pub classification: usize,
    pub test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            representation: 50_000,
            validation: 2_000,
            classification: 20_000,
            test: 2_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Representation,
    Validation,
    Classification,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::Representation,
        Split::Validation,
        Split::Classification,
        Split::Test,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::Representation => "representation",
            Split::Validation => "validation",
            Split::Classification => "classification",
            Split::Test => "test",
        }
    }

    pub fn labeled(self) -> bool {
        matches!(self, Split::Classification | Split::Test)
    }

    fn stream(self) -> u64 {
        match self {
            Split::Representation => stream::SPLIT_REPRESENTATION,
            Split::Validation => stream::SPLIT_VALIDATION,
            Split::Classification => stream::SPLIT_CLASSIFICATION,
            Split::Test => stream::SPLIT_TEST,
        }
    }

    fn size(self, cfg: &DataConfig) -> usize {
        match self {
            Split::Representation => cfg.representation,
            Split::Validation => cfg.validation,
            Split::Classification => cfg.classification,
            Split::Test => cfg.test,
        }
    }
}

/// One split: a `[n, d_m]` latent matrix per modality and optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    pub latents: Vec<Tensor>,
    pub labels: Option<Vec<Labels>>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.latents[0].rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn latent(&self, m: Modality) -> &Tensor {
        &self.latents[m.index()]
    }

    pub fn labels(&self) -> Result<&[Labels]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Missing("split has no labels".into()))
    }

    pub fn task_labels(&self, task: Task) -> Result<Vec<usize>> {
        Ok(self.labels()?.iter().map(|l| l[task.index()]).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub config: DataConfig,
    splits: BTreeMap<Split, SplitData>,
}

/// Balanced labels (`i % k`) shuffled independently per task.
fn stratified_labels(seed: u64, split: Split, n: usize) -> Vec<Labels> {
    let mut out = vec![[0usize; 5]; n];
    for task in Task::ALL {
        let mut rng = seed::rng(seed, stream::LABEL_SHUFFLE, split.stream() * 8 + task.index() as u64);
        let mut col: Vec<usize> = (0..n).map(|i| i % task.classes()).collect();
        col.shuffle(&mut rng);
        for (l, v) in out.iter_mut().zip(col) {
            l[task.index()] = v;
        }
    }
    out
}

pub fn generate_attributes(seed: u64, split: Split, n: usize) -> (Vec<ShapeAttributes>, Option<Vec<Labels>>) {
    if split.labeled() {
        let labels = stratified_labels(seed, split, n);
        let attrs = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| sample_classification(l, &mut seed::rng(seed, split.stream(), i as u64)))
            .collect();
        (attrs, Some(labels))
    } else {
        let attrs = (0..n)
            .map(|i| sample_attributes(&mut seed::rng(seed, split.stream(), i as u64)))
            .collect();
        (attrs, None)
    }
}

pub fn build_backbone(seed: u64, cfg: &DataConfig) -> BackboneSim {
    let (rep, _) = generate_attributes(seed, Split::Representation, cfg.representation);
    let mut bb = BackboneSim::new(seed);
    bb.fit(&rep);
    bb
}

pub fn build_datasets(seed: u64, cfg: &DataConfig) -> Result<Dataset> {
    if cfg.representation == 0 {
        return Err(Error::Config("representation split must be non-empty".into()));
    }
    let mut bb = BackboneSim::new(seed);
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let (attrs, labels) = generate_attributes(seed, split, split.size(cfg));
        if split == Split::Representation {
            bb.fit(&attrs);
        }
        let latents = Modality::ALL.iter().map(|&m| bb.encode_backbone(&attrs, m)).collect();
        splits.insert(split, SplitData { latents, labels });
    }
    Ok(Dataset {
        seed,
        config: *cfg,
        splits,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub sizes: DataConfig,
    pub dims: BTreeMap<String, usize>,
    /// SHA-256 of each split's files, concatenated in listing order.
    pub split_hashes: BTreeMap<String, String>,
    pub files: BTreeMap<String, String>,
}

const DATASET_FORMAT: &str = "gwsel-dataset";

fn f64_bytes(t: &Tensor) -> Vec<u8> {
    t.to_le_bytes()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Dataset {
    pub fn split(&self, s: Split) -> &SplitData {
        &self.splits[&s]
    }

    fn files(&self) -> Vec<(Split, String, Vec<u8>)> {
        let mut out = Vec::new();
        for (&split, data) in &self.splits {
            for m in Modality::ALL {
                out.push((
                    split,
                    format!("{}.{}.f64", split.name(), m.name()),
                    f64_bytes(data.latent(m)),
                ));
            }
            if let Some(labels) = &data.labels {
                let mut bytes = Vec::with_capacity(labels.len() * 20);
                for l in labels {
                    for &v in l {
                        bytes.extend_from_slice(&(v as i32).to_le_bytes());
                    }
                }
                out.push((split, format!("{}.labels.i32", split.name()), bytes));
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<DatasetManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = BTreeMap::new();
        let mut split_hashers: BTreeMap<Split, Sha256> = BTreeMap::new();
        for (split, name, bytes) in self.files() {
            split_hashers.entry(split).or_default().update(&bytes);
            files.insert(name.clone(), sha256_hex(&bytes));
            atomic_write(&dir.join(&name), &bytes)?;
        }
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.into(),
            version: 1,
            seed: self.seed,
            sizes: self.config,
            dims: Modality::ALL.iter().map(|m| (m.name().to_string(), m.dim())).collect(),
            split_hashes: split_hashers
                .into_iter()
                .map(|(s, h)| (s.name().to_string(), hex::encode(h.finalize())))
                .collect(),
            files,
        };
        atomic_write(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let mpath = dir.join("manifest.json");
        let raw = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DatasetManifest = serde_json::from_slice(&raw)?;
        if manifest.format != DATASET_FORMAT || manifest.version != 1 {
            return Err(Error::Invalid(format!("{}: not a dataset manifest", mpath.display())));
        }
        let read = |name: &str| -> Result<Vec<u8>> {
            let p = dir.join(name);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let expected = manifest
                .files
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("{name} not listed in manifest")))?;
            if &sha256_hex(&bytes) != expected {
                return Err(Error::Invalid(format!("{}: content hash mismatch", p.display())));
            }
            Ok(bytes)
        };
        let mut splits = BTreeMap::new();
        for split in Split::ALL {
            let n = split.size(&manifest.sizes);
            let mut latents = Vec::with_capacity(3);
            for m in Modality::ALL {
                let bytes = read(&format!("{}.{}.f64", split.name(), m.name()))?;
                if bytes.len() != n * m.dim() * 8 {
                    return Err(Error::Invalid(format!("{} {}: wrong length", split.name(), m.name())));
                }
                let data = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                latents.push(Tensor::matrix(n, m.dim(), data)?);
            }
            let labels = if split.labeled() {
                let bytes = read(&format!("{}.labels.i32", split.name()))?;
                if bytes.len() != n * 20 {
                    return Err(Error::Invalid(format!("{} labels: wrong length", split.name())));
                }
                let vals: Vec<usize> = bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
                    .collect();
                Some(vals.chunks_exact(5).map(|c| [c[0], c[1], c[2], c[3], c[4]]).collect())
            } else {
                None
            };
            splits.insert(split, SplitData { latents, labels });
        }
        Ok(Dataset {
            seed: manifest.seed,
            config: manifest.sizes,
            splits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn palette_is_the_documented_grid() {
        assert_eq!(PALETTE[0], [0.1, 0.1, 0.5]);
        assert_eq!(PALETTE[5], [0.5, 0.9, 0.5]);
        assert_eq!(PALETTE[8], [0.9, 0.9, 0.5]);
    }

    #[test]
    fn classification_samples_round_trip_their_labels() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for i in 0..2_000 {
            let l = [i % 3, i % 9, i % 4, (i / 4) % 4, (i / 16) % 4];
            let a = sample_classification(l, &mut rng);
            assert!(a.in_range(), "{a:?}");
            assert_eq!(make_classification_labels(&a).unwrap(), l);
        }
    }
}
