//! Mismatch datasets: a labeled pool over seen classes, an unlabeled pool
//! mixing seen and unseen classes at a controlled fraction, a held-out
//! validation split, and an all-classes test split.
//!
//! Hidden ground truth for the unlabeled pool (true labels and seen flags) is
//! kept behind [`MismatchDataset::unlabeled_truth`], and the training loop
//! consumes a [`TrainView`] that does not carry it; only evaluation and
//! diagnostics code may look at the truth.
//!
//! Splits persist as flat binary arrays (one file per array, little-endian,
//! with a 24-byte header: magic `FBA1`, dtype code, count, dim) alongside a
//! JSON manifest recording counts, parameters, and SHA-256 checksums.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Features plus labels over the seen-class index space `0..num_seen`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSplit {
    pub x: Array2<f64>,
    pub y: Vec<usize>,
}

impl LabeledSplit {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Hidden ground truth for the unlabeled pool. Evaluation-side only.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledTruth {
    /// True labels in the global class space (seen classes first).
    pub labels: Vec<usize>,
    /// Whether each sample's true class is in the seen set.
    pub seen: Vec<bool>,
}

/// All-classes test split with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSplit {
    pub x: Array2<f64>,
    /// Global class labels.
    pub labels: Vec<usize>,
    pub seen: Vec<bool>,
}

/// The training-path view of a dataset: no hidden truth fields.
#[derive(Debug, Clone, Copy)]
pub struct TrainView<'a> {
    pub labeled: &'a LabeledSplit,
    pub unlabeled_x: ArrayView2<'a, f64>,
}

/// A label-distribution-mismatch dataset with disjoint splits.
#[derive(Debug, Clone, PartialEq)]
pub struct MismatchDataset {
    pub labeled: LabeledSplit,
    pub validation: LabeledSplit,
    /// Unlabeled features; truth lives separately.
    pub unlabeled_x: Array2<f64>,
    unlabeled_truth: UnlabeledTruth,
    pub test: TestSplit,
    /// Global ids of the seen classes; position in this list is the model
    /// class index.
    pub seen_classes: Vec<usize>,
    pub num_unseen: usize,
    pub kappa: f64,
    pub seed: u64,
    /// Generator geometry (zero for ingested datasets).
    pub cluster_spread: f64,
}

impl MismatchDataset {
    pub fn dim(&self) -> usize {
        self.labeled.x.ncols()
    }

    pub fn num_seen(&self) -> usize {
        self.seen_classes.len()
    }

    /// The view the training loop is allowed to consume.
    pub fn train_view(&self) -> TrainView<'_> {
        TrainView {
            labeled: &self.labeled,
            unlabeled_x: self.unlabeled_x.view(),
        }
    }

    /// Hidden ground truth for the unlabeled pool.
    ///
    /// For evaluation and diagnostics only; nothing on the gradient path may
    /// take this type.
    pub fn unlabeled_truth(&self) -> &UnlabeledTruth {
        &self.unlabeled_truth
    }

    /// Model class index for a global class id, if it is a seen class.
    pub fn seen_position(&self, global: usize) -> Option<usize> {
        self.seen_classes.iter().position(|&c| c == global)
    }

    /// Row indices of the seen-class part of the test split.
    pub fn test_seen_indices(&self) -> Vec<usize> {
        (0..self.test.labels.len())
            .filter(|&i| self.test.seen[i])
            .collect()
    }
}

/// Parameters for the synthetic Gaussian generator.
///
/// Seen-class means sit on a circle of radius `r_seen` in the first two
/// coordinates, unseen-class means on a larger circle of radius `r_unseen`
/// at offset angles; all remaining coordinates are pure noise. Per-class
/// samples are isotropic Gaussians with standard deviation `cluster_spread`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub num_seen: usize,
    pub num_unseen: usize,
    pub kappa: f64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    pub dim: usize,
    pub cluster_spread: f64,
    #[serde(default = "default_r_seen")]
    pub r_seen: f64,
    #[serde(default = "default_r_unseen")]
    pub r_unseen: f64,
}

fn default_r_seen() -> f64 {
    3.0
}

fn default_r_unseen() -> f64 {
    4.0
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            num_seen: 6,
            num_unseen: 4,
            kappa: 0.6,
            n_labeled: 300,
            n_unlabeled: 5000,
            n_test: 2000,
            dim: 8,
            cluster_spread: 1.0,
            r_seen: default_r_seen(),
            r_unseen: default_r_unseen(),
        }
    }
}

/// Class mean in feature space for a global class id.
///
/// Unseen means sit at the angular midpoints between consecutive seen means
/// (on the `r_unseen` circle), so they fall along the decision boundaries of
/// the seen classes rather than radially behind one of them.
fn class_mean(cfg: &SyntheticConfig, global: usize) -> Vec<f64> {
    let mut mean = vec![0.0; cfg.dim];
    if global < cfg.num_seen {
        let angle = 2.0 * std::f64::consts::PI * global as f64 / cfg.num_seen as f64;
        mean[0] = cfg.r_seen * angle.cos();
        mean[1] = cfg.r_seen * angle.sin();
    } else {
        let j = global - cfg.num_seen;
        let denom = if cfg.num_unseen <= cfg.num_seen {
            cfg.num_seen
        } else {
            cfg.num_unseen
        };
        let angle = 2.0 * std::f64::consts::PI * (j as f64 + 0.5) / denom as f64;
        mean[0] = cfg.r_unseen * angle.cos();
        mean[1] = cfg.r_unseen * angle.sin();
    }
    mean
}

fn sample_class(
    cfg: &SyntheticConfig,
    global: usize,
    rng: &mut ChaCha8Rng,
    noise: &Normal<f64>,
) -> Vec<f64> {
    class_mean(cfg, global)
        .into_iter()
        .map(|m| m + cfg.cluster_spread * noise.sample(rng))
        .collect()
}

fn rows_to_array(rows: Vec<Vec<f64>>, dim: usize) -> Array2<f64> {
    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((n, dim), flat).expect("row dimensions are uniform")
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Generate a synthetic mismatch dataset.
pub fn make_synthetic(cfg: &SyntheticConfig) -> Result<MismatchDataset> {
    if cfg.num_seen < 2 {
        return Err(Error::config("at least two seen classes are required"));
    }
    if !(0.0..=1.0).contains(&cfg.kappa) {
        return Err(Error::config("kappa must lie in [0, 1]"));
    }
    if cfg.kappa > 0.0 && cfg.num_unseen == 0 {
        return Err(Error::config(
            "kappa > 0 requires at least one unseen class",
        ));
    }
    if cfg.n_labeled == 0 || cfg.n_unlabeled == 0 || cfg.n_test == 0 {
        return Err(Error::config("split sizes must be positive"));
    }
    if cfg.dim < 2 {
        return Err(Error::config("feature dimension must be at least 2"));
    }
    if cfg.cluster_spread <= 0.0 {
        return Err(Error::config("cluster_spread must be positive"));
    }

    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Independent streams per split so unrelated splits stay identical when
    // one parameter (e.g. kappa) changes.
    let mut rng_labeled = ChaCha8Rng::seed_from_u64(master.gen());
    let mut rng_unlabeled = ChaCha8Rng::seed_from_u64(master.gen());
    let mut rng_test = ChaCha8Rng::seed_from_u64(master.gen());
    let noise = Normal::new(0.0, 1.0).expect("unit normal");

    // Labeled pool, balanced over seen classes, 10% held out per class for
    // validation.
    let mut labeled_rows = Vec::new();
    let mut labeled_y = Vec::new();
    let mut val_rows = Vec::new();
    let mut val_y = Vec::new();
    for k in 0..cfg.num_seen {
        let n_k = cfg.n_labeled / cfg.num_seen
            + if k < cfg.n_labeled % cfg.num_seen { 1 } else { 0 };
        let n_val = if n_k >= 2 { (n_k / 10).max(1) } else { 0 };
        for i in 0..n_k {
            let x = sample_class(cfg, k, &mut rng_labeled, &noise);
            if i < n_val {
                val_rows.push(x);
                val_y.push(k);
            } else {
                labeled_rows.push(x);
                labeled_y.push(k);
            }
        }
    }
    if val_rows.is_empty() {
        return Err(Error::config(
            "labeled pool is too small to hold out a validation split",
        ));
    }

    // Unlabeled pool: round(kappa * n) unseen samples, remainder seen.
    let n_unseen_samples = (cfg.kappa * cfg.n_unlabeled as f64).round() as usize;
    let mut unlabeled_order: Vec<usize> = Vec::with_capacity(cfg.n_unlabeled);
    for i in 0..n_unseen_samples {
        unlabeled_order.push(cfg.num_seen + i % cfg.num_unseen.max(1));
    }
    for i in 0..cfg.n_unlabeled - n_unseen_samples {
        unlabeled_order.push(i % cfg.num_seen);
    }
    shuffle(&mut unlabeled_order, &mut rng_unlabeled);
    let mut unlabeled_rows = Vec::with_capacity(cfg.n_unlabeled);
    let mut truth_labels = Vec::with_capacity(cfg.n_unlabeled);
    let mut truth_seen = Vec::with_capacity(cfg.n_unlabeled);
    for &global in &unlabeled_order {
        unlabeled_rows.push(sample_class(cfg, global, &mut rng_unlabeled, &noise));
        truth_labels.push(global);
        truth_seen.push(global < cfg.num_seen);
    }

    // Test split: uniform over all classes.
    let num_classes_total = cfg.num_seen + cfg.num_unseen;
    let mut test_order: Vec<usize> = (0..cfg.n_test).map(|i| i % num_classes_total).collect();
    shuffle(&mut test_order, &mut rng_test);
    let mut test_rows = Vec::with_capacity(cfg.n_test);
    let mut test_labels = Vec::with_capacity(cfg.n_test);
    let mut test_seen = Vec::with_capacity(cfg.n_test);
    for &global in &test_order {
        test_rows.push(sample_class(cfg, global, &mut rng_test, &noise));
        test_labels.push(global);
        test_seen.push(global < cfg.num_seen);
    }

    Ok(MismatchDataset {
        labeled: LabeledSplit {
            x: rows_to_array(labeled_rows, cfg.dim),
            y: labeled_y,
        },
        validation: LabeledSplit {
            x: rows_to_array(val_rows, cfg.dim),
            y: val_y,
        },
        unlabeled_x: rows_to_array(unlabeled_rows, cfg.dim),
        unlabeled_truth: UnlabeledTruth {
            labels: truth_labels,
            seen: truth_seen,
        },
        test: TestSplit {
            x: rows_to_array(test_rows, cfg.dim),
            labels: test_labels,
            seen: test_seen,
        },
        seen_classes: (0..cfg.num_seen).collect(),
        num_unseen: cfg.num_unseen,
        kappa: cfg.kappa,
        seed: cfg.seed,
        cluster_spread: cfg.cluster_spread,
    })
}

// ---------------------------------------------------------------------------
// Augmentation

/// Weak and strong stochastic perturbation operators.
///
/// Weak: additive Gaussian jitter with `sigma_weak`. Strong: jitter with
/// `sigma_strong` followed by independent coordinate dropout (zeroing) at
/// `dropout_rate`. With zero magnitudes both reduce to the identity.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AugmentationPair {
    pub sigma_weak: f64,
    pub sigma_strong: f64,
    pub dropout_rate: f64,
}

impl Default for AugmentationPair {
    fn default() -> Self {
        AugmentationPair {
            sigma_weak: 0.1,
            sigma_strong: 0.5,
            dropout_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentKind {
    Weak,
    Strong,
}

/// Apply one operator to a feature batch, drawing noise from `rng`.
pub fn augment(
    pair: &AugmentationPair,
    x: ArrayView2<'_, f64>,
    kind: AugmentKind,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let sigma = match kind {
        AugmentKind::Weak => pair.sigma_weak,
        AugmentKind::Strong => pair.sigma_strong,
    };
    let mut out = x.to_owned();
    if sigma > 0.0 {
        for v in out.iter_mut() {
            *v += sigma * noise.sample(rng);
        }
    }
    if kind == AugmentKind::Strong && pair.dropout_rate > 0.0 {
        for v in out.iter_mut() {
            if rng.gen_range(0.0..1.0) < pair.dropout_rate {
                *v = 0.0;
            }
        }
    }
    out
}

/// Seeded convenience wrapper around [`augment`].
pub fn augment_seeded(
    pair: &AugmentationPair,
    x: ArrayView2<'_, f64>,
    kind: AugmentKind,
    seed: u64,
) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    augment(pair, x, kind, &mut rng)
}

// ---------------------------------------------------------------------------
// Binary split files and the dataset manifest

const MAGIC: &[u8; 4] = b"FBA1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    U32,
    U8,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F64 => 1,
            Dtype::U32 => 2,
            Dtype::U8 => 3,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F64),
            2 => Ok(Dtype::U32),
            3 => Ok(Dtype::U8),
            other => Err(Error::io(format!("unknown dtype code {other}"))),
        }
    }
}

fn write_header(out: &mut Vec<u8>, dtype: Dtype, count: u64, dim: u64) {
    out.extend_from_slice(MAGIC);
    out.push(dtype.code());
    out.extend_from_slice(&[0u8; 3]);
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
}

fn read_header(bytes: &[u8]) -> Result<(Dtype, usize, usize)> {
    if bytes.len() < 24 || &bytes[..4] != MAGIC {
        return Err(Error::io("not a flat binary array file"));
    }
    let dtype = Dtype::from_code(bytes[4])?;
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let dim = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    Ok((dtype, count, dim))
}

fn encode_f64_matrix(x: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + x.len() * 8);
    write_header(&mut out, Dtype::F64, x.nrows() as u64, x.ncols() as u64);
    for v in x.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_f64_matrix(bytes: &[u8]) -> Result<Array2<f64>> {
    let (dtype, count, dim) = read_header(bytes)?;
    if dtype != Dtype::F64 {
        return Err(Error::io("expected an f64 array"));
    }
    let want = 24 + count * dim * 8;
    if bytes.len() != want {
        return Err(Error::io("f64 array payload length mismatch"));
    }
    let mut data = Vec::with_capacity(count * dim);
    for chunk in bytes[24..].chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Array2::from_shape_vec((count, dim), data).map_err(|e| Error::io(e.to_string()))
}

fn encode_u32_vec(v: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + v.len() * 4);
    write_header(&mut out, Dtype::U32, v.len() as u64, 1);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn decode_u32_vec(bytes: &[u8]) -> Result<Vec<u32>> {
    let (dtype, count, dim) = read_header(bytes)?;
    if dtype != Dtype::U32 || dim != 1 {
        return Err(Error::io("expected a u32 vector"));
    }
    if bytes.len() != 24 + count * 4 {
        return Err(Error::io("u32 vector payload length mismatch"));
    }
    Ok(bytes[24..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn encode_u8_vec(v: &[u8], dim: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + v.len());
    write_header(&mut out, Dtype::U8, (v.len() / dim.max(1)) as u64, dim as u64);
    out.extend_from_slice(v);
    out
}

fn decode_u8_vec(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize)> {
    let (dtype, count, dim) = read_header(bytes)?;
    if dtype != Dtype::U8 {
        return Err(Error::io("expected a u8 array"));
    }
    if bytes.len() != 24 + count * dim {
        return Err(Error::io("u8 array payload length mismatch"));
    }
    Ok((bytes[24..].to_vec(), count, dim))
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Manifest entry for one persisted array.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub dtype: Dtype,
    pub count: usize,
    pub dim: usize,
}

/// Dataset manifest: parameters, per-split counts, and file checksums.
///
/// `checksum` hashes the per-file digests in filename order, so two datasets
/// with identical splits have identical checksums regardless of when or where
/// they were written.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: String,
    pub seed: u64,
    pub kappa: f64,
    pub seen_classes: Vec<usize>,
    pub num_unseen: usize,
    pub dim: usize,
    pub cluster_spread: f64,
    pub counts: BTreeMap<String, usize>,
    pub files: BTreeMap<String, FileEntry>,
    pub checksum: String,
    /// Run provenance (timestamps, versions); not covered by `checksum`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<serde_json::Value>,
}

pub const MANIFEST_SCHEMA: &str = "mismatch-dataset/1";

fn combined_checksum(files: &BTreeMap<String, FileEntry>) -> String {
    let mut hasher = Sha256::new();
    for (name, entry) in files {
        hasher.update(name.as_bytes());
        hasher.update(b":");
        hasher.update(entry.sha256.as_bytes());
        hasher.update(b"\n");
    }
    hex_string(&hasher.finalize())
}

/// Write all splits and the manifest into `dir`; returns the manifest path.
pub fn save_dataset(dataset: &MismatchDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let truth = dataset.unlabeled_truth();
    let as_u32 = |v: &[usize]| -> Vec<u32> { v.iter().map(|&x| x as u32).collect() };
    let as_u8 = |v: &[bool]| -> Vec<u8> { v.iter().map(|&b| b as u8).collect() };
    let blobs: Vec<(&str, Vec<u8>)> = vec![
        ("labeled_x.bin", encode_f64_matrix(&dataset.labeled.x)),
        ("labeled_y.bin", encode_u32_vec(&as_u32(&dataset.labeled.y))),
        ("validation_x.bin", encode_f64_matrix(&dataset.validation.x)),
        (
            "validation_y.bin",
            encode_u32_vec(&as_u32(&dataset.validation.y)),
        ),
        ("unlabeled_x.bin", encode_f64_matrix(&dataset.unlabeled_x)),
        (
            "unlabeled_truth_y.bin",
            encode_u32_vec(&as_u32(&truth.labels)),
        ),
        (
            "unlabeled_truth_seen.bin",
            encode_u8_vec(&as_u8(&truth.seen), 1),
        ),
        ("test_x.bin", encode_f64_matrix(&dataset.test.x)),
        ("test_y.bin", encode_u32_vec(&as_u32(&dataset.test.labels))),
        ("test_seen.bin", encode_u8_vec(&as_u8(&dataset.test.seen), 1)),
    ];
    let mut files = BTreeMap::new();
    for (name, bytes) in &blobs {
        let path = dir.join(name);
        fs::write(&path, bytes)?;
        let (dtype, count, dim) = read_header(bytes)?;
        files.insert(
            name.to_string(),
            FileEntry {
                path: name.to_string(),
                sha256: sha256_hex(bytes),
                dtype,
                count,
                dim,
            },
        );
    }
    let mut counts = BTreeMap::new();
    counts.insert("labeled".to_string(), dataset.labeled.len());
    counts.insert("validation".to_string(), dataset.validation.len());
    counts.insert("unlabeled".to_string(), dataset.unlabeled_x.nrows());
    counts.insert("test".to_string(), dataset.test.labels.len());
    counts.insert("test_seen".to_string(), dataset.test_seen_indices().len());
    let checksum = combined_checksum(&files);
    let manifest = DatasetManifest {
        schema: MANIFEST_SCHEMA.to_string(),
        seed: dataset.seed,
        kappa: dataset.kappa,
        seen_classes: dataset.seen_classes.clone(),
        num_unseen: dataset.num_unseen,
        dim: dataset.dim(),
        cluster_spread: dataset.cluster_spread,
        counts,
        files,
        checksum,
        run: None,
    };
    let manifest_path = dir.join("manifest.json");
    let mut file = fs::File::create(&manifest_path)?;
    file.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    file.write_all(b"\n")?;
    Ok(manifest_path)
}

/// Load a dataset from its manifest, verifying every file checksum.
pub fn load_dataset(manifest_path: &Path) -> Result<(MismatchDataset, DatasetManifest)> {
    let mut manifest_bytes = Vec::new();
    fs::File::open(manifest_path)
        .map_err(|e| Error::io(format!("{}: {e}", manifest_path.display())))?
        .read_to_end(&mut manifest_bytes)?;
    let manifest: DatasetManifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.schema != MANIFEST_SCHEMA {
        return Err(Error::config(format!(
            "unsupported dataset manifest schema {}",
            manifest.schema
        )));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let blob = |name: &str| -> Result<Vec<u8>> {
        let entry = manifest
            .files
            .get(name)
            .ok_or_else(|| Error::io(format!("manifest is missing the {name} entry")))?;
        let bytes = fs::read(dir.join(&entry.path))
            .map_err(|e| Error::io(format!("{name}: {e}")))?;
        let digest = sha256_hex(&bytes);
        if digest != entry.sha256 {
            return Err(Error::io(format!(
                "checksum mismatch for {name}: manifest {} vs file {digest}",
                entry.sha256
            )));
        }
        Ok(bytes)
    };
    let labeled_x = decode_f64_matrix(&blob("labeled_x.bin")?)?;
    let labeled_y = decode_u32_vec(&blob("labeled_y.bin")?)?;
    let validation_x = decode_f64_matrix(&blob("validation_x.bin")?)?;
    let validation_y = decode_u32_vec(&blob("validation_y.bin")?)?;
    let unlabeled_x = decode_f64_matrix(&blob("unlabeled_x.bin")?)?;
    let truth_y = decode_u32_vec(&blob("unlabeled_truth_y.bin")?)?;
    let (truth_seen, _, _) = decode_u8_vec(&blob("unlabeled_truth_seen.bin")?)?;
    let test_x = decode_f64_matrix(&blob("test_x.bin")?)?;
    let test_y = decode_u32_vec(&blob("test_y.bin")?)?;
    let (test_seen, _, _) = decode_u8_vec(&blob("test_seen.bin")?)?;
    let to_usize = |v: Vec<u32>| -> Vec<usize> { v.into_iter().map(|x| x as usize).collect() };
    let dataset = MismatchDataset {
        labeled: LabeledSplit {
            x: labeled_x,
            y: to_usize(labeled_y),
        },
        validation: LabeledSplit {
            x: validation_x,
            y: to_usize(validation_y),
        },
        unlabeled_x,
        unlabeled_truth: UnlabeledTruth {
            labels: to_usize(truth_y),
            seen: truth_seen.into_iter().map(|b| b != 0).collect(),
        },
        test: TestSplit {
            x: test_x,
            labels: to_usize(test_y),
            seen: test_seen.into_iter().map(|b| b != 0).collect(),
        },
        seen_classes: manifest.seen_classes.clone(),
        num_unseen: manifest.num_unseen,
        kappa: manifest.kappa,
        seed: manifest.seed,
        cluster_spread: manifest.cluster_spread,
    };
    Ok((dataset, manifest))
}

// ---------------------------------------------------------------------------
// Image-directory ingestion

/// Parameters for ingesting a directory of class-labeled binary image files.
///
/// The directory must hold one `class_<id>.bin` per class in the flat binary
/// array format with dtype u8 (one row per image, `dim = height * width *
/// channels`). Pixels are scaled to `[0, 1]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageIngestConfig {
    pub seed: u64,
    /// Global ids of the seen classes; defaults to classes 2 through 7.
    pub seen_classes: Vec<usize>,
    /// Global ids of the unseen classes contributing mismatch samples.
    pub unseen_classes: Vec<usize>,
    pub kappa: f64,
    /// Labeled samples drawn per seen class; defaults to 400.
    pub labels_per_class: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
}

impl Default for ImageIngestConfig {
    fn default() -> Self {
        ImageIngestConfig {
            seed: 0,
            seen_classes: (2..=7).collect(),
            unseen_classes: vec![0, 1, 8, 9],
            kappa: 0.6,
            labels_per_class: 400,
            n_unlabeled: 20_000,
            n_test: 2_000,
        }
    }
}

/// Build a mismatch dataset from a directory of per-class image records.
pub fn ingest_image_dataset(dir: &Path, cfg: &ImageIngestConfig) -> Result<MismatchDataset> {
    if cfg.seen_classes.len() < 2 {
        return Err(Error::config("at least two seen classes are required"));
    }
    if cfg.kappa > 0.0 && cfg.unseen_classes.is_empty() {
        return Err(Error::config(
            "kappa > 0 requires at least one unseen class",
        ));
    }
    let mut classes: Vec<usize> = cfg.seen_classes.clone();
    classes.extend(&cfg.unseen_classes);
    let mut per_class: BTreeMap<usize, Array2<f64>> = BTreeMap::new();
    let mut dim = 0usize;
    for &c in &classes {
        let path = dir.join(format!("class_{c}.bin"));
        let bytes = fs::read(&path)
            .map_err(|_| Error::validation(format!("missing image records for class {c}")))?;
        let (pixels, count, d) = decode_u8_vec(&bytes)?;
        if dim == 0 {
            dim = d;
        } else if dim != d {
            return Err(Error::validation(format!(
                "class {c} image dimension {d} disagrees with {dim}"
            )));
        }
        let data: Vec<f64> = pixels.into_iter().map(|p| p as f64 / 255.0).collect();
        per_class.insert(
            c,
            Array2::from_shape_vec((count, dim), data).map_err(|e| Error::io(e.to_string()))?,
        );
    }

    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rng_labeled = ChaCha8Rng::seed_from_u64(master.gen());
    let mut rng_unlabeled = ChaCha8Rng::seed_from_u64(master.gen());
    let mut rng_test = ChaCha8Rng::seed_from_u64(master.gen());

    // Per-class pools of row indices, consumed without replacement so the
    // splits stay disjoint.
    let mut pools: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&c, x) in &per_class {
        let mut idx: Vec<usize> = (0..x.nrows()).collect();
        shuffle(&mut idx, &mut rng_labeled);
        pools.insert(c, idx);
    }
    let mut take = |class: usize, n: usize, what: &str| -> Result<Vec<usize>> {
        let pool = pools.get_mut(&class).expect("pool exists");
        if pool.len() < n {
            return Err(Error::validation(format!(
                "class {class} has only {} samples left but {what} needs {n}",
                pool.len()
            )));
        }
        Ok(pool.split_off(pool.len() - n))
    };

    let row = |x: &Array2<f64>, i: usize| -> Vec<f64> { x.row(i).to_vec() };

    // Labeled + validation.
    let mut labeled_rows = Vec::new();
    let mut labeled_y = Vec::new();
    let mut val_rows = Vec::new();
    let mut val_y = Vec::new();
    for (pos, &c) in cfg.seen_classes.iter().enumerate() {
        let idx = take(c, cfg.labels_per_class, "the labeled split")?;
        let n_val = if cfg.labels_per_class >= 2 {
            (cfg.labels_per_class / 10).max(1)
        } else {
            0
        };
        for (i, &r) in idx.iter().enumerate() {
            let x = row(&per_class[&c], r);
            if i < n_val {
                val_rows.push(x);
                val_y.push(pos);
            } else {
                labeled_rows.push(x);
                labeled_y.push(pos);
            }
        }
    }
    if val_rows.is_empty() {
        return Err(Error::config(
            "labeled pool is too small to hold out a validation split",
        ));
    }

    // Unlabeled pool.
    let n_unseen_samples = (cfg.kappa * cfg.n_unlabeled as f64).round() as usize;
    let n_seen_samples = cfg.n_unlabeled - n_unseen_samples;
    let mut unlabeled_entries: Vec<(usize, usize, bool)> = Vec::new();
    for (slot, group, seen) in [
        (n_unseen_samples, &cfg.unseen_classes, false),
        (n_seen_samples, &cfg.seen_classes, true),
    ] {
        if slot == 0 {
            continue;
        }
        for (i, chunk) in split_evenly(slot, group.len()).into_iter().enumerate() {
            let c = group[i];
            let idx = take(c, chunk, "the unlabeled split")?;
            for r in idx {
                unlabeled_entries.push((c, r, seen));
            }
        }
    }
    shuffle(&mut unlabeled_entries, &mut rng_unlabeled);
    let mut unlabeled_rows = Vec::new();
    let mut truth_labels = Vec::new();
    let mut truth_seen = Vec::new();
    for (c, r, seen) in unlabeled_entries {
        unlabeled_rows.push(row(&per_class[&c], r));
        truth_labels.push(c);
        truth_seen.push(seen);
    }

    // Test split over all classes.
    let mut test_entries: Vec<(usize, usize)> = Vec::new();
    for (i, chunk) in split_evenly(cfg.n_test, classes.len()).into_iter().enumerate() {
        let c = classes[i];
        let idx = take(c, chunk, "the test split")?;
        for r in idx {
            test_entries.push((c, r));
        }
    }
    shuffle(&mut test_entries, &mut rng_test);
    let mut test_rows = Vec::new();
    let mut test_labels = Vec::new();
    let mut test_seen = Vec::new();
    for (c, r) in test_entries {
        test_rows.push(row(&per_class[&c], r));
        test_labels.push(c);
        test_seen.push(cfg.seen_classes.contains(&c));
    }

    Ok(MismatchDataset {
        labeled: LabeledSplit {
            x: rows_to_array(labeled_rows, dim),
            y: labeled_y,
        },
        validation: LabeledSplit {
            x: rows_to_array(val_rows, dim),
            y: val_y,
        },
        unlabeled_x: rows_to_array(unlabeled_rows, dim),
        unlabeled_truth: UnlabeledTruth {
            labels: truth_labels,
            seen: truth_seen,
        },
        test: TestSplit {
            x: rows_to_array(test_rows, dim),
            labels: test_labels,
            seen: test_seen,
        },
        seen_classes: cfg.seen_classes.clone(),
        num_unseen: cfg.unseen_classes.len(),
        kappa: cfg.kappa,
        seed: cfg.seed,
        cluster_spread: 0.0,
    })
}

/// Encode one class's images in the ingestion format; pairs with
/// [`ingest_image_dataset`] and is used to build fixtures.
pub fn encode_image_class(pixels: &[u8], dim: usize) -> Vec<u8> {
    encode_u8_vec(pixels, dim)
}

fn split_evenly(total: usize, parts: usize) -> Vec<usize> {
    let parts = parts.max(1);
    (0..parts)
        .map(|i| total / parts + if i < total % parts { 1 } else { 0 })
        .collect()
}
