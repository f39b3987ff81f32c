//! Deterministic synthetic two-space datasets and brute-force oracles.
//!
//! Every preset places class clusters on the unit sphere of each space and
//! draws a random orthonormal text head per space. Cluster centers mix the
//! class's head direction (weight `head_alignment`) with a private offset
//! direction orthogonal to all heads, so the zero-shot predictor is
//! informative but imperfect.
//!
//! * `aligned`: centers sit exactly on the head directions.
//! * `complementary`: classes are paired; each pair shares one center in
//!   exactly one space and is separated in the others. The shared space
//!   alternates between pairs, so no single space separates every class.
//! * `redundant`: one space is generated and copied verbatim to all others.
//!
//! The generator uses `ChaCha8Rng` from `rand_chacha` so output files are
//! identical across platforms; the algorithm name is recorded in the
//! manifest's `synth` block.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::SupportSet;
use crate::kernel::KernelSpec;
use crate::store::{self, Dataset, DatasetManifest, EmbeddingMatrix, Fold, SpaceEntry, StoreError, ZeroShotHead};

pub const RNG_ALGORITHM: &str = "ChaCha8Rng (rand_chacha 0.9), seed_from_u64";
pub const GENERATOR_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid preset: {0}")]
    InvalidPreset(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PresetKind {
    Aligned,
    Complementary,
    Redundant,
}

impl std::str::FromStr for PresetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "aligned" => Ok(PresetKind::Aligned),
            "complementary" => Ok(PresetKind::Complementary),
            "redundant" => Ok(PresetKind::Redundant),
            other => Err(format!(
                "unknown preset `{other}` (expected aligned, complementary or redundant)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceDim {
    pub name: String,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthPreset {
    pub kind: PresetKind,
    pub num_classes: usize,
    pub spaces: Vec<SpaceDim>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of the isotropic noise added before re-normalization.
    pub sigma: f64,
    /// Weight of the head direction in each cluster center, in `[0, 1]`.
    pub head_alignment: f64,
    /// Number of cross-validation folds to emit (0 for none).
    pub folds: usize,
    pub seed: u64,
}

impl SynthPreset {
    pub fn new(kind: PresetKind, seed: u64) -> Self {
        Self {
            kind,
            num_classes: 4,
            spaces: vec![
                SpaceDim { name: "pengi".into(), dim: 16 },
                SpaceDim { name: "clap".into(), dim: 16 },
            ],
            train_per_class: 32,
            test_per_class: 24,
            sigma: 0.15,
            head_alignment: 0.4,
            folds: 0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidPreset(m));
        if self.num_classes < 2 {
            return bad("at least two classes are required".into());
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.head_alignment) {
            return bad(format!("head_alignment must lie in [0, 1], got {}", self.head_alignment));
        }
        if self.spaces.is_empty() {
            return bad("no spaces".into());
        }
        if self.kind != PresetKind::Aligned && self.spaces.len() < 2 {
            return bad(format!("{:?} needs at least two spaces", self.kind));
        }
        for s in &self.spaces {
            if s.dim < 2 * self.num_classes {
                return bad(format!(
                    "space `{}` needs dim >= {} for {} classes",
                    s.name,
                    2 * self.num_classes,
                    self.num_classes
                ));
            }
        }
        if self.kind == PresetKind::Redundant && self.spaces.iter().any(|s| s.dim != self.spaces[0].dim) {
            return bad("redundant spaces must share one dimension".into());
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return bad("every class needs train and test samples".into());
        }
        if self.folds == 1 || self.folds > self.train_per_class + self.test_per_class {
            return bad(format!("cannot build {} folds", self.folds));
        }
        Ok(())
    }
}

/// In-memory result of generation.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub manifest: DatasetManifest,
    /// Per-space sample matrices, unit-norm rows.
    pub audio: BTreeMap<String, EmbeddingMatrix>,
    /// Per-space class text embeddings, one row per class.
    pub text: BTreeMap<String, EmbeddingMatrix>,
}

impl SynthData {
    /// The dataset as the loader would return it, without touching disk.
    pub fn to_dataset(&self) -> Result<Dataset, SynthError> {
        let mut embeddings = BTreeMap::new();
        let mut heads = BTreeMap::new();
        for (name, m) in &self.audio {
            embeddings.insert(name.clone(), store::l2_normalize(m)?.to_array());
            heads.insert(name.clone(), ZeroShotHead::from_class_rows(&self.text[name])?);
        }
        Ok(Dataset {
            manifest: self.manifest.clone(),
            base_dir: PathBuf::from("."),
            embeddings,
            heads,
        })
    }
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| StandardNormal.sample(rng))
}

/// `count` orthonormal vectors in `R^d` by Gram-Schmidt on Gaussian draws.
fn orthonormal(rng: &mut ChaCha8Rng, d: usize, count: usize) -> Vec<Array1<f64>> {
    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, d);
        for _ in 0..2 {
            for b in &basis {
                let p = v.dot(b);
                v.scaled_add(-p, b);
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            basis.push(v / norm);
        }
    }
    basis
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

/// Class centers of one space. `shared[c]` names the class whose center `c`
/// reuses in this space (itself when separated).
fn centers(heads: &[Array1<f64>], offsets: &[Array1<f64>], rho: f64, shared: &[usize]) -> Vec<Array1<f64>> {
    let off = (1.0 - rho * rho).max(0.0).sqrt();
    shared
        .iter()
        .enumerate()
        .map(|(c, &partner)| {
            if partner == c {
                unit(&heads[c] * rho + &offsets[c] * off)
            } else {
                let (a, b) = (c.min(partner), c.max(partner));
                let h = unit(&heads[a] + &heads[b]);
                let o = unit(&offsets[a] + &offsets[b]);
                unit(h * rho + o * off)
            }
        })
        .collect()
}

/// Generates the dataset in memory.
pub fn build(preset: &SynthPreset) -> Result<SynthData, SynthError> {
    preset.validate()?;
    let n = preset.num_classes;
    let per_class = preset.train_per_class + preset.test_per_class;
    let total = n * per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(preset.seed);

    let generated_spaces: &[SpaceDim] = match preset.kind {
        PresetKind::Redundant => &preset.spaces[..1],
        _ => &preset.spaces,
    };
    let rho = match preset.kind {
        PresetKind::Aligned => 1.0,
        _ => preset.head_alignment,
    };

    let mut audio_arrays = Vec::new();
    let mut head_arrays = Vec::new();
    for (si, space) in generated_spaces.iter().enumerate() {
        let basis = orthonormal(&mut rng, space.dim, 2 * n);
        let (heads, offsets) = basis.split_at(n);
        let shared: Vec<usize> = (0..n)
            .map(|c| {
                let pair = c / 2;
                let partner = c ^ 1;
                let ambiguous_here = preset.kind == PresetKind::Complementary
                    && partner < n
                    && pair % generated_spaces.len() == si;
                if ambiguous_here {
                    partner
                } else {
                    c
                }
            })
            .collect();
        let cs = centers(heads, offsets, rho, &shared);
        let mut audio = Array2::<f64>::zeros((total, space.dim));
        for c in 0..n {
            for k in 0..per_class {
                let x = unit(&cs[c] + &(gaussian(&mut rng, space.dim) * preset.sigma));
                audio.row_mut(c * per_class + k).assign(&x);
            }
        }
        let mut text = Array2::<f64>::zeros((n, space.dim));
        for (c, h) in heads.iter().enumerate() {
            text.row_mut(c).assign(h);
        }
        audio_arrays.push(audio);
        head_arrays.push(text);
    }

    let mut audio = BTreeMap::new();
    let mut text = BTreeMap::new();
    for (si, space) in preset.spaces.iter().enumerate() {
        let src = si.min(audio_arrays.len() - 1);
        audio.insert(
            space.name.clone(),
            store::l2_normalize(&EmbeddingMatrix::from_array(&space.name, &audio_arrays[src])?)?,
        );
        text.insert(space.name.clone(), EmbeddingMatrix::from_array(&space.name, &head_arrays[src])?);
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..n {
        for k in 0..per_class {
            let idx = c * per_class + k;
            if k < preset.train_per_class {
                train.push((idx, c));
            } else {
                test.push((idx, c));
            }
        }
    }
    let folds = (preset.folds > 0).then(|| {
        (0..preset.folds)
            .map(|f| {
                let (test, train): (Vec<usize>, Vec<usize>) = (0..total).partition(|&i| (i % per_class) % preset.folds == f);
                Fold { train, test }
            })
            .collect()
    });

    let mut synth_block = serde_json::to_value(preset).expect("preset serializes");
    synth_block["rng"] = serde_json::Value::from(RNG_ALGORITHM);
    synth_block["generator_version"] = serde_json::Value::from(GENERATOR_VERSION);
    synth_block["note"] = serde_json::Value::from(
        "synthetic engineering construction; not a model of any real encoder's embeddings",
    );

    let manifest = DatasetManifest {
        name: format!("synth-{}-{}", serde_json::to_value(preset.kind).unwrap().as_str().unwrap(), preset.seed),
        class_names: (0..n).map(|c| format!("class_{c}")).collect(),
        spaces: preset
            .spaces
            .iter()
            .map(|s| SpaceEntry {
                name: s.name.clone(),
                dim: s.dim,
                audio: PathBuf::from(format!("{}_audio.bin", s.name)),
                text_head: PathBuf::from(format!("{}_text.bin", s.name)),
            })
            .collect(),
        train,
        test,
        folds,
        synth: Some(synth_block),
    };
    Ok(SynthData { manifest, audio, text })
}

/// Writes a complete dataset into `dir` (created if needed) and loads it back
/// through the validating loader. Returns the loaded dataset.
pub fn generate(preset: &SynthPreset, dir: impl AsRef<Path>) -> Result<Dataset, SynthError> {
    let dir = dir.as_ref();
    let data = build(preset)?;
    fs::create_dir_all(dir).map_err(|e| StoreError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    for entry in &data.manifest.spaces {
        store::write_matrix(dir.join(&entry.audio), &data.audio[&entry.name])?;
        store::write_matrix(dir.join(&entry.text_head), &data.text[&entry.name])?;
    }
    let manifest_path = dir.join("manifest.json");
    store::write_atomic(&manifest_path, data.manifest.to_json().as_bytes())?;
    Ok(store::load_manifest(&manifest_path)?)
}

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("no convergence after {iterations} iterations (gradient norm {grad_norm:e})")]
    NoConvergence { iterations: usize, grad_norm: f64 },
    #[error("instance too large for the oracle: {0} supports")]
    TooLarge(usize),
    #[error("oracle input error: {0}")]
    Input(String),
}

pub const ORACLE_MAX_SUPPORTS: usize = 64;
pub const ORACLE_GRAD_TOL: f64 = 1e-10;
pub const ORACLE_MAX_ITERS: usize = 5_000_000;

/// Kernel value by direct per-space evaluation, as a product of exponentials.
fn naive_kernel(a: &[ArrayView1<f64>], b: &[ArrayView1<f64>], betas: &[f64]) -> f64 {
    let mut k = 1.0;
    for ((x, y), &beta) in a.iter().zip(b).zip(betas) {
        let mut d = 0.0;
        for (u, v) in x.iter().zip(y.iter()) {
            d += (u - v) * (u - v);
        }
        k *= (-beta / 2.0 * d).exp();
    }
    k
}

/// Solves the proximal kernel ridge system by plain gradient descent on
/// `f(G) = 1/2 tr(G^T A G) - tr(G^T B)` with `A = I + K / lambda` and
/// `B = L - tau * S W`, stopping once the gradient's Frobenius norm is at
/// most [`ORACLE_GRAD_TOL`]. Kernels and logits are computed with explicit
/// loops, independently of the library's matrix paths.
pub fn oracle_kernel_ridge(
    support: &SupportSet,
    head: &ZeroShotHead,
    kernel: &KernelSpec,
    lambda: f64,
    tau: f64,
) -> Result<Array2<f64>, OracleError> {
    let n = support.len();
    if n > ORACLE_MAX_SUPPORTS {
        return Err(OracleError::TooLarge(n));
    }
    let factors = kernel.factors();
    let mut mats: Vec<ArrayView2<f64>> = Vec::new();
    let mut betas = Vec::new();
    for (space, beta) in &factors {
        let m = support
            .embeddings()
            .get(*space)
            .ok_or_else(|| OracleError::Input(format!("missing space {space}")))?;
        mats.push(m.view());
        betas.push(*beta);
    }
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let ri: Vec<_> = mats.iter().map(|m| m.row(i)).collect();
            let rj: Vec<_> = mats.iter().map(|m| m.row(j)).collect();
            a[i][j] = naive_kernel(&ri, &rj, &betas) / lambda + if i == j { 1.0 } else { 0.0 };
        }
    }
    let s = support
        .embeddings()
        .get(&head.space_name)
        .ok_or_else(|| OracleError::Input(format!("missing head space {}", head.space_name)))?;
    let w = head.weights();
    let classes = head.num_classes();
    let mut b = vec![vec![0.0; classes]; n];
    for i in 0..n {
        for c in 0..classes {
            let mut dot = 0.0;
            for d in 0..w.nrows() {
                dot += s[[i, d]] * w[[d, c]];
            }
            b[i][c] = if support.labels()[i] == c { 1.0 } else { 0.0 } - tau * dot;
        }
    }
    // Gershgorin bound on the largest eigenvalue of A.
    let lmax = a
        .iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let step = 1.0 / lmax;
    let mut g = vec![vec![0.0; classes]; n];
    let mut grad = vec![vec![0.0; classes]; n];
    let mut grad_norm = f64::INFINITY;
    for _ in 0..ORACLE_MAX_ITERS {
        let mut sq = 0.0;
        for i in 0..n {
            for c in 0..classes {
                let mut v = -b[i][c];
                for j in 0..n {
                    v += a[i][j] * g[j][c];
                }
                grad[i][c] = v;
                sq += v * v;
            }
        }
        grad_norm = sq.sqrt();
        if grad_norm <= ORACLE_GRAD_TOL {
            return Ok(Array2::from_shape_fn((n, classes), |(i, c)| g[i][c]));
        }
        for i in 0..n {
            for c in 0..classes {
                g[i][c] -= step * grad[i][c];
            }
        }
    }
    Err(OracleError::NoConvergence {
        iterations: ORACLE_MAX_ITERS,
        grad_norm,
    })
}

/// Nadaraya-Watson class probabilities `sum_i k(S_i, x) L_i / sum_i k(S_i, x)`
/// under a single RBF kernel. Weights are shifted by the largest exponent
/// before exponentiation so the ratio survives very large `beta`.
pub fn oracle_nadaraya_watson(
    x: ArrayView1<f64>,
    support: ArrayView2<f64>,
    labels: &[usize],
    num_classes: usize,
    beta: f64,
) -> Array1<f64> {
    assert!(!labels.is_empty(), "nonempty support");
    let exps: Vec<f64> = support
        .rows()
        .into_iter()
        .map(|s| {
            let d: f64 = s.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            -beta / 2.0 * d
        })
        .collect();
    let top = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = Array1::zeros(num_classes);
    let mut total = 0.0;
    for (&e, &l) in exps.iter().zip(labels) {
        let w = (e - top).exp();
        p[l] += w;
        total += w;
    }
    p / total
}
