//! Embedding matrices, zero-shot heads and dataset manifests.
//!
//! This module is the only place that touches the filesystem. Matrices are
//! stored as little-endian binary32 behind a small fixed header:
//!
//! ```text
//! offset  size  field
//! 0       4     magic  b"MUKA"
//! 4       4     format version (u32) = 1
//! 8       8     rows (u64)
//! 16      8     dim  (u64)
//! 24      4*n   rows*dim f32 values, row-major
//! ```
//!
//! Manifests are JSON documents whose matrix paths are resolved relative to
//! the manifest file. Everything handed to the adapters is L2-normalized and
//! widened to `f64`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"MUKA";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

/// Tolerance on row (and head column) norms after normalization.
pub const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes {found:?}, expected \"MUKA\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported format version {found}, expected {FORMAT_VERSION}")]
    VersionMismatch { found: u32 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: u64 },
    #[error("matrix must have at least one row and one column, got {rows}x{dim}")]
    EmptyMatrix { rows: u64, dim: u64 },
    #[error("non-finite value {value} at row {row}, col {col}")]
    NonFiniteValue { row: usize, col: usize, value: f32 },
    #[error("row {index} has zero norm")]
    ZeroNormRow { index: usize },
    #[error("data length {len} does not match {rows}x{dim}")]
    ShapeMismatch { rows: usize, dim: usize, len: usize },
    #[error("manifest schema error: {0}")]
    SchemaError(String),
    #[error("space `{space}`: text head has {found} rows for {expected} classes")]
    ClassCountMismatch {
        space: String,
        expected: usize,
        found: usize,
    },
    #[error("space `{space}`: {found} samples, expected {expected}")]
    SampleCountMismatch {
        space: String,
        expected: usize,
        found: usize,
    },
    #[error("fold {fold}: sample {sample} is in both train and test")]
    FoldOverlap { fold: usize, sample: usize },
    #[error("fold {fold}: {missing} labeled samples are in neither train nor test")]
    FoldCoverage { fold: usize, missing: usize },
    #[error("{path}: {source}")]
    InMatrix {
        path: PathBuf,
        #[source]
        source: Box<StoreError>,
    },
}

impl StoreError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// The innermost error, looking through `InMatrix` wrappers.
    pub fn root(&self) -> &StoreError {
        match self {
            StoreError::InMatrix { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(self.root(), StoreError::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// A named feature space's matrix of embedding vectors, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub space_name: String,
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(space_name: impl Into<String>, rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(StoreError::EmptyMatrix {
                rows: rows as u64,
                dim: dim as u64,
            });
        }
        if data.len() != rows * dim {
            return Err(StoreError::ShapeMismatch {
                rows,
                dim,
                len: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFiniteValue {
                row: pos / dim,
                col: pos % dim,
                value: data[pos],
            });
        }
        Ok(Self {
            space_name: space_name.into(),
            rows,
            dim,
            data,
            normalized: false,
        })
    }

    /// Narrows a 64-bit array to storage precision.
    pub fn from_array(space_name: impl Into<String>, array: &Array2<f64>) -> Result<Self> {
        let (rows, dim) = array.dim();
        let data = array.iter().map(|&v| v as f32).collect();
        Self::new(space_name, rows, dim, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn with_space_name(mut self, name: impl Into<String>) -> Self {
        self.space_name = name.into();
        self
    }

    /// Widens to `f64` for computation.
    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.rows, self.dim), |(i, j)| self.data[i * self.dim + j] as f64)
    }
}

/// Scales every row to unit Euclidean norm. Norms are accumulated in `f64`.
pub fn l2_normalize(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut data = Vec::with_capacity(m.data.len());
    for i in 0..m.rows {
        let row = m.row(i);
        let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(StoreError::ZeroNormRow { index: i });
        }
        data.extend(row.iter().map(|&v| ((v as f64) / norm) as f32));
    }
    Ok(EmbeddingMatrix {
        space_name: m.space_name.clone(),
        rows: m.rows,
        dim: m.dim,
        data,
        normalized: true,
    })
}

pub fn encode_matrix(m: &EmbeddingMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.data.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows as u64).to_le_bytes());
    out.extend_from_slice(&(m.dim as u64).to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_matrix(space_name: &str, bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(StoreError::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(StoreError::TruncatedPayload {
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(StoreError::VersionMismatch { found: version });
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let dim = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if rows == 0 || dim == 0 {
        return Err(StoreError::EmptyMatrix { rows, dim });
    }
    let payload = &bytes[HEADER_LEN..];
    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .unwrap_or(u64::MAX);
    let found = payload.len() as u64;
    if found < expected {
        return Err(StoreError::TruncatedPayload { expected, found });
    }
    if found > expected {
        return Err(StoreError::TrailingBytes {
            extra: found - expected,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingMatrix::new(space_name, rows as usize, dim as usize, data)
}

/// Reads a matrix file. The space name defaults to the file stem.
pub fn load_matrix(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_matrix(&name, &bytes)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &EmbeddingMatrix) -> Result<()> {
    write_atomic(path.as_ref(), &encode_matrix(m))
}

/// Writes through a sibling temp file and a rename so readers never observe
/// a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| StoreError::io(path, std::io::Error::other("path has no file name")))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(StoreError::io(path, e));
    }
    Ok(())
}

/// Class text embeddings of one space, stored as columns (`dim x N`).
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotHead {
    pub space_name: String,
    weights: Array2<f64>,
}

impl ZeroShotHead {
    /// `weights` is `dim x N`; every column must be unit-norm.
    pub fn new(space_name: impl Into<String>, weights: Array2<f64>) -> Result<Self> {
        let space_name = space_name.into();
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(StoreError::EmptyMatrix {
                rows: weights.nrows() as u64,
                dim: weights.ncols() as u64,
            });
        }
        for (j, col) in weights.columns().into_iter().enumerate() {
            let norm = col.dot(&col).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(StoreError::SchemaError(format!(
                    "head `{space_name}` column {j} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Self { space_name, weights })
    }

    /// Builds a head from a matrix with one class per row, normalizing rows.
    pub fn from_class_rows(m: &EmbeddingMatrix) -> Result<Self> {
        let normalized = l2_normalize(m)?;
        Self::new(m.space_name.clone(), normalized.to_array().reversed_axes())
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceEntry {
    pub name: String,
    pub dim: usize,
    /// Sample embeddings, one row per clip.
    pub audio: PathBuf,
    /// Class text embeddings, one row per class.
    pub text_head: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// The on-disk manifest document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub class_names: Vec<String>,
    pub spaces: Vec<SpaceEntry>,
    /// `(sample_index, class_index)` pairs.
    pub train: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folds: Option<Vec<Fold>>,
    /// Generator parameters for synthetic datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<serde_json::Value>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn space_names(&self) -> Vec<String> {
        self.spaces.iter().map(|s| s.name.clone()).collect()
    }

    /// Label of every sample that appears in either split.
    pub fn labels(&self) -> BTreeMap<usize, usize> {
        self.train.iter().chain(&self.test).copied().collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// Structural checks that need no matrix files.
    pub fn check_structure(&self) -> Result<()> {
        let n = self.num_classes();
        if n == 0 {
            return Err(StoreError::SchemaError("class_names is empty".into()));
        }
        if self.spaces.is_empty() {
            return Err(StoreError::SchemaError("no spaces listed".into()));
        }
        let mut names = BTreeSet::new();
        for s in &self.spaces {
            if !names.insert(s.name.as_str()) {
                return Err(StoreError::SchemaError(format!("duplicate space `{}`", s.name)));
            }
        }
        let mut seen = BTreeMap::new();
        for (split, pairs) in [("train", &self.train), ("test", &self.test)] {
            for &(sample, class) in pairs {
                if class >= n {
                    return Err(StoreError::SchemaError(format!(
                        "{split}: class index {class} out of range for {n} classes"
                    )));
                }
                if let Some(prev) = seen.insert(sample, split) {
                    return Err(StoreError::SchemaError(format!(
                        "sample {sample} listed twice ({prev} and {split})"
                    )));
                }
            }
        }
        if let Some(folds) = &self.folds {
            let labeled: BTreeSet<usize> = seen.keys().copied().collect();
            for (f, fold) in folds.iter().enumerate() {
                let train: BTreeSet<usize> = fold.train.iter().copied().collect();
                let test: BTreeSet<usize> = fold.test.iter().copied().collect();
                if train.len() != fold.train.len() || test.len() != fold.test.len() {
                    return Err(StoreError::SchemaError(format!("fold {f} repeats a sample")));
                }
                if let Some(&sample) = train.intersection(&test).next() {
                    return Err(StoreError::FoldOverlap { fold: f, sample });
                }
                if let Some(&s) = train.union(&test).find(|s| !labeled.contains(s)) {
                    return Err(StoreError::SchemaError(format!(
                        "fold {f} references unlabeled sample {s}"
                    )));
                }
                let covered = train.len() + test.len();
                if covered != labeled.len() {
                    return Err(StoreError::FoldCoverage {
                        fold: f,
                        missing: labeled.len() - covered,
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn parse_manifest(text: &str) -> Result<DatasetManifest> {
    serde_json::from_str(text).map_err(|e| StoreError::SchemaError(e.to_string()))
}

/// A validated manifest together with its normalized embeddings and heads.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub base_dir: PathBuf,
    /// Per-space `samples x dim` matrices, unit-norm rows.
    pub embeddings: BTreeMap<String, Array2<f64>>,
    pub heads: BTreeMap<String, ZeroShotHead>,
}

impl Dataset {
    pub fn num_samples(&self) -> usize {
        self.embeddings.values().next().map_or(0, |m| m.nrows())
    }
}

fn load_in(path: &Path, space: &str) -> Result<EmbeddingMatrix> {
    load_matrix(path)
        .map(|m| m.with_space_name(space))
        .map_err(|e| StoreError::InMatrix {
            path: path.to_path_buf(),
            source: Box::new(e),
        })
}

/// Builds a dataset from an already parsed manifest; matrix paths are
/// resolved against `base_dir`.
pub fn assemble(manifest: DatasetManifest, base_dir: &Path) -> Result<Dataset> {
    manifest.check_structure()?;
    let n = manifest.num_classes();
    let mut embeddings = BTreeMap::new();
    let mut heads = BTreeMap::new();
    let mut sample_count: Option<usize> = None;
    for space in &manifest.spaces {
        let audio_path = base_dir.join(&space.audio);
        let audio = load_in(&audio_path, &space.name)?;
        if audio.dim() != space.dim {
            return Err(StoreError::SchemaError(format!(
                "space `{}` declares dim {} but {} has dim {}",
                space.name,
                space.dim,
                audio_path.display(),
                audio.dim()
            )));
        }
        match sample_count {
            None => sample_count = Some(audio.rows()),
            Some(expected) if expected != audio.rows() => {
                return Err(StoreError::SampleCountMismatch {
                    space: space.name.clone(),
                    expected,
                    found: audio.rows(),
                })
            }
            _ => {}
        }
        let head_path = base_dir.join(&space.text_head);
        let head = load_in(&head_path, &space.name)?;
        if head.rows() != n {
            return Err(StoreError::ClassCountMismatch {
                space: space.name.clone(),
                expected: n,
                found: head.rows(),
            });
        }
        if head.dim() != space.dim {
            return Err(StoreError::SchemaError(format!(
                "space `{}`: text head dim {} differs from audio dim {}",
                space.name,
                head.dim(),
                space.dim
            )));
        }
        let audio = l2_normalize(&audio).map_err(|e| StoreError::InMatrix {
            path: audio_path.clone(),
            source: Box::new(e),
        })?;
        let head = ZeroShotHead::from_class_rows(&head).map_err(|e| StoreError::InMatrix {
            path: head_path.clone(),
            source: Box::new(e),
        })?;
        embeddings.insert(space.name.clone(), audio.to_array());
        heads.insert(space.name.clone(), head);
    }
    let samples = sample_count.unwrap_or(0);
    if let Some((&max, _)) = manifest.labels().iter().next_back() {
        if max >= samples {
            return Err(StoreError::SchemaError(format!(
                "sample index {max} out of range for {samples} samples"
            )));
        }
    }
    Ok(Dataset {
        manifest,
        base_dir: base_dir.to_path_buf(),
        embeddings,
        heads,
    })
}

/// Loads a manifest and eagerly validates every cross-file invariant.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
    let manifest = parse_manifest(&text)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    assemble(manifest, base)
}
