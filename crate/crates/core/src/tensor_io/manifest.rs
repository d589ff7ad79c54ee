use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::npy::{self, NpyDtype};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// How the `d` components of a head vector are grouped into rotating 2-tuples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RopeLayout {
    /// Tuple `r` pairs components `r` and `r + d/2` (Llama / GPT-NeoX style).
    #[default]
    HalfSplit,
    /// Tuple `r` pairs components `2r` and `2r + 1`.
    AdjacentPairs,
}

impl RopeLayout {
    /// Component indices of tuple `r` for head dimension `d`.
    #[inline]
    pub fn pair(self, r: usize, d: usize) -> (usize, usize) {
        match self {
            RopeLayout::HalfSplit => (r, r + d / 2),
            RopeLayout::AdjacentPairs => (2 * r, 2 * r + 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl From<Dtype> for NpyDtype {
    fn from(d: Dtype) -> Self {
        match d {
            Dtype::F32 => NpyDtype::F32,
            Dtype::F64 => NpyDtype::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorPaths {
    pub query: PathBuf,
    pub key: PathBuf,
    pub value: PathBuf,
}

fn default_rope_base() -> f64 {
    10000.0
}

/// Sidecar JSON describing one dumped attention head.
///
/// Tensor paths are resolved relative to the manifest's directory. Dumps hold
/// the vectors *before* rotary rotation; `pre_rotated: true` is rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadManifest {
    pub model_label: String,
    pub layer_index: u32,
    pub head_index: u32,
    pub head_dim: usize,
    pub value_dim: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default)]
    pub rope_layout: RopeLayout,
    pub pretrain_length: usize,
    pub tensor_paths: TensorPaths,
    pub dtype: Dtype,
    #[serde(default)]
    pub pre_rotated: bool,
}

impl HeadManifest {
    /// Manifest with standard file names and the default rope settings.
    pub fn new(
        model_label: impl Into<String>,
        head_dim: usize,
        value_dim: usize,
        rope_base: f64,
        pretrain_length: usize,
    ) -> Self {
        Self {
            model_label: model_label.into(),
            layer_index: 0,
            head_index: 0,
            head_dim,
            value_dim,
            rope_base,
            rope_layout: RopeLayout::HalfSplit,
            pretrain_length,
            tensor_paths: TensorPaths {
                query: "query.npy".into(),
                key: "key.npy".into(),
                value: "value.npy".into(),
            },
            dtype: Dtype::F64,
            pre_rotated: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 {
            return Err(Error::InvalidField {
                field: "head_dim",
                reason: "head_dim must be positive".into(),
            });
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::InvalidField {
                field: "head_dim",
                reason: format!("head_dim must be even (got {})", self.head_dim),
            });
        }
        if self.value_dim == 0 {
            return Err(Error::InvalidField {
                field: "value_dim",
                reason: "value_dim must be positive".into(),
            });
        }
        if !(self.rope_base > 1.0 && self.rope_base.is_finite()) {
            return Err(Error::InvalidField {
                field: "rope_base",
                reason: format!("rope_base must be a finite real > 1 (got {})", self.rope_base),
            });
        }
        if self.pretrain_length == 0 {
            return Err(Error::InvalidField {
                field: "pretrain_length",
                reason: "pretrain_length must be at least 1".into(),
            });
        }
        if self.pre_rotated {
            return Err(Error::InvalidField {
                field: "pre_rotated",
                reason: "only pre-rotation dumps (pre_rotated = false) are supported".into(),
            });
        }
        Ok(())
    }
}

/// Query/key/value rows of one head, promoted to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadRecord {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub manifest: HeadManifest,
}

impl HeadRecord {
    /// Builds a record after checking shapes and finiteness against `manifest`.
    pub fn new(q: Matrix, k: Matrix, v: Matrix, manifest: HeadManifest) -> Result<Self> {
        manifest.validate()?;
        let d = manifest.head_dim;
        let n = q.rows();
        if n == 0 {
            return Err(Error::ShapeMismatch {
                file: "query".into(),
                expected: "n >= 1 rows".into(),
                found: "0 rows".into(),
            });
        }
        for (role, m, cols) in [("query", &q, d), ("key", &k, d), ("value", &v, manifest.value_dim)] {
            if m.rows() != n || m.cols() != cols {
                return Err(Error::ShapeMismatch {
                    file: role.into(),
                    expected: format!("({n}, {cols})"),
                    found: format!("({}, {})", m.rows(), m.cols()),
                });
            }
            check_finite(role, m)?;
        }
        Ok(Self { q, k, v, manifest })
    }

    pub fn n(&self) -> usize {
        self.q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.manifest.head_dim
    }

    pub fn value_dim(&self) -> usize {
        self.manifest.value_dim
    }
}

fn check_finite(file: &str, m: &Matrix) -> Result<()> {
    if let Some(pos) = m.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            file: file.into(),
            row: pos / m.cols().max(1),
            col: pos % m.cols().max(1),
        });
    }
    Ok(())
}

/// Loads and validates a head dump from its manifest.
pub fn load_head(manifest_path: impl AsRef<Path>) -> Result<HeadRecord> {
    let manifest_path = manifest_path.as_ref();
    let file = File::open(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: HeadManifest =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Manifest {
            path: manifest_path.to_path_buf(),
            reason: e.to_string(),
        })?;
    manifest.validate()?;

    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let d = manifest.head_dim;
    let q = read_tensor(base, &manifest.tensor_paths.query, manifest.dtype, d)?;
    let k = read_tensor(base, &manifest.tensor_paths.key, manifest.dtype, d)?;
    let v = read_tensor(base, &manifest.tensor_paths.value, manifest.dtype, manifest.value_dim)?;
    for (path, m) in [(&manifest.tensor_paths.key, &k), (&manifest.tensor_paths.value, &v)] {
        if m.rows() != q.rows() {
            return Err(Error::ShapeMismatch {
                file: path.display().to_string(),
                expected: format!("{} rows (as in query)", q.rows()),
                found: format!("{} rows", m.rows()),
            });
        }
    }
    HeadRecord::new(q, k, v, manifest)
}

fn read_tensor(base: &Path, rel: &Path, dtype: Dtype, cols: usize) -> Result<Matrix> {
    let path = base.join(rel);
    let name = rel.display().to_string();
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let m = npy::read_matrix(&mut BufReader::new(file)).map_err(|reason| Error::Npy {
        file: name.clone(),
        reason,
    })?;
    if m.dtype != NpyDtype::from(dtype) {
        return Err(Error::Npy {
            file: name,
            reason: format!("dtype {:?} does not match manifest dtype {:?}", m.dtype, dtype),
        });
    }
    if m.cols != cols || m.rows == 0 {
        return Err(Error::ShapeMismatch {
            file: name,
            expected: format!("(n >= 1, {cols})"),
            found: format!("({}, {})", m.rows, m.cols),
        });
    }
    let matrix = Matrix::from_vec(m.rows, m.cols, m.data);
    check_finite(&name, &matrix)?;
    Ok(matrix)
}

/// Writes `record` as `query.npy`, `key.npy`, `value.npy` and `manifest.json`
/// under `dir`, returning the manifest path. The manifest's tensor paths are
/// rewritten to those file names.
pub fn write_head(record: &HeadRecord, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = record.manifest.clone();
    manifest.tensor_paths = TensorPaths {
        query: "query.npy".into(),
        key: "key.npy".into(),
        value: "value.npy".into(),
    };
    for (name, m) in [("query.npy", &record.q), ("key.npy", &record.k), ("value.npy", &record.v)] {
        let path = dir.join(name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        npy::write_matrix(&mut w, m.rows(), m.cols(), m.as_slice(), manifest.dtype.into())
            .and_then(|_| std::io::Write::flush(&mut w))
            .map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
