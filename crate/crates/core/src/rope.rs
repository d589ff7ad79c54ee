//! Rotary position embedding, attention logits and the softmax attention output.
//!
//! A head vector of dimension `d` is viewed as `d/2` rotating 2-tuples; tuple
//! `r` turns by `θ_r = base^(-2r/d)` radians per unit of token distance. The
//! logit of query `q` against key `k` at distance `δ` is
//! `scale * Σ_r k_rᵀ M(δ θ_r) q_r`, with `M(φ)` the planar rotation by `φ`.

use rayon::prelude::*;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensor_io::{HeadManifest, HeadRecord, RopeLayout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub rope_base: f64,
    pub rope_layout: RopeLayout,
    pub pretrain_length: usize,
    pub logit_scale: f64,
}

impl RopeConfig {
    /// Config with `logit_scale = 1/√d`.
    pub fn new(head_dim: usize, rope_base: f64, rope_layout: RopeLayout, pretrain_length: usize) -> Result<Self> {
        let cfg = Self {
            head_dim,
            rope_base,
            rope_layout,
            pretrain_length,
            logit_scale: 1.0 / (head_dim as f64).sqrt(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_manifest(m: &HeadManifest) -> Result<Self> {
        Self::new(m.head_dim, m.rope_base, m.rope_layout, m.pretrain_length)
    }

    pub fn with_logit_scale(mut self, scale: f64) -> Result<Self> {
        self.logit_scale = scale;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(Error::param("head_dim", format!("head_dim must be even and positive (got {})", self.head_dim)));
        }
        if !(self.rope_base > 1.0 && self.rope_base.is_finite()) {
            return Err(Error::param("rope_base", "must be a finite real > 1"));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::param("logit_scale", "must be a finite real > 0"));
        }
        Ok(())
    }

    pub fn num_tuples(&self) -> usize {
        self.head_dim / 2
    }

    #[inline]
    pub fn pair(&self, r: usize) -> (usize, usize) {
        self.rope_layout.pair(r, self.head_dim)
    }

    /// Tuple `r`'s 2-D components of `vec`.
    #[inline]
    pub fn tuple_of(&self, vec: &[f64], r: usize) -> [f64; 2] {
        let (a, b) = self.pair(r);
        [vec[a], vec[b]]
    }

    /// Angular speed of every tuple, `θ_r = base^(-2r/d)`.
    pub fn tuple_angles(&self) -> Vec<f64> {
        let d = self.head_dim as f64;
        (0..self.num_tuples())
            .map(|r| self.rope_base.powf(-2.0 * r as f64 / d))
            .collect()
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.head_dim {
            return Err(Error::DimensionMismatch {
                expected: self.head_dim,
                found: v.len(),
            });
        }
        Ok(())
    }

    fn check_record(&self, record: &HeadRecord) -> Result<()> {
        if record.head_dim() != self.head_dim {
            return Err(Error::DimensionMismatch {
                expected: self.head_dim,
                found: record.head_dim(),
            });
        }
        Ok(())
    }
}

pub fn tuple_angles(config: &RopeConfig) -> Vec<f64> {
    config.tuple_angles()
}

/// Rotates every tuple `r` of `vec` by `multiplier * θ_r`.
pub fn rotate(vec: &[f64], multiplier: i64, config: &RopeConfig) -> Result<Vec<f64>> {
    rotate_continuous(vec, multiplier as f64, config)
}

/// [`rotate`] for a real-valued distance.
pub fn rotate_continuous(vec: &[f64], distance: f64, config: &RopeConfig) -> Result<Vec<f64>> {
    config.check_dim(vec)?;
    let mut out = vec.to_vec();
    for (r, theta) in config.tuple_angles().into_iter().enumerate() {
        let (a, b) = config.pair(r);
        let (s, c) = (distance * theta).sin_cos();
        out[a] = vec[a] * c - vec[b] * s;
        out[b] = vec[a] * s + vec[b] * c;
    }
    Ok(out)
}

pub fn logit(q: &[f64], k: &[f64], distance: i64, config: &RopeConfig) -> Result<f64> {
    config.check_dim(q)?;
    config.check_dim(k)?;
    let table = RotationTable::new(config, &[distance]);
    Ok(table.logit(q, k, 0))
}

/// Cached `(cos, sin)` of `δ θ_r` for a fixed list of distances.
#[derive(Debug, Clone)]
pub struct RotationTable {
    pairs: Vec<(usize, usize)>,
    /// `trig[idx * tuples + r] = (cos, sin)`
    trig: Vec<(f64, f64)>,
    scale: f64,
}

impl RotationTable {
    pub fn new(config: &RopeConfig, distances: &[i64]) -> Self {
        let angles = config.tuple_angles();
        let pairs = (0..config.num_tuples()).map(|r| config.pair(r)).collect();
        let trig = distances
            .iter()
            .flat_map(|&dist| {
                angles.iter().map(move |&theta| {
                    let (s, c) = (dist as f64 * theta).sin_cos();
                    (c, s)
                })
            })
            .collect();
        Self {
            pairs,
            trig,
            scale: config.logit_scale,
        }
    }

    /// Logit at the `idx`-th tabulated distance. Dimensions are not checked.
    #[inline]
    pub fn logit(&self, q: &[f64], k: &[f64], idx: usize) -> f64 {
        self.logit_over(q, k, idx, 0..self.pairs.len())
    }

    /// Same as [`RotationTable::logit`] but summing only over `tuples`.
    #[inline]
    pub fn logit_over(&self, q: &[f64], k: &[f64], idx: usize, tuples: impl IntoIterator<Item = usize>) -> f64 {
        let base = idx * self.pairs.len();
        let mut acc = 0.0;
        for r in tuples {
            let (a, b) = self.pairs[r];
            let (c, s) = self.trig[base + r];
            let rq0 = q[a] * c - q[b] * s;
            let rq1 = q[a] * s + q[b] * c;
            acc += k[a] * rq0 + k[b] * rq1;
        }
        acc * self.scale
    }
}

/// Lower-triangular logit matrix `W[i][j]`, `j <= i`, stored packed by rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    n: usize,
    values: Vec<f64>,
}

#[inline]
fn tri_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

impl LogitMap {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            values: vec![0.0; n * (n + 1) / 2],
        }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in 0..=i {
                values.push(f(i, j));
            }
        }
        Self { n, values }
    }

    /// Reads the lower triangle of a dense row-major `n×n` slice of rows.
    pub fn from_lower_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() < i + 1 {
                return Err(Error::SupportMismatch(format!("row {i} has {} entries, needs {}", r.len(), i + 1)));
            }
        }
        Ok(Self::from_fn(n, |i, j| rows[i][j]))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of defined entries, `n(n+1)/2`.
    pub fn support_len(&self) -> usize {
        self.values.len()
    }

    /// Panics unless `j <= i < n`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert!(j <= i && i < self.n, "({i}, {j}) outside the causal support");
        self.values[tri_index(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        assert!(j <= i && i < self.n, "({i}, {j}) outside the causal support");
        self.values[tri_index(i, j)] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[tri_index(i, 0)..tri_index(i, 0) + i + 1]
    }

    /// Defined entries in `(i, j)` lexicographic order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| (0..=i).map(move |j| (i, j, self.values[tri_index(i, j)])))
    }

    /// Dense `n×n` rows with the masked upper triangle as NaN.
    pub fn to_dense_nan(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| if j <= i { self.get(i, j) } else { f64::NAN }).collect())
            .collect()
    }
}

// JSON form: {"n": n, "values": n×n rows with null above the diagonal}.
impl Serialize for LogitMap {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr {
            n: usize,
            values: Vec<Vec<Option<f64>>>,
        }
        let values = (0..self.n)
            .map(|i| (0..self.n).map(|j| (j <= i).then(|| self.get(i, j))).collect())
            .collect();
        Repr { n: self.n, values }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for LogitMap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            n: usize,
            values: Vec<Vec<Option<f64>>>,
        }
        let repr = Repr::deserialize(d)?;
        if repr.values.len() != repr.n {
            return Err(D::Error::custom("row count differs from n"));
        }
        let mut map = LogitMap::zeros(repr.n);
        for i in 0..repr.n {
            for j in 0..=i {
                let v = repr.values[i]
                    .get(j)
                    .copied()
                    .flatten()
                    .ok_or_else(|| D::Error::custom(format!("missing entry ({i}, {j})")))?;
                map.set(i, j, v);
            }
        }
        Ok(map)
    }
}

/// Logits of one query against every key at controlled distances:
/// `values[(row, j)] = w(distances[row], q, k_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FakeLogitMap {
    pub distances: Vec<i64>,
    pub values: Matrix,
}

impl FakeLogitMap {
    pub fn new(distances: Vec<i64>, values: Matrix) -> Result<Self> {
        if values.rows() != distances.len() {
            return Err(Error::SupportMismatch(format!(
                "{} distances but {} rows",
                distances.len(),
                values.rows()
            )));
        }
        if distances.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param("distances", "must be strictly increasing"));
        }
        if values.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("fake logit map has non-finite entries".into()));
        }
        Ok(Self { distances, values })
    }

    pub fn num_distances(&self) -> usize {
        self.distances.len()
    }

    pub fn num_keys(&self) -> usize {
        self.values.cols()
    }
}

/// `W[i][j] = w(q_i, k_j, i - j)` over the causal support.
pub fn logit_map(record: &HeadRecord, config: &RopeConfig) -> Result<LogitMap> {
    config.check_record(record)?;
    let n = record.n();
    let distances: Vec<i64> = (0..n as i64).collect();
    let table = RotationTable::new(config, &distances);
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let q = record.q.row(i);
            (0..=i).map(|j| table.logit(q, record.k.row(j), i - j)).collect()
        })
        .collect();
    Ok(LogitMap {
        n,
        values: rows.into_iter().flatten().collect(),
    })
}

pub fn fake_logit_map(record: &HeadRecord, query_index: usize, distances: &[i64], config: &RopeConfig) -> Result<FakeLogitMap> {
    config.check_record(record)?;
    let n = record.n();
    if query_index >= n {
        return Err(Error::IndexOutOfRange {
            what: "query",
            index: query_index,
            len: n,
        });
    }
    let table = RotationTable::new(config, distances);
    let q = record.q.row(query_index);
    let mut values = Matrix::zeros(distances.len(), n);
    for (row, _) in distances.iter().enumerate() {
        for j in 0..n {
            values.set(row, j, table.logit(q, record.k.row(j), row));
        }
    }
    FakeLogitMap::new(distances.to_vec(), values)
}

/// Softmax-weighted average of `values` under `logits` (max-shifted).
pub fn softmax_average<'a>(logits: &[f64], values: impl IntoIterator<Item = &'a [f64]>, value_dim: usize) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; value_dim];
    for (w, v) in weights.iter().zip(values) {
        let w = w / total;
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    out
}

/// Attention output of `query` over `(key, distance, value)` slots.
pub fn attend(query: &[f64], keys: &[&[f64]], distances: &[i64], values: &[&[f64]], config: &RopeConfig) -> Vec<f64> {
    debug_assert!(keys.len() == distances.len() && keys.len() == values.len());
    let table = RotationTable::new(config, distances);
    let logits: Vec<f64> = keys.iter().enumerate().map(|(s, k)| table.logit(query, k, s)).collect();
    let value_dim = values.first().map_or(0, |v| v.len());
    softmax_average(&logits, values.iter().copied(), value_dim)
}

/// Causal attention output `o_i` at position `i`.
pub fn attention_output(record: &HeadRecord, config: &RopeConfig, i: usize) -> Result<Vec<f64>> {
    config.check_record(record)?;
    if i >= record.n() {
        return Err(Error::IndexOutOfRange {
            what: "position",
            index: i,
            len: record.n(),
        });
    }
    let positions: Vec<i64> = (0..record.n() as i64).collect();
    Ok(output_at(record, config, &positions, i))
}

/// All causal outputs `o_0..o_{n-1}` as rows.
pub fn attention_outputs(record: &HeadRecord, config: &RopeConfig) -> Result<Matrix> {
    let positions: Vec<i64> = (0..record.n() as i64).collect();
    attention_outputs_with_positions(record, config, &positions)
}

/// Causal outputs where key `j` sits at position `key_positions[j]`; query `i`
/// stays at position `i` and attends to keys `j <= i`.
pub fn attention_outputs_with_positions(record: &HeadRecord, config: &RopeConfig, key_positions: &[i64]) -> Result<Matrix> {
    config.check_record(record)?;
    if key_positions.len() != record.n() {
        return Err(Error::DimensionMismatch {
            expected: record.n(),
            found: key_positions.len(),
        });
    }
    let rows: Vec<Vec<f64>> = (0..record.n())
        .into_par_iter()
        .map(|i| output_at(record, config, key_positions, i))
        .collect();
    Ok(Matrix::from_rows(&rows))
}

fn output_at(record: &HeadRecord, config: &RopeConfig, key_positions: &[i64], i: usize) -> Vec<f64> {
    let keys: Vec<&[f64]> = (0..=i).map(|j| record.k.row(j)).collect();
    let values: Vec<&[f64]> = (0..=i).map(|j| record.v.row(j)).collect();
    let distances: Vec<i64> = key_positions[..=i].iter().map(|&p| i as i64 - p).collect();
    attend(record.q.row(i), &keys, &distances, &values, config)
}
