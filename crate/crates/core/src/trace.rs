//! Sliding-window output traces against the baseline output distribution.
//!
//! Baseline outputs are the causal `o_i` of the same record. A trace fixes one
//! query and slides a window of `m` key/value rows along the sequence; slot
//! `s` of the window is attended at distance `distances[s]` (by default
//! `m-1, …, 1, 0`). Slots can be pinned to a fixed row, which is how retrieved
//! features are placed in an `l_L`-style slot. Points are projected onto the
//! top two principal axes of the baseline and scored by their Mahalanobis
//! distance in that plane.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};
use crate::rope::{attend, attention_outputs, RopeConfig};
use crate::tensor_io::{CsvTable, HeadRecord, Report};

pub const DEFAULT_SLACK: f64 = 0.5;

/// Eigenvalues of a symmetric matrix (descending) and matching unit
/// eigenvectors as columns, by cyclic Jacobi rotations.
pub fn symmetric_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.rows();
    assert_eq!(n, a.cols(), "symmetric_eigen needs a square matrix");
    let mut m = a.clone();
    let mut v = Matrix::zeros(n, n);
    for i in 0..n {
        v.set(i, i, 1.0);
    }
    let frob2: f64 = m.as_slice().iter().map(|x| x * x).sum();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| (0..n).filter(move |&q| q != p).map(move |q| (p, q)))
            .map(|(p, q)| m.get(p, q).powi(2))
            .sum();
        if off <= 1e-30 * frob2 || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m.get(k, p), m.get(k, q));
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let (mpk, mqk) = (m.get(p, k), m.get(q, k));
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m.get(y, y).total_cmp(&m.get(x, x)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors.set(k, col, v.get(k, src));
        }
    }
    (values, vectors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Two orthonormal axes; each has its largest-magnitude component positive.
    pub axes: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
    pub covariance_trace: f64,
    /// `(λ1 + λ2) / trace`
    pub explained_variance_ratio: f64,
    /// Fewer than two positive eigenvalues; the second axis is then an
    /// arbitrary (but deterministic) direction.
    pub degenerate: bool,
}

impl Report for PcaModel {}

/// Covariance normalized by `N - 1`.
pub fn fit_pca(outputs: &[Vec<f64>]) -> Result<PcaModel> {
    if outputs.len() < 3 {
        return Err(Error::param("outputs", format!("PCA needs at least 3 vectors (got {})", outputs.len())));
    }
    let dim = outputs[0].len();
    if dim < 2 {
        return Err(Error::param("outputs", "PCA needs dimension >= 2"));
    }
    if let Some(bad) = outputs.iter().find(|o| o.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: bad.len(),
        });
    }
    let count = outputs.len() as f64;
    let mut mean = vec![0.0; dim];
    for o in outputs {
        for (m, x) in mean.iter_mut().zip(o) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut cov = Matrix::zeros(dim, dim);
    for o in outputs {
        let c: Vec<f64> = o.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for a in 0..dim {
            for b in a..dim {
                let v = cov.get(a, b) + c[a] * c[b];
                cov.set(a, b, v);
            }
        }
    }
    for a in 0..dim {
        for b in a..dim {
            let v = cov.get(a, b) / (count - 1.0);
            cov.set(a, b, v);
            cov.set(b, a, v);
        }
    }
    let trace: f64 = (0..dim).map(|a| cov.get(a, a)).sum();
    let (values, vectors) = symmetric_eigen(&cov);
    let axis = |col: usize| {
        let mut ax: Vec<f64> = (0..dim).map(|k| vectors.get(k, col)).collect();
        let lead = ax
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > ax[best].abs() { i } else { best });
        if ax[lead] < 0.0 {
            ax.iter_mut().for_each(|x| *x = -*x);
        }
        ax
    };
    let eig = [values[0].max(0.0), values[1].max(0.0)];
    let tol = 1e-12 * trace.abs().max(f64::MIN_POSITIVE);
    Ok(PcaModel {
        mean,
        axes: [axis(0), axis(1)],
        eigenvalues: eig,
        covariance_trace: trace,
        explained_variance_ratio: if trace > 0.0 { ((eig[0] + eig[1]) / trace).min(1.0) } else { 0.0 },
        degenerate: !(eig[1] > tol),
    })
}

pub fn project(model: &PcaModel, vec: &[f64]) -> Result<(f64, f64)> {
    if vec.len() != model.mean.len() {
        return Err(Error::DimensionMismatch {
            expected: model.mean.len(),
            found: vec.len(),
        });
    }
    let centered: Vec<f64> = vec.iter().zip(&model.mean).map(|(x, m)| x - m).collect();
    Ok((dot(&centered, &model.axes[0]), dot(&centered, &model.axes[1])))
}

/// Mahalanobis distance in the projected plane. A zero-variance axis
/// contributes nothing at the origin and infinity elsewhere.
pub fn mahalanobis(model: &PcaModel, point: (f64, f64)) -> f64 {
    let term = |x: f64, var: f64| {
        if var > 0.0 {
            x * x / var
        } else if x == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    };
    (term(point.0, model.eigenvalues[0]) + term(point.1, model.eigenvalues[1])).sqrt()
}

/// Distances assigned to the slots of a window, oldest slot first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistanceMap {
    pub distances: Vec<u64>,
    /// `(slot, row)`: the slot attends to a fixed record row instead of the
    /// window-relative one.
    #[serde(default)]
    pub pinned: Vec<(usize, usize)>,
}

impl DistanceMap {
    /// `[m-1, …, 1, 0]`.
    pub fn standard(slots: usize) -> Self {
        Self {
            distances: (0..slots as u64).rev().collect(),
            pinned: Vec::new(),
        }
    }

    pub fn new(distances: Vec<u64>, pretrain_length: usize) -> Result<Self> {
        let map = Self {
            distances,
            pinned: Vec::new(),
        };
        map.validate(pretrain_length)?;
        Ok(map)
    }

    /// `[L_PT; far] ++ [l_L; retrieved] ++ [local-1, …, 0]`, with the retrieved
    /// slots pinned to `retrieved_rows`.
    pub fn with_retrieval_slot(
        pretrain_length: usize,
        far: usize,
        l_l: u64,
        retrieved_rows: &[usize],
        local: usize,
    ) -> Result<Self> {
        let mut distances = vec![pretrain_length as u64; far];
        let first_retrieved = distances.len();
        distances.extend(std::iter::repeat_n(l_l, retrieved_rows.len()));
        distances.extend((0..local as u64).rev());
        let pinned = retrieved_rows
            .iter()
            .enumerate()
            .map(|(i, &row)| (first_retrieved + i, row))
            .collect();
        let map = Self { distances, pinned };
        map.validate(pretrain_length)?;
        Ok(map)
    }

    pub fn slots(&self) -> usize {
        self.distances.len()
    }

    pub fn validate(&self, pretrain_length: usize) -> Result<()> {
        if self.distances.last() != Some(&0) {
            return Err(Error::param("distance_map", "final slot must have distance 0"));
        }
        if let Some(&d) = self.distances.iter().find(|&&d| d > pretrain_length as u64) {
            return Err(Error::param(
                "distance_map",
                format!("distance {d} exceeds pretrain_length {pretrain_length}"),
            ));
        }
        if let Some(&(slot, _)) = self.pinned.iter().find(|&&(slot, _)| slot >= self.slots()) {
            return Err(Error::IndexOutOfRange {
                what: "pinned slot",
                index: slot,
                len: self.slots(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub start_index: usize,
    pub x: f64,
    pub y: f64,
    pub mahalanobis: f64,
    pub output_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowTrace {
    pub query_index: usize,
    pub window_len: usize,
    pub stride: usize,
    pub distance_map: DistanceMap,
    pub points: Vec<TracePoint>,
    pub pca: PcaModel,
    /// Mahalanobis distance of every baseline output.
    pub baseline_mahalanobis: Vec<f64>,
}

impl Report for WindowTrace {
    fn csv_table(&self) -> Option<CsvTable> {
        let mut t = CsvTable::new(["start_index", "x", "y", "mahalanobis", "output_norm"]);
        for p in &self.points {
            t.push(vec![
                p.start_index.to_string(),
                p.x.to_string(),
                p.y.to_string(),
                p.mahalanobis.to_string(),
                p.output_norm.to_string(),
            ]);
        }
        Some(t)
    }
}

pub fn sliding_window_trace(
    record: &HeadRecord,
    query_index: usize,
    window_len: usize,
    stride: usize,
    config: &RopeConfig,
    distance_map: Option<&DistanceMap>,
) -> Result<WindowTrace> {
    let n = record.n();
    if query_index >= n {
        return Err(Error::IndexOutOfRange {
            what: "query",
            index: query_index,
            len: n,
        });
    }
    if stride == 0 {
        return Err(Error::param("stride", "must be at least 1"));
    }
    if window_len == 0 || window_len > n {
        return Err(Error::param("window_len", format!("window of {window_len} does not fit a record of {n} rows")));
    }
    let map = match distance_map {
        Some(m) => {
            if m.slots() != window_len {
                return Err(Error::DimensionMismatch {
                    expected: window_len,
                    found: m.slots(),
                });
            }
            m.clone()
        }
        None => DistanceMap::standard(window_len),
    };
    map.validate(config.pretrain_length.max(window_len - 1))?;
    if let Some(&(_, row)) = map.pinned.iter().find(|&&(_, row)| row >= n) {
        return Err(Error::IndexOutOfRange {
            what: "pinned row",
            index: row,
            len: n,
        });
    }

    let baseline = attention_outputs(record, config)?;
    let baseline_rows: Vec<Vec<f64>> = baseline.iter_rows().map(<[f64]>::to_vec).collect();
    let pca = fit_pca(&baseline_rows)?;
    let baseline_mahalanobis = baseline_rows
        .iter()
        .map(|o| project(&pca, o).map(|p| mahalanobis(&pca, p)))
        .collect::<Result<Vec<_>>>()?;

    let q = record.q.row(query_index);
    let distances: Vec<i64> = map.distances.iter().map(|&d| d as i64).collect();
    let mut points = Vec::new();
    for start in (0..=n - window_len).step_by(stride) {
        let rows: Vec<usize> = (0..window_len)
            .map(|s| {
                map.pinned
                    .iter()
                    .find(|&&(slot, _)| slot == s)
                    .map_or(start + s, |&(_, row)| row)
            })
            .collect();
        let keys: Vec<&[f64]> = rows.iter().map(|&r| record.k.row(r)).collect();
        let values: Vec<&[f64]> = rows.iter().map(|&r| record.v.row(r)).collect();
        let o = attend(q, &keys, &distances, &values, config);
        let (x, y) = project(&pca, &o)?;
        points.push(TracePoint {
            start_index: start,
            x,
            y,
            mahalanobis: mahalanobis(&pca, (x, y)),
            output_norm: norm(&o),
        });
    }
    Ok(WindowTrace {
        query_index,
        window_len,
        stride,
        distance_map: map,
        points,
        pca,
        baseline_mahalanobis,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeResult {
    pub inside: bool,
    /// Largest trace distance minus `max(baseline) + slack`; `<= 0` when inside.
    pub max_excess: f64,
    pub limit: f64,
    pub slack: f64,
}

impl Report for EnvelopeResult {}

pub fn envelope_check(trace: &WindowTrace, baseline_distances: &[f64], slack: f64) -> Result<EnvelopeResult> {
    if trace.points.is_empty() || baseline_distances.is_empty() {
        return Err(Error::param("envelope", "trace and baseline must be nonempty"));
    }
    let limit = baseline_distances.iter().copied().fold(f64::NEG_INFINITY, f64::max) + slack;
    let worst = trace.points.iter().map(|p| p.mahalanobis).fold(f64::NEG_INFINITY, f64::max);
    let max_excess = worst - limit;
    Ok(EnvelopeResult {
        inside: worst <= limit,
        max_excess,
        limit,
        slack,
    })
}
