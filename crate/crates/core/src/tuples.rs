//! Rotating-tuple statistics and the explicit positional/semantic split.
//!
//! For a slow set `S` and a fixed query `q`, with `k̄_r` the mean key tuple:
//!
//! - `f(q, δ) = scale * Σ_{r∈S} k̄_rᵀ M(δ θ_r) q_r`
//! - `g(q, k) = scale * Σ_{r∈S} (k_r - k̄_r)ᵀ q_r`
//! - `l(δ, k) = w(δ, q, k) - f(q, δ) - g(q, k)`
//!
//! `f` only sees the keys through their mean and `g` does not depend on the
//! distance. The residual collects the fast tuples plus the rotation of the
//! slow deviations, `(k_r - k̄_r)ᵀ (M(δθ_r) - I) q_r`.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::{logit_map, RopeConfig, RotationTable};
use crate::stats::{median, pearson, wrap_angle, Correlation};
use crate::tensor_io::{CsvTable, HeadRecord, Report};

pub const DEFAULT_NORM_THRESHOLD: f64 = 10.0;
pub const DEFAULT_ANGLE_BUDGET: f64 = FRAC_PI_2;

/// Below this mean resultant length the circular mean angle is flagged unreliable.
pub const MIN_RESULTANT_LENGTH: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TupleStats {
    pub index: usize,
    pub mean_key: [f64; 2],
    /// Mean distance of key tuples from `mean_key`.
    pub key_deviation: f64,
    pub mean_query_norm: f64,
    /// `‖mean_key‖ * mean_query_norm`
    pub norm_product: f64,
    pub theta: f64,
    /// `theta * pretrain_length`
    pub theta_max: f64,
    /// Circular mean of `θ_q - θ_k - π` over all query/key pairs, in `(-π, π]`.
    pub mean_delta_angle: f64,
    /// Mean resultant length behind `mean_delta_angle`.
    pub resultant_length: f64,
    pub delta_angle_reliable: bool,
}

/// Wrapper so a list of tuple statistics can be saved as a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TupleReport {
    pub pretrain_length: usize,
    pub tuples: Vec<TupleStats>,
}

impl Report for TupleReport {
    fn csv_table(&self) -> Option<CsvTable> {
        let mut t = CsvTable::new([
            "index",
            "mean_key_x",
            "mean_key_y",
            "key_deviation",
            "mean_query_norm",
            "norm_product",
            "theta",
            "theta_max",
            "mean_delta_angle",
            "resultant_length",
        ]);
        for s in &self.tuples {
            t.push(vec![
                s.index.to_string(),
                s.mean_key[0].to_string(),
                s.mean_key[1].to_string(),
                s.key_deviation.to_string(),
                s.mean_query_norm.to_string(),
                s.norm_product.to_string(),
                s.theta.to_string(),
                s.theta_max.to_string(),
                s.mean_delta_angle.to_string(),
                s.resultant_length.to_string(),
            ]);
        }
        Some(t)
    }
}

pub fn tuple_stats(record: &HeadRecord, config: &RopeConfig) -> Result<Vec<TupleStats>> {
    if record.head_dim() != config.head_dim {
        return Err(Error::DimensionMismatch {
            expected: config.head_dim,
            found: record.head_dim(),
        });
    }
    let n = record.n() as f64;
    let angles = config.tuple_angles();
    let stats = angles
        .iter()
        .enumerate()
        .map(|(r, &theta)| {
            let keys: Vec<[f64; 2]> = record.k.iter_rows().map(|k| config.tuple_of(k, r)).collect();
            let queries: Vec<[f64; 2]> = record.q.iter_rows().map(|q| config.tuple_of(q, r)).collect();
            let mean_key = keys
                .iter()
                .fold([0.0, 0.0], |acc, k| [acc[0] + k[0] / n, acc[1] + k[1] / n]);
            let key_deviation = keys
                .iter()
                .map(|k| (k[0] - mean_key[0]).hypot(k[1] - mean_key[1]))
                .sum::<f64>()
                / n;
            let mean_query_norm = queries.iter().map(|q| q[0].hypot(q[1])).sum::<f64>() / n;
            let (q_dir, q_len) = mean_direction(&queries);
            let (k_dir, k_len) = mean_direction(&keys);
            let resultant_length = q_len * k_len;
            TupleStats {
                index: r,
                mean_key,
                key_deviation,
                mean_query_norm,
                norm_product: mean_key[0].hypot(mean_key[1]) * mean_query_norm,
                theta,
                theta_max: theta * config.pretrain_length as f64,
                mean_delta_angle: wrap_angle(q_dir - k_dir - PI),
                resultant_length,
                delta_angle_reliable: resultant_length >= MIN_RESULTANT_LENGTH,
            }
        })
        .collect();
    Ok(stats)
}

/// Direction and mean resultant length of unit vectors along `points`
/// (zero vectors are skipped but still count towards the length's denominator).
fn mean_direction(points: &[[f64; 2]]) -> (f64, f64) {
    let (mut sx, mut sy) = (0.0, 0.0);
    for p in points {
        let norm = p[0].hypot(p[1]);
        if norm > 0.0 {
            sx += p[0] / norm;
            sy += p[1] / norm;
        }
    }
    let len = sx.hypot(sy) / points.len() as f64;
    (sy.atan2(sx), len)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlowSet {
    pub indices: BTreeSet<usize>,
    pub norm_threshold_ratio: f64,
    pub angle_budget: f64,
    pub median_norm_product: f64,
    pub empty: bool,
}

impl SlowSet {
    pub fn from_indices(indices: impl IntoIterator<Item = usize>) -> Self {
        let indices: BTreeSet<usize> = indices.into_iter().collect();
        Self {
            empty: indices.is_empty(),
            indices,
            norm_threshold_ratio: f64::NAN,
            angle_budget: f64::NAN,
            median_norm_product: f64::NAN,
        }
    }
}

/// Tuples whose norm product is at least `norm_threshold` times the median and
/// whose rotation over the pre-training length stays within `angle_budget`.
pub fn detect_slow_dominating(stats: &[TupleStats], norm_threshold: f64, angle_budget: f64) -> SlowSet {
    let products: Vec<f64> = stats.iter().map(|s| s.norm_product).collect();
    let med = median(&products).unwrap_or(0.0);
    let indices: BTreeSet<usize> = stats
        .iter()
        .filter(|s| s.norm_product >= norm_threshold * med && s.theta_max <= angle_budget)
        .map(|s| s.index)
        .collect();
    SlowSet {
        empty: indices.is_empty(),
        indices,
        norm_threshold_ratio: norm_threshold,
        angle_budget,
        median_norm_product: med,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub max_abs_l: f64,
    pub rms_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentangledLogit {
    pub query_index: usize,
    pub slow_indices: BTreeSet<usize>,
    pub f_table: BTreeMap<i64, f64>,
    pub g_values: Vec<f64>,
    pub residual_stats: ResidualStats,
    pub range_f: f64,
    pub range_g: f64,
    /// `max(range_f, range_g)`
    #[serde(rename = "R")]
    pub r: f64,
    pub correlation_fg_vs_w: Correlation,
}

impl Report for DisentangledLogit {}

/// Slow-tuple mean keys packed into a head-sized vector (zeros elsewhere).
fn mean_key_vector(record: &HeadRecord, slow: &BTreeSet<usize>, config: &RopeConfig) -> Vec<f64> {
    let n = record.n() as f64;
    let mut mean = vec![0.0; config.head_dim];
    for &r in slow {
        let (a, b) = config.pair(r);
        for k in record.k.iter_rows() {
            mean[a] += k[a] / n;
            mean[b] += k[b] / n;
        }
    }
    mean
}

fn check_slow(slow: &SlowSet, config: &RopeConfig) -> Result<()> {
    if let Some(&r) = slow.indices.iter().find(|&&r| r >= config.num_tuples()) {
        return Err(Error::IndexOutOfRange {
            what: "tuple",
            index: r,
            len: config.num_tuples(),
        });
    }
    Ok(())
}

fn deviation_term(q: &[f64], k: &[f64], mean: &[f64], slow: &BTreeSet<usize>, config: &RopeConfig) -> f64 {
    slow.iter()
        .map(|&r| {
            let (a, b) = config.pair(r);
            (k[a] - mean[a]) * q[a] + (k[b] - mean[b]) * q[b]
        })
        .sum::<f64>()
        * config.logit_scale
}

/// Builds `f` and `g` for query `query_index` over distances `0..n` and all keys.
pub fn build_fg(record: &HeadRecord, slow: &SlowSet, query_index: usize, config: &RopeConfig) -> Result<DisentangledLogit> {
    let distances: Vec<i64> = (0..record.n() as i64).collect();
    build_fg_with_distances(record, slow, query_index, &distances, config)
}

pub fn build_fg_with_distances(
    record: &HeadRecord,
    slow: &SlowSet,
    query_index: usize,
    distances: &[i64],
    config: &RopeConfig,
) -> Result<DisentangledLogit> {
    check_slow(slow, config)?;
    if query_index >= record.n() {
        return Err(Error::IndexOutOfRange {
            what: "query",
            index: query_index,
            len: record.n(),
        });
    }
    if distances.is_empty() {
        return Err(Error::param("distances", "need at least one distance"));
    }
    let q = record.q.row(query_index);
    let mean = mean_key_vector(record, &slow.indices, config);
    let table = RotationTable::new(config, distances);

    let f: Vec<f64> = (0..distances.len())
        .map(|idx| table.logit_over(q, &mean, idx, slow.indices.iter().copied()))
        .collect();
    let g: Vec<f64> = record
        .k
        .iter_rows()
        .map(|k| deviation_term(q, k, &mean, &slow.indices, config))
        .collect();

    let mut w_all = Vec::with_capacity(distances.len() * record.n());
    let mut fg_all = Vec::with_capacity(w_all.capacity());
    let (mut max_abs, mut sum_sq) = (0.0f64, 0.0);
    for (idx, fv) in f.iter().enumerate() {
        for (j, k) in record.k.iter_rows().enumerate() {
            let w = table.logit(q, k, idx);
            let approx = fv + g[j];
            let l = w - approx;
            max_abs = max_abs.max(l.abs());
            sum_sq += l * l;
            w_all.push(w);
            fg_all.push(approx);
        }
    }
    let range_f = range(&f);
    let range_g = range(&g);
    Ok(DisentangledLogit {
        query_index,
        slow_indices: slow.indices.clone(),
        f_table: distances.iter().copied().zip(f.iter().copied()).collect(),
        g_values: g,
        residual_stats: ResidualStats {
            max_abs_l: max_abs,
            rms_l: (sum_sq / w_all.len() as f64).sqrt(),
        },
        range_f,
        range_g,
        r: range_f.max(range_g),
        correlation_fg_vs_w: pearson(&fg_all, &w_all),
    })
}

fn range(x: &[f64]) -> f64 {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi - lo
}

/// `f + g` against the real logits of every query over its causal support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalDisentanglement {
    pub support: usize,
    pub correlation_fg_vs_w: Correlation,
    pub residual_stats: ResidualStats,
}

impl Report for CausalDisentanglement {}

pub fn causal_disentanglement(record: &HeadRecord, slow: &SlowSet, config: &RopeConfig) -> Result<CausalDisentanglement> {
    check_slow(slow, config)?;
    let n = record.n();
    let w = logit_map(record, config)?;
    let mean = mean_key_vector(record, &slow.indices, config);
    let distances: Vec<i64> = (0..n as i64).collect();
    let table = RotationTable::new(config, &distances);
    let mut approx = Vec::with_capacity(w.support_len());
    for i in 0..n {
        let q = record.q.row(i);
        for j in 0..=i {
            let f = table.logit_over(q, &mean, i - j, slow.indices.iter().copied());
            approx.push(f + deviation_term(q, record.k.row(j), &mean, &slow.indices, config));
        }
    }
    let (mut max_abs, mut sum_sq) = (0.0f64, 0.0);
    for (x, y) in w.values().iter().zip(&approx) {
        max_abs = max_abs.max((x - y).abs());
        sum_sq += (x - y) * (x - y);
    }
    Ok(CausalDisentanglement {
        support: approx.len(),
        correlation_fg_vs_w: pearson(&approx, w.values()),
        residual_stats: ResidualStats {
            max_abs_l: max_abs,
            rms_l: (sum_sq / approx.len() as f64).sqrt(),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualRatios {
    /// `max|l| / R`
    pub ratio_max: f64,
    /// `rms(l) / R`
    pub ratio_rms: f64,
}

/// Residual size relative to the larger of the `f` and `g` ranges; fails when
/// both are constant (`R = 0`).
pub fn residual_diagnostics(dis: &DisentangledLogit) -> Result<ResidualRatios> {
    if !(dis.r > 0.0) {
        return Err(Error::Degenerate("R = 0: f and g are both constant".into()));
    }
    Ok(ResidualRatios {
        ratio_max: dis.residual_stats.max_abs_l / dis.r,
        ratio_rms: dis.residual_stats.rms_l / dis.r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::tensor_io::{generate_synthetic, HeadManifest, SyntheticSpec};

    fn cfg_for(rec: &HeadRecord) -> RopeConfig {
        RopeConfig::from_manifest(&rec.manifest).unwrap()
    }

    fn slow_only_exact(n: usize) -> HeadRecord {
        let spec = SyntheticSpec::new(n, 16, [6, 7], 20.0, 0.0, 3);
        let mut rec = generate_synthetic(&spec).unwrap();
        let d = 16;
        for t in 0..n {
            for r in 0..6 {
                for m in [&mut rec.q, &mut rec.k] {
                    m.set(t, r, 0.0);
                    m.set(t, r + d / 2, 0.0);
                }
            }
        }
        rec
    }

    #[test]
    fn single_token_has_zero_deviation() {
        let rec = generate_synthetic(&SyntheticSpec::new(1, 8, [3], 4.0, 0.3, 1)).unwrap();
        for s in tuple_stats(&rec, &cfg_for(&rec)).unwrap() {
            assert_eq!(s.key_deviation, 0.0);
        }
    }

    #[test]
    fn planted_ratio_shows_in_norm_products() {
        let rec = generate_synthetic(&SyntheticSpec::new(64, 64, [30, 31], 50.0, 0.02, 7)).unwrap();
        let stats = tuple_stats(&rec, &cfg_for(&rec)).unwrap();
        let others: Vec<f64> = stats[..30].iter().map(|s| s.norm_product).collect();
        let med = median(&others).unwrap();
        assert!(stats[30].norm_product >= 50.0 * med);
        assert!(stats[31].norm_product >= 50.0 * med);
    }

    #[test]
    fn opposite_keys_give_zero_delta_angle() {
        let mut m = HeadManifest::new("t", 2, 1, 10000.0, 8);
        m.value_dim = 1;
        let q = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]);
        let k = Matrix::from_rows(&[vec![-3.0, 0.0], vec![0.0, -1.0]]);
        let rec = HeadRecord::new(q, k, Matrix::zeros(2, 1), m).unwrap();
        // query directions 0 and π/2, keys at π and 3π/2: pairwise differences
        // average to -π on the circle, i.e. θ_δ = 0 up to wrap.
        let s = &tuple_stats(&rec, &cfg_for(&rec)).unwrap()[0];
        assert!(wrap_angle(s.mean_delta_angle).abs() < 1e-12, "{}", s.mean_delta_angle);
        assert!(s.delta_angle_reliable);
    }

    #[test]
    fn detection_recovers_planted_set() {
        let rec = generate_synthetic(&SyntheticSpec::new(64, 64, [30, 31], 50.0, 0.02, 7)).unwrap();
        let stats = tuple_stats(&rec, &cfg_for(&rec)).unwrap();
        let slow = detect_slow_dominating(&stats, DEFAULT_NORM_THRESHOLD, DEFAULT_ANGLE_BUDGET);
        assert_eq!(slow.indices.into_iter().collect::<Vec<_>>(), vec![30, 31]);
        let all = detect_slow_dominating(&stats, 0.0, f64::INFINITY);
        assert_eq!(all.indices.len(), 32);
    }

    #[test]
    fn isotropic_features_have_no_slow_set() {
        for seed in 0..20 {
            let rec = generate_synthetic(&SyntheticSpec::new(64, 64, [], 1.0, 0.0, seed)).unwrap();
            let stats = tuple_stats(&rec, &cfg_for(&rec)).unwrap();
            let slow = detect_slow_dominating(&stats, DEFAULT_NORM_THRESHOLD, DEFAULT_ANGLE_BUDGET);
            assert!(slow.empty, "seed {seed}: {:?}", slow.indices);
        }
    }

    #[test]
    fn empty_slow_set_leaves_everything_in_residual() {
        let rec = generate_synthetic(&SyntheticSpec::new(8, 8, [], 1.0, 0.0, 2)).unwrap();
        let dis = build_fg(&rec, &SlowSet::from_indices([]), 7, &cfg_for(&rec)).unwrap();
        assert!(dis.f_table.values().all(|&v| v == 0.0));
        assert!(dis.g_values.iter().all(|&v| v == 0.0));
        assert_eq!(dis.r, 0.0);
        assert_eq!(dis.correlation_fg_vs_w, Correlation::Undefined);
        assert!(matches!(residual_diagnostics(&dis), Err(Error::Degenerate(_))));
        assert!(dis.residual_stats.max_abs_l > 0.0);
    }

    #[test]
    fn exact_slow_only_record_has_no_residual() {
        let rec = slow_only_exact(32);
        let cfg = cfg_for(&rec);
        let dis = build_fg(&rec, &SlowSet::from_indices([6, 7]), 31, &cfg).unwrap();
        assert!(dis.residual_stats.max_abs_l < 1e-10);
        assert!(dis.g_values.iter().all(|g| g.abs() < 1e-12));
        let ratios = residual_diagnostics(&dis).unwrap();
        assert!(ratios.ratio_max < 1e-9, "{ratios:?}");
    }

    #[test]
    fn synthetic_record_correlates() {
        let rec = generate_synthetic(&SyntheticSpec::new(128, 64, [30, 31], 50.0, 0.02, 5)).unwrap();
        let cfg = cfg_for(&rec);
        let dis = build_fg(&rec, &SlowSet::from_indices([30, 31]), 127, &cfg).unwrap();
        assert!(dis.correlation_fg_vs_w.value().unwrap() >= 0.95);
        assert_eq!(dis.f_table.len(), 128);
    }

    #[test]
    fn f_sees_keys_only_through_their_mean() {
        let rec = generate_synthetic(&SyntheticSpec::new(16, 16, [7], 10.0, 0.1, 4)).unwrap();
        let cfg = cfg_for(&rec);
        let slow = SlowSet::from_indices([7]);
        let dis = build_fg(&rec, &slow, 5, &cfg).unwrap();
        let mean = mean_key_vector(&rec, &slow.indices, &cfg);
        let mut flat = rec.clone();
        for t in 0..16 {
            let (a, b) = cfg.pair(7);
            flat.k.set(t, a, mean[a]);
            flat.k.set(t, b, mean[b]);
        }
        let dis2 = build_fg(&flat, &slow, 5, &cfg).unwrap();
        for (x, y) in dis.f_table.values().zip(dis2.f_table.values()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn query_scaling_scales_everything() {
        let rec = generate_synthetic(&SyntheticSpec::new(16, 16, [7], 10.0, 0.1, 8)).unwrap();
        let cfg = cfg_for(&rec);
        let slow = SlowSet::from_indices([7]);
        let base = build_fg(&rec, &slow, 9, &cfg).unwrap();
        let mut scaled = rec.clone();
        scaled.q.as_mut_slice().iter_mut().for_each(|x| *x *= 4.0);
        let s = build_fg(&scaled, &slow, 9, &cfg).unwrap();
        assert_eq!(s.r, 4.0 * base.r);
        assert_eq!(s.residual_stats.max_abs_l, 4.0 * base.residual_stats.max_abs_l);
        for (x, y) in base.g_values.iter().zip(&s.g_values) {
            assert_eq!(*y, 4.0 * x);
        }
        let (c0, c1) = (base.correlation_fg_vs_w.value().unwrap(), s.correlation_fg_vs_w.value().unwrap());
        assert!((c0 - c1).abs() < 1e-12);
    }

    #[test]
    fn bad_inputs_rejected() {
        let rec = generate_synthetic(&SyntheticSpec::new(4, 8, [], 1.0, 0.0, 2)).unwrap();
        let cfg = cfg_for(&rec);
        assert!(build_fg(&rec, &SlowSet::from_indices([1]), 4, &cfg).is_err());
        assert!(build_fg(&rec, &SlowSet::from_indices([9]), 0, &cfg).is_err());
    }
}
