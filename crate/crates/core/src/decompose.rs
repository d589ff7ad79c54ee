//! Additive fits of logit maps.
//!
//! - Ternary: `W[i][j] ≈ a[i-j] + b[i] + c[j]` over the causal support, solved
//!   as ridge regression through its normal equations.
//! - Rank two: `W'[d][j] ≈ a[d] + b[j]` on a square fake-distance map, in
//!   closed form. The ridge penalty only picks the member of the solution
//!   family with `Σa = Σb`, i.e. each side absorbs half the grand mean, so the
//!   reconstruction is `a[d] + b[j]` with no extra constant.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rope::{FakeLogitMap, LogitMap};
use crate::stats::{pearson, Correlation};
use crate::tensor_io::Report;

pub const DEFAULT_RIDGE_LAMBDA: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TernaryDecomposition {
    /// Distance-axis component, indexed by `i - j` in `0..n`.
    pub a: Vec<f64>,
    /// Query-axis component, indexed by row `i`.
    pub b: Vec<f64>,
    /// Key-axis component, indexed by column `j`.
    pub c: Vec<f64>,
    pub ridge_lambda: f64,
    #[serde(rename = "rss")]
    pub residual_sum_squares: f64,
    pub correlation: Correlation,
    pub n: usize,
    /// Number of support entries at each distance (`n - δ`).
    pub distance_counts: Vec<usize>,
}

impl Report for TernaryDecomposition {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTwoDecomposition {
    pub distances: Vec<i64>,
    /// Distance component, one entry per fake distance.
    pub a: Vec<f64>,
    /// Key component, one entry per key.
    pub b: Vec<f64>,
    #[serde(rename = "rss")]
    pub residual_sum_squares: f64,
    pub correlation: Correlation,
}

impl Report for RankTwoDecomposition {}

/// Data term plus ridge penalty of the ternary fit.
pub fn ternary_objective(w: &LogitMap, a: &[f64], b: &[f64], c: &[f64], ridge_lambda: f64) -> f64 {
    let data: f64 = w
        .iter()
        .map(|(i, j, v)| {
            let r = v - a[i - j] - b[i] - c[j];
            r * r
        })
        .sum();
    let penalty: f64 = a.iter().chain(b).chain(c).map(|x| x * x).sum();
    data + ridge_lambda * penalty
}

pub fn solve_ternary(w: &LogitMap, ridge_lambda: f64) -> Result<TernaryDecomposition> {
    let n = w.n();
    if n < 2 {
        return Err(Error::param("n", "ternary decomposition needs n >= 2"));
    }
    if !(ridge_lambda >= 0.0 && ridge_lambda.is_finite()) {
        return Err(Error::param("ridge_lambda", "must be a finite real >= 0"));
    }
    let dim = 3 * n;
    let (ia, ib, ic) = (0, n, 2 * n);

    // Each support entry contributes the indicator row e_a[i-j] + e_b[i] + e_c[j].
    let mut normal = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    for (i, j, v) in w.iter() {
        let idx = [ia + (i - j), ib + i, ic + j];
        for &r in &idx {
            rhs[r] += v;
            for &s in &idx {
                normal[(r, s)] += 1.0;
            }
        }
    }
    for r in 0..dim {
        normal[(r, r)] += ridge_lambda;
    }
    let singular = || Error::Degenerate("ternary normal equations are singular; use ridge_lambda > 0".into());
    let chol = normal.cholesky().ok_or_else(singular)?;
    // round-off can let a singular system factor; reject vanishing pivots
    let pivots = chol.l_dirty().diagonal();
    let (lo, hi) = pivots.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &p| (lo.min(p), hi.max(p)));
    if !(lo * lo > 1e-13 * hi * hi) {
        return Err(singular());
    }
    let mut x = chol.solve(&rhs);
    project_out_null_space(&mut x, n);

    let a: Vec<f64> = x.rows(ia, n).iter().copied().collect();
    let b: Vec<f64> = x.rows(ib, n).iter().copied().collect();
    let c: Vec<f64> = x.rows(ic, n).iter().copied().collect();
    let mut dec = TernaryDecomposition {
        a,
        b,
        c,
        ridge_lambda,
        residual_sum_squares: 0.0,
        correlation: Correlation::Undefined,
        n,
        distance_counts: (0..n).map(|delta| n - delta).collect(),
    };
    let recon = reconstruct_ternary(&dec);
    dec.residual_sum_squares = w
        .values()
        .iter()
        .zip(recon.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    dec.correlation = pearson(w.values(), recon.values());
    Ok(dec)
}

/// The design `a[i-j] + b[i] + c[j]` is blind to three directions: shifting `a`
/// against `b`, `a` against `c`, and the linear trend `a[δ] = δ, b[i] = -i,
/// c[j] = j`. The ridge solution is orthogonal to all of them, so removing
/// those components only strips round-off amplified by `1/λ`.
fn project_out_null_space(x: &mut DVector<f64>, n: usize) {
    let dim = 3 * n;
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(3);
    let raw = [
        DVector::from_fn(dim, |r, _| match r / n {
            0 => 1.0,
            1 => -1.0,
            _ => 0.0,
        }),
        DVector::from_fn(dim, |r, _| match r / n {
            0 => 1.0,
            2 => -1.0,
            _ => 0.0,
        }),
        DVector::from_fn(dim, |r, _| {
            let t = (r % n) as f64;
            match r / n {
                0 => t,
                1 => -t,
                _ => t,
            }
        }),
    ];
    for mut v in raw {
        for u in &basis {
            let p = u.dot(&v);
            v -= u * p;
        }
        let norm = v.norm();
        if norm > 1e-12 {
            basis.push(v / norm);
        }
    }
    for u in &basis {
        let p = u.dot(x);
        *x -= u * p;
    }
}

pub fn reconstruct_ternary(dec: &TernaryDecomposition) -> LogitMap {
    LogitMap::from_fn(dec.n, |i, j| dec.a[i - j] + dec.b[i] + dec.c[j])
}

pub fn solve_rank_two(wp: &FakeLogitMap) -> Result<RankTwoDecomposition> {
    let (rows, cols) = (wp.num_distances(), wp.num_keys());
    if rows != cols {
        return Err(Error::SupportMismatch(format!(
            "rank-two closed form needs a square fake map, got {rows} distances x {cols} keys"
        )));
    }
    let n = rows;
    if n == 0 {
        return Err(Error::param("distances", "fake map is empty"));
    }
    let m = &wp.values;
    let total: f64 = m.as_slice().iter().sum();
    let offset = total / (2.0 * (n * n) as f64);
    let a: Vec<f64> = (0..n).map(|d| m.row(d).iter().sum::<f64>() / n as f64 - offset).collect();
    let b: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|d| m.get(d, j)).sum::<f64>() / n as f64 - offset)
        .collect();
    let recon = reconstruct_rank_two_values(&a, &b);
    let rss = m
        .as_slice()
        .iter()
        .zip(recon.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(RankTwoDecomposition {
        distances: wp.distances.clone(),
        correlation: pearson(m.as_slice(), recon.as_slice()),
        a,
        b,
        residual_sum_squares: rss,
    })
}

fn reconstruct_rank_two_values(a: &[f64], b: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(a.len(), b.len());
    for (d, ad) in a.iter().enumerate() {
        for (j, bj) in b.iter().enumerate() {
            out.set(d, j, ad + bj);
        }
    }
    out
}

pub fn reconstruct_rank_two(dec: &RankTwoDecomposition) -> FakeLogitMap {
    FakeLogitMap {
        distances: dec.distances.clone(),
        values: reconstruct_rank_two_values(&dec.a, &dec.b),
    }
}

/// Pearson correlation over the causal support of two maps.
pub fn correlation(wa: &LogitMap, wb: &LogitMap) -> Result<Correlation> {
    if wa.n() != wb.n() {
        return Err(Error::SupportMismatch(format!("maps of size {} and {}", wa.n(), wb.n())));
    }
    Ok(pearson(wa.values(), wb.values()))
}

/// Replaces the `⌊p·|support|⌋` lowest entries of `w` by the matching entries
/// of `approx`. Ties are broken by `(i, j)` order.
pub fn hybrid_logits(w: &LogitMap, approx: &LogitMap, p: f64) -> Result<LogitMap> {
    if w.n() != approx.n() {
        return Err(Error::SupportMismatch(format!("maps of size {} and {}", w.n(), approx.n())));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::param("p", format!("replacement ratio must lie in [0, 1] (got {p})")));
    }
    let count = (p * w.support_len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..w.support_len()).collect();
    // stable sort keeps (i, j) order among equal values
    order.sort_by(|&x, &y| w.values()[x].total_cmp(&w.values()[y]));
    let mut out = w.clone();
    for &idx in &order[..count] {
        out.values_mut()[idx] = approx.values()[idx];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(n: usize, seed: u64) -> LogitMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LogitMap::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn zero_map_gives_zero_components() {
        let dec = solve_ternary(&LogitMap::zeros(5), DEFAULT_RIDGE_LAMBDA).unwrap();
        assert!(dec.a.iter().chain(&dec.b).chain(&dec.c).all(|&x| x == 0.0));
        assert_eq!(dec.residual_sum_squares, 0.0);
        assert_eq!(dec.correlation, Correlation::Undefined);
        assert_eq!(dec.distance_counts, vec![5, 4, 3, 2, 1]);
    }

    #[test]
    fn representable_map_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 12;
        let a: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let w = LogitMap::from_fn(n, |i, j| a[i - j] + b[i] + c[j]);
        let dec = solve_ternary(&w, DEFAULT_RIDGE_LAMBDA).unwrap();
        let energy: f64 = w.values().iter().map(|x| x * x).sum();
        assert!(dec.correlation.value().unwrap() >= 0.9999);
        assert!(dec.residual_sum_squares <= 1e-6 * energy);
        let recon = reconstruct_ternary(&dec);
        for (x, y) in w.values().iter().zip(recon.values()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn reconstruct_simple_components() {
        let n = 4;
        let mut dec = solve_ternary(&LogitMap::zeros(n), DEFAULT_RIDGE_LAMBDA).unwrap();
        assert!(reconstruct_ternary(&dec).values().iter().all(|&v| v == 0.0));
        dec.a[0] = 1.0;
        let r = reconstruct_ternary(&dec);
        for (i, j, v) in r.iter() {
            assert_eq!(v, if i == j { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn rss_equals_data_term() {
        let w = random_map(7, 2);
        let dec = solve_ternary(&w, DEFAULT_RIDGE_LAMBDA).unwrap();
        let obj = ternary_objective(&w, &dec.a, &dec.b, &dec.c, 0.0);
        assert!((obj - dec.residual_sum_squares).abs() <= 1e-12 * obj.max(1.0));
    }

    #[test]
    fn ternary_needs_two_rows() {
        assert!(solve_ternary(&LogitMap::zeros(1), DEFAULT_RIDGE_LAMBDA).is_err());
        assert!(matches!(
            solve_ternary(&random_map(4, 1), 0.0),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            solve_ternary(&random_map(12, 1), 0.0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn constant_shift_keeps_residual() {
        let w = random_map(9, 5);
        let shifted = LogitMap::from_fn(9, |i, j| w.get(i, j) + 3.5);
        let d0 = solve_ternary(&w, DEFAULT_RIDGE_LAMBDA).unwrap();
        let d1 = solve_ternary(&shifted, DEFAULT_RIDGE_LAMBDA).unwrap();
        assert!((d0.residual_sum_squares - d1.residual_sum_squares).abs() < 1e-8);
    }

    fn fake(rows: &[Vec<f64>]) -> FakeLogitMap {
        FakeLogitMap::new((0..rows.len() as i64).collect(), Matrix::from_rows(rows)).unwrap()
    }

    #[test]
    fn rank_two_two_by_two() {
        // sum 10, offset 10/8; row means 1.5, 3.5; column means 2, 3
        let dec = solve_rank_two(&fake(&[vec![1.0, 2.0], vec![3.0, 4.0]])).unwrap();
        assert_eq!(dec.a, vec![0.25, 2.25]);
        assert_eq!(dec.b, vec![0.75, 1.75]);
        let r = reconstruct_rank_two(&dec);
        assert_eq!(r.values.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(dec.residual_sum_squares.abs() < 1e-24);
    }

    #[test]
    fn rank_two_constant_map() {
        let dec = solve_rank_two(&fake(&[vec![5.0; 3], vec![5.0; 3], vec![5.0; 3]])).unwrap();
        for v in dec.a.iter().chain(&dec.b) {
            assert!((v - 2.5).abs() < 1e-15);
        }
        for v in reconstruct_rank_two(&dec).values.as_slice() {
            assert!((v - 5.0).abs() < 1e-14);
        }
        assert_eq!(dec.correlation, Correlation::Undefined);
    }

    #[test]
    fn rank_two_rejects_non_square() {
        let f = FakeLogitMap::new(vec![0, 1], Matrix::zeros(2, 3)).unwrap();
        assert!(matches!(solve_rank_two(&f), Err(Error::SupportMismatch(_))));
    }

    #[test]
    fn hybrid_replaces_lowest() {
        let w = LogitMap::from_lower_rows(&[vec![-1.0], vec![-2.0, 0.0], vec![5.0, 1.0, -3.0]]).unwrap();
        let approx = LogitMap::from_fn(3, |i, j| 100.0 + (i * 3 + j) as f64);
        assert_eq!(hybrid_logits(&w, &approx, 0.0).unwrap(), w);
        assert_eq!(hybrid_logits(&w, &approx, 1.0).unwrap(), approx);
        let h = hybrid_logits(&w, &approx, 0.5).unwrap();
        // -3 at (2,2), -2 at (1,0), -1 at (0,0) replaced
        assert_eq!(h.get(0, 0), 100.0);
        assert_eq!(h.get(1, 0), 103.0);
        assert_eq!(h.get(2, 2), 108.0);
        assert_eq!(h.get(1, 1), 0.0);
        assert_eq!(h.get(2, 0), 5.0);
        assert_eq!(h.get(2, 1), 1.0);
        assert!(hybrid_logits(&w, &approx, 1.5).is_err());
        assert!(hybrid_logits(&w, &LogitMap::zeros(2), 0.5).is_err());
    }

    #[test]
    fn hybrid_tie_break_is_lexicographic() {
        let w = LogitMap::from_fn(2, |_, _| 0.0);
        let approx = LogitMap::from_fn(2, |_, _| 1.0);
        let h = hybrid_logits(&w, &approx, 0.34).unwrap();
        assert_eq!(h.values(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn decomposition_json_schema() {
        let dec = solve_ternary(&LogitMap::zeros(2), DEFAULT_RIDGE_LAMBDA).unwrap();
        let v: serde_json::Value = serde_json::to_value(&dec).unwrap();
        for key in ["a", "b", "c", "ridge_lambda", "rss", "correlation", "n", "distance_counts"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["correlation"], "undefined");
        let back: TernaryDecomposition = serde_json::from_value(v).unwrap();
        assert_eq!(back, dec);
    }

    #[test]
    fn correlation_support_mismatch() {
        assert!(correlation(&LogitMap::zeros(2), &LogitMap::zeros(3)).is_err());
        let w = random_map(4, 9);
        let neg = LogitMap::from_fn(4, |i, j| -w.get(i, j));
        assert!((correlation(&w, &neg).unwrap().value().unwrap() + 1.0).abs() < 1e-14);
    }
}
