//! Position perturbations and their effect on attention outputs.
//!
//! Sampling protocol (stable across releases; every draw comes from
//! `ChaCha8Rng::seed_from_u64(seed)` via `next_u64`):
//!
//! - `uniform_below(m)` maps a draw `x` to `⌊x·m / 2^64⌋`.
//! - A permutation of `0..n` is produced by Fisher–Yates, `i` from `n-1`
//!   down to 1 swapping `i` with `uniform_below(i+1)`.
//! - Pair kinds target `⌊γn/2⌋` pairs. Anchors are visited in permutation
//!   order; an unused anchor `a` collects the unused partners `c ≠ a` with
//!   `|a-c| <= l_max` in increasing index order and takes
//!   `candidates[uniform_below(len)]`. Anchors without a partner are skipped.
//!   Sampling stops once the target is met or anchors run out.
//! - Position manipulation takes the first `⌊γn⌋` entries of the permutation
//!   and gives each an offset: `u = uniform_below(2·l_max)`, offset
//!   `u - l_max` if `u < l_max` else `u - l_max + 1`. The shifted position is
//!   clamped to `[0, n-1]`; clamps that land back on the original position
//!   are counted as collisions.
//!
//! Drift compares each causal output with its perturbed counterpart. This is
//! a representation-level proxy; no perplexity is computed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};
use crate::rope::{attention_outputs, attention_outputs_with_positions, RopeConfig};
use crate::tensor_io::{CsvTable, HeadRecord, Report};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    /// Swap whole tokens (q, k and v rows); positions stay.
    TextTransposition,
    /// Swap key rows (and their values unless `keys_only`); queries stay.
    FeatureTransposition,
    /// Offset the position index of some keys; features stay.
    PositionManipulation,
}

impl PerturbationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PerturbationKind::TextTransposition => "text_transposition",
            PerturbationKind::FeatureTransposition => "feature_transposition",
            PerturbationKind::PositionManipulation => "position_manipulation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub gamma: f64,
    pub l_max: usize,
    pub seed: u64,
    /// Feature transposition only: move keys without their values.
    #[serde(default)]
    pub keys_only: bool,
}

impl PerturbationSpec {
    pub fn new(kind: PerturbationKind, gamma: f64, l_max: usize, seed: u64) -> Self {
        Self {
            kind,
            gamma,
            l_max,
            seed,
            keys_only: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::param("gamma", format!("must lie in [0, 1] (got {})", self.gamma)));
        }
        if self.l_max == 0 {
            return Err(Error::param("l_max", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbed {
    pub record: HeadRecord,
    /// Position index of every key.
    pub positions: Vec<i64>,
    /// Swapped index pairs `(lo, hi)` in sampling order (pair kinds only).
    pub pairs: Vec<(usize, usize)>,
    /// Indices whose position was offset (position manipulation only).
    pub moved: Vec<usize>,
    /// Number of pairs or indices the spec asked for.
    pub target: usize,
    pub collision_count: usize,
    /// True when `γ·n` rounds down to nothing.
    pub identity: bool,
}

struct Stream(ChaCha8Rng);

impl Stream {
    fn new(seed: u64) -> Self {
        Stream(ChaCha8Rng::seed_from_u64(seed))
    }

    fn uniform_below(&mut self, m: usize) -> usize {
        ((self.0.next_u64() as u128 * m as u128) >> 64) as usize
    }

    fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.uniform_below(i + 1);
            p.swap(i, j);
        }
        p
    }
}

fn sample_pairs(stream: &mut Stream, n: usize, target: usize, l_max: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(target);
    if target == 0 {
        return pairs;
    }
    let mut used = vec![false; n];
    for a in stream.permutation(n) {
        if pairs.len() == target {
            break;
        }
        if used[a] {
            continue;
        }
        let lo = a.saturating_sub(l_max);
        let hi = (a + l_max).min(n - 1);
        let candidates: Vec<usize> = (lo..=hi).filter(|&c| c != a && !used[c]).collect();
        if candidates.is_empty() {
            continue;
        }
        let c = candidates[stream.uniform_below(candidates.len())];
        used[a] = true;
        used[c] = true;
        pairs.push((a.min(c), a.max(c)));
    }
    pairs
}

pub fn apply_perturbation(record: &HeadRecord, spec: &PerturbationSpec) -> Result<Perturbed> {
    spec.validate()?;
    let n = record.n();
    let mut stream = Stream::new(spec.seed);
    let mut out = record.clone();
    let mut positions: Vec<i64> = (0..n as i64).collect();
    let mut pairs = Vec::new();
    let mut moved = Vec::new();
    let mut collision_count = 0;
    let target = match spec.kind {
        PerturbationKind::TextTransposition | PerturbationKind::FeatureTransposition => {
            let target = (spec.gamma * n as f64 / 2.0).floor() as usize;
            pairs = sample_pairs(&mut stream, n, target, spec.l_max);
            for &(a, b) in &pairs {
                if spec.kind == PerturbationKind::TextTransposition {
                    out.q.swap_rows(a, b);
                    out.k.swap_rows(a, b);
                    out.v.swap_rows(a, b);
                } else {
                    out.k.swap_rows(a, b);
                    if !spec.keys_only {
                        out.v.swap_rows(a, b);
                    }
                }
            }
            target
        }
        PerturbationKind::PositionManipulation => {
            let target = (spec.gamma * n as f64).floor() as usize;
            if target > 0 {
                let perm = stream.permutation(n);
                let l = spec.l_max as i64;
                for &idx in &perm[..target] {
                    let u = stream.uniform_below(2 * spec.l_max) as i64;
                    let offset = if u < l { u - l } else { u - l + 1 };
                    let shifted = (idx as i64 + offset).clamp(0, n as i64 - 1);
                    if shifted == idx as i64 {
                        collision_count += 1;
                    }
                    positions[idx] = shifted;
                    moved.push(idx);
                }
            }
            target
        }
    };
    if target == 0 {
        log::debug!("γ·n rounds to zero for {:?}; perturbation is the identity", spec.kind);
    }
    Ok(Perturbed {
        record: out,
        positions,
        pairs,
        moved,
        target,
        collision_count,
        identity: target == 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub spec: PerturbationSpec,
    pub n: usize,
    pub cos: Vec<f64>,
    pub l2: Vec<f64>,
    pub mean_cos: f64,
    pub min_cos: f64,
    pub mean_l2: f64,
    pub max_l2: f64,
    pub identity: bool,
    pub collision_count: usize,
}

impl Report for DriftReport {
    fn csv_table(&self) -> Option<CsvTable> {
        let mut t = CsvTable::new(["position", "cos", "l2"]);
        for (i, (c, l)) in self.cos.iter().zip(&self.l2).enumerate() {
            t.push(vec![i.to_string(), c.to_string(), l.to_string()]);
        }
        Some(t)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 1.0;
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn drift_against(baseline: &Matrix, record: &HeadRecord, spec: &PerturbationSpec, config: &RopeConfig) -> Result<DriftReport> {
    let p = apply_perturbation(record, spec)?;
    let perturbed = attention_outputs_with_positions(&p.record, config, &p.positions)?;
    let n = record.n();
    let cos: Vec<f64> = (0..n).map(|i| cosine(baseline.row(i), perturbed.row(i))).collect();
    let dist: Vec<f64> = (0..n).map(|i| l2(baseline.row(i), perturbed.row(i))).collect();
    Ok(DriftReport {
        spec: *spec,
        n,
        mean_cos: cos.iter().sum::<f64>() / n as f64,
        min_cos: cos.iter().copied().fold(f64::INFINITY, f64::min),
        mean_l2: dist.iter().sum::<f64>() / n as f64,
        max_l2: dist.iter().copied().fold(0.0, f64::max),
        cos,
        l2: dist,
        identity: p.identity,
        collision_count: p.collision_count,
    })
}

pub fn output_drift(record: &HeadRecord, spec: &PerturbationSpec, config: &RopeConfig) -> Result<DriftReport> {
    let baseline = attention_outputs(record, config)?;
    drift_against(&baseline, record, spec, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub gamma: f64,
    pub l_max: usize,
    pub seed_count: usize,
    pub mean_cos: f64,
    pub min_cos: f64,
    pub mean_l2: f64,
    pub max_l2: f64,
    pub collision_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftGrid {
    pub kind: PerturbationKind,
    pub keys_only: bool,
    pub gammas: Vec<f64>,
    pub l_maxes: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Row-major over `(l_max, gamma)`.
    pub cells: Vec<GridCell>,
}

impl DriftGrid {
    pub fn cell(&self, l_max_idx: usize, gamma_idx: usize) -> &GridCell {
        &self.cells[l_max_idx * self.gammas.len() + gamma_idx]
    }
}

impl Report for DriftGrid {
    fn csv_table(&self) -> Option<CsvTable> {
        let mut t = CsvTable::new([
            "kind",
            "gamma",
            "l_max",
            "seed_count",
            "mean_cos",
            "min_cos",
            "mean_l2",
            "max_l2",
            "collision_count",
        ]);
        for c in &self.cells {
            t.push(vec![
                self.kind.as_str().to_string(),
                c.gamma.to_string(),
                c.l_max.to_string(),
                c.seed_count.to_string(),
                c.mean_cos.to_string(),
                c.min_cos.to_string(),
                c.mean_l2.to_string(),
                c.max_l2.to_string(),
                c.collision_count.to_string(),
            ]);
        }
        Some(t)
    }
}

/// Seed-averaged drift over a `(γ, l_max)` grid. Each aggregate is the mean of
/// the per-seed aggregate; collisions are summed.
pub fn drift_grid(
    record: &HeadRecord,
    kind: PerturbationKind,
    gammas: &[f64],
    l_maxes: &[usize],
    seeds: &[u64],
    keys_only: bool,
    config: &RopeConfig,
) -> Result<DriftGrid> {
    if gammas.is_empty() || l_maxes.is_empty() || seeds.is_empty() {
        return Err(Error::param("grid", "gamma, l_max and seed axes must be nonempty"));
    }
    let baseline = attention_outputs(record, config)?;
    let jobs: Vec<(f64, usize)> = l_maxes
        .iter()
        .flat_map(|&l| gammas.iter().map(move |&g| (g, l)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(gamma, l_max)| {
            let reports = seeds
                .iter()
                .map(|&seed| {
                    let spec = PerturbationSpec {
                        kind,
                        gamma,
                        l_max,
                        seed,
                        keys_only,
                    };
                    drift_against(&baseline, record, &spec, config)
                })
                .collect::<Result<Vec<_>>>()?;
            let k = reports.len() as f64;
            Ok(GridCell {
                gamma,
                l_max,
                seed_count: reports.len(),
                mean_cos: reports.iter().map(|r| r.mean_cos).sum::<f64>() / k,
                min_cos: reports.iter().map(|r| r.min_cos).sum::<f64>() / k,
                mean_l2: reports.iter().map(|r| r.mean_l2).sum::<f64>() / k,
                max_l2: reports.iter().map(|r| r.max_l2).sum::<f64>() / k,
                collision_count: reports.iter().map(|r| r.collision_count).sum(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DriftGrid {
        kind,
        keys_only,
        gammas: gammas.to_vec(),
        l_maxes: l_maxes.to_vec(),
        seeds: seeds.to_vec(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope::logit;
    use crate::tensor_io::{generate_synthetic, SyntheticSpec};

    fn rec(n: usize, seed: u64) -> HeadRecord {
        generate_synthetic(&SyntheticSpec::new(n, 8, [3], 4.0, 0.2, seed)).unwrap()
    }

    fn cfg(r: &HeadRecord) -> RopeConfig {
        RopeConfig::from_manifest(&r.manifest).unwrap()
    }

    #[test]
    fn zero_gamma_is_identity() {
        let r = rec(10, 1);
        for kind in [
            PerturbationKind::TextTransposition,
            PerturbationKind::FeatureTransposition,
            PerturbationKind::PositionManipulation,
        ] {
            let p = apply_perturbation(&r, &PerturbationSpec::new(kind, 0.0, 3, 9)).unwrap();
            assert!(p.identity);
            assert_eq!(p.record, r);
            assert_eq!(p.positions, (0..10).collect::<Vec<i64>>());
            let d = output_drift(&r, &PerturbationSpec::new(kind, 0.0, 3, 9), &cfg(&r)).unwrap();
            assert_eq!(d.mean_cos, 1.0);
            assert_eq!(d.max_l2, 0.0);
        }
    }

    #[test]
    fn four_tokens_half_gamma_swaps_one_adjacent_pair() {
        let r = rec(4, 2);
        let spec = PerturbationSpec::new(PerturbationKind::TextTransposition, 0.5, 1, 42);
        let p = apply_perturbation(&r, &spec).unwrap();
        // replay the documented protocol
        let mut s = Stream::new(42);
        let perm = s.permutation(4);
        let a = perm[0];
        let cands: Vec<usize> = [a.wrapping_sub(1), a + 1].into_iter().filter(|&c| c < 4).collect();
        let c = cands[s.uniform_below(cands.len())];
        assert_eq!(p.pairs, vec![(a.min(c), a.max(c))]);
        let (lo, hi) = p.pairs[0];
        assert_eq!(hi - lo, 1);
        assert_eq!(p.record.q.row(lo), r.q.row(hi));
        assert_eq!(p.record.v.row(hi), r.v.row(lo));
    }

    #[test]
    fn position_offsets_are_unit_for_l_max_one() {
        let r = rec(50, 3);
        let spec = PerturbationSpec::new(PerturbationKind::PositionManipulation, 0.5, 1, 5);
        let p = apply_perturbation(&r, &spec).unwrap();
        assert_eq!(p.moved.len(), 25);
        let mut unchanged = 0;
        for (i, &pos) in p.positions.iter().enumerate() {
            let diff = (pos - i as i64).abs();
            if p.moved.contains(&i) {
                if diff == 0 {
                    // only a clamp at the boundary can cancel the offset
                    assert!(i == 0 || i == 49);
                    unchanged += 1;
                } else {
                    assert_eq!(diff, 1);
                }
            } else {
                assert_eq!(diff, 0);
            }
        }
        assert_eq!(unchanged, p.collision_count);
        assert_eq!(p.record.k, r.k);
    }

    #[test]
    fn text_transposition_twice_restores() {
        let r = rec(40, 4);
        let spec = PerturbationSpec::new(PerturbationKind::TextTransposition, 0.4, 5, 77);
        let once = apply_perturbation(&r, &spec).unwrap();
        let twice = apply_perturbation(&once.record, &spec).unwrap();
        assert_eq!(twice.record, r);
        assert_ne!(once.record, r);
    }

    #[test]
    fn feature_transposition_keeps_queries() {
        let r = rec(20, 5);
        let mut spec = PerturbationSpec::new(PerturbationKind::FeatureTransposition, 0.5, 4, 1);
        let p = apply_perturbation(&r, &spec).unwrap();
        assert_eq!(p.record.q, r.q);
        assert_ne!(p.record.k, r.k);
        assert_ne!(p.record.v, r.v);
        spec.keys_only = true;
        let p = apply_perturbation(&r, &spec).unwrap();
        assert_eq!(p.record.v, r.v);
    }

    #[test]
    fn two_token_swap_by_hand() {
        let r = rec(2, 6);
        let c = cfg(&r);
        let spec = PerturbationSpec::new(PerturbationKind::TextTransposition, 1.0, 1, 0);
        let d = output_drift(&r, &spec, &c).unwrap();
        // after the swap token 1 sits at position 0 and token 0 at position 1
        let softmax2 = |q: &[f64], k0: &[f64], v0: &[f64], k1: &[f64], v1: &[f64]| {
            let l0 = logit(q, k0, 1, &c).unwrap();
            let l1 = logit(q, k1, 0, &c).unwrap();
            let m = l0.max(l1);
            let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
            (0..v0.len()).map(|t| (e0 * v0[t] + e1 * v1[t]) / (e0 + e1)).collect::<Vec<f64>>()
        };
        let base = softmax2(r.q.row(1), r.k.row(0), r.v.row(0), r.k.row(1), r.v.row(1));
        let pert = softmax2(r.q.row(0), r.k.row(1), r.v.row(1), r.k.row(0), r.v.row(0));
        let want = l2(&base, &pert);
        assert!((d.l2[1] - want).abs() < 1e-12);
        // position 0 now outputs v_1 instead of v_0
        assert!((d.l2[0] - l2(r.v.row(0), r.v.row(1))).abs() < 1e-12);
    }

    #[test]
    fn grid_is_deterministic_and_zero_at_gamma_zero() {
        let r = rec(30, 7);
        let c = cfg(&r);
        let g0 = drift_grid(&r, PerturbationKind::PositionManipulation, &[0.0], &[3], &[1], false, &c).unwrap();
        assert_eq!(g0.cells[0].mean_cos, 1.0);
        assert_eq!(g0.cells[0].max_l2, 0.0);
        let a = drift_grid(&r, PerturbationKind::TextTransposition, &[0.1, 0.5], &[1, 4], &[1, 2, 3], false, &c).unwrap();
        let b = drift_grid(&r, PerturbationKind::TextTransposition, &[0.1, 0.5], &[1, 4], &[1, 2, 3], false, &c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cell(1, 0).l_max, 4);
        assert_eq!(a.cell(1, 0).gamma, 0.1);
    }

    #[test]
    fn invalid_specs_rejected() {
        let r = rec(4, 1);
        assert!(apply_perturbation(&r, &PerturbationSpec::new(PerturbationKind::TextTransposition, 1.5, 1, 0)).is_err());
        assert!(apply_perturbation(&r, &PerturbationSpec::new(PerturbationKind::TextTransposition, 0.5, 0, 0)).is_err());
    }
}
