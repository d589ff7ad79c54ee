//! Seeded synthetic q/k/v populations with planted slow-dominating tuples.
//!
//! Construction, per tuple `r` in ascending order:
//! - slow tuples get a mean key direction drawn uniformly on the circle and a
//!   mean query direction offset from it by `π + θ_δ`, `θ_δ ~ U[-π/8, π/8]`.
//!   Both means have norm `slow_norm_ratio`. Per-token Gaussian deviations are
//!   centered over the tokens and rescaled so the largest has norm
//!   `deviation_ratio * slow_norm_ratio`; the empirical mean is therefore the
//!   planted mean.
//! - other tuples draw a uniform direction and a norm in `[0.5, 1)` per token,
//!   independently for queries and keys.
//!
//! Values are i.i.d. standard normal with `value_dim = d`. The random stream
//! does not depend on `slow_norm_ratio` or `deviation_ratio`, so sweeps over
//! those fields with a fixed seed only rescale the planted structure.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::{HeadManifest, HeadRecord};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    pub rope_base: f64,
    pub pretrain_length: usize,
    pub slow_indices: BTreeSet<usize>,
    pub slow_norm_ratio: f64,
    pub deviation_ratio: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Spec with `rope_base = 10000` and `pretrain_length = 4096`.
    pub fn new(
        n: usize,
        d: usize,
        slow_indices: impl IntoIterator<Item = usize>,
        slow_norm_ratio: f64,
        deviation_ratio: f64,
        seed: u64,
    ) -> Self {
        Self {
            n,
            d,
            rope_base: 10000.0,
            pretrain_length: 4096,
            slow_indices: slow_indices.into_iter().collect(),
            slow_norm_ratio,
            deviation_ratio,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::param("n", "sequence length must be at least 1"));
        }
        if self.d == 0 || !self.d.is_multiple_of(2) {
            return Err(Error::param("d", format!("head_dim must be even and positive (got {})", self.d)));
        }
        if let Some(&r) = self.slow_indices.iter().find(|&&r| r >= self.d / 2) {
            return Err(Error::param("slow_indices", format!("tuple index {r} exceeds d/2 - 1 = {}", self.d / 2 - 1)));
        }
        if !(self.slow_norm_ratio >= 1.0 && self.slow_norm_ratio.is_finite()) {
            return Err(Error::param("slow_norm_ratio", format!("must be a finite real >= 1 (got {})", self.slow_norm_ratio)));
        }
        if !(0.0..1.0).contains(&self.deviation_ratio) {
            return Err(Error::param("deviation_ratio", format!("must lie in [0, 1) (got {})", self.deviation_ratio)));
        }
        if !(self.rope_base > 1.0 && self.rope_base.is_finite()) {
            return Err(Error::param("rope_base", "must be a finite real > 1"));
        }
        if self.pretrain_length == 0 {
            return Err(Error::param("pretrain_length", "must be at least 1"));
        }
        Ok(())
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<HeadRecord> {
    spec.validate()?;
    if spec.slow_indices.is_empty() {
        log::warn!("synthetic spec has no slow tuples; generating an isotropic population");
    }
    let (n, d) = (spec.n, spec.d);
    let manifest = HeadManifest::new("synthetic", d, d, spec.rope_base, spec.pretrain_length);
    let layout = manifest.rope_layout;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut q = Matrix::zeros(n, d);
    let mut k = Matrix::zeros(n, d);

    for r in 0..d / 2 {
        let (c0, c1) = layout.pair(r, d);
        if spec.slow_indices.contains(&r) {
            let key_angle = rng.random::<f64>() * 2.0 * PI;
            let delta = (rng.random::<f64>() * 2.0 - 1.0) * PI / 8.0;
            let query_angle = key_angle + PI + delta;
            let spread = spec.deviation_ratio * spec.slow_norm_ratio;
            let key_dev = centered_deviations(&mut rng, n, spread);
            let query_dev = centered_deviations(&mut rng, n, spread);
            for t in 0..n {
                let (kx, ky) = polar(spec.slow_norm_ratio, key_angle);
                k.set(t, c0, kx + key_dev[t].0);
                k.set(t, c1, ky + key_dev[t].1);
                let (qx, qy) = polar(spec.slow_norm_ratio, query_angle);
                q.set(t, c0, qx + query_dev[t].0);
                q.set(t, c1, qy + query_dev[t].1);
            }
        } else {
            for t in 0..n {
                let (kx, ky) = random_unit_scale(&mut rng);
                k.set(t, c0, kx);
                k.set(t, c1, ky);
                let (qx, qy) = random_unit_scale(&mut rng);
                q.set(t, c0, qx);
                q.set(t, c1, qy);
            }
        }
    }

    let v = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect());
    HeadRecord::new(q, k, v, manifest)
}

fn polar(radius: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (radius * c, radius * s)
}

fn random_unit_scale(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let angle = rng.random::<f64>() * 2.0 * PI;
    let radius = 0.5 + 0.5 * rng.random::<f64>();
    polar(radius, angle)
}

/// `n` zero-mean 2-D deviations whose largest norm equals `max_norm`.
fn centered_deviations(rng: &mut ChaCha8Rng, n: usize, max_norm: f64) -> Vec<(f64, f64)> {
    let mut devs: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect();
    let (mx, my) = devs
        .iter()
        .fold((0.0, 0.0), |(ax, ay), &(x, y)| (ax + x, ay + y));
    let (mx, my) = (mx / n as f64, my / n as f64);
    for p in devs.iter_mut() {
        *p = (p.0 - mx, p.1 - my);
    }
    let largest = devs.iter().map(|&(x, y)| x.hypot(y)).fold(0.0, f64::max);
    let scale = if largest > 0.0 { max_norm / largest } else { 0.0 };
    for p in devs.iter_mut() {
        *p = (p.0 * scale, p.1 * scale);
    }
    devs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tuple(m: &Matrix, t: usize, r: usize, d: usize) -> (f64, f64) {
        (m.get(t, r), m.get(t, r + d / 2))
    }

    fn mean_norm_of_mean(m: &Matrix, r: usize, d: usize) -> f64 {
        let n = m.rows() as f64;
        let (sx, sy) = (0..m.rows()).fold((0.0, 0.0), |(ax, ay), t| {
            let (x, y) = tuple(m, t, r, d);
            (ax + x, ay + y)
        });
        (sx / n).hypot(sy / n)
    }

    #[test]
    fn planted_tuple_dominates_by_ratio() {
        let spec = SyntheticSpec::new(64, 64, [30, 31], 50.0, 0.02, 7);
        let rec = generate_synthetic(&spec).unwrap();
        let slow = mean_norm_of_mean(&rec.k, 30, 64);
        let fast = mean_norm_of_mean(&rec.k, 0, 64);
        assert!(slow >= 50.0 * fast, "{slow} vs {fast}");
        // against every individual non-slow key tuple norm
        for t in 0..64 {
            for r in 0..30 {
                let (x, y) = tuple(&rec.k, t, r, 64);
                assert!(slow >= 50.0 * x.hypot(y) * (1.0 - 1e-12));
            }
        }
        // per-token deviation bound
        for t in 0..64 {
            let (x, y) = tuple(&rec.k, t, 30, 64);
            let n = 64.0;
            let (mx, my) = (0..64).fold((0.0, 0.0), |(a, b), s| {
                let (x, y) = tuple(&rec.k, s, 30, 64);
                (a + x / n, b + y / n)
            });
            assert!((x - mx).hypot(y - my) <= 0.02 * slow * (1.0 + 1e-9));
        }
    }

    #[test]
    fn zero_deviation_gives_identical_slow_keys() {
        let spec = SyntheticSpec::new(16, 8, [3], 10.0, 0.0, 1);
        let rec = generate_synthetic(&spec).unwrap();
        let first = tuple(&rec.k, 0, 3, 8);
        for t in 1..16 {
            assert_eq!(tuple(&rec.k, t, 3, 8), first);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = SyntheticSpec::new(32, 16, [7], 20.0, 0.1, 99);
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticSpec { seed: 100, ..spec }).unwrap();
        assert_ne!(a.k, c.k);
    }

    #[test]
    fn rejects_invalid_specs() {
        let base = SyntheticSpec::new(8, 8, [1], 2.0, 0.1, 0);
        assert!(generate_synthetic(&SyntheticSpec { slow_norm_ratio: 0.5, ..base.clone() }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { deviation_ratio: 1.0, ..base.clone() }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { d: 7, ..base.clone() }).is_err());
        let mut bad = base.clone();
        bad.slow_indices.insert(4);
        assert!(generate_synthetic(&bad).is_err());
        // empty slow set still generates
        let mut empty = base;
        empty.slow_indices.clear();
        assert!(generate_synthetic(&empty).is_ok());
    }

    #[test]
    fn single_token_has_no_deviation() {
        let rec = generate_synthetic(&SyntheticSpec::new(1, 4, [1], 5.0, 0.5, 3)).unwrap();
        let (x, y) = tuple(&rec.k, 0, 1, 4);
        assert!((x.hypot(y) - 5.0).abs() < 1e-12);
    }
}
