//! Small statistics helpers shared by the analysis modules.

use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Pearson correlation, or an explicit flag when either side has no variance.
///
/// Serializes as a JSON number or the string `"undefined"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Correlation {
    Defined(f64),
    Undefined,
}

impl Correlation {
    pub fn value(self) -> Option<f64> {
        match self {
            Correlation::Defined(v) => Some(v),
            Correlation::Undefined => None,
        }
    }

    pub fn is_defined(self) -> bool {
        matches!(self, Correlation::Defined(_))
    }
}

impl fmt::Display for Correlation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Correlation::Defined(v) => write!(f, "{v:.6}"),
            Correlation::Undefined => f.write_str("undefined"),
        }
    }
}

impl Serialize for Correlation {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Correlation::Defined(v) => s.serialize_f64(*v),
            Correlation::Undefined => s.serialize_str("undefined"),
        }
    }
}

impl<'de> Deserialize<'de> for Correlation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Correlation;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a number or \"undefined\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Correlation, E> {
                Ok(Correlation::Defined(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Correlation, E> {
                Ok(Correlation::Defined(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Correlation, E> {
                Ok(Correlation::Defined(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Correlation, E> {
                if v == "undefined" {
                    Ok(Correlation::Undefined)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// Pearson correlation of two equally long samples.
pub fn pearson(a: &[f64], b: &[f64]) -> Correlation {
    assert_eq!(a.len(), b.len(), "pearson needs equally long samples");
    let n = a.len();
    if n < 2 || no_variance(a) || no_variance(b) {
        return Correlation::Undefined;
    }
    let ma = mean(a);
    let mb = mean(b);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Correlation::Undefined;
    }
    Correlation::Defined((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// True when the sample is constant up to a few ulps of its magnitude.
fn no_variance(x: &[f64]) -> bool {
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let scale = lo.abs().max(hi.abs());
    hi - lo <= 8.0 * f64::EPSILON * scale
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Median (mean of the two central values for even lengths). `None` when empty.
pub fn median(x: &[f64]) -> Option<f64> {
    if x.is_empty() {
        return None;
    }
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Some(if s.len().is_multiple_of(2) { 0.5 * (s[m - 1] + s[m]) } else { s[m] })
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn correlation_basic_cases() {
        let w = [1.0, -2.0, 0.5, 3.0, 7.0];
        let neg: Vec<f64> = w.iter().map(|x| -x).collect();
        let aff: Vec<f64> = w.iter().map(|x| 2.0 * x + 7.0).collect();
        assert!((pearson(&w, &w).value().unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&w, &neg).value().unwrap() + 1.0).abs() < 1e-15);
        assert!((pearson(&w, &aff).value().unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(pearson(&w, &[0.1; 5]), Correlation::Undefined);
        assert_eq!(pearson(&[1.0], &[2.0]), Correlation::Undefined);
    }

    #[test]
    fn correlation_serde_forms() {
        assert_eq!(serde_json::to_string(&Correlation::Undefined).unwrap(), "\"undefined\"");
        assert_eq!(serde_json::to_string(&Correlation::Defined(0.5)).unwrap(), "0.5");
        let c: Correlation = serde_json::from_str("\"undefined\"").unwrap();
        assert_eq!(c, Correlation::Undefined);
        let c: Correlation = serde_json::from_str("1").unwrap();
        assert_eq!(c, Correlation::Defined(1.0));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
    }
}
