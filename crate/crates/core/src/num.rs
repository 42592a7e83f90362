//! Numeric helpers shared by config parsing and grid arithmetic.

use serde::de::{self, Deserializer, Visitor};
use std::fmt;

/// Parses a real from a JSON number or a string such as `"0.1"` or
/// `"10/3600"`.
pub fn parse_real(text: &str) -> Result<f64, String> {
    let t = text.trim();
    let value = match t.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|_| format!("bad numerator in {t:?}"))?;
            let d: f64 = d.trim().parse().map_err(|_| format!("bad denominator in {t:?}"))?;
            if d == 0.0 {
                return Err(format!("zero denominator in {t:?}"));
            }
            n / d
        }
        None => t.parse().map_err(|_| format!("not a number: {t:?}"))?,
    };
    if value.is_finite() {
        Ok(value)
    } else {
        Err(format!("non-finite number {t:?}"))
    }
}

struct RealVisitor;

impl<'de> Visitor<'de> for RealVisitor {
    type Value = f64;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a number or a decimal/rational string")
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
        Ok(v)
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
        Ok(v as f64)
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
        Ok(v as f64)
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
        parse_real(v).map_err(E::custom)
    }
}

pub fn real<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    d.deserialize_any(RealVisitor)
}

pub fn opt_real<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
    struct Wrap(f64);
    impl<'de> serde::Deserialize<'de> for Wrap {
        fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
            real(d).map(Wrap)
        }
    }
    Ok(<Option<Wrap> as serde::Deserialize>::deserialize(d)?.map(|w| w.0))
}

pub fn real_vec<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
    struct Wrap(f64);
    impl<'de> serde::Deserialize<'de> for Wrap {
        fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
            real(d).map(Wrap)
        }
    }
    Ok(<Vec<Wrap> as serde::Deserialize>::deserialize(d)?
        .into_iter()
        .map(|w| w.0)
        .collect())
}

/// When `1/eta` is (numerically) an integer `m`, returns `m`; grid values are
/// then produced as `k / m`, which is correctly rounded for decimal pitches
/// such as 0.1.
pub(crate) fn reciprocal_integer(eta: f64) -> Option<f64> {
    let inv = 1.0 / eta;
    let m = inv.round();
    if m >= 1.0 && (inv - m).abs() <= 1e-9 * m {
        Some(m)
    } else {
        None
    }
}

/// True when `x` is an integer multiple of `eta` up to a relative rounding guard.
pub(crate) fn is_multiple(x: f64, eta: f64) -> bool {
    let q = x / eta;
    (q - q.round()).abs() <= 1e-9 * q.abs().max(1.0)
}
