//! Class-K∞ comparison functions.
//!
//! Every certificate and quantization inequality in the crate is written in
//! terms of [`KFn`]. The representation is deliberately small: linear and
//! power leaves closed under composition and pointwise sums. That keeps
//! inverses either closed-form or a well-behaved monotone bisection, and the
//! functions serialize as plain tagged objects such as
//! `{"kind":"linear","c":0.3}`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::real;

/// Relative tolerance used by [`KFn::inverse`] when callers do not care.
pub const DEFAULT_INVERSE_TOL: f64 = 1e-12;

const BISECTION_MAX_ITER: usize = 200;
const BRACKET_MAX_DOUBLINGS: usize = 2048;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KfnError {
    #[error("comparison function evaluated at negative argument {0}")]
    NegativeArgument(f64),
    #[error("inverse requested for negative value {0}")]
    NegativeValue(f64),
    #[error("inverse did not converge for y = {y}: residual {residual:e} after {iterations} iterations")]
    NoConvergence {
        y: f64,
        residual: f64,
        iterations: usize,
    },
    #[error("function {f} is not invertible (zero slope)")]
    NotInvertible { f: String },
    #[error("contraction violated: kappa({r}) = {value} is not below {r}")]
    NotContraction { r: f64, value: f64 },
    #[error("malformed comparison function: {0}")]
    Malformed(String),
}

/// A map `[0, ∞) → [0, ∞)` built from linear and power leaves.
///
/// `Linear { c: 0.0 }` is admitted as the zero gain (a decoupled subsystem
/// has `ρ_w = 0`); it is not class-K∞ and [`KFn::is_class_k_inf`] says so.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KFn {
    Linear {
        #[serde(deserialize_with = "real")]
        c: f64,
    },
    Power {
        #[serde(deserialize_with = "real")]
        c: f64,
        #[serde(deserialize_with = "real")]
        p: f64,
    },
    Composition {
        outer: Box<KFn>,
        inner: Box<KFn>,
    },
    Sum {
        left: Box<KFn>,
        right: Box<KFn>,
    },
}

impl KFn {
    pub fn linear(c: f64) -> Self {
        KFn::Linear { c }
    }

    pub fn identity() -> Self {
        KFn::Linear { c: 1.0 }
    }

    pub fn power(c: f64, p: f64) -> Self {
        KFn::Power { c, p }
    }

    /// `outer ∘ inner`.
    pub fn compose(outer: KFn, inner: KFn) -> Self {
        KFn::Composition {
            outer: Box::new(outer),
            inner: Box::new(inner),
        }
    }

    pub fn sum(left: KFn, right: KFn) -> Self {
        KFn::Sum {
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    /// Structural well-formedness: finite, non-negative coefficients and
    /// positive exponents.
    pub fn validate(&self) -> Result<(), KfnError> {
        match self {
            KFn::Linear { c } => {
                if !c.is_finite() || *c < 0.0 {
                    return Err(KfnError::Malformed(format!("linear slope {c}")));
                }
                Ok(())
            }
            KFn::Power { c, p } => {
                if !c.is_finite() || *c <= 0.0 {
                    return Err(KfnError::Malformed(format!("power coefficient {c}")));
                }
                if !p.is_finite() || *p <= 0.0 {
                    return Err(KfnError::Malformed(format!("power exponent {p}")));
                }
                Ok(())
            }
            KFn::Composition { outer, inner } => {
                outer.validate()?;
                inner.validate()
            }
            KFn::Sum { left, right } => {
                left.validate()?;
                right.validate()
            }
        }
    }

    /// True when every leaf is strictly increasing and unbounded.
    pub fn is_class_k_inf(&self) -> bool {
        match self {
            KFn::Linear { c } => c.is_finite() && *c > 0.0,
            KFn::Power { c, p } => c.is_finite() && p.is_finite() && *c > 0.0 && *p > 0.0,
            KFn::Composition { outer, inner } => outer.is_class_k_inf() && inner.is_class_k_inf(),
            // a sum stays K∞ as long as one summand is; the other only has to be monotone
            KFn::Sum { left, right } => {
                left.validate().is_ok()
                    && right.validate().is_ok()
                    && (left.is_class_k_inf() || right.is_class_k_inf())
            }
        }
    }

    pub fn eval(&self, r: f64) -> Result<f64, KfnError> {
        if r < 0.0 || r.is_nan() {
            return Err(KfnError::NegativeArgument(r));
        }
        Ok(self.apply(r))
    }

    /// Evaluation without the domain check; `r` must be non-negative.
    pub(crate) fn apply(&self, r: f64) -> f64 {
        match self {
            KFn::Linear { c } => c * r,
            KFn::Power { c, p } => c * r.powf(*p),
            KFn::Composition { outer, inner } => outer.apply(inner.apply(r)),
            KFn::Sum { left, right } => left.apply(r) + right.apply(r),
        }
    }

    /// Returns `r` with `|f(r) - y| <= tol * max(1, y)`.
    ///
    /// Linear and power leaves and their compositions invert in closed form;
    /// nonlinear sums use bisection on a bracket `[0, max(1, y)]` that is doubled until it
    /// contains the preimage.
    pub fn inverse(&self, y: f64, tol: f64) -> Result<f64, KfnError> {
        if y < 0.0 || y.is_nan() {
            return Err(KfnError::NegativeValue(y));
        }
        if y == 0.0 {
            return Ok(0.0);
        }
        match self {
            KFn::Linear { c } => {
                if *c <= 0.0 {
                    return Err(KfnError::NotInvertible { f: self.to_string() });
                }
                Ok(y / c)
            }
            KFn::Power { c, p } => Ok((y / c).powf(1.0 / p)),
            KFn::Composition { outer, inner } => {
                // exact when both parts are; a bisected inner part can miss by
                // more than `tol` once the outer map amplifies it
                let r = inner.inverse(outer.inverse(y, tol)?, tol)?;
                if (self.apply(r) - y).abs() <= tol * y.max(1.0) {
                    Ok(r)
                } else {
                    self.bisect(y, tol)
                }
            }
            KFn::Sum { .. } => match self.linear_slope() {
                Some(s) if s > 0.0 => Ok(y / s),
                _ => self.bisect(y, tol),
            },
        }
    }

    fn bisect(&self, y: f64, tol: f64) -> Result<f64, KfnError> {
        let accept = tol * y.max(1.0);
        let mut lo = 0.0_f64;
        let mut hi = y.max(1.0);
        let mut doublings = 0;
        while self.apply(hi) < y {
            lo = hi;
            hi *= 2.0;
            doublings += 1;
            if doublings > BRACKET_MAX_DOUBLINGS || !hi.is_finite() {
                return Err(KfnError::NoConvergence {
                    y,
                    residual: (self.apply(lo) - y).abs(),
                    iterations: doublings,
                });
            }
        }
        let mut mid = 0.5 * (lo + hi);
        for _ in 0..BISECTION_MAX_ITER {
            mid = 0.5 * (lo + hi);
            let fm = self.apply(mid);
            if (fm - y).abs() <= accept {
                return Ok(mid);
            }
            if fm < y {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * hi {
                break;
            }
        }
        let residual = (self.apply(mid) - y).abs();
        if residual <= accept {
            Ok(mid)
        } else {
            Err(KfnError::NoConvergence {
                y,
                residual,
                iterations: BISECTION_MAX_ITER,
            })
        }
    }

    /// Symbolic inverse for the leaves that have one.
    pub fn inverse_fn(&self) -> Option<KFn> {
        match self {
            KFn::Linear { c } if *c > 0.0 => Some(KFn::Linear { c: 1.0 / c }),
            KFn::Power { c, p } => Some(KFn::Power {
                c: c.powf(-1.0 / p),
                p: 1.0 / p,
            }),
            KFn::Composition { outer, inner } => {
                Some(KFn::compose(inner.inverse_fn()?, outer.inverse_fn()?))
            }
            _ => None,
        }
    }

    /// Slope when the function is linear (possibly after composition/sums).
    pub fn linear_slope(&self) -> Option<f64> {
        match self {
            KFn::Linear { c } => Some(*c),
            KFn::Power { c, p } if *p == 1.0 => Some(*c),
            KFn::Power { .. } => None,
            KFn::Composition { outer, inner } => Some(outer.linear_slope()? * inner.linear_slope()?),
            KFn::Sum { left, right } => Some(left.linear_slope()? + right.linear_slope()?),
        }
    }

    /// `(I - κ)(r)`; fails when `κ(r) >= r` for `r > 0`.
    pub fn one_minus(&self, r: f64) -> Result<f64, KfnError> {
        let k = self.eval(r)?;
        if r == 0.0 {
            return Ok(0.0);
        }
        if k >= r {
            return Err(KfnError::NotContraction { r, value: k });
        }
        Ok(r - k)
    }
}

impl fmt::Display for KFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KFn::Linear { c } => write!(f, "{c}·r"),
            KFn::Power { c, p } => write!(f, "{c}·r^{p}"),
            KFn::Composition { outer, inner } => write!(f, "({outer})∘({inner})"),
            KFn::Sum { left, right } => write!(f, "({left})+({right})"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn eval_examples() {
        assert!(close(KFn::linear(0.3).eval(0.8).unwrap(), 0.24, 1e-15));
        assert_eq!(KFn::identity().eval(7.3).unwrap(), 7.3);
        assert_eq!(KFn::power(2.0, 0.5).eval(4.0).unwrap(), 4.0);
    }

    #[test]
    fn eval_rejects_negative() {
        assert_eq!(
            KFn::linear(1.0).eval(-0.1),
            Err(KfnError::NegativeArgument(-0.1))
        );
    }

    #[test]
    fn inverse_examples() {
        assert!(close(KFn::linear(0.5).inverse(0.4, 1e-12).unwrap(), 0.8, 1e-15));
        assert_eq!(KFn::identity().inverse(0.8, 1e-12).unwrap(), 0.8);
    }

    #[test]
    fn inverse_of_sum_matches_bisection_oracle() {
        // independent oracle: plain bisection on r + r^3 - 2 over [0, 2]
        let g = |r: f64| r + r * r * r - 2.0;
        let (mut lo, mut hi) = (0.0_f64, 2.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let oracle = 0.5 * (lo + hi);
        assert!(close(oracle, 1.0, 1e-12));

        let f = KFn::sum(KFn::identity(), KFn::power(1.0, 3.0));
        let r = f.inverse(2.0, DEFAULT_INVERSE_TOL).unwrap();
        assert!(close(r, oracle, 1e-11), "r = {r}");
    }

    #[test]
    fn inverse_of_zero_is_exactly_zero() {
        let f = KFn::compose(KFn::power(3.0, 2.0), KFn::sum(KFn::linear(2.0), KFn::power(1.0, 0.5)));
        assert_eq!(f.inverse(0.0, 1e-12).unwrap(), 0.0);
        assert_eq!(KFn::linear(0.5).inverse(0.0, 1e-12).unwrap(), 0.0);
    }

    #[test]
    fn inverse_rejects_negative_and_zero_slope() {
        assert!(matches!(
            KFn::linear(1.0).inverse(-1.0, 1e-12),
            Err(KfnError::NegativeValue(_))
        ));
        assert!(matches!(
            KFn::linear(0.0).inverse(1.0, 1e-12),
            Err(KfnError::NotInvertible { .. })
        ));
    }

    #[test]
    fn one_minus_examples() {
        assert!(close(KFn::linear(0.56667).one_minus(0.8).unwrap(), 0.346664, 1e-12));
        assert_eq!(KFn::linear(0.0).one_minus(1.0).unwrap(), 1.0);
        assert!(matches!(
            KFn::linear(1.2).one_minus(1.0),
            Err(KfnError::NotContraction { .. })
        ));
    }

    #[test]
    fn serde_tagged_form() {
        let f: KFn = serde_json::from_str(r#"{"kind":"linear","c":0.3}"#).unwrap();
        assert_eq!(f, KFn::linear(0.3));
        let g: KFn = serde_json::from_str(
            r#"{"kind":"composition","outer":{"kind":"power","c":"2","p":0.5},"inner":{"kind":"linear","c":"1/4"}}"#,
        )
        .unwrap();
        assert_eq!(g.eval(16.0).unwrap(), 4.0);
        let text = serde_json::to_string(&g).unwrap();
        assert_eq!(serde_json::from_str::<KFn>(&text).unwrap(), g);
    }

    #[test]
    fn linear_slope_through_composition() {
        let f = KFn::compose(KFn::linear(2.0), KFn::sum(KFn::linear(0.25), KFn::linear(0.5)));
        assert_eq!(f.linear_slope(), Some(1.5));
        assert_eq!(KFn::power(1.0, 2.0).linear_slope(), None);
    }

    #[test]
    fn symbolic_inverse_round_trips() {
        let f = KFn::compose(KFn::linear(3.0), KFn::power(2.0, 2.0));
        let inv = f.inverse_fn().unwrap();
        for r in [0.1, 1.0, 7.5] {
            assert!(close(inv.eval(f.eval(r).unwrap()).unwrap(), r, 1e-12));
        }
    }

    fn leaf() -> impl Strategy<Value = KFn> {
        prop_oneof![
            (0.01f64..50.0).prop_map(KFn::linear),
            (0.01f64..10.0, 0.2f64..4.0).prop_map(|(c, p)| KFn::power(c, p)),
        ]
    }

    fn kfn() -> impl Strategy<Value = KFn> {
        leaf().prop_recursive(3, 8, 2, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone()).prop_map(|(a, b)| KFn::compose(a, b)),
                (inner.clone(), inner).prop_map(|(a, b)| KFn::sum(a, b)),
            ]
        })
    }

    proptest! {
        #[test]
        fn inverse_round_trip(f in kfn(), y in 0.0f64..1e6) {
            let tol = DEFAULT_INVERSE_TOL;
            match f.inverse(y, tol) {
                Ok(r) => {
                    let back = f.eval(r).unwrap();
                    prop_assert!((back - y).abs() <= tol * y.max(1.0) * 1.0001,
                        "f = {f}, y = {y}, r = {r}, f(r) = {back}");
                }
                // extremely flat compositions can underflow the bracket; never silently wrong
                Err(KfnError::NoConvergence { residual, .. }) => prop_assert!(residual > tol * y.max(1.0)),
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }

        #[test]
        fn strictly_increasing(f in kfn(), pairs in proptest::collection::vec((0.0f64..100.0, 1e-3f64..100.0), 1000)) {
            prop_assert!(f.is_class_k_inf());
            prop_assert_eq!(f.eval(0.0).unwrap(), 0.0);
            for (r1, gap) in pairs {
                let r2 = r1 + gap;
                prop_assert!(f.eval(r1).unwrap() < f.eval(r2).unwrap(), "f = {f}, r1 = {r1}, r2 = {r2}");
            }
        }
    }
}
