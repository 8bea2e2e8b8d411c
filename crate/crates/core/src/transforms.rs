//! Bijections between constrained parameter spaces and the unconstrained
//! space the Hamiltonian integrator moves in.
//!
//! * unit interval: `x = 1 / (1 + exp(-u))`
//! * positive reals: `x = exp(u)`
//! * `K`-simplex: stick-breaking with break proportions
//!   `z_k = logistic(u_k - ln(K - k))`, so `u = 0` maps to the uniform simplex.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("value {value} is outside the open {kind} domain")]
    Domain { kind: &'static str, value: f64 },
    #[error("simplex needs at least two components, got {0}")]
    SimplexTooShort(usize),
    #[error("simplex components sum to {0}, expected 1")]
    NotNormalized(f64),
}

/// Margin from the domain boundary below which `unconstrain` refuses a value.
pub const BOUNDARY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum ConstrainedValue<S> {
    UnitInterval(S),
    Positive(S),
    Simplex(Vec<S>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum UnconstrainedValue<S> {
    Scalar(S),
    /// Length `K - 1` for a `K`-simplex.
    Vector(Vec<S>),
}

/// Which constrained space a value lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    UnitInterval,
    Positive,
    Simplex,
}

/// Logistic map and its derivative `dx/du = x (1 - x)`.
#[inline]
pub fn logistic_constrain<S: Scalar>(u: S) -> (S, S) {
    let x = logistic(u);
    let one_minus = logistic(-u);
    (x, x * one_minus)
}

/// `1 / (1 + exp(-u))` without overflow for large `|u|`.
#[inline]
pub fn logistic<S: Scalar>(u: S) -> S {
    if u >= S::zero() {
        (S::one() + (-u).exp()).recip()
    } else {
        let e = u.exp();
        e / (S::one() + e)
    }
}

/// `ln(x (1 - x))` for `x = logistic(u)`; the log-Jacobian of the logistic map.
#[inline]
pub fn logistic_log_jacobian<S: Scalar>(u: S) -> S {
    let a = u.abs();
    -a - S::c(2.0) * (-a).exp().ln_1p()
}

#[inline]
pub fn logit<S: Scalar>(x: S) -> S {
    (x / (S::one() - x)).ln()
}

/// Exponential map and its derivative (both `exp(u)`).
#[inline]
pub fn exp_constrain<S: Scalar>(u: S) -> (S, S) {
    let x = u.exp();
    (x, x)
}

/// Result of pushing an unconstrained vector through stick-breaking; keeps
/// the intermediate break proportions so derivatives can be formed cheaply.
#[derive(Debug, Clone)]
pub struct StickBreaking<S> {
    /// Simplex of length `K`.
    pub simplex: Vec<S>,
    /// Break proportions `z_k`, length `K - 1`.
    pub breaks: Vec<S>,
    /// Stick remaining before each break, length `K - 1` (first entry is 1).
    pub remaining: Vec<S>,
}

/// Stick-breaking map from `R^(K-1)` onto the open `K`-simplex.
pub fn stickbreak_constrain<S: Scalar>(u: &[S]) -> StickBreaking<S> {
    let k_minus_1 = u.len();
    let mut simplex = Vec::with_capacity(k_minus_1 + 1);
    let mut breaks = Vec::with_capacity(k_minus_1);
    let mut remaining = Vec::with_capacity(k_minus_1);
    let mut rem = S::one();
    for (i, &ui) in u.iter().enumerate() {
        let offset = S::from_usize_lossy(k_minus_1 - i).ln();
        let z = logistic(ui - offset);
        remaining.push(rem);
        breaks.push(z);
        let x = rem * z;
        simplex.push(x);
        rem = rem * logistic(offset - ui);
    }
    simplex.push(rem);
    StickBreaking { simplex, breaks, remaining }
}

impl<S: Scalar> StickBreaking<S> {
    pub fn k(&self) -> usize {
        self.simplex.len()
    }

    /// `ln |det ∂x_{1..K-1} / ∂u|`.
    pub fn log_abs_det_jacobian(&self) -> S {
        self.breaks
            .iter()
            .zip(&self.remaining)
            .map(|(&z, &r)| z.ln() + (S::one() - z).ln() + r.ln())
            .sum()
    }

    /// Forward-mode product `J · tangent` where `J = ∂x / ∂u` is `K × (K-1)`.
    pub fn jvp(&self, tangent: &[S]) -> Vec<S> {
        assert_eq!(tangent.len(), self.breaks.len());
        let mut out = Vec::with_capacity(self.k());
        let mut d_rem = S::zero();
        for ((&z, &rem), &t) in self.breaks.iter().zip(&self.remaining).zip(tangent) {
            let dz = z * (S::one() - z) * t;
            let dx = d_rem * z + rem * dz;
            out.push(dx);
            d_rem -= dx;
        }
        out.push(d_rem);
        out
    }

    /// Reverse-mode product `Jᵀ · cotangent`: maps `∂f/∂x` to `∂f/∂u`.
    pub fn vjp(&self, cotangent: &[S]) -> Vec<S> {
        self.vjp_impl(cotangent, false)
    }

    /// `Jᵀ · cotangent + ∇_u ln|det J|`, the full gradient contribution of a
    /// simplex-valued parameter to a change-of-variables log density.
    pub fn vjp_with_log_jacobian(&self, cotangent: &[S]) -> Vec<S> {
        self.vjp_impl(cotangent, true)
    }

    fn vjp_impl(&self, g: &[S], with_jac: bool) -> Vec<S> {
        let km1 = self.breaks.len();
        assert_eq!(g.len(), km1 + 1);
        let mut out = vec![S::zero(); km1];
        // adjoint of the stick remaining after the last break
        let mut adj_rem = g[km1];
        for i in (0..km1).rev() {
            let z = self.breaks[i];
            let rem = self.remaining[i];
            let adj_z = rem * (g[i] - adj_rem);
            let mut du = adj_z * z * (S::one() - z);
            let mut next = g[i] * z + adj_rem * (S::one() - z);
            if with_jac {
                du += S::one() - S::c(2.0) * z;
                next += rem.recip();
            }
            out[i] = du;
            adj_rem = next;
        }
        out
    }
}

/// Inverse of [`stickbreak_constrain`].
pub fn stickbreak_unconstrain<S: Scalar>(x: &[S]) -> Result<Vec<S>, TransformError> {
    check_simplex(x)?;
    let km1 = x.len() - 1;
    let mut rem = S::one();
    let mut out = Vec::with_capacity(km1);
    for (i, &xi) in x.iter().take(km1).enumerate() {
        let z = xi / rem;
        out.push(logit(z) + S::from_usize_lossy(km1 - i).ln());
        rem -= xi;
    }
    Ok(out)
}

fn check_simplex<S: Scalar>(x: &[S]) -> Result<(), TransformError> {
    if x.len() < 2 {
        return Err(TransformError::SimplexTooShort(x.len()));
    }
    let eps = S::c(BOUNDARY_EPS);
    for &v in x {
        if !(v >= eps && v <= S::one() - eps) {
            return Err(TransformError::Domain { kind: "simplex", value: v.to_f64().unwrap_or(f64::NAN) });
        }
    }
    let sum: S = x.iter().copied().sum();
    if (sum - S::one()).abs() > S::c(1e-9) {
        return Err(TransformError::NotNormalized(sum.to_f64().unwrap_or(f64::NAN)));
    }
    Ok(())
}

/// Map a strictly interior constrained value to unconstrained space.
pub fn unconstrain<S: Scalar>(x: &ConstrainedValue<S>) -> Result<UnconstrainedValue<S>, TransformError> {
    let eps = S::c(BOUNDARY_EPS);
    match x {
        ConstrainedValue::UnitInterval(v) => {
            if !(*v >= eps && *v <= S::one() - eps) {
                return Err(TransformError::Domain { kind: "unit-interval", value: v.to_f64().unwrap_or(f64::NAN) });
            }
            Ok(UnconstrainedValue::Scalar(logit(*v)))
        }
        ConstrainedValue::Positive(v) => {
            if !(*v >= eps && v.is_finite()) {
                return Err(TransformError::Domain { kind: "positive", value: v.to_f64().unwrap_or(f64::NAN) });
            }
            Ok(UnconstrainedValue::Scalar(v.ln()))
        }
        ConstrainedValue::Simplex(v) => Ok(UnconstrainedValue::Vector(stickbreak_unconstrain(v)?)),
    }
}

/// Map an unconstrained value into the requested constrained space.
pub fn constrain<S: Scalar>(kind: ConstraintKind, u: &UnconstrainedValue<S>) -> ConstrainedValue<S> {
    match (kind, u) {
        (ConstraintKind::UnitInterval, UnconstrainedValue::Scalar(v)) => ConstrainedValue::UnitInterval(logistic(*v)),
        (ConstraintKind::Positive, UnconstrainedValue::Scalar(v)) => ConstrainedValue::Positive(v.exp()),
        (ConstraintKind::Simplex, UnconstrainedValue::Vector(v)) => {
            ConstrainedValue::Simplex(stickbreak_constrain(v).simplex)
        }
        (k, u) => panic!("shape mismatch: {k:?} from {u:?}"),
    }
}
