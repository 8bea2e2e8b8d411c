//! Log-gamma and digamma for any [`Scalar`].
//!
//! Both are evaluated in `f64`-grade arithmetic expressed through the generic
//! scalar so that `f32` callers get the same algorithm at their own precision.

use crate::scalar::Scalar;

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, reflection below 0.5).
pub fn ln_gamma<S: Scalar>(x: S) -> S {
    let half = S::c(0.5);
    if x < half {
        // Γ(x)Γ(1-x) = π / sin(πx)
        let pi = S::c(std::f64::consts::PI);
        return (pi / (pi * x).sin()).abs().ln() - ln_gamma(S::one() - x);
    }
    let x = x - S::one();
    let mut acc = S::c(LANCZOS_COEF[0]);
    for (i, &c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += S::c(c) / (x + S::from_usize_lossy(i));
    }
    let t = x + S::c(LANCZOS_G) + half;
    S::c(0.5 * (2.0 * std::f64::consts::PI).ln()) + (x + half) * t.ln() - t + acc.ln()
}

/// Digamma `Ψ(x) = d/dx ln Γ(x)` for `x > 0`.
pub fn digamma<S: Scalar>(x: S) -> S {
    let mut x = x;
    let mut shift = S::zero();
    // Upward recurrence until the asymptotic series is accurate.
    while x < S::c(6.0) {
        shift -= x.recip();
        x += S::one();
    }
    let inv = x.recip();
    let inv2 = inv * inv;
    let series = inv2
        * (S::c(1.0 / 12.0)
            - inv2
                * (S::c(1.0 / 120.0)
                    - inv2
                        * (S::c(1.0 / 252.0)
                            - inv2 * (S::c(1.0 / 240.0) - inv2 * S::c(1.0 / 132.0)))));
    shift + x.ln() - S::c(0.5) * inv - series
}
