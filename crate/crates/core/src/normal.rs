//! Standard normal density, CDF and the log-domain ratios needed by the
//! truncated-Gaussian moment computations.
//!
//! Everything that feeds EP goes through [`log_cdf`] and [`inv_mills`], which
//! stay accurate far into the lower tail where `Φ(x)` underflows.

use std::f64::consts::{PI, SQRT_2};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Below this argument the lower tail is evaluated with a continued fraction
/// for the Mills ratio instead of `erfc`.
const TAIL_SWITCH: f64 = -6.0;

#[inline]
pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

#[inline]
pub fn log_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

#[inline]
pub fn cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Mills ratio `R(t) = Φ(-t) / φ(t)` for `t > 0`, by Lentz evaluation of the
/// continued fraction `1 / (t + 1/(t + 2/(t + 3/(t + ...))))`.
fn mills_ratio_upper(t: f64) -> f64 {
    debug_assert!(t > 0.0);
    const TINY: f64 = 1e-300;
    let mut f = t;
    let mut c = t;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64;
        d = t + a * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = t + a / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    1.0 / f
}

/// `log Φ(x)`, accurate for all finite `x`.
pub fn log_cdf(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if x == f64::INFINITY {
        return 0.0;
    }
    if x < TAIL_SWITCH {
        log_pdf(x) + mills_ratio_upper(-x).ln()
    } else if x > 5.0 {
        // Φ(x) = 1 - Φ(-x); log1p keeps the tiny complement
        (-cdf(-x)).ln_1p()
    } else {
        cdf(x).ln()
    }
}

/// Inverse Mills ratio `λ(x) = φ(x) / Φ(x)`.
pub fn inv_mills(x: f64) -> f64 {
    if x == f64::INFINITY {
        return 0.0;
    }
    if x < TAIL_SWITCH {
        1.0 / mills_ratio_upper(-x)
    } else {
        pdf(x) / cdf(x)
    }
}

/// Mean and variance of `N(mean, variance)` truncated to `[0, ∞)`.
pub fn truncated_below_zero(mean: f64, variance: f64) -> (f64, f64) {
    let sd = variance.sqrt();
    let alpha = mean / sd;
    let lambda = inv_mills(alpha);
    let m = mean + sd * lambda;
    let shrink = (1.0 - lambda * (alpha + lambda)).max(0.0);
    (m, variance * shrink)
}

/// `log(exp(a) + exp(b))` without overflow; handles `-∞` operands.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let hi = a.max(b);
    hi + (-(a - b).abs()).exp().ln_1p()
}

/// `log(1 - exp(a))` for `a ≤ 0`.
#[inline]
pub fn log1m_exp(a: f64) -> f64 {
    if a >= 0.0 {
        f64::NEG_INFINITY
    } else if a > -std::f64::consts::LN_2 {
        (-a.exp_m1()).ln()
    } else {
        (-a.exp()).ln_1p()
    }
}

/// Differential entropy of `N(·, variance)`.
#[inline]
pub fn gaussian_entropy(variance: f64) -> f64 {
    0.5 * (2.0 * PI * std::f64::consts::E * variance).ln()
}
