//! Standard normal distribution functions with log-space tails.

use libm::erfc;
use statrs::function::erf::erfc_inv;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
/// ln(sqrt(2*pi))
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
/// Below this argument Phi(x) < 1e-15 and the continued-fraction branch is used.
const LOG_BRANCH: f64 = -7.94;

pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Upper tail `1 - Phi(x)`.
pub fn sf(x: f64) -> f64 {
    cdf(-x)
}

/// Mills ratio `(1 - Phi(x)) / phi(x)` for `x > 0`, by backward evaluation of
/// Laplace's continued fraction.
fn mills_ratio(x: f64) -> f64 {
    let mut acc = x;
    for k in (1..=80).rev() {
        acc = x + k as f64 / acc;
    }
    1.0 / acc
}

/// `ln Phi(x)`, finite for all finite `x`.
pub fn log_cdf(x: f64) -> f64 {
    if x < LOG_BRANCH {
        -0.5 * x * x - LN_SQRT_2PI + mills_ratio(-x).ln()
    } else if x > 0.0 {
        (-sf(x)).ln_1p()
    } else {
        cdf(x).ln()
    }
}

/// `ln(1 - Phi(x))`.
pub fn log_sf(x: f64) -> f64 {
    log_cdf(-x)
}

/// `ln(Phi(b) - Phi(a))` for `a <= b`; `-inf` when the interval is empty.
pub fn log_interval(a: f64, b: f64) -> f64 {
    if !(a < b) {
        return f64::NEG_INFINITY;
    }
    if a == f64::NEG_INFINITY {
        return log_cdf(b);
    }
    if b == f64::INFINITY {
        return log_sf(a);
    }
    if a >= 0.0 {
        // Both in the upper tail: use survival functions.
        let (la, lb) = (log_sf(a), log_sf(b));
        la + log1mexp(lb - la)
    } else {
        let (la, lb) = (log_cdf(a), log_cdf(b));
        lb + log1mexp(la - lb)
    }
}

/// `ln(1 - e^x)` for `x <= 0`.
fn log1mexp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// `ln(e^a + e^b)`.
pub fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Standard normal quantile.
pub fn quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile of {p}");
    let mut x = -SQRT_2 * erfc_inv(2.0 * p);
    // One Newton step on the CDF tightens the last few ulps.
    let d = pdf(x);
    if d > 1e-300 {
        x -= (cdf(x) - p) / d;
    }
    x
}

/// Two-sided critical value `z_{(1+level)/2}`.
pub fn two_sided_critical(level: f64) -> f64 {
    quantile(0.5 + level / 2.0)
}
