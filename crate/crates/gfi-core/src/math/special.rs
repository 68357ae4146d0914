//! Error function and standard normal helpers.
//!
//! `erf` uses the positive-term series expansion below 2.5 and a Lentz
//! continued fraction for the complementary function above it, giving near
//! machine precision in `f64` without large coefficient tables. The normal
//! quantile runs a low-precision rational approximation and polishes it with
//! Newton steps against the high-precision CDF.

use crate::math::c;
use crate::Scalar;

const FRAC_2_SQRT_PI: f64 = 1.128_379_167_095_512_6;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Error function.
pub fn erf<F: Scalar>(x: F) -> F {
    if x < F::zero() {
        return -erf(-x);
    }
    if x < c(2.5) {
        erf_series(x)
    } else {
        F::one() - erfc_fraction(x)
    }
}

/// Complementary error function.
pub fn erfc<F: Scalar>(x: F) -> F {
    if x < F::zero() {
        return c::<F>(2.0) - erfc(-x);
    }
    if x < c(1.5) {
        F::one() - erf_series(x)
    } else {
        erfc_fraction(x)
    }
}

/// erf(x) = (2/sqrt(pi)) e^{-x^2} sum_{n>=0} (2x^2)^n x / (1*3*...*(2n+1)).
/// Every term is positive, so no cancellation occurs.
fn erf_series<F: Scalar>(x: F) -> F {
    let two = c::<F>(2.0);
    let xx2 = two * x * x;
    let mut term = x;
    let mut sum = x;
    let mut odd = F::one();
    loop {
        odd = odd + two;
        term = term * xx2 / odd;
        let next = sum + term;
        if next == sum {
            break;
        }
        sum = next;
    }
    c::<F>(FRAC_2_SQRT_PI) * (-x * x).exp() * sum
}

/// erfc(x) = e^{-x^2}/sqrt(pi) / (x + (1/2)/(x + 1/(x + (3/2)/(x + ...)))),
/// evaluated with the modified Lentz algorithm. Valid for x >= ~1.
fn erfc_fraction<F: Scalar>(x: F) -> F {
    let tiny = c::<F>(1e-300);
    let eps = F::epsilon();
    let half = c::<F>(0.5);
    let mut f = x;
    let mut cc = x;
    let mut d = F::zero();
    let mut n = F::zero();
    for _ in 0..300 {
        n = n + half;
        d = x + n * d;
        if d.abs() < tiny {
            d = tiny;
        }
        cc = x + n / cc;
        if cc.abs() < tiny {
            cc = tiny;
        }
        d = d.recip();
        let delta = cc * d;
        f = f * delta;
        if (delta - F::one()).abs() < eps {
            break;
        }
    }
    let sqrt_pi = c::<F>(core::f64::consts::PI).sqrt();
    (-x * x).exp() / (sqrt_pi * f)
}

/// Standard normal density.
pub fn norm_pdf<F: Scalar>(x: F) -> F {
    c::<F>(FRAC_1_SQRT_2PI) * (-x * x / c(2.0)).exp()
}

/// Standard normal CDF.
pub fn norm_cdf<F: Scalar>(x: F) -> F {
    c::<F>(0.5) * erfc(-x / c::<F>(core::f64::consts::SQRT_2))
}

/// Standard normal quantile on (0, 1). Returns NaN outside the open interval.
pub fn norm_quantile<F: Scalar>(p: F) -> F {
    if !(p > F::zero() && p < F::one()) {
        return F::nan();
    }
    let mut x = acklam_quantile(p);
    // Two Newton corrections hold the round trip below 1e-15 relative over
    // the whole representable range.
    for _ in 0..2 {
        let pdf = norm_pdf(x);
        if !pdf.is_normal() {
            break;
        }
        x = x - (norm_cdf(x) - p) / pdf;
    }
    x
}

fn acklam_quantile<F: Scalar>(p: F) -> F {
    let a: [F; 6] = [
        c(-3.969683028665376e+01),
        c(2.209460984245205e+02),
        c(-2.759285104469687e+02),
        c(1.383577518672690e+02),
        c(-3.066479806614716e+01),
        c(2.506628277459239e+00),
    ];
    let b: [F; 5] = [
        c(-5.447609879822406e+01),
        c(1.615858368580409e+02),
        c(-1.556989798598866e+02),
        c(6.680131188771972e+01),
        c(-1.328068155288572e+01),
    ];
    let cc: [F; 6] = [
        c(-7.784894002430293e-03),
        c(-3.223964580411365e-01),
        c(-2.400758277161838e+00),
        c(-2.549732539343734e+00),
        c(4.374664141464968e+00),
        c(2.938163982698783e+00),
    ];
    let d: [F; 4] = [
        c(7.784695709041462e-03),
        c(3.224671290700398e-01),
        c(2.445134137142996e+00),
        c(3.754408661907416e+00),
    ];
    let p_low = c::<F>(0.02425);
    let p_high = F::one() - p_low;
    let two = c::<F>(2.0);

    if p < p_low {
        let q = (-two * p.ln()).sqrt();
        (((((cc[0] * q + cc[1]) * q + cc[2]) * q + cc[3]) * q + cc[4]) * q + cc[5])
            / ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + F::one())
    } else if p <= p_high {
        let q = p - c(0.5);
        let r = q * q;
        (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q
            / (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + F::one())
    } else {
        let q = (-two * (F::one() - p).ln()).sqrt();
        -(((((cc[0] * q + cc[1]) * q + cc[2]) * q + cc[3]) * q + cc[4]) * q + cc[5])
            / ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + F::one())
    }
}
