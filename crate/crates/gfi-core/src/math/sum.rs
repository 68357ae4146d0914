//! Compensated summation and error-free floating-point transforms.

use crate::Scalar;

/// Neumaier-compensated accumulator.
///
/// Summation order still matters for bit-level reproducibility; callers that
/// need identical results across runs must feed terms in a fixed order.
#[derive(Clone, Copy, Debug)]
pub struct KahanSum<F> {
    sum: F,
    compensation: F,
}

impl<F: Scalar> KahanSum<F> {
    pub fn new() -> Self {
        Self {
            sum: F::zero(),
            compensation: F::zero(),
        }
    }

    pub fn add(&mut self, value: F) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation = self.compensation + ((self.sum - t) + value);
        } else {
            self.compensation = self.compensation + ((value - t) + self.sum);
        }
        self.sum = t;
    }

    pub fn value(&self) -> F {
        self.sum + self.compensation
    }
}

impl<F: Scalar> Default for KahanSum<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Returns `(fl(a + b), rounding error)` so that the pair sums to `a + b`
/// exactly.
pub fn two_sum<F: Scalar>(a: F, b: F) -> (F, F) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}

/// Returns `(fl(a * b), rounding error)` via fused multiply-add.
pub fn two_prod<F: Scalar>(a: F, b: F) -> (F, F) {
    let p = a * b;
    let err = a.mul_add(b, -p);
    (p, err)
}

/// Unevaluated `hi + lo` pair carrying roughly twice the scalar precision.
///
/// Only the handful of operations needed by the log-factorial table are
/// implemented.
#[derive(Clone, Copy, Debug)]
pub struct TwoFloat<F> {
    pub hi: F,
    pub lo: F,
}

impl<F: Scalar> TwoFloat<F> {
    pub fn zero() -> Self {
        Self {
            hi: F::zero(),
            lo: F::zero(),
        }
    }

    pub fn from_single(x: F) -> Self {
        Self { hi: x, lo: F::zero() }
    }

    pub fn from_product(a: F, b: F) -> Self {
        let (hi, lo) = two_prod(a, b);
        Self { hi, lo }
    }

    fn renorm(hi: F, lo: F) -> Self {
        let (h, l) = two_sum(hi, lo);
        Self { hi: h, lo: l }
    }

    pub fn add(self, rhs: Self) -> Self {
        let (s, e) = two_sum(self.hi, rhs.hi);
        Self::renorm(s, e + self.lo + rhs.lo)
    }

    pub fn add_scalar(self, x: F) -> Self {
        let (s, e) = two_sum(self.hi, x);
        Self::renorm(s, e + self.lo)
    }

    pub fn neg(self) -> Self {
        Self {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    pub fn sub(self, rhs: Self) -> Self {
        self.add(rhs.neg())
    }

    pub fn value(self) -> F {
        self.hi + self.lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahan_recovers_small_terms() {
        let mut acc = KahanSum::<f64>::new();
        acc.add(1.0);
        for _ in 0..1_000_000 {
            acc.add(1e-16);
        }
        let exact = 1.0 + 1e-10;
        assert!((acc.value() - exact).abs() < 1e-15);
        // Naive summation loses every small term here.
        let mut naive = 1.0f64;
        for _ in 0..1_000_000 {
            naive += 1e-16;
        }
        assert_eq!(naive, 1.0);
    }

    #[test]
    fn two_sum_is_exact() {
        let (s, e) = two_sum(1e16, 1.0);
        assert_eq!(s, 1e16);
        assert_eq!(e, 1.0);
    }

    #[test]
    fn two_float_tracks_residuals() {
        let mut acc = TwoFloat::<f64>::zero();
        for k in 1..=50_000u32 {
            acc = acc.add_scalar(f64::from(k).ln());
        }
        // ln(50000!) from Stirling with correction terms.
        let n = 50_000f64;
        let stirling = n * n.ln() - n + 0.5 * (2.0 * core::f64::consts::PI * n).ln()
            + 1.0 / (12.0 * n)
            - 1.0 / (360.0 * n.powi(3));
        assert!((acc.value() - stirling).abs() / stirling < 1e-14);
    }
}
