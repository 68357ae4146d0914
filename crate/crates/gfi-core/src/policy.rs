//! Solves for the counterfactual treatment-model intercept that moves the
//! average uptake probability to a target allocation level, holding every
//! slope at its fitted value (rank preservation of uptake propensity).

use crate::math::c;
use crate::math::sum::KahanSum;
use crate::mle::TreatmentModelFit;
use crate::model::{Dataset, Link};
use crate::Scalar;
use thiserror::Error;

/// Residual tolerance on the solved root equation.
pub const ROOT_TOLERANCE: f64 = 1e-10;
/// Initial bracket half-width around the link-scale target.
const BRACKET_HALF_WIDTH: f64 = 20.0;
/// Intercepts beyond this magnitude are treated as unattainable policies.
const GAMMA_LIMIT: f64 = 50.0;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("target allocation {0} must lie strictly inside (0, 1)")]
    AlphaOutOfDomain(f64),
    #[error("policy unattainable: intercept exceeded |{limit}| while bracketing alpha = {alpha}")]
    UnsolvablePolicy { alpha: f64, limit: f64 },
    #[error("no clusters supplied")]
    EmptyData,
    #[error("covariate vector length {found} does not match slope length {expected}")]
    DimensionMismatch { found: usize, expected: usize },
    #[error("weight vector length {found} does not match cluster count {expected}")]
    WeightLength { found: usize, expected: usize },
    #[error("root iteration failed to reach tolerance {tolerance} (residual {residual})")]
    NoConvergence { tolerance: f64, residual: f64 },
    #[error("solving a strata policy requires a stratum-1 and a stratum-2 model")]
    MissingStrataModel,
    #[error("a stratum-1 model conditions on the second stratum; use the strata solver")]
    StratumModelRequiresJointSolve,
}

/// A target allocation probability together with its solved counterfactual
/// intercept(s).
#[derive(Clone, Copy, Debug)]
pub struct PolicySpec<F> {
    pub alpha: F,
    pub gamma0: F,
    /// Second-stratum intercept in two-strata analyses.
    pub gamma0_strata2: Option<F>,
}

/// Safeguarded Newton iteration on a strictly increasing mean function.
///
/// `eval` returns the weighted mean uptake probability and its derivative at
/// a candidate intercept. Bisection keeps the bracket valid whenever a Newton
/// step misbehaves.
fn solve_intercept<F: Scalar>(
    alpha: F,
    link: Link,
    eval: &dyn Fn(F) -> (F, F),
) -> Result<F, SolveError> {
    let alpha_f64 = alpha.to_f64().unwrap_or(f64::NAN);
    if !(alpha > F::zero() && alpha < F::one()) {
        return Err(SolveError::AlphaOutOfDomain(alpha_f64));
    }
    let tol = c::<F>(ROOT_TOLERANCE);
    let limit = c::<F>(GAMMA_LIMIT);
    let center = link.forward(alpha).expect("alpha inside (0,1)");
    let mut half_width = c::<F>(BRACKET_HALF_WIDTH);

    // Expand geometrically until the bracket straddles the root.
    let (mut lo, mut hi) = loop {
        let lo = center - half_width;
        let hi = center + half_width;
        let f_lo = eval(lo).0 - alpha;
        let f_hi = eval(hi).0 - alpha;
        if f_lo <= F::zero() && f_hi >= F::zero() {
            break (lo, hi);
        }
        half_width = half_width * c(2.0);
        if lo.abs().max(hi.abs()) > limit {
            return Err(SolveError::UnsolvablePolicy {
                alpha: alpha_f64,
                limit: GAMMA_LIMIT,
            });
        }
    };

    let mut x = c::<F>(0.5) * (lo + hi);
    let mut residual = F::infinity();
    for _ in 0..200 {
        let (mean, deriv) = eval(x);
        residual = mean - alpha;
        if residual.abs() <= tol {
            if x.abs() > limit {
                return Err(SolveError::UnsolvablePolicy {
                    alpha: alpha_f64,
                    limit: GAMMA_LIMIT,
                });
            }
            return Ok(x);
        }
        if residual > F::zero() {
            hi = x;
        } else {
            lo = x;
        }
        let newton = x - residual / deriv;
        x = if deriv > F::zero() && newton > lo && newton < hi {
            newton
        } else {
            c::<F>(0.5) * (lo + hi)
        };
    }
    Err(SolveError::NoConvergence {
        tolerance: ROOT_TOLERANCE,
        residual: residual.to_f64().unwrap_or(f64::NAN),
    })
}

/// Solves the empirical root equation for the counterfactual intercept.
///
/// `covariates` supplies one vector per cluster; `weights` (default 1)
/// reweights the empirical mean, e.g. for survey designs.
pub fn solve_gamma0<F: Scalar>(
    alpha: F,
    rho_slopes: &[F],
    covariates: &[Vec<F>],
    link: Link,
    weights: Option<&[F]>,
) -> Result<PolicySpec<F>, SolveError> {
    if covariates.is_empty() {
        return Err(SolveError::EmptyData);
    }
    if let Some(w) = weights {
        if w.len() != covariates.len() {
            return Err(SolveError::WeightLength {
                found: w.len(),
                expected: covariates.len(),
            });
        }
    }
    let mut offsets = Vec::with_capacity(covariates.len());
    for cov in covariates {
        if cov.len() != rho_slopes.len() {
            return Err(SolveError::DimensionMismatch {
                found: cov.len(),
                expected: rho_slopes.len(),
            });
        }
        let off = cov
            .iter()
            .zip(rho_slopes)
            .fold(F::zero(), |acc, (&l, &r)| acc + l * r);
        offsets.push(off);
    }
    let total_weight = match weights {
        Some(w) => w.iter().fold(F::zero(), |acc, &x| acc + x),
        None => c::<F>(covariates.len() as f64),
    };

    let eval = |gamma: F| -> (F, F) {
        let mut mean = KahanSum::new();
        let mut deriv = KahanSum::new();
        for (i, &off) in offsets.iter().enumerate() {
            let w = weights.map_or(F::one(), |ws| ws[i]);
            let eta = gamma + off;
            mean.add(w * link.inverse(eta));
            deriv.add(w * link.inverse_deriv(eta));
        }
        (mean.value() / total_weight, deriv.value() / total_weight)
    };

    let gamma0 = solve_intercept(alpha, link, &eval)?;
    Ok(PolicySpec {
        alpha,
        gamma0,
        gamma0_strata2: None,
    })
}

/// Solves the policy intercept against a fitted treatment model.
pub fn solve_policy<F: Scalar>(
    alpha: F,
    fit: &TreatmentModelFit<F>,
    data: &Dataset<F>,
) -> Result<PolicySpec<F>, SolveError> {
    if fit.stratum2_coefficient().is_some() {
        return Err(SolveError::StratumModelRequiresJointSolve);
    }
    let covariates: Vec<Vec<F>> = data
        .records()
        .iter()
        .map(|r| r.covariates.clone())
        .collect();
    solve_gamma0(alpha, fit.covariate_slopes(), &covariates, fit.link, None)
}

/// Solves both stratum intercepts so each stratum's expected uptake equals
/// its target.
///
/// The second stratum solves the plain root equation. The first stratum's
/// model conditions on the second stratum's treated proportion, so its mean
/// uptake integrates that proportion over the already-solved counterfactual
/// second-stratum distribution.
pub fn solve_policy_strata_targets<F: Scalar>(
    alpha1: F,
    alpha2: F,
    stratum1_fit: &TreatmentModelFit<F>,
    stratum2_fit: &TreatmentModelFit<F>,
    data: &Dataset<F>,
) -> Result<PolicySpec<F>, SolveError> {
    let s2_coef = stratum1_fit
        .stratum2_coefficient()
        .ok_or(SolveError::MissingStrataModel)?;
    if data.is_empty() {
        return Err(SolveError::EmptyData);
    }
    let covariates: Vec<Vec<F>> = data
        .records()
        .iter()
        .map(|r| r.covariates.clone())
        .collect();
    let gamma2 = solve_gamma0(
        alpha2,
        stratum2_fit.covariate_slopes(),
        &covariates,
        stratum2_fit.link,
        None,
    )?
    .gamma0;

    let kernel = data.kernel();
    let link1 = stratum1_fit.link;
    let link2 = stratum2_fit.link;
    let slopes1 = stratum1_fit.covariate_slopes();
    let slopes2 = stratum2_fit.covariate_slopes();
    let m = c::<F>(data.len() as f64);

    let eval = |gamma: F| -> (F, F) {
        let mut mean = KahanSum::new();
        let mut deriv = KahanSum::new();
        for rec in data.records() {
            let off1 = rec
                .covariates
                .iter()
                .zip(slopes1)
                .fold(F::zero(), |acc, (&l, &r)| acc + l * r);
            let off2 = rec
                .covariates
                .iter()
                .zip(slopes2)
                .fold(F::zero(), |acc, (&l, &r)| acc + l * r);
            let n2 = rec.n2.expect("strata-validated dataset");
            let pi2 = link2.inverse(gamma2 + off2);
            let n2f = c::<F>(f64::from(n2));
            let mut cluster_mean = F::zero();
            let mut cluster_deriv = F::zero();
            for k2 in 0..=n2 {
                let w2 = kernel.pmf(n2, k2, pi2);
                let s2 = c::<F>(f64::from(k2)) / n2f;
                let eta = gamma + off1 + s2_coef * s2;
                cluster_mean = cluster_mean + w2 * link1.inverse(eta);
                cluster_deriv = cluster_deriv + w2 * link1.inverse_deriv(eta);
            }
            mean.add(cluster_mean);
            deriv.add(cluster_deriv);
        }
        (mean.value() / m, deriv.value() / m)
    };

    let gamma0 = solve_intercept(alpha1, link1, &eval)?;
    Ok(PolicySpec {
        alpha: alpha1,
        gamma0,
        gamma0_strata2: Some(gamma2),
    })
}

/// Two-strata policy with a single shared target allocation.
pub fn solve_policy_strata<F: Scalar>(
    alpha: F,
    stratum1_fit: &TreatmentModelFit<F>,
    stratum2_fit: &TreatmentModelFit<F>,
    data: &Dataset<F>,
) -> Result<PolicySpec<F>, SolveError> {
    solve_policy_strata_targets(alpha, alpha, stratum1_fit, stratum2_fit, data)
}
