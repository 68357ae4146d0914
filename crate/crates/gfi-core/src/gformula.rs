//! Standardization of the fitted outcome surface over counterfactual
//! treatment distributions: policy means, effect contrasts, and the
//! two-strata variant.
//!
//! A policy mean averages, over clusters, the fitted outcome mean at every
//! point of the cluster's treated-proportion lattice weighted by the
//! counterfactual binomial distribution of that proportion.

use crate::math::c;
use crate::math::sum::KahanSum;
use crate::mle::{OutcomeModelFit, TreatmentModelFit};
use crate::model::{BinomialKernel, ClusterRecord, Dataset, OutcomeDefinition};
use crate::policy::PolicySpec;
use crate::Scalar;
use thiserror::Error;

/// Residual gate used to confirm a policy was solved against the supplied
/// model and data.
const POLICY_RESIDUAL_GATE: f64 = 1e-8;

/// Beyond this many lattice points the two-strata double sum truncates each
/// binomial to a window carrying all but 1e-12 of its mass.
const STRATA_LATTICE_LIMIT: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("policy alpha = {alpha} was not solved for this model and data (residual {residual:e})")]
    PolicyNotSolved { alpha: f64, residual: f64 },
    #[error("{model} model has not converged")]
    FitNotConverged { model: &'static str },
    #[error("treatment slope length {found} does not match covariate dimension {expected}")]
    DimensionMismatch { found: usize, expected: usize },
    #[error("two-strata estimation requires s2/n2 on every cluster")]
    MissingStrata,
    #[error("policy has no second-stratum intercept; solve it with the strata solver")]
    MissingStrataIntercept,
    #[error("outcome model conditions on the second stratum; use the strata estimator")]
    StrataModelInPlainEstimator,
}

/// Point estimates with sandwich standard errors and Wald intervals over an
/// allocation grid.
#[derive(Clone, Debug)]
pub struct EstimateReport<F> {
    pub outcome_def: OutcomeDefinition,
    pub alpha_grid: Vec<F>,
    pub mu_hat: Vec<F>,
    pub se_mu: Vec<F>,
    pub mu_ci: Vec<(F, F)>,
    pub contrasts: Vec<ContrastEstimate<F>>,
}

/// One effect contrast between two allocation levels.
#[derive(Clone, Copy, Debug)]
pub struct ContrastEstimate<F> {
    pub alpha: F,
    pub alpha_prime: F,
    pub delta_hat: F,
    pub se: F,
    pub ci: (F, F),
}

fn offset<F: Scalar>(covariates: &[F], slopes: &[F]) -> F {
    covariates
        .iter()
        .zip(slopes)
        .fold(F::zero(), |acc, (&l, &r)| acc + l * r)
}

fn check_policy_residual<F: Scalar>(
    policy: &PolicySpec<F>,
    slopes: &[F],
    data: &Dataset<F>,
    link: crate::model::Link,
) -> Result<(), EstimateError> {
    let mut mean = KahanSum::new();
    for rec in data.records() {
        mean.add(link.inverse(policy.gamma0 + offset(&rec.covariates, slopes)));
    }
    let residual = mean.value() / c::<F>(data.len() as f64) - policy.alpha;
    if residual.abs() > c(POLICY_RESIDUAL_GATE) {
        return Err(EstimateError::PolicyNotSolved {
            alpha: policy.alpha.to_f64().unwrap_or(f64::NAN),
            residual: residual.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(())
}

/// One cluster's standardized outcome mean under uptake probability
/// `pi_policy`: the inner sum over the cluster's treated-proportion lattice.
pub(crate) fn cluster_mu_term<F: Scalar>(
    rec: &ClusterRecord<F>,
    outcome_fit: &OutcomeModelFit<F>,
    pi_policy: F,
    kernel: &BinomialKernel<F>,
) -> F {
    let n = rec.n;
    let nf = c::<F>(f64::from(n));
    let mut acc = KahanSum::new();
    for k in 0..=n {
        let s = c::<F>(f64::from(k)) / nf;
        let weight = kernel.pmf(n, k, pi_policy);
        acc.add(weight * outcome_fit.mean(&rec.covariates, s, None));
    }
    acc.value()
}

/// G-formula estimate of the mean outcome under `policy`.
pub fn estimate_mu<F: Scalar>(
    policy: &PolicySpec<F>,
    outcome_fit: &OutcomeModelFit<F>,
    treatment_slopes: &[F],
    data: &Dataset<F>,
) -> Result<F, EstimateError> {
    if outcome_fit.terms.include_s2 {
        return Err(EstimateError::StrataModelInPlainEstimator);
    }
    if !outcome_fit.converged {
        return Err(EstimateError::FitNotConverged { model: "outcome" });
    }
    if treatment_slopes.len() != data.covariate_dim() {
        return Err(EstimateError::DimensionMismatch {
            found: treatment_slopes.len(),
            expected: data.covariate_dim(),
        });
    }
    check_policy_residual(policy, treatment_slopes, data, outcome_fit.link)?;
    let kernel = data.kernel();
    let mut acc = KahanSum::new();
    for rec in data.records() {
        let pi = outcome_fit
            .link
            .inverse(policy.gamma0 + offset(&rec.covariates, treatment_slopes));
        acc.add(cluster_mu_term(rec, outcome_fit, pi, &kernel));
    }
    Ok(acc.value() / c::<F>(data.len() as f64))
}

/// Effect contrast between two policies solved on the same fits and data.
pub fn estimate_delta<F: Scalar>(
    policy: &PolicySpec<F>,
    policy_prime: &PolicySpec<F>,
    outcome_fit: &OutcomeModelFit<F>,
    treatment_slopes: &[F],
    data: &Dataset<F>,
) -> Result<F, EstimateError> {
    let mu = estimate_mu(policy, outcome_fit, treatment_slopes, data)?;
    let mu_prime = estimate_mu(policy_prime, outcome_fit, treatment_slopes, data)?;
    Ok(mu - mu_prime)
}

/// One cluster's standardized mean under a two-strata policy: the double sum
/// over both treated-proportion lattices.
pub(crate) fn cluster_mu_term_strata<F: Scalar>(
    rec: &ClusterRecord<F>,
    outcome_fit: &OutcomeModelFit<F>,
    pi1_at: &dyn Fn(F) -> F,
    pi2: F,
    kernel: &BinomialKernel<F>,
) -> F {
    let n1 = rec.n;
    let n2 = rec.n2.expect("strata-validated dataset");
    let n1f = c::<F>(f64::from(n1));
    let n2f = c::<F>(f64::from(n2));
    let lattice = u64::from(n1 + 1) * u64::from(n2 + 1);
    let tail = c::<F>(5e-13);

    let mut acc = KahanSum::new();
    let (lo2, hi2) = if lattice > STRATA_LATTICE_LIMIT {
        kernel.support_window(n2, pi2, tail)
    } else {
        (0, n2)
    };
    for k2 in lo2..=hi2 {
        let s2 = c::<F>(f64::from(k2)) / n2f;
        let w2 = kernel.pmf(n2, k2, pi2);
        let pi1 = pi1_at(s2);
        let (lo1, hi1) = if lattice > STRATA_LATTICE_LIMIT {
            kernel.support_window(n1, pi1, tail)
        } else {
            (0, n1)
        };
        let mut inner = KahanSum::new();
        for k1 in lo1..=hi1 {
            let s1 = c::<F>(f64::from(k1)) / n1f;
            let w1 = kernel.pmf(n1, k1, pi1);
            inner.add(w1 * outcome_fit.mean(&rec.covariates, s1, Some(s2)));
        }
        acc.add(w2 * inner.value());
    }
    acc.value()
}

/// G-formula estimate of the mean outcome under a two-strata policy where
/// both strata share the allocation target.
pub fn estimate_mu_strata<F: Scalar>(
    policy: &PolicySpec<F>,
    outcome_fit: &OutcomeModelFit<F>,
    stratum1_fit: &TreatmentModelFit<F>,
    stratum2_fit: &TreatmentModelFit<F>,
    data: &Dataset<F>,
) -> Result<F, EstimateError> {
    if !data.has_strata() {
        return Err(EstimateError::MissingStrata);
    }
    let gamma2 = policy
        .gamma0_strata2
        .ok_or(EstimateError::MissingStrataIntercept)?;
    for (fit, model) in [(stratum1_fit, "stratum-1"), (stratum2_fit, "stratum-2")] {
        if !fit.converged {
            return Err(EstimateError::FitNotConverged { model });
        }
    }
    if !outcome_fit.converged {
        return Err(EstimateError::FitNotConverged { model: "outcome" });
    }
    let s2_coef = stratum1_fit
        .stratum2_coefficient()
        .ok_or(EstimateError::MissingStrataIntercept)?;

    // Confirm both intercepts reproduce the target allocation.
    let kernel = data.kernel();
    let m = c::<F>(data.len() as f64);
    let mut mean2 = KahanSum::new();
    let mut mean1 = KahanSum::new();
    for rec in data.records() {
        let off2 = offset(&rec.covariates, stratum2_fit.covariate_slopes());
        let pi2 = stratum2_fit.link.inverse(gamma2 + off2);
        mean2.add(pi2);
        let off1 = offset(&rec.covariates, stratum1_fit.covariate_slopes());
        let n2 = rec.n2.expect("validated");
        let n2f = c::<F>(f64::from(n2));
        let mut cluster_mean = F::zero();
        for k2 in 0..=n2 {
            let s2 = c::<F>(f64::from(k2)) / n2f;
            let w2 = kernel.pmf(n2, k2, pi2);
            cluster_mean =
                cluster_mean + w2 * stratum1_fit.link.inverse(policy.gamma0 + off1 + s2_coef * s2);
        }
        mean1.add(cluster_mean);
    }
    for mean in [mean1.value() / m, mean2.value() / m] {
        let residual = mean - policy.alpha;
        if residual.abs() > c(POLICY_RESIDUAL_GATE) {
            return Err(EstimateError::PolicyNotSolved {
                alpha: policy.alpha.to_f64().unwrap_or(f64::NAN),
                residual: residual.to_f64().unwrap_or(f64::NAN),
            });
        }
    }

    let mut acc = KahanSum::new();
    for rec in data.records() {
        let off1 = offset(&rec.covariates, stratum1_fit.covariate_slopes());
        let off2 = offset(&rec.covariates, stratum2_fit.covariate_slopes());
        let pi2 = stratum2_fit.link.inverse(gamma2 + off2);
        let pi1_at = |s2: F| stratum1_fit.link.inverse(policy.gamma0 + off1 + s2_coef * s2);
        acc.add(cluster_mu_term_strata(
            rec,
            outcome_fit,
            &pi1_at,
            pi2,
            &kernel,
        ));
    }
    Ok(acc.value() / m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mle::OutcomeTerms;
    use crate::model::{ClusterRecord, Link};
    use crate::policy::{solve_gamma0, solve_policy_strata};

    fn outcome_fit(beta: Vec<f64>, terms: OutcomeTerms, cov_dim: usize) -> OutcomeModelFit<f64> {
        OutcomeModelFit::from_coefficients(
            beta,
            Link::Logit,
            terms,
            OutcomeDefinition::Overall,
            cov_dim,
        )
        .unwrap()
    }

    fn expit(x: f64) -> f64 {
        Link::Logit.inverse(x)
    }

    #[test]
    fn single_cluster_matches_hand_enumeration() {
        let rec = ClusterRecord::new("a", 2, vec![0.5], 0.5, 0.0, 2).unwrap();
        let data = Dataset::new(vec![rec]).unwrap();
        let slopes = [0.2f64];
        let fit = outcome_fit(vec![-0.3, 0.7, -1.1], OutcomeTerms::default(), 1);
        let policy = solve_gamma0(0.4, &slopes, &[vec![0.5]], Link::Logit, None).unwrap();

        let pi = expit(policy.gamma0 + 0.2 * 0.5);
        let by_hand = (1.0 - pi).powi(2) * expit(-0.3 + 0.35)
            + 2.0 * pi * (1.0 - pi) * expit(-0.3 + 0.35 - 0.55)
            + pi.powi(2) * expit(-0.3 + 0.35 - 1.1);
        let got = estimate_mu(&policy, &fit, &slopes, &data).unwrap();
        assert!((got - by_hand).abs() < 1e-12, "got {got}, hand {by_hand}");
    }

    #[test]
    fn null_outcome_model_makes_mu_constant() {
        // With no effect of the treated proportion the standardization
        // collapses because each pmf row sums to one.
        let recs = (0..5)
            .map(|i| {
                ClusterRecord::new(format!("c{i}"), 4 + i, vec![f64::from(i)], 0.0, 0.0, 0).unwrap()
            })
            .collect();
        let data = Dataset::new(recs).unwrap();
        let slopes = [0.3f64];
        let covs: Vec<Vec<f64>> = data.records().iter().map(|r| r.covariates.clone()).collect();
        let fit = outcome_fit(
            vec![0.2, -0.4, 0.0],
            OutcomeTerms::default(),
            1,
        );
        let mut values = Vec::new();
        for alpha in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let policy = solve_gamma0(alpha, &slopes, &covs, Link::Logit, None).unwrap();
            values.push(estimate_mu(&policy, &fit, &slopes, &data).unwrap());
        }
        let spread = values.iter().cloned().fold(f64::MIN, f64::max)
            - values.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread <= 1e-12, "spread {spread}");
    }

    #[test]
    fn delta_identities() {
        let recs = (0..4)
            .map(|i| ClusterRecord::new(format!("c{i}"), 6, vec![f64::from(i)], 0.5, 0.0, 6).unwrap())
            .collect();
        let data = Dataset::new(recs).unwrap();
        let covs: Vec<Vec<f64>> = data.records().iter().map(|r| r.covariates.clone()).collect();
        let slopes = [-0.1f64];
        let fit = outcome_fit(vec![0.1, 0.05, -0.6], OutcomeTerms::default(), 1);
        let p40 = solve_gamma0(0.4, &slopes, &covs, Link::Logit, None).unwrap();
        let p60 = solve_gamma0(0.6, &slopes, &covs, Link::Logit, None).unwrap();

        let same = estimate_delta(&p40, &p40, &fit, &slopes, &data).unwrap();
        assert_eq!(same, 0.0);
        let fwd = estimate_delta(&p60, &p40, &fit, &slopes, &data).unwrap();
        let rev = estimate_delta(&p40, &p60, &fit, &slopes, &data).unwrap();
        assert_eq!(fwd, -rev);
        let mu60 = estimate_mu(&p60, &fit, &slopes, &data).unwrap();
        let mu40 = estimate_mu(&p40, &fit, &slopes, &data).unwrap();
        assert_eq!(fwd, mu60 - mu40);
    }

    #[test]
    fn mu_lies_in_unit_interval_and_decreases() {
        let recs = (0..6)
            .map(|i| ClusterRecord::new(format!("c{i}"), 8, vec![f64::from(i) * 0.5], 0.5, 0.0, 8).unwrap())
            .collect();
        let data = Dataset::new(recs).unwrap();
        let covs: Vec<Vec<f64>> = data.records().iter().map(|r| r.covariates.clone()).collect();
        let slopes = [0.15f64];
        // Negative coefficient on the treated proportion.
        let fit = outcome_fit(vec![0.4, -0.1, -0.9], OutcomeTerms::default(), 1);
        let mut last = f64::INFINITY;
        for k in 1..10 {
            let alpha = f64::from(k) / 10.0;
            let policy = solve_gamma0(alpha, &slopes, &covs, Link::Logit, None).unwrap();
            let mu = estimate_mu(&policy, &fit, &slopes, &data).unwrap();
            assert!((0.0..=1.0).contains(&mu));
            assert!(mu < last, "mu must strictly decrease when beta_s < 0");
            last = mu;
        }
    }

    #[test]
    fn mismatched_policy_is_rejected() {
        let recs = (0..3)
            .map(|i| ClusterRecord::new(format!("c{i}"), 4, vec![f64::from(i)], 0.5, 0.0, 4).unwrap())
            .collect();
        let data = Dataset::new(recs).unwrap();
        let fit = outcome_fit(vec![0.0, 0.1, -0.5], OutcomeTerms::default(), 1);
        // Solve against different covariates, then apply to `data`.
        let other_covs: Vec<Vec<f64>> = (0..3).map(|i| vec![f64::from(i) * 10.0]).collect();
        let slopes = [0.3f64];
        let policy = solve_gamma0(0.5, &slopes, &other_covs, Link::Logit, None).unwrap();
        let err = estimate_mu(&policy, &fit, &slopes, &data).unwrap_err();
        assert!(matches!(err, EstimateError::PolicyNotSolved { .. }));
    }

    fn strata_dataset() -> Dataset<f64> {
        let recs = (0..5)
            .map(|i| {
                ClusterRecord::new(format!("c{i}"), 3, vec![f64::from(i) * 0.4], 1.0 / 3.0, 0.0, 3)
                    .unwrap()
                    .with_strata(0.5, 4)
                    .unwrap()
            })
            .collect();
        Dataset::new(recs).unwrap()
    }

    fn strata_fits(
        s2_coef: f64,
    ) -> (TreatmentModelFit<f64>, TreatmentModelFit<f64>) {
        // Hand-built stratum fits with known coefficients.
        let s1 = TreatmentModelFit {
            rho: vec![0.2, -0.3, s2_coef],
            link: Link::Logit,
            converged: true,
            status: crate::mle::FitStatus::Converged,
            iterations: 0,
            loglik: f64::NAN,
            max_abs_score: 0.0,
            design: crate::mle::ModelDesign::Stratum1,
            covariate_dim: 1,
        };
        let s2 = TreatmentModelFit {
            rho: vec![-0.1, 0.25],
            link: Link::Logit,
            converged: true,
            status: crate::mle::FitStatus::Converged,
            iterations: 0,
            loglik: f64::NAN,
            max_abs_score: 0.0,
            design: crate::mle::ModelDesign::Stratum2,
            covariate_dim: 1,
        };
        (s1, s2)
    }

    #[test]
    fn degenerate_stratum_reduces_to_plain_estimate() {
        // Outcome ignores s2 and the stratum-1 model does not depend on s2:
        // the double sum must equal the plain standardization.
        let data = strata_dataset();
        let (s1, s2) = strata_fits(0.0);
        let outcome = OutcomeModelFit::from_coefficients(
            vec![0.3, -0.2, -0.7, 0.0],
            Link::Logit,
            OutcomeTerms {
                include_s: true,
                include_s2: true,
            },
            OutcomeDefinition::Overall,
            1,
        )
        .unwrap();
        let alpha = 0.45;
        let policy = solve_policy_strata(alpha, &s1, &s2, &data).unwrap();
        let strata_mu = estimate_mu_strata(&policy, &outcome, &s1, &s2, &data).unwrap();

        let plain_outcome = outcome_fit(vec![0.3, -0.2, -0.7], OutcomeTerms::default(), 1);
        let covs: Vec<Vec<f64>> = data.records().iter().map(|r| r.covariates.clone()).collect();
        let plain_policy = solve_gamma0(alpha, &[-0.3], &covs, Link::Logit, None).unwrap();
        let plain_mu = estimate_mu(&plain_policy, &plain_outcome, &[-0.3], &data).unwrap();
        assert!(
            (strata_mu - plain_mu).abs() < 1e-12,
            "strata {strata_mu} vs plain {plain_mu}"
        );
    }

    #[test]
    fn unit_strata_match_four_term_enumeration() {
        let rec = ClusterRecord::new("a", 1, vec![0.2], 0.0, 0.0, 1)
            .unwrap()
            .with_strata(0.0, 1)
            .unwrap();
        let data = Dataset::new(vec![rec]).unwrap();
        let (s1, s2) = strata_fits(0.6);
        let outcome = OutcomeModelFit::from_coefficients(
            vec![0.1, -0.4, -0.8, -0.5],
            Link::Logit,
            OutcomeTerms {
                include_s: true,
                include_s2: true,
            },
            OutcomeDefinition::Overall,
            1,
        )
        .unwrap();
        let policy = solve_policy_strata(0.3, &s1, &s2, &data).unwrap();
        let got = estimate_mu_strata(&policy, &outcome, &s1, &s2, &data).unwrap();

        let l = 0.2;
        let pi2 = expit(policy.gamma0_strata2.unwrap() + 0.25 * l);
        let pi1 = |s2v: f64| expit(policy.gamma0 + (-0.3) * l + 0.6 * s2v);
        let ey = |s1v: f64, s2v: f64| expit(0.1 - 0.4 * l - 0.8 * s1v - 0.5 * s2v);
        let mut hand = 0.0;
        for (s2v, w2) in [(0.0, 1.0 - pi2), (1.0, pi2)] {
            let p1 = pi1(s2v);
            for (s1v, w1) in [(0.0, 1.0 - p1), (1.0, p1)] {
                hand += w2 * w1 * ey(s1v, s2v);
            }
        }
        assert!((got - hand).abs() < 1e-12, "got {got}, hand {hand}");
    }

    #[test]
    fn strata_null_is_constant_in_alpha() {
        let data = strata_dataset();
        let (s1, s2) = strata_fits(0.4);
        let outcome = OutcomeModelFit::from_coefficients(
            vec![0.25, -0.15, 0.0, 0.0],
            Link::Logit,
            OutcomeTerms {
                include_s: true,
                include_s2: true,
            },
            OutcomeDefinition::Overall,
            1,
        )
        .unwrap();
        let mut values = Vec::new();
        for alpha in [0.2, 0.4, 0.6, 0.8] {
            let policy = solve_policy_strata(alpha, &s1, &s2, &data).unwrap();
            values.push(estimate_mu_strata(&policy, &outcome, &s1, &s2, &data).unwrap());
        }
        let spread = values.iter().cloned().fold(f64::MIN, f64::max)
            - values.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread <= 1e-12, "spread {spread}");
    }
}
