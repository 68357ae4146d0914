//! End-to-end estimation: fit the models, solve the policy grid, standardize,
//! and attach sandwich inference.

use crate::gformula::{ContrastEstimate, EstimateError, EstimateReport};
use crate::mle::{
    fit_outcome_model, fit_stratum1_model, fit_stratum2_model, fit_treatment_model, FitError,
    OutcomeModelFit, OutcomeTerms, TreatmentModelFit,
};
use crate::model::{Dataset, Link, OutcomeDefinition};
use crate::policy::{solve_policy, solve_policy_strata, PolicySpec, SolveError};
use crate::variance::{
    build_theta, sandwich, wald_ci, SandwichError, SandwichResult, StackContext, ThetaStack,
};
use crate::Scalar;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("{model} model did not converge ({status})")]
    NonConvergence {
        model: &'static str,
        status: &'static str,
    },
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Sandwich(#[from] SandwichError),
    #[error("invalid analysis options: {0}")]
    InvalidOptions(String),
}

#[derive(Clone, Debug)]
pub struct AnalysisOptions<F> {
    pub link: Link,
    pub outcome_def: OutcomeDefinition,
    /// Model the two population strata separately.
    pub strata: bool,
    pub outcome_terms: OutcomeTerms,
    /// Allocation grid reported in the estimates table.
    pub alphas: Vec<F>,
    /// Contrast pairs (alpha, alpha') reported in the contrasts table.
    pub contrasts: Vec<(F, F)>,
}

impl<F: Scalar> AnalysisOptions<F> {
    pub fn new(
        link: Link,
        outcome_def: OutcomeDefinition,
        alphas: Vec<F>,
        contrasts: Vec<(F, F)>,
    ) -> Self {
        Self {
            link,
            outcome_def,
            strata: false,
            outcome_terms: OutcomeTerms::default(),
            alphas,
            contrasts,
        }
    }
}

/// Everything produced by one analysis run.
#[derive(Clone, Debug)]
pub struct AnalysisResult<F> {
    pub report: EstimateReport<F>,
    pub treatment_fit: TreatmentModelFit<F>,
    pub stratum2_fit: Option<TreatmentModelFit<F>>,
    pub outcome_fit: OutcomeModelFit<F>,
    /// All solved policies in stack order (report grid first, then any
    /// contrast-only allocations).
    pub policies: Vec<PolicySpec<F>>,
    pub stack: ThetaStack<F>,
    pub sandwich: SandwichResult<F>,
}

fn check_converged(
    model: &'static str,
    converged: bool,
    status: crate::mle::FitStatus,
) -> Result<(), PipelineError> {
    if converged {
        Ok(())
    } else {
        Err(PipelineError::NonConvergence {
            model,
            status: status.label(),
        })
    }
}

/// Runs the full estimation pipeline on a prepared dataset.
pub fn run_estimation<F: Scalar>(
    data: &Dataset<F>,
    opts: &AnalysisOptions<F>,
) -> Result<AnalysisResult<F>, PipelineError> {
    for &alpha in &opts.alphas {
        if !(alpha > F::zero() && alpha < F::one()) {
            return Err(PipelineError::InvalidOptions(format!(
                "alpha {alpha} outside (0, 1)"
            )));
        }
    }
    for &(a, b) in &opts.contrasts {
        for v in [a, b] {
            if !(v > F::zero() && v < F::one()) {
                return Err(PipelineError::InvalidOptions(format!(
                    "contrast allocation {v} outside (0, 1)"
                )));
            }
        }
    }
    if opts.strata && !data.has_strata() {
        return Err(PipelineError::InvalidOptions(
            "strata analysis requested but the dataset has no s2/n2 fields".into(),
        ));
    }
    if !opts.strata && opts.outcome_terms.include_s2 {
        return Err(PipelineError::InvalidOptions(
            "outcome model includes s2 but strata mode is off".into(),
        ));
    }

    // Stack every allocation appearing in the grid or a contrast, once.
    let mut policy_alphas: Vec<F> = Vec::new();
    for &alpha in opts
        .alphas
        .iter()
        .chain(opts.contrasts.iter().flat_map(|(a, b)| [a, b]))
    {
        if !policy_alphas.contains(&alpha) {
            policy_alphas.push(alpha);
        }
    }
    if policy_alphas.is_empty() {
        return Err(PipelineError::InvalidOptions(
            "no allocations requested".into(),
        ));
    }

    let (treatment_fit, stratum2_fit) = if opts.strata {
        let s1 = fit_stratum1_model(data, opts.link)?;
        check_converged("stratum-1 treatment", s1.converged, s1.status)?;
        let s2 = fit_stratum2_model(data, opts.link)?;
        check_converged("stratum-2 treatment", s2.converged, s2.status)?;
        (s1, Some(s2))
    } else {
        let fit = fit_treatment_model(data, opts.link)?;
        check_converged("treatment", fit.converged, fit.status)?;
        (fit, None)
    };
    let outcome_fit = fit_outcome_model(data, opts.outcome_def, opts.link, opts.outcome_terms)?;
    check_converged("outcome", outcome_fit.converged, outcome_fit.status)?;

    let mut policies = Vec::with_capacity(policy_alphas.len());
    for &alpha in &policy_alphas {
        let policy = match &stratum2_fit {
            Some(s2) => solve_policy_strata(alpha, &treatment_fit, s2, data)?,
            None => solve_policy(alpha, &treatment_fit, data)?,
        };
        policies.push(policy);
    }

    let index_of = |alpha: F| -> usize {
        policy_alphas
            .iter()
            .position(|&x| x == alpha)
            .expect("every contrast allocation was stacked")
    };
    let contrast_indices: Vec<(usize, usize)> = opts
        .contrasts
        .iter()
        .map(|&(a, b)| (index_of(a), index_of(b)))
        .collect();

    let ctx = StackContext::new(
        data,
        &treatment_fit,
        stratum2_fit.as_ref(),
        &outcome_fit,
        &policies,
        &contrast_indices,
    )?;
    let stack = build_theta(&ctx, &policies)?;
    let sand = sandwich(&ctx, &stack)?;

    let mut mu_hat = Vec::with_capacity(opts.alphas.len());
    let mut se_mu = Vec::with_capacity(opts.alphas.len());
    let mut mu_ci = Vec::with_capacity(opts.alphas.len());
    for &alpha in &opts.alphas {
        let p = index_of(alpha);
        let mu = stack.mu(p);
        let se = sand.se_mu(p);
        mu_hat.push(mu);
        se_mu.push(se);
        mu_ci.push(wald_ci(mu, se));
    }
    let contrasts = opts
        .contrasts
        .iter()
        .enumerate()
        .map(|(ci, &(a, b))| {
            let delta = stack.delta(ci);
            let se = sand.se_delta(ci);
            ContrastEstimate {
                alpha: a,
                alpha_prime: b,
                delta_hat: delta,
                se,
                ci: wald_ci(delta, se),
            }
        })
        .collect();

    let report = EstimateReport {
        outcome_def: opts.outcome_def,
        alpha_grid: opts.alphas.clone(),
        mu_hat,
        se_mu,
        mu_ci,
        contrasts,
    };
    let _ = &ctx;
    drop(ctx);

    Ok(AnalysisResult {
        report,
        treatment_fit,
        stratum2_fit,
        outcome_fit,
        policies,
        stack,
        sandwich: sand,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gformula::estimate_mu;
    use crate::model::ClusterRecord;
    use crate::variance::Z_975;

    fn dataset() -> Dataset<f64> {
        let spec: [(u32, f64, u32, u32); 9] = [
            (4, 0.2, 1, 2),
            (6, 1.1, 3, 2),
            (8, -0.4, 5, 3),
            (5, 0.9, 2, 1),
            (7, -1.2, 4, 5),
            (6, 0.1, 2, 2),
            (9, 1.8, 6, 3),
            (5, -0.7, 1, 2),
            (8, 0.6, 4, 4),
        ];
        let recs = spec
            .iter()
            .enumerate()
            .map(|(i, &(n, l, treated, events))| {
                ClusterRecord::new(
                    format!("c{i}"),
                    n,
                    vec![l],
                    f64::from(treated) / f64::from(n),
                    f64::from(events) / f64::from(n),
                    n,
                )
                .unwrap()
            })
            .collect();
        Dataset::new(recs).unwrap()
    }

    #[test]
    fn report_is_consistent_with_direct_estimators() {
        let data = dataset();
        let opts = AnalysisOptions::new(
            Link::Logit,
            OutcomeDefinition::Overall,
            vec![0.4, 0.5, 0.6],
            vec![(0.6, 0.4), (0.6, 0.5)],
        );
        let result = run_estimation(&data, &opts).unwrap();
        // The reported means equal the public estimator output exactly.
        for (i, &alpha) in opts.alphas.iter().enumerate() {
            let policy = result
                .policies
                .iter()
                .find(|p| p.alpha == alpha)
                .copied()
                .unwrap();
            let direct = estimate_mu(
                &policy,
                &result.outcome_fit,
                result.treatment_fit.covariate_slopes(),
                &data,
            )
            .unwrap();
            assert_eq!(result.report.mu_hat[i], direct);
        }
        // Contrast equals the exact difference of means.
        let mu: std::collections::HashMap<u64, f64> = opts
            .alphas
            .iter()
            .zip(&result.report.mu_hat)
            .map(|(a, m)| (a.to_bits(), *m))
            .collect();
        for contrast in &result.report.contrasts {
            let expect =
                mu[&contrast.alpha.to_bits()] - mu[&contrast.alpha_prime.to_bits()];
            assert_eq!(contrast.delta_hat, expect);
            let (lo, hi) = contrast.ci;
            assert_eq!(lo, contrast.delta_hat - Z_975 * contrast.se);
            assert_eq!(hi, contrast.delta_hat + Z_975 * contrast.se);
        }
    }

    #[test]
    fn null_contrast_has_zero_se() {
        let data = dataset();
        let opts = AnalysisOptions::new(
            Link::Logit,
            OutcomeDefinition::Overall,
            vec![0.55],
            vec![(0.55, 0.55)],
        );
        let result = run_estimation(&data, &opts).unwrap();
        let contrast = &result.report.contrasts[0];
        assert_eq!(contrast.delta_hat, 0.0);
        assert_eq!(contrast.se, 0.0);
    }

    #[test]
    fn rejects_bad_options() {
        let data = dataset();
        let opts = AnalysisOptions::new(
            Link::Logit,
            OutcomeDefinition::Overall,
            vec![1.2],
            vec![],
        );
        assert!(matches!(
            run_estimation(&data, &opts),
            Err(PipelineError::InvalidOptions(_))
        ));
        let empty = AnalysisOptions::new(Link::Logit, OutcomeDefinition::Overall, vec![], vec![]);
        assert!(matches!(
            run_estimation(&data, &empty),
            Err(PipelineError::InvalidOptions(_))
        ));
    }

    #[test]
    fn nonconvergence_is_reported() {
        // Every cluster fully treated: treatment model separates.
        let recs = (0..4)
            .map(|i| {
                ClusterRecord::new(format!("c{i}"), 6, vec![f64::from(i)], 1.0, 0.5, 6).unwrap()
            })
            .collect();
        let data = Dataset::new(recs).unwrap();
        let opts =
            AnalysisOptions::new(Link::Logit, OutcomeDefinition::Overall, vec![0.5], vec![]);
        assert!(matches!(
            run_estimation(&data, &opts),
            Err(PipelineError::NonConvergence { .. })
        ));
    }
}
