//! Stacked estimating functions and the empirical sandwich covariance.
//!
//! Every fitted quantity (treatment coefficients, policy intercepts, outcome
//! coefficients, policy means, contrasts) solves one row of a joint
//! estimating equation. Stacking them yields an M-estimator whose asymptotic
//! covariance is `U^{-1} W U^{-T}`, with `U` the averaged negative Jacobian
//! of the stack and `W` the averaged outer product. `U` is assembled from
//! analytic derivatives; a central finite-difference builder is provided for
//! cross-validation.

use crate::gformula::{cluster_mu_term, cluster_mu_term_strata};
use crate::math::c;
use crate::math::linalg::{FullPivLu, Matrix};
use crate::math::sum::KahanSum;
use crate::mle::{
    record_information_into, record_score_into, FitError, OutcomeModelFit,
    TreatmentModelFit,
};
use crate::model::{BinomialKernel, ClusterRecord, Dataset};
use crate::policy::PolicySpec;
use crate::Scalar;
use core::ops::Range;
use thiserror::Error;

/// Upper 97.5% standard normal quantile used for Wald intervals.
pub const Z_975: f64 = 1.959963985;

/// Wald interval `estimate ± z_{0.975} * se`.
pub fn wald_ci<F: Scalar>(estimate: F, se: F) -> (F, F) {
    let z = c::<F>(Z_975);
    (estimate - z * se, estimate + z * se)
}

const POLICY_RESIDUAL_GATE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum SandwichError {
    #[error("{model} model has not converged")]
    FitNotConverged { model: &'static str },
    #[error("no policies supplied to the stack")]
    NoPolicies,
    #[error("contrast references policy index {index}, but only {policies} policies are stacked")]
    ContrastIndex { index: usize, policies: usize },
    #[error("strata stack requires strata data, a stratum-1 model and a stratum-2 model")]
    StrataSetup,
    #[error("theta vector has length {found}, expected {expected}")]
    ThetaLength { found: usize, expected: usize },
    #[error("policy alpha = {alpha} is not solved for this context (residual {residual:e})")]
    PolicyNotSolved { alpha: f64, residual: f64 },
    #[error("information matrix is numerically singular in the {block} block (column {column})")]
    SingularInformation { block: &'static str, column: usize },
    #[error("variance diagonal is negative ({value:e}) in the {block} block")]
    NegativeVariance { block: &'static str, value: f64 },
    #[error(transparent)]
    Fit(#[from] FitError),
}

/// Index layout of the stacked parameter vector: treatment coefficients,
/// policy intercepts, outcome coefficients, policy means, contrasts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StackLayout {
    pub rho: Range<usize>,
    /// Second-stratum treatment coefficients (two-strata stacks only).
    pub rho2: Option<Range<usize>>,
    /// Policy intercepts; in strata stacks the first `n_policies` entries are
    /// stratum-1 intercepts followed by the stratum-2 intercepts.
    pub gamma: Range<usize>,
    pub beta: Range<usize>,
    pub mu: Range<usize>,
    pub delta: Range<usize>,
    pub n_policies: usize,
    pub strata: bool,
}

impl StackLayout {
    pub fn dim(&self) -> usize {
        self.delta.end
    }

    pub fn gamma1_index(&self, policy: usize) -> usize {
        self.gamma.start + policy
    }

    pub fn gamma2_index(&self, policy: usize) -> usize {
        debug_assert!(self.strata);
        self.gamma.start + self.n_policies + policy
    }

    pub fn mu_index(&self, policy: usize) -> usize {
        self.mu.start + policy
    }

    pub fn delta_index(&self, contrast: usize) -> usize {
        self.delta.start + contrast
    }

    pub fn block_label(&self, column: usize) -> &'static str {
        if self.rho.contains(&column) {
            "rho"
        } else if self.rho2.as_ref().is_some_and(|r| r.contains(&column)) {
            "rho2"
        } else if self.gamma.contains(&column) {
            "gamma"
        } else if self.beta.contains(&column) {
            "beta"
        } else if self.mu.contains(&column) {
            "mu"
        } else {
            "delta"
        }
    }
}

/// Everything the estimating functions need besides the parameter vector:
/// data, model shapes, link functions, allocation targets, and contrasts.
pub struct StackContext<'a, F> {
    data: &'a Dataset<F>,
    treatment: &'a TreatmentModelFit<F>,
    stratum2: Option<&'a TreatmentModelFit<F>>,
    outcome: &'a OutcomeModelFit<F>,
    alphas: Vec<F>,
    contrasts: Vec<(usize, usize)>,
    kernel: BinomialKernel<F>,
    layout: StackLayout,
}

impl<'a, F: Scalar> StackContext<'a, F> {
    pub fn new(
        data: &'a Dataset<F>,
        treatment: &'a TreatmentModelFit<F>,
        stratum2: Option<&'a TreatmentModelFit<F>>,
        outcome: &'a OutcomeModelFit<F>,
        policies: &[PolicySpec<F>],
        contrasts: &[(usize, usize)],
    ) -> Result<Self, SandwichError> {
        if policies.is_empty() {
            return Err(SandwichError::NoPolicies);
        }
        for &(a, b) in contrasts {
            for index in [a, b] {
                if index >= policies.len() {
                    return Err(SandwichError::ContrastIndex {
                        index,
                        policies: policies.len(),
                    });
                }
            }
        }
        let strata = stratum2.is_some();
        if strata {
            let ok = data.has_strata()
                && treatment.stratum2_coefficient().is_some()
                && policies.iter().all(|p| p.gamma0_strata2.is_some());
            if !ok {
                return Err(SandwichError::StrataSetup);
            }
        } else {
            if treatment.stratum2_coefficient().is_some() || outcome.terms.include_s2 {
                return Err(SandwichError::StrataSetup);
            }
        }
        if !treatment.converged {
            return Err(SandwichError::FitNotConverged { model: "treatment" });
        }
        if let Some(s2) = stratum2 {
            if !s2.converged {
                return Err(SandwichError::FitNotConverged { model: "stratum-2" });
            }
        }
        if !outcome.converged {
            return Err(SandwichError::FitNotConverged { model: "outcome" });
        }

        let p_rho = treatment.rho.len();
        let p_rho2 = stratum2.map(|f| f.rho.len()).unwrap_or(0);
        let n_pol = policies.len();
        let gammas_per_policy = if strata { 2 } else { 1 };
        let p_beta = outcome.beta.len();
        let rho = 0..p_rho;
        let rho2 = strata.then(|| p_rho..p_rho + p_rho2);
        let gamma_start = p_rho + p_rho2;
        let gamma = gamma_start..gamma_start + gammas_per_policy * n_pol;
        let beta = gamma.end..gamma.end + p_beta;
        let mu = beta.end..beta.end + n_pol;
        let delta = mu.end..mu.end + contrasts.len();
        let layout = StackLayout {
            rho,
            rho2,
            gamma,
            beta,
            mu,
            delta,
            n_policies: n_pol,
            strata,
        };

        Ok(Self {
            data,
            treatment,
            stratum2,
            outcome,
            alphas: policies.iter().map(|p| p.alpha).collect(),
            contrasts: contrasts.to_vec(),
            kernel: data.kernel(),
            layout,
        })
    }

    pub fn layout(&self) -> &StackLayout {
        &self.layout
    }

    pub fn data(&self) -> &Dataset<F> {
        self.data
    }

    fn covariate_dim(&self) -> usize {
        self.data.covariate_dim()
    }
}

/// The stacked parameter vector with its layout.
#[derive(Clone, Debug)]
pub struct ThetaStack<F> {
    pub theta: Vec<F>,
    pub layout: StackLayout,
}

impl<F: Scalar> ThetaStack<F> {
    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn mu(&self, policy: usize) -> F {
        self.theta[self.layout.mu_index(policy)]
    }

    pub fn delta(&self, contrast: usize) -> F {
        self.theta[self.layout.delta_index(contrast)]
    }
}

/// Pre-sliced view of a theta vector, with a throwaway outcome fit carrying
/// the beta block so standardization helpers can run at arbitrary theta.
struct ThetaView<'t, F> {
    rho: &'t [F],
    rho2: Option<&'t [F]>,
    gamma1: &'t [F],
    gamma2: Option<&'t [F]>,
    mu: &'t [F],
    delta: &'t [F],
    outcome_at_beta: OutcomeModelFit<F>,
}

impl<'t, F: Scalar> ThetaView<'t, F> {
    fn new(theta: &'t [F], ctx: &StackContext<'_, F>) -> Result<Self, SandwichError> {
        let layout = &ctx.layout;
        if theta.len() != layout.dim() {
            return Err(SandwichError::ThetaLength {
                found: theta.len(),
                expected: layout.dim(),
            });
        }
        let n_pol = layout.n_policies;
        let gamma = &theta[layout.gamma.clone()];
        let (gamma1, gamma2) = if layout.strata {
            (&gamma[..n_pol], Some(&gamma[n_pol..]))
        } else {
            (gamma, None)
        };
        let outcome_at_beta = OutcomeModelFit::from_coefficients(
            theta[layout.beta.clone()].to_vec(),
            ctx.outcome.link,
            ctx.outcome.terms,
            ctx.outcome.outcome_def,
            ctx.covariate_dim(),
        )?;
        Ok(Self {
            rho: &theta[layout.rho.clone()],
            rho2: layout.rho2.clone().map(|r| &theta[r]),
            gamma1,
            gamma2,
            mu: &theta[layout.mu.clone()],
            delta: &theta[layout.delta.clone()],
            outcome_at_beta,
        })
    }

    fn rho_covariate_slopes(&self, cov_dim: usize) -> &[F] {
        &self.rho[1..=cov_dim]
    }

    fn rho_s2_coef(&self, cov_dim: usize) -> F {
        self.rho[cov_dim + 1]
    }

    fn rho2_covariate_slopes(&self, cov_dim: usize) -> &[F] {
        &self.rho2.expect("strata stack")[1..=cov_dim]
    }
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Builds the stacked parameter vector at the fitted values: model
/// coefficients, solved intercepts, the implied policy means, and contrasts.
pub fn build_theta<F: Scalar>(
    ctx: &StackContext<'_, F>,
    policies: &[PolicySpec<F>],
) -> Result<ThetaStack<F>, SandwichError> {
    let layout = ctx.layout.clone();
    if policies.len() != layout.n_policies {
        return Err(SandwichError::ThetaLength {
            found: policies.len(),
            expected: layout.n_policies,
        });
    }
    let mut theta = vec![F::zero(); layout.dim()];
    theta[layout.rho.clone()].copy_from_slice(&ctx.treatment.rho);
    if let Some(r2) = &layout.rho2 {
        theta[r2.clone()].copy_from_slice(&ctx.stratum2.expect("strata stack").rho);
    }
    for (p, policy) in policies.iter().enumerate() {
        theta[layout.gamma1_index(p)] = policy.gamma0;
        if layout.strata {
            theta[layout.gamma2_index(p)] =
                policy.gamma0_strata2.ok_or(SandwichError::StrataSetup)?;
        }
    }
    theta[layout.beta.clone()].copy_from_slice(&ctx.outcome.beta);

    // Policy means from the same per-cluster terms the estimating functions
    // use, so the mu rows average to zero exactly.
    let view = ThetaView::new(&theta, ctx)?;
    let m = c::<F>(ctx.data.len() as f64);
    let mut mu_hat = Vec::with_capacity(layout.n_policies);
    for p in 0..layout.n_policies {
        let mut acc = KahanSum::new();
        let mut residual = KahanSum::new();
        for rec in ctx.data.records() {
            let (term, uptake) = policy_cluster_term(rec, ctx, &view, p);
            acc.add(term);
            residual.add(uptake);
        }
        let residual = residual.value() / m - ctx.alphas[p];
        if residual.abs() > c(POLICY_RESIDUAL_GATE) {
            return Err(SandwichError::PolicyNotSolved {
                alpha: ctx.alphas[p].to_f64().unwrap_or(f64::NAN),
                residual: residual.to_f64().unwrap_or(f64::NAN),
            });
        }
        mu_hat.push(acc.value() / m);
    }
    drop(view);
    for (p, mu) in mu_hat.iter().enumerate() {
        theta[layout.mu_index(p)] = *mu;
    }
    for (ci, &(a, b)) in ctx.contrasts.iter().enumerate() {
        theta[layout.delta_index(ci)] = mu_hat[a] - mu_hat[b];
    }
    Ok(ThetaStack { theta, layout })
}

/// One cluster's standardized mean and mean uptake under policy `p`.
fn policy_cluster_term<F: Scalar>(
    rec: &ClusterRecord<F>,
    ctx: &StackContext<'_, F>,
    view: &ThetaView<'_, F>,
    p: usize,
) -> (F, F) {
    let cov_dim = ctx.covariate_dim();
    let link_s = ctx.treatment.link;
    if ctx.layout.strata {
        let link2 = ctx.stratum2.expect("strata stack").link;
        let off1 = dot(&rec.covariates, view.rho_covariate_slopes(cov_dim));
        let off2 = dot(&rec.covariates, view.rho2_covariate_slopes(cov_dim));
        let s2_coef = view.rho_s2_coef(cov_dim);
        let gamma1 = view.gamma1[p];
        let gamma2 = view.gamma2.expect("strata stack")[p];
        let pi2 = link2.inverse(gamma2 + off2);
        let pi1_at = |s2: F| link_s.inverse(gamma1 + off1 + s2_coef * s2);
        let term =
            cluster_mu_term_strata(rec, &view.outcome_at_beta, &pi1_at, pi2, &ctx.kernel);
        // Mean stratum-1 uptake under the policy.
        let n2 = rec.n2.expect("strata data");
        let n2f = c::<F>(f64::from(n2));
        let mut uptake = F::zero();
        for k2 in 0..=n2 {
            let s2 = c::<F>(f64::from(k2)) / n2f;
            uptake = uptake + ctx.kernel.pmf(n2, k2, pi2) * pi1_at(s2);
        }
        (term, uptake)
    } else {
        let off = dot(&rec.covariates, view.rho_covariate_slopes(cov_dim));
        let pi = link_s.inverse(view.gamma1[p] + off);
        (
            cluster_mu_term(rec, &view.outcome_at_beta, pi, &ctx.kernel),
            pi,
        )
    }
}

/// Evaluates the stacked estimating function for one cluster at `theta`.
pub fn psi_eval<F: Scalar>(
    rec: &ClusterRecord<F>,
    theta: &ThetaStack<F>,
    ctx: &StackContext<'_, F>,
) -> Result<Vec<F>, SandwichError> {
    let view = ThetaView::new(&theta.theta, ctx)?;
    let mut out = vec![F::zero(); ctx.layout.dim()];
    let mut row_buf = Vec::new();
    psi_into(rec, ctx, &view, &mut out, &mut row_buf)?;
    Ok(out)
}

fn psi_into<F: Scalar>(
    rec: &ClusterRecord<F>,
    ctx: &StackContext<'_, F>,
    view: &ThetaView<'_, F>,
    out: &mut [F],
    row_buf: &mut Vec<F>,
) -> Result<(), SandwichError> {
    let layout = &ctx.layout;
    let cov_dim = ctx.covariate_dim();
    let link_s = ctx.treatment.link;

    record_score_into(
        rec,
        ctx.treatment.model_design(),
        link_s,
        view.rho,
        &mut out[layout.rho.clone()],
        row_buf,
    )?;
    if let Some(s2_fit) = ctx.stratum2 {
        record_score_into(
            rec,
            s2_fit.model_design(),
            s2_fit.link,
            view.rho2.expect("strata stack"),
            &mut out[layout.rho2.clone().expect("strata stack")],
            row_buf,
        )?;
    }

    // Policy intercept rows.
    for p in 0..layout.n_policies {
        if layout.strata {
            let link2 = ctx.stratum2.expect("strata stack").link;
            let off1 = dot(&rec.covariates, view.rho_covariate_slopes(cov_dim));
            let off2 = dot(&rec.covariates, view.rho2_covariate_slopes(cov_dim));
            let s2_coef = view.rho_s2_coef(cov_dim);
            let pi2 = link2.inverse(view.gamma2.expect("strata stack")[p] + off2);
            let n2 = rec.n2.expect("strata data");
            let n2f = c::<F>(f64::from(n2));
            let mut uptake1 = F::zero();
            for k2 in 0..=n2 {
                let s2 = c::<F>(f64::from(k2)) / n2f;
                uptake1 = uptake1
                    + ctx.kernel.pmf(n2, k2, pi2)
                        * link_s.inverse(view.gamma1[p] + off1 + s2_coef * s2);
            }
            out[layout.gamma1_index(p)] = uptake1 - ctx.alphas[p];
            out[layout.gamma2_index(p)] = pi2 - ctx.alphas[p];
        } else {
            let off = dot(&rec.covariates, view.rho_covariate_slopes(cov_dim));
            out[layout.gamma1_index(p)] =
                link_s.inverse(view.gamma1[p] + off) - ctx.alphas[p];
        }
    }

    record_score_into(
        rec,
        ctx.outcome.model_design(),
        ctx.outcome.link,
        &view.outcome_at_beta.beta,
        &mut out[layout.beta.clone()],
        row_buf,
    )?;

    // Policy mean and contrast rows.
    let mut terms = Vec::with_capacity(layout.n_policies);
    for p in 0..layout.n_policies {
        let (term, _) = policy_cluster_term(rec, ctx, view, p);
        terms.push(term);
        out[layout.mu_index(p)] = term - view.mu[p];
    }
    for (ci, &(a, b)) in ctx.contrasts.iter().enumerate() {
        out[layout.delta_index(ci)] = terms[a] - terms[b] - view.delta[ci];
    }
    Ok(())
}

/// Derivatives of one cluster's standardized mean with respect to the stack
/// blocks it touches, all on the linear-predictor scale.
///
/// Slope derivatives follow by the chain rule: the covariate slope `j` of a
/// treatment model scales its intercept derivative by `L_j`.
struct MuDerivatives<F> {
    d_beta: Vec<F>,
    /// d T / d gamma1 (base mode: the single policy intercept).
    d_gamma1: F,
    /// d T / d (stratum-1 coefficient on s2); zero in base mode.
    d_rho1_s2: F,
    /// d T / d gamma2; zero in base mode.
    d_gamma2: F,
}

/// Base-mode derivatives of the cluster term. `eta_s` is the uptake linear
/// predictor under the policy.
fn mu_derivatives_base<F: Scalar>(
    rec: &ClusterRecord<F>,
    ctx: &StackContext<'_, F>,
    view: &ThetaView<'_, F>,
    eta_s: F,
) -> MuDerivatives<F> {
    let outcome = &view.outcome_at_beta;
    let link_s = ctx.treatment.link;
    let pi = link_s.inverse(eta_s);
    let density = link_s.inverse_deriv(eta_s);
    let n = rec.n;
    let nf = c::<F>(f64::from(n));
    let v = pi * (F::one() - pi);
    let mut d_beta = vec![F::zero(); outcome.beta.len()];
    let mut d_pi = F::zero();
    for k in 0..=n {
        let kf = c::<F>(f64::from(k));
        let s = kf / nf;
        let weight = ctx.kernel.pmf(n, k, pi);
        let eta_y = outcome.eta(&rec.covariates, s, None);
        let mean = outcome.link.inverse(eta_y);
        let dmean = outcome.link.inverse_deriv(eta_y);
        // Design row: intercept, covariates, [s].
        d_beta[0] = d_beta[0] + dmean * weight;
        for (j, &l) in rec.covariates.iter().enumerate() {
            d_beta[1 + j] = d_beta[1 + j] + dmean * weight * l;
        }
        if outcome.terms.include_s {
            let slot = 1 + rec.covariates.len();
            d_beta[slot] = d_beta[slot] + dmean * weight * s;
        }
        if v > F::zero() {
            d_pi = d_pi + mean * weight * (kf - nf * pi) / v;
        }
    }
    MuDerivatives {
        d_beta,
        d_gamma1: d_pi * density,
        d_rho1_s2: F::zero(),
        d_gamma2: F::zero(),
    }
}

/// Strata-mode derivatives of the double-sum cluster term. `eta1_at` maps a
/// second-stratum proportion to the stratum-1 linear predictor; `eta2` is
/// the stratum-2 linear predictor.
fn mu_derivatives_strata<F: Scalar>(
    rec: &ClusterRecord<F>,
    ctx: &StackContext<'_, F>,
    view: &ThetaView<'_, F>,
    eta1_at: &dyn Fn(F) -> F,
    eta2: F,
) -> MuDerivatives<F> {
    let outcome = &view.outcome_at_beta;
    let link1 = ctx.treatment.link;
    let link2 = ctx.stratum2.expect("strata stack").link;
    let pi2 = link2.inverse(eta2);
    let density2 = link2.inverse_deriv(eta2);
    let n1 = rec.n;
    let n2 = rec.n2.expect("strata data");
    let n1f = c::<F>(f64::from(n1));
    let n2f = c::<F>(f64::from(n2));
    let v2 = pi2 * (F::one() - pi2);
    let include_s = outcome.terms.include_s;
    let include_s2 = outcome.terms.include_s2;
    let s_slot = 1 + rec.covariates.len();

    let mut d_beta = vec![F::zero(); outcome.beta.len()];
    let mut d_gamma1 = F::zero();
    let mut d_rho1_s2 = F::zero();
    let mut d_pi2 = F::zero();
    for k2 in 0..=n2 {
        let k2f = c::<F>(f64::from(k2));
        let s2 = k2f / n2f;
        let w2 = ctx.kernel.pmf(n2, k2, pi2);
        let eta1 = eta1_at(s2);
        let pi1 = link1.inverse(eta1);
        let density1 = link1.inverse_deriv(eta1);
        let v1 = pi1 * (F::one() - pi1);
        let mut inner_mean = F::zero();
        let mut inner_d_pi1 = F::zero();
        for k1 in 0..=n1 {
            let k1f = c::<F>(f64::from(k1));
            let s1 = k1f / n1f;
            let w1 = ctx.kernel.pmf(n1, k1, pi1);
            let eta_y = outcome.eta(&rec.covariates, s1, Some(s2));
            let mean = outcome.link.inverse(eta_y);
            let dmean = outcome.link.inverse_deriv(eta_y);
            let ww = w2 * w1;
            d_beta[0] = d_beta[0] + dmean * ww;
            for (j, &l) in rec.covariates.iter().enumerate() {
                d_beta[1 + j] = d_beta[1 + j] + dmean * ww * l;
            }
            let mut slot = s_slot;
            if include_s {
                d_beta[slot] = d_beta[slot] + dmean * ww * s1;
                slot += 1;
            }
            if include_s2 {
                d_beta[slot] = d_beta[slot] + dmean * ww * s2;
            }
            inner_mean = inner_mean + mean * w1;
            if v1 > F::zero() {
                inner_d_pi1 = inner_d_pi1 + mean * w1 * (k1f - n1f * pi1) / v1;
            }
        }
        d_gamma1 = d_gamma1 + w2 * inner_d_pi1 * density1;
        d_rho1_s2 = d_rho1_s2 + w2 * inner_d_pi1 * density1 * s2;
        if v2 > F::zero() {
            d_pi2 = d_pi2 + inner_mean * w2 * (k2f - n2f * pi2) / v2;
        }
    }
    MuDerivatives {
        d_beta,
        d_gamma1,
        d_rho1_s2,
        d_gamma2: d_pi2 * density2,
    }
}

/// Result of the sandwich computation.
#[derive(Clone, Debug)]
pub struct SandwichResult<F> {
    pub layout: StackLayout,
    /// Averaged negative Jacobian of the stack.
    pub u: Matrix<F>,
    /// Averaged outer product of the stack.
    pub w: Matrix<F>,
    /// Estimated covariance of the stacked estimates (already divided by the
    /// cluster count).
    pub sigma: Matrix<F>,
    pub se: Vec<F>,
    pub condition_u: F,
    /// Largest absolute component of the averaged estimating function;
    /// should be near zero at the fitted stack.
    pub max_abs_mean_psi: F,
}

impl<F: Scalar> SandwichResult<F> {
    pub fn se_mu(&self, policy: usize) -> F {
        self.se[self.layout.mu_index(policy)]
    }

    pub fn se_delta(&self, contrast: usize) -> F {
        self.se[self.layout.delta_index(contrast)]
    }
}

/// Assembles the analytic `U` matrix (averaged negative Jacobian).
fn analytic_u<F: Scalar>(
    ctx: &StackContext<'_, F>,
    view: &ThetaView<'_, F>,
) -> Result<Matrix<F>, SandwichError> {
    let layout = &ctx.layout;
    let dim = layout.dim();
    let link_s = ctx.treatment.link;
    let mut u = Matrix::zeros(dim, dim);
    let mut row_buf = Vec::new();
    let one = F::one();

    for rec in ctx.data.records() {
        // Score blocks: -d(score)/d(coef) is the observed information.
        record_information_into(
            rec,
            ctx.treatment.model_design(),
            link_s,
            view.rho,
            one,
            layout.rho.start,
            &mut u,
            &mut row_buf,
        )?;
        if let Some(s2_fit) = ctx.stratum2 {
            record_information_into(
                rec,
                s2_fit.model_design(),
                s2_fit.link,
                view.rho2.expect("strata stack"),
                one,
                layout.rho2.clone().expect("strata stack").start,
                &mut u,
                &mut row_buf,
            )?;
        }
        record_information_into(
            rec,
            ctx.outcome.model_design(),
            ctx.outcome.link,
            &view.outcome_at_beta.beta,
            one,
            layout.beta.start,
            &mut u,
            &mut row_buf,
        )?;

        if layout.strata {
            accumulate_strata_policy_rows(rec, ctx, view, &mut u)?;
        } else {
            accumulate_base_policy_rows(rec, ctx, view, &mut u);
        }
    }

    let m = c::<F>(ctx.data.len() as f64);
    u.scale_in_place(m.recip());
    // Identity diagonals for the mean and contrast rows do not average over
    // clusters.
    for p in 0..layout.n_policies {
        let i = layout.mu_index(p);
        u[(i, i)] = u[(i, i)] + one;
    }
    for ci in 0..ctx.contrasts.len() {
        let i = layout.delta_index(ci);
        u[(i, i)] = u[(i, i)] + one;
    }
    Ok(u)
}

fn accumulate_base_policy_rows<F: Scalar>(
    rec: &ClusterRecord<F>,
    ctx: &StackContext<'_, F>,
    view: &ThetaView<'_, F>,
    u: &mut Matrix<F>,
) {
    let layout = &ctx.layout;
    let cov_dim = ctx.covariate_dim();
    let link_s = ctx.treatment.link;
    let off = dot(&rec.covariates, view.rho_covariate_slopes(cov_dim));

    let mut by_policy = Vec::with_capacity(layout.n_policies);
    for p in 0..layout.n_policies {
        let eta_s = view.gamma1[p] + off;
        let density = link_s.inverse_deriv(eta_s);

        // Intercept row: psi = h(eta) - alpha.
        let g = layout.gamma1_index(p);
        u[(g, g)] = u[(g, g)] - density;
        for (j, &l) in rec.covariates.iter().enumerate() {
            let col = layout.rho.start + 1 + j;
            u[(g, col)] = u[(g, col)] - density * l;
        }

        // Mean row: psi = T - mu.
        let derivs = mu_derivatives_base(rec, ctx, view, eta_s);
        let row = layout.mu_index(p);
        u[(row, g)] = u[(row, g)] - derivs.d_gamma1;
        for (j, &l) in rec.covariates.iter().enumerate() {
            let col = layout.rho.start + 1 + j;
            u[(row, col)] = u[(row, col)] - derivs.d_gamma1 * l;
        }
        for (j, &db) in derivs.d_beta.iter().enumerate() {
            let col = layout.beta.start + j;
            u[(row, col)] = u[(row, col)] - db;
        }
        by_policy.push(derivs);
    }

    for (ci, &(a, b)) in ctx.contrasts.iter().enumerate() {
        let row = layout.delta_index(ci);
        let (da, db) = (&by_policy[a], &by_policy[b]);
        u[(row, layout.gamma1_index(a))] = u[(row, layout.gamma1_index(a))] - da.d_gamma1;
        u[(row, layout.gamma1_index(b))] = u[(row, layout.gamma1_index(b))] + db.d_gamma1;
        for (j, &l) in rec.covariates.iter().enumerate() {
            let col = layout.rho.start + 1 + j;
            u[(row, col)] = u[(row, col)] - (da.d_gamma1 - db.d_gamma1) * l;
        }
        for j in 0..da.d_beta.len() {
            let col = layout.beta.start + j;
            u[(row, col)] = u[(row, col)] - (da.d_beta[j] - db.d_beta[j]);
        }
    }
}

fn accumulate_strata_policy_rows<F: Scalar>(
    rec: &ClusterRecord<F>,
    ctx: &StackContext<'_, F>,
    view: &ThetaView<'_, F>,
    u: &mut Matrix<F>,
) -> Result<(), SandwichError> {
    let layout = &ctx.layout;
    let cov_dim = ctx.covariate_dim();
    let link1 = ctx.treatment.link;
    let link2 = ctx.stratum2.expect("strata stack").link;
    let off1 = dot(&rec.covariates, view.rho_covariate_slopes(cov_dim));
    let off2 = dot(&rec.covariates, view.rho2_covariate_slopes(cov_dim));
    let s2_coef = view.rho_s2_coef(cov_dim);
    let n2 = rec.n2.expect("strata data");
    let n2f = c::<F>(f64::from(n2));
    let rho1_l_start = layout.rho.start + 1;
    let rho1_s2_col = layout.rho.start + 1 + cov_dim;
    let rho2_l_start = layout.rho2.clone().expect("strata stack").start + 1;

    let mut per_policy: Vec<MuDerivatives<F>> = Vec::with_capacity(layout.n_policies);

    for p in 0..layout.n_policies {
        let gamma1 = view.gamma1[p];
        let gamma2 = view.gamma2.expect("strata stack")[p];
        let eta2 = gamma2 + off2;
        let pi2 = link2.inverse(eta2);
        let density2 = link2.inverse_deriv(eta2);
        let v2 = pi2 * (F::one() - pi2);
        let eta1_at = |s2: F| gamma1 + off1 + s2_coef * s2;

        // Stratum-2 intercept row.
        let g2 = layout.gamma2_index(p);
        u[(g2, g2)] = u[(g2, g2)] - density2;
        for (j, &l) in rec.covariates.iter().enumerate() {
            u[(g2, rho2_l_start + j)] = u[(g2, rho2_l_start + j)] - density2 * l;
        }

        // Stratum-1 intercept row: mean uptake integrates s2 over its
        // counterfactual distribution.
        let g1 = layout.gamma1_index(p);
        let mut d_g1 = F::zero();
        let mut d_g1_s2w = F::zero();
        let mut d_pi2_of_uptake = F::zero();
        for k2 in 0..=n2 {
            let k2f = c::<F>(f64::from(k2));
            let s2 = k2f / n2f;
            let w2 = ctx.kernel.pmf(n2, k2, pi2);
            let eta1 = eta1_at(s2);
            let density1 = link1.inverse_deriv(eta1);
            d_g1 = d_g1 + w2 * density1;
            d_g1_s2w = d_g1_s2w + w2 * density1 * s2;
            if v2 > F::zero() {
                d_pi2_of_uptake =
                    d_pi2_of_uptake + link1.inverse(eta1) * w2 * (k2f - n2f * pi2) / v2;
            }
        }
        u[(g1, g1)] = u[(g1, g1)] - d_g1;
        for (j, &l) in rec.covariates.iter().enumerate() {
            u[(g1, rho1_l_start + j)] = u[(g1, rho1_l_start + j)] - d_g1 * l;
        }
        u[(g1, rho1_s2_col)] = u[(g1, rho1_s2_col)] - d_g1_s2w;
        let d_g2_of_uptake = d_pi2_of_uptake * density2;
        u[(g1, g2)] = u[(g1, g2)] - d_g2_of_uptake;
        for (j, &l) in rec.covariates.iter().enumerate() {
            u[(g1, rho2_l_start + j)] = u[(g1, rho2_l_start + j)] - d_g2_of_uptake * l;
        }

        // Mean row.
        let derivs = mu_derivatives_strata(rec, ctx, view, &eta1_at, eta2);
        let row = layout.mu_index(p);
        u[(row, g1)] = u[(row, g1)] - derivs.d_gamma1;
        for (j, &l) in rec.covariates.iter().enumerate() {
            u[(row, rho1_l_start + j)] = u[(row, rho1_l_start + j)] - derivs.d_gamma1 * l;
        }
        u[(row, rho1_s2_col)] = u[(row, rho1_s2_col)] - derivs.d_rho1_s2;
        u[(row, g2)] = u[(row, g2)] - derivs.d_gamma2;
        for (j, &l) in rec.covariates.iter().enumerate() {
            u[(row, rho2_l_start + j)] = u[(row, rho2_l_start + j)] - derivs.d_gamma2 * l;
        }
        for (j, &db) in derivs.d_beta.iter().enumerate() {
            let col = layout.beta.start + j;
            u[(row, col)] = u[(row, col)] - db;
        }
        per_policy.push(derivs);
    }

    for (ci, &(a, b)) in ctx.contrasts.iter().enumerate() {
        let row = layout.delta_index(ci);
        let (pa, pb) = (&per_policy[a], &per_policy[b]);
        u[(row, layout.gamma1_index(a))] = u[(row, layout.gamma1_index(a))] - pa.d_gamma1;
        u[(row, layout.gamma1_index(b))] = u[(row, layout.gamma1_index(b))] + pb.d_gamma1;
        u[(row, layout.gamma2_index(a))] = u[(row, layout.gamma2_index(a))] - pa.d_gamma2;
        u[(row, layout.gamma2_index(b))] = u[(row, layout.gamma2_index(b))] + pb.d_gamma2;
        for (j, &l) in rec.covariates.iter().enumerate() {
            let col1 = rho1_l_start + j;
            u[(row, col1)] = u[(row, col1)] - (pa.d_gamma1 - pb.d_gamma1) * l;
            let col2 = rho2_l_start + j;
            u[(row, col2)] = u[(row, col2)] - (pa.d_gamma2 - pb.d_gamma2) * l;
        }
        u[(row, rho1_s2_col)] = u[(row, rho1_s2_col)] - (pa.d_rho1_s2 - pb.d_rho1_s2);
        for j in 0..pa.d_beta.len() {
            let col = layout.beta.start + j;
            u[(row, col)] = u[(row, col)] - (pa.d_beta[j] - pb.d_beta[j]);
        }
    }
    Ok(())
}

/// Central finite-difference build of `U` from the estimating functions;
/// used to cross-validate the analytic assembly.
pub fn finite_difference_u<F: Scalar>(
    ctx: &StackContext<'_, F>,
    stack: &ThetaStack<F>,
    relative_step: F,
) -> Result<Matrix<F>, SandwichError> {
    let dim = ctx.layout.dim();
    let m = c::<F>(ctx.data.len() as f64);
    let mut u = Matrix::zeros(dim, dim);
    let mut theta = stack.theta.clone();
    for col in 0..dim {
        let step = relative_step * F::one().max(theta[col].abs());
        let original = theta[col];

        theta[col] = original + step;
        let view = ThetaView::new(&theta, ctx)?;
        let mut plus = vec![KahanSum::new(); dim];
        let mut buf = Vec::new();
        let mut psi = vec![F::zero(); dim];
        for rec in ctx.data.records() {
            psi.iter_mut().for_each(|x| *x = F::zero());
            psi_into(rec, ctx, &view, &mut psi, &mut buf)?;
            for (acc, &x) in plus.iter_mut().zip(&psi) {
                acc.add(x);
            }
        }

        theta[col] = original - step;
        let view = ThetaView::new(&theta, ctx)?;
        let mut minus = vec![KahanSum::new(); dim];
        for rec in ctx.data.records() {
            psi.iter_mut().for_each(|x| *x = F::zero());
            psi_into(rec, ctx, &view, &mut psi, &mut buf)?;
            for (acc, &x) in minus.iter_mut().zip(&psi) {
                acc.add(x);
            }
        }
        theta[col] = original;

        let denom = c::<F>(2.0) * step * m;
        for row in 0..dim {
            u[(row, col)] = -(plus[row].value() - minus[row].value()) / denom;
        }
    }
    Ok(u)
}

/// Inverts `U`, forms `U^{-1} W U^{-T} / m`, and extracts standard errors.
pub fn sandwich_cov<F: Scalar>(
    u: &Matrix<F>,
    w: &Matrix<F>,
    m: usize,
    layout: &StackLayout,
) -> Result<(Matrix<F>, Vec<F>, F), SandwichError> {
    let lu = FullPivLu::new(u);
    let u_inv = lu.inverse().ok_or_else(|| {
        let column = lu.first_deficient_column().unwrap_or(0);
        SandwichError::SingularInformation {
            block: layout.block_label(column),
            column,
        }
    })?;
    let condition = u.norm_one() * u_inv.norm_one();
    let mut sigma = u_inv.mat_mul(w).mat_mul(&u_inv.transpose());
    sigma.scale_in_place(c::<F>(m as f64).recip());
    let sigma = sigma.symmetrized();
    let scale = sigma.max_abs();
    let mut se = Vec::with_capacity(sigma.rows());
    for i in 0..sigma.rows() {
        let v = sigma[(i, i)];
        if v < -c::<F>(1e-12) * scale {
            return Err(SandwichError::NegativeVariance {
                block: layout.block_label(i),
                value: v.to_f64().unwrap_or(f64::NAN),
            });
        }
        se.push(v.max(F::zero()).sqrt());
    }
    Ok((sigma, se, condition))
}

/// Computes the empirical sandwich covariance of the stacked estimates.
pub fn sandwich<F: Scalar>(
    ctx: &StackContext<'_, F>,
    stack: &ThetaStack<F>,
) -> Result<SandwichResult<F>, SandwichError> {
    let dim = ctx.layout.dim();
    let m = ctx.data.len();
    let view = ThetaView::new(&stack.theta, ctx)?;

    let mut w = Matrix::zeros(dim, dim);
    let mut mean_psi = vec![KahanSum::new(); dim];
    let mut psi = vec![F::zero(); dim];
    let mut buf = Vec::new();
    for rec in ctx.data.records() {
        psi.iter_mut().for_each(|x| *x = F::zero());
        psi_into(rec, ctx, &view, &mut psi, &mut buf)?;
        w.add_scaled_outer(&psi, F::one());
        for (acc, &x) in mean_psi.iter_mut().zip(&psi) {
            acc.add(x);
        }
    }
    let m_f = c::<F>(m as f64);
    w.scale_in_place(m_f.recip());
    let max_abs_mean_psi = mean_psi
        .iter()
        .map(|acc| (acc.value() / m_f).abs())
        .fold(F::zero(), F::max);

    let u = analytic_u(ctx, &view)?;
    let (sigma, se, condition_u) = sandwich_cov(&u, &w, m, &ctx.layout)?;
    Ok(SandwichResult {
        layout: ctx.layout.clone(),
        u,
        w,
        sigma,
        se,
        condition_u,
        max_abs_mean_psi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mle::{fit_outcome_model, fit_stratum1_model, fit_stratum2_model, fit_treatment_model, OutcomeTerms};
    use crate::model::{ClusterRecord, Dataset, Link, OutcomeDefinition};
    use crate::policy::{solve_policy, solve_policy_strata};

    fn base_dataset() -> Dataset<f64> {
        let spec: [(u32, f64, u32, u32); 10] = [
            (4, 0.2, 1, 2),
            (6, 1.1, 3, 2),
            (8, -0.4, 5, 3),
            (5, 0.9, 2, 1),
            (7, -1.2, 4, 5),
            (6, 0.1, 2, 2),
            (9, 1.8, 6, 3),
            (5, -0.7, 1, 2),
            (8, 0.6, 4, 4),
            (6, -0.2, 3, 1),
        ];
        let recs = spec
            .iter()
            .enumerate()
            .map(|(i, &(n, l, treated, events))| {
                ClusterRecord::new(
                    format!("c{i:02}"),
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

    fn base_stack(
        data: &Dataset<f64>,
    ) -> (
        crate::mle::TreatmentModelFit<f64>,
        crate::mle::OutcomeModelFit<f64>,
        Vec<crate::policy::PolicySpec<f64>>,
    ) {
        let treatment = fit_treatment_model(data, Link::Logit).unwrap();
        let outcome = fit_outcome_model(
            data,
            OutcomeDefinition::Overall,
            Link::Logit,
            OutcomeTerms::default(),
        )
        .unwrap();
        let policies = vec![
            solve_policy(0.4, &treatment, data).unwrap(),
            solve_policy(0.6, &treatment, data).unwrap(),
        ];
        (treatment, outcome, policies)
    }

    #[test]
    fn mean_psi_vanishes_at_the_fit() {
        let data = base_dataset();
        let (treatment, outcome, policies) = base_stack(&data);
        let ctx = StackContext::new(&data, &treatment, None, &outcome, &policies, &[(1, 0)])
            .unwrap();
        let stack = build_theta(&ctx, &policies).unwrap();
        let result = sandwich(&ctx, &stack).unwrap();
        assert!(
            result.max_abs_mean_psi < 1e-6,
            "mean psi {}",
            result.max_abs_mean_psi
        );
    }

    #[test]
    fn analytic_u_matches_finite_differences() {
        let data = base_dataset();
        let (treatment, outcome, policies) = base_stack(&data);
        let ctx = StackContext::new(&data, &treatment, None, &outcome, &policies, &[(1, 0)])
            .unwrap();
        let stack = build_theta(&ctx, &policies).unwrap();
        let result = sandwich(&ctx, &stack).unwrap();
        let fd = finite_difference_u(&ctx, &stack, 1e-6).unwrap();
        for i in 0..stack.dim() {
            for j in 0..stack.dim() {
                let a = result.u[(i, j)];
                let f = fd[(i, j)];
                assert!(
                    (a - f).abs() <= 1e-5 * a.abs().max(1.0),
                    "U[{i},{j}] analytic {a} vs fd {f}"
                );
            }
        }
    }

    #[test]
    fn score_blocks_are_exactly_block_triangular() {
        let data = base_dataset();
        let (treatment, outcome, policies) = base_stack(&data);
        let ctx = StackContext::new(&data, &treatment, None, &outcome, &policies, &[(1, 0)])
            .unwrap();
        let stack = build_theta(&ctx, &policies).unwrap();
        let result = sandwich(&ctx, &stack).unwrap();
        let layout = &stack.layout;
        // Treatment score rows touch only rho columns.
        for i in layout.rho.clone() {
            for j in layout.gamma.start..layout.dim() {
                assert_eq!(result.u[(i, j)], 0.0, "U[{i},{j}] must be exactly zero");
            }
        }
        // Outcome score rows touch only beta columns.
        for i in layout.beta.clone() {
            for j in 0..layout.dim() {
                if !layout.beta.contains(&j) {
                    assert_eq!(result.u[(i, j)], 0.0, "U[{i},{j}] must be exactly zero");
                }
            }
        }
    }

    #[test]
    fn delta_row_matches_difference_of_mu_rows() {
        let data = base_dataset();
        let (treatment, outcome, policies) = base_stack(&data);
        let ctx = StackContext::new(&data, &treatment, None, &outcome, &policies, &[(1, 0)])
            .unwrap();
        let stack = build_theta(&ctx, &policies).unwrap();
        let result = sandwich(&ctx, &stack).unwrap();
        let layout = &stack.layout;
        let (m0, m1, d) = (
            layout.mu_index(0),
            layout.mu_index(1),
            layout.delta_index(0),
        );
        let lhs = result.sigma[(d, d)];
        let rhs = result.sigma[(m1, m1)] + result.sigma[(m0, m0)]
            - 2.0 * result.sigma[(m1, m0)];
        assert!(
            (lhs - rhs).abs() <= 1e-12,
            "delta variance {lhs} vs mu combination {rhs}"
        );
        // And the point estimate is the exact difference.
        assert_eq!(stack.delta(0), stack.mu(1) - stack.mu(0));
    }

    #[test]
    fn single_mean_closed_form() {
        // psi = y - mu reduces the sandwich to the population variance of y
        // over m^2.
        let ys = [0.2f64, 0.7, 0.4, 0.9, 0.1, 0.5, 0.65];
        let m = ys.len();
        let mean = ys.iter().sum::<f64>() / m as f64;
        let u = Matrix::from_rows(&[vec![1.0]]);
        let mut w = Matrix::zeros(1, 1);
        for y in ys {
            w[(0, 0)] += (y - mean) * (y - mean);
        }
        w.scale_in_place(1.0 / m as f64);
        let layout = StackLayout {
            rho: 0..0,
            rho2: None,
            gamma: 0..0,
            beta: 0..0,
            mu: 0..1,
            delta: 1..1,
            n_policies: 1,
            strata: false,
        };
        let (sigma, se, cond) = sandwich_cov(&u, &w, m, &layout).unwrap();
        let expected =
            (ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / m as f64 / m as f64).sqrt();
        assert_eq!(se[0], expected);
        assert_eq!(sigma[(0, 0)], expected * expected);
        assert_eq!(cond, 1.0);
    }

    fn strata_dataset() -> Dataset<f64> {
        let spec: [(u32, f64, u32, u32, u32, u32); 10] = [
            // (n, l, treated, events, n2, treated2)
            (4, 0.2, 1, 2, 5, 2),
            (6, 1.1, 3, 2, 4, 3),
            (8, -0.4, 5, 3, 6, 1),
            (5, 0.9, 2, 1, 7, 4),
            (7, -1.2, 4, 5, 3, 2),
            (6, 0.1, 2, 2, 5, 3),
            (9, 1.8, 6, 3, 4, 1),
            (5, -0.7, 1, 2, 6, 4),
            (8, 0.6, 4, 4, 5, 1),
            (6, -0.2, 3, 1, 4, 2),
        ];
        let recs = spec
            .iter()
            .enumerate()
            .map(|(i, &(n, l, treated, events, n2, treated2))| {
                ClusterRecord::new(
                    format!("c{i:02}"),
                    n,
                    vec![l],
                    f64::from(treated) / f64::from(n),
                    f64::from(events) / f64::from(n),
                    n,
                )
                .unwrap()
                .with_strata(f64::from(treated2) / f64::from(n2), n2)
                .unwrap()
            })
            .collect();
        Dataset::new(recs).unwrap()
    }

    #[test]
    fn strata_analytic_u_matches_finite_differences() {
        let data = strata_dataset();
        let s1 = fit_stratum1_model(&data, Link::Logit).unwrap();
        let s2 = fit_stratum2_model(&data, Link::Logit).unwrap();
        let outcome = fit_outcome_model(
            &data,
            OutcomeDefinition::Overall,
            Link::Logit,
            OutcomeTerms {
                include_s: true,
                include_s2: true,
            },
        )
        .unwrap();
        assert!(s1.converged && s2.converged && outcome.converged);
        let policies = vec![
            solve_policy_strata(0.35, &s1, &s2, &data).unwrap(),
            solve_policy_strata(0.55, &s1, &s2, &data).unwrap(),
        ];
        let ctx =
            StackContext::new(&data, &s1, Some(&s2), &outcome, &policies, &[(1, 0)]).unwrap();
        let stack = build_theta(&ctx, &policies).unwrap();
        let result = sandwich(&ctx, &stack).unwrap();
        assert!(result.max_abs_mean_psi < 1e-6);
        let fd = finite_difference_u(&ctx, &stack, 1e-6).unwrap();
        for i in 0..stack.dim() {
            for j in 0..stack.dim() {
                let a = result.u[(i, j)];
                let f = fd[(i, j)];
                assert!(
                    (a - f).abs() <= 1e-5 * a.abs().max(1.0),
                    "U[{i},{j}] analytic {a} vs fd {f}"
                );
            }
        }
    }
}
