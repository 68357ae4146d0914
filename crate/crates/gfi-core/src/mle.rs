//! Maximum-likelihood fitting of the binomial treatment and outcome models.
//!
//! All models share one engine: a binomial GLM fit by Newton-Raphson with the
//! observed information and step-halving. The per-cluster score and
//! information contributions are exposed within the crate so the sandwich
//! variance can stack them without refitting.

use crate::math::linalg::{FullPivLu, Matrix};
use crate::math::sum::KahanSum;
use crate::math::c;
use crate::model::{ClusterRecord, Dataset, Link, OutcomeDefinition};
use crate::model::BinomialKernel;
use crate::Scalar;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("need at least {needed} clusters, got {got}")]
    TooFewClusters { needed: usize, got: usize },
    #[error("design matrix is rank deficient (column {column})")]
    SingularDesign { column: usize },
    #[error("every cluster has a zero outcome denominator; the likelihood is empty")]
    EmptyLikelihood,
    #[error("cluster {id}: outcome denominator {found} does not match the {definition} definition (expected {expected})")]
    DenominatorMismatch {
        id: String,
        found: u32,
        expected: u32,
        definition: &'static str,
    },
    #[error("cluster {id}: strata fields required by this model are missing")]
    MissingStrata { id: String },
    #[error("coefficient vector has length {found}, expected {expected}")]
    CoefficientLength { found: usize, expected: usize },
}

/// How a fit terminated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitStatus {
    /// Every summed score component is within tolerance.
    Converged,
    /// A Newton step ran the linear predictor past the divergence bound on
    /// every step-halving; typically separation.
    LinearPredictorDiverged,
    /// No step-halving improved the likelihood and the score is still large.
    Stalled,
    /// Iteration budget exhausted before the score tolerance was met.
    IterationLimit,
}

impl FitStatus {
    pub fn label(self) -> &'static str {
        match self {
            FitStatus::Converged => "converged",
            FitStatus::LinearPredictorDiverged => "diverged",
            FitStatus::Stalled => "stalled",
            FitStatus::IterationLimit => "iteration_limit",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GlmOptions<F> {
    pub max_iterations: u32,
    pub max_step_halvings: u32,
    /// Convergence requires every component of the summed score to be within
    /// this bound.
    pub score_tolerance: F,
    /// Absolute linear-predictor bound beyond which the fit is declared
    /// divergent.
    pub divergence_eta: F,
}

impl<F: Scalar> Default for GlmOptions<F> {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            max_step_halvings: 30,
            score_tolerance: c(1e-8),
            divergence_eta: c(30.0),
        }
    }
}

/// Which binomial regression is being evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ModelDesign {
    /// Treated proportion given covariates.
    Treatment,
    /// First-stratum treated proportion given covariates and the second
    /// stratum's treated proportion.
    Stratum1,
    /// Second-stratum treated proportion given covariates.
    Stratum2,
    /// Outcome proportion given covariates and treated proportion(s).
    Outcome { include_s: bool, include_s2: bool },
}

impl ModelDesign {
    pub(crate) fn dim(self, covariate_dim: usize) -> usize {
        1 + covariate_dim
            + match self {
                ModelDesign::Treatment | ModelDesign::Stratum2 => 0,
                ModelDesign::Stratum1 => 1,
                ModelDesign::Outcome {
                    include_s,
                    include_s2,
                } => usize::from(include_s) + usize::from(include_s2),
            }
    }

    pub(crate) fn fill_row<F: Scalar>(
        self,
        rec: &ClusterRecord<F>,
        row: &mut Vec<F>,
    ) -> Result<(), FitError> {
        row.clear();
        row.push(F::one());
        row.extend_from_slice(&rec.covariates);
        let s2 = || {
            rec.s2.ok_or_else(|| FitError::MissingStrata {
                id: rec.id.clone(),
            })
        };
        match self {
            ModelDesign::Treatment | ModelDesign::Stratum2 => {}
            ModelDesign::Stratum1 => row.push(s2()?),
            ModelDesign::Outcome {
                include_s,
                include_s2,
            } => {
                if include_s {
                    row.push(rec.s);
                }
                if include_s2 {
                    row.push(s2()?);
                }
            }
        }
        Ok(())
    }

    /// (successes, trials) for this record.
    pub(crate) fn counts<F: Scalar>(self, rec: &ClusterRecord<F>) -> Result<(F, F), FitError> {
        match self {
            ModelDesign::Treatment | ModelDesign::Stratum1 => Ok((
                c::<F>(f64::from(rec.treated_count())),
                c::<F>(f64::from(rec.n)),
            )),
            ModelDesign::Stratum2 => {
                let (s2, n2) = match (rec.s2, rec.n2) {
                    (Some(s2), Some(n2)) => (s2, n2),
                    _ => {
                        return Err(FitError::MissingStrata {
                            id: rec.id.clone(),
                        })
                    }
                };
                let successes = (s2 * c::<F>(f64::from(n2))).round();
                Ok((successes, c::<F>(f64::from(n2))))
            }
            ModelDesign::Outcome { .. } => {
                Ok((rec.outcome_events(), c::<F>(f64::from(rec.y_denominator))))
            }
        }
    }
}

/// Materialized regression row.
struct DesignRow<F> {
    x: Vec<F>,
    successes: F,
    trials: F,
}

struct GlmProblem<F> {
    rows: Vec<DesignRow<F>>,
    dim: usize,
    link: Link,
    /// Sum of log binomial coefficients; makes the reported log-likelihood
    /// comparable across software.
    loglik_constant: F,
}

impl<F: Scalar> GlmProblem<F> {
    fn new(data: &Dataset<F>, design: ModelDesign, link: Link) -> Result<Self, FitError> {
        let dim = design.dim(data.covariate_dim());
        let mut rows = Vec::with_capacity(data.len());
        let mut row_buf = Vec::with_capacity(dim);
        let mut max_trials = 0u32;
        for rec in data.records() {
            let (successes, trials) = design.counts(rec)?;
            if trials <= F::zero() {
                // Zero-trial clusters carry no likelihood information.
                continue;
            }
            design.fill_row(rec, &mut row_buf)?;
            max_trials = max_trials.max(trials.to_u32().unwrap_or(0));
            rows.push(DesignRow {
                x: row_buf.clone(),
                successes,
                trials,
            });
        }
        if rows.is_empty() {
            return Err(FitError::EmptyLikelihood);
        }
        let kernel = BinomialKernel::with_max_n(max_trials as usize);
        let mut constant = KahanSum::new();
        for row in &rows {
            let n = row.trials.to_u32().expect("integral trials");
            let k = row.successes.to_u32().expect("integral successes");
            constant.add(kernel.ln_choose(n, k));
        }
        Ok(Self {
            rows,
            dim,
            link,
            loglik_constant: constant.value(),
        })
    }

    fn check_rank(&self) -> Result<(), FitError> {
        let mut gram = Matrix::zeros(self.dim, self.dim);
        for row in &self.rows {
            gram.add_scaled_outer(&row.x, F::one());
        }
        let lu = FullPivLu::new(&gram);
        if lu.is_invertible() {
            Ok(())
        } else {
            Err(FitError::SingularDesign {
                column: lu.first_deficient_column().unwrap_or(0),
            })
        }
    }

    fn loglik(&self, coef: &[F]) -> F {
        let mut acc = KahanSum::new();
        for row in &self.rows {
            let eta = dot(&row.x, coef);
            let p = self.link.inverse(eta);
            let mut term = F::zero();
            if row.successes > F::zero() {
                term = term + row.successes * p.ln();
            }
            let failures = row.trials - row.successes;
            if failures > F::zero() {
                term = term + failures * (-p).ln_1p();
            }
            acc.add(term);
        }
        acc.value() + self.loglik_constant
    }

    fn score_into(&self, coef: &[F], out: &mut [F]) {
        let mut acc: Vec<KahanSum<F>> = vec![KahanSum::new(); self.dim];
        for row in &self.rows {
            let eta = dot(&row.x, coef);
            let resid = (row.successes - row.trials * self.link.inverse(eta))
                * self.link.score_weight(eta);
            for (a, &xj) in acc.iter_mut().zip(&row.x) {
                a.add(xj * resid);
            }
        }
        for (o, a) in out.iter_mut().zip(&acc) {
            *o = a.value();
        }
    }

    /// Observed information (negative Hessian of the log-likelihood).
    fn information(&self, coef: &[F]) -> Matrix<F> {
        let mut info = Matrix::zeros(self.dim, self.dim);
        for row in &self.rows {
            let eta = dot(&row.x, coef);
            let q = information_weight(self.link, eta, row.successes, row.trials);
            info.add_scaled_outer(&row.x, q);
        }
        info
    }

    fn max_abs_eta(&self, coef: &[F]) -> F {
        self.rows
            .iter()
            .map(|row| dot(&row.x, coef).abs())
            .fold(F::zero(), F::max)
    }

    fn start_values(&self) -> Vec<F> {
        let mut successes = F::zero();
        let mut trials = F::zero();
        for row in &self.rows {
            successes = successes + row.successes;
            trials = trials + row.trials;
        }
        let pooled = (successes / trials)
            .max(c(1e-6))
            .min(F::one() - c(1e-6));
        let mut coef = vec![F::zero(); self.dim];
        coef[0] = self.link.forward(pooled).expect("pooled proportion clamped");
        coef
    }
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Per-observation curvature `n h' w - (k - n p) w'`, the diagonal weight of
/// the observed information.
fn information_weight<F: Scalar>(link: Link, eta: F, successes: F, trials: F) -> F {
    let p = link.inverse(eta);
    let w = link.score_weight(eta);
    trials * link.inverse_deriv(eta) * w - (successes - trials * p) * link.score_weight_deriv(eta)
}

struct RawFit<F> {
    coef: Vec<F>,
    status: FitStatus,
    iterations: u32,
    loglik: F,
    max_abs_score: F,
}

fn newton_raphson<F: Scalar>(problem: &GlmProblem<F>, opts: &GlmOptions<F>) -> RawFit<F> {
    let dim = problem.dim;
    let mut coef = problem.start_values();
    let mut loglik = problem.loglik(&coef);
    let mut score = vec![F::zero(); dim];
    let mut iterations = 0u32;
    let mut status = FitStatus::IterationLimit;

    for iter in 0..opts.max_iterations {
        problem.score_into(&coef, &mut score);
        let max_score = score.iter().fold(F::zero(), |m, s| m.max(s.abs()));
        if max_score <= opts.score_tolerance {
            status = FitStatus::Converged;
            break;
        }
        iterations = iter + 1;

        let info = problem.information(&coef);
        let direction = match FullPivLu::new(&info).solve(&score) {
            Some(d) => d,
            None => {
                status = FitStatus::Stalled;
                break;
            }
        };

        let mut step = F::one();
        let mut accepted = false;
        for _ in 0..=opts.max_step_halvings {
            let candidate: Vec<F> = coef
                .iter()
                .zip(&direction)
                .map(|(&ci, &di)| ci + step * di)
                .collect();
            let cand_loglik = problem.loglik(&candidate);
            if cand_loglik.is_finite() && cand_loglik > loglik {
                coef = candidate;
                loglik = cand_loglik;
                accepted = true;
                break;
            }
            step = step * c(0.5);
        }
        if !accepted {
            status = FitStatus::Stalled;
            break;
        }
        if problem.max_abs_eta(&coef) > opts.divergence_eta {
            status = FitStatus::LinearPredictorDiverged;
            break;
        }
    }

    problem.score_into(&coef, &mut score);
    let max_abs_score = score.iter().fold(F::zero(), |m, s| m.max(s.abs()));
    if max_abs_score <= opts.score_tolerance
        && matches!(status, FitStatus::IterationLimit | FitStatus::Stalled)
    {
        status = FitStatus::Converged;
    }
    RawFit {
        coef,
        status,
        iterations,
        loglik,
        max_abs_score,
    }
}

/// Fitted treatment-uptake model (plain or per-stratum).
#[derive(Clone, Debug)]
pub struct TreatmentModelFit<F> {
    /// Coefficients ordered intercept, covariates, then (stratum-1 model
    /// only) the second-stratum treated proportion.
    pub rho: Vec<F>,
    pub link: Link,
    pub converged: bool,
    pub status: FitStatus,
    pub iterations: u32,
    pub loglik: F,
    pub max_abs_score: F,
    pub(crate) design: ModelDesign,
    pub(crate) covariate_dim: usize,
}

impl<F: Scalar> TreatmentModelFit<F> {
    pub fn intercept(&self) -> F {
        self.rho[0]
    }

    /// Coefficients on the cluster covariates.
    pub fn covariate_slopes(&self) -> &[F] {
        &self.rho[1..=self.covariate_dim]
    }

    /// Coefficient on the second-stratum treated proportion, when the model
    /// conditions on it.
    pub fn stratum2_coefficient(&self) -> Option<F> {
        match self.design {
            ModelDesign::Stratum1 => Some(self.rho[self.covariate_dim + 1]),
            _ => None,
        }
    }

    pub(crate) fn model_design(&self) -> ModelDesign {
        self.design
    }
}

/// Which optional regressors the outcome model includes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OutcomeTerms {
    pub include_s: bool,
    pub include_s2: bool,
}

impl Default for OutcomeTerms {
    fn default() -> Self {
        Self {
            include_s: true,
            include_s2: false,
        }
    }
}

/// Fitted outcome-mean model.
#[derive(Clone, Debug)]
pub struct OutcomeModelFit<F> {
    /// Coefficients ordered intercept, covariates, [treated proportion],
    /// [second-stratum treated proportion].
    pub beta: Vec<F>,
    pub link: Link,
    pub terms: OutcomeTerms,
    pub outcome_def: OutcomeDefinition,
    pub converged: bool,
    pub status: FitStatus,
    pub iterations: u32,
    pub loglik: F,
    pub max_abs_score: F,
    pub(crate) covariate_dim: usize,
}

impl<F: Scalar> OutcomeModelFit<F> {
    /// Builds a fit object from known coefficients. Intended for evaluating
    /// the standardization at fixed parameters (tests, analytic work).
    pub fn from_coefficients(
        beta: Vec<F>,
        link: Link,
        terms: OutcomeTerms,
        outcome_def: OutcomeDefinition,
        covariate_dim: usize,
    ) -> Result<Self, FitError> {
        let expected = ModelDesign::Outcome {
            include_s: terms.include_s,
            include_s2: terms.include_s2,
        }
        .dim(covariate_dim);
        if beta.len() != expected {
            return Err(FitError::CoefficientLength {
                found: beta.len(),
                expected,
            });
        }
        Ok(Self {
            beta,
            link,
            terms,
            outcome_def,
            converged: true,
            status: FitStatus::Converged,
            iterations: 0,
            loglik: F::nan(),
            max_abs_score: F::zero(),
            covariate_dim,
        })
    }

    pub fn intercept(&self) -> F {
        self.beta[0]
    }

    pub fn covariate_slopes(&self) -> &[F] {
        &self.beta[1..=self.covariate_dim]
    }

    pub fn s_coefficient(&self) -> Option<F> {
        self.terms
            .include_s
            .then(|| self.beta[self.covariate_dim + 1])
    }

    pub fn s2_coefficient(&self) -> Option<F> {
        self.terms
            .include_s2
            .then(|| self.beta[self.covariate_dim + 1 + usize::from(self.terms.include_s)])
    }

    pub(crate) fn model_design(&self) -> ModelDesign {
        ModelDesign::Outcome {
            include_s: self.terms.include_s,
            include_s2: self.terms.include_s2,
        }
    }

    pub(crate) fn eta(&self, covariates: &[F], s: F, s2: Option<F>) -> F {
        let mut eta = self.beta[0] + dot(covariates, &self.beta[1..=self.covariate_dim]);
        let mut next = self.covariate_dim + 1;
        if self.terms.include_s {
            eta = eta + self.beta[next] * s;
            next += 1;
        }
        if self.terms.include_s2 {
            eta = eta + self.beta[next] * s2.expect("s2 required by model terms");
        }
        eta
    }

    /// Fitted mean outcome at the given covariates and treated proportions.
    pub fn mean(&self, covariates: &[F], s: F, s2: Option<F>) -> F {
        self.link.inverse(self.eta(covariates, s, s2))
    }
}

fn require_clusters<F: Scalar>(data: &Dataset<F>, needed: usize) -> Result<(), FitError> {
    if data.len() < needed {
        Err(FitError::TooFewClusters {
            needed,
            got: data.len(),
        })
    } else {
        Ok(())
    }
}

fn fit_treatment_design<F: Scalar>(
    data: &Dataset<F>,
    design: ModelDesign,
    link: Link,
    opts: &GlmOptions<F>,
) -> Result<TreatmentModelFit<F>, FitError> {
    require_clusters(data, 2)?;
    let problem = GlmProblem::new(data, design, link)?;
    problem.check_rank()?;
    let raw = newton_raphson(&problem, opts);
    Ok(TreatmentModelFit {
        rho: raw.coef,
        link,
        converged: raw.status == FitStatus::Converged,
        status: raw.status,
        iterations: raw.iterations,
        loglik: raw.loglik,
        max_abs_score: raw.max_abs_score,
        design,
        covariate_dim: data.covariate_dim(),
    })
}

/// Fits the treated-proportion model by maximum likelihood.
pub fn fit_treatment_model<F: Scalar>(
    data: &Dataset<F>,
    link: Link,
) -> Result<TreatmentModelFit<F>, FitError> {
    fit_treatment_design(data, ModelDesign::Treatment, link, &GlmOptions::default())
}

/// Fits the first-stratum treated-proportion model given covariates and the
/// second stratum's treated proportion.
pub fn fit_stratum1_model<F: Scalar>(
    data: &Dataset<F>,
    link: Link,
) -> Result<TreatmentModelFit<F>, FitError> {
    fit_treatment_design(data, ModelDesign::Stratum1, link, &GlmOptions::default())
}

/// Fits the second-stratum treated-proportion model given covariates.
pub fn fit_stratum2_model<F: Scalar>(
    data: &Dataset<F>,
    link: Link,
) -> Result<TreatmentModelFit<F>, FitError> {
    fit_treatment_design(data, ModelDesign::Stratum2, link, &GlmOptions::default())
}

fn check_denominators<F: Scalar>(
    data: &Dataset<F>,
    outcome_def: OutcomeDefinition,
) -> Result<(), FitError> {
    for rec in data.records() {
        let expected = outcome_def.denominator(rec.n, rec.s);
        if rec.y_denominator != expected {
            return Err(FitError::DenominatorMismatch {
                id: rec.id.clone(),
                found: rec.y_denominator,
                expected,
                definition: outcome_def.label(),
            });
        }
    }
    Ok(())
}

/// Fits the outcome-mean model by maximum likelihood. Clusters whose outcome
/// denominator is zero contribute nothing to the likelihood but stay in the
/// dataset for treatment modelling and standardization.
pub fn fit_outcome_model<F: Scalar>(
    data: &Dataset<F>,
    outcome_def: OutcomeDefinition,
    link: Link,
    terms: OutcomeTerms,
) -> Result<OutcomeModelFit<F>, FitError> {
    require_clusters(data, 2)?;
    check_denominators(data, outcome_def)?;
    let design = ModelDesign::Outcome {
        include_s: terms.include_s,
        include_s2: terms.include_s2,
    };
    let problem = GlmProblem::new(data, design, link)?;
    problem.check_rank()?;
    let raw = newton_raphson(&problem, &GlmOptions::default());
    Ok(OutcomeModelFit {
        beta: raw.coef,
        link,
        terms,
        outcome_def,
        converged: raw.status == FitStatus::Converged,
        status: raw.status,
        iterations: raw.iterations,
        loglik: raw.loglik,
        max_abs_score: raw.max_abs_score,
        covariate_dim: data.covariate_dim(),
    })
}

fn check_coef_len<F: Scalar>(
    data: &Dataset<F>,
    design: ModelDesign,
    coef: &[F],
) -> Result<(), FitError> {
    let expected = design.dim(data.covariate_dim());
    if coef.len() != expected {
        return Err(FitError::CoefficientLength {
            found: coef.len(),
            expected,
        });
    }
    Ok(())
}

/// Treatment-model log-likelihood at arbitrary coefficients.
pub fn treatment_loglik<F: Scalar>(
    data: &Dataset<F>,
    link: Link,
    rho: &[F],
) -> Result<F, FitError> {
    check_coef_len(data, ModelDesign::Treatment, rho)?;
    Ok(GlmProblem::new(data, ModelDesign::Treatment, link)?.loglik(rho))
}

/// Treatment-model summed score at arbitrary coefficients.
pub fn treatment_score<F: Scalar>(
    data: &Dataset<F>,
    link: Link,
    rho: &[F],
) -> Result<Vec<F>, FitError> {
    check_coef_len(data, ModelDesign::Treatment, rho)?;
    let problem = GlmProblem::new(data, ModelDesign::Treatment, link)?;
    let mut out = vec![F::zero(); problem.dim];
    problem.score_into(rho, &mut out);
    Ok(out)
}

/// Outcome-model log-likelihood at arbitrary coefficients.
pub fn outcome_loglik<F: Scalar>(
    data: &Dataset<F>,
    outcome_def: OutcomeDefinition,
    link: Link,
    terms: OutcomeTerms,
    beta: &[F],
) -> Result<F, FitError> {
    check_denominators(data, outcome_def)?;
    let design = ModelDesign::Outcome {
        include_s: terms.include_s,
        include_s2: terms.include_s2,
    };
    check_coef_len(data, design, beta)?;
    Ok(GlmProblem::new(data, design, link)?.loglik(beta))
}

/// Outcome-model summed score at arbitrary coefficients.
pub fn outcome_score<F: Scalar>(
    data: &Dataset<F>,
    outcome_def: OutcomeDefinition,
    link: Link,
    terms: OutcomeTerms,
    beta: &[F],
) -> Result<Vec<F>, FitError> {
    check_denominators(data, outcome_def)?;
    let design = ModelDesign::Outcome {
        include_s: terms.include_s,
        include_s2: terms.include_s2,
    };
    check_coef_len(data, design, beta)?;
    let problem = GlmProblem::new(data, design, link)?;
    let mut out = vec![F::zero(); problem.dim];
    problem.score_into(beta, &mut out);
    Ok(out)
}

/// Adds this record's score contribution for `design` at `coef` into `out`.
/// Zero-trial records contribute nothing.
pub(crate) fn record_score_into<F: Scalar>(
    rec: &ClusterRecord<F>,
    design: ModelDesign,
    link: Link,
    coef: &[F],
    out: &mut [F],
    row_buf: &mut Vec<F>,
) -> Result<(), FitError> {
    let (successes, trials) = design.counts(rec)?;
    if trials <= F::zero() {
        return Ok(());
    }
    design.fill_row(rec, row_buf)?;
    let eta = dot(row_buf, coef);
    let resid = (successes - trials * link.inverse(eta)) * link.score_weight(eta);
    for (o, &xj) in out.iter_mut().zip(row_buf.iter()) {
        *o = *o + xj * resid;
    }
    Ok(())
}

/// Adds `scale` times this record's observed information for `design` at
/// `coef` into the square block of `u` anchored at `(offset, offset)`.
pub(crate) fn record_information_into<F: Scalar>(
    rec: &ClusterRecord<F>,
    design: ModelDesign,
    link: Link,
    coef: &[F],
    scale: F,
    offset: usize,
    u: &mut Matrix<F>,
    row_buf: &mut Vec<F>,
) -> Result<(), FitError> {
    let (successes, trials) = design.counts(rec)?;
    if trials <= F::zero() {
        return Ok(());
    }
    design.fill_row(rec, row_buf)?;
    let eta = dot(row_buf, coef);
    let q = information_weight(link, eta, successes, trials) * scale;
    for i in 0..row_buf.len() {
        let qi = q * row_buf[i];
        for j in 0..row_buf.len() {
            u[(offset + i, offset + j)] = u[(offset + i, offset + j)] + qi * row_buf[j];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClusterRecord, Dataset};

    fn two_identical_clusters(n: u32, treated: u32) -> Dataset<f64> {
        let s = f64::from(treated) / f64::from(n);
        let recs = (0..2)
            .map(|i| ClusterRecord::new(format!("c{i}"), n, vec![], s, 0.0, 0).unwrap())
            .collect();
        Dataset::new(recs).unwrap()
    }

    #[test]
    fn intercept_only_treatment_is_pooled_logit() {
        let data = two_identical_clusters(10, 6);
        let fit = fit_treatment_model(&data, Link::Logit).unwrap();
        assert!(fit.converged);
        let expected = (0.6f64 / 0.4).ln();
        assert!((fit.rho[0] - expected).abs() < 1e-10, "rho0 {}", fit.rho[0]);
        assert!(fit.max_abs_score <= 1e-8);
    }

    #[test]
    fn intercept_only_outcome_is_pooled_logit() {
        let recs = (0..2)
            .map(|i| ClusterRecord::new(format!("c{i}"), 10, vec![], 0.0, 0.4, 10).unwrap())
            .collect();
        let data = Dataset::new(recs).unwrap();
        let fit = fit_outcome_model(
            &data,
            OutcomeDefinition::Overall,
            Link::Logit,
            OutcomeTerms {
                include_s: false,
                include_s2: false,
            },
        )
        .unwrap();
        assert!(fit.converged);
        assert!((fit.beta[0] - (0.4f64 / 0.6).ln()).abs() < 1e-10);
    }

    #[test]
    fn separation_reports_nonconvergence() {
        // Two clusters, everyone treated: the boundary MLE does not exist.
        let data = two_identical_clusters(8, 8);
        let fit = fit_treatment_model(&data, Link::Logit).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.status, FitStatus::LinearPredictorDiverged);
    }

    #[test]
    fn zero_denominator_clusters_are_excluded() {
        // One cluster has no treated members under when_treated: it must not
        // move the pooled estimate.
        let mut recs: Vec<ClusterRecord<f64>> = vec![
            ClusterRecord::new("a", 10, vec![], 0.0, 0.0, 0).unwrap(),
            ClusterRecord::new("b", 10, vec![], 0.5, 0.4, 5).unwrap(),
            ClusterRecord::new("c", 10, vec![], 0.5, 0.4, 5).unwrap(),
        ];
        let data = Dataset::new(recs.clone()).unwrap();
        let fit = fit_outcome_model(
            &data,
            OutcomeDefinition::WhenTreated,
            Link::Logit,
            OutcomeTerms {
                include_s: false,
                include_s2: false,
            },
        )
        .unwrap();
        recs.remove(0);
        let reduced = Dataset::new(recs).unwrap();
        let fit_reduced = fit_outcome_model(
            &reduced,
            OutcomeDefinition::WhenTreated,
            Link::Logit,
            OutcomeTerms {
                include_s: false,
                include_s2: false,
            },
        )
        .unwrap();
        assert!((fit.beta[0] - fit_reduced.beta[0]).abs() < 1e-12);
    }

    #[test]
    fn all_zero_denominators_is_empty_likelihood() {
        let recs = (0..3)
            .map(|i| ClusterRecord::new(format!("c{i}"), 4, vec![], 0.0, 0.0, 0).unwrap())
            .collect();
        let data = Dataset::new(recs).unwrap();
        let err = fit_outcome_model(
            &data,
            OutcomeDefinition::WhenTreated,
            Link::Logit,
            OutcomeTerms::default(),
        )
        .unwrap_err();
        assert!(matches!(err, FitError::EmptyLikelihood));
    }

    #[test]
    fn collinear_design_is_rejected() {
        // Second covariate is twice the first.
        let recs = (0..6)
            .map(|i| {
                let v = f64::from(i);
                ClusterRecord::new(format!("c{i}"), 10, vec![v, 2.0 * v], 0.5, 0.0, 0).unwrap()
            })
            .collect();
        let data = Dataset::new(recs).unwrap();
        let err = fit_treatment_model(&data, Link::Logit).unwrap_err();
        assert!(matches!(err, FitError::SingularDesign { .. }));
    }

    #[test]
    fn denominator_mismatch_is_rejected() {
        let recs = vec![
            ClusterRecord::new("a", 10, vec![], 0.5, 0.2, 10).unwrap(),
            ClusterRecord::new("b", 10, vec![], 0.5, 0.2, 5).unwrap(),
        ];
        let data = Dataset::new(recs).unwrap();
        let err = fit_outcome_model(
            &data,
            OutcomeDefinition::Overall,
            Link::Logit,
            OutcomeTerms::default(),
        )
        .unwrap_err();
        assert!(matches!(err, FitError::DenominatorMismatch { .. }));
    }

    #[test]
    fn mean_surface_is_additive_on_link_scale() {
        let fit = OutcomeModelFit::from_coefficients(
            vec![0.3, -0.02, 0.5, -0.9],
            Link::Logit,
            OutcomeTerms::default(),
            OutcomeDefinition::Overall,
            2,
        )
        .unwrap();
        // The link-scale gap between two s values must not depend on L.
        let gap = |l: &[f64]| {
            let hi = Link::Logit.forward(fit.mean(l, 0.8, None)).unwrap();
            let lo = Link::Logit.forward(fit.mean(l, 0.3, None)).unwrap();
            hi - lo
        };
        let g1 = gap(&[10.0, 1.0]);
        let g2 = gap(&[55.0, -3.0]);
        assert!((g1 - g2).abs() < 1e-9);
        assert!((g1 - (-0.9 * 0.5)).abs() < 1e-9);
    }
}
