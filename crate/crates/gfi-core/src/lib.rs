//! Cluster-level policy effect estimation under partial interference.
//!
//! The estimation stack fits binomial models for treatment uptake and for
//! cluster outcomes, solves for the intercept that shifts treatment uptake to
//! a counterfactual allocation level, standardizes the fitted outcome surface
//! over the counterfactual treatment distribution (the parametric g-formula),
//! and derives standard errors by stacking the estimating functions of every
//! fitted quantity into one M-estimator with an empirical sandwich covariance.
//!
//! All numeric code is generic over the floating-point scalar via [`Scalar`];
//! [`Real`] (`f64`) is the working precision used by the companion crates.

pub mod gformula;
pub mod math;
pub mod mle;
pub mod model;
pub mod pipeline;
pub mod policy;
pub mod variance;

use core::fmt::{Debug, Display};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the estimation stack is generic over.
///
/// Implemented by `f32` and `f64`. The tolerances quoted in operation
/// contracts and exercised by the test suite assume `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
}

/// Default working precision.
pub type Real = f64;

/// Cluster data at the default precision.
pub type ClusterRecordReal = model::ClusterRecord<Real>;
/// Dataset at the default precision.
pub type DatasetReal = model::Dataset<Real>;

pub use gformula::{
    estimate_delta, estimate_mu, estimate_mu_strata, ContrastEstimate, EstimateError,
    EstimateReport,
};
pub use mle::{
    fit_outcome_model, fit_stratum1_model, fit_stratum2_model, fit_treatment_model, FitError,
    FitStatus, GlmOptions, OutcomeModelFit, OutcomeTerms, TreatmentModelFit,
};
pub use model::{
    binomial_pmf, link_eval, BinomialKernel, ClusterRecord, DataError, Dataset, DomainError, Link,
    OutcomeDefinition,
};
pub use pipeline::{run_estimation, AnalysisOptions, AnalysisResult, PipelineError};
pub use policy::{solve_gamma0, solve_policy, solve_policy_strata, PolicySpec, SolveError};
pub use variance::{
    sandwich, sandwich_cov, wald_ci, SandwichError, SandwichResult, StackContext, StackLayout,
    ThetaStack, Z_975,
};
