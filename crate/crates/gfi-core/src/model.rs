//! Domain types shared by the whole estimation stack: cluster records, link
//! functions, outcome definitions, and the log-space binomial kernel.

use crate::math::sum::{TwoFloat, KahanSum};
use crate::math::{c, special};
use crate::Scalar;
use thiserror::Error;

/// Tolerance for "this proportion times its denominator is an integer".
const COUNT_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("linear predictor must be finite, got {0}")]
    NonFiniteEta(f64),
    #[error("success count {k} outside 0..={n}")]
    SuccessCountOutOfRange { k: u64, n: u64 },
    #[error("probability {0} outside [0, 1]")]
    ProbabilityOutOfRange(f64),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cluster {id}: size must be positive")]
    EmptySize { id: String },
    #[error("cluster {id}: treated proportion {s} outside [0, 1]")]
    TreatedProportionOutOfRange { id: String, s: f64 },
    #[error("cluster {id}: treated proportion times size ({value}) is not an integer")]
    FractionalTreatedCount { id: String, value: f64 },
    #[error("cluster {id}: outcome proportion {y} outside [0, 1]")]
    OutcomeProportionOutOfRange { id: String, y: f64 },
    #[error("cluster {id}: outcome proportion times denominator ({value}) is not an integer")]
    FractionalOutcomeCount { id: String, value: f64 },
    #[error("cluster {id}: zero outcome denominator requires y = 0, got {y}")]
    ConventionViolation { id: String, y: f64 },
    #[error("cluster {id}: non-finite covariate value")]
    NonFiniteCovariate { id: String },
    #[error("cluster {id}: second-stratum size must be positive")]
    EmptyStratum2 { id: String },
    #[error("cluster {id}: covariate dimension {found}, expected {expected}")]
    CovariateDimensionMismatch {
        id: String,
        found: usize,
        expected: usize,
    },
    #[error("cluster {id}: strata fields present on some records but not all")]
    InconsistentStrata { id: String },
    #[error("dataset contains no clusters")]
    EmptyDataset,
}

/// Monotone link between a probability and an unbounded linear predictor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Link {
    Logit,
    Probit,
}

impl Link {
    /// g: (0, 1) -> R.
    pub fn forward<F: Scalar>(self, p: F) -> Result<F, DomainError> {
        if !(p > F::zero() && p < F::one()) {
            return Err(DomainError::ProbabilityOutOfRange(
                p.to_f64().unwrap_or(f64::NAN),
            ));
        }
        Ok(match self {
            Link::Logit => p.ln() - (-p).ln_1p(),
            Link::Probit => special::norm_quantile(p),
        })
    }

    /// g^{-1}: R -> (0, 1). Total; saturates at the representable boundary
    /// for very large |eta|.
    pub fn inverse<F: Scalar>(self, eta: F) -> F {
        match self {
            Link::Logit => {
                if eta >= F::zero() {
                    ((-eta).exp() + F::one()).recip()
                } else {
                    let e = eta.exp();
                    e / (e + F::one())
                }
            }
            Link::Probit => special::norm_cdf(eta),
        }
    }

    /// d g^{-1} / d eta.
    pub fn inverse_deriv<F: Scalar>(self, eta: F) -> F {
        match self {
            Link::Logit => {
                let p = self.inverse(eta);
                p * (F::one() - p)
            }
            Link::Probit => special::norm_pdf(eta),
        }
    }

    /// Weight multiplying the raw residual in the binomial score:
    /// `inverse_deriv / (p (1 - p))`. Exactly one for the canonical logit.
    pub(crate) fn score_weight<F: Scalar>(self, eta: F) -> F {
        match self {
            Link::Logit => F::one(),
            Link::Probit => {
                let p = special::norm_cdf(eta);
                let v = p * (F::one() - p);
                special::norm_pdf(eta) / v
            }
        }
    }

    /// d score_weight / d eta. Zero for the canonical logit.
    pub(crate) fn score_weight_deriv<F: Scalar>(self, eta: F) -> F {
        match self {
            Link::Logit => F::zero(),
            Link::Probit => {
                let p = special::norm_cdf(eta);
                let v = p * (F::one() - p);
                let pdf = special::norm_pdf(eta);
                let one = F::one();
                let two = c::<F>(2.0);
                -pdf * (eta * v + (one - two * p) * pdf) / (v * v)
            }
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Link::Logit => "logit",
            Link::Probit => "probit",
        }
    }
}

impl core::str::FromStr for Link {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "logit" => Ok(Link::Logit),
            "probit" => Ok(Link::Probit),
            other => Err(format!("unknown link '{other}' (expected logit or probit)")),
        }
    }
}

/// Evaluates g^{-1}(eta), rejecting non-finite input.
pub fn link_eval<F: Scalar>(link: Link, eta: F) -> Result<F, DomainError> {
    if !eta.is_finite() {
        return Err(DomainError::NonFiniteEta(eta.to_f64().unwrap_or(f64::NAN)));
    }
    Ok(link.inverse(eta))
}

/// Which members of a cluster the outcome proportion refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutcomeDefinition {
    /// All members.
    Overall,
    /// Treated members only; zero denominator when none are treated.
    WhenTreated,
    /// Untreated members only; zero denominator when all are treated.
    WhenUntreated,
}

impl OutcomeDefinition {
    /// Outcome denominator implied by cluster size and treated proportion.
    pub fn denominator<F: Scalar>(self, n: u32, s: F) -> u32 {
        let treated = (s * c::<F>(f64::from(n)))
            .round()
            .to_u32()
            .expect("treated count fits in u32");
        match self {
            OutcomeDefinition::Overall => n,
            OutcomeDefinition::WhenTreated => treated,
            OutcomeDefinition::WhenUntreated => n - treated,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            OutcomeDefinition::Overall => "overall",
            OutcomeDefinition::WhenTreated => "when_treated",
            OutcomeDefinition::WhenUntreated => "when_untreated",
        }
    }
}

impl core::str::FromStr for OutcomeDefinition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "overall" => Ok(OutcomeDefinition::Overall),
            "when_treated" => Ok(OutcomeDefinition::WhenTreated),
            "when_untreated" => Ok(OutcomeDefinition::WhenUntreated),
            other => Err(format!(
                "unknown outcome definition '{other}' (expected overall, when_treated or when_untreated)"
            )),
        }
    }
}

/// One cluster's observed data.
///
/// `s` is the treated proportion among the `n` outcome-eligible members, `y`
/// the outcome proportion over `y_denominator` members. `s2`/`n2` describe a
/// second population stratum whose treatment enters the models but whose
/// outcomes are not measured.
#[derive(Clone, Debug)]
pub struct ClusterRecord<F> {
    pub id: String,
    pub n: u32,
    pub covariates: Vec<F>,
    pub s: F,
    pub y: F,
    pub y_denominator: u32,
    pub s2: Option<F>,
    pub n2: Option<u32>,
}

fn check_count<F: Scalar>(value: F) -> Option<F> {
    let rounded = value.round();
    if (value - rounded).abs() <= c(COUNT_TOL) {
        Some(rounded)
    } else {
        None
    }
}

impl<F: Scalar> ClusterRecord<F> {
    pub fn new(
        id: impl Into<String>,
        n: u32,
        covariates: Vec<F>,
        s: F,
        y: F,
        y_denominator: u32,
    ) -> Result<Self, DataError> {
        let id = id.into();
        if n == 0 {
            return Err(DataError::EmptySize { id });
        }
        if !(s >= F::zero() && s <= F::one()) {
            return Err(DataError::TreatedProportionOutOfRange {
                id,
                s: s.to_f64().unwrap_or(f64::NAN),
            });
        }
        let s_n = s * c::<F>(f64::from(n));
        if check_count(s_n).is_none() {
            return Err(DataError::FractionalTreatedCount {
                id,
                value: s_n.to_f64().unwrap_or(f64::NAN),
            });
        }
        if !(y >= F::zero() && y <= F::one()) {
            return Err(DataError::OutcomeProportionOutOfRange {
                id,
                y: y.to_f64().unwrap_or(f64::NAN),
            });
        }
        if y_denominator == 0 && y != F::zero() {
            return Err(DataError::ConventionViolation {
                id,
                y: y.to_f64().unwrap_or(f64::NAN),
            });
        }
        let y_den = y * c::<F>(f64::from(y_denominator));
        if check_count(y_den).is_none() {
            return Err(DataError::FractionalOutcomeCount {
                id,
                value: y_den.to_f64().unwrap_or(f64::NAN),
            });
        }
        if covariates.iter().any(|v| !v.is_finite()) {
            return Err(DataError::NonFiniteCovariate { id });
        }
        Ok(Self {
            id,
            n,
            covariates,
            s,
            y,
            y_denominator,
            s2: None,
            n2: None,
        })
    }

    /// Attaches second-stratum treatment data.
    pub fn with_strata(mut self, s2: F, n2: u32) -> Result<Self, DataError> {
        if n2 == 0 {
            return Err(DataError::EmptyStratum2 { id: self.id });
        }
        if !(s2 >= F::zero() && s2 <= F::one()) {
            return Err(DataError::TreatedProportionOutOfRange {
                id: self.id,
                s: s2.to_f64().unwrap_or(f64::NAN),
            });
        }
        let s2_n2 = s2 * c::<F>(f64::from(n2));
        if check_count(s2_n2).is_none() {
            return Err(DataError::FractionalTreatedCount {
                id: self.id,
                value: s2_n2.to_f64().unwrap_or(f64::NAN),
            });
        }
        self.s2 = Some(s2);
        self.n2 = Some(n2);
        Ok(self)
    }

    pub fn treated_count(&self) -> u32 {
        (self.s * c::<F>(f64::from(self.n)))
            .round()
            .to_u32()
            .expect("validated at construction")
    }

    /// Outcome event count `y * y_denominator` as a scalar.
    pub fn outcome_events(&self) -> F {
        (self.y * c::<F>(f64::from(self.y_denominator))).round()
    }
}

/// A validated collection of cluster records with a common covariate
/// dimension and consistent strata usage.
#[derive(Clone, Debug)]
pub struct Dataset<F> {
    records: Vec<ClusterRecord<F>>,
    covariate_dim: usize,
    has_strata: bool,
}

impl<F: Scalar> Dataset<F> {
    pub fn new(records: Vec<ClusterRecord<F>>) -> Result<Self, DataError> {
        let first = records.first().ok_or(DataError::EmptyDataset)?;
        let covariate_dim = first.covariates.len();
        let has_strata = first.s2.is_some();
        for rec in &records {
            if rec.covariates.len() != covariate_dim {
                return Err(DataError::CovariateDimensionMismatch {
                    id: rec.id.clone(),
                    found: rec.covariates.len(),
                    expected: covariate_dim,
                });
            }
            if rec.s2.is_some() != has_strata {
                return Err(DataError::InconsistentStrata { id: rec.id.clone() });
            }
        }
        Ok(Self {
            records,
            covariate_dim,
            has_strata,
        })
    }

    pub fn records(&self) -> &[ClusterRecord<F>] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariate_dim
    }

    pub fn has_strata(&self) -> bool {
        self.has_strata
    }

    pub fn max_cluster_size(&self) -> u32 {
        self.records
            .iter()
            .map(|r| r.n.max(r.n2.unwrap_or(0)))
            .max()
            .unwrap_or(0)
    }

    /// Canonical ordering by id. With this ordering every downstream
    /// reduction is bit-reproducible regardless of input order.
    pub fn sorted_by_id(mut self) -> Self {
        self.records.sort_by(|a, b| a.id.cmp(&b.id));
        self
    }

    pub fn kernel(&self) -> BinomialKernel<F> {
        BinomialKernel::with_max_n(self.max_cluster_size() as usize)
    }
}

/// Log-space binomial probabilities backed by a compensated log-factorial
/// table, stable for cluster sizes of at least 10^4.
#[derive(Clone, Debug)]
pub struct BinomialKernel<F> {
    ln_factorial: Vec<TwoFloat<F>>,
}

impl<F: Scalar> BinomialKernel<F> {
    pub fn with_max_n(max_n: usize) -> Self {
        let mut table = Vec::with_capacity(max_n + 1);
        let mut acc = TwoFloat::zero();
        table.push(acc);
        for k in 1..=max_n {
            acc = acc.add_scalar(c::<F>(k as f64).ln());
            table.push(acc);
        }
        Self { ln_factorial: table }
    }

    pub fn max_n(&self) -> usize {
        self.ln_factorial.len() - 1
    }

    fn ln_choose_tf(&self, n: u32, k: u32) -> TwoFloat<F> {
        self.ln_factorial[n as usize]
            .sub(self.ln_factorial[k as usize])
            .sub(self.ln_factorial[(n - k) as usize])
    }

    pub fn ln_choose(&self, n: u32, k: u32) -> F {
        self.ln_choose_tf(n, k).value()
    }

    /// ln P(X = k) for X ~ Binomial(n, p). Requires k <= n <= max_n.
    pub fn ln_pmf(&self, n: u32, k: u32, p: F) -> F {
        debug_assert!(k <= n && (n as usize) <= self.max_n());
        // Degenerate probabilities are exact point masses.
        if p <= F::zero() {
            return if k == 0 { F::zero() } else { F::neg_infinity() };
        }
        if p >= F::one() {
            return if k == n { F::zero() } else { F::neg_infinity() };
        }
        let kf = c::<F>(f64::from(k));
        let nkf = c::<F>(f64::from(n - k));
        self.ln_choose_tf(n, k)
            .add(TwoFloat::from_product(kf, p.ln()))
            .add(TwoFloat::from_product(nkf, (-p).ln_1p()))
            .value()
    }

    /// P(X = k) for X ~ Binomial(n, p).
    pub fn pmf(&self, n: u32, k: u32, p: F) -> F {
        self.ln_pmf(n, k, p).exp()
    }

    /// Smallest index window `[lo, hi]` whose probability mass is at least
    /// `1 - tail_mass`, grown outward from the mode. Used to bound lattice
    /// sums over very large clusters.
    pub fn support_window(&self, n: u32, p: F, tail_mass: F) -> (u32, u32) {
        if p <= F::zero() {
            return (0, 0);
        }
        if p >= F::one() {
            return (n, n);
        }
        let mode = ((c::<F>(f64::from(n) + 1.0) * p)
            .floor()
            .to_u32()
            .unwrap_or(0))
        .min(n);
        let mut lo = mode;
        let mut hi = mode;
        let mut mass = KahanSum::new();
        mass.add(self.pmf(n, mode, p));
        let target = F::one() - tail_mass;
        while mass.value() < target && (lo > 0 || hi < n) {
            let below = if lo > 0 {
                self.pmf(n, lo - 1, p)
            } else {
                F::neg_infinity()
            };
            let above = if hi < n {
                self.pmf(n, hi + 1, p)
            } else {
                F::neg_infinity()
            };
            if below >= above {
                lo -= 1;
                mass.add(below);
            } else {
                hi += 1;
                mass.add(above);
            }
        }
        (lo, hi)
    }
}

/// Binomial probability mass `C(n, k) p^k (1-p)^{n-k}` with argument checks.
pub fn binomial_pmf<F: Scalar>(n: u32, k: u32, p: F) -> Result<F, DomainError> {
    if k > n {
        return Err(DomainError::SuccessCountOutOfRange {
            k: u64::from(k),
            n: u64::from(n),
        });
    }
    if !(p >= F::zero() && p <= F::one()) {
        return Err(DomainError::ProbabilityOutOfRange(
            p.to_f64().unwrap_or(f64::NAN),
        ));
    }
    Ok(BinomialKernel::with_max_n(n as usize).pmf(n, k, p))
}
