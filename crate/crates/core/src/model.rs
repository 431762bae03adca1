//! Population models, validated configuration and seeded data generation.
//!
//! Two-group Gaussian strategic populations come in two flavours:
//!
//! * **direct**: features `X | G=g ~ N(mu_g, I)` are what the agent improves;
//! * **latent**: skills `S | G=g ~ N(mu_g, I)` are improved, and the
//!   policymaker observes `X = Lambda S + eps`, `eps ~ N(0, I)`.
//!
//! Samples are stored column-wise: column `i` of a group matrix is one agent.

use std::fmt;
use std::ops::{Index, IndexMut};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{sigmoid, sigmoid_second, std_normal_cdf};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Name of the pseudo-random construction used by [`sample_population`].
pub const GENERATOR_NAME: &str = "chacha20-stream-per-group+ziggurat-standard-normal";

/// Smallest singular value a loading matrix may have.
pub const LOADING_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GroupId {
    /// Advantaged group.
    A,
    /// Disadvantaged group.
    D,
}

impl GroupId {
    pub const ALL: [GroupId; 2] = [GroupId::A, GroupId::D];

    pub fn other(self) -> GroupId {
        match self {
            GroupId::A => GroupId::D,
            GroupId::D => GroupId::A,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GroupId::A => "A",
            GroupId::D => "D",
        }
    }

    /// ChaCha stream id used when sampling this group.
    pub fn stream_id(self) -> u64 {
        match self {
            GroupId::A => 1,
            GroupId::D => 2,
        }
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A value for each of the two groups.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerGroup<T> {
    pub a: T,
    pub d: T,
}

impl<T> PerGroup<T> {
    pub fn new(a: T, d: T) -> Self {
        Self { a, d }
    }

    pub fn from_fn(mut f: impl FnMut(GroupId) -> T) -> Self {
        Self {
            a: f(GroupId::A),
            d: f(GroupId::D),
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(GroupId, &T) -> U) -> PerGroup<U> {
        PerGroup {
            a: f(GroupId::A, &self.a),
            d: f(GroupId::D, &self.d),
        }
    }

    pub fn try_map<U, E>(
        &self,
        mut f: impl FnMut(GroupId, &T) -> Result<U, E>,
    ) -> Result<PerGroup<U>, E> {
        Ok(PerGroup {
            a: f(GroupId::A, &self.a)?,
            d: f(GroupId::D, &self.d)?,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (GroupId, &T)> {
        [(GroupId::A, &self.a), (GroupId::D, &self.d)].into_iter()
    }

    /// Exchange the two groups' values.
    pub fn swapped(self) -> Self {
        Self {
            a: self.d,
            d: self.a,
        }
    }
}

impl<T> Index<GroupId> for PerGroup<T> {
    type Output = T;
    fn index(&self, g: GroupId) -> &T {
        match g {
            GroupId::A => &self.a,
            GroupId::D => &self.d,
        }
    }
}

impl<T> IndexMut<GroupId> for PerGroup<T> {
    fn index_mut(&mut self, g: GroupId) -> &mut T {
        match g {
            GroupId::A => &mut self.a,
            GroupId::D => &mut self.d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantKind {
    #[default]
    Direct,
    Latent,
}

/// How observed features relate to what agents improve.
#[derive(Debug, Clone, PartialEq)]
pub enum Variant {
    Direct,
    /// `X = loading * S + eps`, with `loading` of shape `p x d`.
    Latent {
        loading: Matrix,
    },
}

/// Unvalidated population record, as read from a config file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawPopulation {
    pub d: usize,
    pub mu_a: Vec<f64>,
    pub mu_d: Vec<f64>,
    pub beta: Vec<f64>,
    pub cost_a: f64,
    pub cost_d: f64,
    /// Effort mask; defaults to the first `ceil(d/2)` coordinates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<u8>>,
    /// Group-A proportion; defaults to the sample proportion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_a: Option<f64>,
    #[serde(default)]
    pub variant: VariantKind,
    /// Loading matrix rows (latent variant only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loading: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reg_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reg_weighted_by_group: Option<bool>,
}

impl RawPopulation {
    /// The ten-dimensional labor-market setting used by the reference
    /// experiment: `beta = 1`, `mu_A = 0.5`, `mu_D = 0.1`, costs 4 and 10,
    /// identity loading.
    pub fn reference_labor_market() -> Self {
        let d = 10;
        Self {
            d,
            mu_a: vec![0.5; d],
            mu_d: vec![0.1; d],
            beta: vec![1.0; d],
            cost_a: 4.0,
            cost_d: 10.0,
            mask: None,
            lambda_a: None,
            variant: VariantKind::Latent,
            loading: Some(identity_rows(d)),
            reg_weight: None,
            reg_weighted_by_group: None,
        }
    }
}

fn identity_rows(d: usize) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Default effort mask: first `ceil(d/2)` coordinates manipulable.
pub fn default_mask(d: usize) -> Vec<u8> {
    let m = d.div_ceil(2);
    (0..d).map(|i| u8::from(i < m)).collect()
}

/// One violated invariant of a population record.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Violation {
    #[error("feature dimension must be at least 1")]
    ZeroDimension,
    #[error("{field} has length {got}, expected {expected}")]
    DimensionMismatch {
        field: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("{field} contains a non-finite value")]
    NonFinite { field: &'static str },
    #[error("cost for group {group} must be positive, got {value}")]
    NonPositiveCost { group: GroupId, value: f64 },
    #[error("mask has length {got}, expected d = {expected}")]
    MaskArityMismatch { got: usize, expected: usize },
    #[error("mask entry {index} is {value}, expected 0 or 1")]
    InvalidMaskEntry { index: usize, value: u8 },
    #[error("group proportion {0} outside (0, 1)")]
    ProportionOutOfRange(f64),
    #[error("latent variant requires a loading matrix")]
    MissingLoading,
    #[error("direct variant must not carry a loading matrix")]
    UnexpectedLoading,
    #[error("loading matrix is malformed: {0}")]
    LoadingShape(String),
    #[error("loading matrix is rank deficient (smallest singular value {min_singular:e})")]
    RankDeficientLoading { min_singular: f64 },
    #[error("regularization weight must be nonnegative, got {0}")]
    NegativeRegWeight(f64),
}

/// Every invariant a population record violates.
#[derive(Debug, Clone, PartialEq, Error)]
pub struct ValidationError {
    pub violations: Vec<Violation>,
}

impl ValidationError {
    pub fn contains(&self, pred: impl Fn(&Violation) -> bool) -> bool {
        self.violations.iter().any(pred)
    }
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid population model:")?;
        for v in &self.violations {
            write!(f, "\n  - {v}")?;
        }
        Ok(())
    }
}

/// A validated two-group Gaussian strategic population.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationModel {
    mu: PerGroup<Vector>,
    beta: Vector,
    cost: PerGroup<f64>,
    mask: Vec<bool>,
    lambda_a: Option<f64>,
    variant: Variant,
    reg_weight: f64,
    reg_weighted_by_group: bool,
}

/// Validate a raw record, collecting every violation.
pub fn validate_model(raw: &RawPopulation) -> Result<PopulationModel, ValidationError> {
    let mut violations = Vec::new();
    let d = raw.d;
    if d == 0 {
        violations.push(Violation::ZeroDimension);
    }
    for (field, v) in [
        ("mu_a", &raw.mu_a),
        ("mu_d", &raw.mu_d),
        ("beta", &raw.beta),
    ] {
        if v.len() != d {
            violations.push(Violation::DimensionMismatch {
                field,
                got: v.len(),
                expected: d,
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            violations.push(Violation::NonFinite { field });
        }
    }
    for (group, value) in [(GroupId::A, raw.cost_a), (GroupId::D, raw.cost_d)] {
        if !(value > 0.0) || !value.is_finite() {
            violations.push(Violation::NonPositiveCost { group, value });
        }
    }
    let mask_raw = raw.mask.clone().unwrap_or_else(|| default_mask(d));
    if mask_raw.len() != d {
        violations.push(Violation::MaskArityMismatch {
            got: mask_raw.len(),
            expected: d,
        });
    }
    for (index, &value) in mask_raw.iter().enumerate() {
        if value > 1 {
            violations.push(Violation::InvalidMaskEntry { index, value });
        }
    }
    if let Some(l) = raw.lambda_a {
        if !(l > 0.0 && l < 1.0) {
            violations.push(Violation::ProportionOutOfRange(l));
        }
    }
    let reg_weight = raw.reg_weight.unwrap_or(1.0);
    if !(reg_weight >= 0.0) || !reg_weight.is_finite() {
        violations.push(Violation::NegativeRegWeight(reg_weight));
    }

    let variant = match (raw.variant, &raw.loading) {
        (VariantKind::Direct, None) => Some(Variant::Direct),
        (VariantKind::Direct, Some(_)) => {
            violations.push(Violation::UnexpectedLoading);
            None
        }
        (VariantKind::Latent, None) => {
            violations.push(Violation::MissingLoading);
            None
        }
        (VariantKind::Latent, Some(rows)) => match loading_from_rows(rows, d) {
            Ok(loading) => {
                let min_singular = smallest_singular_value(&loading);
                if min_singular > LOADING_RANK_TOL {
                    Some(Variant::Latent { loading })
                } else {
                    violations.push(Violation::RankDeficientLoading { min_singular });
                    None
                }
            }
            Err(v) => {
                violations.push(v);
                None
            }
        },
    };

    if !violations.is_empty() {
        return Err(ValidationError { violations });
    }
    Ok(PopulationModel {
        mu: PerGroup::new(
            Vector::from_vec(raw.mu_a.clone()),
            Vector::from_vec(raw.mu_d.clone()),
        ),
        beta: Vector::from_vec(raw.beta.clone()),
        cost: PerGroup::new(raw.cost_a, raw.cost_d),
        mask: mask_raw.iter().map(|&b| b == 1).collect(),
        lambda_a: raw.lambda_a,
        variant: variant.expect("variant resolved when no violations"),
        reg_weight,
        reg_weighted_by_group: raw.reg_weighted_by_group.unwrap_or(true),
    })
}

fn loading_from_rows(rows: &[Vec<f64>], d: usize) -> Result<Matrix, Violation> {
    if rows.is_empty() {
        return Err(Violation::LoadingShape("no rows".into()));
    }
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != d) {
        return Err(Violation::LoadingShape(format!(
            "row {i} has {} columns, expected {d}",
            r.len()
        )));
    }
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Violation::NonFinite { field: "loading" });
    }
    Ok(Matrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

/// Smallest singular value; zero when there are more columns than rows.
pub fn smallest_singular_value(m: &Matrix) -> f64 {
    if m.ncols() > m.nrows() || m.is_empty() {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

impl PopulationModel {
    /// Dimension of the improvable coordinates (features or skills).
    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    /// Dimension of what the policymaker observes (and of each policy vector).
    pub fn feature_dim(&self) -> usize {
        match &self.variant {
            Variant::Direct => self.dim(),
            Variant::Latent { loading } => loading.nrows(),
        }
    }

    pub fn mu(&self, g: GroupId) -> &Vector {
        &self.mu[g]
    }

    pub fn beta(&self) -> &Vector {
        &self.beta
    }

    pub fn cost(&self, g: GroupId) -> f64 {
        self.cost[g]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Mask as a 0/1 vector (the diagonal of the effort matrix).
    pub fn mask_vector(&self) -> Vector {
        Vector::from_iterator(
            self.mask.len(),
            self.mask.iter().map(|&b| f64::from(u8::from(b))),
        )
    }

    pub fn lambda_a(&self) -> Option<f64> {
        self.lambda_a
    }

    pub fn variant(&self) -> &Variant {
        &self.variant
    }

    pub fn loading(&self) -> Option<&Matrix> {
        match &self.variant {
            Variant::Direct => None,
            Variant::Latent { loading } => Some(loading),
        }
    }

    pub fn is_latent(&self) -> bool {
        matches!(self.variant, Variant::Latent { .. })
    }

    pub fn reg_weight(&self) -> f64 {
        self.reg_weight
    }

    pub fn reg_weighted_by_group(&self) -> bool {
        self.reg_weighted_by_group
    }

    /// Group proportions, falling back to the sample proportions.
    pub fn group_weights(&self, n_a: usize, n_d: usize) -> PerGroup<f64> {
        let la = self
            .lambda_a
            .unwrap_or_else(|| n_a as f64 / (n_a + n_d) as f64);
        PerGroup::new(la, 1.0 - la)
    }

    /// Map a policy vector to the direction agents respond to:
    /// `theta` (direct) or `Lambda^T theta` (latent).
    pub fn effective_direction(&self, theta: &Vector) -> Vector {
        match &self.variant {
            Variant::Direct => theta.clone(),
            Variant::Latent { loading } => loading.transpose() * theta,
        }
    }

    /// Copy of this model with a different regularization weight.
    pub fn with_reg_weight(&self, reg_weight: f64) -> Self {
        Self {
            reg_weight,
            ..self.clone()
        }
    }

    /// The raw record this model validates from.
    pub fn to_raw(&self) -> RawPopulation {
        RawPopulation {
            d: self.dim(),
            mu_a: self.mu.a.as_slice().to_vec(),
            mu_d: self.mu.d.as_slice().to_vec(),
            beta: self.beta.as_slice().to_vec(),
            cost_a: self.cost.a,
            cost_d: self.cost.d,
            mask: Some(self.mask.iter().map(|&b| u8::from(b)).collect()),
            lambda_a: self.lambda_a,
            variant: match self.variant {
                Variant::Direct => VariantKind::Direct,
                Variant::Latent { .. } => VariantKind::Latent,
            },
            loading: self.loading().map(|l| {
                (0..l.nrows())
                    .map(|i| l.row(i).iter().copied().collect())
                    .collect()
            }),
            reg_weight: Some(self.reg_weight),
            reg_weighted_by_group: Some(self.reg_weighted_by_group),
        }
    }
}

/// A pair of per-group linear policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyPair {
    pub theta_a: Vector,
    pub theta_d: Vector,
}

impl PolicyPair {
    pub fn new(theta_a: Vector, theta_d: Vector) -> Self {
        Self { theta_a, theta_d }
    }

    pub fn zeros(p: usize) -> Self {
        Self::new(Vector::zeros(p), Vector::zeros(p))
    }

    /// Same policy for both groups.
    pub fn shared(theta: Vector) -> Self {
        Self::new(theta.clone(), theta)
    }

    pub fn get(&self, g: GroupId) -> &Vector {
        match g {
            GroupId::A => &self.theta_a,
            GroupId::D => &self.theta_d,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta_a.len()
    }

    pub fn is_finite(&self) -> bool {
        self.theta_a
            .iter()
            .chain(self.theta_d.iter())
            .all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.theta_a
            .iter()
            .chain(self.theta_d.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Stack `(theta_a, theta_d)` into one vector.
    pub fn flatten(&self) -> Vector {
        let p = self.dim();
        Vector::from_fn(2 * p, |i, _| {
            if i < p {
                self.theta_a[i]
            } else {
                self.theta_d[i - p]
            }
        })
    }

    pub fn unflatten(v: &Vector) -> Self {
        let p = v.len() / 2;
        Self::new(v.rows(0, p).into_owned(), v.rows(p, p).into_owned())
    }

    pub fn swapped(&self) -> Self {
        Self::new(self.theta_d.clone(), self.theta_a.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SampleError {
    #[error("group {0} needs at least one sample")]
    EmptyGroup(GroupId),
}

/// Ex-ante samples for both groups. Columns are agents.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    /// Observed features, `feature_dim x n_g`.
    pub features: PerGroup<Matrix>,
    /// Latent skills `d x n_g` (latent variant only).
    pub skills: Option<PerGroup<Matrix>>,
    pub seed: u64,
    pub generator_name: String,
}

impl SampleSet {
    /// Wrap explicit feature matrices (columns are agents).
    pub fn from_features(a: Matrix, d: Matrix) -> Self {
        Self {
            features: PerGroup::new(a, d),
            skills: None,
            seed: 0,
            generator_name: "explicit".into(),
        }
    }

    pub fn n(&self, g: GroupId) -> usize {
        self.features[g].ncols()
    }

    pub fn counts(&self) -> PerGroup<usize> {
        PerGroup::new(self.n(GroupId::A), self.n(GroupId::D))
    }

    pub fn min_count(&self) -> usize {
        self.n(GroupId::A).min(self.n(GroupId::D))
    }
}

/// Per-group generator: ChaCha20 keyed by `seed`, stream selected by group.
pub fn group_rng(seed: u64, g: GroupId) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(g.stream_id());
    rng
}

/// Draw ex-ante samples; a pure function of its arguments.
pub fn sample_population(
    model: &PopulationModel,
    n_a: usize,
    n_d: usize,
    seed: u64,
) -> Result<SampleSet, SampleError> {
    let counts = PerGroup::new(n_a, n_d);
    for g in GroupId::ALL {
        if counts[g] == 0 {
            return Err(SampleError::EmptyGroup(g));
        }
    }
    let d = model.dim();
    let drawn = PerGroup::from_fn(|g| {
        let mut rng = group_rng(seed, g);
        let n = counts[g];
        let mu = model.mu(g);
        match model.loading() {
            None => {
                let x = Matrix::from_fn(d, n, |i, _| mu[i] + std_normal(&mut rng));
                (x, None)
            }
            Some(loading) => {
                let p = loading.nrows();
                let mut s = Matrix::zeros(d, n);
                let mut x = Matrix::zeros(p, n);
                for j in 0..n {
                    for i in 0..d {
                        s[(i, j)] = mu[i] + std_normal(&mut rng);
                    }
                    let mut col = loading * s.column(j);
                    for i in 0..p {
                        col[i] += std_normal(&mut rng);
                    }
                    x.set_column(j, &col);
                }
                (x, Some(s))
            }
        }
    });
    let skills = match (&drawn.a.1, &drawn.d.1) {
        (Some(a), Some(d)) => Some(PerGroup::new(a.clone(), d.clone())),
        _ => None,
    };
    Ok(SampleSet {
        features: PerGroup::new(drawn.a.0, drawn.d.0),
        skills,
        seed,
        generator_name: GENERATOR_NAME.to_string(),
    })
}

#[inline]
pub(crate) fn std_normal(rng: &mut ChaCha20Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MarketError {
    #[error("wage must be finite and nonnegative, got {0}")]
    InvalidWage(f64),
    #[error("cost coefficient for group {0} must be positive")]
    NonPositiveCost(GroupId),
    #[error("signal means must satisfy m1 > m0 (got m0 = {m0}, m1 = {m1})")]
    SignalOrder { m0: f64, m1: f64 },
    #[error("skill law for group {0} needs a positive standard deviation")]
    SkillLaw(GroupId),
    #[error("best-response objective is not concave for group {group}: curvature {curvature:e} at skill {at}")]
    NonConcaveObjective {
        group: GroupId,
        at: f64,
        curvature: f64,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Unit-variance Gaussian signals: `X | Y=y ~ N(m_y, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalSignals {
    pub m0: f64,
    pub m1: f64,
}

impl NormalSignals {
    /// `I(x | y)`: CDF of the signal given qualification `y`.
    pub fn cdf(&self, x: f64, qualified: bool) -> f64 {
        let m = if qualified { self.m1 } else { self.m0 };
        std_normal_cdf(x - m)
    }

    /// `P(X > t | Y = 1)`.
    pub fn tpr(&self, t: f64) -> f64 {
        1.0 - self.cdf(t, true)
    }

    /// `P(X > t | Y = 0)`.
    pub fn fpr(&self, t: f64) -> f64 {
        1.0 - self.cdf(t, false)
    }

    /// `TPR - FPR = I(t|0) - I(t|1)`, computed without cancellation.
    pub fn gain(&self, t: f64) -> f64 {
        self.cdf(t, false) - self.cdf(t, true)
    }

    /// Largest possible gain, reached midway between the two means.
    pub fn max_gain(&self) -> f64 {
        self.gain(0.5 * (self.m0 + self.m1))
    }

    fn check(&self) -> Result<(), MarketError> {
        if self.m1 > self.m0 && self.m0.is_finite() && self.m1.is_finite() {
            Ok(())
        } else {
            Err(MarketError::SignalOrder {
                m0: self.m0,
                m1: self.m1,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkillLaw {
    pub mean: f64,
    pub sd: f64,
}

/// One-dimensional continuous labor market with group-blind threshold hiring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousMarket1D {
    wage: f64,
    cost: PerGroup<f64>,
    signals: NormalSignals,
    skill: PerGroup<SkillLaw>,
    span: f64,
}

pub const DEFAULT_SKILL_SPAN: f64 = 10.0;

impl ContinuousMarket1D {
    pub fn new(
        wage: f64,
        cost: PerGroup<f64>,
        signals: NormalSignals,
        skill: PerGroup<SkillLaw>,
    ) -> Result<Self, MarketError> {
        Self::with_span(wage, cost, signals, skill, DEFAULT_SKILL_SPAN)
    }

    pub fn with_span(
        wage: f64,
        cost: PerGroup<f64>,
        signals: NormalSignals,
        skill: PerGroup<SkillLaw>,
        span: f64,
    ) -> Result<Self, MarketError> {
        if !(wage >= 0.0) || !wage.is_finite() {
            return Err(MarketError::InvalidWage(wage));
        }
        signals.check()?;
        for g in GroupId::ALL {
            if !(cost[g] > 0.0) {
                return Err(MarketError::NonPositiveCost(g));
            }
            if !(skill[g].sd > 0.0) {
                return Err(MarketError::SkillLaw(g));
            }
        }
        if !(span > 0.0) {
            return Err(MarketError::Invalid(format!(
                "search span must be positive, got {span}"
            )));
        }
        let market = Self {
            wage,
            cost,
            signals,
            skill,
            span,
        };
        // Worst case over thresholds: the gain peaks between the signal means.
        let worst = signals.max_gain();
        for g in GroupId::ALL {
            market.check_concavity(g, worst, -40.0, 40.0)?;
        }
        Ok(market)
    }

    pub fn wage(&self) -> f64 {
        self.wage
    }
    pub fn cost(&self, g: GroupId) -> f64 {
        self.cost[g]
    }
    pub fn signals(&self) -> NormalSignals {
        self.signals
    }
    pub fn skill(&self, g: GroupId) -> SkillLaw {
        self.skill[g]
    }
    pub fn span(&self) -> f64 {
        self.span
    }

    /// `P(X > t | S = s) = sigma(s) (1 - I(t|1)) + (1 - sigma(s)) (1 - I(t|0))`.
    pub fn hire_survival(&self, t: f64, s: f64) -> f64 {
        let q = sigmoid(s);
        q * self.signals.tpr(t) + (1.0 - q) * self.signals.fpr(t)
    }

    /// Curvature check of `w * survival(t | s*) - c/2 (s* - s)^2` on a grid of `[lo, hi]`.
    pub(crate) fn check_concavity(
        &self,
        g: GroupId,
        gain: f64,
        lo: f64,
        hi: f64,
    ) -> Result<(), MarketError> {
        const GRID: usize = 401;
        let c = self.cost[g];
        for k in 0..GRID {
            let s = lo + (hi - lo) * k as f64 / (GRID - 1) as f64;
            let curvature = self.wage * gain * sigmoid_second(s) - c;
            if curvature >= 0.0 {
                return Err(MarketError::NonConcaveObjective {
                    group: g,
                    at: s,
                    curvature,
                });
            }
        }
        Ok(())
    }
}

/// Cost-of-qualification distributions for the discrete market.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum CostFamily {
    Exponential { rate: f64 },
    Uniform { upper: f64 },
}

impl CostFamily {
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        match *self {
            CostFamily::Exponential { rate } => -(-rate * x).exp_m1(),
            CostFamily::Uniform { upper } => (x / upper).min(1.0),
        }
    }

    fn check(&self) -> Result<(), MarketError> {
        let ok = match *self {
            CostFamily::Exponential { rate } => rate > 0.0 && rate.is_finite(),
            CostFamily::Uniform { upper } => upper > 0.0 && upper.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(MarketError::Invalid(format!(
                "invalid cost family {self:?}"
            )))
        }
    }
}

/// Discrete-qualification labor market with threshold hiring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoateLouryMarket {
    wage: f64,
    costs: PerGroup<CostFamily>,
    signals: NormalSignals,
    prior: PerGroup<f64>,
    p_plus: f64,
    p_minus: f64,
}

impl CoateLouryMarket {
    pub fn new(
        wage: f64,
        costs: PerGroup<CostFamily>,
        signals: NormalSignals,
        prior: PerGroup<f64>,
        p_plus: f64,
        p_minus: f64,
    ) -> Result<Self, MarketError> {
        if !(wage > 0.0) || !wage.is_finite() {
            return Err(MarketError::InvalidWage(wage));
        }
        signals.check()?;
        for g in GroupId::ALL {
            costs[g].check()?;
            if !(0.0..=1.0).contains(&prior[g]) {
                return Err(MarketError::Invalid(format!(
                    "prior qualification rate for {g} must be in [0, 1]"
                )));
            }
        }
        if !(p_plus > 0.0 && p_minus > 0.0) {
            return Err(MarketError::Invalid("firm payoffs must be positive".into()));
        }
        let market = Self {
            wage,
            costs,
            signals,
            prior,
            p_plus,
            p_minus,
        };
        market.check_orders()?;
        Ok(market)
    }

    fn check_orders(&self) -> Result<(), MarketError> {
        let lo = self.signals.m0 - 8.0;
        let hi = self.signals.m1 + 8.0;
        let mut prev = PerGroup::new(0.0, 0.0);
        for k in 0..=400 {
            let x = lo + (hi - lo) * k as f64 / 400.0;
            if self.signals.cdf(x, true) > self.signals.cdf(x, false) {
                return Err(MarketError::Invalid(format!(
                    "signal laws are not stochastically ordered at {x}"
                )));
            }
            let c = x.max(0.0) * self.wage;
            for g in GroupId::ALL {
                let e = self.costs[g].cdf(c);
                if !(0.0..=1.0).contains(&e) || e < prev[g] {
                    return Err(MarketError::Invalid(format!(
                        "cost CDF for {g} is not monotone"
                    )));
                }
                prev[g] = e;
            }
        }
        Ok(())
    }

    pub fn wage(&self) -> f64 {
        self.wage
    }
    pub fn cost_family(&self, g: GroupId) -> CostFamily {
        self.costs[g]
    }
    pub fn signals(&self) -> NormalSignals {
        self.signals
    }
    pub fn prior(&self, g: GroupId) -> f64 {
        self.prior[g]
    }
    pub fn payoffs(&self) -> (f64, f64) {
        (self.p_plus, self.p_minus)
    }

    /// Same market with the two groups' cost laws and priors exchanged.
    pub fn relabeled(&self) -> Self {
        Self {
            costs: self.costs.swapped(),
            prior: self.prior.swapped(),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn reference_raw_direct() -> RawPopulation {
        RawPopulation {
            variant: VariantKind::Direct,
            loading: None,
            ..RawPopulation::reference_labor_market()
        }
    }

    #[test]
    fn reference_record_validates() {
        let m = validate_model(&RawPopulation::reference_labor_market()).unwrap();
        assert_eq!(m.dim(), 10);
        assert_eq!(m.feature_dim(), 10);
        assert!(m.is_latent());
        assert_eq!(m.cost(GroupId::A), 4.0);
        assert_eq!(m.cost(GroupId::D), 10.0);
        assert_eq!(m.reg_weight(), 1.0);
        assert_eq!(m.mask().iter().filter(|&&b| b).count(), 5);
        assert!(m.mask()[..5].iter().all(|&b| b));
    }

    #[test]
    fn zero_cost_is_rejected() {
        let raw = RawPopulation {
            cost_d: 0.0,
            ..reference_raw_direct()
        };
        let err = validate_model(&raw).unwrap_err();
        assert!(err.contains(|v| matches!(
            v,
            Violation::NonPositiveCost {
                group: GroupId::D,
                ..
            }
        )));
    }

    #[test]
    fn short_mask_is_rejected() {
        let raw = RawPopulation {
            mask: Some(vec![1; 9]),
            ..reference_raw_direct()
        };
        let err = validate_model(&raw).unwrap_err();
        assert!(err.contains(|v| matches!(
            v,
            Violation::MaskArityMismatch {
                got: 9,
                expected: 10
            }
        )));
    }

    #[test]
    fn every_violation_is_reported() {
        let raw = RawPopulation {
            cost_a: -1.0,
            cost_d: 0.0,
            mask: Some(vec![1, 0, 2]),
            lambda_a: Some(1.0),
            variant: VariantKind::Latent,
            loading: None,
            ..reference_raw_direct()
        };
        let err = validate_model(&raw).unwrap_err();
        assert!(err.contains(|v| matches!(
            v,
            Violation::NonPositiveCost {
                group: GroupId::A,
                ..
            }
        )));
        assert!(err.contains(|v| matches!(
            v,
            Violation::NonPositiveCost {
                group: GroupId::D,
                ..
            }
        )));
        assert!(err.contains(|v| matches!(v, Violation::MaskArityMismatch { .. })));
        assert!(err.contains(|v| matches!(v, Violation::InvalidMaskEntry { index: 2, value: 2 })));
        assert!(err.contains(|v| matches!(v, Violation::ProportionOutOfRange(_))));
        assert!(err.contains(|v| matches!(v, Violation::MissingLoading)));
        assert!(err.to_string().lines().count() >= 7);
    }

    #[test]
    fn rank_deficient_loading_is_rejected() {
        let mut rows = identity_rows(10);
        rows[3] = rows[2].clone();
        let raw = RawPopulation {
            loading: Some(rows),
            ..RawPopulation::reference_labor_market()
        };
        let err = validate_model(&raw).unwrap_err();
        assert!(err.contains(|v| matches!(v, Violation::RankDeficientLoading { .. })));
    }

    #[test]
    fn direct_with_loading_is_rejected() {
        let raw = RawPopulation {
            variant: VariantKind::Direct,
            ..RawPopulation::reference_labor_market()
        };
        let err = validate_model(&raw).unwrap_err();
        assert_eq!(err.violations, vec![Violation::UnexpectedLoading]);
    }

    #[test]
    fn revalidation_is_identity() {
        for raw in [
            RawPopulation::reference_labor_market(),
            reference_raw_direct(),
        ] {
            let m = validate_model(&raw).unwrap();
            assert_eq!(validate_model(&m.to_raw()).unwrap(), m);
        }
    }

    #[test]
    fn group_weights_default_to_sample_proportion() {
        let m = validate_model(&reference_raw_direct()).unwrap();
        let w = m.group_weights(300, 100);
        assert_eq!(w.a, 0.75);
        assert_eq!(w.d, 0.25);
        let fixed = validate_model(&RawPopulation {
            lambda_a: Some(0.4),
            ..reference_raw_direct()
        })
        .unwrap();
        assert_eq!(fixed.group_weights(300, 100).a, 0.4);
    }

    #[test]
    fn sampling_is_deterministic_and_group_streams_differ() {
        let m = validate_model(&reference_raw_direct()).unwrap();
        let s1 = sample_population(&m, 5, 5, 0).unwrap();
        let s2 = sample_population(&m, 5, 5, 0).unwrap();
        assert_eq!(s1, s2);
        let centered_a = &s1.features.a - Matrix::from_fn(10, 5, |i, _| m.mu(GroupId::A)[i]);
        let centered_d = &s1.features.d - Matrix::from_fn(10, 5, |i, _| m.mu(GroupId::D)[i]);
        assert_ne!(centered_a, centered_d);
        let s3 = sample_population(&m, 5, 5, 1).unwrap();
        assert_ne!(s1.features.a, s3.features.a);
        assert_eq!(s1.generator_name, GENERATOR_NAME);
    }

    #[test]
    fn empty_group_is_rejected() {
        let m = validate_model(&reference_raw_direct()).unwrap();
        assert_eq!(
            sample_population(&m, 0, 3, 0).unwrap_err(),
            SampleError::EmptyGroup(GroupId::A)
        );
    }

    #[test]
    fn latent_sampling_keeps_skills() {
        let m = validate_model(&RawPopulation::reference_labor_market()).unwrap();
        let s = sample_population(&m, 4, 3, 7).unwrap();
        let skills = s.skills.as_ref().unwrap();
        assert_eq!(skills.a.shape(), (10, 4));
        assert_eq!(s.features.d.shape(), (10, 3));
        // X - S is pure noise, never exactly zero.
        assert!((&s.features.a - &skills.a).iter().all(|e| *e != 0.0));
    }

    #[test]
    fn continuous_market_rejects_small_cost() {
        let err = ContinuousMarket1D::new(
            50.0,
            PerGroup::new(0.1, 0.1),
            NormalSignals { m0: 0.0, m1: 2.0 },
            PerGroup::new(
                SkillLaw { mean: 0.0, sd: 1.0 },
                SkillLaw { mean: 0.0, sd: 1.0 },
            ),
        )
        .unwrap_err();
        assert!(matches!(err, MarketError::NonConcaveObjective { .. }));
    }

    #[test]
    fn cost_family_cdfs() {
        let e = CostFamily::Exponential { rate: 2.0 };
        assert!((e.cdf(0.5) - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert_eq!(e.cdf(-1.0), 0.0);
        let u = CostFamily::Uniform { upper: 2.0 };
        assert_eq!(u.cdf(1.0), 0.5);
        assert_eq!(u.cdf(5.0), 1.0);
    }
}
