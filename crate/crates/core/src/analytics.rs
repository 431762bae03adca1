//! Ex-post summaries: analytic Gaussian laws, plug-in moment and risk
//! estimators, and group-fairness reports.
//!
//! All estimators average probabilities (`sigma` values), never sampled labels.
//! Every group metric is a ratio of two affine functions of three group
//! averages: `A = E[f]`, `P = E[Y']` and `J = E[f Y']`.

use std::fmt;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::sigmoid;
use crate::model::{GroupId, Matrix, PerGroup, PolicyPair, PopulationModel, SampleSet, Vector};
use crate::response::PolicyResponse;

/// Denominators below this make a ratio metric undefined.
pub const DENOMINATOR_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimateError {
    #[error("group {0} has no samples")]
    EmptyGroup(GroupId),
    #[error("{what}: got dimension {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("metric {metric} is undefined for group {group} (denominator {denominator:e})")]
    DegenerateDenominator {
        metric: Metric,
        group: GroupId,
        denominator: f64,
    },
}

/// Law of `(theta_g^T X', beta^T X')` (direct) or `(theta_g^T X', beta^T S')` (latent).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSummary {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
}

impl GaussianSummary {
    pub fn is_valid(&self) -> bool {
        (self.cov[(0, 1)] - self.cov[(1, 0)]).abs() <= 1e-12 * (1.0 + self.cov.amax())
            && self.cov[(0, 0)] >= 0.0
            && self.cov[(1, 1)] >= 0.0
            && self.cov.determinant() >= -1e-12
    }
}

/// Closed-form Gaussian summary of the ex-post prediction/outcome scores.
pub fn analytic_summary(
    theta: &PolicyPair,
    group: GroupId,
    model: &PopulationModel,
) -> GaussianSummary {
    let th = theta.get(group);
    let eff = model.effective_direction(th);
    let inv_c = 1.0 / model.cost(group);
    let mu = model.mu(group);
    let beta = model.beta();
    let mask = model.mask();
    let masked = |u: &Vector, v: &Vector| -> f64 {
        u.iter()
            .zip(v.iter())
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((a, b), _)| a * b)
            .sum()
    };
    let mean = Vector2::new(
        eff.dot(mu) + inv_c * masked(&eff, &eff),
        beta.dot(mu) + inv_c * masked(beta, &eff),
    );
    let var_score = match model.loading() {
        None => th.norm_squared(),
        Some(_) => eff.norm_squared() + th.norm_squared(),
    };
    let cross = eff.dot(beta);
    let cov = Matrix2::new(var_score, cross, cross, beta.norm_squared());
    GaussianSummary { mean, cov }
}

/// Sample mean and covariance of the ex-post (score, outcome logit) pairs,
/// with a standard error for every entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmpiricalSummary {
    pub summary: GaussianSummary,
    pub mean_se: Vector2<f64>,
    pub cov_se: Matrix2<f64>,
}

/// Monte Carlo counterpart of [`analytic_summary`] over one group's samples.
///
/// The latent variant needs the drawn skills, since the outcome depends on
/// `s'` rather than on the observed features.
pub fn empirical_summary(
    samples: &SampleSet,
    theta: &PolicyPair,
    group: GroupId,
    model: &PopulationModel,
) -> Result<EmpiricalSummary, EstimateError> {
    let p = model.feature_dim();
    if theta.theta_a.len() != p || theta.theta_d.len() != p {
        return Err(EstimateError::DimensionMismatch {
            what: "policy",
            got: theta.theta_a.len().max(theta.theta_d.len()),
            expected: p,
        });
    }
    let th = theta.get(group);
    let action = crate::response::best_response_action(th, group, model);
    let x = &samples.features[group];
    let n = x.ncols();
    if n < 2 {
        return Err(EstimateError::EmptyGroup(group));
    }
    let (shift, outcome_base) = match model.loading() {
        None => (action.clone(), x.tr_mul(model.beta())),
        Some(l) => {
            let skills = samples
                .skills
                .as_ref()
                .ok_or(EstimateError::DimensionMismatch {
                    what: "latent skills",
                    got: 0,
                    expected: model.dim(),
                })?;
            (l * &action, skills[group].tr_mul(model.beta()))
        }
    };
    let u_off = th.dot(&shift);
    let z_off = model.beta().dot(&action);
    let u: Vec<f64> = x.tr_mul(th).iter().map(|v| v + u_off).collect();
    let z: Vec<f64> = outcome_base.iter().map(|v| v + z_off).collect();
    let nf = n as f64;
    let mean = Vector2::new(u.iter().sum::<f64>() / nf, z.iter().sum::<f64>() / nf);
    let cols = [&u, &z];
    let mut cov = Matrix2::zeros();
    let mut cov_se = Matrix2::zeros();
    for i in 0..2 {
        for j in 0..2 {
            let prods: Vec<f64> = (0..n)
                .map(|k| (cols[i][k] - mean[i]) * (cols[j][k] - mean[j]))
                .collect();
            let m = prods.iter().sum::<f64>() / nf;
            let var = prods.iter().map(|p| (p - m) * (p - m)).sum::<f64>() / (nf - 1.0);
            cov[(i, j)] = m * nf / (nf - 1.0);
            cov_se[(i, j)] = (var / nf).sqrt();
        }
    }
    let mean_se = Vector2::new((cov[(0, 0)] / nf).sqrt(), (cov[(1, 1)] / nf).sqrt());
    Ok(EmpiricalSummary {
        summary: GaussianSummary { mean, cov },
        mean_se,
        cov_se,
    })
}

/// Group averages `A = E[f]`, `P = E[Y']`, `J = E[f Y']`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupAverages {
    pub accept: f64,
    pub outcome: f64,
    pub joint: f64,
}

impl GroupAverages {
    /// Coordinates `(1, A, P, J)` for affine metric forms.
    pub fn basis(&self) -> [f64; 4] {
        [1.0, self.accept, self.outcome, self.joint]
    }
}

/// Gradients of the three averages with respect to the group's policy.
#[derive(Debug, Clone, PartialEq)]
pub struct AverageGradients {
    pub accept: Vector,
    pub outcome: Vector,
    pub joint: Vector,
}

impl AverageGradients {
    /// Gradients aligned with [`GroupAverages::basis`] (constant term has none).
    pub fn basis(&self) -> [Option<&Vector>; 4] {
        [
            None,
            Some(&self.accept),
            Some(&self.outcome),
            Some(&self.joint),
        ]
    }
}

/// Whether agents respond to the policy before being scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    ExPost,
    ExAnte,
}

pub(crate) fn check_inputs(
    samples: &SampleSet,
    theta: &PolicyPair,
    model: &PopulationModel,
) -> Result<(), EstimateError> {
    let p = model.feature_dim();
    if theta.theta_a.len() != p || theta.theta_d.len() != p {
        return Err(EstimateError::DimensionMismatch {
            what: "policy",
            got: theta.theta_a.len().max(theta.theta_d.len()),
            expected: p,
        });
    }
    if model.is_latent() && p != model.dim() {
        return Err(EstimateError::DimensionMismatch {
            what: "skill proxy (latent estimators need a square loading)",
            got: p,
            expected: model.dim(),
        });
    }
    for g in GroupId::ALL {
        let x = &samples.features[g];
        if x.ncols() == 0 {
            return Err(EstimateError::EmptyGroup(g));
        }
        if x.nrows() != p {
            return Err(EstimateError::DimensionMismatch {
                what: "sample features",
                got: x.nrows(),
                expected: p,
            });
        }
    }
    Ok(())
}

struct Logits {
    accept_offset: f64,
    outcome_offset: f64,
}

fn logits(
    theta_g: &Vector,
    group: GroupId,
    model: &PopulationModel,
    regime: Regime,
) -> (Logits, Option<PolicyResponse>) {
    match regime {
        Regime::ExAnte => (
            Logits {
                accept_offset: 0.0,
                outcome_offset: 0.0,
            },
            None,
        ),
        Regime::ExPost => {
            let r = PolicyResponse::new(theta_g, group, model);
            (
                Logits {
                    accept_offset: r.accept_offset,
                    outcome_offset: r.outcome_offset,
                },
                Some(r),
            )
        }
    }
}

/// Per-agent `(accept_prob, outcome_prob)` for one group, in sample order.
pub fn group_probabilities(
    samples: &SampleSet,
    theta_g: &Vector,
    group: GroupId,
    model: &PopulationModel,
    regime: Regime,
) -> Vec<(f64, f64)> {
    let x = &samples.features[group];
    let (l, _) = logits(theta_g, group, model, regime);
    let u = x.tr_mul(theta_g);
    let z = x.tr_mul(model.beta());
    u.iter()
        .zip(z.iter())
        .map(|(u, z)| (sigmoid(u + l.accept_offset), sigmoid(z + l.outcome_offset)))
        .collect()
}

/// Group averages, summed in sample order.
pub fn group_averages(
    samples: &SampleSet,
    theta_g: &Vector,
    group: GroupId,
    model: &PopulationModel,
    regime: Regime,
) -> GroupAverages {
    let probs = group_probabilities(samples, theta_g, group, model, regime);
    let n = probs.len() as f64;
    let (mut a, mut p, mut j) = (0.0, 0.0, 0.0);
    for (ai, pi) in probs {
        a += ai;
        p += pi;
        j += ai * pi;
    }
    GroupAverages {
        accept: a / n,
        outcome: p / n,
        joint: j / n,
    }
}

/// Group averages together with their gradients in `theta_g`.
///
/// Ex post, `d u / d theta = x + 2 R theta` and `d z / d theta = b`
/// (see [`PolicyResponse`]); ex ante only the accept logit moves.
pub fn group_averages_with_grad(
    samples: &SampleSet,
    theta_g: &Vector,
    group: GroupId,
    model: &PopulationModel,
    regime: Regime,
) -> (GroupAverages, AverageGradients) {
    let x = &samples.features[group];
    averages_with_grad_from(x, &x.tr_mul(model.beta()), theta_g, group, model, regime)
}

/// As [`group_averages_with_grad`], for features `x` whose outcome scores
/// `z = x^T beta` are already known.
pub fn averages_with_grad_from(
    x: &Matrix,
    z: &Vector,
    theta_g: &Vector,
    group: GroupId,
    model: &PopulationModel,
    regime: Regime,
) -> (GroupAverages, AverageGradients) {
    let n = x.ncols();
    let nf = n as f64;
    let (l, resp) = logits(theta_g, group, model, regime);
    let u = x.tr_mul(theta_g);
    // Per-agent weights on x_i for d accept and d joint.
    let mut w_accept = Vector::zeros(n);
    let mut w_joint = Vector::zeros(n);
    let (mut a_sum, mut p_sum, mut j_sum) = (0.0, 0.0, 0.0);
    let (mut da_sum, mut dp_sum, mut pda_sum, mut adp_sum) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let a = sigmoid(u[i] + l.accept_offset);
        let p = sigmoid(z[i] + l.outcome_offset);
        let da = a * (1.0 - a);
        let dp = p * (1.0 - p);
        a_sum += a;
        p_sum += p;
        j_sum += a * p;
        da_sum += da;
        dp_sum += dp;
        pda_sum += p * da;
        adp_sum += a * dp;
        w_accept[i] = da;
        w_joint[i] = p * da;
    }
    let mut d_accept = x * w_accept / nf;
    let mut d_joint = x * w_joint / nf;
    let mut d_outcome = Vector::zeros(theta_g.len());
    if let Some(r) = resp {
        let two_shift = &r.feature_shift * 2.0;
        d_accept.axpy(da_sum / nf, &two_shift, 1.0);
        d_joint.axpy(pda_sum / nf, &two_shift, 1.0);
        d_joint.axpy(adp_sum / nf, &r.outcome_grad, 1.0);
        d_outcome.axpy(dp_sum / nf, &r.outcome_grad, 0.0);
    }
    (
        GroupAverages {
            accept: a_sum / nf,
            outcome: p_sum / nf,
            joint: j_sum / nf,
        },
        AverageGradients {
            accept: d_accept,
            outcome: d_outcome,
            joint: d_joint,
        },
    )
}

/// The six conditional moments
/// `[E[Y'|A], E[Y'|D], E[f|A], E[f|D], E[fY'|A], E[fY'|D]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentVector(pub [f64; 6]);

impl MomentVector {
    pub fn from_averages(avg: &PerGroup<GroupAverages>) -> Self {
        Self([
            avg.a.outcome,
            avg.d.outcome,
            avg.a.accept,
            avg.d.accept,
            avg.a.joint,
            avg.d.joint,
        ])
    }

    pub fn as_vector(&self) -> Vector {
        Vector::from_row_slice(&self.0)
    }

    /// `|E[.|A] - E[.|D]|` for responses, acceptance and joint moments.
    pub fn pairwise_gaps(&self) -> [f64; 3] {
        let m = &self.0;
        [
            (m[0] - m[1]).abs(),
            (m[2] - m[3]).abs(),
            (m[4] - m[5]).abs(),
        ]
    }

    pub fn is_valid(&self) -> bool {
        let m = &self.0;
        m.iter().all(|v| (0.0..=1.0).contains(v))
            && m[4] <= m[0].min(m[2]) + 1e-15
            && m[5] <= m[1].min(m[3]) + 1e-15
    }
}

/// Plug-in estimate of the six ex-post moments.
pub fn plugin_moments(
    samples: &SampleSet,
    theta: &PolicyPair,
    model: &PopulationModel,
) -> Result<MomentVector, EstimateError> {
    check_inputs(samples, theta, model)?;
    let avg =
        PerGroup::from_fn(|g| group_averages(samples, theta.get(g), g, model, Regime::ExPost));
    Ok(MomentVector::from_averages(&avg))
}

/// Regularization added to the ex-post risk.
pub fn regularization(theta: &PolicyPair, model: &PopulationModel, weights: &PerGroup<f64>) -> f64 {
    let r = model.reg_weight();
    if model.reg_weighted_by_group() {
        r * (weights.a * theta.theta_a.norm_squared() + weights.d * theta.theta_d.norm_squared())
    } else {
        r * (theta.theta_a.norm_squared() + theta.theta_d.norm_squared())
    }
}

/// Disagreement probability `E[f (1 - Y') + (1 - f) Y']` from group averages.
pub fn disagreement(avg: &GroupAverages) -> f64 {
    avg.accept + avg.outcome - 2.0 * avg.joint
}

/// Plug-in ex-post risk: weighted disagreement plus regularization.
pub fn plugin_epr(
    samples: &SampleSet,
    theta: &PolicyPair,
    model: &PopulationModel,
) -> Result<f64, EstimateError> {
    check_inputs(samples, theta, model)?;
    let weights = model.group_weights(samples.n(GroupId::A), samples.n(GroupId::D));
    let avg =
        PerGroup::from_fn(|g| group_averages(samples, theta.get(g), g, model, Regime::ExPost));
    Ok(weights.a * disagreement(&avg.a)
        + weights.d * disagreement(&avg.d)
        + regularization(theta, model, &weights))
}

/// Group-level fairness metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `E[Y']`: response (base) rate.
    Res,
    /// `E[f]`: acceptance rate (demographic parity).
    Par,
    Fpr,
    Fnr,
    Ppv,
    Npv,
    /// Misclassification rate.
    Err,
    /// Per-group ex-post risk including regularization.
    Epr,
}

impl Metric {
    pub const ALL: [Metric; 8] = [
        Metric::Res,
        Metric::Par,
        Metric::Fpr,
        Metric::Fnr,
        Metric::Ppv,
        Metric::Npv,
        Metric::Err,
        Metric::Epr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Res => "m_res",
            Metric::Par => "m_par",
            Metric::Fpr => "m_fpr",
            Metric::Fnr => "m_fnr",
            Metric::Ppv => "m_ppv",
            Metric::Npv => "m_npv",
            Metric::Err => "err_rate",
            Metric::Epr => "epr",
        }
    }

    /// `(numerator, denominator)` coefficients on `(1, A, P, J)`.
    /// `None` for [`Metric::Epr`], which is not a ratio of averages.
    pub fn affine_form(self) -> Option<([f64; 4], [f64; 4])> {
        const ONE: [f64; 4] = [1.0, 0.0, 0.0, 0.0];
        Some(match self {
            Metric::Res => ([0.0, 0.0, 1.0, 0.0], ONE),
            Metric::Par => ([0.0, 1.0, 0.0, 0.0], ONE),
            Metric::Fpr => ([0.0, 1.0, 0.0, -1.0], [1.0, 0.0, -1.0, 0.0]),
            Metric::Fnr => ([0.0, 0.0, 1.0, -1.0], [0.0, 0.0, 1.0, 0.0]),
            Metric::Ppv => ([0.0, 0.0, 0.0, 1.0], [0.0, 1.0, 0.0, 0.0]),
            Metric::Npv => ([1.0, -1.0, -1.0, 1.0], [1.0, -1.0, 0.0, 0.0]),
            Metric::Err => ([0.0, 1.0, 1.0, -2.0], ONE),
            Metric::Epr => return None,
        })
    }

    /// Value from group averages; `Err(denominator)` when it is degenerate.
    pub fn ratio(self, avg: &GroupAverages) -> Option<Result<f64, f64>> {
        let (num, den) = self.affine_form()?;
        let b = avg.basis();
        let dot = |c: &[f64; 4]| c.iter().zip(b.iter()).map(|(c, b)| c * b).sum::<f64>();
        let d = dot(&den);
        Some(if d < DENOMINATOR_GUARD {
            Err(d)
        } else {
            Ok(dot(&num) / d)
        })
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Metric values for one group; `None` marks an undefined ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub res: f64,
    pub par: f64,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub err: f64,
    pub epr: f64,
}

impl GroupMetrics {
    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Res => Some(self.res),
            Metric::Par => Some(self.par),
            Metric::Fpr => self.fpr,
            Metric::Fnr => self.fnr,
            Metric::Ppv => self.ppv,
            Metric::Npv => self.npv,
            Metric::Err => Some(self.err),
            Metric::Epr => Some(self.epr),
        }
    }
}

/// Per-group metrics and absolute between-group gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub groups: PerGroup<GroupMetrics>,
    /// Every metric that could not be computed, with its denominator.
    pub undefined: Vec<(Metric, GroupId, f64)>,
}

impl FairnessReport {
    pub fn value(&self, m: Metric, g: GroupId) -> Option<f64> {
        self.groups[g].get(m)
    }

    /// `|value_A - value_D|`, or `None` if either side is undefined.
    pub fn gap(&self, m: Metric) -> Option<f64> {
        Some((self.value(m, GroupId::A)? - self.value(m, GroupId::D)?).abs())
    }

    pub fn undefined_errors(&self) -> Vec<EstimateError> {
        self.undefined
            .iter()
            .map(
                |&(metric, group, denominator)| EstimateError::DegenerateDenominator {
                    metric,
                    group,
                    denominator,
                },
            )
            .collect()
    }
}

/// Report built from precomputed group averages (any regime).
pub fn report_from_averages(
    avg: &PerGroup<GroupAverages>,
    theta: &PolicyPair,
    model: &PopulationModel,
) -> FairnessReport {
    let mut undefined = Vec::new();
    let groups = PerGroup::from_fn(|g| {
        let a = &avg[g];
        let mut ratio = |m: Metric| match m.ratio(a).expect("ratio metric") {
            Ok(v) => Some(v),
            Err(den) => {
                undefined.push((m, g, den));
                None
            }
        };
        let err = disagreement(a);
        GroupMetrics {
            res: a.outcome,
            par: a.accept,
            fpr: ratio(Metric::Fpr),
            fnr: ratio(Metric::Fnr),
            ppv: ratio(Metric::Ppv),
            npv: ratio(Metric::Npv),
            err,
            epr: err + model.reg_weight() * theta.get(g).norm_squared(),
        }
    });
    FairnessReport { groups, undefined }
}

/// Ex-post fairness report over a sample.
pub fn fairness_report(
    samples: &SampleSet,
    theta: &PolicyPair,
    model: &PopulationModel,
) -> Result<FairnessReport, EstimateError> {
    check_inputs(samples, theta, model)?;
    let avg =
        PerGroup::from_fn(|g| group_averages(samples, theta.get(g), g, model, Regime::ExPost));
    Ok(report_from_averages(&avg, theta, model))
}

/// Ex-ante metrics used by the single-metric baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExAnteMetric {
    Dp,
    Fpr,
    Fnr,
    Ppv,
    Npv,
}

impl ExAnteMetric {
    pub fn metric(self) -> Metric {
        match self {
            ExAnteMetric::Dp => Metric::Par,
            ExAnteMetric::Fpr => Metric::Fpr,
            ExAnteMetric::Fnr => Metric::Fnr,
            ExAnteMetric::Ppv => Metric::Ppv,
            ExAnteMetric::Npv => Metric::Npv,
        }
    }
}

/// `(value_A, value_D)` of an ex-ante metric: no response is applied.
pub fn exante_moments(
    samples: &SampleSet,
    theta: &PolicyPair,
    model: &PopulationModel,
    metric: ExAnteMetric,
) -> Result<[f64; 2], EstimateError> {
    check_inputs(samples, theta, model)?;
    let m = metric.metric();
    let mut out = [0.0; 2];
    for (k, g) in GroupId::ALL.into_iter().enumerate() {
        let avg = group_averages(samples, theta.get(g), g, model, Regime::ExAnte);
        out[k] = m
            .ratio(&avg)
            .expect("ratio metric")
            .map_err(|denominator| EstimateError::DegenerateDenominator {
                metric: m,
                group: g,
                denominator,
            })?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monte_carlo_summary_matches_closed_form() {
        let model = validate_model(&RawPopulation::reference_labor_market()).unwrap();
        let samples = sample_population(&model, 50_000, 50_000, 12).unwrap();
        let theta = PolicyPair::new(
            Vector::from_element(10, 0.3),
            Vector::from_element(10, -0.2),
        );
        for g in GroupId::ALL {
            let exact = analytic_summary(&theta, g, &model);
            let mc = empirical_summary(&samples, &theta, g, &model).unwrap();
            for i in 0..2 {
                assert!((mc.summary.mean[i] - exact.mean[i]).abs() <= 4.0 * mc.mean_se[i]);
                for j in 0..2 {
                    assert!(
                        (mc.summary.cov[(i, j)] - exact.cov[(i, j)]).abs()
                            <= 4.0 * mc.cov_se[(i, j)]
                    );
                }
            }
        }
    }
    use crate::model::{sample_population, validate_model, RawPopulation, VariantKind};

    fn unit_model(d: usize, cost: f64) -> PopulationModel {
        let mut beta = vec![0.0; d];
        beta[0] = 1.0;
        validate_model(&RawPopulation {
            d,
            mu_a: vec![0.0; d],
            mu_d: vec![0.0; d],
            beta,
            cost_a: cost,
            cost_d: cost,
            mask: Some(vec![1; d]),
            variant: VariantKind::Direct,
            reg_weight: Some(0.0),
            ..Default::default()
        })
        .unwrap()
    }

    fn e1(d: usize) -> Vector {
        let mut v = Vector::zeros(d);
        v[0] = 1.0;
        v
    }

    fn one_point(d: usize) -> SampleSet {
        SampleSet::from_features(Matrix::zeros(d, 1), Matrix::zeros(d, 1))
    }

    #[test]
    fn summary_unit_case() {
        let m = unit_model(2, 1.0);
        let s = analytic_summary(&PolicyPair::shared(e1(2)), GroupId::A, &m);
        assert_eq!(s.mean, Vector2::new(1.0, 1.0));
        assert_eq!(s.cov, Matrix2::new(1.0, 1.0, 1.0, 1.0));
        assert!(s.is_valid());
    }

    #[test]
    fn summary_cost_scaling() {
        let m = unit_model(2, 2.0);
        let s = analytic_summary(&PolicyPair::shared(e1(2)), GroupId::D, &m);
        assert_eq!(s.mean, Vector2::new(0.5, 0.5));
        assert_eq!(s.cov, Matrix2::new(1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn one_point_moments() {
        let m = unit_model(3, 1.0);
        let mv = plugin_moments(&one_point(3), &PolicyPair::shared(e1(3)), &m).unwrap();
        let s1 = 0.731_058_578_630_004_9;
        assert!((mv.0[0] - s1).abs() < 1e-12);
        assert!((mv.0[2] - s1).abs() < 1e-12);
        assert!((mv.0[4] - s1 * s1).abs() < 1e-12);
        assert!((mv.0[4] - 0.534_447).abs() < 1e-6);
        assert!(mv.is_valid());
    }

    #[test]
    fn one_point_epr() {
        let m = unit_model(3, 1.0);
        let epr = plugin_epr(&one_point(3), &PolicyPair::shared(e1(3)), &m).unwrap();
        assert!((epr - 0.393_224).abs() < 1e-6);
        let zero = plugin_epr(&one_point(3), &PolicyPair::zeros(3), &m).unwrap();
        assert!((zero - 0.5).abs() < 1e-15);
        let with_reg = plugin_epr(
            &one_point(3),
            &PolicyPair::shared(e1(3)),
            &m.with_reg_weight(1.0),
        )
        .unwrap();
        assert!((with_reg - epr - 1.0).abs() < 1e-14);
    }

    #[test]
    fn zero_policy_gives_half_parity() {
        let m = unit_model(3, 1.0);
        let x = Matrix::from_fn(3, 7, |i, j| (i as f64 - j as f64) * 0.3);
        let s = SampleSet::from_features(x.clone(), x);
        let dp = exante_moments(&s, &PolicyPair::zeros(3), &m, ExAnteMetric::Dp).unwrap();
        assert_eq!(dp, [0.5, 0.5]);
    }

    #[test]
    fn empty_group_is_an_error() {
        let m = unit_model(2, 1.0);
        let s = SampleSet::from_features(Matrix::zeros(2, 0), Matrix::zeros(2, 3));
        assert_eq!(
            plugin_moments(&s, &PolicyPair::zeros(2), &m).unwrap_err(),
            EstimateError::EmptyGroup(GroupId::A)
        );
        assert!(plugin_epr(&s, &PolicyPair::zeros(2), &m).is_err());
    }

    #[test]
    fn saturated_outcomes_make_fpr_undefined() {
        let m = unit_model(2, 1.0);
        let x = Matrix::from_fn(2, 4, |i, j| if i == 0 { 30.0 + j as f64 } else { 0.0 });
        let s = SampleSet::from_features(x.clone(), x);
        let r = fairness_report(
            &s,
            &PolicyPair::shared(Vector::from_vec(vec![0.1, 0.0])),
            &m,
        )
        .unwrap();
        assert!(r.value(Metric::Fpr, GroupId::A).is_none());
        assert!(r.gap(Metric::Fpr).is_none());
        assert!(r.value(Metric::Fnr, GroupId::A).is_some());
        assert!(r.undefined_errors().iter().any(|e| matches!(
            e,
            EstimateError::DegenerateDenominator {
                metric: Metric::Fpr,
                ..
            }
        )));
        let ex = exante_moments(&s, &PolicyPair::zeros(2), &m, ExAnteMetric::Fpr).unwrap_err();
        assert!(matches!(ex, EstimateError::DegenerateDenominator { .. }));
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let m = validate_model(&RawPopulation {
            mask: Some(vec![1, 0, 1]),
            ..RawPopulation {
                d: 3,
                mu_a: vec![0.2, -0.1, 0.3],
                mu_d: vec![0.0; 3],
                beta: vec![1.0, -0.5, 0.7],
                cost_a: 2.0,
                cost_d: 3.0,
                variant: VariantKind::Direct,
                ..Default::default()
            }
        })
        .unwrap();
        let x = Matrix::from_fn(3, 9, |i, j| ((i * 7 + j * 3) as f64).sin());
        let s = SampleSet::from_features(x.clone(), x);
        let theta = Vector::from_vec(vec![0.4, -0.8, 1.1]);
        for regime in [Regime::ExPost, Regime::ExAnte] {
            let (_, grads) = group_averages_with_grad(&s, &theta, GroupId::A, &m, regime);
            let h = 1e-6;
            for k in 0..3 {
                let mut tp = theta.clone();
                tp[k] += h;
                let mut tm = theta.clone();
                tm[k] -= h;
                let ap = group_averages(&s, &tp, GroupId::A, &m, regime);
                let am = group_averages(&s, &tm, GroupId::A, &m, regime);
                assert!(((ap.accept - am.accept) / (2.0 * h) - grads.accept[k]).abs() < 1e-8);
                assert!(((ap.outcome - am.outcome) / (2.0 * h) - grads.outcome[k]).abs() < 1e-8);
                assert!(((ap.joint - am.joint) / (2.0 * h) - grads.joint[k]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn no_response_means_exante_equals_expost() {
        let m = validate_model(&RawPopulation {
            mask: Some(vec![0; 3]),
            ..RawPopulation {
                d: 3,
                mu_a: vec![0.0; 3],
                mu_d: vec![0.0; 3],
                beta: vec![1.0, 1.0, 1.0],
                cost_a: 1.0,
                cost_d: 1.0,
                variant: VariantKind::Direct,
                ..Default::default()
            }
        })
        .unwrap();
        let x = Matrix::from_fn(3, 11, |i, j| ((i + 2 * j) as f64).cos());
        let s = SampleSet::from_features(x.clone(), x * 0.5);
        let theta = PolicyPair::new(
            Vector::from_vec(vec![0.3, 0.2, -0.4]),
            Vector::from_vec(vec![1.0, 0.0, 0.5]),
        );
        let report = fairness_report(&s, &theta, &m).unwrap();
        for (em, metric) in [
            (ExAnteMetric::Dp, Metric::Par),
            (ExAnteMetric::Fpr, Metric::Fpr),
            (ExAnteMetric::Fnr, Metric::Fnr),
            (ExAnteMetric::Ppv, Metric::Ppv),
            (ExAnteMetric::Npv, Metric::Npv),
        ] {
            let pair = exante_moments(&s, &theta, &m, em).unwrap();
            assert_eq!(pair[0], report.value(metric, GroupId::A).unwrap());
            assert_eq!(pair[1], report.value(metric, GroupId::D).unwrap());
        }
    }
}
