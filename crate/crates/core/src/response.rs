//! Agent best responses: the sample-level distribution map for each model.

use crate::math::{sigmoid, sigmoid_prime};
use crate::model::{
    CoateLouryMarket, ContinuousMarket1D, GroupId, MarketError, PopulationModel, Variant, Vector,
};

/// Optimal action under quadratic cost: `(1/c_g) M theta` for the direct
/// variant, `(1/c_g) M Lambda^T theta` for the latent one.
pub fn best_response_action(theta_g: &Vector, group: GroupId, model: &PopulationModel) -> Vector {
    let dir = model.effective_direction(theta_g);
    let inv_c = 1.0 / model.cost(group);
    Vector::from_iterator(
        dir.len(),
        dir.iter()
            .zip(model.mask())
            .map(|(v, &m)| if m { v * inv_c } else { 0.0 }),
    )
}

/// Everything about one agent after it responds to its group's policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseOutcome {
    pub action: Vector,
    /// Ex-post observed features `x'`.
    pub expost_features: Vector,
    /// Ex-post skills `s'` (latent variant only).
    pub expost_skills: Option<Vector>,
    /// `P(Y' = 1)`.
    pub outcome_prob: f64,
    /// `P(f(X', G) = 1)`.
    pub accept_prob: f64,
}

/// Respond to `theta_g` from ex-ante features `x`.
///
/// For the latent variant the observed `x` stands in for the unobserved
/// skills, so `x` must have the skill dimension (true for square loadings).
pub fn expost_point(
    x: &Vector,
    theta_g: &Vector,
    group: GroupId,
    model: &PopulationModel,
) -> ResponseOutcome {
    assert_eq!(x.len(), model.feature_dim(), "feature dimension mismatch");
    assert_eq!(
        theta_g.len(),
        model.feature_dim(),
        "policy dimension mismatch"
    );
    let action = best_response_action(theta_g, group, model);
    match model.variant() {
        Variant::Direct => {
            let xp = x + &action;
            ResponseOutcome {
                outcome_prob: sigmoid(model.beta().dot(&xp)),
                accept_prob: sigmoid(theta_g.dot(&xp)),
                expost_features: xp,
                expost_skills: None,
                action,
            }
        }
        Variant::Latent { loading } => {
            assert_eq!(x.len(), model.dim(), "skill proxy needs a square loading");
            let sp = x + &action;
            let xp = x + loading * &action;
            ResponseOutcome {
                outcome_prob: sigmoid(model.beta().dot(&sp)),
                accept_prob: sigmoid(theta_g.dot(&xp)),
                expost_features: xp,
                expost_skills: Some(sp),
                action,
            }
        }
    }
}

/// The response to a fixed policy, reduced to what per-agent logits need.
///
/// With `R = (1/c) Lambda M Lambda^T` (or `(1/c) M`) and `b = (1/c) Lambda M beta`:
/// accept logit `u = theta^T x + theta^T R theta`, outcome logit
/// `z = beta^T x + b^T theta`.
#[derive(Debug, Clone)]
pub struct PolicyResponse {
    pub action: Vector,
    /// `R theta`, the shift of the observed features.
    pub feature_shift: Vector,
    /// `theta^T R theta`.
    pub accept_offset: f64,
    /// `beta^T M a`.
    pub outcome_offset: f64,
    /// `b`, the gradient of the outcome logit in `theta`.
    pub outcome_grad: Vector,
}

impl PolicyResponse {
    pub fn new(theta_g: &Vector, group: GroupId, model: &PopulationModel) -> Self {
        let action = best_response_action(theta_g, group, model);
        let inv_c = 1.0 / model.cost(group);
        let masked_beta = Vector::from_iterator(
            model.dim(),
            model
                .beta()
                .iter()
                .zip(model.mask())
                .map(|(b, &m)| if m { b * inv_c } else { 0.0 }),
        );
        let (feature_shift, outcome_grad) = match model.loading() {
            None => (action.clone(), masked_beta),
            Some(l) => (l * &action, l * masked_beta),
        };
        Self {
            accept_offset: theta_g.dot(&feature_shift),
            outcome_offset: model.beta().dot(&action),
            action,
            feature_shift,
            outcome_grad,
        }
    }
}

/// Ex-post skill of a worker facing a group-blind hiring threshold.
///
/// Maximizes `w * P(X > t | S = s*) - c_g/2 [s* - s]_+^2` over
/// `[s, s + span]` by bisection on the derivative, which is monotone once
/// the curvature check passes.
pub fn continuous_skill_response(
    s: f64,
    group: GroupId,
    market: &ContinuousMarket1D,
    threshold: f64,
) -> Result<f64, MarketError> {
    let gain = market.signals().gain(threshold);
    let w = market.wage();
    if w * gain <= 0.0 {
        return Ok(s);
    }
    let hi = s + market.span();
    market.check_concavity(group, gain, s, hi)?;
    let c = market.cost(group);
    let slope = |x: f64| w * gain * sigmoid_prime(x) - c * (x - s);
    if slope(s) <= 0.0 {
        return Ok(s);
    }
    if slope(hi) >= 0.0 {
        return Ok(hi);
    }
    let (mut lo, mut up) = (s, hi);
    for _ in 0..200 {
        let mid = 0.5 * (lo + up);
        if mid <= lo || mid >= up {
            break;
        }
        if slope(mid) > 0.0 {
            lo = mid;
        } else {
            up = mid;
        }
    }
    Ok(0.5 * (lo + up))
}

/// Worker utility of moving from `s` to `s_star` (used by search oracles).
pub fn skill_utility(
    s: f64,
    s_star: f64,
    group: GroupId,
    market: &ContinuousMarket1D,
    threshold: f64,
) -> f64 {
    let step = (s_star - s).max(0.0);
    market.wage() * market.hire_survival(threshold, s_star) - 0.5 * market.cost(group) * step * step
}

/// Qualified fraction when hiring yields net benefit `net` to a qualified
/// worker: `E_g(net)`, with nonpositive benefit meaning nobody invests.
pub fn investment_rate(net: f64, group: GroupId, market: &CoateLouryMarket) -> f64 {
    market.cost_family(group).cdf(net.max(0.0))
}

/// `pi_g(theta) = E_g(w (TPR(theta) - FPR(theta)))`.
pub fn coate_loury_pi(theta_g: f64, group: GroupId, market: &CoateLouryMarket) -> f64 {
    investment_rate(
        market.wage() * market.signals().gain(theta_g),
        group,
        market,
    )
}
