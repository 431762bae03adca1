//! Dual mirror ascent for the moment-constrained risk minimization, with
//! saddle-point certification and the randomized (averaged) variant.

mod oracle;
mod problem;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::EstimateError;
use crate::constraints::{dual_support_max, ConstraintError, ConstraintSystem};
use crate::model::{GroupId, PolicyPair, PopulationModel, SampleSet};

pub use oracle::{FiniteGame, SampleGame};
pub use problem::Problem;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("moment {index} has a nonpositive denominator ({denominator:e}) for group {group}")]
    DegenerateMoment {
        index: usize,
        group: GroupId,
        denominator: f64,
    },
    #[error("no certified saddle point after {iterations} iterations (primal gap {primal_gap:e}, dual gap {dual_gap:e})")]
    MaxItersExceeded {
        iterations: usize,
        primal_gap: f64,
        dual_gap: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Random starting points besides the zero policy.
    pub restarts: usize,
    /// Projected-gradient steps per start.
    pub steps: usize,
    /// Steps when continuing from the previous iterate.
    pub warm_steps: usize,
    /// Initial step length; later steps use Barzilai-Borwein lengths.
    pub step_size: f64,
    /// Stop once the projected-gradient sup-norm falls below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            restarts: 5,
            steps: 500,
            warm_steps: 100,
            step_size: 1.0,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub eps: f64,
    pub max_iters: usize,
    /// Multiplier on the step schedule `sqrt(log K + 1) / (rho sqrt t)`.
    pub eta_scale: f64,
    pub rho: f64,
    /// Box radius: every policy satisfies `|theta_g|_inf <= theta_max`.
    pub theta_max: f64,
    /// Certify every this many iterations (and at the last one).
    pub check_stride: usize,
    pub randomized: bool,
    pub oracle: OracleConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            max_iters: 5000,
            eta_scale: 1.0,
            rho: 1.0,
            theta_max: 5.0,
            check_stride: 10,
            randomized: false,
            oracle: OracleConfig::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |msg: &str| Err(SolverError::InvalidConfig(msg.to_string()));
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return bad("rho must be positive");
        }
        if !(self.theta_max.is_finite() && self.theta_max > 0.0) {
            return bad("theta_max must be positive");
        }
        if !(self.eta_scale.is_finite() && self.eta_scale > 0.0) {
            return bad("eta_scale must be positive");
        }
        if self.max_iters == 0 || self.check_stride == 0 {
            return bad("max_iters and check_stride must be at least 1");
        }
        if !(self.oracle.step_size.is_finite() && self.oracle.step_size > 0.0) {
            return bad("oracle.step_size must be positive");
        }
        Ok(())
    }

    /// `eta_t` for 1-based `t`.
    pub fn step(&self, rows: usize, t: usize) -> f64 {
        self.eta_scale * ((rows as f64).ln() + 1.0).sqrt() / (self.rho * (t as f64).sqrt())
    }
}

/// `lambda_k = B e^{v_k} / (1 + sum_j e^{v_j})`, shifted so no exponent overflows.
pub fn scale_dual(v: &[f64], bound: f64) -> Vec<f64> {
    let shift = v.iter().copied().fold(0.0f64, f64::max);
    let base = (-shift).exp();
    let exps: Vec<f64> = v.iter().map(|x| (x - shift).exp()).collect();
    let denom = base + exps.iter().sum::<f64>();
    exps.into_iter().map(|e| bound * e / denom).collect()
}

/// What a policy achieves: its risk, constraint moments and residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub epr: f64,
    pub moments: Vec<f64>,
    /// `M mu - c_hat`.
    pub residual: Vec<f64>,
}

impl Outcome {
    pub fn lagrangian(&self, lambda: &[f64]) -> f64 {
        self.epr
            + lambda
                .iter()
                .zip(&self.residual)
                .map(|(l, r)| l * r)
                .sum::<f64>()
    }

    /// Signed maximum of the residual.
    pub fn violation(&self) -> f64 {
        self.residual
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn abs_violation(&self) -> f64 {
        self.residual.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// Uniform average of several outcomes (the outcome of their mixture).
    pub fn average<'o>(outcomes: impl IntoIterator<Item = &'o Outcome>) -> Option<Outcome> {
        let mut n = 0usize;
        let mut acc: Option<Outcome> = None;
        for o in outcomes {
            n += 1;
            match acc.as_mut() {
                None => acc = Some(o.clone()),
                Some(a) => {
                    a.epr += o.epr;
                    a.moments
                        .iter_mut()
                        .zip(&o.moments)
                        .for_each(|(x, y)| *x += y);
                    a.residual
                        .iter_mut()
                        .zip(&o.residual)
                        .for_each(|(x, y)| *x += y);
                }
            }
        }
        acc.map(|mut a| {
            let nf = n as f64;
            a.epr /= nf;
            a.moments.iter_mut().for_each(|x| *x /= nf);
            a.residual.iter_mut().for_each(|x| *x /= nf);
            a
        })
    }
}

/// How hard the policy oracle should search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Effort {
    /// Continue from the supplied policy only.
    Warm,
    /// Every configured start, plus the supplied policy.
    Full,
}

/// A Lagrangian game whose primal player is served by an oracle.
pub trait Game {
    type Policy: Clone;

    fn rows(&self) -> usize;

    fn bound(&self) -> f64;

    fn best_response(
        &mut self,
        lambda: &[f64],
        warm: Option<&Self::Policy>,
        effort: Effort,
    ) -> Result<(Self::Policy, Outcome), SolverError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaddleCertificate {
    pub primal_gap: f64,
    pub dual_gap: f64,
    pub eps: f64,
    pub succeeded: bool,
    /// Largest `|M mu - c_hat|_inf` seen over the iterates.
    pub realized_rho: f64,
}

impl SaddleCertificate {
    pub fn gap(&self) -> f64 {
        self.primal_gap.max(self.dual_gap)
    }
}

/// Gaps of `(outcome, lambda)` given the oracle's best outcome at `lambda`.
pub fn certify(
    outcome: &Outcome,
    lambda: &[f64],
    best: &Outcome,
    bound: f64,
    eps: f64,
    realized_rho: f64,
) -> SaddleCertificate {
    let l = outcome.lagrangian(lambda);
    let primal_gap = (l - best.lagrangian(lambda)).max(0.0);
    let dual_gap = (outcome.epr + dual_support_max(&outcome.residual, bound).0 - l).max(0.0);
    SaddleCertificate {
        primal_gap,
        dual_gap,
        eps,
        succeeded: primal_gap.max(dual_gap) <= eps,
        realized_rho,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord<P> {
    pub t: usize,
    pub lambda: Vec<f64>,
    pub policy: P,
    pub moments: Vec<f64>,
    /// Signed maximum of `M mu - c_hat` at this iterate.
    pub violation: f64,
    pub epr: f64,
    pub primal_gap: Option<f64>,
    pub dual_gap: Option<f64>,
    /// Smallest certified gap up to and including this iteration.
    pub best_gap: Option<f64>,
}

/// The uniform mixture `Q_T` of the primal iterates and the mean dual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomizedPolicy<P> {
    pub iterates: Vec<P>,
    pub weights: Vec<f64>,
    pub lambda_bar: Vec<f64>,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reduction<P> {
    pub trace: Vec<IterationRecord<P>>,
    pub certificate: SaddleCertificate,
    /// Last primal iterate and its outcome.
    pub policy: P,
    pub outcome: Outcome,
    pub lambda: Vec<f64>,
    pub iterations: usize,
    pub randomized: Option<RandomizedPolicy<P>>,
}

impl<P> Reduction<P> {
    /// `Err(MaxItersExceeded)` unless the final certificate succeeded.
    pub fn check(&self) -> Result<(), SolverError> {
        if self.certificate.succeeded {
            Ok(())
        } else {
            Err(SolverError::MaxItersExceeded {
                iterations: self.iterations,
                primal_gap: self.certificate.primal_gap,
                dual_gap: self.certificate.dual_gap,
            })
        }
    }
}

/// Runs dual mirror ascent until the certified gap drops below `eps` or
/// `max_iters` is reached. The certificate is for `(f_t, lambda_t)`, or for
/// `(Q_t, lambda_bar_t)` in randomized mode.
pub fn run_game<G: Game>(
    game: &mut G,
    cfg: &SolverConfig,
) -> Result<Reduction<G::Policy>, SolverError> {
    cfg.validate()?;
    let k = game.rows();
    let bound = game.bound();
    let mut v = vec![0.0; k];
    let mut lambda_sum = vec![0.0; k];
    let mut iterates: Vec<G::Policy> = Vec::new();
    let mut outcomes: Vec<Outcome> = Vec::new();
    let mut trace = Vec::new();
    let mut prev: Option<G::Policy> = None;
    let mut realized_rho = 0.0f64;
    let mut best_gap: Option<f64> = None;

    for t in 1..=cfg.max_iters {
        let lambda = scale_dual(&v, bound);
        let (mut policy, mut outcome) = game.best_response(&lambda, prev.as_ref(), Effort::Warm)?;
        realized_rho = realized_rho.max(outcome.abs_violation());
        lambda_sum
            .iter_mut()
            .zip(&lambda)
            .for_each(|(s, l)| *s += l);
        if cfg.randomized {
            iterates.push(policy.clone());
            outcomes.push(outcome.clone());
        }

        let mut cert = None;
        if t % cfg.check_stride == 0 || t == cfg.max_iters {
            if cfg.randomized {
                let lambda_bar: Vec<f64> = lambda_sum.iter().map(|s| s / t as f64).collect();
                let mixed = Outcome::average(&outcomes).expect("at least one iterate");
                let (_, best) = game.best_response(&lambda_bar, Some(&policy), Effort::Full)?;
                cert = Some(certify(
                    &mixed,
                    &lambda_bar,
                    &best,
                    bound,
                    cfg.eps,
                    realized_rho,
                ));
            } else {
                let (best_policy, best) =
                    game.best_response(&lambda, Some(&policy), Effort::Full)?;
                let c = certify(&outcome, &lambda, &best, bound, cfg.eps, realized_rho);
                if !c.succeeded && best.lagrangian(&lambda) < outcome.lagrangian(&lambda) {
                    policy = best_policy;
                    outcome = best;
                }
                cert = Some(c);
            }
        }
        if let Some(c) = &cert {
            best_gap = Some(best_gap.map_or(c.gap(), |b| b.min(c.gap())));
        }
        trace.push(IterationRecord {
            t,
            lambda: lambda.clone(),
            policy: policy.clone(),
            moments: outcome.moments.clone(),
            violation: outcome.violation(),
            epr: outcome.epr,
            primal_gap: cert.map(|c| c.primal_gap),
            dual_gap: cert.map(|c| c.dual_gap),
            best_gap,
        });

        let done = cert.is_some_and(|c| c.succeeded) || t == cfg.max_iters;
        if done {
            let certificate = cert.expect("checked on the last iteration");
            let randomized = cfg.randomized.then(|| {
                let n = iterates.len();
                RandomizedPolicy {
                    outcome: Outcome::average(&outcomes).expect("at least one iterate"),
                    iterates: std::mem::take(&mut iterates),
                    weights: vec![1.0 / n as f64; n],
                    lambda_bar: lambda_sum.iter().map(|s| s / t as f64).collect(),
                }
            });
            return Ok(Reduction {
                trace,
                certificate,
                policy,
                outcome,
                lambda,
                iterations: t,
                randomized,
            });
        }

        let eta = cfg.step(k, t);
        v.iter_mut()
            .zip(&outcome.residual)
            .for_each(|(v, r)| *v += eta * r);
        prev = Some(policy);
    }
    unreachable!("loop returns on its last iteration")
}

/// Dual mirror ascent over linear policies for one sample and constraint system.
pub fn run_reduction(
    samples: &SampleSet,
    model: &PopulationModel,
    system: &ConstraintSystem,
    cfg: &SolverConfig,
) -> Result<Reduction<PolicyPair>, SolverError> {
    let problem = Problem::new(samples, model, system)?;
    let mut game = SampleGame::new(problem, cfg.oracle.clone(), cfg.theta_max)?;
    run_game(&mut game, cfg)
}

/// Approximate minimizer of `L(., lambda)` over the policy box.
pub fn oracle_best_policy(
    lambda: &[f64],
    samples: &SampleSet,
    model: &PopulationModel,
    system: &ConstraintSystem,
    oracle: &OracleConfig,
    theta_max: f64,
) -> Result<PolicyPair, SolverError> {
    let problem = Problem::new(samples, model, system)?;
    let mut game = SampleGame::new(problem, oracle.clone(), theta_max)?;
    Ok(game.best_response(lambda, None, Effort::Full)?.0)
}

/// Primal and dual gaps of `(theta, lambda)`, the primal side measured
/// against [`oracle_best_policy`].
pub fn saddle_gaps(
    theta: &PolicyPair,
    lambda: &[f64],
    samples: &SampleSet,
    model: &PopulationModel,
    system: &ConstraintSystem,
    oracle: &OracleConfig,
    theta_max: f64,
    eps: f64,
) -> Result<SaddleCertificate, SolverError> {
    let problem = Problem::new(samples, model, system)?;
    problem.lagrangian(theta, lambda)?;
    let outcome = problem.evaluate(theta)?;
    let mut game = SampleGame::new(problem, oracle.clone(), theta_max)?;
    let (_, best) = game.best_response(lambda, None, Effort::Full)?;
    Ok(certify(
        &outcome,
        lambda,
        &best,
        system.bound(),
        eps,
        outcome.abs_violation(),
    ))
}

/// `2 rho B sqrt((log K + 1) / T)`.
pub fn mirror_ascent_bound(rho: f64, bound: f64, rows: usize, t: usize) -> f64 {
    2.0 * rho * bound * (((rows as f64).ln() + 1.0) / t as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scale_dual_examples() {
        let l = scale_dual(&[0.0; 6], 7.0);
        for x in &l {
            assert!((x - 1.0).abs() < 1e-15);
        }
        let l = scale_dual(&[-800.0, 0.0], 2.0);
        assert_eq!(l[0], 0.0);
        assert!((l[1] - 1.0).abs() < 1e-15);
        let l = scale_dual(&[800.0, 800.0], 3.0);
        assert!(l.iter().all(|x| x.is_finite()));
        assert!((l[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn bound_reference_value() {
        let b = mirror_ascent_bound(1.0, 1.0, 6, 100);
        assert!((b - 0.334_2).abs() < 5e-5, "{b}");
    }

    #[test]
    fn step_schedule_starts_at_one() {
        let cfg = SolverConfig::default();
        assert!((cfg.step(6, 1) - (6f64.ln() + 1.0).sqrt()).abs() < 1e-15);
        assert!((cfg.step(6, 4) * 2.0 - cfg.step(6, 1)).abs() < 1e-15);
    }

    #[test]
    fn certificate_at_attaining_dual() {
        let out = Outcome {
            epr: 0.3,
            moments: vec![0.0; 3],
            residual: vec![0.1, -0.2, 0.05],
        };
        let (_, lam) = dual_support_max(&out.residual, 4.0);
        let c = certify(&out, &lam, &out, 4.0, 1e-9, 0.2);
        assert_eq!(c.dual_gap, 0.0);
        assert_eq!(c.primal_gap, 0.0);
        assert!(c.succeeded);
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let cfg = SolverConfig {
            eps: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = SolverConfig {
            theta_max: -1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn scale_dual_invariant(v in prop::collection::vec(-40.0f64..20.0, 1..8), bound in 0.1f64..20.0) {
            let l = scale_dual(&v, bound);
            let s: f64 = v.iter().map(|x| x.exp()).sum();
            prop_assert!(l.iter().all(|&x| x >= 0.0));
            let total: f64 = l.iter().sum();
            prop_assert!(total < bound);
            prop_assert!((total - bound * s / (1.0 + s)).abs() <= 1e-12 * bound);
            for (x, vk) in l.iter().zip(&v) {
                prop_assert!((x - bound * vk.exp() / (1.0 + s)).abs() <= 1e-12 * bound);
            }
        }
    }
}
