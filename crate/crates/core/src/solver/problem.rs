//! The sample Lagrangian `EPR(theta) + lambda^T (M mu(theta) - c_hat)` and
//! its analytic gradient.

use crate::analytics::{
    averages_with_grad_from, check_inputs, AverageGradients, GroupAverages, Regime,
};
use crate::constraints::{ConstraintSystem, MomentEntry};
use crate::model::{GroupId, PerGroup, PolicyPair, PopulationModel, SampleSet, Vector};

use super::{Outcome, SolverError};

/// Samples, model and constraint system bound together, with the
/// policy-independent outcome scores `beta^T x_i` cached per group.
#[derive(Debug, Clone)]
pub struct Problem<'a> {
    samples: &'a SampleSet,
    model: &'a PopulationModel,
    system: &'a ConstraintSystem,
    weights: PerGroup<f64>,
    scores: PerGroup<Vector>,
    entries: Vec<MomentEntry>,
}

type GroupTerms = PerGroup<(GroupAverages, AverageGradients)>;

impl<'a> Problem<'a> {
    pub fn new(
        samples: &'a SampleSet,
        model: &'a PopulationModel,
        system: &'a ConstraintSystem,
    ) -> Result<Self, SolverError> {
        check_inputs(samples, &PolicyPair::zeros(model.feature_dim()), model)?;
        let entries = system.mode().entries();
        Ok(Self {
            samples,
            model,
            system,
            weights: model.group_weights(samples.n(GroupId::A), samples.n(GroupId::D)),
            scores: PerGroup::from_fn(|g| samples.features[g].tr_mul(model.beta())),
            entries,
        })
    }

    pub fn samples(&self) -> &SampleSet {
        self.samples
    }

    pub fn model(&self) -> &PopulationModel {
        self.model
    }

    pub fn system(&self) -> &ConstraintSystem {
        self.system
    }

    /// Length of each group's policy vector.
    pub fn policy_dim(&self) -> usize {
        self.model.feature_dim()
    }

    fn terms(&self, theta: &PolicyPair, regime: Regime) -> GroupTerms {
        PerGroup::from_fn(|g| {
            averages_with_grad_from(
                &self.samples.features[g],
                &self.scores[g],
                theta.get(g),
                g,
                self.model,
                regime,
            )
        })
    }

    fn reg_scale(&self, g: GroupId) -> f64 {
        let r = self.model.reg_weight();
        if self.model.reg_weighted_by_group() {
            r * self.weights[g]
        } else {
            r
        }
    }

    fn check_policy(&self, theta: &PolicyPair) -> Result<(), SolverError> {
        check_inputs(self.samples, theta, self.model)?;
        Ok(())
    }

    /// EPR, raw constraint moments and residual `M mu - c_hat`.
    ///
    /// Ratio moments only need a positive denominator here; the
    /// fairness-report guard does not apply inside the optimizer.
    pub fn evaluate(&self, theta: &PolicyPair) -> Result<Outcome, SolverError> {
        self.check_policy(theta)?;
        let (outcome, _) = self.evaluate_inner(theta, None);
        outcome
    }

    fn evaluate_inner(
        &self,
        theta: &PolicyPair,
        lambda: Option<&[f64]>,
    ) -> (Result<Outcome, SolverError>, Option<PolicyPair>) {
        let post = self.terms(theta, Regime::ExPost);
        let ante = match self.system.mode().regime() {
            Regime::ExPost => None,
            Regime::ExAnte => Some(self.terms(theta, Regime::ExAnte)),
        };
        let moment_terms = ante.as_ref().unwrap_or(&post);

        let mut epr = 0.0;
        for g in GroupId::ALL {
            let avg = &post[g].0;
            epr += self.weights[g] * (avg.accept + avg.outcome - 2.0 * avg.joint);
            epr += self.reg_scale(g) * theta.get(g).norm_squared();
        }

        let mut moments = Vec::with_capacity(self.entries.len());
        for (index, e) in self.entries.iter().enumerate() {
            let (num, den) = e.parts(&moment_terms[e.group].0);
            if !(den > 0.0) {
                return (
                    Err(SolverError::DegenerateMoment {
                        index,
                        group: e.group,
                        denominator: den,
                    }),
                    None,
                );
            }
            moments.push(num / den);
        }
        let residual = match self.system.violation(&moments) {
            Ok(v) => v.residual,
            Err(e) => return (Err(e.into()), None),
        };
        let outcome = Outcome {
            epr,
            moments,
            residual,
        };

        let grad = lambda.map(|lambda| {
            let mut grad = PerGroup::from_fn(|g| theta.get(g) * (2.0 * self.reg_scale(g)));
            for g in GroupId::ALL {
                let d = &post[g].1;
                let w = self.weights[g];
                grad[g].axpy(w, &d.accept, 1.0);
                grad[g].axpy(w, &d.outcome, 1.0);
                grad[g].axpy(-2.0 * w, &d.joint, 1.0);
            }
            let omega = self.system.moment_weights(lambda);
            for ((e, &mu), &om) in self.entries.iter().zip(&outcome.moments).zip(&omega) {
                if om == 0.0 {
                    continue;
                }
                let (avg, d) = &moment_terms[e.group];
                let (_, den) = e.parts(avg);
                let basis = d.basis();
                for k in 1..4 {
                    let coeff = e.num[k] - mu * e.den[k];
                    if coeff != 0.0 {
                        grad[e.group].axpy(om * coeff / den, basis[k].expect("non-constant"), 1.0);
                    }
                }
            }
            PolicyPair::new(grad.a, grad.d)
        });
        (Ok(outcome), grad)
    }

    /// `L(theta, lambda)`.
    pub fn lagrangian(&self, theta: &PolicyPair, lambda: &[f64]) -> Result<f64, SolverError> {
        self.check_lambda(lambda)?;
        Ok(self.evaluate(theta)?.lagrangian(lambda))
    }

    /// `L(theta, lambda)` and its gradient in `(theta_A, theta_D)`.
    pub fn lagrangian_grad(
        &self,
        theta: &PolicyPair,
        lambda: &[f64],
    ) -> Result<(f64, PolicyPair), SolverError> {
        self.check_policy(theta)?;
        self.check_lambda(lambda)?;
        let (outcome, grad) = self.evaluate_inner(theta, Some(lambda));
        let outcome = outcome?;
        Ok((
            outcome.lagrangian(lambda),
            grad.expect("gradient requested"),
        ))
    }

    /// Value, gradient and outcome for the optimizer; `None` if degenerate.
    pub(crate) fn objective(
        &self,
        theta: &PolicyPair,
        lambda: &[f64],
    ) -> Option<(f64, PolicyPair, Outcome)> {
        let (outcome, grad) = self.evaluate_inner(theta, Some(lambda));
        let outcome = outcome.ok()?;
        let value = outcome.lagrangian(lambda);
        let grad = grad?;
        (value.is_finite() && grad.is_finite()).then_some((value, grad, outcome))
    }

    fn check_lambda(&self, lambda: &[f64]) -> Result<(), SolverError> {
        if lambda.len() != self.system.rows() {
            return Err(SolverError::Constraint(
                crate::constraints::ConstraintError::ArityMismatch {
                    got: lambda.len(),
                    expected: self.system.rows(),
                },
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::plugin_epr;
    use crate::constraints::{
        build_baseline_system, build_expost_system, build_system, ConstraintMode,
    };
    use crate::model::{sample_population, validate_model, Matrix, RawPopulation, VariantKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vector {
        Vector::from_fn(n, |_, _| rng.random_range(-scale..scale))
    }

    fn max_rel_err(analytic: &Vector, fd: &Vector) -> f64 {
        let scale = fd.amax().max(1e-8);
        (analytic - fd).amax() / scale
    }

    #[test]
    fn zero_dual_gives_plugin_epr() {
        let model = validate_model(&RawPopulation::reference_labor_market()).unwrap();
        let samples = sample_population(&model, 40, 50, 3).unwrap();
        let system = build_expost_system(0.05, 3.0).unwrap();
        let problem = Problem::new(&samples, &model, &system).unwrap();
        let theta = PolicyPair::shared(Vector::from_element(10, 0.2));
        let l = problem.lagrangian(&theta, &[0.0; 6]).unwrap();
        assert!((l - plugin_epr(&samples, &theta, &model).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences_for_every_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = RawPopulation {
            d: 4,
            mu_a: vec![0.5, 0.2, -0.1, 0.3],
            mu_d: vec![0.1, 0.0, 0.2, -0.3],
            beta: vec![1.0, -0.5, 0.8, 0.3],
            cost_a: 2.0,
            cost_d: 5.0,
            mask: Some(vec![1, 1, 0, 1]),
            variant: VariantKind::Direct,
            reg_weight: Some(0.1),
            ..Default::default()
        };
        let model = validate_model(&raw).unwrap();
        let samples = sample_population(&model, 30, 45, 9).unwrap();
        for mode in ConstraintMode::ALL {
            let system = build_system(mode, 0.02, 4.0).unwrap();
            let problem = Problem::new(&samples, &model, &system).unwrap();
            for _ in 0..5 {
                let theta =
                    PolicyPair::new(random_vec(&mut rng, 4, 1.5), random_vec(&mut rng, 4, 1.5));
                let lambda: Vec<f64> = (0..system.rows())
                    .map(|_| rng.random_range(0.0..1.0))
                    .collect();
                let (_, grad) = problem.lagrangian_grad(&theta, &lambda).unwrap();
                let x = theta.flatten();
                let h = 1e-5;
                let fd = Vector::from_fn(x.len(), |i, _| {
                    let mut xp = x.clone();
                    xp[i] += h;
                    let mut xm = x.clone();
                    xm[i] -= h;
                    let lp = problem
                        .lagrangian(&PolicyPair::unflatten(&xp), &lambda)
                        .unwrap();
                    let lm = problem
                        .lagrangian(&PolicyPair::unflatten(&xm), &lambda)
                        .unwrap();
                    (lp - lm) / (2.0 * h)
                });
                assert!(max_rel_err(&grad.flatten(), &fd) < 1e-6, "{mode:?}");
            }
        }
    }

    #[test]
    fn symmetric_zero_policy() {
        let raw = RawPopulation {
            d: 2,
            mu_a: vec![0.0; 2],
            mu_d: vec![0.0; 2],
            beta: vec![1.0, 0.0],
            cost_a: 1.0,
            cost_d: 1.0,
            variant: VariantKind::Direct,
            reg_weight: Some(0.0),
            ..Default::default()
        };
        let model = validate_model(&raw).unwrap();
        let x = Matrix::from_row_slice(2, 2, &[1.0, -1.0, 0.5, -0.5]);
        let samples = SampleSet::from_features(x.clone(), x);
        let system = build_baseline_system("dp", 0.0, 1.0).unwrap().unwrap();
        let problem = Problem::new(&samples, &model, &system).unwrap();
        let out = problem.evaluate(&PolicyPair::zeros(2)).unwrap();
        assert_eq!(out.residual, vec![0.0, 0.0]);
        let (_, grad) = problem
            .lagrangian_grad(&PolicyPair::zeros(2), &[0.3, 0.3])
            .unwrap();
        assert_eq!(grad.theta_a, grad.theta_d);
    }

    #[test]
    fn dual_arity_is_checked() {
        let model = validate_model(&RawPopulation::reference_labor_market()).unwrap();
        let samples = sample_population(&model, 5, 5, 0).unwrap();
        let system = build_expost_system(0.0, 1.0).unwrap();
        let problem = Problem::new(&samples, &model, &system).unwrap();
        assert!(problem
            .lagrangian(&PolicyPair::zeros(10), &[0.0; 2])
            .is_err());
        assert!(problem
            .lagrangian(&PolicyPair::zeros(3), &[0.0; 6])
            .is_err());
    }
}
