//! Policy oracles: projected gradient descent over the policy box, and
//! exact enumeration over a finite candidate list.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::model::{std_normal, PolicyPair, Vector};

use super::{Effort, Game, OracleConfig, Outcome, Problem, SolverError};

/// The sample Lagrangian over `{|theta_g|_inf <= theta_max}`.
///
/// Full searches keep a pool of local solutions, one per start; each
/// later full search resumes every pool member from where it stopped.
#[derive(Debug, Clone)]
pub struct SampleGame<'a> {
    problem: Problem<'a>,
    oracle: OracleConfig,
    theta_max: f64,
    pool: Vec<PolicyPair>,
}

impl<'a> SampleGame<'a> {
    pub fn new(
        problem: Problem<'a>,
        oracle: OracleConfig,
        theta_max: f64,
    ) -> Result<Self, SolverError> {
        if !(theta_max.is_finite() && theta_max > 0.0) {
            return Err(SolverError::InvalidConfig(
                "theta_max must be positive".into(),
            ));
        }
        let p = problem.policy_dim();
        let mut rng = ChaCha20Rng::seed_from_u64(oracle.seed);
        let mut pool = vec![PolicyPair::zeros(p)];
        for _ in 0..oracle.restarts {
            let x = Vector::from_fn(2 * p, |_, _| {
                std_normal(&mut rng).clamp(-theta_max, theta_max)
            });
            pool.push(PolicyPair::unflatten(&x));
        }
        Ok(Self {
            problem,
            oracle,
            theta_max,
            pool,
        })
    }

    pub fn problem(&self) -> &Problem<'a> {
        &self.problem
    }

    fn project(&self, x: &mut Vector) {
        let m = self.theta_max;
        x.iter_mut().for_each(|v| *v = v.clamp(-m, m));
    }

    /// Projected gradient descent with Barzilai-Borwein steps and a
    /// sufficient-decrease backtrack. Never returns a worse point than `start`.
    fn descend(
        &self,
        start: &PolicyPair,
        lambda: &[f64],
        steps: usize,
    ) -> Option<(PolicyPair, Outcome, f64)> {
        let mut x = start.flatten();
        self.project(&mut x);
        let (mut f, g, mut out) = self.problem.objective(&PolicyPair::unflatten(&x), lambda)?;
        let mut g = g.flatten();
        let mut alpha = self.oracle.step_size;
        for _ in 0..steps {
            let mut full = &x - &g;
            self.project(&mut full);
            if (&full - &x).amax() <= self.oracle.tol {
                break;
            }
            let mut accepted = None;
            for _ in 0..60 {
                let mut y = &x - &g * alpha;
                self.project(&mut y);
                let d = &y - &x;
                if let Some((fy, gy, oy)) =
                    self.problem.objective(&PolicyPair::unflatten(&y), lambda)
                {
                    if fy <= f + g.dot(&d) + d.norm_squared() / (2.0 * alpha) {
                        accepted = Some((y, fy, gy.flatten(), oy));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            let Some((y, fy, gy, oy)) = accepted else {
                break;
            };
            let s = &y - &x;
            let r = &gy - &g;
            let sr = s.dot(&r);
            alpha = if sr > 0.0 {
                (s.norm_squared() / sr).clamp(1e-6, 1e6)
            } else {
                (alpha * 2.0).min(1e6)
            };
            x = y;
            f = fy;
            g = gy;
            out = oy;
        }
        Some((PolicyPair::unflatten(&x), out, f))
    }
}

impl Game for SampleGame<'_> {
    type Policy = PolicyPair;

    fn rows(&self) -> usize {
        self.problem.system().rows()
    }

    fn bound(&self) -> f64 {
        self.problem.system().bound()
    }

    fn best_response(
        &mut self,
        lambda: &[f64],
        warm: Option<&PolicyPair>,
        effort: Effort,
    ) -> Result<(PolicyPair, Outcome), SolverError> {
        let mut best: Option<(PolicyPair, Outcome, f64)> = None;
        let mut consider = |cand: Option<(PolicyPair, Outcome, f64)>| {
            if let Some(c) = cand {
                if best.as_ref().is_none_or(|b| c.2 < b.2) {
                    best = Some(c);
                }
            }
        };
        if let Some(w) = warm {
            let steps = match effort {
                Effort::Warm => self.oracle.warm_steps,
                Effort::Full => self.oracle.steps,
            };
            consider(self.descend(w, lambda, steps));
        }
        if effort == Effort::Full || warm.is_none() {
            for i in 0..self.pool.len() {
                let res = self.descend(&self.pool[i], lambda, self.oracle.steps);
                if let Some((p, _, _)) = &res {
                    self.pool[i] = p.clone();
                }
                consider(res);
            }
        }
        match best {
            Some((p, o, _)) => Ok((p, o)),
            // Every start was degenerate: report it through the evaluator.
            None => {
                let p = warm.cloned().unwrap_or_else(|| self.pool[0].clone());
                let o = self.problem.evaluate(&p)?;
                Ok((p, o))
            }
        }
    }
}

/// A game over an explicit list of policies with known outcomes; the
/// oracle is exact (ties go to the lowest index).
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteGame {
    bound: f64,
    outcomes: Vec<Outcome>,
}

impl FiniteGame {
    pub fn new(bound: f64, outcomes: Vec<Outcome>) -> Result<Self, SolverError> {
        let rows = outcomes.first().map(|o| o.residual.len());
        if rows.is_none() || outcomes.iter().any(|o| Some(o.residual.len()) != rows) {
            return Err(SolverError::InvalidConfig(
                "finite game needs candidates with equal residual lengths".into(),
            ));
        }
        if !(bound.is_finite() && bound > 0.0) {
            return Err(SolverError::InvalidConfig(
                "dual bound must be positive".into(),
            ));
        }
        Ok(Self { bound, outcomes })
    }

    /// Evaluates each candidate policy on `problem`.
    pub fn from_candidates(
        problem: &Problem<'_>,
        candidates: &[PolicyPair],
    ) -> Result<Self, SolverError> {
        let outcomes = candidates
            .iter()
            .map(|c| problem.evaluate(c))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(problem.system().bound(), outcomes)
    }

    pub fn outcomes(&self) -> &[Outcome] {
        &self.outcomes
    }

    /// `sup_f |M mu(f) - c_hat|_inf` over the candidates.
    pub fn rho(&self) -> f64 {
        self.outcomes
            .iter()
            .fold(0.0, |m, o| m.max(o.abs_violation()))
    }

    /// Index minimizing `L(., lambda)`.
    pub fn argmin(&self, lambda: &[f64]) -> usize {
        let mut best = 0;
        let mut best_val = f64::INFINITY;
        for (i, o) in self.outcomes.iter().enumerate() {
            let v = o.lagrangian(lambda);
            if v < best_val {
                best = i;
                best_val = v;
            }
        }
        best
    }
}

impl Game for FiniteGame {
    type Policy = usize;

    fn rows(&self) -> usize {
        self.outcomes[0].residual.len()
    }

    fn bound(&self) -> f64 {
        self.bound
    }

    fn best_response(
        &mut self,
        lambda: &[f64],
        _warm: Option<&usize>,
        _effort: Effort,
    ) -> Result<(usize, Outcome), SolverError> {
        let i = self.argmin(lambda);
        Ok((i, self.outcomes[i].clone()))
    }
}
