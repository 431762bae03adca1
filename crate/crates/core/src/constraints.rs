//! Moment-equality constraints `M mu - c_hat <= 0` and their dual support.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{GroupAverages, Metric, Regime, DENOMINATOR_GUARD};
use crate::model::{GroupId, PerGroup};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConstraintError {
    #[error("moment vector has {got} entries, system expects {expected}")]
    ArityMismatch { got: usize, expected: usize },
    #[error("slack must be finite and nonnegative, got {0}")]
    InvalidSlack(f64),
    #[error("dual bound must be finite and positive, got {0}")]
    InvalidBound(f64),
    #[error("moment {index} has a degenerate denominator ({denominator:e}) for group {group}")]
    DegenerateMoment {
        index: usize,
        group: GroupId,
        denominator: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    ExpostAll,
    ExanteDp,
    ExanteFpr,
    ExanteFnr,
    ExanteSuff,
}

impl ConstraintMode {
    pub const ALL: [ConstraintMode; 5] = [
        ConstraintMode::ExpostAll,
        ConstraintMode::ExanteDp,
        ConstraintMode::ExanteFpr,
        ConstraintMode::ExanteFnr,
        ConstraintMode::ExanteSuff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConstraintMode::ExpostAll => "expost_all",
            ConstraintMode::ExanteDp => "exante_dp",
            ConstraintMode::ExanteFpr => "exante_fpr",
            ConstraintMode::ExanteFnr => "exante_fnr",
            ConstraintMode::ExanteSuff => "exante_suff",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Whether moments are taken after the population responds.
    pub fn regime(self) -> Regime {
        match self {
            ConstraintMode::ExpostAll => Regime::ExPost,
            _ => Regime::ExAnte,
        }
    }

    /// The constrained moments, in system order.
    pub fn entries(self) -> Vec<MomentEntry> {
        let pair = |m: Metric| {
            let (num, den) = m.affine_form().expect("ratio metric");
            [GroupId::A, GroupId::D].map(|group| MomentEntry { group, num, den })
        };
        match self {
            ConstraintMode::ExpostAll => {
                let joint = ([0.0, 0.0, 0.0, 1.0], [1.0, 0.0, 0.0, 0.0]);
                let mut out = pair(Metric::Res).to_vec();
                out.extend(pair(Metric::Par));
                out.extend([GroupId::A, GroupId::D].map(|group| MomentEntry {
                    group,
                    num: joint.0,
                    den: joint.1,
                }));
                out
            }
            ConstraintMode::ExanteDp => pair(Metric::Par).to_vec(),
            ConstraintMode::ExanteFpr => pair(Metric::Fpr).to_vec(),
            ConstraintMode::ExanteFnr => pair(Metric::Fnr).to_vec(),
            ConstraintMode::ExanteSuff => {
                let mut out = pair(Metric::Ppv).to_vec();
                out.extend(pair(Metric::Npv));
                out
            }
        }
    }

    /// Evaluates the constrained moments from group averages.
    pub fn moments(self, avg: &PerGroup<GroupAverages>) -> Result<Vec<f64>, ConstraintError> {
        self.entries()
            .iter()
            .enumerate()
            .map(|(index, e)| {
                let (num, den) = e.parts(&avg[e.group]);
                if den < DENOMINATOR_GUARD {
                    Err(ConstraintError::DegenerateMoment {
                        index,
                        group: e.group,
                        denominator: den,
                    })
                } else {
                    Ok(num / den)
                }
            })
            .collect()
    }
}

/// One constrained moment: `num / den`, both affine in `(1, A, P, J)` of a group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentEntry {
    pub group: GroupId,
    pub num: [f64; 4],
    pub den: [f64; 4],
}

impl MomentEntry {
    pub fn parts(&self, avg: &GroupAverages) -> (f64, f64) {
        let b = avg.basis();
        let dot = |c: &[f64; 4]| c.iter().zip(b.iter()).map(|(c, b)| c * b).sum::<f64>();
        (dot(&self.num), dot(&self.den))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSystem {
    matrix: DMatrix<f64>,
    c: Vec<f64>,
    nu: f64,
    bound: f64,
    mode: ConstraintMode,
}

/// `Mmu - c_hat` and its signed maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub residual: Vec<f64>,
    /// `max_k (M mu - c_hat)_k`; nonpositive iff every constraint holds.
    pub sup: f64,
}

impl Violation {
    /// `max_k |(M mu - c_hat)_k|`.
    pub fn abs_sup(&self) -> f64 {
        self.residual.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Two-sided pairwise difference rows for `pairs` consecutive (A, D) entries.
fn pairwise_matrix(pairs: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(2 * pairs, 2 * pairs);
    for p in 0..pairs {
        let (i, j) = (2 * p, 2 * p + 1);
        m[(i, i)] = 1.0;
        m[(i, j)] = -1.0;
        m[(j, i)] = -1.0;
        m[(j, j)] = 1.0;
    }
    m
}

fn check(nu: f64, bound: f64) -> Result<(), ConstraintError> {
    if !(nu.is_finite() && nu >= 0.0) {
        return Err(ConstraintError::InvalidSlack(nu));
    }
    if !(bound.is_finite() && bound > 0.0) {
        return Err(ConstraintError::InvalidBound(bound));
    }
    Ok(())
}

/// The six-row system equalizing response, acceptance and joint moments.
pub fn build_expost_system(nu: f64, bound: f64) -> Result<ConstraintSystem, ConstraintError> {
    build_system(ConstraintMode::ExpostAll, nu, bound)
}

/// A single-metric ex-ante baseline system (`metric` in dp, fpr, fnr, suff).
pub fn build_baseline_system(
    metric: &str,
    nu: f64,
    bound: f64,
) -> Option<Result<ConstraintSystem, ConstraintError>> {
    let mode = match metric {
        "dp" => ConstraintMode::ExanteDp,
        "fpr" => ConstraintMode::ExanteFpr,
        "fnr" => ConstraintMode::ExanteFnr,
        "suff" => ConstraintMode::ExanteSuff,
        _ => return None,
    };
    Some(build_system(mode, nu, bound))
}

pub fn build_system(
    mode: ConstraintMode,
    nu: f64,
    bound: f64,
) -> Result<ConstraintSystem, ConstraintError> {
    check(nu, bound)?;
    let k = mode.entries().len();
    Ok(ConstraintSystem {
        matrix: pairwise_matrix(k / 2),
        c: vec![0.0; k],
        nu,
        bound,
        mode,
    })
}

/// Default slack `kappa / sqrt(min(n_A, n_D))`.
pub fn default_slack(kappa: f64, n_a: usize, n_d: usize) -> f64 {
    kappa / (n_a.min(n_d).max(1) as f64).sqrt()
}

impl ConstraintSystem {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn mode(&self) -> ConstraintMode {
        self.mode
    }

    /// Number of constraint rows `K`.
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    /// Number of moments the system reads.
    pub fn arity(&self) -> usize {
        self.matrix.ncols()
    }

    /// `c + nu`.
    pub fn c_hat(&self) -> Vec<f64> {
        self.c.iter().map(|c| c + self.nu).collect()
    }

    pub fn violation(&self, mu: &[f64]) -> Result<Violation, ConstraintError> {
        if mu.len() != self.arity() {
            return Err(ConstraintError::ArityMismatch {
                got: mu.len(),
                expected: self.arity(),
            });
        }
        let residual: Vec<f64> = (0..self.rows())
            .map(|k| {
                let row: f64 = (0..self.arity()).map(|j| self.matrix[(k, j)] * mu[j]).sum();
                row - self.c[k] - self.nu
            })
            .collect();
        let sup = residual.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Violation { residual, sup })
    }

    /// `M^T lambda`, the weight each moment receives in the Lagrangian.
    pub fn moment_weights(&self, lambda: &[f64]) -> Vec<f64> {
        (0..self.arity())
            .map(|j| {
                (0..self.rows())
                    .map(|k| self.matrix[(k, j)] * lambda[k])
                    .sum()
            })
            .collect()
    }
}

/// `max lambda^T v` over `lambda >= 0, |lambda|_1 <= B`, with an attaining `lambda`.
pub fn dual_support_max(v: &[f64], bound: f64) -> (f64, Vec<f64>) {
    let mut lambda = vec![0.0; v.len()];
    let best = v
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, f64)>, (i, &x)| match acc {
            Some((_, m)) if m >= x => acc,
            _ => Some((i, x)),
        });
    match best {
        Some((i, m)) if m > 0.0 => {
            lambda[i] = bound;
            (bound * m, lambda)
        }
        _ => (0.0, lambda),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EXAMPLE: [f64; 6] = [0.6, 0.4, 0.5, 0.5, 0.3, 0.2];

    #[test]
    fn expost_matrix_pattern() {
        let s = build_expost_system(0.0, 1.0).unwrap();
        let m = s.matrix();
        assert_eq!(m.shape(), (6, 6));
        for k in 0..6 {
            assert_eq!(m.row(k).sum(), 0.0);
            let p = k / 2;
            for j in 0..6 {
                let expected = if j / 2 != p {
                    0.0
                } else if (k % 2 == 0) == (j % 2 == 0) {
                    1.0
                } else {
                    -1.0
                };
                assert_eq!(m[(k, j)], expected);
            }
        }
        assert_eq!(m.rank(1e-10), 3);
        assert_eq!(s.c_hat(), vec![0.0; 6]);
    }

    #[test]
    fn expost_example_products() {
        let s = build_expost_system(0.0, 1.0).unwrap();
        let v = s.violation(&EXAMPLE).unwrap();
        let want = [0.2, -0.2, 0.0, 0.0, 0.1, -0.1];
        for (a, b) in v.residual.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let eq = s.violation(&[0.3, 0.3, 0.7, 0.7, 0.1, 0.1]).unwrap();
        assert!(eq.residual.iter().all(|&r| r == 0.0));
        assert_eq!(eq.sup, 0.0);

        let slack = build_expost_system(0.05, 1.0).unwrap();
        assert_eq!(slack.c_hat(), vec![0.05; 6]);
        assert!((slack.violation(&EXAMPLE).unwrap().sup - 0.15).abs() < 1e-15);
    }

    #[test]
    fn extreme_moments() {
        let s = build_expost_system(0.1, 1.0).unwrap();
        let v = s.violation(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((v.sup - 0.9).abs() < 1e-15);
    }

    #[test]
    fn arity_is_checked() {
        let s = build_expost_system(0.0, 1.0).unwrap();
        assert_eq!(
            s.violation(&[0.1, 0.2]).unwrap_err(),
            ConstraintError::ArityMismatch {
                got: 2,
                expected: 6
            }
        );
        assert!(build_expost_system(-1.0, 1.0).is_err());
        assert!(build_expost_system(0.0, 0.0).is_err());
        assert!(build_baseline_system("eo", 0.0, 1.0).is_none());
    }

    #[test]
    fn baseline_systems() {
        let dp = build_baseline_system("dp", 0.0, 1.0).unwrap().unwrap();
        assert_eq!(dp.rows(), 2);
        assert_eq!(dp.violation(&[0.4, 0.4]).unwrap().sup, 0.0);
        let fpr = build_baseline_system("fpr", 0.0, 1.0).unwrap().unwrap();
        assert!((fpr.violation(&[0.3, 0.1]).unwrap().sup - 0.2).abs() < 1e-15);
        let suff = build_baseline_system("suff", 0.0, 1.0).unwrap().unwrap();
        assert_eq!(suff.rows(), 4);
        for k in 0..4 {
            assert_eq!(suff.matrix().row(k).sum(), 0.0);
        }
        assert_eq!(suff.mode().entries().len(), 4);
    }

    #[test]
    fn dual_support_examples() {
        let (val, lam) = dual_support_max(&[0.2, -0.1, 0.05, 0.0, 0.0, 0.0], 10.0);
        assert!((val - 2.0).abs() < 1e-15);
        assert_eq!(lam, vec![10.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let (val, lam) = dual_support_max(&[-0.2, -0.1, 0.0], 3.0);
        assert_eq!(val, 0.0);
        assert_eq!(lam, vec![0.0; 3]);
    }

    /// Brute force over a lattice of the scaled simplex `{lambda >= 0, sum <= B}`.
    fn grid_support(v: &[f64; 3], bound: f64, steps: usize) -> f64 {
        let h = bound / steps as f64;
        let mut best = 0.0f64;
        for i in 0..=steps {
            for j in 0..=(steps - i) {
                for k in 0..=(steps - i - j) {
                    let l = [i as f64 * h, j as f64 * h, k as f64 * h];
                    best = best.max(l[0] * v[0] + l[1] * v[1] + l[2] * v[2]);
                }
            }
        }
        best
    }

    #[test]
    fn dual_support_matches_grid() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let v = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let bound = rng.random_range(0.1..5.0);
            let (val, lam) = dual_support_max(&v, bound);
            assert!((val - grid_support(&v, bound, 60)).abs() < 1e-6);
            let attained: f64 = lam.iter().zip(v).map(|(l, x)| l * x).sum();
            assert!((attained - val).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn violation_is_label_symmetric(mu in prop::array::uniform6(0.0f64..1.0), nu in 0.0f64..0.2) {
            let s = build_expost_system(nu, 1.0).unwrap();
            let swapped = [mu[1], mu[0], mu[3], mu[2], mu[5], mu[4]];
            prop_assert_eq!(s.violation(&mu).unwrap().sup, s.violation(&swapped).unwrap().sup);
        }

        #[test]
        fn dual_support_homogeneous_and_monotone(
            v in prop::collection::vec(-1.0f64..1.0, 6),
            bound in 0.1f64..10.0,
            scale in 0.1f64..5.0,
            k in 0usize..6,
            bump in 0.0f64..0.5,
        ) {
            let base = dual_support_max(&v, bound).0;
            let scaled = dual_support_max(&v, bound * scale).0;
            prop_assert!((scaled - scale * base).abs() <= 1e-12 * (1.0 + scaled.abs()));
            let mut w = v.clone();
            w[k] += bump;
            prop_assert!(dual_support_max(&w, bound).0 >= base);
        }

        #[test]
        fn violation_matches_dense_product(mu in prop::array::uniform6(0.0f64..1.0), nu in 0.0f64..0.3) {
            let s = build_expost_system(nu, 2.0).unwrap();
            let dense = s.matrix() * nalgebra::DVector::from_row_slice(&mu);
            let v = s.violation(&mu).unwrap();
            for k in 0..6 {
                prop_assert!((v.residual[k] - (dense[k] - nu)).abs() < 1e-15);
            }
        }
    }
}
