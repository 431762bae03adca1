//! Policies satisfying ex-post equality of treatment in the Gaussian linear
//! models: analytic verification and constructive samplers for the
//! ex-ante-discrimination and cost-discrimination cases.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::analytic_summary;
use crate::model::{std_normal, GroupId, Matrix, PolicyPair, PopulationModel, Variant, Vector};

/// Singular values below this count as rank loss.
pub const RANK_TOL: f64 = 1e-10;
/// Orthogonal draws allowed per point before giving up.
pub const RESAMPLE_BUDGET: usize = 100;
/// Verification tolerance every constructed point must meet.
pub const CONSTRUCTION_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ManifoldError {
    #[error("premise does not hold: {0}")]
    InfeasiblePremise(String),
    #[error("no usable orthogonal draw after {attempts} attempts")]
    ResampleBudgetExceeded { attempts: usize },
    #[error("sphere and hyperplane do not meet in block {block} (radicand {radicand:e})")]
    EmptyIntersection { block: &'static str, radicand: f64 },
    #[error(
        "construction needs a square full-rank loading (or an orthogonal one for the cost case)"
    )]
    UnsupportedLoading,
}

/// Residuals of the five scalar equations whose joint solution makes the
/// ex-post score/outcome laws coincide across groups.
///
/// Zero residuals are sufficient for equal summaries; the first and third
/// equations only enter the summaries through their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualVector(pub [f64; 5]);

impl ResidualVector {
    pub fn sup(&self) -> f64 {
        self.0.iter().fold(0.0, |m, r| m.max(r.abs()))
    }
}

fn masked_dot(u: &Vector, v: &Vector, mask: &[bool]) -> f64 {
    u.iter()
        .zip(v.iter())
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((a, b), _)| a * b)
        .sum()
}

pub fn residuals(theta: &PolicyPair, model: &PopulationModel) -> ResidualVector {
    let mask = model.mask();
    let beta = model.beta();
    let eff = |g: GroupId| model.effective_direction(theta.get(g));
    let (ta, td) = (eff(GroupId::A), eff(GroupId::D));
    let (ca, cd) = (model.cost(GroupId::A), model.cost(GroupId::D));
    let (mu_a, mu_d) = (model.mu(GroupId::A), model.mu(GroupId::D));
    let sq = |g: GroupId, t: &Vector| match model.loading() {
        None => t.norm_squared(),
        Some(_) => t.norm_squared() + theta.get(g).norm_squared(),
    };
    ResidualVector([
        masked_dot(&ta, &ta, mask) / ca - masked_dot(&td, &td, mask) / cd,
        masked_dot(&ta, beta, mask) / ca + beta.dot(mu_a)
            - masked_dot(&td, beta, mask) / cd
            - beta.dot(mu_d),
        ta.dot(mu_a) - td.dot(mu_d),
        sq(GroupId::A, &ta) - sq(GroupId::D, &td),
        ta.dot(beta) - td.dot(beta),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EqualityReport {
    /// `|mean_A - mean_D|_inf` of the two-dimensional score/outcome law.
    pub mean_gap: f64,
    /// `|cov_A - cov_D|_inf`.
    pub cov_gap: f64,
    pub passed: bool,
}

impl EqualityReport {
    pub fn max_gap(&self) -> f64 {
        self.mean_gap.max(self.cov_gap)
    }
}

/// Compares the analytic ex-post Gaussian summaries of the two groups.
pub fn verify_equality(theta: &PolicyPair, model: &PopulationModel, tol: f64) -> EqualityReport {
    let a = analytic_summary(theta, GroupId::A, model);
    let d = analytic_summary(theta, GroupId::D, model);
    let mean_gap = (a.mean - d.mean).amax();
    let cov_gap = (a.cov - d.cov).amax();
    EqualityReport {
        mean_gap,
        cov_gap,
        passed: mean_gap <= tol && cov_gap <= tol,
    }
}

/// How a manifold point was generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BlockData {
    /// `theta_A = U theta_D` blockwise, with the two orthogonal factors.
    ExAnte { u_m: Matrix, u_u: Matrix },
    /// Sphere radii parameters and the unit directions orthogonal to `beta`
    /// used in the A-m, D-m, A-u and D-u blocks.
    Cost {
        k1: f64,
        k2: f64,
        directions: Vec<Vector>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldPoint {
    pub theta: PolicyPair,
    pub block_data: BlockData,
}

fn indices(mask: &[bool], manipulable: bool) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m == manipulable)
        .map(|(i, _)| i)
        .collect()
}

fn gather(v: &Vector, idx: &[usize]) -> Vector {
    Vector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

fn scatter(dst: &mut Vector, idx: &[usize], src: &Vector) {
    for (k, &i) in idx.iter().enumerate() {
        dst[i] = src[k];
    }
}

fn normal_vector(rng: &mut ChaCha20Rng, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| std_normal(rng))
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of `R`'s diagonal folded into `Q`.
pub fn haar_orthogonal(rng: &mut ChaCha20Rng, n: usize) -> Matrix {
    let g = DMatrix::from_fn(n, n, |_, _| std_normal(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// The per-block linear system in `theta_D` once `theta_A = U theta_D`.
fn exante_block_matrix(u: &Matrix, beta: &Vector, mu_a: &Vector, mu_d: &Vector) -> Matrix {
    let a1 = u.tr_mul(beta) - beta;
    let a2 = u.tr_mul(mu_a) - mu_d;
    let mut m = Matrix::zeros(2, beta.len());
    m.set_row(0, &a1.transpose());
    m.set_row(1, &a2.transpose());
    m
}

fn min_singular(m: &Matrix) -> f64 {
    m.singular_values()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Least-norm solution and null-space projector of a full-row-rank system.
fn least_norm(a: &Matrix, rhs: &Vector) -> (Vector, Matrix) {
    let gram = a * a.transpose();
    let inv = gram.try_inverse().expect("full row rank");
    let pinv = a.transpose() * inv;
    let particular = &pinv * rhs;
    let proj = Matrix::identity(a.ncols(), a.ncols()) - &pinv * a;
    (particular, proj)
}

/// Square full-rank loading, if the model is latent; errors otherwise.
fn square_loading(model: &PopulationModel) -> Result<Option<Matrix>, ManifoldError> {
    match model.variant() {
        Variant::Direct => Ok(None),
        Variant::Latent { loading } => {
            if loading.nrows() != loading.ncols() {
                return Err(ManifoldError::UnsupportedLoading);
            }
            Ok(Some(loading.clone()))
        }
    }
}

struct BlockSplit {
    m: Vec<usize>,
    u: Vec<usize>,
}

fn exante_premise(model: &PopulationModel) -> Result<BlockSplit, ManifoldError> {
    let (ca, cd) = (model.cost(GroupId::A), model.cost(GroupId::D));
    if ca != cd {
        return Err(ManifoldError::InfeasiblePremise(format!(
            "ex-ante construction needs equal costs (got {ca} and {cd})"
        )));
    }
    let beta = model.beta();
    if beta.dot(model.mu(GroupId::A)) < beta.dot(model.mu(GroupId::D)) {
        return Err(ManifoldError::InfeasiblePremise(
            "group A must not have the lower expected outcome score".into(),
        ));
    }
    let split = BlockSplit {
        m: indices(model.mask(), true),
        u: indices(model.mask(), false),
    };
    for (name, idx) in [("manipulable", &split.m), ("non-manipulable", &split.u)] {
        if idx.len() < 3 {
            return Err(ManifoldError::InfeasiblePremise(format!(
                "{name} block has dimension {} (< 3)",
                idx.len()
            )));
        }
        // (mu_A, -mu_D) and (beta, -beta) restricted to the block.
        let b = gather(beta, idx);
        let ma = gather(model.mu(GroupId::A), idx);
        let md = gather(model.mu(GroupId::D), idx);
        let mut pair = Matrix::zeros(2, 2 * idx.len());
        for k in 0..idx.len() {
            pair[(0, k)] = ma[k];
            pair[(0, idx.len() + k)] = -md[k];
            pair[(1, k)] = b[k];
            pair[(1, idx.len() + k)] = -b[k];
        }
        if min_singular(&pair) <= RANK_TOL * (1.0 + pair.amax()) {
            return Err(ManifoldError::InfeasiblePremise(format!(
                "premise vectors of the {name} block are colinear"
            )));
        }
    }
    Ok(split)
}

/// One block of an ex-ante point: `(theta_D block, U)`.
fn exante_block(
    rng: &mut ChaCha20Rng,
    beta: &Vector,
    mu_a: &Vector,
    mu_d: &Vector,
    rhs0: f64,
) -> Result<(Vector, Matrix, Matrix), ManifoldError> {
    let n = beta.len();
    for _ in 0..RESAMPLE_BUDGET {
        let u = haar_orthogonal(rng, n);
        let a = exante_block_matrix(&u, beta, mu_a, mu_d);
        if min_singular(&a) <= RANK_TOL {
            continue;
        }
        let (particular, proj) = least_norm(&a, &Vector::from_vec(vec![rhs0, 0.0]));
        let free = &proj * normal_vector(rng, n);
        return Ok((particular + free, u, proj));
    }
    Err(ManifoldError::ResampleBudgetExceeded {
        attempts: RESAMPLE_BUDGET,
    })
}

/// Samples points of the ex-ante-discrimination feasible set (equal costs,
/// `beta^T mu_A >= beta^T mu_D`).
///
/// Blockwise `theta_A = U theta_D` with `U` orthogonal, and `theta_D`
/// solving the block's two linear equations; the manipulable block carries
/// `+c b0` and the other `-c b0`, `b0 = beta^T mu_D - beta^T mu_A`.
/// For a latent model the construction runs on `Lambda^T theta` and a
/// null-space direction is scaled so that `|theta_A| = |theta_D|` too.
pub fn construct_exante_feasible(
    model: &PopulationModel,
    seed: u64,
    n_points: usize,
) -> Result<Vec<ManifoldPoint>, ManifoldError> {
    let split = exante_premise(model)?;
    let loading = square_loading(model)?;
    let beta = model.beta();
    let (mu_a, mu_d) = (model.mu(GroupId::A), model.mu(GroupId::D));
    let c = model.cost(GroupId::A);
    let b0 = beta.dot(mu_d) - beta.dot(mu_a);
    let d = model.dim();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_points);

    'points: while out.len() < n_points {
        for _ in 0..RESAMPLE_BUDGET {
            let mut th_d = Vector::zeros(d);
            let mut u_full = Matrix::zeros(d, d);
            let mut null_dir = Vector::zeros(d);
            let mut factors = Vec::with_capacity(2);
            for (idx, sign) in [(&split.m, 1.0), (&split.u, -1.0)] {
                let (b, ma, md) = (gather(beta, idx), gather(mu_a, idx), gather(mu_d, idx));
                let (block, u, proj) = exante_block(&mut rng, &b, &ma, &md, sign * c * b0)?;
                scatter(&mut th_d, idx, &block);
                scatter(
                    &mut null_dir,
                    idx,
                    &(&proj * normal_vector(&mut rng, idx.len())),
                );
                for (r, &i) in idx.iter().enumerate() {
                    for (s, &j) in idx.iter().enumerate() {
                        u_full[(i, j)] = u[(r, s)];
                    }
                }
                factors.push(u);
            }
            let (eff_d, eff_a) = match &loading {
                None => {
                    let eff_a = &u_full * &th_d;
                    (th_d, eff_a)
                }
                Some(l) => match latent_norm_fix(l, &u_full, &th_d, &null_dir) {
                    Some(eff_d) => {
                        let eff_a = &u_full * &eff_d;
                        (eff_d, eff_a)
                    }
                    None => continue,
                },
            };
            let theta = match &loading {
                None => PolicyPair::new(eff_a, eff_d),
                Some(l) => {
                    let lt = l.transpose();
                    let lu = lt.clone().lu();
                    match (lu.solve(&eff_a), lt.lu().solve(&eff_d)) {
                        (Some(a), Some(dd)) => PolicyPair::new(a, dd),
                        _ => return Err(ManifoldError::UnsupportedLoading),
                    }
                }
            };
            if !verify_equality(&theta, model, CONSTRUCTION_TOL).passed {
                continue;
            }
            let u_u = factors.pop().expect("two blocks");
            let u_m = factors.pop().expect("two blocks");
            out.push(ManifoldPoint {
                theta,
                block_data: BlockData::ExAnte { u_m, u_u },
            });
            continue 'points;
        }
        return Err(ManifoldError::ResampleBudgetExceeded {
            attempts: RESAMPLE_BUDGET,
        });
    }
    Ok(out)
}

/// Moves `eff_d` along `dir` (a null direction of both block systems) so
/// that `theta = Lambda^{-T} eff` has equal norms across groups.
fn latent_norm_fix(loading: &Matrix, u: &Matrix, eff_d: &Vector, dir: &Vector) -> Option<Vector> {
    let linv = loading.clone().try_inverse()?;
    // |Lambda^{-T} v|^2 = v^T W v.
    let w = &linv * linv.transpose();
    let g = u.transpose() * &w * u - &w;
    let qa = dir.dot(&(&g * dir));
    let qb = 2.0 * eff_d.dot(&(&g * dir));
    let qc = eff_d.dot(&(&g * eff_d));
    let t = if qa.abs() <= 1e-14 * (1.0 + g.amax()) {
        if qb.abs() <= 1e-14 {
            return (qc.abs() <= 1e-12).then(|| eff_d.clone());
        }
        -qc / qb
    } else {
        let disc = qb * qb - 4.0 * qa * qc;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        // Numerically stable pair of roots; keep the smaller step.
        let q = -0.5 * (qb + qb.signum() * sq);
        let (r1, r2) = (q / qa, if q != 0.0 { qc / q } else { q / qa });
        if r1.abs() <= r2.abs() {
            r1
        } else {
            r2
        }
    };
    Some(eff_d + dir * t)
}

/// A point on `{|x|^2 = r2, beta^T x = t}` in the block's coordinates.
fn sphere_plane_point(
    rng: &mut ChaCha20Rng,
    block: &'static str,
    beta: &Vector,
    r2: f64,
    t: f64,
) -> Result<(Vector, Vector), ManifoldError> {
    let bb = beta.norm_squared();
    let radicand = r2 - t * t / bb;
    if !(radicand > 0.0) {
        return Err(ManifoldError::EmptyIntersection { block, radicand });
    }
    let dir = loop {
        let z = normal_vector(rng, beta.len());
        let z = &z - beta * (z.dot(beta) / bb);
        let n = z.norm();
        if n > 1e-12 {
            break z / n;
        }
    };
    Ok((beta * (t / bb) + &dir * radicand.sqrt(), dir))
}

/// Smallest `k1` (exclusive) admitted for a given `k2`.
pub fn cost_k1_threshold(model: &PopulationModel, k2: f64) -> f64 {
    let ratio = model.cost(GroupId::A) / model.cost(GroupId::D);
    let beta = model.beta();
    let mask = model.mask();
    let bm = gather(beta, &indices(mask, true)).norm();
    let bu = gather(beta, &indices(mask, false)).norm();
    1.0f64.max(ratio.sqrt()) * k2.abs() / bm.min(bu)
}

/// Samples points of the cost-discrimination feasible set
/// (`mu_A = mu_D = 0`, `c_A < c_D`): each of the four blocks lies on a
/// sphere cut by a hyperplane normal to `beta`.
pub fn construct_cost_feasible(
    model: &PopulationModel,
    k1: f64,
    k2: f64,
    seed: u64,
    n_points: usize,
) -> Result<Vec<ManifoldPoint>, ManifoldError> {
    let (ca, cd) = (model.cost(GroupId::A), model.cost(GroupId::D));
    if model.mu(GroupId::A).amax() != 0.0 || model.mu(GroupId::D).amax() != 0.0 {
        return Err(ManifoldError::InfeasiblePremise(
            "cost construction needs zero means".into(),
        ));
    }
    if !(ca < cd) {
        return Err(ManifoldError::InfeasiblePremise(format!(
            "cost construction needs c_A < c_D (got {ca} and {cd})"
        )));
    }
    if !(k1 > 0.0 && k1.is_finite() && k2.is_finite()) {
        return Err(ManifoldError::InfeasiblePremise(
            "k1 must be positive and k2 finite".into(),
        ));
    }
    let loading = square_loading(model)?;
    if let Some(l) = &loading {
        let gram = l.tr_mul(l);
        if (gram - Matrix::identity(l.nrows(), l.nrows())).amax() > 1e-12 {
            return Err(ManifoldError::UnsupportedLoading);
        }
    }
    let m_idx = indices(model.mask(), true);
    let u_idx = indices(model.mask(), false);
    if m_idx.len() < 2 || u_idx.len() < 2 {
        return Err(ManifoldError::InfeasiblePremise(
            "both blocks need dimension at least 2".into(),
        ));
    }
    let beta = model.beta();
    let (bm, bu) = (gather(beta, &m_idx), gather(beta, &u_idx));
    if bm.norm() == 0.0 || bu.norm() == 0.0 {
        return Err(ManifoldError::InfeasiblePremise(
            "beta vanishes on a block".into(),
        ));
    }
    let ratio = ca / cd;
    let blocks: [(&'static str, GroupId, &Vec<usize>, &Vector, f64, f64); 4] = [
        ("A-m", GroupId::A, &m_idx, &bm, ratio * k1 * k1, ratio * k2),
        ("D-m", GroupId::D, &m_idx, &bm, k1 * k1, k2),
        ("A-u", GroupId::A, &u_idx, &bu, k1 * k1, k2),
        ("D-u", GroupId::D, &u_idx, &bu, ratio * k1 * k1, ratio * k2),
    ];
    let d = model.dim();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let mut eff = [Vector::zeros(d), Vector::zeros(d)];
        let mut directions = Vec::with_capacity(4);
        for (name, g, idx, b, r2, t) in &blocks {
            let (x, dir) = sphere_plane_point(&mut rng, name, b, *r2, *t)?;
            let slot = if *g == GroupId::A { 0 } else { 1 };
            scatter(&mut eff[slot], idx, &x);
            directions.push(dir);
        }
        let [ea, ed] = eff;
        // Orthogonal loading: theta = Lambda eff.
        let theta = match &loading {
            None => PolicyPair::new(ea, ed),
            Some(l) => PolicyPair::new(l * ea, l * ed),
        };
        out.push(ManifoldPoint {
            theta,
            block_data: BlockData::Cost { k1, k2, directions },
        });
    }
    Ok(out)
}

/// Per block: `(block dimension, null-space dimension)` of the ex-ante block
/// system for one orthogonal draw.
pub fn dimension_witness(
    model: &PopulationModel,
    seed: u64,
) -> Result<Vec<(usize, usize)>, ManifoldError> {
    let split = exante_premise(model)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let beta = model.beta();
    let mut out = Vec::new();
    for idx in [&split.m, &split.u] {
        let (b, ma, md) = (
            gather(beta, idx),
            gather(model.mu(GroupId::A), idx),
            gather(model.mu(GroupId::D), idx),
        );
        let mut found = None;
        for _ in 0..RESAMPLE_BUDGET {
            let u = haar_orthogonal(&mut rng, idx.len());
            let a = exante_block_matrix(&u, &b, &ma, &md);
            if min_singular(&a) > RANK_TOL {
                let rank = a.rank(RANK_TOL);
                found = Some((idx.len(), idx.len() - rank));
                break;
            }
        }
        out.push(found.ok_or(ManifoldError::ResampleBudgetExceeded {
            attempts: RESAMPLE_BUDGET,
        })?);
    }
    Ok(out)
}
