use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{parse_method, Construction, DemoKind, ExperimentConfig};
use super::output::{
    fmt_f64, read_metrics_csv, render_figure, write_metrics_csv, write_table, write_trace_csv,
    MetricsRow, PanelGaps,
};
use super::ExperimentError;
use crate::analytics::{empirical_summary, fairness_report};
use crate::constraints::{build_system, ConstraintMode, ConstraintSystem};
use crate::impossibility::{
    coate_loury_equal_treatment_scan, continuous_gap_sweep, scan_thresholds, threshold_grid,
};
use crate::manifolds::{
    construct_cost_feasible, construct_exante_feasible, cost_k1_threshold, dimension_witness,
    residuals, verify_equality, ManifoldPoint, CONSTRUCTION_TOL,
};
use crate::model::{
    sample_population, validate_model, GroupId, PolicyPair, PopulationModel, SampleSet, Vector,
    GENERATOR_NAME,
};
use crate::solver::{run_reduction, Problem, Reduction};

/// Constraint mode behind a method name (`alg1` or a baseline mode name).
pub fn method_mode(name: &str) -> Option<ConstraintMode> {
    parse_method(name)
}

/// Validated model and the train/test samples of a config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub model: PopulationModel,
    pub train: SampleSet,
    pub test: SampleSet,
    pub nu: f64,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, ExperimentError> {
    cfg.validate()?;
    let model =
        validate_model(&cfg.population).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let e = &cfg.experiment;
    let draw = |n, seed| {
        sample_population(&model, n, n, seed)
            .map_err(|err| ExperimentError::Config(err.to_string()))
    };
    let train = draw(e.n_train, e.train_seed)?;
    let test = draw(e.n_test, e.test_seed)?;
    Ok(Prepared {
        nu: cfg.constraints.slack(e.n_train, e.n_train),
        model,
        train,
        test,
    })
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: String,
    pub system: ConstraintSystem,
    pub reduction: Reduction<PolicyPair>,
    pub wall_seconds: f64,
}

impl MethodResult {
    pub fn mode(&self) -> ConstraintMode {
        self.system.mode()
    }
}

fn system_for(
    cfg: &ExperimentConfig,
    method: &str,
    nu: f64,
) -> Result<ConstraintSystem, ExperimentError> {
    let mode = method_mode(method)
        .ok_or_else(|| ExperimentError::Config(format!("unknown method {method:?}")))?;
    build_system(mode, nu, cfg.constraints.bound)
        .map_err(|e| ExperimentError::Config(e.to_string()))
}

/// Runs every configured method on the training sample, in config order.
pub fn train_methods(
    cfg: &ExperimentConfig,
    prep: &Prepared,
) -> Vec<Result<MethodResult, ExperimentError>> {
    cfg.experiment
        .methods
        .par_iter()
        .map(|method| {
            let system = system_for(cfg, method, prep.nu)?;
            let start = Instant::now();
            let solver_err = |source| ExperimentError::Solver {
                method: method.clone(),
                source,
            };
            let reduction = run_reduction(&prep.train, &prep.model, &system, &cfg.solver)
                .map_err(solver_err)?;
            if cfg.experiment.require_certificate {
                reduction.check().map_err(solver_err)?;
            }
            Ok(MethodResult {
                method: method.clone(),
                system,
                reduction,
                wall_seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

/// Train and test rows for one policy, each split's violation measured in
/// the method's own constraint system.
pub fn metrics_rows(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    method: &str,
    policy: &PolicyPair,
) -> Result<Vec<MetricsRow>, ExperimentError> {
    let system = system_for(cfg, method, prep.nu)?;
    let mut rows = Vec::with_capacity(4);
    for (split, samples, seed) in [
        ("train", &prep.train, cfg.experiment.train_seed),
        ("test", &prep.test, cfg.experiment.test_seed),
    ] {
        let solver_err = |source| ExperimentError::Solver {
            method: method.to_string(),
            source,
        };
        let report =
            fairness_report(samples, policy, &prep.model).map_err(|e| solver_err(e.into()))?;
        let violation = Problem::new(samples, &prep.model, &system)
            .and_then(|p| p.evaluate(policy))
            .map_or(f64::NAN, |o| o.violation());
        for g in GroupId::ALL {
            rows.push(MetricsRow {
                method: method.to_string(),
                split: split.to_string(),
                group: g,
                metrics: report.groups[g],
                violation_inf: violation,
                seed,
            });
        }
    }
    Ok(rows)
}

/// A trained policy as stored in `policies.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredPolicy {
    pub method: String,
    pub theta_a: Vec<f64>,
    pub theta_d: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl StoredPolicy {
    pub fn policy(&self) -> PolicyPair {
        PolicyPair::new(
            Vector::from_vec(self.theta_a.clone()),
            Vector::from_vec(self.theta_d.clone()),
        )
    }
}

fn ensure_dir(out: &Path) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(out).map_err(|e| ExperimentError::io(out, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), ExperimentError> {
    std::fs::write(path, text).map_err(|e| ExperimentError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| ExperimentError::io(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

fn write_manifest(
    out: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    started: Instant,
    result: Result<&Value, &ExperimentError>,
) -> Result<(), ExperimentError> {
    let (status, error, details) = match result {
        Ok(details) => ("ok", Value::Null, details.clone()),
        Err(e) => (
            "failed",
            json!({ "message": e.to_string(), "exit_code": e.exit_code() }),
            Value::Null,
        ),
    };
    let manifest = json!({
        "tool": "perfair",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "status": status,
        "error": error,
        "generator_name": GENERATOR_NAME,
        "config": cfg,
        "details": details,
        "wall_seconds": started.elapsed().as_secs_f64(),
    });
    write_json(&out.join("manifest.json"), &manifest)
}

/// Writes the run manifest whatever the outcome, then returns the outcome.
fn with_manifest<T>(
    out: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    body: impl FnOnce() -> Result<(T, Value), ExperimentError>,
) -> Result<T, ExperimentError> {
    let started = Instant::now();
    ensure_dir(out)?;
    match body() {
        Ok((value, details)) => {
            write_manifest(out, command, cfg, started, Ok(&details))?;
            Ok(value)
        }
        Err(e) => {
            write_manifest(out, command, cfg, started, Err(&e))?;
            Err(e)
        }
    }
}

fn sample_rows(samples: &SampleSet) -> (Vec<String>, Vec<Vec<String>>) {
    let p = samples.features.a.nrows();
    let d = samples.skills.as_ref().map_or(0, |s| s.a.nrows());
    let mut header = vec!["group".to_string()];
    header.extend((1..=p).map(|j| format!("x_{j}")));
    header.extend((1..=d).map(|j| format!("s_{j}")));
    let mut rows = Vec::new();
    for g in GroupId::ALL {
        let x = &samples.features[g];
        for i in 0..x.ncols() {
            let mut row = vec![g.as_str().to_string()];
            row.extend(x.column(i).iter().map(|&v| fmt_f64(v)));
            if let Some(s) = &samples.skills {
                row.extend(s[g].column(i).iter().map(|&v| fmt_f64(v)));
            }
            rows.push(row);
        }
    }
    (header, rows)
}

/// `gen`: writes the train and test samples.
pub fn generate_samples(cfg: &ExperimentConfig, out: &Path) -> Result<(), ExperimentError> {
    with_manifest(out, "gen", cfg, || {
        let prep = prepare(cfg)?;
        for (name, s) in [
            ("samples_train.csv", &prep.train),
            ("samples_test.csv", &prep.test),
        ] {
            let (header, rows) = sample_rows(s);
            write_table(&out.join(name), &header, rows)?;
        }
        Ok((
            (),
            json!({ "n_train": cfg.experiment.n_train, "n_test": cfg.experiment.n_test }),
        ))
    })
}

fn test_panels(rows: &[MetricsRow]) -> Vec<(String, PanelGaps)> {
    let mut out: Vec<(String, PanelGaps)> = Vec::new();
    for r in rows
        .iter()
        .filter(|r| r.split == "test" && r.group == GroupId::A)
    {
        if let Some(d) = rows
            .iter()
            .find(|x| x.split == "test" && x.group == GroupId::D && x.method == r.method)
        {
            out.push((
                r.method.clone(),
                PanelGaps::from_rows(&r.metrics, &d.metrics),
            ));
        }
    }
    out
}

/// `train`: runs all methods and writes traces, policies, metrics, plots and
/// the manifest. Artifacts of methods that finished are kept on failure.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<Vec<MethodResult>, ExperimentError> {
    with_manifest(out, "train", cfg, || {
        let prep = prepare(cfg)?;
        let results = train_methods(cfg, &prep);
        let mut done = Vec::new();
        let mut first_err = None;
        for r in results {
            match r {
                Ok(m) => done.push(m),
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        let mut rows = Vec::new();
        let mut stored = Vec::new();
        let mut summary = Vec::new();
        for m in &done {
            write_trace_csv(
                &out.join(format!("trace_{}.csv", m.method)),
                &m.reduction.trace,
            )?;
            rows.extend(metrics_rows(cfg, &prep, &m.method, &m.reduction.policy)?);
            stored.push(StoredPolicy {
                method: m.method.clone(),
                theta_a: m.reduction.policy.theta_a.iter().copied().collect(),
                theta_d: m.reduction.policy.theta_d.iter().copied().collect(),
                lambda: m.reduction.lambda.clone(),
            });
            let c = &m.reduction.certificate;
            summary.push(json!({
                "method": m.method,
                "mode": m.mode().name(),
                "bound": m.system.bound(),
                "nu": m.system.nu(),
                "iterations": m.reduction.iterations,
                "certified": c.succeeded,
                "primal_gap": c.primal_gap,
                "dual_gap": c.dual_gap,
                "train_violation": m.reduction.outcome.violation(),
                "wall_seconds": m.wall_seconds,
            }));
        }
        write_json(&out.join("policies.json"), &stored)?;
        write_metrics_csv(&out.join("metrics.csv"), &rows)?;
        if cfg.output.plots {
            write_text(&out.join("figure.svg"), &render_figure(&test_panels(&rows)))?;
        }
        if let Some(e) = first_err {
            return Err(e);
        }
        Ok((done, json!({ "nu": prep.nu, "methods": summary })))
    })
}

pub fn read_policies(out: &Path) -> Result<Vec<StoredPolicy>, ExperimentError> {
    let path = out.join("policies.json");
    let text = std::fs::read_to_string(&path).map_err(|e| ExperimentError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::io(&path, e))
}

/// `eval`: recomputes `metrics.csv` from stored policies.
pub fn evaluate_policies(
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<Vec<MetricsRow>, ExperimentError> {
    with_manifest(out, "eval", cfg, || {
        let prep = prepare(cfg)?;
        let mut rows = Vec::new();
        for p in read_policies(out)? {
            let policy = p.policy();
            if policy.theta_a.len() != prep.model.feature_dim()
                || policy.theta_d.len() != prep.model.feature_dim()
            {
                return Err(ExperimentError::Config(format!(
                    "stored policy {} has the wrong dimension",
                    p.method
                )));
            }
            rows.extend(metrics_rows(cfg, &prep, &p.method, &policy)?);
        }
        write_metrics_csv(&out.join("metrics.csv"), &rows)?;
        let n = rows.len();
        Ok((rows, json!({ "rows": n })))
    })
}

/// `report`: redraws the figure from `metrics.csv`.
pub fn render_report(out: &Path) -> Result<(), ExperimentError> {
    let rows = read_metrics_csv(&out.join("metrics.csv"))?;
    write_text(&out.join("figure.svg"), &render_figure(&test_panels(&rows)))
}

fn point_row(
    idx: usize,
    p: &ManifoldPoint,
    model: &PopulationModel,
    mc: Option<f64>,
) -> Vec<String> {
    let rep = verify_equality(&p.theta, model, CONSTRUCTION_TOL);
    let mut row = vec![
        idx.to_string(),
        fmt_f64(rep.max_gap()),
        fmt_f64(rep.mean_gap),
        fmt_f64(rep.cov_gap),
        fmt_f64(residuals(&p.theta, model).sup()),
        mc.map(fmt_f64).unwrap_or_default(),
    ];
    row.extend(p.theta.theta_a.iter().map(|&v| fmt_f64(v)));
    row.extend(p.theta.theta_d.iter().map(|&v| fmt_f64(v)));
    row
}

/// Largest group difference of the Monte Carlo summaries in standard errors.
pub(crate) fn mc_gap_z(
    theta: &PolicyPair,
    model: &PopulationModel,
    n: usize,
    seed: u64,
) -> Result<f64, ExperimentError> {
    let samples =
        sample_population(model, n, n, seed).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let s = GroupId::ALL.map(|g| empirical_summary(&samples, theta, g, model));
    let [Ok(a), Ok(d)] = s else {
        return Err(ExperimentError::Config("Monte Carlo summary failed".into()));
    };
    let mut z = 0.0f64;
    for i in 0..2 {
        let se = a.mean_se[i].hypot(d.mean_se[i]);
        z = z.max((a.summary.mean[i] - d.summary.mean[i]).abs() / se);
        for j in 0..2 {
            let se = a.cov_se[(i, j)].hypot(d.cov_se[(i, j)]);
            z = z.max((a.summary.cov[(i, j)] - d.summary.cov[(i, j)]).abs() / se);
        }
    }
    Ok(z)
}

/// `feasibility`: samples manifold points and writes `points.csv`.
pub fn run_feasibility(
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<Vec<ManifoldPoint>, ExperimentError> {
    with_manifest(out, "feasibility", cfg, || {
        cfg.validate()?;
        let model =
            validate_model(&cfg.population).map_err(|e| ExperimentError::Config(e.to_string()))?;
        let f = &cfg.experiment.feasibility;
        let (points, extra) = match f.construction {
            Construction::ExAnte => {
                let pts = construct_exante_feasible(&model, f.seed, f.n_points)?;
                let witness = dimension_witness(&model, f.seed)?;
                (
                    pts,
                    json!({ "construction": "ex_ante", "witness": witness }),
                )
            }
            Construction::Cost => {
                let k1 =
                    f.k1.unwrap_or_else(|| 2.0 * cost_k1_threshold(&model, f.k2));
                let pts = construct_cost_feasible(&model, k1, f.k2, f.seed, f.n_points)?;
                (pts, json!({ "construction": "cost", "k1": k1, "k2": f.k2 }))
            }
        };
        let mc: Vec<Option<f64>> = points
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                (f.mc_samples > 0)
                    .then(|| {
                        mc_gap_z(
                            &p.theta,
                            &model,
                            f.mc_samples,
                            f.seed.wrapping_add(i as u64),
                        )
                    })
                    .transpose()
            })
            .collect::<Result<_, _>>()?;
        let p = model.feature_dim();
        let mut header: Vec<String> = [
            "index",
            "max_gap",
            "mean_gap",
            "cov_gap",
            "residual_sup",
            "mc_gap_z",
        ]
        .map(String::from)
        .to_vec();
        header.extend((1..=p).map(|j| format!("theta_a_{j}")));
        header.extend((1..=p).map(|j| format!("theta_d_{j}")));
        let rows = points
            .iter()
            .enumerate()
            .map(|(i, pt)| point_row(i, pt, &model, mc[i]));
        write_table(&out.join("points.csv"), &header, rows)?;
        let worst = points
            .iter()
            .map(|pt| verify_equality(&pt.theta, &model, CONSTRUCTION_TOL).max_gap())
            .fold(0.0f64, f64::max);
        Ok((
            points,
            json!({ "points": f.n_points, "max_gap": worst, "construction_details": extra }),
        ))
    })
}

/// `demo`: runs the configured impossibility demonstration into `sweep.csv`.
pub fn run_demo(cfg: &ExperimentConfig, out: &Path) -> Result<usize, ExperimentError> {
    with_manifest(out, "demo", cfg, || {
        cfg.validate()?;
        let demo = &cfg.experiment.demo;
        let path = out.join("sweep.csv");
        let b = |x: bool| if x { "true" } else { "false" }.to_string();
        match demo.kind {
            DemoKind::Continuous => {
                let spec = &demo.continuous;
                let market = spec.market()?;
                let grid = threshold_grid(market.signals(), demo.grid_points);
                let rows = continuous_gap_sweep(
                    &market,
                    &grid,
                    spec.discrimination,
                    spec.workers,
                    demo.seed,
                )
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
                let header = [
                    "threshold",
                    "incentive",
                    "exante_a",
                    "exante_d",
                    "expost_a",
                    "expost_d",
                    "gap",
                ]
                .map(String::from)
                .to_vec();
                let n = rows.len();
                let positive = rows
                    .iter()
                    .filter(|r| r.incentive > 0.0)
                    .all(|r| r.gap > 0.0);
                write_table(
                    &path,
                    &header,
                    rows.iter().map(|r| {
                        [
                            r.threshold,
                            r.incentive,
                            r.exante.a,
                            r.exante.d,
                            r.expost.a,
                            r.expost.d,
                            r.gap,
                        ]
                        .map(fmt_f64)
                        .to_vec()
                    }),
                )?;
                Ok((
                    n,
                    json!({ "kind": "continuous", "rows": n, "gap_positive_under_incentive": positive }),
                ))
            }
            DemoKind::CoateLoury => {
                let market = demo.coate_loury.market()?;
                let rows = coate_loury_equal_treatment_scan(
                    &market,
                    &scan_thresholds(market.signals(), demo.grid_points),
                );
                let header = [
                    "theta_a",
                    "theta_d",
                    "tpr_a",
                    "tpr_d",
                    "fpr_a",
                    "fpr_d",
                    "benefit_a",
                    "benefit_d",
                    "pi_a",
                    "pi_d",
                    "equal_treatment",
                    "equal_response",
                ]
                .map(String::from)
                .to_vec();
                let n = rows.len();
                let holds = rows
                    .iter()
                    .filter(|r| r.equal_treatment && r.benefit.a > 0.0)
                    .all(|r| r.pi.a > r.pi.d);
                write_table(
                    &path,
                    &header,
                    rows.iter().map(|r| {
                        let mut v = [
                            r.theta.a,
                            r.theta.d,
                            r.tpr.a,
                            r.tpr.d,
                            r.fpr.a,
                            r.fpr.d,
                            r.benefit.a,
                            r.benefit.d,
                            r.pi.a,
                            r.pi.d,
                        ]
                        .map(fmt_f64)
                        .to_vec();
                        v.push(b(r.equal_treatment));
                        v.push(b(r.equal_response));
                        v
                    }),
                )?;
                Ok((
                    n,
                    json!({ "kind": "coate_loury", "rows": n, "investment_gap_under_equal_treatment": holds }),
                ))
            }
        }
    })
}
