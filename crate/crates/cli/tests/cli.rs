use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn perfair(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_perfair"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_in(sub: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        sub,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    perfair(&args)
}

const SMALL: &str = r#"
[population]
d = 4
mu_a = [0.5, 0.5, 0.5, 0.5]
mu_d = [0.1, 0.1, 0.1, 0.1]
beta = [1.0, 1.0, 1.0, 1.0]
cost_a = 4.0
cost_d = 10.0
variant = "direct"
reg_weight = 0.1

[solver]
max_iters = 40
eta_scale = 0.1

[solver.oracle]
restarts = 1
steps = 60
warm_steps = 20

[experiment]
methods = ["alg1", "exante_dp"]
n_train = 80
n_test = 80
"#;

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn train_is_byte_reproducible_and_eval_matches() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let (first, second) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&first, &second] {
        let res = run_in("train", &cfg, out, &[]);
        assert!(
            res.status.success(),
            "{}",
            String::from_utf8_lossy(&res.stderr)
        );
    }
    let metrics = |d: &Path| fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(metrics(&first), metrics(&second));
    for f in [
        "policies.json",
        "trace_alg1.csv",
        "trace_exante_dp.csv",
        "figure.svg",
        "manifest.json",
    ] {
        assert!(first.join(f).exists(), "missing {f}");
    }

    let original = metrics(&first);
    fs::remove_file(first.join("metrics.csv")).unwrap();
    let res = run_in("eval", &cfg, &first, &[]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    assert_eq!(metrics(&first), original);

    fs::remove_file(first.join("figure.svg")).unwrap();
    assert!(run_in("report", &cfg, &first, &[]).status.success());
    assert!(first.join("figure.svg").exists());
}

#[test]
fn seed_override_changes_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run_in("gen", &cfg, &a, &[]).status.success());
    assert!(run_in("gen", &cfg, &b, &["--seed-override", "9"])
        .status
        .success());
    let read = |d: &Path| fs::read(d.join("samples_train.csv")).unwrap();
    assert_ne!(read(&a), read(&b));
}

#[test]
fn malformed_config_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bad.toml",
        "[population]\nd = 2\nunknown_key = 1\n",
    );
    let res = run_in("train", &cfg, &tmp.path().join("o"), &[]);
    assert_eq!(res.status.code(), Some(2));

    let res = run_in(
        "train",
        &tmp.path().join("missing.toml"),
        &tmp.path().join("o"),
        &[],
    );
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn infeasible_cost_pair_exits_with_infeasible_code() {
    let tmp = tempfile::tempdir().unwrap();
    let body = fs::read_to_string(configs_dir().join("feasibility_cost.toml"))
        .unwrap()
        .replace("k2 = 0.5", "k2 = 0.5\nk1 = 0.01");
    let cfg = write_config(tmp.path(), "cost.toml", &body);
    let out = tmp.path().join("o");
    let res = run_in("feasibility", &cfg, &out, &[]);
    assert_eq!(
        res.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"status\": \"failed\""), "{manifest}");
}

#[test]
fn feasibility_points_pass_verification() {
    let tmp = tempfile::tempdir().unwrap();
    let body = fs::read_to_string(configs_dir().join("feasibility_exante.toml"))
        .unwrap()
        .replace("n_points = 100", "n_points = 5")
        .replace("mc_samples = 100000", "mc_samples = 0");
    let cfg = write_config(tmp.path(), "exante.toml", &body);
    let out = tmp.path().join("o");
    let res = run_in("feasibility", &cfg, &out, &[]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let text = fs::read_to_string(out.join("points.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "max_gap").unwrap();
    let rows: Vec<f64> = lines
        .map(|l| l.split(',').nth(col).unwrap().parse().unwrap())
        .collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|g| *g <= 1e-8));
}

#[test]
fn coate_loury_demo_writes_scan() {
    let tmp = tempfile::tempdir().unwrap();
    let body = fs::read_to_string(configs_dir().join("demo_coate_loury.toml"))
        .unwrap()
        .replace("grid_points = 101", "grid_points = 11");
    let cfg = write_config(tmp.path(), "cl.toml", &body);
    let out = tmp.path().join("o");
    let res = run_in("demo", &cfg, &out, &[]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 13 * 13);
}

#[test]
fn bundled_configs_parse() {
    for entry in fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        perfair::experiment::ExperimentConfig::load(&path)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}
