//! `perfair` command-line runner.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use perfair::experiment::{
    evaluate_policies, generate_samples, render_report, run_demo, run_experiment, run_feasibility,
    ExperimentConfig, ExperimentError,
};

#[derive(Debug, Parser)]
#[command(
    name = "perfair",
    version,
    about = "Fair policy learning under strategic response"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw the train and test samples.
    Gen(Common),
    /// Run every configured method and write metrics, traces and plots.
    Train(Common),
    /// Recompute metrics.csv from policies.json in the output directory.
    Eval(Common),
    /// Sample equal-treatment policies and write points.csv.
    Feasibility(Common),
    /// Run the configured impossibility demonstration into sweep.csv.
    Demo(Common),
    /// Redraw the figure from metrics.csv.
    Report(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config; the built-in reference experiment when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `[output] dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reseed every random stream.
    #[arg(long)]
    seed_override: Option<u64>,
    #[arg(long)]
    no_plots: bool,
    /// Worker threads (defaults to the number of cores).
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf), ExperimentError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::reference(),
        };
        if let Some(seed) = self.seed_override {
            cfg.apply_seed_override(seed);
        }
        if self.no_plots {
            cfg.output.plots = false;
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.display().to_string();
        }
        if let Some(n) = self.threads {
            if n == 0 {
                return Err(ExperimentError::Config("--threads must be positive".into()));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        let out = PathBuf::from(&cfg.output.dir);
        Ok((cfg, out))
    }
}

fn run(command: &Command) -> Result<String, ExperimentError> {
    let (common, name) = match command {
        Command::Gen(c) => (c, "gen"),
        Command::Train(c) => (c, "train"),
        Command::Eval(c) => (c, "eval"),
        Command::Feasibility(c) => (c, "feasibility"),
        Command::Demo(c) => (c, "demo"),
        Command::Report(c) => (c, "report"),
    };
    let (cfg, out) = common.resolve()?;
    let detail = match command {
        Command::Gen(_) => {
            generate_samples(&cfg, &out)?;
            "samples written".to_string()
        }
        Command::Train(_) => {
            let results = run_experiment(&cfg, &out)?;
            results
                .iter()
                .map(|m| {
                    format!(
                        "{}: {} iterations, train violation {:.3e}, certified {}",
                        m.method,
                        m.reduction.iterations,
                        m.reduction.outcome.violation(),
                        m.reduction.certificate.succeeded
                    )
                })
                .collect::<Vec<_>>()
                .join("\n")
        }
        Command::Eval(_) => format!("{} metric rows", evaluate_policies(&cfg, &out)?.len()),
        Command::Feasibility(_) => format!("{} points", run_feasibility(&cfg, &out)?.len()),
        Command::Demo(_) => format!("{} rows", run_demo(&cfg, &out)?),
        Command::Report(_) => {
            render_report(&out)?;
            "figure written".to_string()
        }
    };
    Ok(format!("{name} -> {}\n{detail}", out.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
