use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::constraints::{default_slack, ConstraintMode};
use crate::impossibility::{Discrimination, DEFAULT_GRID_POINTS};
use crate::model::{
    CoateLouryMarket, ContinuousMarket1D, CostFamily, NormalSignals, PerGroup, RawPopulation,
    SkillLaw,
};
use crate::solver::SolverConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub population: RawPopulation,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub constraints: ConstraintsConfig,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintsConfig {
    /// Slack is `kappa / sqrt(min(n_A, n_D))` unless `nu` is given.
    pub kappa: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    /// Dual bound `B`.
    pub bound: f64,
}

impl Default for ConstraintsConfig {
    fn default() -> Self {
        Self {
            kappa: 2.0,
            nu: None,
            bound: 1000.0,
        }
    }
}

impl ConstraintsConfig {
    pub fn slack(&self, n_a: usize, n_d: usize) -> f64 {
        self.nu
            .unwrap_or_else(|| default_slack(self.kappa, n_a, n_d))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    /// `alg1` (all ex-post constraints) and any of the ex-ante baselines.
    pub methods: Vec<String>,
    /// Samples per group.
    pub n_train: usize,
    pub n_test: usize,
    pub train_seed: u64,
    pub test_seed: u64,
    /// Treat an uncertified reduction as a solver failure.
    pub require_certificate: bool,
    pub feasibility: FeasibilitySection,
    pub demo: DemoSection,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            methods: [
                "alg1",
                "exante_dp",
                "exante_fpr",
                "exante_fnr",
                "exante_suff",
            ]
            .map(String::from)
            .to_vec(),
            n_train: 500,
            n_test: 500,
            train_seed: 0,
            test_seed: 1,
            require_certificate: false,
            feasibility: FeasibilitySection::default(),
            demo: DemoSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Construction {
    ExAnte,
    Cost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeasibilitySection {
    pub construction: Construction,
    pub n_points: usize,
    pub seed: u64,
    /// Cost case sphere parameters; `k1` defaults to twice its threshold.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k1: Option<f64>,
    pub k2: f64,
    /// Monte Carlo agents per group for the moment check (0 skips it).
    pub mc_samples: usize,
}

impl Default for FeasibilitySection {
    fn default() -> Self {
        Self {
            construction: Construction::ExAnte,
            n_points: 100,
            seed: 0,
            k1: None,
            k2: 0.5,
            mc_samples: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoKind {
    Continuous,
    CoateLoury,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoSection {
    pub kind: DemoKind,
    pub grid_points: usize,
    pub seed: u64,
    pub continuous: ContinuousSpec,
    pub coate_loury: CoateLourySpec,
}

impl Default for DemoSection {
    fn default() -> Self {
        Self {
            kind: DemoKind::CoateLoury,
            grid_points: DEFAULT_GRID_POINTS,
            seed: 0,
            continuous: ContinuousSpec::default(),
            coate_loury: CoateLourySpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuousSpec {
    pub discrimination: Discrimination,
    pub wage: f64,
    pub cost_a: f64,
    pub cost_d: f64,
    pub skill_mean_a: f64,
    pub skill_mean_d: f64,
    pub skill_sd: f64,
    pub signal_m0: f64,
    pub signal_m1: f64,
    pub workers: usize,
}

impl Default for ContinuousSpec {
    fn default() -> Self {
        Self {
            discrimination: Discrimination::SkillGap,
            wage: 5.0,
            cost_a: 6.0,
            cost_d: 6.0,
            skill_mean_a: 1.0,
            skill_mean_d: 0.0,
            skill_sd: 1.0,
            signal_m0: 0.0,
            signal_m1: 2.0,
            workers: 20_000,
        }
    }
}

impl ContinuousSpec {
    pub fn market(&self) -> Result<ContinuousMarket1D, ExperimentError> {
        let law = |mean| SkillLaw {
            mean,
            sd: self.skill_sd,
        };
        ContinuousMarket1D::new(
            self.wage,
            PerGroup::new(self.cost_a, self.cost_d),
            NormalSignals {
                m0: self.signal_m0,
                m1: self.signal_m1,
            },
            PerGroup::new(law(self.skill_mean_a), law(self.skill_mean_d)),
        )
        .map_err(|e| ExperimentError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoateLourySpec {
    pub wage: f64,
    /// Exponential cost rates; a larger rate means cheaper qualification.
    pub rate_a: f64,
    pub rate_d: f64,
    pub signal_m0: f64,
    pub signal_m1: f64,
    pub prior_a: f64,
    pub prior_d: f64,
    pub p_plus: f64,
    pub p_minus: f64,
}

impl Default for CoateLourySpec {
    fn default() -> Self {
        Self {
            wage: 2.0,
            rate_a: 2.0,
            rate_d: 0.5,
            signal_m0: 0.0,
            signal_m1: 2.0,
            prior_a: 0.5,
            prior_d: 0.5,
            p_plus: 1.0,
            p_minus: 1.0,
        }
    }
}

impl CoateLourySpec {
    pub fn market(&self) -> Result<CoateLouryMarket, ExperimentError> {
        if !(self.rate_a > self.rate_d) {
            return Err(ExperimentError::Config(
                "group D's costs must dominate: rate_a > rate_d".into(),
            ));
        }
        CoateLouryMarket::new(
            self.wage,
            PerGroup::new(
                CostFamily::Exponential { rate: self.rate_a },
                CostFamily::Exponential { rate: self.rate_d },
            ),
            NormalSignals {
                m0: self.signal_m0,
                m1: self.signal_m1,
            },
            PerGroup::new(self.prior_a, self.prior_d),
            self.p_plus,
            self.p_minus,
        )
        .map_err(|e| ExperimentError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
    pub plots: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "out".into(),
            plots: true,
        }
    }
}

impl ExperimentConfig {
    /// The labor-market experiment: latent model with identity loading,
    /// 500 training and 500 test agents per group, seeds 0 and 1.
    pub fn reference() -> Self {
        let mut population = RawPopulation::reference_labor_market();
        population.reg_weight = Some(0.1);
        let mut solver = SolverConfig::default();
        solver.eta_scale = 0.1;
        Self {
            population,
            solver,
            constraints: ConstraintsConfig::default(),
            experiment: ExperimentSection::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reseeds every random stream from one value.
    pub fn apply_seed_override(&mut self, seed: u64) {
        self.experiment.train_seed = seed;
        self.experiment.test_seed = seed.wrapping_add(1);
        self.experiment.feasibility.seed = seed;
        self.experiment.demo.seed = seed;
        self.solver.oracle.seed = seed;
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        crate::model::validate_model(&self.population)
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.solver
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        let c = &self.constraints;
        if !(c.kappa.is_finite() && c.kappa >= 0.0) {
            return bad(format!("kappa must be nonnegative, got {}", c.kappa));
        }
        if let Some(nu) = c.nu {
            if !(nu.is_finite() && nu >= 0.0) {
                return bad(format!("nu must be nonnegative, got {nu}"));
            }
        }
        if !(c.bound.is_finite() && c.bound > 0.0) {
            return bad(format!("bound must be positive, got {}", c.bound));
        }
        let e = &self.experiment;
        if e.methods.is_empty() {
            return bad("methods must not be empty".into());
        }
        for (i, m) in e.methods.iter().enumerate() {
            if super::run::method_mode(m).is_none() {
                return bad(format!("unknown method {m:?}"));
            }
            if e.methods[..i].contains(m) {
                return bad(format!("method {m:?} listed twice"));
            }
        }
        if e.n_train == 0 || e.n_test == 0 {
            return bad("sample sizes must be positive".into());
        }
        if e.demo.grid_points == 0 {
            return bad("grid_points must be positive".into());
        }
        if self.output.dir.is_empty() {
            return bad("output dir must not be empty".into());
        }
        Ok(())
    }
}

/// Constraint mode behind a method name.
pub(crate) fn parse_method(name: &str) -> Option<ConstraintMode> {
    match name {
        "alg1" => Some(ConstraintMode::ExpostAll),
        other => ConstraintMode::parse(other),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_round_trips_through_toml() {
        let cfg = ExperimentConfig::reference();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn empty_methods_is_a_config_error() {
        let mut cfg = ExperimentConfig::reference();
        cfg.experiment.methods.clear();
        let err = ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_keys_and_methods_are_rejected() {
        let text = ExperimentConfig::reference()
            .to_toml()
            .replace("[output]", "[output]\ncolour = true");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
        let mut cfg = ExperimentConfig::reference();
        cfg.experiment.methods = vec!["alg2".into()];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn slack_defaults_to_kappa_rate() {
        let c = ConstraintsConfig::default();
        assert!((c.slack(500, 400) - 2.0 / 20.0).abs() < 1e-15);
        let fixed = ConstraintsConfig { nu: Some(0.3), ..c };
        assert_eq!(fixed.slack(1, 1), 0.3);
    }

    #[test]
    fn seed_override_moves_every_stream() {
        let mut cfg = ExperimentConfig::reference();
        cfg.apply_seed_override(7);
        assert_eq!(
            (cfg.experiment.train_seed, cfg.experiment.test_seed),
            (7, 8)
        );
        assert_eq!(cfg.solver.oracle.seed, 7);
    }
}
