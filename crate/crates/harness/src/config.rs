//! Experiment configuration.
//!
//! A config is a TOML document with dotted sections. Every section rejects
//! unknown keys, so a typo fails at load time with the offending line.
//!
//! ```toml
//! [experiment]
//! name = "euler-capped-call"
//! scheme = "euler"          # euler | malliavin
//! seed = 20240601
//! paths = 200000            # Monte Carlo paths for error estimation
//!
//! [model]
//! name = "brownian"         # brownian | tanh
//! sigma = 1.0
//!
//! [driver]
//! name = "zero"             # zero | affine | synthetic | truncated-quadratic
//!
//! [terminal]
//! name = "capped-call"      # identity | capped-call | holder | indicator | constant
//! strike = 0.0
//! cap = 1.0
//!
//! [grid]
//! horizon = 1.0
//! beta = 0.9
//! steps = [8, 16, 32, 64, 128, 256]
//!
//! [backend]
//! kind = "quadrature"       # quadrature | lsmc
//!
//! [acceptance]
//! slope_min = -1.25
//! slope_max = -0.80
//! ```

use std::path::{Path, PathBuf};

use bsde_core::condexp::{RegressionBasis, Ridge};
use bsde_core::metrics::{Evaluation, DEFAULT_SUBSTEPS};
use bsde_core::models::{Driver, SdeModel, TerminalCondition};
use bsde_core::schemes::{Backend, QuadMode, QuadSpec, SchemeKind, StateGrid};
use bsde_core::{make_grid, TimeGrid};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub model: Option<ModelSection>,
    pub driver: Option<DriverSection>,
    pub terminal: Option<TerminalSection>,
    pub grid: Option<GridSection>,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub reference: ReferenceSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub acceptance: AcceptanceSection,
    pub verify: Option<VerifySection>,
    pub probe: Option<ProbeSection>,
    pub smoothness: Option<SmoothnessSection>,
    pub report: Option<ReportSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    #[serde(default = "default_scheme")]
    pub scheme: SchemeKind,
    /// Required: there is no wall-clock default.
    pub seed: u64,
    #[serde(default = "default_paths")]
    pub paths: usize,
    /// Output directory; `--out` overrides it. Not part of the config hash.
    pub output: Option<PathBuf>,
}

fn default_scheme() -> SchemeKind {
    SchemeKind::Euler
}

fn default_paths() -> usize {
    100_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "name", rename_all = "kebab-case")]
pub enum ModelSection {
    Brownian {
        #[serde(default)]
        x0: f64,
        #[serde(default)]
        drift: f64,
        #[serde(default = "one")]
        sigma: f64,
    },
    Tanh {
        #[serde(default)]
        x0: f64,
        b0: f64,
        s0: f64,
        s1: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "name", rename_all = "kebab-case")]
pub enum DriverSection {
    Zero,
    Affine {
        #[serde(default)]
        a: f64,
        #[serde(default)]
        b: Vec<f64>,
        #[serde(default)]
        c: f64,
    },
    Synthetic {
        c_f: f64,
        lipschitz: f64,
        theta_c: f64,
        theta_l: f64,
    },
    TruncatedQuadratic {
        c: f64,
        c_u: f64,
        theta: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "name", rename_all = "kebab-case")]
pub enum TerminalSection {
    Identity,
    CappedCall { strike: f64, cap: f64 },
    Holder { strike: f64, exponent: f64, cap: f64 },
    Indicator { strike: f64 },
    Constant { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default = "one")]
    pub horizon: f64,
    pub beta: f64,
    /// Strictly increasing.
    pub steps: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    #[default]
    #[serde(alias = "quad")]
    Quadrature,
    Lsmc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum QuadModeName {
    #[default]
    Auto,
    Grid,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BasisName {
    #[default]
    Polynomial,
    LocalAffine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    #[serde(default)]
    pub kind: BackendKind,
    /// Quadrature order; defaults to 64 for the indicator and 16 otherwise.
    pub order: Option<usize>,
    #[serde(default)]
    pub mode: QuadModeName,
    #[serde(default)]
    pub basis: BasisName,
    /// Polynomial degree (default 3) or cells per dimension (default 16).
    pub degree: Option<usize>,
    pub ridge: Option<f64>,
    /// Training paths for the regression backend; defaults to `experiment.paths`.
    pub training_paths: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceKind {
    #[default]
    ClosedForm,
    FineGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSection {
    #[serde(default)]
    pub kind: ReferenceKind,
    /// Fine-grid reference: number of steps (default 1024).
    pub steps: Option<usize>,
    /// Fine-grid reference: seed of its regression paths; must differ from
    /// the experiment seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default = "yes")]
    pub self_check: bool,
    /// Fit the slope without the smallest `N`.
    #[serde(default = "yes")]
    pub drop_smallest: bool,
    #[serde(default)]
    pub metric: Metric,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            substeps: DEFAULT_SUBSTEPS,
            self_check: true,
            drop_smallest: true,
            metric: Metric::default(),
        }
    }
}

fn default_substeps() -> usize {
    DEFAULT_SUBSTEPS
}

fn yes() -> bool {
    true
}

/// Quantity whose decay in `N` is fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// The Euler scheme's metric for Euler runs, the weighted Z metric for Malliavin runs.
    #[default]
    Auto,
    /// `ℰ(N) = maxY + sumZ`.
    Total,
    /// `max_i (T - t_i)^{(1+β-θ_L)/2} (E|Z_{t_i} - Z̄_i|^2)^{1/2}`.
    WeightedZ,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AcceptanceSection {
    pub slope_min: Option<f64>,
    pub slope_max: Option<f64>,
    pub max_abs_z_score: Option<f64>,
    pub alpha_min: Option<f64>,
    pub alpha_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default = "default_betas")]
    pub betas: Vec<f64>,
    #[serde(default = "default_thetas")]
    pub thetas: Vec<f64>,
    #[serde(default = "default_verify_steps")]
    pub steps: Vec<usize>,
    #[serde(default = "one")]
    pub horizon: f64,
}

fn default_betas() -> Vec<f64> {
    vec![0.2, 0.4, 0.6, 0.8, 1.0]
}

fn default_thetas() -> Vec<f64> {
    vec![0.25, 0.5, 0.75, 1.0]
}

fn default_verify_steps() -> Vec<usize> {
    vec![4, 16, 64, 256, 1024, 4096]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    #[serde(default = "default_probe_steps")]
    pub steps: usize,
    #[serde(default = "one")]
    pub beta: f64,
}

fn default_probe_steps() -> usize {
    1024
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothnessSection {
    pub times: Vec<f64>,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_samples() -> usize {
    20_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    /// Summary files or directories containing `summary.json`.
    pub inputs: Vec<PathBuf>,
}

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

fn missing(section: &str) -> HarnessError {
    bad(format!("missing section [{section}]"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(path.display().to_string(), e))?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn validate(&self) -> Result<(), HarnessError> {
        if let Some(g) = &self.grid {
            if g.steps.is_empty() {
                return Err(bad("grid.steps must not be empty"));
            }
            if g.steps.windows(2).any(|w| w[0] >= w[1]) {
                return Err(bad("grid.steps must be strictly increasing"));
            }
            unit_interval("grid.beta", g.beta)?;
        }
        if let Some(v) = &self.verify {
            for &b in &v.betas {
                unit_interval("verify.betas", b)?;
            }
            for &t in &v.thetas {
                unit_interval("verify.thetas", t)?;
            }
            if v.steps.contains(&0) {
                return Err(bad("verify.steps must be positive"));
            }
        }
        if let (Some(lo), Some(hi)) = (self.acceptance.slope_min, self.acceptance.slope_max) {
            if lo > hi {
                return Err(bad("acceptance.slope_min exceeds slope_max"));
            }
        }
        if self.reference.kind == ReferenceKind::FineGrid && self.reference.seed == Some(self.experiment.seed) {
            return Err(bad("reference.seed must differ from experiment.seed"));
        }
        // Resolve catalog entries early so that bad parameters fail at load.
        if self.model.is_some() {
            self.model()?;
        }
        if self.terminal.is_some() {
            self.terminal()?;
        }
        if self.driver.is_some() && self.model.is_some() {
            self.driver()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, without the output directory.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.experiment.output = None;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn horizon(&self) -> f64 {
        self.grid.as_ref().map_or(1.0, |g| g.horizon)
    }

    pub fn model(&self) -> Result<SdeModel, HarnessError> {
        Ok(match self.model.as_ref().ok_or_else(|| missing("model"))? {
            ModelSection::Brownian { x0, drift, sigma } => SdeModel::brownian(*x0, *drift, *sigma)?,
            ModelSection::Tanh { x0, b0, s0, s1 } => SdeModel::tanh(*x0, *b0, *s0, *s1)?,
        })
    }

    pub fn driver(&self) -> Result<Driver, HarnessError> {
        let horizon = self.horizon();
        let q = self.model()?.dim_noise();
        Ok(match self.driver.as_ref().ok_or_else(|| missing("driver"))? {
            DriverSection::Zero => Driver::zero(horizon)?,
            DriverSection::Affine { a, b, c } => {
                let b = if b.is_empty() { vec![0.0; q] } else { b.clone() };
                Driver::affine(horizon, *a, b, *c)?
            }
            DriverSection::Synthetic {
                c_f,
                lipschitz,
                theta_c,
                theta_l,
            } => Driver::synthetic(horizon, *c_f, *lipschitz, *theta_c, *theta_l, q)?,
            DriverSection::TruncatedQuadratic { c, c_u, theta } => Driver::truncated_quadratic(horizon, *c, *c_u, *theta, q)?,
        })
    }

    pub fn terminal(&self) -> Result<TerminalCondition, HarnessError> {
        Ok(match self.terminal.as_ref().ok_or_else(|| missing("terminal"))? {
            TerminalSection::Identity => TerminalCondition::identity(),
            TerminalSection::CappedCall { strike, cap } => TerminalCondition::capped_call(*strike, *cap)?,
            TerminalSection::Holder { strike, exponent, cap } => TerminalCondition::holder(*strike, *exponent, *cap)?,
            TerminalSection::Indicator { strike } => TerminalCondition::indicator(*strike),
            TerminalSection::Constant { value } => TerminalCondition::constant(*value),
        })
    }

    pub fn grid_section(&self) -> Result<&GridSection, HarnessError> {
        self.grid.as_ref().ok_or_else(|| missing("grid"))
    }

    pub fn time_grid(&self, steps: usize) -> Result<TimeGrid, HarnessError> {
        let g = self.grid_section()?;
        Ok(make_grid(g.horizon, steps, g.beta)?)
    }

    pub fn backend(&self, model: &SdeModel, terminal: &TerminalCondition) -> Backend {
        let b = &self.backend;
        match b.kind {
            BackendKind::Quadrature => {
                let mut spec = QuadSpec::for_problem(model, terminal);
                if let Some(order) = b.order {
                    spec.order = order;
                }
                spec.mode = match b.mode {
                    QuadModeName::Auto => spec.mode,
                    QuadModeName::Grid => QuadMode::Grid(StateGrid::default()),
                    QuadModeName::Exact => QuadMode::Exact,
                };
                Backend::Quadrature(spec)
            }
            BackendKind::Lsmc => {
                let basis = match b.basis {
                    BasisName::Polynomial => RegressionBasis::polynomial(b.degree.unwrap_or(3)),
                    BasisName::LocalAffine => RegressionBasis::local_affine(b.degree.unwrap_or(16)),
                };
                Backend::Lsmc(match b.ridge {
                    Some(l) => basis.with_ridge(Ridge::Fixed(l)),
                    None => basis,
                })
            }
        }
    }

    pub fn training_paths(&self) -> usize {
        self.backend.training_paths.unwrap_or(self.experiment.paths)
    }

    pub fn evaluation(&self, seed: u64) -> Evaluation {
        let mut e = Evaluation::new(self.experiment.paths, seed).with_substeps(self.evaluation.substeps);
        e.self_check = self.evaluation.self_check;
        e
    }

    pub fn metric(&self) -> Metric {
        match self.evaluation.metric {
            Metric::Auto => match self.experiment.scheme {
                SchemeKind::Euler => Metric::Total,
                SchemeKind::Malliavin => Metric::WeightedZ,
            },
            m => m,
        }
    }
}

fn unit_interval(name: &str, v: f64) -> Result<(), HarnessError> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(bad(format!("{name} must lie in (0, 1], got {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[experiment]
name = "t"
seed = 7

[model]
name = "brownian"

[driver]
name = "zero"

[terminal]
name = "capped-call"
strike = 0.0
cap = 1.0

[grid]
beta = 0.9
steps = [8, 16]
"#;

    #[test]
    fn parses_and_resolves() {
        let cfg = ExperimentConfig::from_toml(BASE).unwrap();
        assert_eq!(cfg.model().unwrap().name(), "brownian");
        assert_eq!(cfg.metric(), Metric::Total);
        assert!(matches!(cfg.backend(&cfg.model().unwrap(), &cfg.terminal().unwrap()), Backend::Quadrature(_)));
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_location() {
        let err = ExperimentConfig::from_toml(&BASE.replace("beta = 0.9", "beta = 0.9\nbogus = 1")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn domain_violations_are_rejected() {
        assert!(ExperimentConfig::from_toml(&BASE.replace("beta = 0.9", "beta = 1.5")).is_err());
        assert!(ExperimentConfig::from_toml(&BASE.replace("[8, 16]", "[16, 8]")).is_err());
        assert!(ExperimentConfig::from_toml(&BASE.replace("seed = 7\n", "")).is_err());
        assert!(ExperimentConfig::from_toml(&BASE.replace("cap = 1.0", "cap = -1.0")).is_err());
    }

    #[test]
    fn hash_ignores_output_only() {
        let a = ExperimentConfig::from_toml(BASE).unwrap();
        let mut b = a.clone();
        b.experiment.output = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.experiment.seed = 8;
        assert_ne!(a.hash(), b.hash());
    }
}
