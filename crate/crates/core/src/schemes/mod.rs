//! Backward Euler and Malliavin-weights schemes over a pluggable
//! conditional-expectation backend.
//!
//! Both schemes publish, for every index, fitted maps `ŷ_i` and `ẑ_i` (the
//! latter as `q` scalar maps). `ŷ_N` is the terminal function itself.

mod probe;
mod quad;
mod regression;

use std::io::{self, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use probe::{representation_probe, ProbeEstimate};

use crate::condexp::{RegressionBasis, StateFunction, DEFAULT_QUADRATURE_ORDER, INDICATOR_QUADRATURE_ORDER};
use crate::error::{invalid, Error, Result};
use crate::grids::TimeGrid;
use crate::models::{Driver, SdeModel, TerminalCondition, TerminalKind};
use crate::paths::{PathBatch, WeightVariant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    Euler,
    Malliavin,
}

impl SchemeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SchemeKind::Euler => "euler",
            SchemeKind::Malliavin => "malliavin",
        }
    }
}

/// Uniform one-dimensional state grid used per time index by the quadrature
/// backend in grid mode.
///
/// Grid `i` is centred at `x0 + b t_i` with half-width `half_width |σ| √T`.
/// Its spacing is `min(max_spacing, |σ| √(T - t_i) / points_per_sd)`, coarsened
/// if needed so that at most `max_points` points are used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StateGrid {
    pub half_width: f64,
    pub max_spacing: f64,
    pub points_per_sd: f64,
    pub max_points: usize,
}

impl Default for StateGrid {
    fn default() -> Self {
        Self {
            half_width: 8.0,
            max_spacing: 0.01,
            points_per_sd: 20.0,
            max_points: 20_001,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum QuadMode {
    /// Memoized recursion over the full quadrature tree; any `d`, tiny `N`.
    Exact,
    /// Interpolated values on per-step state grids; `d = 1`.
    Grid(StateGrid),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadSpec {
    pub order: usize,
    pub mode: QuadMode,
}

impl QuadSpec {
    /// Order 64 for the indicator and 16 otherwise; grid mode when `d = 1`.
    pub fn for_problem(model: &SdeModel, terminal: &TerminalCondition) -> Self {
        let order = match terminal.kind() {
            TerminalKind::Indicator { .. } => INDICATOR_QUADRATURE_ORDER,
            _ => DEFAULT_QUADRATURE_ORDER,
        };
        let mode = if model.dim_state() == 1 {
            QuadMode::Grid(StateGrid::default())
        } else {
            QuadMode::Exact
        };
        Self { order, mode }
    }

    pub fn exact(order: usize) -> Self {
        Self {
            order,
            mode: QuadMode::Exact,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Backend {
    Quadrature(QuadSpec),
    Lsmc(RegressionBasis),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MalliavinOptions {
    pub weights: WeightVariant,
    /// Warn when `Var(S_Z)` at `i` exceeds this multiple of its value at `i + 1`.
    pub variance_warning_ratio: f64,
}

impl Default for MalliavinOptions {
    fn default() -> Self {
        Self {
            weights: WeightVariant::Consistent,
            variance_warning_ratio: 100.0,
        }
    }
}

/// Per-path fitted values on the training batch.
#[derive(Debug, Clone)]
pub struct PathValues {
    /// `y[i][m]`, `i = 0..=N`.
    pub y: Vec<Vec<f64>>,
    /// `z[i][m * q + c]`, `i = 0..N`.
    pub z: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct DiscreteSolution {
    scheme: SchemeKind,
    grid: TimeGrid,
    x0: Vec<f64>,
    dim_noise: usize,
    y: Vec<StateFunction>,
    z: Vec<Vec<StateFunction>>,
    path_values: Option<PathValues>,
    root_se: Option<(f64, Vec<f64>)>,
    warnings: Vec<String>,
}

impl DiscreteSolution {
    pub fn scheme(&self) -> SchemeKind {
        self.scheme
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim_noise(&self) -> usize {
        self.dim_noise
    }

    pub fn y_fn(&self, i: usize) -> &StateFunction {
        &self.y[i]
    }

    pub fn z_fn(&self, i: usize, c: usize) -> &StateFunction {
        &self.z[i][c]
    }

    pub fn y(&self, i: usize, x: &[f64]) -> f64 {
        self.y[i].eval(x)
    }

    pub fn z_into(&self, i: usize, x: &[f64], out: &mut [f64]) {
        for (o, f) in out.iter_mut().zip(&self.z[i]) {
            *o = f.eval(x);
        }
    }

    pub fn z(&self, i: usize, x: &[f64]) -> Vec<f64> {
        self.z[i].iter().map(|f| f.eval(x)).collect()
    }

    /// `ŷ_0(x_0)`.
    pub fn y0(&self) -> f64 {
        self.y(0, &self.x0)
    }

    /// `ẑ_0(x_0)`.
    pub fn z0(&self) -> Vec<f64> {
        self.z(0, &self.x0)
    }

    /// Regression standard errors of `ŷ_0(x_0)` and `ẑ_0(x_0)`, when path-based.
    pub fn root_standard_errors(&self) -> Option<&(f64, Vec<f64>)> {
        self.root_se.as_ref()
    }

    pub fn path_values(&self) -> Option<&PathValues> {
        self.path_values.as_ref()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Columns `index,t,mean_y,mean_z_<c>..,y_x0,z_x0_<c>..`. Means are empty
    /// without path values; `z` columns are empty at `i = N`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let q = self.dim_noise;
        let mut head = vec!["index".to_string(), "t".into(), "mean_y".into()];
        head.extend((0..q).map(|c| format!("mean_z_{c}")));
        head.push("y_x0".into());
        head.extend((0..q).map(|c| format!("z_x0_{c}")));
        writeln!(out, "{}", head.join(","))?;
        let n = self.grid.steps();
        let fmt = |v: f64| format!("{v:.16e}");
        for i in 0..=n {
            let mut row = vec![i.to_string(), fmt(self.grid.t(i))];
            match &self.path_values {
                Some(pv) => {
                    row.push(fmt(mean(&pv.y[i])));
                    for c in 0..q {
                        if i < n {
                            let col: Vec<f64> = pv.z[i].iter().skip(c).step_by(q).copied().collect();
                            row.push(fmt(mean(&col)));
                        } else {
                            row.push(String::new());
                        }
                    }
                }
                None => row.extend(std::iter::repeat(String::new()).take(q + 1)),
            }
            row.push(fmt(self.y(i, &self.x0)));
            if i < n {
                row.extend(self.z(i, &self.x0).into_iter().map(fmt));
            } else {
                row.extend(std::iter::repeat(String::new()).take(q));
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

struct Problem<'a> {
    model: &'a SdeModel,
    driver: &'a Driver,
    terminal: &'a TerminalCondition,
    grid: &'a TimeGrid,
}

impl<'a> Problem<'a> {
    fn new(model: &'a SdeModel, driver: &'a Driver, terminal: &'a TerminalCondition, grid: &'a TimeGrid) -> Result<Self> {
        if (driver.horizon() - grid.horizon()).abs() > 1e-12 * grid.horizon() {
            return Err(invalid(format!(
                "driver horizon {} differs from grid horizon {}",
                driver.horizon(),
                grid.horizon()
            )));
        }
        Ok(Self {
            model,
            driver,
            terminal,
            grid,
        })
    }

    fn solution(&self, scheme: SchemeKind, y: Vec<StateFunction>, z: Vec<Vec<StateFunction>>) -> DiscreteSolution {
        DiscreteSolution {
            scheme,
            grid: self.grid.clone(),
            x0: self.model.x0().to_vec(),
            dim_noise: self.model.dim_noise(),
            y,
            z,
            path_values: None,
            root_se: None,
            warnings: Vec::new(),
        }
    }

    fn terminal_fn(&self) -> StateFunction {
        let phi = self.terminal.function();
        StateFunction::from_fn(move |x| phi(x))
    }
}

/// Weight kernel `A` (`q x q`, row-major) for constant coefficients: the
/// projection `σ^{-1} σ` or, for the printed variant, `σ` itself.
fn constant_kernel(model: &SdeModel, variant: WeightVariant) -> Result<Vec<f64>> {
    let (_, sigma) = model.constant_parts()?;
    let q = model.dim_noise();
    let k: DMatrix<f64> = match variant {
        WeightVariant::Consistent => model.sigma_right_inverse(0.0, model.x0())? * &sigma,
        WeightVariant::Printed => {
            if model.dim_state() != q {
                return Err(Error::UnsupportedCombination(
                    "printed weight variant requires d = q".into(),
                ));
            }
            sigma
        }
    };
    Ok((0..q * q).map(|e| k[(e / q, e % q)]).collect())
}

/// Euler scheme: `Z̄_i = E_i[Ȳ_{i+1} ΔW_i^T] / Δ_i`, then
/// `Ȳ_i = E_i[Ȳ_{i+1} + f(t_i, X_i, Ȳ_{i+1}, Z̄_i) Δ_i]`.
///
/// The LSMC backend requires `batch`; the quadrature backend ignores it.
pub fn euler_scheme(
    model: &SdeModel,
    driver: &Driver,
    terminal: &TerminalCondition,
    grid: &TimeGrid,
    backend: &Backend,
    batch: Option<&PathBatch>,
) -> Result<DiscreteSolution> {
    let p = Problem::new(model, driver, terminal, grid)?;
    match backend {
        Backend::Quadrature(spec) => match spec.mode {
            QuadMode::Exact => quad::euler_exact(&p, spec.order),
            QuadMode::Grid(g) => quad::euler_grid(&p, spec.order, &g),
        },
        Backend::Lsmc(basis) => {
            let batch = batch.ok_or_else(|| invalid("the regression backend needs a path batch"))?;
            regression::euler(&p, basis, batch)
        }
    }
}

/// Malliavin-weights scheme with default options.
pub fn malliavin_weights_scheme(
    model: &SdeModel,
    driver: &Driver,
    terminal: &TerminalCondition,
    grid: &TimeGrid,
    backend: &Backend,
    batch: Option<&PathBatch>,
) -> Result<DiscreteSolution> {
    malliavin_weights_scheme_with(model, driver, terminal, grid, backend, batch, &MalliavinOptions::default())
}

/// Malliavin-weights scheme. Within each index `ẑ_i` is fitted first and
/// then enters the driver term at `t_i` of the `ŷ_i` target.
pub fn malliavin_weights_scheme_with(
    model: &SdeModel,
    driver: &Driver,
    terminal: &TerminalCondition,
    grid: &TimeGrid,
    backend: &Backend,
    batch: Option<&PathBatch>,
    options: &MalliavinOptions,
) -> Result<DiscreteSolution> {
    let p = Problem::new(model, driver, terminal, grid)?;
    match backend {
        Backend::Quadrature(spec) => {
            let kernel = constant_kernel(model, options.weights)?;
            match spec.mode {
                QuadMode::Exact => quad::malliavin_exact(&p, spec.order, kernel),
                QuadMode::Grid(g) => quad::malliavin_grid(&p, spec.order, &g, kernel),
            }
        }
        Backend::Lsmc(basis) => {
            let batch = batch.ok_or_else(|| invalid("the regression backend needs a path batch"))?;
            regression::malliavin(&p, basis, batch, options)
        }
    }
}

/// Dispatches on `scheme`.
pub fn solve(
    scheme: SchemeKind,
    model: &SdeModel,
    driver: &Driver,
    terminal: &TerminalCondition,
    grid: &TimeGrid,
    backend: &Backend,
    batch: Option<&PathBatch>,
) -> Result<DiscreteSolution> {
    match scheme {
        SchemeKind::Euler => euler_scheme(model, driver, terminal, grid, backend, batch),
        SchemeKind::Malliavin => malliavin_weights_scheme(model, driver, terminal, grid, backend, batch),
    }
}
