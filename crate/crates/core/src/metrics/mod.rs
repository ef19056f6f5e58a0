//! Error functionals, regularity measurements, a priori Z checks and rate fits.
//!
//! All Monte Carlo estimates stream over chunks of paths, so memory stays
//! bounded for large `M`. Interval integrals use the midpoint rule on points
//! drawn from the Brownian bridge of each simulated step.

mod bridge;
mod rate;
mod regularity;

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grids::TimeGrid;
use crate::models::{Driver, SdeModel, TerminalCondition};
use crate::oracle::ReferenceSolution;
use crate::paths::simulate_range;
use crate::schemes::{DiscreteSolution, SchemeKind};
use bridge::Bridge;

pub use rate::{fit_rate, fit_rate_with, RateFit, FLOOR};
pub use regularity::{
    apriori_z_check, l2_regularity, reference_z_moments, solution_z_moments, AprioriCheck, AprioriPoint,
    L2Regularity, ZMoment,
};

pub const DEFAULT_SUBSTEPS: usize = 4;
const CHUNK: usize = 4096;
const PILOT_PATHS: usize = 20_000;
const SELF_CHECK_TOLERANCE: f64 = 0.05;
const MAX_SUBSTEPS: usize = 64;

/// How the error functionals are sampled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Evaluation {
    pub paths: usize,
    pub seed: u64,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    /// Compare `S` against `2S` sub-points on a pilot sample and double `S`
    /// until they agree to 5%.
    #[serde(default = "yes")]
    pub self_check: bool,
}

fn default_substeps() -> usize {
    DEFAULT_SUBSTEPS
}

fn yes() -> bool {
    true
}

impl Evaluation {
    pub fn new(paths: usize, seed: u64) -> Self {
        Self {
            paths,
            seed,
            substeps: DEFAULT_SUBSTEPS,
            self_check: true,
        }
    }

    pub fn with_substeps(mut self, substeps: usize) -> Self {
        self.substeps = substeps;
        self
    }

    pub fn without_self_check(mut self) -> Self {
        self.self_check = false;
        self
    }
}

/// Pilot comparison behind the chosen number of sub-points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SubstepCheck {
    pub pilot_paths: usize,
    /// Pilot `sumZ` with the chosen `S`.
    pub coarse: f64,
    /// Pilot `sumZ` with `2S`.
    pub fine: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub steps: usize,
    pub beta: f64,
    pub scheme: SchemeKind,
    pub theta_l: f64,
    /// `max_i E|Y_{t_i} - Ȳ_i|^2` over `0 <= i < N`.
    pub max_y: f64,
    pub max_y_stderr: f64,
    pub max_y_index: usize,
    /// `Σ_i ∫ E|Z_t - Z̄_i|^2 dt`.
    pub sum_z: f64,
    pub sum_z_stderr: f64,
    /// `max_y + sum_z`.
    pub total: f64,
    pub total_stderr: f64,
    pub y_profile: Vec<f64>,
    pub y_profile_stderr: Vec<f64>,
    /// `E|Z_{t_i} - Z̄_i|^2`.
    pub z_profile: Vec<f64>,
    pub z_profile_stderr: Vec<f64>,
    /// `(T - t_i)^{1 + β - θ_L} E|Z_{t_i} - Z̄_i|^2`.
    pub z_weighted_profile: Vec<f64>,
    /// `max_i` of the square root of the weighted profile.
    pub max_weighted_z: f64,
    pub max_weighted_z_stderr: f64,
    pub max_weighted_z_index: usize,
    pub paths: usize,
    pub seed: u64,
    pub substeps: usize,
    pub substep_check: Option<SubstepCheck>,
    pub reference: String,
    /// Set when the reference is itself a numerical approximation.
    pub reference_disclaimer: Option<String>,
}

pub const REPORT_CSV_HEADER: &str = "N,beta,scheme,max_y,max_y_stderr,sum_z,sum_z_stderr,total,total_stderr,\
max_weighted_z,max_weighted_z_stderr,paths,substeps";

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

impl ErrorReport {
    /// One row under [`REPORT_CSV_HEADER`].
    pub fn csv_row(&self) -> String {
        [
            self.steps.to_string(),
            num(self.beta),
            self.scheme.as_str().to_string(),
            num(self.max_y),
            num(self.max_y_stderr),
            num(self.sum_z),
            num(self.sum_z_stderr),
            num(self.total),
            num(self.total_stderr),
            num(self.max_weighted_z),
            num(self.max_weighted_z_stderr),
            self.paths.to_string(),
            self.substeps.to_string(),
        ]
        .join(",")
    }

    /// Columns `index,t,y_err,y_err_stderr,z_err,z_err_stderr,z_weighted`.
    pub fn write_profile_csv<W: Write>(&self, grid: &TimeGrid, mut out: W) -> io::Result<()> {
        writeln!(out, "index,t,y_err,y_err_stderr,z_err,z_err_stderr,z_weighted")?;
        for i in 0..self.steps {
            writeln!(
                out,
                "{i},{},{},{},{},{},{}",
                num(grid.t(i)),
                num(self.y_profile[i]),
                num(self.y_profile_stderr[i]),
                num(self.z_profile[i]),
                num(self.z_profile_stderr[i]),
                num(self.z_weighted_profile[i]),
            )?;
        }
        Ok(())
    }
}

/// Running first and second moments of per-path rows.
struct Moments {
    sum: Vec<f64>,
    sq: Vec<f64>,
    count: usize,
}

impl Moments {
    fn new(width: usize) -> Self {
        Self {
            sum: vec![0.0; width],
            sq: vec![0.0; width],
            count: 0,
        }
    }

    fn push(&mut self, row: &[f64]) {
        for (k, v) in row.iter().enumerate() {
            self.sum[k] += v;
            self.sq[k] += v * v;
        }
        self.count += 1;
    }

    fn mean_se(&self, k: usize) -> (f64, f64) {
        let m = self.count as f64;
        let mean = self.sum[k] / m;
        let var = (self.sq[k] / m - mean * mean).max(0.0) * m / (m - 1.0);
        (mean, (var / m).sqrt())
    }
}

/// Per path: `N` squared Y errors, `N` squared Z errors at grid points, then
/// the interval Z integral. With `grid_points = false` only the integral.
fn accumulate(
    solution: &DiscreteSolution,
    reference: &ReferenceSolution,
    model: &SdeModel,
    paths: usize,
    seed: u64,
    substeps: usize,
    grid_points: bool,
) -> Result<Moments> {
    let grid = solution.grid();
    let (n, d, q) = (grid.steps(), model.dim_state(), model.dim_noise());
    let width = if grid_points { 2 * n + 1 } else { 1 };
    let mut moments = Moments::new(width);
    let mut first = 0;
    while first < paths {
        let count = CHUNK.min(paths - first);
        let batch = simulate_range(model, grid, first, count, seed)?;
        let rows: Vec<Vec<f64>> = (0..count)
            .into_par_iter()
            .map(|m| {
                let mut bridge = Bridge::new(model, seed, first + m, substeps);
                let mut mids = vec![0.0; substeps * d];
                let (mut zh, mut zr) = (vec![0.0; q], vec![0.0; q]);
                let mut row = vec![0.0; width];
                let mut integral = 0.0;
                for i in 0..n {
                    let (t, dt) = (grid.t(i), grid.dt(i));
                    let x = batch.state(m, i);
                    solution.z_into(i, x, &mut zh);
                    if grid_points {
                        row[i] = (reference.y(t, x) - solution.y(i, x)).powi(2);
                        reference.z_into(t, x, &mut zr);
                        row[n + i] = sq_dist(&zr, &zh);
                    }
                    bridge.fill(i, t, dt, x, batch.increment(m, i), &mut mids);
                    let h = dt / substeps as f64;
                    for k in 0..substeps {
                        reference.z_into(t + (k as f64 + 0.5) * h, &mids[k * d..(k + 1) * d], &mut zr);
                        integral += h * sq_dist(&zr, &zh);
                    }
                }
                row[width - 1] = integral;
                row
            })
            .collect();
        for row in &rows {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(invalid("non-finite error sample; check the reference near the horizon"));
            }
            moments.push(row);
        }
        first += count;
    }
    Ok(moments)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum()
}

fn check_inputs(
    solution: &DiscreteSolution,
    reference: &ReferenceSolution,
    model: &SdeModel,
    driver: &Driver,
    terminal: &TerminalCondition,
) -> Result<()> {
    reference.validate_for(model, driver, terminal)?;
    let grid = solution.grid();
    if (reference.horizon() - grid.horizon()).abs() > 1e-12 * grid.horizon() {
        return Err(Error::ReferenceMismatch(format!(
            "reference horizon {} differs from grid horizon {}",
            reference.horizon(),
            grid.horizon()
        )));
    }
    if reference.dim_noise() != solution.dim_noise() || model.dim_noise() != solution.dim_noise() {
        return Err(Error::ReferenceMismatch("noise dimensions differ".into()));
    }
    Ok(())
}

/// Monte Carlo estimate of the discretization error functional of `solution`
/// against `reference` on fresh paths.
pub fn scheme_error(
    solution: &DiscreteSolution,
    reference: &ReferenceSolution,
    model: &SdeModel,
    driver: &Driver,
    terminal: &TerminalCondition,
    eval: &Evaluation,
) -> Result<ErrorReport> {
    check_inputs(solution, reference, model, driver, terminal)?;
    if eval.substeps == 0 {
        return Err(invalid("substeps must be at least 1"));
    }
    if eval.paths < 2 {
        return Err(invalid("error estimation needs at least two paths"));
    }
    let mut substeps = eval.substeps;
    let mut substep_check = None;
    if eval.self_check {
        let pilot = eval.paths.min(PILOT_PATHS);
        loop {
            let coarse = accumulate(solution, reference, model, pilot, eval.seed, substeps, false)?.mean_se(0).0;
            let fine = accumulate(solution, reference, model, pilot, eval.seed, 2 * substeps, false)?.mean_se(0).0;
            let passed = fine < 1e-20 || (coarse - fine).abs() <= SELF_CHECK_TOLERANCE * fine;
            substep_check = Some(SubstepCheck {
                pilot_paths: pilot,
                coarse,
                fine,
                passed,
            });
            if passed || 2 * substeps > MAX_SUBSTEPS {
                break;
            }
            substeps *= 2;
        }
        if let Some(c) = substep_check.filter(|c| !c.passed) {
            log::warn!("sub-point self-check still fails at S = {substeps}: {} vs {}", c.coarse, c.fine);
        }
    }

    let moments = accumulate(solution, reference, model, eval.paths, eval.seed, substeps, true)?;
    let grid = solution.grid();
    let n = grid.steps();
    let (y_profile, y_profile_stderr): (Vec<f64>, Vec<f64>) = (0..n).map(|i| moments.mean_se(i)).unzip();
    let (z_profile, z_profile_stderr): (Vec<f64>, Vec<f64>) = (0..n).map(|i| moments.mean_se(n + i)).unzip();
    let (sum_z, sum_z_stderr) = moments.mean_se(2 * n);

    let max_y_index = argmax(&y_profile);
    let (max_y, max_y_stderr) = (y_profile[max_y_index], y_profile_stderr[max_y_index]);

    let theta_l = driver.exponents().theta_l;
    let power = 1.0 + grid.beta() - theta_l;
    let weights: Vec<f64> = (0..n).map(|i| grid.time_to_go(i).powf(power)).collect();
    let z_weighted_profile: Vec<f64> = weights.iter().zip(&z_profile).map(|(w, z)| w * z).collect();
    let max_weighted_z_index = argmax(&z_weighted_profile);
    let k = max_weighted_z_index;
    let max_weighted_z = z_weighted_profile[k].sqrt();
    let max_weighted_z_stderr = if z_profile[k] > 0.0 {
        weights[k].sqrt() * z_profile_stderr[k] / (2.0 * z_profile[k].sqrt())
    } else {
        0.0
    };

    Ok(ErrorReport {
        steps: n,
        beta: grid.beta(),
        scheme: solution.scheme(),
        theta_l,
        max_y,
        max_y_stderr,
        max_y_index,
        sum_z,
        sum_z_stderr,
        total: max_y + sum_z,
        total_stderr: max_y_stderr.hypot(sum_z_stderr),
        y_profile,
        y_profile_stderr,
        z_profile,
        z_profile_stderr,
        z_weighted_profile,
        max_weighted_z,
        max_weighted_z_stderr,
        max_weighted_z_index,
        paths: eval.paths,
        seed: eval.seed,
        substeps,
        substep_check,
        reference: reference.descriptor().to_string(),
        reference_disclaimer: reference.is_numerical().then(|| {
            "reference is a numerical solution on a finer grid; its own discretization error is included".to_string()
        }),
    })
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}
