use rayon::prelude::*;
use serde::Serialize;

use super::bridge::Bridge;
use super::{sq_dist, Moments, CHUNK, DEFAULT_SUBSTEPS};
use crate::condexp::{fit_regression, GaussianTransition, QuadratureRule, RegressionBasis, RegressionFit};
use crate::error::{invalid, Error, Result};
use crate::grids::TimeGrid;
use crate::models::SdeModel;
use crate::oracle::ReferenceSolution;
use crate::paths::{simulate, simulate_range, PathBatch};
use crate::schemes::DiscreteSolution;

const PROJECTION_DEGREE: usize = 3;
const PROJECTION_ORDER: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct L2Regularity {
    /// `Σ_i ∫ E|Z_t - Z̃_{t_i}|^2 dt`.
    pub value: f64,
    pub stderr: f64,
    /// `Σ_i ∫ E|Z_t - Z_{t_i}|^2 dt`, never smaller in expectation.
    pub upper_bound: f64,
    pub upper_stderr: f64,
    pub paths: usize,
    pub substeps: usize,
}

fn check_reference(reference: &ReferenceSolution, model: &SdeModel, grid: &TimeGrid) -> Result<()> {
    if (reference.horizon() - grid.horizon()).abs() > 1e-12 * grid.horizon() {
        return Err(Error::ReferenceMismatch(format!(
            "reference horizon {} differs from grid horizon {}",
            reference.horizon(),
            grid.horizon()
        )));
    }
    if reference.dim_noise() != model.dim_noise() {
        return Err(Error::ReferenceMismatch("noise dimensions differ".into()));
    }
    Ok(())
}

/// Reference `Z` at the bridge midpoints of every step of path `m`, laid out
/// `N x S x q`.
fn midpoint_z(
    reference: &ReferenceSolution,
    model: &SdeModel,
    batch: &PathBatch,
    m: usize,
    seed: u64,
    substeps: usize,
) -> Vec<f64> {
    let grid = batch.grid();
    let (n, d, q) = (grid.steps(), model.dim_state(), model.dim_noise());
    let mut bridge = Bridge::new(model, seed, batch.first_path() + m, substeps);
    let mut mids = vec![0.0; substeps * d];
    let mut out = vec![0.0; n * substeps * q];
    for i in 0..n {
        let (t, dt) = (grid.t(i), grid.dt(i));
        bridge.fill(i, t, dt, batch.state(m, i), batch.increment(m, i), &mut mids);
        let h = dt / substeps as f64;
        for k in 0..substeps {
            let at = (i * substeps + k) * q;
            reference.z_into(t + (k as f64 + 0.5) * h, &mids[k * d..(k + 1) * d], &mut out[at..at + q]);
        }
    }
    out
}

/// Monte Carlo L2-regularity of the reference `Z` on `grid`.
///
/// `Z̃_{t_i}` is the conditional mean of the within-step average of `Z`
/// given `X_{t_i}`. With constant coefficients it is computed by Gauss–Hermite
/// quadrature over the transition to each sub-point; otherwise the step
/// averages along the paths are regressed on `X_{t_i}` with a cubic basis.
pub fn l2_regularity(
    reference: &ReferenceSolution,
    model: &SdeModel,
    grid: &TimeGrid,
    paths: usize,
    seed: u64,
) -> Result<L2Regularity> {
    check_reference(reference, model, grid)?;
    if paths < 2 {
        return Err(invalid("L2-regularity needs at least two paths"));
    }
    let (n, q, s) = (grid.steps(), model.dim_noise(), DEFAULT_SUBSTEPS);
    let batch = simulate(model, grid, paths, seed)?;
    let projections = if model.constant_coefficients() {
        let rule = QuadratureRule::new(PROJECTION_ORDER)?;
        (0..n)
            .map(|i| {
                let h = grid.dt(i) / s as f64;
                let steps = (0..s)
                    .map(|k| GaussianTransition::new(model, (k as f64 + 0.5) * h, &rule))
                    .collect::<Result<_>>()?;
                Ok(Projection::Transition { t: grid.t(i), h, steps })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        regressed_averages(reference, model, &batch, seed)?
    };

    let samples: Vec<(f64, f64)> = (0..paths)
        .into_par_iter()
        .map(|m| {
            let zs = midpoint_z(reference, model, &batch, m, seed, s);
            let (mut zt, mut zi) = (vec![0.0; q], vec![0.0; q]);
            let (mut value, mut upper) = (0.0, 0.0);
            for (i, proj) in projections.iter().enumerate() {
                let x = batch.state(m, i);
                proj.eval_into(reference, x, &mut zt);
                reference.z_into(grid.t(i), x, &mut zi);
                let h = grid.dt(i) / s as f64;
                for k in 0..s {
                    let z = &zs[(i * s + k) * q..(i * s + k + 1) * q];
                    value += h * sq_dist(z, &zt);
                    upper += h * sq_dist(z, &zi);
                }
            }
            (value, upper)
        })
        .collect();

    let mut lower = Moments::new(2);
    for (v, u) in &samples {
        lower.push(&[*v, *u]);
    }
    let (value, stderr) = lower.mean_se(0);
    let (upper_bound, upper_stderr) = lower.mean_se(1);
    Ok(L2Regularity {
        value,
        stderr,
        upper_bound,
        upper_stderr,
        paths,
        substeps: s,
    })
}

fn regressed_averages(
    reference: &ReferenceSolution,
    model: &SdeModel,
    batch: &PathBatch,
    seed: u64,
) -> Result<Vec<Projection>> {
    let grid = batch.grid();
    let (n, d, q, s, paths) = (grid.steps(), model.dim_state(), model.dim_noise(), DEFAULT_SUBSTEPS, batch.paths());
    let averages: Vec<Vec<f64>> = (0..paths)
        .into_par_iter()
        .map(|m| {
            let zs = midpoint_z(reference, model, batch, m, seed, s);
            let mut avg = vec![0.0; n * q];
            for i in 0..n {
                for k in 0..s {
                    for c in 0..q {
                        avg[i * q + c] += zs[(i * s + k) * q + c] / s as f64;
                    }
                }
            }
            avg
        })
        .collect();
    let basis = RegressionBasis::polynomial(PROJECTION_DEGREE);
    (0..n)
        .map(|i| {
            let pts = batch.states_at(i);
            let targets: Vec<Vec<f64>> = (0..q)
                .map(|c| averages.iter().map(|avg| avg[i * q + c]).collect())
                .collect();
            let spread = pts.iter().fold(0.0f64, |a, v| a.max((v - pts[0]).abs()));
            Ok(if spread == 0.0 {
                Projection::Constant(targets.iter().map(|t| t.iter().sum::<f64>() / paths as f64).collect())
            } else {
                let refs: Vec<&[f64]> = targets.iter().map(|t| t.as_slice()).collect();
                Projection::Fitted(fit_regression(&pts, d, &refs, &basis).map_err(Error::at(i))?)
            })
        })
        .collect()
}

enum Projection {
    Constant(Vec<f64>),
    Fitted(Vec<RegressionFit>),
    /// Transitions from `t` to the sub-points `t + (k + 1/2) h`.
    Transition {
        t: f64,
        h: f64,
        steps: Vec<GaussianTransition>,
    },
}

impl Projection {
    fn eval_into(&self, reference: &ReferenceSolution, x: &[f64], out: &mut [f64]) {
        match self {
            Projection::Constant(v) => out.copy_from_slice(v),
            Projection::Fitted(fits) => {
                for (o, f) in out.iter_mut().zip(fits) {
                    *o = f.eval(x);
                }
            }
            Projection::Transition { t, h, steps } => {
                out.fill(0.0);
                let mut y = vec![0.0; x.len()];
                let mut z = vec![0.0; out.len()];
                let scale = 1.0 / steps.len() as f64;
                for (k, tr) in steps.iter().enumerate() {
                    let s = t + (k as f64 + 0.5) * h;
                    for node in 0..tr.len() {
                        let (w, shift, _) = tr.node(node);
                        for (r, v) in y.iter_mut().enumerate() {
                            *v = x[r] + shift[r];
                        }
                        reference.z_into(s, &y, &mut z);
                        for (o, zc) in out.iter_mut().zip(&z) {
                            *o += scale * w * zc;
                        }
                    }
                }
            }
        }
    }
}

/// `E|Z_{t_i}|^2` with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ZMoment {
    pub t: f64,
    pub second_moment: f64,
    pub stderr: f64,
}

fn z_moments(
    model: &SdeModel,
    grid: &TimeGrid,
    paths: usize,
    seed: u64,
    z_at: impl Fn(usize, &[f64], &mut [f64]) + Sync,
) -> Result<Vec<ZMoment>> {
    if paths < 2 {
        return Err(invalid("moment estimation needs at least two paths"));
    }
    let (n, q) = (grid.steps(), model.dim_noise());
    let mut moments = Moments::new(n);
    let mut first = 0;
    while first < paths {
        let count = CHUNK.min(paths - first);
        let batch = simulate_range(model, grid, first, count, seed)?;
        let rows: Vec<Vec<f64>> = (0..count)
            .into_par_iter()
            .map(|m| {
                let mut z = vec![0.0; q];
                (0..n)
                    .map(|i| {
                        z_at(i, batch.state(m, i), &mut z);
                        z.iter().map(|v| v * v).sum()
                    })
                    .collect()
            })
            .collect();
        rows.iter().for_each(|r| moments.push(r));
        first += count;
    }
    Ok((0..n)
        .map(|i| {
            let (second_moment, stderr) = moments.mean_se(i);
            ZMoment {
                t: grid.t(i),
                second_moment,
                stderr,
            }
        })
        .collect())
}

/// `E|Z_{t_i}|^2` of the reference for `i < N`, on simulated paths.
pub fn reference_z_moments(
    reference: &ReferenceSolution,
    model: &SdeModel,
    grid: &TimeGrid,
    paths: usize,
    seed: u64,
) -> Result<Vec<ZMoment>> {
    check_reference(reference, model, grid)?;
    z_moments(model, grid, paths, seed, |i, x, out| reference.z_into(grid.t(i), x, out))
}

/// `E|Z̄_i|^2` of a discrete solution for `i < N`.
pub fn solution_z_moments(solution: &DiscreteSolution, model: &SdeModel, paths: usize, seed: u64) -> Result<Vec<ZMoment>> {
    if solution.dim_noise() != model.dim_noise() {
        return Err(invalid("solution and model noise dimensions differ"));
    }
    z_moments(model, solution.grid(), paths, seed, |i, x, out| solution.z_into(i, x, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AprioriPoint {
    pub t: f64,
    pub z_rms: f64,
    pub weighted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AprioriCheck {
    /// `e` in `w = |Z|_2 (T - t)^{-e}`.
    pub exponent: f64,
    pub max_weighted: f64,
    pub min_weighted: f64,
    /// `max / min - 1`; infinite when the minimum is zero and the maximum is not.
    pub spread: f64,
    pub profile: Vec<AprioriPoint>,
}

/// Weighted profile `w_i = (E|Z_{t_i}|^2)^{1/2} (T - t_i)^{-((2θ_c) ∧ θ_Φ - 1)/2}`.
/// Pass the fractional smoothness exponent as `theta_phi` for irregular
/// terminals. Points at or beyond the horizon are skipped.
pub fn apriori_z_check(moments: &[ZMoment], horizon: f64, theta_c: f64, theta_phi: f64) -> AprioriCheck {
    let exponent = ((2.0 * theta_c).min(theta_phi) - 1.0) / 2.0;
    let profile: Vec<AprioriPoint> = moments
        .iter()
        .filter(|m| m.t < horizon)
        .map(|m| {
            let z_rms = m.second_moment.max(0.0).sqrt();
            AprioriPoint {
                t: m.t,
                z_rms,
                weighted: z_rms * (horizon - m.t).powf(-exponent),
            }
        })
        .collect();
    let max_weighted = profile.iter().map(|p| p.weighted).fold(0.0, f64::max);
    let min_weighted = profile.iter().map(|p| p.weighted).fold(f64::INFINITY, f64::min);
    let spread = if max_weighted == 0.0 {
        0.0
    } else if min_weighted > 0.0 {
        max_weighted / min_weighted - 1.0
    } else {
        f64::INFINITY
    };
    AprioriCheck {
        exponent,
        max_weighted,
        min_weighted: if profile.is_empty() { 0.0 } else { min_weighted },
        spread,
        profile,
    }
}
