//! Regression backend: every conditional expectation is a least-squares fit
//! on the states of one time index.

use std::sync::Arc;

use rayon::prelude::*;

use super::{DiscreteSolution, MalliavinOptions, PathValues, Problem, SchemeKind};
use crate::condexp::{fit_regression, RegressionBasis, RegressionFit, StateFunction};
use crate::error::{invalid, Error, Result};
use crate::paths::PathBatch;

fn check_batch(p: &Problem, batch: &PathBatch) -> Result<()> {
    let same_grid = batch.grid().steps() == p.grid.steps()
        && batch
            .grid()
            .points()
            .iter()
            .zip(p.grid.points())
            .all(|(a, b)| a == b);
    if !same_grid {
        return Err(invalid("path batch was simulated on a different grid"));
    }
    if batch.dim_state() != p.model.dim_state() || batch.dim_noise() != p.model.dim_noise() {
        return Err(invalid("path batch dimensions differ from the model"));
    }
    Ok(())
}

fn evaluate(fit: &RegressionFit, pts: &[f64], d: usize) -> Vec<f64> {
    pts.par_chunks(d).map(|x| fit.eval(x)).collect()
}

/// `q` fits evaluated on `pts`, interleaved as `m * q + c`.
fn evaluate_many(fits: &[RegressionFit], pts: &[f64], d: usize) -> Vec<f64> {
    pts.par_chunks(d)
        .flat_map_iter(|x| fits.iter().map(move |f| f.eval(x)))
        .collect()
}

fn ensure_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(invalid(format!("non-finite {what} target")))
    }
}

fn wrap(fit: RegressionFit) -> StateFunction {
    StateFunction::Regression(Arc::new(fit))
}

fn terminal_values(p: &Problem, batch: &PathBatch) -> Vec<f64> {
    let n = p.grid.steps();
    (0..batch.paths())
        .into_par_iter()
        .map(|m| p.terminal.eval(batch.state(m, n)))
        .collect()
}

struct Assembly {
    ys: Vec<StateFunction>,
    zs: Vec<Vec<StateFunction>>,
    values: PathValues,
    root_se: Option<(f64, Vec<f64>)>,
}

impl Assembly {
    fn new(p: &Problem, phi: Vec<f64>) -> Self {
        let n = p.grid.steps();
        let mut y = vec![Vec::new(); n + 1];
        y[n] = phi;
        let mut ys = vec![StateFunction::Constant(0.0); n + 1];
        ys[n] = p.terminal_fn();
        Self {
            ys,
            zs: vec![Vec::new(); n],
            values: PathValues {
                y,
                z: vec![Vec::new(); n],
            },
            root_se: None,
        }
    }

    fn finish(self, p: &Problem, scheme: SchemeKind, warnings: Vec<String>) -> DiscreteSolution {
        let mut sol = p.solution(scheme, self.ys, self.zs);
        sol.path_values = Some(self.values);
        sol.root_se = self.root_se;
        sol.warnings = warnings;
        sol
    }

    fn record_root(&mut self, p: &Problem, yf: &RegressionFit, zf: &[RegressionFit]) {
        let x0 = p.model.x0();
        self.root_se = Some((yf.prediction_se(x0), zf.iter().map(|f| f.prediction_se(x0)).collect()));
    }

    /// Root errors from per-path samples whose means are the root values.
    fn record_root_samples(&mut self, y: &[f64], z: &[Vec<f64>]) {
        self.root_se = Some((mean_se(y), z.iter().map(|c| mean_se(c)).collect()));
    }
}

fn mean_se(v: &[f64]) -> f64 {
    let m = v.len() as f64;
    let mean = v.iter().sum::<f64>() / m;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / ((m - 1.0).max(1.0) * m)).sqrt()
}

pub(super) fn euler(p: &Problem, basis: &RegressionBasis, batch: &PathBatch) -> Result<DiscreteSolution> {
    check_batch(p, batch)?;
    let (n, d, q, mm) = (p.grid.steps(), p.model.dim_state(), p.model.dim_noise(), batch.paths());
    let mut asm = Assembly::new(p, terminal_values(p, batch));
    let f = p.driver.function();
    // Realized Φ(X_N) + Σ_{j >= i} f_j Δ_j per path. The fits preserve sample
    // means, so at the root these carry the full Monte Carlo error, which the
    // step-0 fit alone would understate.
    let mut flow = asm.values.y[n].clone();
    for i in (0..n).rev() {
        let (t, dt) = (p.grid.t(i), p.grid.dt(i));
        let pts = batch.states_at(i);
        let next = &asm.values.y[i + 1];
        let z_targets: Vec<Vec<f64>> = (0..q)
            .map(|c| (0..mm).map(|m| next[m] * batch.increment(m, i)[c] / dt).collect())
            .collect();
        let refs: Vec<&[f64]> = z_targets.iter().map(|v| v.as_slice()).collect();
        let z_fits = fit_regression(&pts, d, &refs, basis).map_err(Error::at(i))?;
        let z_vals = evaluate_many(&z_fits, &pts, d);
        let y_targets: Vec<f64> = (0..mm)
            .into_par_iter()
            .map(|m| {
                let z = &z_vals[m * q..(m + 1) * q];
                next[m] + dt * f(t, &pts[m * d..(m + 1) * d], next[m], z)
            })
            .collect();
        ensure_finite(&y_targets, "Y").map_err(Error::at(i))?;
        let y_fit = fit_regression(&pts, d, &[&y_targets], basis)
            .map_err(Error::at(i))?
            .remove(0);
        let z_flow: Vec<Vec<f64>> = match i {
            0 => (0..q)
                .map(|c| (0..mm).map(|m| flow[m] * batch.increment(m, 0)[c] / dt).collect())
                .collect(),
            _ => Vec::new(),
        };
        for (acc, (target, prev)) in flow.iter_mut().zip(y_targets.iter().zip(next)) {
            *acc += target - prev;
        }
        if i == 0 {
            asm.record_root_samples(&flow, &z_flow);
        }
        asm.values.y[i] = evaluate(&y_fit, &pts, d);
        asm.values.z[i] = z_vals;
        asm.ys[i] = wrap(y_fit);
        asm.zs[i] = z_fits.into_iter().map(wrap).collect();
    }
    Ok(asm.finish(p, SchemeKind::Euler, Vec::new()))
}

fn variance(v: &[f64], q: usize) -> f64 {
    let m = (v.len() / q).max(2) as f64;
    (0..q)
        .map(|c| {
            let col = v.iter().skip(c).step_by(q);
            let mean = col.clone().sum::<f64>() / m;
            col.map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0)
        })
        .sum()
}

pub(super) fn malliavin(
    p: &Problem,
    basis: &RegressionBasis,
    batch: &PathBatch,
    options: &MalliavinOptions,
) -> Result<DiscreteSolution> {
    check_batch(p, batch)?;
    let (n, d, q, mm) = (p.grid.steps(), p.model.dim_state(), p.model.dim_noise(), batch.paths());
    let phi = terminal_values(p, batch);
    let mut asm = Assembly::new(p, phi.clone());
    let zero = p.driver.is_zero();
    let f = p.driver.function();
    // f_j Δ_j per path, filled as j is fitted.
    let mut f_dt: Vec<Vec<f64>> = vec![Vec::new(); n];
    // Σ_{j > i} f_j Δ_j per path.
    let mut tail = vec![0.0; mm];
    let mut previous_var: Option<f64> = None;
    let mut warnings = Vec::new();
    for i in (0..n).rev() {
        let (t, dt) = (p.grid.t(i), p.grid.dt(i));
        let pts = batch.states_at(i);
        let f_ref = &f_dt;
        let phi_ref = &phi;
        let mut s_z = vec![0.0; mm * q];
        s_z.par_chunks_mut(q)
            .enumerate()
            .try_for_each(|(m, out)| -> Result<()> {
                let mut wp = batch.weight_path(m, i, options.weights)?;
                let mut h = vec![0.0; q];
                for j in i + 1..=n {
                    wp.advance()?;
                    let c = if j == n {
                        phi_ref[m]
                    } else if zero {
                        continue;
                    } else {
                        f_ref[j][m]
                    };
                    wp.weight(&mut h);
                    for (o, hv) in out.iter_mut().zip(&h) {
                        *o += c * hv;
                    }
                }
                Ok(())
            })
            .map_err(Error::at(i))?;
        ensure_finite(&s_z, "Z").map_err(Error::at(i))?;
        let var = variance(&s_z, q);
        if let Some(prev) = previous_var {
            if var > options.variance_warning_ratio * prev {
                let msg = format!(
                    "index {i}: Var(S_Z) = {var:.3e} exceeds {} times its value {prev:.3e} at index {}",
                    options.variance_warning_ratio,
                    i + 1
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
        previous_var = Some(var);
        let z_cols: Vec<Vec<f64>> = (0..q)
            .map(|c| s_z.iter().skip(c).step_by(q).copied().collect())
            .collect();
        let refs: Vec<&[f64]> = z_cols.iter().map(|v| v.as_slice()).collect();
        let z_fits = fit_regression(&pts, d, &refs, basis).map_err(Error::at(i))?;
        let z_vals = evaluate_many(&z_fits, &pts, d);
        let y_next = &asm.values.y[i + 1];
        let fi: Vec<f64> = if zero {
            vec![0.0; mm]
        } else {
            (0..mm)
                .into_par_iter()
                .map(|m| dt * f(t, &pts[m * d..(m + 1) * d], y_next[m], &z_vals[m * q..(m + 1) * q]))
                .collect()
        };
        let y_targets: Vec<f64> = (0..mm).map(|m| phi[m] + tail[m] + fi[m]).collect();
        ensure_finite(&y_targets, "Y").map_err(Error::at(i))?;
        let y_fit = fit_regression(&pts, d, &[&y_targets], basis)
            .map_err(Error::at(i))?
            .remove(0);
        if i == 0 {
            asm.record_root(p, &y_fit, &z_fits);
        }
        for (acc, v) in tail.iter_mut().zip(&fi) {
            *acc += v;
        }
        f_dt[i] = fi;
        asm.values.y[i] = evaluate(&y_fit, &pts, d);
        asm.values.z[i] = z_vals;
        asm.ys[i] = wrap(y_fit);
        asm.zs[i] = z_fits.into_iter().map(wrap).collect();
    }
    Ok(asm.finish(p, SchemeKind::Malliavin, warnings))
}
