//! Monte Carlo measurement of `V_{t,T}(Φ)^2 = E|Φ(X_T) - E_t Φ(X_T)|^2`.

use rayon::prelude::*;
use serde::Serialize;

use super::fk::feynman_kac_v;
use crate::condexp::DEFAULT_QUADRATURE_ORDER;
use crate::error::{invalid, Error, Result};
use crate::models::{SdeModel, TerminalCondition};
use crate::paths::euler_step;
use crate::rng::GaussianStream;
use crate::stats::{mean_se, ols};

const MIN_SAMPLES: usize = 10_000;
const FALLBACK_INNER: usize = 64;
const FALLBACK_STEPS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SmoothnessPoint {
    pub t: f64,
    pub v2: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothnessFit {
    /// Slope of `log V^2` against `log(T - t)`; `None` when degenerate.
    pub alpha_hat: Option<f64>,
    pub alpha_stderr: Option<f64>,
    pub degenerate: bool,
    /// False when the inner expectation came from nested simulation.
    pub exact_inner: bool,
    pub points: Vec<SmoothnessPoint>,
}

/// Estimates `V^2(t)` for each `t` and fits the decay exponent.
///
/// With constant coefficients the estimator is the conditional variance
/// `E_t[Φ^2] - (E_t Φ)^2` evaluated by quadrature at sampled `X_t`. Otherwise
/// each outer sample gets a nested Euler simulation (with a warning).
pub fn fractional_smoothness_fit(
    model: &SdeModel,
    terminal: &TerminalCondition,
    horizon: f64,
    t_list: &[f64],
    samples: usize,
    seed: u64,
) -> Result<SmoothnessFit> {
    if samples < MIN_SAMPLES {
        return Err(invalid(format!("smoothness fit needs at least {MIN_SAMPLES} samples")));
    }
    if t_list.is_empty() || t_list.iter().any(|&t| !(t >= 0.0 && t < horizon)) {
        return Err(invalid("every t must lie in [0, T)"));
    }
    let exact_inner = model.constant_coefficients();
    if !exact_inner {
        log::warn!(
            "model '{}' has no Gaussian transition; falling back to nested simulation",
            model.name()
        );
    }
    let mut points = Vec::with_capacity(t_list.len());
    for (k, &t) in t_list.iter().enumerate() {
        let draws = if exact_inner {
            conditional_variances(model, terminal, horizon, t, samples, seed ^ k as u64)?
        } else {
            nested_variances(model, terminal, horizon, t, samples, seed ^ k as u64)?
        };
        let (v2, stderr) = mean_se(&draws);
        points.push(SmoothnessPoint { t, v2, stderr });
    }
    let usable: Vec<&SmoothnessPoint> = points.iter().filter(|p| p.v2 > 1e-14).collect();
    let fit = ols(
        &usable.iter().map(|p| (horizon - p.t).ln()).collect::<Vec<_>>(),
        &usable.iter().map(|p| p.v2.ln()).collect::<Vec<_>>(),
    );
    Ok(SmoothnessFit {
        alpha_hat: fit.map(|f| f.slope),
        alpha_stderr: fit.map(|f| f.slope_stderr).filter(|s| s.is_finite()),
        degenerate: fit.is_none(),
        exact_inner,
        points,
    })
}

fn conditional_variances(
    model: &SdeModel,
    terminal: &TerminalCondition,
    horizon: f64,
    t: f64,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let fk = feynman_kac_v(model, terminal, horizon, DEFAULT_QUADRATURE_ORDER)?;
    let (b, sigma) = model.constant_parts()?;
    let (d, q) = (model.dim_state(), model.dim_noise());
    let x0 = model.x0().to_vec();
    (0..samples)
        .into_par_iter()
        .map(|m| {
            let mut stream = GaussianStream::new(seed, m as u64, q);
            let mut xi = vec![0.0; q];
            stream.fill_step(0, &mut xi);
            let x: Vec<f64> = (0..d)
                .map(|r| x0[r] + b[r] * t + t.sqrt() * (0..q).map(|c| sigma[(r, c)] * xi[c]).sum::<f64>())
                .collect();
            let phi = |v: f64| terminal.eval(&[v]);
            let (m1, _) = fk.moments_of(phi, t, &x)?;
            let (m2, _) = fk.moments_of(|v| phi(v).powi(2), t, &x)?;
            Ok((m2 - m1 * m1).max(0.0))
        })
        .collect()
}

/// Euler path from `(s0, x)` over `steps` equal steps up to `s1`.
fn euler_path(model: &SdeModel, s0: f64, s1: f64, x: &mut [f64], stream: &mut GaussianStream, offset: usize) -> Result<()> {
    let (d, q) = (model.dim_state(), model.dim_noise());
    let dt = (s1 - s0) / FALLBACK_STEPS as f64;
    let mut w = vec![0.0; q];
    let mut scratch = vec![0.0; d * q];
    let mut out = vec![0.0; d];
    for k in 0..FALLBACK_STEPS {
        stream.fill_step(offset + k, &mut w);
        w.iter_mut().for_each(|v| *v *= dt.sqrt());
        euler_step(model, s0 + k as f64 * dt, dt, x, &w, &mut scratch, &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::SimulationOverflow { path: 0, step: offset + k });
        }
        x.copy_from_slice(&out);
    }
    Ok(())
}

fn nested_variances(
    model: &SdeModel,
    terminal: &TerminalCondition,
    horizon: f64,
    t: f64,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let q = model.dim_noise();
    (0..samples)
        .into_par_iter()
        .map(|m| {
            let mut stream = GaussianStream::new(seed, m as u64, q);
            let mut xt = model.x0().to_vec();
            if t > 0.0 {
                euler_path(model, 0.0, t, &mut xt, &mut stream, 0)?;
            }
            let vals: Vec<f64> = (0..FALLBACK_INNER)
                .map(|k| {
                    let mut x = xt.clone();
                    let offset = FALLBACK_STEPS * (k + 1);
                    euler_path(model, t, horizon, &mut x, &mut stream, offset).map(|_| terminal.eval(&x))
                })
                .collect::<Result<_>>()?;
            // se^2 K is the unbiased sample variance.
            let (_, se) = mean_se(&vals);
            Ok(se * se * FALLBACK_INNER as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_unit_exponent() {
        let bm = SdeModel::brownian(0.0, 0.0, 1.0).unwrap();
        let ts = [0.0, 0.5, 0.8, 0.9, 0.95];
        let f = fractional_smoothness_fit(&bm, &TerminalCondition::identity(), 1.0, &ts, 10_000, 3).unwrap();
        for p in &f.points {
            assert!((p.v2 - (1.0 - p.t)).abs() < 1e-12, "{p:?}");
        }
        assert!((f.alpha_hat.unwrap() - 1.0).abs() < 0.02);
    }

    #[test]
    fn constant_is_degenerate() {
        let bm = SdeModel::brownian(0.0, 0.0, 1.0).unwrap();
        let f = fractional_smoothness_fit(&bm, &TerminalCondition::constant(2.0), 1.0, &[0.0, 0.5, 0.9], 10_000, 3).unwrap();
        assert!(f.degenerate && f.alpha_hat.is_none());
    }

    #[test]
    fn too_few_samples() {
        let bm = SdeModel::brownian(0.0, 0.0, 1.0).unwrap();
        assert!(fractional_smoothness_fit(&bm, &TerminalCondition::identity(), 1.0, &[0.5], 100, 1).is_err());
    }
}
