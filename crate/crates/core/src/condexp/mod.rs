//! Conditional-expectation backends: Gauss–Hermite quadrature on Gaussian
//! transitions, least-squares regression on simulated paths, and nested
//! Monte Carlo.

mod lsmc;
mod quadrature;
mod state;

pub use lsmc::{fit_regression, BasisKind, RegressionBasis, RegressionFit, Ridge};
pub use quadrature::{QuadratureRule, TensorRule};
pub use state::{GridFunction, StateFn, StateFunction};

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grids::TimeGrid;
use crate::models::SdeModel;
use crate::paths::{euler_step, PathBatch};
use crate::rng::GaussianStream;

pub const DEFAULT_QUADRATURE_ORDER: usize = 16;
pub const INDICATOR_QUADRATURE_ORDER: usize = 64;

/// Tensor Gauss–Hermite discretization of `x -> x + b τ + σ (W_τ)`.
#[derive(Debug, Clone)]
pub struct GaussianTransition {
    dim_state: usize,
    dim_noise: usize,
    tau: f64,
    shifts: Vec<f64>,
    increments: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussianTransition {
    pub fn new(model: &SdeModel, tau: f64, rule: &QuadratureRule) -> Result<Self> {
        let (b, sigma) = model.constant_parts()?;
        if !(tau > 0.0) {
            return Err(invalid("transition length must be positive"));
        }
        let (d, q) = (model.dim_state(), model.dim_noise());
        let tensor = rule.tensor(q);
        let sq = tau.sqrt();
        let mut shifts = Vec::with_capacity(tensor.len() * d);
        let mut increments = Vec::with_capacity(tensor.len() * q);
        let mut weights = Vec::with_capacity(tensor.len());
        for k in 0..tensor.len() {
            let xi = tensor.node(k);
            for r in 0..d {
                let noise: f64 = (0..q).map(|c| sigma[(r, c)] * xi[c]).sum();
                shifts.push(b[r] * tau + sq * noise);
            }
            increments.extend(xi.iter().map(|v| sq * v));
            weights.push(tensor.weight(k));
        }
        Ok(Self {
            dim_state: d,
            dim_noise: q,
            tau,
            shifts,
            increments,
            weights,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Node `k`: (weight, state shift, Brownian increment).
    pub fn node(&self, k: usize) -> (f64, &[f64], &[f64]) {
        let (d, q) = (self.dim_state, self.dim_noise);
        (
            self.weights[k],
            &self.shifts[k * d..(k + 1) * d],
            &self.increments[k * q..(k + 1) * q],
        )
    }

    /// `E[g(X')]` from `X = x`.
    pub fn expect(&self, x: &[f64], g: impl Fn(&[f64]) -> f64) -> f64 {
        let d = self.dim_state;
        let mut y = vec![0.0; d];
        let mut s = 0.0;
        for k in 0..self.len() {
            let (w, shift, _) = self.node(k);
            for r in 0..d {
                y[r] = x[r] + shift[r];
            }
            s += w * g(&y);
        }
        s
    }

    /// `E[g(X')]` and `E[g(X') ΔW]` (written to `weighted`) in one pass.
    pub fn expect_with_increment(&self, x: &[f64], g: impl Fn(&[f64]) -> f64, weighted: &mut [f64]) -> f64 {
        let d = self.dim_state;
        let mut y = vec![0.0; d];
        let mut s = 0.0;
        weighted.fill(0.0);
        for k in 0..self.len() {
            let (w, shift, dw) = self.node(k);
            for r in 0..d {
                y[r] = x[r] + shift[r];
            }
            let v = w * g(&y);
            s += v;
            for (o, inc) in weighted.iter_mut().zip(dw) {
                *o += v * inc;
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightKind {
    Plain,
    /// Multiply by component `c` of `W_{t_j} - W_{t_i}`.
    BrownianIncrement(usize),
}

/// `x -> E[g(X_{t_j}) w | X_{t_i} = x]` by quadrature, for constant-coefficient models.
pub fn quad_project(
    model: &SdeModel,
    grid: &TimeGrid,
    i: usize,
    j: usize,
    g: &StateFunction,
    kind: WeightKind,
    order: usize,
) -> Result<StateFunction> {
    if !model.constant_coefficients() {
        return Err(Error::UnsupportedModel(format!(
            "quadrature projection needs constant coefficients, model '{}' has none",
            model.name()
        )));
    }
    let n = grid.steps();
    if j > n || i >= j {
        return Err(Error::IndexOutOfRange {
            what: "j",
            index: j,
            limit: n,
        });
    }
    if let WeightKind::BrownianIncrement(c) = kind {
        if c >= model.dim_noise() {
            return Err(Error::IndexOutOfRange {
                what: "noise component",
                index: c,
                limit: model.dim_noise() - 1,
            });
        }
    }
    let rule = QuadratureRule::new(order)?;
    let tr = Arc::new(GaussianTransition::new(model, grid.t(j) - grid.t(i), &rule)?);
    let g = g.clone();
    Ok(match kind {
        WeightKind::Plain => StateFunction::from_fn(move |x| tr.expect(x, |y| g.eval(y))),
        WeightKind::BrownianIncrement(c) => {
            let q = model.dim_noise();
            StateFunction::from_fn(move |x| {
                let mut w = vec![0.0; q];
                tr.expect_with_increment(x, |y| g.eval(y), &mut w);
                w[c]
            })
        }
    })
}

/// Regression of `targets` on the states at index `i` of `batch`.
pub fn lsmc_fit(batch: &PathBatch, i: usize, targets: &[f64], basis: &RegressionBasis) -> Result<RegressionFit> {
    let n = batch.grid().steps();
    if i > n {
        return Err(Error::IndexOutOfRange {
            what: "i",
            index: i,
            limit: n,
        });
    }
    let pts = batch.states_at(i);
    Ok(fit_regression(&pts, batch.dim_state(), &[targets], basis)?.remove(0))
}

/// Sample mean and standard error of `functional(states, increments)` over
/// `inner` sub-paths started at `(t_i, x)`. States are `(N-i+1) x d`,
/// increments `(N-i) x q`.
pub fn nested_mc(
    model: &SdeModel,
    grid: &TimeGrid,
    i: usize,
    x: &[f64],
    functional: impl Fn(&[f64], &[f64]) -> f64 + Sync,
    inner: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if inner < 2 {
        return Err(invalid("nested Monte Carlo needs at least two inner paths"));
    }
    let n = grid.steps();
    if i > n {
        return Err(Error::IndexOutOfRange {
            what: "i",
            index: i,
            limit: n,
        });
    }
    let (d, q) = (model.dim_state(), model.dim_noise());
    if x.len() != d {
        return Err(invalid("start state has the wrong dimension"));
    }
    let span = n - i;
    let values: Vec<Result<f64>> = (0..inner)
        .into_par_iter()
        .map(|p| {
            let mut stream = GaussianStream::new(seed, p as u64, q);
            let mut states = vec![0.0; (span + 1) * d];
            let mut incs = vec![0.0; span * q];
            let mut scratch = vec![0.0; d * q];
            states[..d].copy_from_slice(x);
            for s in 0..span {
                let k = i + s;
                let w = &mut incs[s * q..(s + 1) * q];
                stream.fill_step(k, w);
                let sq = grid.dt(k).sqrt();
                w.iter_mut().for_each(|v| *v *= sq);
                let (head, tail) = states.split_at_mut((s + 1) * d);
                euler_step(model, grid.t(k), grid.dt(k), &head[s * d..], w, &mut scratch, &mut tail[..d]);
                if tail[..d].iter().any(|v| !v.is_finite()) {
                    return Err(Error::SimulationOverflow { path: p, step: k + 1 });
                }
            }
            Ok(functional(&states, &incs))
        })
        .collect();
    let values = values.into_iter().collect::<Result<Vec<f64>>>()?;
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    Ok((mean, (var / m).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::make_grid;
    use approx::assert_relative_eq;

    #[test]
    fn projection_examples() {
        let model = SdeModel::brownian(0.0, 0.0, 1.0).unwrap();
        let grid = make_grid(1.0, 4, 1.0).unwrap();
        let one = quad_project(&model, &grid, 0, 2, &StateFunction::Constant(1.0), WeightKind::Plain, 16).unwrap();
        assert_relative_eq!(one.eval(&[0.7]), 1.0, epsilon = 1e-14);
        let id = StateFunction::from_fn(|x| x[0]);
        let p = quad_project(&model, &grid, 1, 3, &id, WeightKind::Plain, 16).unwrap();
        assert_relative_eq!(p.eval(&[0.3]), 0.3, epsilon = 1e-14);
        let sq = StateFunction::from_fn(|x| x[0] * x[0]);
        let p = quad_project(&model, &grid, 1, 3, &sq, WeightKind::Plain, 2).unwrap();
        assert_relative_eq!(p.eval(&[0.3]), 0.09 + 0.5, epsilon = 1e-14);
        let p = quad_project(&model, &grid, 0, 4, &id, WeightKind::BrownianIncrement(0), 8).unwrap();
        assert_relative_eq!(p.eval(&[0.3]), 1.0, epsilon = 1e-13);
    }

    #[test]
    fn projection_is_exact_to_degree_2n_minus_1() {
        let model = SdeModel::brownian(0.2, 0.1, 0.7).unwrap();
        let grid = make_grid(2.0, 3, 0.5).unwrap();
        let n_q = 5;
        let tau = grid.t(2) - grid.t(0);
        let (x, m, s) = (0.4, 0.4 + 0.1 * tau, 0.7 * tau.sqrt());
        // E[(m + s ξ)^k] from the Gaussian moments E[ξ^{2r}] = (2r-1)!!.
        let gauss = |p: i32| -> f64 {
            let mut total = 0.0;
            for r in 0..=p {
                if r % 2 == 1 {
                    continue;
                }
                let binom = (0..r).fold(1.0, |acc, l| acc * (p - l) as f64 / (l + 1) as f64);
                let dfact = (1..r).step_by(2).fold(1.0, |acc, l| acc * l as f64);
                total += binom * m.powi(p - r) * s.powi(r) * dfact;
            }
            total
        };
        for p in 0..(2 * n_q as i32) {
            let g = StateFunction::from_fn(move |y| y[0].powi(p));
            let f = quad_project(&model, &grid, 0, 2, &g, WeightKind::Plain, n_q).unwrap();
            assert_relative_eq!(f.eval(&[x]), gauss(p), max_relative = 1e-12, epsilon = 1e-13);
        }
    }

    #[test]
    fn projection_rejects_state_dependent_models() {
        let model = SdeModel::tanh(0.0, 0.1, 0.5, 0.1).unwrap();
        let grid = make_grid(1.0, 2, 1.0).unwrap();
        assert!(matches!(
            quad_project(&model, &grid, 0, 1, &StateFunction::Constant(1.0), WeightKind::Plain, 4),
            Err(Error::UnsupportedModel(_))
        ));
    }

    #[test]
    fn nested_examples() {
        let model = SdeModel::brownian(0.0, 0.0, 1.0).unwrap();
        let grid = make_grid(1.0, 4, 1.0).unwrap();
        let (v, se) = nested_mc(&model, &grid, 2, &[0.3], |_, _| 1.0, 50, 1).unwrap();
        assert_eq!((v, se), (1.0, 0.0));
        let (v, se) = nested_mc(&model, &grid, 2, &[0.3], |s, _| s[s.len() - 1], 20_000, 2).unwrap();
        assert!((v - 0.3).abs() < 3.0 * se);
        let (v, se) = nested_mc(&model, &grid, 2, &[0.0], |s, _| s[s.len() - 1].powi(2), 20_000, 3).unwrap();
        assert!((v - 0.5).abs() < 3.0 * se, "{v} {se}");
        assert!(nested_mc(&model, &grid, 2, &[0.0], |_, _| 1.0, 1, 3).is_err());
    }
}
