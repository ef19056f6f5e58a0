//! `v(t, x) = E[Φ(X_T) | X_t = x]` for constant-coefficient models.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::condexp::QuadratureRule;
use crate::error::{Error, Result};
use crate::models::{SdeModel, TerminalCondition, TerminalKind, ValueProvider};
use crate::normal;

/// Standard-normal coordinates beyond which the density is ignored.
const TAIL: f64 = 10.0;
const PANEL_WIDTH: f64 = 0.5;
const PANEL_ORDER: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMethod {
    /// `∂_x v = E[Φ ξ] / (|σ| √τ)`.
    #[default]
    LikelihoodRatio,
    /// Central difference with step `1e-5 |σ| √τ`.
    FiniteDifference,
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
fn legendre() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = PANEL_ORDER;
        let mut j = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let kf = k as f64;
            let b = kf / (4.0 * kf * kf - 1.0).sqrt();
            j[(k - 1, k)] = b;
            j[(k, k - 1)] = b;
        }
        let eig = SymmetricEigen::new(j);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|k| (eig.eigenvalues[k], 2.0 * eig.eigenvectors[(0, k)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        pairs.into_iter().unzip()
    })
}

/// `(E[g(m + s ξ)], E[g(m + s ξ) ξ])` for `ξ ~ N(0,1)`, by Gauss–Legendre
/// panels on `[-10, 10]` split at the images of `breakpoints`.
pub fn gaussian_expectation(g: impl Fn(f64) -> f64, mean: f64, sd: f64, breakpoints: &[f64]) -> (f64, f64) {
    if sd <= 0.0 {
        return (g(mean), 0.0);
    }
    let mut cuts: Vec<f64> = breakpoints
        .iter()
        .map(|b| (b - mean) / sd)
        .filter(|c| c.abs() < TAIL)
        .collect();
    cuts.push(-TAIL);
    cuts.push(TAIL);
    cuts.sort_by(f64::total_cmp);
    let (nodes, weights) = legendre();
    let mut e0 = 0.0;
    let mut e1 = 0.0;
    for seg in cuts.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        if b <= a {
            continue;
        }
        let panels = ((b - a) / PANEL_WIDTH).ceil().max(1.0) as usize;
        let h = (b - a) / panels as f64;
        for p in 0..panels {
            let mid = a + (p as f64 + 0.5) * h;
            for (u, w) in nodes.iter().zip(weights) {
                let xi = mid + 0.5 * h * u;
                let v = 0.5 * h * w * normal::pdf(xi) * g(mean + sd * xi);
                e0 += v;
                e1 += v * xi;
            }
        }
    }
    (e0, e1)
}

fn breakpoints(kind: &TerminalKind) -> Option<Vec<f64>> {
    match *kind {
        TerminalKind::CappedCall { strike, cap } => Some(vec![strike, strike + cap]),
        TerminalKind::Indicator { strike } => Some(vec![strike]),
        TerminalKind::Holder { strike, exponent, cap } => {
            let r = cap.powf(1.0 / exponent);
            Some(vec![strike - r, strike, strike + r])
        }
        TerminalKind::Identity | TerminalKind::Constant(_) | TerminalKind::Custom => None,
    }
}

/// Value function of the terminal under the Gaussian transition of the first
/// state coordinate.
#[derive(Clone)]
pub struct FeynmanKac {
    terminal: TerminalCondition,
    horizon: f64,
    dim_state: usize,
    drift: f64,
    scale: f64,
    rule: Arc<QuadratureRule>,
    kinks: Option<Vec<f64>>,
    method: GradientMethod,
}

/// Builds `v`. Terminals with known kinks integrate piecewise between them;
/// other terminals use Gauss–Hermite of order `order`.
pub fn feynman_kac_v(model: &SdeModel, terminal: &TerminalCondition, horizon: f64, order: usize) -> Result<FeynmanKac> {
    let (b, sigma) = model.constant_parts()?;
    let q = model.dim_noise();
    Ok(FeynmanKac {
        terminal: terminal.clone(),
        horizon,
        dim_state: model.dim_state(),
        drift: b[0],
        scale: (0..q).map(|c| sigma[(0, c)].powi(2)).sum::<f64>().sqrt(),
        rule: Arc::new(QuadratureRule::new(order)?),
        kinks: breakpoints(terminal.kind()),
        method: GradientMethod::default(),
    })
}

impl FeynmanKac {
    pub fn with_gradient(mut self, method: GradientMethod) -> Self {
        self.method = method;
        self
    }

    /// `(E[g(X_T)], E[g(X_T) ξ])` from `X_t = x` for any `g` of the first coordinate.
    pub fn moments_of(&self, g: impl Fn(f64) -> f64, t: f64, x: &[f64]) -> Result<(f64, f64)> {
        if !(t < self.horizon) {
            return Err(Error::ProviderUndefined {
                t,
                horizon: self.horizon,
            });
        }
        let tau = self.horizon - t;
        let (m, sd) = (x[0] + self.drift * tau, self.scale * tau.sqrt());
        Ok(match &self.kinks {
            Some(k) => gaussian_expectation(g, m, sd, k),
            None => {
                let (mut e0, mut e1) = (0.0, 0.0);
                for (xi, w) in self.rule.nodes().iter().zip(self.rule.weights()) {
                    let v = w * g(m + sd * xi);
                    e0 += v;
                    e1 += v * xi;
                }
                (e0, e1)
            }
        })
    }

    fn phi(&self) -> impl Fn(f64) -> f64 + '_ {
        move |v| self.terminal.eval(&[v])
    }

    /// `v(t, x)`.
    pub fn value(&self, t: f64, x: &[f64]) -> Result<f64> {
        Ok(self.moments_of(self.phi(), t, x)?.0)
    }

    /// `(v, ∇_x v)`; only the first coordinate of the gradient is nonzero.
    pub fn eval(&self, t: f64, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (v, e1) = self.moments_of(self.phi(), t, x)?;
        let sd = self.scale * (self.horizon - t).sqrt();
        let dv = match self.method {
            GradientMethod::LikelihoodRatio => e1 / sd,
            GradientMethod::FiniteDifference => {
                let h = 1e-5 * sd;
                let mut up = x.to_vec();
                let mut dn = x.to_vec();
                up[0] += h;
                dn[0] -= h;
                (self.value(t, &up)? - self.value(t, &dn)?) / (2.0 * h)
            }
        };
        let mut grad = vec![0.0; self.dim_state];
        grad[0] = dv;
        Ok((v, grad))
    }

    /// Adapter for the proxy driver.
    pub fn provider(&self) -> ValueProvider {
        let me = self.clone();
        Arc::new(move |t, x| me.eval(t, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Driver;
    use crate::oracle::closed_form;

    #[test]
    fn legendre_integrates_polynomials() {
        let (n, w) = legendre();
        for k in 0..2 * PANEL_ORDER {
            let s: f64 = n.iter().zip(w).map(|(x, w)| w * x.powi(k as i32)).sum();
            let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
            assert!((s - exact).abs() < 1e-13, "{k}");
        }
    }

    #[test]
    fn examples() {
        let model = SdeModel::brownian(0.0, 0.2, 1.0).unwrap();
        let fk = feynman_kac_v(&model, &TerminalCondition::identity(), 1.0, 16).unwrap();
        let (v, g) = fk.eval(0.25, &[0.4]).unwrap();
        assert!((v - (0.4 + 0.2 * 0.75)).abs() < 1e-14 && (g[0] - 1.0).abs() < 1e-13);

        let bm = SdeModel::brownian(0.0, 0.0, 1.0).unwrap();
        let fk = feynman_kac_v(&bm, &TerminalCondition::indicator(0.0), 1.0, 16).unwrap();
        for x in [-1.0, -0.1, 0.0, 0.3, 2.0] {
            let v = fk.value(0.5, &[x]).unwrap();
            assert!((v - normal::cdf(x / 0.5f64.sqrt())).abs() < 1e-12);
        }
        assert!(matches!(fk.value(1.0, &[0.0]), Err(Error::ProviderUndefined { .. })));
    }

    #[test]
    fn capped_call_matches_closed_form_and_gradients_agree() {
        let model = SdeModel::brownian(0.0, 0.1, 0.8).unwrap();
        let term = TerminalCondition::capped_call(0.2, 1.0).unwrap();
        let r = closed_form(&model, &term, &Driver::zero(1.0).unwrap()).unwrap();
        let fk = feynman_kac_v(&model, &term, 1.0, 16).unwrap();
        let fd = fk.clone().with_gradient(GradientMethod::FiniteDifference);
        for t in [0.0, 0.5, 0.99] {
            for x in [-1.0, 0.0, 0.2, 0.7, 1.5] {
                let (v, g) = fk.eval(t, &[x]).unwrap();
                assert!((v - r.y(t, &[x])).abs() < 1e-8);
                let (_, g2) = fd.eval(t, &[x]).unwrap();
                assert!((g[0] - g2[0]).abs() <= 1e-6 * g[0].abs().max(1e-3), "{t} {x}: {} {}", g[0], g2[0]);
            }
        }
    }
}
