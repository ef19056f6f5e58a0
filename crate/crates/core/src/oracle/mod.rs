//! Reference solutions: Bachelier-type closed forms, a brute-force tree
//! solver for the discrete equations, the Feynman–Kac value function, and
//! fractional-smoothness measurement.

mod dp;
mod fk;
mod smoothness;

use std::fmt;
use std::sync::Arc;

pub use dp::{brute_force_dp, TreeLevel, TreeSolution, DEFAULT_TREE_ORDER};
pub use fk::{feynman_kac_v, gaussian_expectation, FeynmanKac, GradientMethod};
pub use smoothness::{fractional_smoothness_fit, SmoothnessFit, SmoothnessPoint};

use crate::error::{Error, Result};
use crate::grids::TimeGrid;
use crate::models::{Driver, DriverKind, SdeModel, TerminalCondition, TerminalKind};
use crate::normal;
use crate::schemes::DiscreteSolution;

pub type ValueFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type GradientFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// `(Y, Z)` as functions of `(t, x)` for one model, driver and terminal.
#[derive(Clone)]
pub struct ReferenceSolution {
    descriptor: String,
    horizon: f64,
    dim_noise: usize,
    y: ValueFn,
    z: GradientFn,
    z_exponent: f64,
    numerical: bool,
}

impl fmt::Debug for ReferenceSolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ReferenceSolution")
            .field("descriptor", &self.descriptor)
            .field("numerical", &self.numerical)
            .finish()
    }
}

/// Identifies a model/driver/terminal combination.
pub fn describe(model: &SdeModel, driver: &Driver, terminal: &TerminalCondition) -> String {
    let coeffs = model
        .constant_parts()
        .map(|(b, s)| format!("b={b:?} sigma={:?}", s.as_slice()))
        .unwrap_or_default();
    format!(
        "model={} x0={:?} {coeffs} | driver={} {:?} T={} | terminal={} {:?}",
        model.name(),
        model.x0(),
        driver.name(),
        driver.kind(),
        driver.horizon(),
        terminal.name(),
        terminal.kind()
    )
}

impl ReferenceSolution {
    pub fn new(
        descriptor: String,
        horizon: f64,
        dim_noise: usize,
        y: ValueFn,
        z: GradientFn,
        z_exponent: f64,
        numerical: bool,
    ) -> Self {
        Self {
            descriptor,
            horizon,
            dim_noise,
            y,
            z,
            z_exponent,
            numerical,
        }
    }

    /// Piecewise-constant-in-time reference from a solution on a fine grid:
    /// at `t` it uses the last grid index `i` with `t_i <= t`.
    pub fn from_solution(descriptor: String, solution: DiscreteSolution, z_exponent: f64) -> Self {
        let sol = Arc::new(solution);
        let q = sol.dim_noise();
        let grid: TimeGrid = sol.grid().clone();
        let index = move |t: f64| -> usize {
            let pts = grid.points();
            pts.partition_point(|&s| s <= t).saturating_sub(1).min(pts.len() - 1)
        };
        let horizon = sol.grid().horizon();
        let n = sol.grid().steps();
        let index = Arc::new(index);
        let (s1, i1) = (sol.clone(), index.clone());
        let y: ValueFn = Arc::new(move |t, x| s1.y(i1(t), x));
        let z: GradientFn = Arc::new(move |t, x, out| sol.z_into(index(t).min(n - 1), x, out));
        Self::new(descriptor, horizon, q, y, z, z_exponent, true)
    }

    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dim_noise(&self) -> usize {
        self.dim_noise
    }

    pub fn y(&self, t: f64, x: &[f64]) -> f64 {
        (self.y)(t, x)
    }

    pub fn z_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.z)(t, x, out)
    }

    pub fn z(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_noise];
        self.z_into(t, x, &mut out);
        out
    }

    /// `e` with `|z(t, x)| = O((T - t)^e)` as `t -> T`.
    pub fn z_singularity_exponent(&self) -> f64 {
        self.z_exponent
    }

    /// True when the reference is itself a numerical solution.
    pub fn is_numerical(&self) -> bool {
        self.numerical
    }

    pub fn validate_for(&self, model: &SdeModel, driver: &Driver, terminal: &TerminalCondition) -> Result<()> {
        let want = describe(model, driver, terminal);
        if want == self.descriptor {
            Ok(())
        } else {
            Err(Error::ReferenceMismatch(format!(
                "reference is for [{}], experiment is [{want}]",
                self.descriptor
            )))
        }
    }
}

/// `(u, ∂_x u)` of `E[Φ(x + bτ + s√τ ξ)]` for the catalog shapes with closed forms.
fn bachelier(kind: &TerminalKind, x: f64, drift: f64, scale: f64, tau: f64) -> Option<(f64, f64)> {
    let m = x + drift * tau;
    let sd = scale * tau.sqrt();
    let call = |k: f64| -> (f64, f64) {
        if sd == 0.0 {
            return ((m - k).max(0.0), if m > k { 1.0 } else { 0.0 });
        }
        let d = (m - k) / sd;
        ((m - k) * normal::cdf(d) + sd * normal::pdf(d), normal::cdf(d))
    };
    match *kind {
        TerminalKind::Identity => Some((m, 1.0)),
        TerminalKind::Constant(c) => Some((c, 0.0)),
        TerminalKind::CappedCall { strike, cap } => {
            let (a, da) = call(strike);
            let (b, db) = call(strike + cap);
            Some((a - b, da - db))
        }
        TerminalKind::Indicator { strike } => {
            if sd == 0.0 {
                return Some((if m >= strike { 1.0 } else { 0.0 }, 0.0));
            }
            let d = (m - strike) / sd;
            Some((normal::cdf(d), normal::pdf(d) / sd))
        }
        TerminalKind::Holder { .. } | TerminalKind::Custom => None,
    }
}

/// Closed-form `(Y, Z)` for a constant-coefficient one-dimensional state with
/// the identity, capped-call or indicator terminal and a zero or affine
/// driver `a y + b·z + c`. A nonzero `b` enters as the drift shift `σ b`.
pub fn closed_form(model: &SdeModel, terminal: &TerminalCondition, driver: &Driver) -> Result<ReferenceSolution> {
    let unsupported = |why: &str| {
        Err(Error::UnsupportedCombination(format!(
            "no closed form for model '{}', terminal '{}', driver '{}': {why}",
            model.name(),
            terminal.name(),
            driver.name()
        )))
    };
    if !model.constant_coefficients() {
        return unsupported("coefficients are not constant");
    }
    if model.dim_state() != 1 {
        return unsupported("state dimension must be 1");
    }
    let kind = terminal.kind().clone();
    let z_exponent = match kind {
        TerminalKind::Identity | TerminalKind::CappedCall { .. } | TerminalKind::Constant(_) => 0.0,
        TerminalKind::Indicator { .. } => -0.5,
        _ => return unsupported("terminal shape"),
    };
    let (a, beta, c) = match driver.kind() {
        DriverKind::Zero => (0.0, vec![0.0; model.dim_noise()], 0.0),
        DriverKind::Affine { a, b, c } => (*a, b.clone(), *c),
        _ => return unsupported("driver is neither zero nor affine"),
    };
    let (b, sigma) = model.constant_parts()?;
    let q = model.dim_noise();
    let sig: Vec<f64> = (0..q).map(|k| sigma[(0, k)]).collect();
    let scale = sig.iter().map(|v| v * v).sum::<f64>().sqrt();
    let drift = b[0] + sig.iter().zip(&beta).map(|(s, v)| s * v).sum::<f64>();
    let horizon = driver.horizon();
    let growth = move |tau: f64| (a * tau).exp();
    let shift = move |tau: f64| if a == 0.0 { c * tau } else { c / a * ((a * tau).exp() - 1.0) };
    let (k1, k2) = (kind.clone(), kind);
    let y: ValueFn = Arc::new(move |t, x| {
        let tau = (horizon - t).max(0.0);
        let (u, _) = bachelier(&k1, x[0], drift, scale, tau).expect("supported shape");
        growth(tau) * u + shift(tau)
    });
    let z: GradientFn = Arc::new(move |t, x, out| {
        let tau = (horizon - t).max(0.0);
        let (_, du) = bachelier(&k2, x[0], drift, scale, tau).expect("supported shape");
        for (o, s) in out.iter_mut().zip(&sig) {
            *o = growth(tau) * du * s;
        }
    });
    Ok(ReferenceSolution::new(
        describe(model, driver, terminal),
        horizon,
        q,
        y,
        z,
        z_exponent,
        false,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bm() -> SdeModel {
        SdeModel::brownian(0.0, 0.0, 1.0).unwrap()
    }

    #[test]
    fn catalog_examples() {
        let zero = Driver::zero(1.0).unwrap();
        let r = closed_form(&bm(), &TerminalCondition::identity(), &zero).unwrap();
        assert_abs_diff_eq!(r.y(0.2, &[0.3]), 0.3);
        assert_abs_diff_eq!(r.z(0.2, &[0.3])[0], 1.0);
        let r = closed_form(&bm(), &TerminalCondition::indicator(0.0), &zero).unwrap();
        assert_abs_diff_eq!(r.y(0.0, &[0.0]), 0.5);
        assert_abs_diff_eq!(r.z(0.0, &[0.0])[0], 0.398_942_280_401_432_7, epsilon = 1e-15);
        let aff = Driver::affine(1.0, 1.0, vec![0.0], 0.0).unwrap();
        let r = closed_form(&bm(), &TerminalCondition::identity(), &aff).unwrap();
        assert_abs_diff_eq!(r.y(0.0, &[0.0]), 0.0);
        assert_abs_diff_eq!(r.z(0.0, &[0.0])[0], std::f64::consts::E, epsilon = 1e-14);
    }

    #[test]
    fn affine_constant_term() {
        let aff = Driver::affine(1.0, 0.0, vec![0.0], 0.7).unwrap();
        let r = closed_form(&bm(), &TerminalCondition::identity(), &aff).unwrap();
        assert_abs_diff_eq!(r.y(0.25, &[0.1]), 0.1 + 0.7 * 0.75, epsilon = 1e-15);
    }

    #[test]
    fn gradient_consistency() {
        let model = SdeModel::brownian(0.2, 0.1, 0.7).unwrap();
        let drivers = [
            Driver::zero(1.0).unwrap(),
            Driver::affine(1.0, 0.5, vec![0.3], 0.2).unwrap(),
        ];
        let terminals = [
            TerminalCondition::identity(),
            TerminalCondition::capped_call(0.1, 0.8).unwrap(),
            TerminalCondition::indicator(0.2),
        ];
        for d in &drivers {
            for term in &terminals {
                let r = closed_form(&model, term, d).unwrap();
                for t in [0.0, 0.3, 0.6, 0.9] {
                    for x in [-0.8, -0.1, 0.2, 0.55, 1.3] {
                        let h = 1e-5;
                        let fd = (r.y(t, &[x + h]) - r.y(t, &[x - h])) / (2.0 * h) * 0.7;
                        let z = r.z(t, &[x])[0];
                        assert!((fd - z).abs() <= 1e-7 * z.abs().max(1e-2), "{} {t} {x}: {fd} vs {z}", term.name());
                    }
                }
            }
        }
    }

    #[test]
    fn indicator_blow_up_is_bounded() {
        let r = closed_form(&bm(), &TerminalCondition::indicator(0.0), &Driver::zero(1.0).unwrap()).unwrap();
        let worst = (0..=1000)
            .map(|k| 0.9999 * k as f64 / 1000.0)
            .map(|t| r.z(t, &[0.0])[0].abs() * (1.0 - t).sqrt())
            .fold(0.0, f64::max);
        assert!(worst <= normal::INV_SQRT_2PI + 1e-12);
    }

    #[test]
    fn unsupported_and_mismatch() {
        let zero = Driver::zero(1.0).unwrap();
        let tq = Driver::truncated_quadratic(1.0, 0.5, 1.0, 0.5, 1).unwrap();
        assert!(matches!(
            closed_form(&bm(), &TerminalCondition::identity(), &tq),
            Err(Error::UnsupportedCombination(_))
        ));
        let r = closed_form(&bm(), &TerminalCondition::identity(), &zero).unwrap();
        assert!(r.validate_for(&bm(), &zero, &TerminalCondition::identity()).is_ok());
        let other = SdeModel::brownian(0.0, 0.0, 2.0).unwrap();
        assert!(matches!(
            r.validate_for(&other, &zero, &TerminalCondition::identity()),
            Err(Error::ReferenceMismatch(_))
        ));
    }
}
