use std::fmt;
use std::sync::Arc;

use crate::error::{invalid, Result};
use crate::normal;

pub type TerminalFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Built-in terminal shapes; catalog terminals act on the first state coordinate.
#[derive(Debug, Clone, PartialEq)]
pub enum TerminalKind {
    Identity,
    /// `(x - K)^+ ∧ M`
    CappedCall { strike: f64, cap: f64 },
    /// `|x - K|^theta ∧ M`
    Holder { strike: f64, exponent: f64, cap: f64 },
    /// `1_{x >= K}`
    Indicator { strike: f64 },
    Constant(f64),
    Custom,
}

/// Terminal function `Phi` with its declared regularity.
#[derive(Clone)]
pub struct TerminalCondition {
    name: String,
    phi: TerminalFn,
    alpha: f64,
    theta_phi: Option<f64>,
    holder_const: Option<f64>,
    bound: Option<f64>,
    kind: TerminalKind,
}

impl fmt::Debug for TerminalCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TerminalCondition")
            .field("name", &self.name)
            .field("kind", &self.kind)
            .field("alpha", &self.alpha)
            .field("theta_phi", &self.theta_phi)
            .finish()
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("{name} must lie in (0, 1], got {v}")))
    }
}

impl TerminalCondition {
    pub fn custom(
        name: impl Into<String>,
        phi: TerminalFn,
        alpha: f64,
        theta_phi: Option<f64>,
        holder_const: Option<f64>,
        bound: Option<f64>,
    ) -> Result<Self> {
        Self::build(name.into(), phi, alpha, theta_phi, holder_const, bound, TerminalKind::Custom)
    }

    fn build(
        name: String,
        phi: TerminalFn,
        alpha: f64,
        theta_phi: Option<f64>,
        holder_const: Option<f64>,
        bound: Option<f64>,
        kind: TerminalKind,
    ) -> Result<Self> {
        check_unit("alpha", alpha)?;
        if let Some(t) = theta_phi {
            check_unit("theta_phi", t)?;
        }
        Ok(Self {
            name,
            phi,
            alpha,
            theta_phi,
            holder_const,
            bound,
            kind,
        })
    }

    pub fn identity() -> Self {
        Self::build(
            "identity".into(),
            Arc::new(|x| x[0]),
            1.0,
            Some(1.0),
            Some(1.0),
            None,
            TerminalKind::Identity,
        )
        .expect("valid exponents")
    }

    pub fn capped_call(strike: f64, cap: f64) -> Result<Self> {
        if !(cap > 0.0) {
            return Err(invalid("capped call needs a positive cap"));
        }
        Self::build(
            "capped-call".into(),
            Arc::new(move |x| (x[0] - strike).max(0.0).min(cap)),
            1.0,
            Some(1.0),
            Some(1.0),
            Some(cap),
            TerminalKind::CappedCall { strike, cap },
        )
    }

    /// `|x - K|^theta ∧ M`; fractional smoothness is declared as `theta`.
    pub fn holder(strike: f64, exponent: f64, cap: f64) -> Result<Self> {
        check_unit("exponent", exponent)?;
        if !(cap > 0.0) {
            return Err(invalid("Hölder terminal needs a positive cap"));
        }
        Self::build(
            "holder".into(),
            Arc::new(move |x| (x[0] - strike).abs().powf(exponent).min(cap)),
            exponent,
            Some(exponent),
            Some(1.0),
            Some(cap),
            TerminalKind::Holder {
                strike,
                exponent,
                cap,
            },
        )
    }

    /// `1_{x >= K}`: discontinuous, fractionally smooth with `alpha = 1/2`.
    pub fn indicator(strike: f64) -> Self {
        Self::build(
            "indicator".into(),
            Arc::new(move |x| if x[0] >= strike { 1.0 } else { 0.0 }),
            0.5,
            None,
            None,
            Some(1.0),
            TerminalKind::Indicator { strike },
        )
        .expect("valid exponents")
    }

    pub fn constant(value: f64) -> Self {
        Self::build(
            "constant".into(),
            Arc::new(move |_| value),
            1.0,
            Some(1.0),
            Some(0.0),
            Some(value.abs()),
            TerminalKind::Constant(value),
        )
        .expect("valid exponents")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> &TerminalKind {
        &self.kind
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn theta_phi(&self) -> Option<f64> {
        self.theta_phi
    }

    pub fn holder_const(&self) -> Option<f64> {
        self.holder_const
    }

    pub fn bound(&self) -> Option<f64> {
        self.bound
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.phi)(x)
    }

    pub fn function(&self) -> TerminalFn {
        self.phi.clone()
    }

    /// Closed-form `(E[Phi(m + s xi)], E[Phi(m + s xi) xi])` for `xi ~ N(0,1)`,
    /// when the terminal shape admits one.
    pub fn gaussian_moments(&self, mean: f64, sd: f64) -> Option<(f64, f64)> {
        if sd <= 0.0 {
            return Some(((self.phi)(&[mean]), 0.0));
        }
        match self.kind {
            TerminalKind::Identity => Some((mean, sd)),
            TerminalKind::Constant(c) => Some((c, 0.0)),
            TerminalKind::Indicator { strike } => {
                let d = (mean - strike) / sd;
                Some((normal::cdf(d), normal::pdf(d)))
            }
            TerminalKind::CappedCall { strike, cap } => {
                let call = |k: f64| {
                    let d = (mean - k) / sd;
                    ((mean - k) * normal::cdf(d) + sd * normal::pdf(d), sd * normal::cdf(d))
                };
                let (a0, a1) = call(strike);
                let (b0, b1) = call(strike + cap);
                Some((a0 - b0, a1 - b1))
            }
            TerminalKind::Holder { .. } | TerminalKind::Custom => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn catalog_values() {
        let c = TerminalCondition::capped_call(0.0, 1.0).unwrap();
        assert_eq!(c.eval(&[-1.0]), 0.0);
        assert_eq!(c.eval(&[0.4]), 0.4);
        assert_eq!(c.eval(&[3.0]), 1.0);
        let ind = TerminalCondition::indicator(0.5);
        assert_eq!(ind.eval(&[0.5]), 1.0);
        assert_eq!(ind.eval(&[0.49]), 0.0);
        assert_eq!(ind.alpha(), 0.5);
        let h = TerminalCondition::holder(0.0, 0.5, 2.0).unwrap();
        assert_relative_eq!(h.eval(&[-0.25]), 0.5);
        assert_eq!(h.eval(&[100.0]), 2.0);
        assert!(TerminalCondition::holder(0.0, 1.5, 1.0).is_err());
    }

    /// Composite Simpson over `[-12, 12]`; kinks cost `O(h^2)`.
    fn simpson(g: impl Fn(f64) -> f64) -> f64 {
        let (n, a, b) = (240_000, -12.0, 12.0);
        let h = (b - a) / n as f64;
        let mut s = g(a) + g(b);
        for k in 1..n {
            let x = a + k as f64 * h;
            s += if k % 2 == 1 { 4.0 } else { 2.0 } * g(x);
        }
        s * h / 3.0
    }

    #[test]
    fn closed_moments_match_direct_integration() {
        for term in [
            TerminalCondition::identity(),
            TerminalCondition::capped_call(0.2, 0.7).unwrap(),
            TerminalCondition::constant(3.0),
        ] {
            let (m, s) = (0.1, 0.8);
            let (e0, e1) = term.gaussian_moments(m, s).unwrap();
            let q0 = simpson(|z| term.eval(&[m + s * z]) * normal::pdf(z));
            let q1 = simpson(|z| term.eval(&[m + s * z]) * z * normal::pdf(z));
            assert_relative_eq!(e0, q0, epsilon = 1e-7);
            assert_relative_eq!(e1, q1, epsilon = 1e-7);
        }
        let ind = TerminalCondition::indicator(0.0);
        let (e0, e1) = ind.gaussian_moments(0.0, 1.0).unwrap();
        assert_eq!(e0, 0.5);
        assert_relative_eq!(e1, normal::INV_SQRT_2PI, epsilon = 1e-15);
        assert!(TerminalCondition::holder(0.0, 0.5, 1.0)
            .unwrap()
            .gaussian_moments(0.0, 1.0)
            .is_none());
    }
}
