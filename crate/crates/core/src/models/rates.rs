use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateInputs {
    pub alpha: f64,
    pub theta_l: f64,
    pub theta_c: f64,
    pub theta_phi: Option<f64>,
    pub beta: f64,
}

fn unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("{name} must lie in (0, 1], got {v}")))
    }
}

impl RateInputs {
    pub fn validate(&self) -> Result<()> {
        unit("alpha", self.alpha)?;
        unit("theta_L", self.theta_l)?;
        unit("theta_c", self.theta_c)?;
        unit("beta", self.beta)?;
        if let Some(t) = self.theta_phi {
            unit("theta_phi", t)?;
        }
        Ok(())
    }
}

/// `((θ_c ∧ α/2) + θ_L/2) ∧ θ_c`.
pub fn gamma_exponent(alpha: f64, theta_l: f64, theta_c: f64) -> Result<f64> {
    unit("alpha", alpha)?;
    unit("theta_L", theta_l)?;
    unit("theta_c", theta_c)?;
    Ok((theta_c.min(alpha / 2.0) + theta_l / 2.0).min(theta_c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateScheme {
    /// Exponent on `ℰ(N)` under fractional smoothness of the terminal.
    Euler,
    /// Exponent on `ℰ(N)` under a Hölder terminal.
    EulerHolder,
    /// Exponent on the pointwise `Z` error under exponential moments.
    Malliavin,
    /// Exponent on the pointwise `Z` error under a Hölder terminal.
    MalliavinHolder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatePrediction {
    pub exponent: f64,
    pub grid_constraint_ok: bool,
    pub log_factor: bool,
    pub gamma: f64,
    /// Argument of the `[1,3]` indicator, when the scheme has one.
    pub indicator_argument: Option<f64>,
    /// Set when the argument exceeds 3; the `>= 1` branch is applied.
    pub indicator_out_of_set: bool,
}

/// Predicted convergence exponent.
///
/// The indicator sets are taken literally as `[1,3]`. An argument above 3
/// (outside both `(0,1)` and `[1,3]`) is flagged and treated as `>= 1`.
pub fn predicted_rate(scheme: RateScheme, inputs: &RateInputs) -> Result<RatePrediction> {
    inputs.validate()?;
    let RateInputs {
        alpha,
        theta_l,
        theta_c,
        theta_phi,
        beta,
    } = *inputs;
    let gamma = gamma_exponent(alpha, theta_l, theta_c)?;
    let two_g = 2.0 * gamma;
    let classify = |arg: f64| -> (bool, bool) {
        let upper = arg >= 1.0;
        (upper, arg > 3.0)
    };
    let out = match scheme {
        RateScheme::Euler => RatePrediction {
            exponent: if alpha + theta_l >= 1.0 { 1.0 } else { two_g },
            grid_constraint_ok: beta < two_g.min(alpha),
            log_factor: false,
            gamma,
            indicator_argument: None,
            indicator_out_of_set: false,
        },
        RateScheme::EulerHolder => {
            let tp = theta_phi.ok_or(Error::MissingThetaPhi)?;
            let arg = tp + beta + two_g;
            let (upper, outside) = classify(arg);
            RatePrediction {
                exponent: if upper { 1.0 } else { two_g },
                grid_constraint_ok: beta < two_g.min(alpha).min(theta_l),
                log_factor: false,
                gamma,
                indicator_argument: Some(arg),
                indicator_out_of_set: outside,
            }
        }
        RateScheme::Malliavin | RateScheme::MalliavinHolder => {
            let arg = match scheme {
                RateScheme::Malliavin => beta + two_g,
                _ => beta + theta_phi.ok_or(Error::MissingThetaPhi)? + two_g,
            };
            let (upper, outside) = classify(arg);
            RatePrediction {
                exponent: if upper { 0.5 } else { gamma },
                grid_constraint_ok: beta < gamma.min(alpha).min(theta_l),
                log_factor: upper && scheme == RateScheme::Malliavin,
                gamma,
                indicator_argument: Some(arg),
                indicator_out_of_set: outside,
            }
        }
    };
    if out.indicator_out_of_set {
        log::warn!(
            "rate indicator argument {:.4} lies outside [1,3]; using the upper branch",
            out.indicator_argument.unwrap_or(f64::NAN)
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(alpha: f64, theta_l: f64, theta_c: f64, theta_phi: Option<f64>, beta: f64) -> RateInputs {
        RateInputs {
            alpha,
            theta_l,
            theta_c,
            theta_phi,
            beta,
        }
    }

    #[test]
    fn gamma_examples() {
        assert_eq!(gamma_exponent(1.0, 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(gamma_exponent(0.5, 0.5, 1.0).unwrap(), 0.5);
        assert_eq!(gamma_exponent(1.0, 1.0, 0.25).unwrap(), 0.25);
        assert!(gamma_exponent(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn euler_examples() {
        let p = predicted_rate(RateScheme::Euler, &inputs(1.0, 1.0, 1.0, None, 0.5)).unwrap();
        assert_eq!((p.exponent, p.grid_constraint_ok, p.log_factor), (1.0, true, false));
        let p = predicted_rate(RateScheme::Euler, &inputs(0.5, 0.25, 1.0, None, 0.2)).unwrap();
        assert_eq!(p.gamma, 0.375);
        assert_eq!((p.exponent, p.grid_constraint_ok), (0.75, true));
    }

    #[test]
    fn malliavin_examples() {
        let i = inputs(1.0, 1.0, 1.0, Some(1.0), 0.5);
        let p = predicted_rate(RateScheme::Malliavin, &i).unwrap();
        assert_eq!((p.exponent, p.grid_constraint_ok, p.log_factor), (0.5, true, true));
        assert_eq!(p.indicator_argument, Some(2.5));
        let h = predicted_rate(RateScheme::MalliavinHolder, &i).unwrap();
        assert_eq!(h.indicator_argument, Some(3.5));
        assert!(h.indicator_out_of_set);
        assert_eq!((h.exponent, h.log_factor), (0.5, false));
    }

    #[test]
    fn holder_variants_need_theta_phi() {
        let i = inputs(1.0, 1.0, 1.0, None, 0.5);
        assert!(matches!(
            predicted_rate(RateScheme::EulerHolder, &i),
            Err(Error::MissingThetaPhi)
        ));
        assert!(matches!(
            predicted_rate(RateScheme::MalliavinHolder, &i),
            Err(Error::MissingThetaPhi)
        ));
    }

    #[test]
    fn lower_branch() {
        let p = predicted_rate(RateScheme::Malliavin, &inputs(0.2, 0.2, 0.2, None, 0.1)).unwrap();
        assert_eq!(p.gamma, 0.2);
        assert_eq!(p.exponent, 0.2);
        assert!(!p.log_factor);
    }
}
