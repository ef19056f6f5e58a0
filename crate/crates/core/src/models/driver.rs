use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use super::SdeModel;
use crate::error::{invalid, Error, Result};

/// `(t, x, y, z) -> f`.
pub type DriverFn = Arc<dyn Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync>;
/// `(t, x) -> (v, ∇_x v)`.
pub type ValueProvider = Arc<dyn Fn(f64, &[f64]) -> Result<(f64, Vec<f64>)> + Send + Sync>;

/// Declared regularity of a driver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriverExponents {
    pub theta_l: f64,
    pub theta_c: f64,
    pub theta_x: f64,
    pub l_f: f64,
    pub l_x: f64,
    pub c_f: f64,
    pub t_holder_half: bool,
}

impl DriverExponents {
    fn smooth(l_f: f64, c_f: f64) -> Self {
        Self {
            theta_l: 1.0,
            theta_c: 1.0,
            theta_x: 1.0,
            l_f,
            l_x: 0.0,
            c_f,
            t_holder_half: true,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("theta_L", self.theta_l),
            ("theta_c", self.theta_c),
            ("theta_X", self.theta_x),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(invalid(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        if !(self.l_f >= 0.0 && self.l_x >= 0.0 && self.c_f >= 0.0) {
            return Err(invalid("driver constants must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DriverKind {
    Zero,
    /// `a y + b·z + c`
    Affine { a: f64, b: Vec<f64>, c: f64 },
    Synthetic,
    TruncatedQuadratic { c: f64, c_u: f64, theta: f64 },
    Proxy,
    Custom,
}

/// Generator `f(t, x, y, z)` for `t < T`, with its declared exponents.
#[derive(Clone)]
pub struct Driver {
    name: String,
    horizon: f64,
    f: DriverFn,
    exponents: DriverExponents,
    kind: DriverKind,
    cut: Option<f64>,
}

impl fmt::Debug for Driver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Driver")
            .field("name", &self.name)
            .field("horizon", &self.horizon)
            .field("kind", &self.kind)
            .field("exponents", &self.exponents)
            .field("cut", &self.cut)
            .finish()
    }
}

/// Componentwise clamp of `z` to `[-level, level]`.
pub fn truncate(z: &[f64], level: f64) -> Vec<f64> {
    z.iter().map(|&v| v.clamp(-level, level)).collect()
}

fn check_horizon(horizon: f64) -> Result<()> {
    if horizon > 0.0 && horizon.is_finite() {
        Ok(())
    } else {
        Err(invalid("horizon must be positive"))
    }
}

impl Driver {
    pub fn custom(
        name: impl Into<String>,
        horizon: f64,
        f: DriverFn,
        exponents: DriverExponents,
    ) -> Result<Self> {
        check_horizon(horizon)?;
        exponents.validate()?;
        Ok(Self {
            name: name.into(),
            horizon,
            f,
            exponents,
            kind: DriverKind::Custom,
            cut: None,
        })
    }

    pub fn zero(horizon: f64) -> Result<Self> {
        check_horizon(horizon)?;
        Ok(Self {
            name: "zero".into(),
            horizon,
            f: Arc::new(|_, _, _, _| 0.0),
            exponents: DriverExponents::smooth(0.0, 0.0),
            kind: DriverKind::Zero,
            cut: None,
        })
    }

    /// `a y + b·z + c`.
    pub fn affine(horizon: f64, a: f64, b: Vec<f64>, c: f64) -> Result<Self> {
        check_horizon(horizon)?;
        let bb = b.clone();
        let l_f = a.abs().max(b.iter().map(|v| v * v).sum::<f64>().sqrt());
        Ok(Self {
            name: "affine".into(),
            horizon,
            f: Arc::new(move |_, _, y, z| a * y + bb.iter().zip(z).map(|(p, q)| p * q).sum::<f64>() + c),
            exponents: DriverExponents::smooth(l_f, c.abs()),
            kind: DriverKind::Affine { a, b, c },
            cut: None,
        })
    }

    /// `C_f (T-t)^{θ_c-1} cos(x_1) + L (T-t)^{(θ_L-1)/2} (sin y + Σ_k T_1(z)_k)`.
    pub fn synthetic(horizon: f64, c_f: f64, lipschitz: f64, theta_c: f64, theta_l: f64, dim_noise: usize) -> Result<Self> {
        check_horizon(horizon)?;
        if !(c_f >= 0.0 && lipschitz >= 0.0) {
            return Err(invalid("synthetic driver constants must be non-negative"));
        }
        let theta_x = (2.0 * theta_c).min(1.0);
        let exponents = DriverExponents {
            theta_l,
            theta_c,
            theta_x,
            l_f: lipschitz * (dim_noise as f64).sqrt(),
            l_x: c_f * horizon.powf((theta_c - 0.5).max(0.0)),
            c_f,
            t_holder_half: false,
        };
        exponents.validate()?;
        Ok(Self {
            name: "synthetic".into(),
            horizon,
            f: Arc::new(move |t, x, y, z| {
                let tau = horizon - t;
                let z_sum: f64 = z.iter().map(|v| v.clamp(-1.0, 1.0)).sum();
                c_f * tau.powf(theta_c - 1.0) * x[0].cos()
                    + lipschitz * tau.powf((theta_l - 1.0) / 2.0) * (y.sin() + z_sum)
            }),
            exponents,
            kind: DriverKind::Synthetic,
            cut: None,
        })
    }

    /// `c (1 + |y| + |T_{C_u (T-t)^{(θ-1)/2}}(z)|^2)` for `z` in `R^dim_noise`.
    pub fn truncated_quadratic(horizon: f64, c: f64, c_u: f64, theta: f64, dim_noise: usize) -> Result<Self> {
        check_horizon(horizon)?;
        if !(c > 0.0 && c_u > 0.0) {
            return Err(invalid("truncated quadratic driver needs c > 0 and C_u > 0"));
        }
        let exponents = DriverExponents {
            theta_l: theta,
            theta_c: 1.0,
            theta_x: 1.0,
            l_f: c * (horizon.powf((1.0 - theta) / 2.0) + 2.0 * (dim_noise as f64).sqrt() * c_u),
            l_x: 0.0,
            c_f: c,
            t_holder_half: false,
        };
        exponents.validate()?;
        Ok(Self {
            name: "truncated-quadratic".into(),
            horizon,
            f: Arc::new(move |t, _, y, z| {
                let level = c_u * (horizon - t).powf((theta - 1.0) / 2.0);
                let q: f64 = z.iter().map(|v| v.clamp(-level, level).powi(2)).sum();
                c * (1.0 + y.abs() + q)
            }),
            exponents,
            kind: DriverKind::TruncatedQuadratic { c, c_u, theta },
            cut: None,
        })
    }

    /// `F(t, x, v(t,x) + y, ∇v(t,x) σ(t,x) + z)`; keeps the base driver's exponents.
    pub fn proxy(base: &Driver, model: &SdeModel, provider: ValueProvider) -> Self {
        let inner = base.f.clone();
        let model = model.clone();
        let (d, q) = (model.dim_state(), model.dim_noise());
        Self {
            name: format!("proxy({})", base.name),
            horizon: base.horizon,
            f: Arc::new(move |t, x, y, z| {
                let Ok((v, grad)) = provider(t, x) else {
                    return f64::NAN;
                };
                let mut sigma = vec![0.0; d * q];
                model.vol(t, x, &mut sigma);
                let shifted: Vec<f64> = (0..q)
                    .map(|c| z[c] + (0..d).map(|r| grad[r] * sigma[r * q + c]).sum::<f64>())
                    .collect();
                inner(t, x, v + y, &shifted)
            }),
            exponents: base.exponents,
            kind: DriverKind::Proxy,
            cut: base.cut,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn exponents(&self) -> &DriverExponents {
        &self.exponents
    }

    pub fn kind(&self) -> &DriverKind {
        &self.kind
    }

    pub fn cut_level(&self) -> Option<f64> {
        self.cut
    }

    pub fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        (self.f)(t, x, y, z)
    }

    /// Like [`Driver::eval`], but rejects `t >= T` for proxy drivers.
    pub fn try_eval(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> Result<f64> {
        if self.kind == DriverKind::Proxy && t >= self.horizon {
            return Err(Error::ProviderUndefined {
                t,
                horizon: self.horizon,
            });
        }
        Ok(self.eval(t, x, y, z))
    }

    pub fn function(&self) -> DriverFn {
        self.f.clone()
    }

    pub fn is_zero(&self) -> bool {
        self.kind == DriverKind::Zero
    }
}

/// `f 1_{[0, T-eps)}(t)`; exponent metadata is unchanged.
pub fn cut_driver(driver: &Driver, eps: f64) -> Result<Driver> {
    let horizon = driver.horizon;
    if !(eps > 0.0 && eps < horizon) {
        return Err(invalid(format!("cut level must lie in (0, {horizon}), got {eps}")));
    }
    let inner = driver.f.clone();
    let level = driver.cut.map_or(eps, |c| c.max(eps));
    let end = horizon - eps;
    let mut out = driver.clone();
    out.f = Arc::new(move |t, x, y, z| if t < end { inner(t, x, y, z) } else { 0.0 });
    out.cut = Some(level);
    if driver.kind != DriverKind::Zero {
        out.name = format!("cut({})", driver.name);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn truncate_examples() {
        assert_eq!(truncate(&[0.3, -0.2], 1.0), vec![0.3, -0.2]);
        assert_eq!(truncate(&[5.0, -5.0], 1.0), vec![1.0, -1.0]);
        assert_eq!(truncate(&[0.5], 0.0), vec![0.0]);
    }

    #[test]
    fn cut_examples() {
        let z = cut_driver(&Driver::zero(1.0).unwrap(), 0.3).unwrap();
        assert_eq!(z.eval(0.1, &[0.0], 1.0, &[1.0]), 0.0);
        let one = Driver::affine(2.0, 0.0, vec![0.0], 1.0).unwrap();
        let cut = cut_driver(&one, 1.0).unwrap();
        assert_eq!(cut.eval(1.5, &[0.0], 0.0, &[0.0]), 0.0);
        assert_eq!(cut.eval(0.5, &[0.0], 0.0, &[0.0]), 1.0);
        let sing = Driver::custom(
            "sing",
            1.0,
            Arc::new(|t, _, _, _| (1.0 - t).powf(-0.5)),
            DriverExponents::smooth(0.0, 1.0),
        )
        .unwrap();
        let cut = cut_driver(&sing, 0.1).unwrap();
        assert_relative_eq!(cut.eval(0.5, &[0.0], 0.0, &[0.0]), 2f64.sqrt(), epsilon = 1e-15);
        assert_eq!(cut.exponents(), sing.exponents());
        assert!(cut_driver(&sing, 0.0).is_err());
        assert!(cut_driver(&sing, 1.0).is_err());
    }

    #[test]
    fn quadratic_examples() {
        let f = Driver::truncated_quadratic(1.0, 1.0, 1.0, 1.0, 1).unwrap();
        assert_eq!(f.eval(0.3, &[0.0], 0.0, &[0.0]), 1.0);
        assert_eq!(f.eval(0.0, &[0.0], 0.0, &[10.0]), 2.0);
        let g = Driver::truncated_quadratic(1.0, 2.0, 1.0, 0.5, 1).unwrap();
        assert_relative_eq!(g.eval(0.75, &[0.0], 0.0, &[10.0]), 6.0, epsilon = 1e-12);
        let e = g.exponents();
        assert_eq!((e.theta_c, e.theta_l, e.c_f), (1.0, 0.5, 2.0));
        assert_relative_eq!(e.l_f, 2.0 * (1.0 + 2.0), epsilon = 1e-15);
        assert!(Driver::truncated_quadratic(1.0, 0.0, 1.0, 0.5, 1).is_err());
    }

    #[test]
    fn proxy_examples() {
        let model = SdeModel::brownian(0.0, 0.0, 1.0).unwrap();
        let zero = Driver::zero(1.0).unwrap();
        let p = Driver::proxy(&zero, &model, Arc::new(|_, x| Ok((x[0], vec![1.0]))));
        assert_eq!(p.eval(0.2, &[0.4], 0.0, &[0.0]), 0.0);

        let ident_y = Driver::custom("y", 1.0, Arc::new(|_, _, y, _| y), DriverExponents::smooth(1.0, 0.0)).unwrap();
        let p = Driver::proxy(&ident_y, &model, Arc::new(|_, _| Ok((3.0, vec![0.0]))));
        assert_eq!(p.eval(0.2, &[0.4], 0.0, &[0.0]), 3.0);

        let ident_z = Driver::custom("z", 1.0, Arc::new(|_, _, _, z| z[0]), DriverExponents::smooth(1.0, 0.0)).unwrap();
        let p = Driver::proxy(&ident_z, &model, Arc::new(|_, x| Ok((x[0], vec![1.0]))));
        assert_eq!(p.eval(0.2, &[0.4], 0.0, &[0.0]), 1.0);
        assert!(matches!(
            p.try_eval(1.0, &[0.4], 0.0, &[0.0]),
            Err(Error::ProviderUndefined { .. })
        ));
    }
}
