use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{invalid, Error, Result};

/// `(t, x, out)`: writes a vector or row-major matrix into `out`.
pub type CoefficientFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `(j, t, x, out)`: writes the `d x d` Jacobian of the `j`-th volatility column.
pub type ColumnJacobianFn = Arc<dyn Fn(usize, f64, &[f64], &mut [f64]) + Send + Sync>;

pub const DEFAULT_GRAM_CONDITION_LIMIT: f64 = 1e8;

/// Forward diffusion `dX = b(t,X) dt + sigma(t,X) dW` with `X` in `R^d`, `W` in `R^q`.
///
/// The volatility is stored row-major as a `d x q` matrix. Jacobians are
/// needed only for the tangent flow and may be zero for constant models.
#[derive(Clone)]
pub struct SdeModel {
    name: String,
    dim_state: usize,
    dim_noise: usize,
    x0: Vec<f64>,
    drift: CoefficientFn,
    vol: CoefficientFn,
    drift_jacobian: CoefficientFn,
    vol_column_jacobian: ColumnJacobianFn,
    ellipticity_lb: f64,
    constant_coefficients: bool,
    gram_condition_limit: f64,
}

impl fmt::Debug for SdeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeModel")
            .field("name", &self.name)
            .field("dim_state", &self.dim_state)
            .field("dim_noise", &self.dim_noise)
            .field("x0", &self.x0)
            .field("ellipticity_lb", &self.ellipticity_lb)
            .field("constant_coefficients", &self.constant_coefficients)
            .finish()
    }
}

impl SdeModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        dim_state: usize,
        dim_noise: usize,
        x0: Vec<f64>,
        drift: CoefficientFn,
        vol: CoefficientFn,
        drift_jacobian: CoefficientFn,
        vol_column_jacobian: ColumnJacobianFn,
        ellipticity_lb: f64,
        constant_coefficients: bool,
    ) -> Result<Self> {
        if dim_state == 0 || dim_noise < dim_state {
            return Err(invalid(format!(
                "dimensions must satisfy 1 <= d <= q, got d={dim_state}, q={dim_noise}"
            )));
        }
        if x0.len() != dim_state {
            return Err(invalid("initial state has the wrong dimension"));
        }
        if !(ellipticity_lb > 0.0) {
            return Err(invalid("ellipticity lower bound must be positive"));
        }
        Ok(Self {
            name: name.into(),
            dim_state,
            dim_noise,
            x0,
            drift,
            vol,
            drift_jacobian,
            vol_column_jacobian,
            ellipticity_lb,
            constant_coefficients,
            gram_condition_limit: DEFAULT_GRAM_CONDITION_LIMIT,
        })
    }

    /// Constant drift `b` and volatility `sigma` (row-major `d x q`).
    pub fn constant(x0: Vec<f64>, drift: Vec<f64>, sigma: Vec<f64>, dim_noise: usize) -> Result<Self> {
        let d = x0.len();
        if drift.len() != d || sigma.len() != d * dim_noise {
            return Err(invalid("constant model coefficients have inconsistent dimensions"));
        }
        let s = DMatrix::from_row_slice(d, dim_noise, &sigma);
        let gram = &s * s.transpose();
        let lb = SymmetricEigen::new(gram).eigenvalues.min();
        if !(lb > 0.0) {
            return Err(invalid("constant volatility is not uniformly elliptic"));
        }
        let b = drift.clone();
        let sig = sigma.clone();
        Self::new(
            "constant",
            d,
            dim_noise,
            x0,
            Arc::new(move |_, _, out| out.copy_from_slice(&b)),
            Arc::new(move |_, _, out| out.copy_from_slice(&sig)),
            Arc::new(|_, _, out| out.fill(0.0)),
            Arc::new(|_, _, _, out| out.fill(0.0)),
            lb,
            true,
        )
    }

    /// One-dimensional arithmetic Brownian motion `x0 + b t + sigma W_t`.
    pub fn brownian(x0: f64, drift: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(invalid("Brownian volatility must be positive"));
        }
        let mut m = Self::constant(vec![x0], vec![drift], vec![sigma], 1)?;
        m.name = "brownian".into();
        Ok(m)
    }

    /// Bounded smooth model `b(x) = b0 tanh(x)`, `sigma(x) = s0 + s1 tanh(x)` with `s0 > |s1| > 0`.
    pub fn tanh(x0: f64, b0: f64, s0: f64, s1: f64) -> Result<Self> {
        if !(s0 > s1.abs() && s1 != 0.0) {
            return Err(invalid("tanh model needs s0 > |s1| > 0"));
        }
        let lb = (s0 - s1.abs()).powi(2);
        let sech2 = |x: f64| 1.0 - x.tanh().powi(2);
        Self::new(
            "tanh",
            1,
            1,
            vec![x0],
            Arc::new(move |_, x, out| out[0] = b0 * x[0].tanh()),
            Arc::new(move |_, x, out| out[0] = s0 + s1 * x[0].tanh()),
            Arc::new(move |_, x, out| out[0] = b0 * sech2(x[0])),
            Arc::new(move |_, _, x, out| out[0] = s1 * sech2(x[0])),
            lb,
            false,
        )
    }

    pub fn with_gram_condition_limit(mut self, limit: f64) -> Self {
        self.gram_condition_limit = limit;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim_state(&self) -> usize {
        self.dim_state
    }

    pub fn dim_noise(&self) -> usize {
        self.dim_noise
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn ellipticity_lb(&self) -> f64 {
        self.ellipticity_lb
    }

    pub fn constant_coefficients(&self) -> bool {
        self.constant_coefficients
    }

    pub fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, out)
    }

    pub fn vol(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.vol)(t, x, out)
    }

    pub fn drift_jacobian(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.drift_jacobian)(t, x, out)
    }

    pub fn vol_column_jacobian(&self, j: usize, t: f64, x: &[f64], out: &mut [f64]) {
        (self.vol_column_jacobian)(j, t, x, out)
    }

    pub fn drift_at(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_state];
        self.drift(t, x, &mut out);
        out
    }

    /// Volatility as a `d x q` matrix.
    pub fn vol_matrix(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
        let mut out = vec![0.0; self.dim_state * self.dim_noise];
        self.vol(t, x, &mut out);
        DMatrix::from_row_slice(self.dim_state, self.dim_noise, &out)
    }

    /// Drift and volatility of a constant-coefficient model.
    pub fn constant_parts(&self) -> Result<(Vec<f64>, DMatrix<f64>)> {
        if !self.constant_coefficients {
            return Err(Error::UnsupportedModel(format!(
                "model '{}' does not have constant coefficients",
                self.name
            )));
        }
        Ok((self.drift_at(0.0, &self.x0), self.vol_matrix(0.0, &self.x0)))
    }

    /// Right inverse `sigma^T (sigma sigma^T)^{-1}` (a `q x d` matrix).
    pub fn sigma_right_inverse(&self, t: f64, x: &[f64]) -> Result<DMatrix<f64>> {
        right_inverse(&self.vol_matrix(t, x), self.gram_condition_limit)
    }
}

/// `sigma^T (sigma sigma^T)^{-1}` with a guard on the Gram condition number.
pub fn right_inverse(sigma: &DMatrix<f64>, condition_limit: f64) -> Result<DMatrix<f64>> {
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(Error::IllConditionedVolatility {
            condition: f64::INFINITY,
            threshold: condition_limit,
        });
    }
    let gram = sigma * sigma.transpose();
    let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if condition > condition_limit {
        return Err(Error::IllConditionedVolatility {
            condition,
            threshold: condition_limit,
        });
    }
    let inv = gram
        .try_inverse()
        .ok_or(Error::IllConditionedVolatility {
            condition,
            threshold: condition_limit,
        })?;
    Ok(sigma.transpose() * inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn right_inverse_examples() {
        let m = SdeModel::brownian(0.0, 0.0, 1.0).unwrap();
        let inv = m.sigma_right_inverse(0.0, &[0.0]).unwrap();
        assert_eq!(inv[(0, 0)], 1.0);

        let s = DMatrix::from_row_slice(1, 2, &[2.0, 0.0]);
        let inv = right_inverse(&s, 1e8).unwrap();
        assert_eq!(inv.shape(), (2, 1));
        assert_relative_eq!(inv[(0, 0)], 0.5, epsilon = 1e-15);
        assert_eq!(inv[(1, 0)], 0.0);

        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]);
        let inv = right_inverse(&s, 1e8).unwrap();
        assert_relative_eq!(inv, DMatrix::identity(2, 2) * 0.5, epsilon = 1e-15);
        let prod = &s * &inv;
        assert!((prod - DMatrix::<f64>::identity(2, 2)).amax() < 1e-10);
    }

    #[test]
    fn ill_conditioned_volatility_is_rejected() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-6]);
        assert!(matches!(
            right_inverse(&s, 1e8),
            Err(Error::IllConditionedVolatility { .. })
        ));
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(right_inverse(&s, 1e8).is_err());
    }

    #[test]
    fn model_validation() {
        assert!(SdeModel::brownian(0.0, 0.0, 0.0).is_err());
        assert!(SdeModel::tanh(0.0, 0.1, 0.5, 0.5).is_err());
        assert!(SdeModel::tanh(0.0, 0.1, 0.5, 0.0).is_err());
        assert!(SdeModel::constant(vec![0.0, 0.0], vec![0.0], vec![1.0, 0.0, 0.0, 1.0], 2).is_err());
        let m = SdeModel::tanh(0.0, 0.1, 0.5, 0.2).unwrap();
        assert!(!m.constant_coefficients());
        assert!(m.constant_parts().is_err());
        assert_relative_eq!(m.ellipticity_lb(), 0.09, epsilon = 1e-15);
    }
}
