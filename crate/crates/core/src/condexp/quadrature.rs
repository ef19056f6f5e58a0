//! Gauss–Hermite rules for the standard Gaussian measure.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// `n`-point rule with `E[g(xi)] ≈ Σ w_k g(x_k)` for `xi ~ N(0, 1)`,
/// exact for polynomials up to degree `2n - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn new(order: usize) -> Result<Self> {
        if order == 0 || order > 256 {
            return Err(invalid(format!("quadrature order must be in 1..=256, got {order}")));
        }
        let (x, w) = physicists_hermite(order);
        let scale = std::f64::consts::PI.sqrt();
        let mut pairs: Vec<(f64, f64)> = x
            .into_iter()
            .zip(w)
            .map(|(x, w)| (std::f64::consts::SQRT_2 * x, w / scale))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (nodes, weights) = pairs.into_iter().unzip();
        Ok(Self { nodes, weights })
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn expect(&self, g: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * g(x))
            .sum()
    }

    /// Tensor-product rule over `dim` independent standard normals.
    pub fn tensor(&self, dim: usize) -> TensorRule {
        let n = self.order();
        let count = n.pow(dim as u32);
        let mut nodes = Vec::with_capacity(count * dim);
        let mut weights = Vec::with_capacity(count);
        for flat in 0..count {
            let mut rest = flat;
            let mut w = 1.0;
            for _ in 0..dim {
                let k = rest % n;
                rest /= n;
                nodes.push(self.nodes[k]);
                w *= self.weights[k];
            }
            weights.push(w);
        }
        TensorRule { dim, nodes, weights }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRule {
    dim: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl TensorRule {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.nodes[k * self.dim..(k + 1) * self.dim]
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.weights[k]
    }
}

/// Nodes and weights for the weight `exp(-x^2)`: eigenvalues of the Jacobi
/// matrix as starting points, then Newton on the orthonormal recurrence.
fn physicists_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5; // pi^{-1/4}
    let nf = n as f64;
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        jacobi[(k, k - 1)] = b;
        jacobi[(k - 1, k)] = b;
    }
    let mut guesses: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
    guesses.sort_by(|a, b| b.total_cmp(a));

    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = (n + 1) / 2;
    for i in 0..m {
        let mut z = guesses[i];
        let mut pp = 0.0;
        // ln of the factor divided out of the recurrence to avoid overflow.
        let mut log_scale = 0.0;
        for _ in 0..50 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            log_scale = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
                if p1.abs() > 1e150 {
                    p1 *= 1e-150;
                    p2 *= 1e-150;
                    log_scale += 150.0 * std::f64::consts::LN_10;
                }
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = (std::f64::consts::LN_2 - 2.0 * pp.abs().ln() - 2.0 * log_scale).exp();
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        // Symmetric rule: the middle node is exactly zero.
        x[m - 1] = 0.0;
    }
    (x, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn gaussian_moment(k: u32) -> f64 {
        if k % 2 == 1 {
            0.0
        } else {
            (1..k).step_by(2).map(|j| j as f64).product()
        }
    }

    #[test]
    fn normalisation_and_moments() {
        for n in [1usize, 2, 3, 8, 16, 33, 64, 128, 200, 256] {
            let rule = QuadratureRule::new(n).unwrap();
            let sum: f64 = rule.weights().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "n={n} sum={sum}");
            let odd = rule.expect(|x| x);
            assert!(odd.abs() < 1e-12);
            if n >= 2 {
                assert!((rule.expect(|x| x * x) - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn polynomial_exactness() {
        for n in [4usize, 8, 16] {
            let rule = QuadratureRule::new(n).unwrap();
            for k in 0..(2 * n as u32) {
                let exact = gaussian_moment(k);
                let got = rule.expect(|x| x.powi(k as i32));
                let magnitude = rule.expect(|x| x.abs().powi(k as i32));
                assert!((got - exact).abs() <= 1e-13 * magnitude, "n={n} k={k}: {got} vs {exact}");
            }
        }
    }

    #[test]
    fn smooth_integrand() {
        // E[cos(xi)] = exp(-1/2)
        let rule = QuadratureRule::new(32).unwrap();
        assert_relative_eq!(rule.expect(f64::cos), (-0.5f64).exp(), epsilon = 1e-14);
    }

    #[test]
    fn tensor_rule_covariance() {
        let rule = QuadratureRule::new(5).unwrap().tensor(2);
        assert_eq!(rule.len(), 25);
        let (mut s, mut xy, mut xx) = (0.0, 0.0, 0.0);
        for k in 0..rule.len() {
            let n = rule.node(k);
            s += rule.weight(k);
            xy += rule.weight(k) * n[0] * n[1];
            xx += rule.weight(k) * n[0] * n[0];
        }
        assert_relative_eq!(s, 1.0, epsilon = 1e-13);
        assert!(xy.abs() < 1e-13);
        assert_relative_eq!(xx, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_zero_order() {
        assert!(QuadratureRule::new(0).is_err());
    }
}
