//! Graded time grids `t_i = T - T (1 - i/N)^{1/beta}` on `[0, T]`.
//!
//! With `beta = 1` the grid is uniform; smaller `beta` packs points towards
//! the horizon, where the control process of a BSDE with an irregular
//! terminal condition becomes singular. The bound checks in this module
//! return [`BoundCheck`] triples so callers can log margins instead of
//! asserting.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    beta: f64,
    points: Vec<f64>,
    increments: Vec<f64>,
    /// `(1 - i/N)^{1/beta}`, so that `T - t_i = T * remaining[i]` without cancellation.
    remaining: Vec<f64>,
}

/// Outcome of evaluating one side of an inequality against the other.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl BoundCheck {
    pub fn new(lhs: f64, rhs: f64) -> Self {
        Self {
            lhs,
            rhs,
            holds: lhs <= rhs,
        }
    }

    pub fn margin(&self) -> f64 {
        self.rhs - self.lhs
    }
}

/// Builds the graded grid with `steps` intervals on `[0, horizon]`.
pub fn make_grid(horizon: f64, steps: usize, beta: f64) -> Result<TimeGrid> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(invalid(format!("horizon must be positive, got {horizon}")));
    }
    if steps == 0 {
        return Err(invalid("number of steps must be at least 1"));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(invalid(format!("beta must lie in (0, 1], got {beta}")));
    }
    let n = steps as f64;
    let remaining: Vec<f64> = (0..=steps)
        .map(|i| {
            if i == steps {
                0.0
            } else if beta == 1.0 {
                (steps - i) as f64 / n
            } else {
                // log1p keeps precision close to i = N.
                ((-(i as f64) / n).ln_1p() / beta).exp()
            }
        })
        .collect();
    let mut points: Vec<f64> = remaining[..steps]
        .iter()
        .map(|s| horizon - horizon * s)
        .collect();
    points.push(horizon);
    let increments = if beta == 1.0 {
        vec![horizon / n; steps]
    } else {
        remaining.windows(2).map(|w| horizon * (w[0] - w[1])).collect()
    };
    Ok(TimeGrid {
        horizon,
        steps,
        beta,
        points,
        increments,
        remaining,
    })
}

impl TimeGrid {
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn t(&self, i: usize) -> f64 {
        self.points[i]
    }

    pub fn dt(&self, i: usize) -> f64 {
        self.increments[i]
    }

    /// Time to horizon `T - t_i`.
    pub fn time_to_go(&self, i: usize) -> f64 {
        self.horizon * self.remaining[i]
    }

    /// `max_k Delta_k / (T - t_k)^{1 - theta}` against `(T^theta / beta) N^{-(1 ∧ theta/beta)}`.
    pub fn theta_bound(&self, theta: f64) -> Result<BoundCheck> {
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(invalid(format!("theta must lie in (0, 1], got {theta}")));
        }
        let lhs = (0..self.steps)
            .map(|k| self.increments[k] / self.time_to_go(k).powf(1.0 - theta))
            .fold(0.0, f64::max);
        let exponent = (theta / self.beta).min(1.0);
        let rhs = self.horizon.powf(theta) / self.beta / (self.steps as f64).powf(exponent);
        Ok(BoundCheck::new(lhs, rhs))
    }

    /// `max_k Delta_k / Delta_{k+1}` against `(1/beta)(1 ∨ (1/(2 beta))^{1/beta - 1})`.
    pub fn ratio_bound(&self) -> Result<BoundCheck> {
        if self.steps < 2 {
            return Err(invalid("increment ratio needs at least 2 steps"));
        }
        let lhs = self
            .increments
            .windows(2)
            .map(|w| w[0] / w[1])
            .fold(0.0, f64::max);
        let b = self.beta;
        let rhs = (1.0 / b) * (1.0f64).max((0.5 / b).powf(1.0 / b - 1.0));
        Ok(BoundCheck::new(lhs, rhs))
    }

    /// Discrete kernel sum `sum_{j=i+1}^{k-1} (t_k - t_j)^{delta-1} (t_j - t_i)^{rho-1} Delta_j`
    /// against `2 B(delta, rho) (t_k - t_i)^{delta + rho - 1}`.
    pub fn kernel_bound(&self, delta: f64, rho: f64, i: usize, k: usize) -> Result<BoundCheck> {
        if k > self.steps {
            return Err(Error::IndexOutOfRange {
                what: "k",
                index: k,
                limit: self.steps,
            });
        }
        if i >= k {
            return Err(Error::IndexOutOfRange {
                what: "i",
                index: i,
                limit: k,
            });
        }
        let b = beta_constant(delta, rho)?;
        let (ti, tk) = (self.points[i], self.points[k]);
        let lhs: f64 = (i + 1..k)
            .map(|j| {
                let tj = self.points[j];
                (tk - tj).powf(delta - 1.0) * (tj - ti).powf(rho - 1.0) * self.increments[j]
            })
            .sum();
        let rhs = 2.0 * b * (tk - ti).powf(delta + rho - 1.0);
        Ok(BoundCheck::new(lhs, rhs))
    }

    /// Writes `index,t,delta` rows; the final point has an empty delta.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "index,t,delta")?;
        for (i, t) in self.points.iter().enumerate() {
            match self.increments.get(i) {
                Some(d) => writeln!(out, "{i},{t:.16e},{d:.16e}")?,
                None => writeln!(out, "{i},{t:.16e},")?,
            }
        }
        Ok(())
    }
}

/// Euler Beta function `B(delta, rho) = ∫_0^1 (1-r)^{delta-1} r^{rho-1} dr`, via log-Gamma.
pub fn beta_constant(delta: f64, rho: f64) -> Result<f64> {
    for (name, v) in [("delta", delta), ("rho", rho)] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(invalid(format!("{name} must lie in (0, 1], got {v}")));
        }
    }
    use statrs::function::gamma::ln_gamma;
    Ok((ln_gamma(delta) + ln_gamma(rho) - ln_gamma(delta + rho)).exp())
}
