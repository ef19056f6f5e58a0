//! Randomized spot checks of the declared model and driver regularity.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Driver, SdeModel};
use crate::error::Result;

pub const DEFAULT_SAMPLES: usize = 10_000;
pub const DEFAULT_SLACK: f64 = 1.05;

/// Worst observed ratio of left side to declared bound (`<= slack` passes).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpotCheck {
    pub samples: usize,
    pub worst_ratio: f64,
    pub slack: f64,
    pub passed: bool,
}

impl SpotCheck {
    fn finish(samples: usize, worst_ratio: f64, slack: f64) -> Self {
        Self {
            samples,
            worst_ratio,
            slack,
            passed: worst_ratio.is_finite() && worst_ratio <= slack,
        }
    }
}

fn sample_state(rng: &mut ChaCha8Rng, x0: &[f64], radius: f64) -> Vec<f64> {
    x0.iter().map(|v| v + rng.gen_range(-radius..radius)).collect()
}

/// `λ̄ |ζ|² <= ζ^T σσ^T ζ` for random `(t, x)` and unit `ζ`; ratio is `λ̄ / ζ^T σσ^T ζ`.
pub fn check_ellipticity(model: &SdeModel, horizon: f64, samples: usize, slack: f64, seed: u64) -> SpotCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, q) = (model.dim_state(), model.dim_noise());
    let mut sigma = vec![0.0; d * q];
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let t = rng.gen_range(0.0..horizon);
        let x = sample_state(&mut rng, model.x0(), 5.0);
        let mut zeta: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = zeta.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        zeta.iter_mut().for_each(|v| *v /= norm);
        model.vol(t, &x, &mut sigma);
        let form: f64 = (0..q)
            .map(|c| (0..d).map(|r| zeta[r] * sigma[r * q + c]).sum::<f64>().powi(2))
            .sum();
        let ratio = if sigma.iter().all(|v| v.is_finite()) {
            model.ellipticity_lb() / form
        } else {
            f64::INFINITY
        };
        worst = worst.max(ratio);
    }
    SpotCheck::finish(samples, worst, slack)
}

/// `‖σ^{-1}‖_2 <= ‖σ‖_2 / λ̄` on random `(t, x)`.
pub fn check_inverse_bound(model: &SdeModel, horizon: f64, samples: usize, slack: f64, seed: u64) -> Result<SpotCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let t = rng.gen_range(0.0..horizon);
        let x = sample_state(&mut rng, model.x0(), 5.0);
        let s = model.vol_matrix(t, &x);
        let inv = model.sigma_right_inverse(t, &x)?;
        let bound = s.singular_values().max() / model.ellipticity_lb();
        worst = worst.max(inv.singular_values().max() / bound);
    }
    Ok(SpotCheck::finish(samples, worst, slack))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriverCheck {
    pub lipschitz: SpotCheck,
    pub growth: SpotCheck,
}

/// Local Lipschitz bound in `(y, z)` and growth of `f(t, x, 0, 0)` on random tuples.
pub fn check_driver(driver: &Driver, dim_state: usize, dim_noise: usize, samples: usize, slack: f64, seed: u64) -> DriverCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = driver.horizon();
    let e = driver.exponents();
    let x0 = vec![0.0; dim_state];
    let zeros = vec![0.0; dim_noise];
    let (mut lip, mut growth): (f64, f64) = (0.0, 0.0);
    for _ in 0..samples {
        let t = horizon * rng.gen_range(0.0..0.999);
        let tau = horizon - t;
        let x = sample_state(&mut rng, &x0, 3.0);
        let y = rng.gen_range(-3.0..3.0);
        let z: Vec<f64> = (0..dim_noise).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let scale = 10f64.powf(rng.gen_range(-3.0..0.5));
        let y2 = y + scale * rng.gen_range(-1.0..1.0);
        let z2: Vec<f64> = z.iter().map(|v| v + scale * rng.gen_range(-1.0..1.0)).collect();
        let dz = z.iter().zip(&z2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let lhs = (driver.eval(t, &x, y, &z) - driver.eval(t, &x, y2, &z2)).abs();
        let rhs = e.l_f * ((y - y2).abs() + dz) / tau.powf((1.0 - e.theta_l) / 2.0);
        lip = lip.max(ratio(lhs, rhs));
        let g = driver.eval(t, &x, 0.0, &zeros).abs();
        growth = growth.max(ratio(g, e.c_f / tau.powf(1.0 - e.theta_c)));
    }
    DriverCheck {
        lipschitz: SpotCheck::finish(samples, lip, slack),
        growth: SpotCheck::finish(samples, growth, slack),
    }
}

fn ratio(lhs: f64, rhs: f64) -> f64 {
    if lhs <= 1e-14 * rhs.abs().max(1.0) {
        0.0
    } else if rhs > 0.0 {
        lhs / rhs
    } else {
        f64::INFINITY
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_drivers_pass() {
        let drivers = [
            (Driver::zero(1.0).unwrap(), 1),
            (Driver::affine(1.0, 0.5, vec![0.2], 0.3).unwrap(), 1),
            (Driver::synthetic(1.0, 0.7, 0.4, 0.6, 0.5, 1).unwrap(), 1),
            (Driver::synthetic(1.0, 0.7, 0.4, 0.3, 0.2, 2).unwrap(), 2),
            (Driver::truncated_quadratic(1.0, 0.5, 1.0, 0.5, 1).unwrap(), 1),
            (Driver::truncated_quadratic(2.0, 0.5, 1.5, 0.8, 2).unwrap(), 2),
        ];
        for (d, q) in &drivers {
            let c = check_driver(d, 1, *q, 2_000, DEFAULT_SLACK, 1);
            assert!(c.lipschitz.passed, "{}: {:?}", d.name(), c.lipschitz);
            assert!(c.growth.passed, "{}: {:?}", d.name(), c.growth);
        }
    }

    #[test]
    fn understated_constant_is_caught() {
        let d = Driver::custom(
            "steep",
            1.0,
            std::sync::Arc::new(|_, _, y, _| 3.0 * y),
            super::super::DriverExponents {
                theta_l: 1.0,
                theta_c: 1.0,
                theta_x: 1.0,
                l_f: 1.0,
                l_x: 0.0,
                c_f: 0.0,
                t_holder_half: true,
            },
        )
        .unwrap();
        assert!(!check_driver(&d, 1, 1, 500, DEFAULT_SLACK, 2).lipschitz.passed);
    }

    #[test]
    fn catalog_models_pass() {
        for m in [
            SdeModel::brownian(0.0, 0.1, 0.8).unwrap(),
            SdeModel::tanh(0.0, 0.3, 0.6, 0.25).unwrap(),
            SdeModel::constant(vec![0.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.2, 0.0, 0.0, 0.9, 0.3], 3).unwrap(),
        ] {
            assert!(check_ellipticity(&m, 1.0, 2_000, DEFAULT_SLACK, 3).passed, "{}", m.name());
            assert!(check_inverse_bound(&m, 1.0, 500, DEFAULT_SLACK, 4).unwrap().passed);
        }
    }
}
