//! Standard normal density and distribution function.

use libm::erfc;

pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn reference_values() {
        assert_eq!(cdf(0.0), 0.5);
        assert_relative_eq!(pdf(0.0), 0.398_942_280_401_432_7, max_relative = 1e-15);
        assert_relative_eq!(cdf(1.0), 0.841_344_746_068_542_9, max_relative = 1e-14);
        assert_relative_eq!(cdf(-3.0), 0.001_349_898_031_630_094_6, max_relative = 1e-12);
    }
}
