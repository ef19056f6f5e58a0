use serde::Serialize;

use crate::error::{Error, Result};
use crate::stats::ols;

/// Errors at or below this level are treated as round-off.
pub const FLOOR: f64 = 1e-20;

/// Least-squares fit of `log(error)` against `log(N)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFit {
    pub points: Vec<(usize, f64)>,
    /// `N` values entering `slope`.
    pub used: Vec<usize>,
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    pub r_squared: f64,
    /// Fit over every point, whatever `used` is.
    pub slope_all_points: f64,
    pub slope_all_points_stderr: f64,
    pub dropped_smallest: bool,
    /// Every error sits at the round-off floor; the slopes are NaN.
    pub degenerate_floor: bool,
}

pub fn fit_rate(points: &[(usize, f64)]) -> Result<RateFit> {
    fit_rate_with(points, false)
}

/// With `drop_smallest`, the smallest `N` is left out of `slope` when at
/// least three points remain.
pub fn fit_rate_with(points: &[(usize, f64)], drop_smallest: bool) -> Result<RateFit> {
    if points.len() < 3 {
        return Err(Error::DegeneratePoints(format!("{} points, need at least 3", points.len())));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by_key(|p| p.0);
    if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::DegeneratePoints("repeated N".into()));
    }
    if sorted.iter().any(|p| p.0 == 0) {
        return Err(Error::DegeneratePoints("N must be positive".into()));
    }
    if sorted.iter().all(|p| p.1.abs() <= FLOOR) {
        return Ok(RateFit {
            used: sorted.iter().map(|p| p.0).collect(),
            points: sorted,
            slope: f64::NAN,
            intercept: f64::NAN,
            slope_stderr: f64::NAN,
            r_squared: f64::NAN,
            slope_all_points: f64::NAN,
            slope_all_points_stderr: f64::NAN,
            dropped_smallest: false,
            degenerate_floor: true,
        });
    }
    if sorted.iter().any(|p| !(p.1 > 0.0 && p.1.is_finite())) {
        return Err(Error::DegeneratePoints("errors must be positive and finite".into()));
    }
    let line = |pts: &[(usize, f64)]| {
        let x: Vec<f64> = pts.iter().map(|p| (p.0 as f64).ln()).collect();
        let y: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
        ols(&x, &y).ok_or_else(|| Error::DegeneratePoints("no spread in N".into()))
    };
    let all = line(&sorted)?;
    let dropped = drop_smallest && sorted.len() >= 4;
    let used_pts = if dropped { &sorted[1..] } else { &sorted[..] };
    let fit = if dropped { line(used_pts)? } else { all };
    Ok(RateFit {
        used: used_pts.iter().map(|p| p.0).collect(),
        points: sorted.clone(),
        slope: fit.slope,
        intercept: fit.intercept,
        slope_stderr: fit.slope_stderr,
        r_squared: fit.r_squared,
        slope_all_points: all.slope,
        slope_all_points_stderr: all.slope_stderr,
        dropped_smallest: dropped,
        degenerate_floor: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_power_law() {
        let pts: Vec<_> = [8, 16, 32, 64].iter().map(|&n| (n, 10.0 / n as f64)).collect();
        let f = fit_rate(&pts).unwrap();
        assert!((f.slope + 1.0).abs() < 1e-12);
        assert!((f.intercept - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn noisy_half_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<_> = [8, 16, 32, 64, 128, 256]
            .iter()
            .map(|&n| (n, (n as f64).powf(-0.5) * (1.0 + 0.01 * rng.gen_range(-1.0..1.0))))
            .collect();
        let f = fit_rate(&pts).unwrap();
        assert!((f.slope + 0.5).abs() < 0.02, "{}", f.slope);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(fit_rate(&[(8, 1.0), (16, 0.5)]), Err(Error::DegeneratePoints(_))));
        assert!(fit_rate(&[(8, 1.0), (8, 0.5), (16, 0.2)]).is_err());
        assert!(fit_rate(&[(8, 1.0), (16, -0.5), (32, 0.2)]).is_err());
        let floor = fit_rate(&[(8, 0.0), (16, 1e-30), (32, 0.0)]).unwrap();
        assert!(floor.degenerate_floor && floor.slope.is_nan());
    }

    #[test]
    fn drop_smallest_records_points() {
        let pts = [(4, 5.0), (8, 0.5), (16, 0.25), (32, 0.125)];
        let f = fit_rate_with(&pts, true).unwrap();
        assert!(f.dropped_smallest && f.used == vec![8, 16, 32]);
        assert!((f.slope + 1.0).abs() < 1e-12);
        assert!(f.slope_all_points < -1.0);
        let three = fit_rate_with(&pts[1..], true).unwrap();
        assert!(!three.dropped_smallest);
    }
}
