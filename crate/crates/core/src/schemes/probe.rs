use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grids::TimeGrid;
use crate::models::{Driver, SdeModel, TerminalCondition};
use crate::oracle::ReferenceSolution;
use crate::paths::{simulate_range, WeightVariant};

const CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeEstimate {
    pub estimate: Vec<f64>,
    pub stderr: Vec<f64>,
    pub reference: Vec<f64>,
    pub z_score: Vec<f64>,
    pub paths: usize,
}

/// Monte Carlo `Z_0` from discrete weights on `fine_grid`:
/// the mean of `Φ(X_T) H^0_N + Σ_{0<j<N} f(t_j, X_j, Y_{t_j}, Z_{t_j}) H^0_j Δ_j`
/// with `(Y, Z)` taken from `reference`.
pub fn representation_probe(
    model: &SdeModel,
    driver: &Driver,
    terminal: &TerminalCondition,
    fine_grid: &TimeGrid,
    paths: usize,
    seed: u64,
    reference: Option<&ReferenceSolution>,
) -> Result<ProbeEstimate> {
    let reference = reference.ok_or_else(|| {
        Error::MissingReference("the representation probe needs a reference solution".into())
    })?;
    if paths < 2 {
        return Err(Error::InvalidParameter("the probe needs at least two paths".into()));
    }
    let (n, q) = (fine_grid.steps(), model.dim_noise());
    let zero = driver.is_zero();
    let mut sum = vec![0.0; q];
    let mut sum_sq = vec![0.0; q];
    let mut first = 0;
    while first < paths {
        let count = CHUNK.min(paths - first);
        let batch = simulate_range(model, fine_grid, first, count, seed)?;
        let rows: Vec<Vec<f64>> = (0..count)
            .into_par_iter()
            .map(|m| -> Result<Vec<f64>> {
                let mut wp = batch.weight_path(m, 0, WeightVariant::Consistent)?;
                let mut h = vec![0.0; q];
                let mut z = vec![0.0; q];
                let mut s = vec![0.0; q];
                for j in 1..=n {
                    wp.advance()?;
                    let x = batch.state(m, j);
                    let c = if j == n {
                        terminal.eval(x)
                    } else if zero {
                        continue;
                    } else {
                        let t = fine_grid.t(j);
                        reference.z_into(t, x, &mut z);
                        driver.eval(t, x, reference.y(t, x), &z) * fine_grid.dt(j)
                    };
                    wp.weight(&mut h);
                    for (o, hv) in s.iter_mut().zip(&h) {
                        *o += c * hv;
                    }
                }
                Ok(s)
            })
            .collect::<Result<_>>()?;
        for row in rows {
            for c in 0..q {
                sum[c] += row[c];
                sum_sq[c] += row[c] * row[c];
            }
        }
        first += count;
    }
    let m = paths as f64;
    let estimate: Vec<f64> = sum.iter().map(|s| s / m).collect();
    let stderr: Vec<f64> = (0..q)
        .map(|c| ((sum_sq[c] / m - estimate[c].powi(2)).max(0.0) * m / (m - 1.0) / m).sqrt())
        .collect();
    let reference = reference.z(0.0, model.x0());
    let z_score = (0..q)
        .map(|c| (estimate[c] - reference[c]) / stderr[c])
        .collect();
    Ok(ProbeEstimate {
        estimate,
        stderr,
        reference,
        z_score,
        paths,
    })
}
