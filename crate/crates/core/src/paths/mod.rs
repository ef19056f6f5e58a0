//! Forward paths on a time grid, with tangent flows, Malliavin derivatives and
//! discrete Malliavin weights.

mod dump;

pub use dump::{read_binary, write_binary};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grids::TimeGrid;
use crate::linalg;
use crate::models::SdeModel;
use crate::rng::GaussianStream;

/// Simulated paths, stored path-major: `states[m][k][..d]`, `dw[m][k][..q]`.
///
/// Tangents are kept only for models with state-dependent coefficients;
/// otherwise the flow is the identity and is not stored.
#[derive(Debug, Clone)]
pub struct PathBatch {
    model: SdeModel,
    grid: TimeGrid,
    paths: usize,
    first_path: usize,
    seed: u64,
    states: Vec<f64>,
    dw: Vec<f64>,
    tangents: Option<Vec<f64>>,
    inv_tangents: Option<Vec<f64>>,
}

/// One forward Euler-Maruyama step, `out = x + b dt + sigma dw`.
pub fn euler_step(model: &SdeModel, t: f64, dt: f64, x: &[f64], dw: &[f64], scratch: &mut [f64], out: &mut [f64]) {
    let (d, q) = (model.dim_state(), model.dim_noise());
    model.drift(t, x, &mut out[..d]);
    for r in 0..d {
        out[r] = x[r] + out[r] * dt;
    }
    model.vol(t, x, &mut scratch[..d * q]);
    for r in 0..d {
        let mut s = 0.0;
        for c in 0..q {
            s += scratch[r * q + c] * dw[c];
        }
        out[r] += s;
    }
}

pub fn simulate(model: &SdeModel, grid: &TimeGrid, paths: usize, seed: u64) -> Result<PathBatch> {
    simulate_range(model, grid, 0, paths, seed)
}

/// Paths `first..first + paths` of the stream family for `seed`; identical to
/// the same rows of a full [`simulate`] call.
pub fn simulate_range(model: &SdeModel, grid: &TimeGrid, first: usize, paths: usize, seed: u64) -> Result<PathBatch> {
    if paths == 0 {
        return Err(invalid("path count must be positive"));
    }
    let (d, q, n) = (model.dim_state(), model.dim_noise(), grid.steps());
    let track = !model.constant_coefficients();
    let mut states = vec![0.0; paths * (n + 1) * d];
    let mut dw = vec![0.0; paths * n * q];
    let mut tangents = if track { vec![0.0; paths * (n + 1) * d * d] } else { Vec::new() };
    let mut inv_tangents = tangents.clone();
    let (sd, wq, td) = ((n + 1) * d, n * q, (n + 1) * d * d);
    if track {
        states
            .par_chunks_mut(sd)
            .zip(dw.par_chunks_mut(wq))
            .zip(tangents.par_chunks_mut(td))
            .zip(inv_tangents.par_chunks_mut(td))
            .enumerate()
            .try_for_each(|(m, (((xs, ws), tan), inv))| {
                simulate_path(model, grid, seed, first + m, xs, ws, Some(tan), Some(inv))
            })?;
    } else {
        states
            .par_chunks_mut(sd)
            .zip(dw.par_chunks_mut(wq))
            .enumerate()
            .try_for_each(|(m, (xs, ws))| simulate_path(model, grid, seed, first + m, xs, ws, None, None))?;
    }

    Ok(PathBatch {
        model: model.clone(),
        grid: grid.clone(),
        paths,
        first_path: first,
        seed,
        states,
        dw,
        tangents: track.then_some(tangents),
        inv_tangents: track.then_some(inv_tangents),
    })
}

#[allow(clippy::too_many_arguments)]
fn simulate_path(
    model: &SdeModel,
    grid: &TimeGrid,
    seed: u64,
    m: usize,
    xs: &mut [f64],
    ws: &mut [f64],
    tan: Option<&mut [f64]>,
    inv: Option<&mut [f64]>,
) -> Result<()> {
    let (d, q, n) = (model.dim_state(), model.dim_noise(), grid.steps());
    let mut stream = GaussianStream::new(seed, m as u64, q);
    let mut scratch = vec![0.0; d * q];
    xs[..d].copy_from_slice(model.x0());
    for k in 0..n {
        let sq = grid.dt(k).sqrt();
        let w = &mut ws[k * q..(k + 1) * q];
        stream.fill_step(k, w);
        for v in w.iter_mut() {
            *v *= sq;
        }
        let (head, tail) = xs.split_at_mut((k + 1) * d);
        euler_step(model, grid.t(k), grid.dt(k), &head[k * d..], w, &mut scratch, &mut tail[..d]);
        if tail[..d].iter().any(|v| !v.is_finite()) {
            return Err(Error::SimulationOverflow { path: m, step: k + 1 });
        }
    }
    if let (Some(tan), Some(inv)) = (tan, inv) {
        let dd = d * d;
        let eye = linalg::identity(d);
        tan[..dd].copy_from_slice(&eye);
        inv[..dd].copy_from_slice(&eye);
        let mut step = vec![0.0; dd];
        let mut col = vec![0.0; dd];
        for k in 0..n {
            let (t, dt) = (grid.t(k), grid.dt(k));
            let x = &xs[k * d..(k + 1) * d];
            model.drift_jacobian(t, x, &mut step);
            for v in step.iter_mut() {
                *v *= dt;
            }
            for r in 0..d {
                step[r * d + r] += 1.0;
            }
            for j in 0..q {
                model.vol_column_jacobian(j, t, x, &mut col);
                let w = ws[k * q + j];
                for (s, c) in step.iter_mut().zip(&col) {
                    *s += c * w;
                }
            }
            let (done, rest) = tan.split_at_mut((k + 1) * dd);
            linalg::matmul(&step, &done[k * dd..], d, d, d, &mut rest[..dd]);
            let next = &rest[..dd];
            let next_inv = linalg::invert(next, d).ok_or(Error::SingularTangent { path: m, step: k + 1 })?;
            inv[(k + 1) * dd..(k + 2) * dd].copy_from_slice(&next_inv);
        }
    }
    Ok(())
}

impl PathBatch {
    pub fn model(&self) -> &SdeModel {
        &self.model
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Stream index of row 0.
    pub fn first_path(&self) -> usize {
        self.first_path
    }

    pub fn dim_state(&self) -> usize {
        self.model.dim_state()
    }

    pub fn dim_noise(&self) -> usize {
        self.model.dim_noise()
    }

    pub fn has_tangents(&self) -> bool {
        self.tangents.is_some()
    }

    pub fn state(&self, m: usize, k: usize) -> &[f64] {
        let d = self.dim_state();
        let base = (m * (self.grid.steps() + 1) + k) * d;
        &self.states[base..base + d]
    }

    pub fn increment(&self, m: usize, k: usize) -> &[f64] {
        let q = self.dim_noise();
        let base = (m * self.grid.steps() + k) * q;
        &self.dw[base..base + q]
    }

    /// Row-major `d x d` tangent `∇X_k` of path `m`.
    pub fn tangent(&self, m: usize, k: usize) -> Vec<f64> {
        self.flow(&self.tangents, m, k)
    }

    pub fn inv_tangent(&self, m: usize, k: usize) -> Vec<f64> {
        self.flow(&self.inv_tangents, m, k)
    }

    fn flow(&self, store: &Option<Vec<f64>>, m: usize, k: usize) -> Vec<f64> {
        let d = self.dim_state();
        match store {
            Some(v) => {
                let dd = d * d;
                let base = (m * (self.grid.steps() + 1) + k) * dd;
                v[base..base + dd].to_vec()
            }
            None => linalg::identity(d),
        }
    }

    /// States at index `k`, gathered as an `M x d` row-major array.
    pub fn states_at(&self, k: usize) -> Vec<f64> {
        let d = self.dim_state();
        let mut out = Vec::with_capacity(self.paths * d);
        for m in 0..self.paths {
            out.extend_from_slice(self.state(m, k));
        }
        out
    }

    pub fn raw_states(&self) -> &[f64] {
        &self.states
    }

    pub fn raw_increments(&self) -> &[f64] {
        &self.dw
    }

    /// Largest `‖∇X (∇X)^{-1} - I‖_∞` over all stored paths and steps.
    pub fn max_flow_inverse_defect(&self) -> f64 {
        let d = self.dim_state();
        let (Some(t), Some(i)) = (&self.tangents, &self.inv_tangents) else {
            return 0.0;
        };
        let mut prod = vec![0.0; d * d];
        t.chunks(d * d)
            .zip(i.chunks(d * d))
            .map(|(a, b)| {
                linalg::matmul(a, b, d, d, d, &mut prod);
                linalg::max_abs_diff_from_identity(&prod, d)
            })
            .fold(0.0, f64::max)
    }

    fn check_index(&self, what: &'static str, index: usize, limit: usize) -> Result<()> {
        if index > limit {
            Err(Error::IndexOutOfRange { what, index, limit })
        } else {
            Ok(())
        }
    }

    /// `D_{t_i} X_{t_k} = ∇X_k (∇X_i)^{-1} σ(t_i, X_i)` for path `m` (`d x q`).
    pub fn malliavin_derivative_path(&self, m: usize, i: usize, k: usize) -> Vec<f64> {
        let (d, q) = (self.dim_state(), self.dim_noise());
        let mut sigma = vec![0.0; d * q];
        self.model.vol(self.grid.t(i), self.state(m, i), &mut sigma);
        if self.tangents.is_none() {
            return sigma;
        }
        let mut flow = vec![0.0; d * d];
        linalg::matmul(&self.tangent(m, k), &self.inv_tangent(m, i), d, d, d, &mut flow);
        let mut out = vec![0.0; d * q];
        linalg::matmul(&flow, &sigma, d, d, q, &mut out);
        out
    }

    /// Per-path `D_{t_i} X_{t_k}`, an `M x (d x q)` array.
    pub fn malliavin_derivative(&self, i: usize, k: usize) -> Result<Vec<f64>> {
        let n = self.grid.steps();
        self.check_index("k", k, n)?;
        self.check_index("i", i, k)?;
        let dq = self.dim_state() * self.dim_noise();
        let mut out = vec![0.0; self.paths * dq];
        out.par_chunks_mut(dq)
            .enumerate()
            .for_each(|(m, o)| o.copy_from_slice(&self.malliavin_derivative_path(m, i, k)));
        Ok(out)
    }

    /// Weight kernel accumulator for path `m` anchored at `i`.
    pub fn weight_path(&self, m: usize, i: usize, variant: WeightVariant) -> Result<WeightPath<'_>> {
        WeightPath::new(self, m, i, variant)
    }

    /// `H^i_j` for every `j = i+1..=N`.
    pub fn malliavin_weights(&self, i: usize, variant: WeightVariant) -> Result<MalliavinWeightSet> {
        let n = self.grid.steps();
        if i >= n {
            return Err(Error::IndexOutOfRange {
                what: "anchor",
                index: i,
                limit: n - 1,
            });
        }
        let q = self.dim_noise();
        let span = n - i;
        let mut values = vec![0.0; span * self.paths * q];
        let rows: Vec<Result<Vec<f64>>> = (0..self.paths)
            .into_par_iter()
            .map(|m| {
                let mut acc = self.weight_path(m, i, variant)?;
                let mut out = vec![0.0; span * q];
                for (s, chunk) in out.chunks_mut(q).enumerate() {
                    acc.advance()?;
                    acc.weight(chunk);
                    debug_assert_eq!(acc.index(), i + s + 1);
                }
                Ok(out)
            })
            .collect();
        for (m, row) in rows.into_iter().enumerate() {
            let row = row?;
            for s in 0..span {
                let dst = (s * self.paths + m) * q;
                values[dst..dst + q].copy_from_slice(&row[s * q..(s + 1) * q]);
            }
        }
        Ok(MalliavinWeightSet {
            anchor: i,
            paths: self.paths,
            dim_noise: q,
            values,
        })
    }
}

/// Which discrete weight to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightVariant {
    /// `(σ^{-1}(t_k, X_k) D_{t_i} X_{t_k})^T ΔW_k` summands.
    #[default]
    Consistent,
    /// `D_{t_i} X_{t_k}^T ΔW_k` summands, without the inverse volatility; needs `d = q`.
    Printed,
}

/// Running sum `Σ_{k=i}^{j-1} ΔW_k^T A_k` along one path.
pub struct WeightPath<'a> {
    batch: &'a PathBatch,
    m: usize,
    anchor: usize,
    j: usize,
    sum: Vec<f64>,
    variant: WeightVariant,
    kernel: Vec<f64>,
    constant_kernel: bool,
}

impl<'a> WeightPath<'a> {
    fn new(batch: &'a PathBatch, m: usize, anchor: usize, variant: WeightVariant) -> Result<Self> {
        let (d, q) = (batch.dim_state(), batch.dim_noise());
        if variant == WeightVariant::Printed && d != q {
            return Err(Error::UnsupportedCombination(
                "printed weight variant requires d = q".into(),
            ));
        }
        let constant_kernel = !batch.has_tangents();
        let mut w = Self {
            batch,
            m,
            anchor,
            j: anchor,
            sum: vec![0.0; q],
            variant,
            kernel: vec![0.0; q * q],
            constant_kernel,
        };
        if constant_kernel {
            w.kernel = w.kernel_at(anchor)?;
        }
        Ok(w)
    }

    /// `A_k` (`q x q`).
    fn kernel_at(&self, k: usize) -> Result<Vec<f64>> {
        let b = self.batch;
        let (d, q) = (b.dim_state(), b.dim_noise());
        let dx = b.malliavin_derivative_path(self.m, self.anchor, k);
        match self.variant {
            WeightVariant::Printed => Ok(dx),
            WeightVariant::Consistent => {
                let inv = b.model.sigma_right_inverse(b.grid.t(k), b.state(self.m, k))?;
                let inv = linalg::to_row_major(&inv);
                let mut out = vec![0.0; q * q];
                linalg::matmul(&inv, &dx, q, d, q, &mut out);
                Ok(out)
            }
        }
    }

    /// Current index `j` (the sum covers `k = anchor..j-1`).
    pub fn index(&self) -> usize {
        self.j
    }

    /// Adds the summand at `k = j` and moves to `j + 1`.
    pub fn advance(&mut self) -> Result<()> {
        let n = self.batch.grid.steps();
        if self.j >= n {
            return Err(Error::IndexOutOfRange {
                what: "weight index",
                index: self.j + 1,
                limit: n,
            });
        }
        let q = self.batch.dim_noise();
        if !self.constant_kernel {
            self.kernel = self.kernel_at(self.j)?;
        }
        let dw = self.batch.increment(self.m, self.j);
        for c in 0..q {
            let mut s = 0.0;
            for r in 0..q {
                s += dw[r] * self.kernel[r * q + c];
            }
            self.sum[c] += s;
        }
        self.j += 1;
        Ok(())
    }

    /// Writes `H^anchor_j` into `out`.
    pub fn weight(&self, out: &mut [f64]) {
        let g = self.batch.grid.t(self.j) - self.batch.grid.t(self.anchor);
        for (o, s) in out.iter_mut().zip(&self.sum) {
            *o = s / g;
        }
    }
}

/// `H^i_j` for `j = i+1..=N`, stored as `values[(j - i - 1)][m][..q]`.
#[derive(Debug, Clone)]
pub struct MalliavinWeightSet {
    anchor: usize,
    paths: usize,
    dim_noise: usize,
    values: Vec<f64>,
}

impl MalliavinWeightSet {
    pub fn anchor(&self) -> usize {
        self.anchor
    }

    pub fn get(&self, j: usize, m: usize) -> &[f64] {
        let q = self.dim_noise;
        let base = ((j - self.anchor - 1) * self.paths + m) * q;
        &self.values[base..base + q]
    }

    /// All paths' weights at `j`, `M x q`.
    pub fn at(&self, j: usize) -> &[f64] {
        let q = self.dim_noise;
        let base = (j - self.anchor - 1) * self.paths * q;
        &self.values[base..base + self.paths * q]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::make_grid;

    #[test]
    fn brownian_paths_are_sums_of_increments() {
        let model = SdeModel::brownian(0.0, 0.0, 1.0).unwrap();
        let grid = make_grid(1.0, 8, 0.5).unwrap();
        let b = simulate(&model, &grid, 5, 11).unwrap();
        for m in 0..5 {
            let mut s = 0.0;
            for k in 0..8 {
                assert_eq!(b.state(m, k)[0], s);
                s += b.increment(m, k)[0];
            }
            assert_eq!(b.state(m, 8)[0], s);
            assert_eq!(b.tangent(m, 3), vec![1.0]);
        }
        assert_eq!(b.malliavin_derivative(2, 5).unwrap(), vec![1.0; 5]);
    }

    #[test]
    fn batches_extend_without_perturbation() {
        let model = SdeModel::tanh(0.2, 0.3, 0.5, 0.2).unwrap();
        let grid = make_grid(1.0, 6, 0.7).unwrap();
        let small = simulate(&model, &grid, 3, 5).unwrap();
        let large = simulate(&model, &grid, 10, 5).unwrap();
        for m in 0..3 {
            for k in 0..=6 {
                assert_eq!(small.state(m, k), large.state(m, k));
                assert_eq!(small.tangent(m, k), large.tangent(m, k));
            }
        }
        let again = simulate(&model, &grid, 1, 5).unwrap();
        assert_eq!(again.raw_states(), &small.raw_states()[..7]);
        let tail = simulate_range(&model, &grid, 4, 3, 5).unwrap();
        for m in 0..3 {
            assert_eq!(tail.state(m, 6), large.state(m + 4, 6));
        }
    }

    #[test]
    fn tanh_flow_inverse_and_derivative_at_anchor() {
        let model = SdeModel::tanh(0.0, 0.5, 0.6, 0.3).unwrap();
        let grid = make_grid(1.0, 32, 0.5).unwrap();
        let b = simulate(&model, &grid, 200, 3).unwrap();
        assert!(b.max_flow_inverse_defect() < 1e-8);
        let dx = b.malliavin_derivative(4, 4).unwrap();
        for m in 0..200 {
            let s = 0.6 + 0.3 * b.state(m, 4)[0].tanh();
            assert!((dx[m] - s).abs() < 1e-14);
        }
    }

    #[test]
    fn unit_brownian_weights_are_scaled_increments() {
        let model = SdeModel::brownian(0.0, 0.0, 1.0).unwrap();
        let grid = make_grid(1.0, 6, 0.6).unwrap();
        let b = simulate(&model, &grid, 20, 1).unwrap();
        let h = b.malliavin_weights(2, WeightVariant::Consistent).unwrap();
        for m in 0..20 {
            for j in 3..=6 {
                let expect = (b.state(m, j)[0] - b.state(m, 2)[0]) / (grid.t(j) - grid.t(2));
                assert!((h.get(j, m)[0] - expect).abs() < 1e-12);
            }
        }
        assert!(b.malliavin_weights(6, WeightVariant::Consistent).is_err());
    }

    #[test]
    fn printed_variant_needs_square_noise() {
        let model = SdeModel::constant(vec![0.0], vec![0.0], vec![1.0, 0.5], 2).unwrap();
        let grid = make_grid(1.0, 4, 1.0).unwrap();
        let b = simulate(&model, &grid, 4, 1).unwrap();
        assert!(matches!(
            b.malliavin_weights(0, WeightVariant::Printed),
            Err(Error::UnsupportedCombination(_))
        ));
        assert!(b.malliavin_weights(0, WeightVariant::Consistent).is_ok());
    }
}
