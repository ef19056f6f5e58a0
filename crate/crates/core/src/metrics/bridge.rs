//! Interior points of a simulated step, drawn from the Brownian bridge.

use crate::models::SdeModel;
use crate::paths::euler_step;
use crate::rng::GaussianStream;

/// Keeps bridge draws apart from the path streams of the same seed.
const BRIDGE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// States at the midpoints `t_i + (k + 1/2) Δ_i / S` of one simulated step,
/// given its start `x` and Brownian increment `dw`. The state is interpolated
/// with the step's frozen coefficients, which is exact for constant ones.
pub(crate) struct Bridge<'a> {
    model: &'a SdeModel,
    stream: GaussianStream,
    substeps: usize,
    xi: Vec<f64>,
    w: Vec<f64>,
    scratch: Vec<f64>,
}

impl<'a> Bridge<'a> {
    pub fn new(model: &'a SdeModel, seed: u64, path: usize, substeps: usize) -> Self {
        let q = model.dim_noise();
        Self {
            model,
            stream: GaussianStream::new(seed ^ BRIDGE_SALT, path as u64, substeps * q),
            substeps,
            xi: vec![0.0; substeps * q],
            w: vec![0.0; q],
            scratch: vec![0.0; model.dim_state() * q],
        }
    }

    /// Fills `out` (`S x d`, row-major) with the states at the midpoints of step `step`.
    pub fn fill(&mut self, step: usize, t: f64, dt: f64, x: &[f64], dw: &[f64], out: &mut [f64]) {
        let (d, q, s) = (self.model.dim_state(), self.model.dim_noise(), self.substeps);
        self.stream.fill_step(step, &mut self.xi);
        self.w.iter_mut().for_each(|v| *v = 0.0);
        let h = dt / s as f64;
        let mut prev = 0.0;
        for k in 0..s {
            let at = (k as f64 + 0.5) * h;
            let gap = at - prev;
            let rest = dt - prev;
            let scale = (gap * (rest - gap) / rest).max(0.0).sqrt();
            for c in 0..q {
                self.w[c] += gap / rest * (dw[c] - self.w[c]) + scale * self.xi[k * q + c];
            }
            euler_step(self.model, t, at, x, &self.w, &mut self.scratch, &mut out[k * d..(k + 1) * d]);
            prev = at;
        }
    }
}
