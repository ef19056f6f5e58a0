//! Quadrature backend for constant-coefficient models.
//!
//! Exact mode evaluates the conditional expectations on the quadrature tree
//! lazily, caching every node value. Grid mode (`d = 1`) tabulates each
//! fitted map on a state grid; a `q`-dimensional noise then acts through the
//! single direction `u = σ / |σ|`, so one-dimensional rules suffice and
//! `E[g(X') ΔW] = u √Δ E[g(X') ξ]`.
//!
//! The Malliavin variant never forms weights explicitly. For each `j` it
//! carries `A^j_k = E_k[g_j(X_j)]` and `B^j_k = E_k[g_j(X_j)(W_j - W_k)]`
//! backwards through `B^j_k = E_k[B^j_{k+1} + A^j_{k+1} ΔW_k]`, where
//! `g_N = Φ` and `g_j = E_j[f(t_j, X_j, ŷ_{j+1}, ẑ_j)]`. Then
//! `ẑ_i = (B^N_i / (T - t_i) + Σ_j B^j_i Δ_j / (t_j - t_i)) A` and
//! `ŷ_i = A^N_i + Σ_{j >= i} A^j_i Δ_j`.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rayon::prelude::*;

use super::{DiscreteSolution, Problem, SchemeKind, StateGrid};
use crate::condexp::{GaussianTransition, GridFunction, QuadratureRule, StateFunction};
use crate::error::{invalid, Error, Result};
use crate::models::{Driver, DriverKind};

/// Largest quadrature tree (leaf count) exact mode will build.
const TREE_BUDGET: f64 = 5e8;

type VecFn = Arc<dyn Fn(&[f64]) -> Arc<[f64]> + Send + Sync>;

fn memo_vec(f: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> VecFn {
    let cache: RwLock<HashMap<Vec<u64>, Arc<[f64]>>> = RwLock::new(HashMap::new());
    Arc::new(move |x: &[f64]| {
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        if let Some(v) = cache.read().expect("memo lock").get(&key) {
            return v.clone();
        }
        let v: Arc<[f64]> = f(x).into();
        cache.write().expect("memo lock").insert(key, v.clone());
        v
    })
}

fn component(f: &VecFn, c: usize) -> StateFunction {
    let f = f.clone();
    StateFunction::from_fn(move |x| f(x)[c])
}

fn require_constant(p: &Problem) -> Result<()> {
    if p.model.constant_coefficients() {
        Ok(())
    } else {
        Err(Error::UnsupportedModel(format!(
            "the quadrature backend needs constant coefficients, model '{}' has none",
            p.model.name()
        )))
    }
}

fn check_budget(nodes: usize, steps: usize) -> Result<()> {
    let leaves = (nodes as f64).powi(steps as i32);
    if leaves > TREE_BUDGET {
        return Err(Error::TooLarge(format!(
            "exact quadrature tree has {nodes}^{steps} leaves; use grid mode"
        )));
    }
    Ok(())
}

pub(super) fn euler_exact(p: &Problem, order: usize) -> Result<DiscreteSolution> {
    require_constant(p)?;
    let rule = QuadratureRule::new(order)?;
    let (n, q) = (p.grid.steps(), p.model.dim_noise());
    check_budget(order.pow(q as u32), n)?;
    let zero = p.driver.is_zero();
    let mut ys = vec![p.terminal_fn()];
    let mut zs = Vec::with_capacity(n);
    for i in (0..n).rev() {
        let tr = GaussianTransition::new(p.model, p.grid.dt(i), &rule).map_err(Error::at(i))?;
        let next = ys.last().expect("terminal").clone();
        let (t, dt) = (p.grid.t(i), p.grid.dt(i));
        let f = p.driver.function();
        let step = memo_vec(move |x| {
            let mut xp = x.to_vec();
            let mut vals = Vec::with_capacity(tr.len());
            let mut out = vec![0.0; 1 + q];
            for k in 0..tr.len() {
                let (w, shift, dw) = tr.node(k);
                for r in 0..x.len() {
                    xp[r] = x[r] + shift[r];
                }
                let v = next.eval(&xp);
                vals.push(v);
                out[0] += w * v;
                for c in 0..q {
                    out[1 + c] += w * v * dw[c];
                }
            }
            for o in &mut out[1..] {
                *o /= dt;
            }
            if !zero {
                let z = out[1..].to_vec();
                let drv: f64 = (0..tr.len()).map(|k| tr.node(k).0 * f(t, x, vals[k], &z)).sum();
                out[0] += dt * drv;
            }
            out
        });
        ys.push(component(&step, 0));
        zs.push((0..q).map(|c| component(&step, 1 + c)).collect());
    }
    ys.reverse();
    zs.reverse();
    Ok(p.solution(SchemeKind::Euler, ys, zs))
}

/// One `(A^j, B^j)` chain at the current level, with the coefficients it
/// carries into `ŷ_i` and `ẑ_i`.
struct ExactChain {
    j: usize,
    ab: VecFn,
}

pub(super) fn malliavin_exact(p: &Problem, order: usize, kernel: Vec<f64>) -> Result<DiscreteSolution> {
    require_constant(p)?;
    let rule = QuadratureRule::new(order)?;
    let (n, q) = (p.grid.steps(), p.model.dim_noise());
    check_budget(order.pow(q as u32), n)?;
    let zero = p.driver.is_zero();
    let horizon = p.grid.horizon();
    let kernel = Arc::new(kernel);
    let mut ys: Vec<StateFunction> = vec![StateFunction::Constant(0.0); n + 1];
    ys[n] = p.terminal_fn();
    let mut zs: Vec<Vec<StateFunction>> = Vec::with_capacity(n);
    let mut chains: Vec<ExactChain> = Vec::new();
    // g at the level just above the current index.
    let mut g_above = p.terminal_fn();
    for i in (0..n).rev() {
        let tr = Arc::new(GaussianTransition::new(p.model, p.grid.dt(i), &rule).map_err(Error::at(i))?);
        let mut next_chains = Vec::with_capacity(chains.len() + 1);
        if i + 1 == n || !zero {
            let (g, tr) = (g_above.clone(), tr.clone());
            let ab = memo_vec(move |x| {
                let mut xp = x.to_vec();
                let mut out = vec![0.0; 1 + q];
                for k in 0..tr.len() {
                    let (w, shift, dw) = tr.node(k);
                    for r in 0..x.len() {
                        xp[r] = x[r] + shift[r];
                    }
                    let v = w * g.eval(&xp);
                    out[0] += v;
                    for c in 0..q {
                        out[1 + c] += v * dw[c];
                    }
                }
                out
            });
            next_chains.push(ExactChain { j: i + 1, ab });
        }
        for ch in chains.drain(..) {
            let (prev, tr) = (ch.ab, tr.clone());
            let ab = memo_vec(move |x| {
                let mut xp = x.to_vec();
                let mut out = vec![0.0; 1 + q];
                for k in 0..tr.len() {
                    let (w, shift, dw) = tr.node(k);
                    for r in 0..x.len() {
                        xp[r] = x[r] + shift[r];
                    }
                    let v = prev(&xp);
                    out[0] += w * v[0];
                    for c in 0..q {
                        out[1 + c] += w * (v[1 + c] + v[0] * dw[c]);
                    }
                }
                out
            });
            next_chains.push(ExactChain { j: ch.j, ab });
        }
        chains = next_chains;

        let ti = p.grid.t(i);
        let coeffs: Vec<(VecFn, f64, f64)> = chains
            .iter()
            .map(|ch| {
                if ch.j == n {
                    (ch.ab.clone(), 1.0, 1.0 / (horizon - ti))
                } else {
                    let dj = p.grid.dt(ch.j);
                    (ch.ab.clone(), dj, dj / (p.grid.t(ch.j) - ti))
                }
            })
            .collect();
        let coeffs = Arc::new(coeffs);
        let z_all = {
            let (coeffs, kernel) = (coeffs.clone(), kernel.clone());
            memo_vec(move |x| {
                let mut bs = vec![0.0; q];
                for (ab, _, bc) in coeffs.iter() {
                    let v = ab(x);
                    for r in 0..q {
                        bs[r] += bc * v[1 + r];
                    }
                }
                (0..q)
                    .map(|c| (0..q).map(|r| bs[r] * kernel[r * q + c]).sum())
                    .collect()
            })
        };
        let g_i = if zero {
            StateFunction::Constant(0.0)
        } else {
            let (f, y_next, z_all, tr) = (p.driver.function(), ys[i + 1].clone(), z_all.clone(), tr.clone());
            let g = memo_vec(move |x| {
                let z = z_all(x);
                let mut xp = x.to_vec();
                let mut s = 0.0;
                for k in 0..tr.len() {
                    let (w, shift, _) = tr.node(k);
                    for r in 0..x.len() {
                        xp[r] = x[r] + shift[r];
                    }
                    s += w * f(ti, x, y_next.eval(&xp), &z);
                }
                vec![s]
            });
            component(&g, 0)
        };
        let y_i = {
            let (coeffs, g, dt) = (coeffs.clone(), g_i.clone(), p.grid.dt(i));
            let y = memo_vec(move |x| {
                let a: f64 = coeffs.iter().map(|(ab, ac, _)| ac * ab(x)[0]).sum();
                vec![a + dt * g.eval(x)]
            });
            component(&y, 0)
        };
        ys[i] = y_i;
        zs.push((0..q).map(|c| component(&z_all, c)).collect());
        g_above = g_i;
    }
    zs.reverse();
    Ok(p.solution(SchemeKind::Malliavin, ys, zs))
}

/// Shared data for grid mode.
struct GridSetup {
    x0: f64,
    drift: f64,
    scale: f64,
    direction: Vec<f64>,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GridSetup {
    fn new(p: &Problem, order: usize) -> Result<Self> {
        require_constant(p)?;
        if p.model.dim_state() != 1 {
            return Err(Error::UnsupportedCombination(
                "grid-mode quadrature needs a one-dimensional state".into(),
            ));
        }
        let (b, sigma) = p.model.constant_parts()?;
        let q = p.model.dim_noise();
        let scale = (0..q).map(|c| sigma[(0, c)].powi(2)).sum::<f64>().sqrt();
        let rule = QuadratureRule::new(order)?;
        Ok(Self {
            x0: p.model.x0()[0],
            drift: b[0],
            scale,
            direction: (0..q).map(|c| sigma[(0, c)] / scale).collect(),
            nodes: rule.nodes().to_vec(),
            weights: rule.weights().to_vec(),
        })
    }

    /// `(origin, spacing, count)` of the state grid at index `i`.
    fn layout(&self, p: &Problem, spec: &StateGrid, i: usize) -> Result<(f64, f64, usize)> {
        if !(spec.half_width > 0.0 && spec.max_spacing > 0.0 && spec.points_per_sd > 0.0 && spec.max_points >= 4) {
            return Err(invalid("state grid parameters must be positive with at least 4 points"));
        }
        let horizon = p.grid.horizon();
        let half = spec.half_width * self.scale * horizon.sqrt();
        let local = self.scale * p.grid.time_to_go(i).sqrt() / spec.points_per_sd;
        let h = spec.max_spacing.min(local);
        let count = (((2.0 * half / h).ceil() as usize) + 1).clamp(4, spec.max_points);
        let spacing = 2.0 * half / (count - 1) as f64;
        Ok((self.x0 + self.drift * p.grid.t(i) - half, spacing, count))
    }

    /// `(E g(X'), E g(X') ξ)` with `X' = x + bΔ + |σ|√Δ ξ`.
    fn moments(&self, x: f64, dt: f64, g: impl Fn(f64) -> f64) -> (f64, f64) {
        let (m, s) = (x + self.drift * dt, self.scale * dt.sqrt());
        let mut e0 = 0.0;
        let mut e1 = 0.0;
        for (xi, w) in self.nodes.iter().zip(&self.weights) {
            let v = w * g(m + s * xi);
            e0 += v;
            e1 += v * xi;
        }
        (e0, e1)
    }

    fn terminal_moments(&self, p: &Problem, x: f64, dt: f64) -> (f64, f64) {
        let (m, s) = (x + self.drift * dt, self.scale * dt.sqrt());
        p.terminal
            .gaussian_moments(m, s)
            .unwrap_or_else(|| self.moments(x, dt, |v| p.terminal.eval(&[v])))
    }

    /// `E[f(t, x, V, z)]` where `V` has mean `mean_v` and node values `v(x')`.
    #[allow(clippy::too_many_arguments)]
    fn driver_mean(&self, driver: &Driver, t: f64, x: f64, dt: f64, z: &[f64], mean_v: f64, v: impl Fn(f64) -> f64) -> f64 {
        match driver.kind() {
            DriverKind::Zero => 0.0,
            DriverKind::Affine { a, b, c } => a * mean_v + b.iter().zip(z).map(|(u, w)| u * w).sum::<f64>() + c,
            _ => {
                let f = driver.function();
                self.moments(x, dt, |xp| f(t, &[x], v(xp), z)).0
            }
        }
    }
}

fn tabulate(origin: f64, spacing: f64, count: usize, width: usize, f: impl Fn(f64) -> Vec<f64> + Sync) -> Result<Vec<Vec<f64>>> {
    let rows: Vec<Vec<f64>> = (0..count)
        .into_par_iter()
        .map(|k| f(origin + k as f64 * spacing))
        .collect();
    let mut cols = vec![Vec::with_capacity(count); width];
    for row in rows {
        for (c, v) in row.into_iter().enumerate() {
            if !v.is_finite() {
                return Err(invalid("non-finite value in a tabulated conditional expectation"));
            }
            cols[c].push(v);
        }
    }
    Ok(cols)
}

fn scaled(g: Arc<GridFunction>, factor: f64) -> StateFunction {
    StateFunction::from_fn(move |x| factor * g.eval(x[0]))
}

pub(super) fn euler_grid(p: &Problem, order: usize, spec: &StateGrid) -> Result<DiscreteSolution> {
    let setup = GridSetup::new(p, order)?;
    let (n, q) = (p.grid.steps(), p.model.dim_noise());
    let mut ys = vec![p.terminal_fn()];
    let mut zs = Vec::with_capacity(n);
    let mut next: Option<Arc<GridFunction>> = None;
    for i in (0..n).rev() {
        let (origin, spacing, count) = setup.layout(p, spec, i).map_err(Error::at(i))?;
        let (t, dt) = (p.grid.t(i), p.grid.dt(i));
        let sq = dt.sqrt();
        let setup_ref = &setup;
        let next_ref = next.as_deref();
        let cols = tabulate(origin, spacing, count, 2, |x| {
            let value = |xp: f64| match next_ref {
                Some(g) => g.eval(xp),
                None => p.terminal.eval(&[xp]),
            };
            let (e0, e1) = match next_ref {
                Some(g) => setup_ref.moments(x, dt, |xp| g.eval(xp)),
                None => setup_ref.terminal_moments(p, x, dt),
            };
            let zeta = e1 / sq;
            let z: Vec<f64> = setup_ref.direction.iter().map(|u| zeta * u).collect();
            let drv = setup_ref.driver_mean(p.driver, t, x, dt, &z, e0, value);
            vec![e0 + dt * drv, zeta]
        })
        .map_err(Error::at(i))?;
        let mut cols = cols.into_iter();
        let y = Arc::new(GridFunction::new(origin, spacing, cols.next().expect("y"))?);
        let zeta = Arc::new(GridFunction::new(origin, spacing, cols.next().expect("z"))?);
        ys.push(StateFunction::Grid(y.clone()));
        zs.push((0..q).map(|c| scaled(zeta.clone(), setup.direction[c])).collect());
        next = Some(y);
    }
    ys.reverse();
    zs.reverse();
    Ok(p.solution(SchemeKind::Euler, ys, zs))
}

/// `(A^j, B^j / u)` tabulated on the current level's grid; `b = None` is zero.
struct GridChain {
    j: usize,
    a: Arc<GridFunction>,
    b: Option<Arc<GridFunction>>,
}

pub(super) fn malliavin_grid(p: &Problem, order: usize, spec: &StateGrid, kernel: Vec<f64>) -> Result<DiscreteSolution> {
    let setup = GridSetup::new(p, order)?;
    let (n, q) = (p.grid.steps(), p.model.dim_noise());
    let zero = p.driver.is_zero();
    let horizon = p.grid.horizon();
    // ẑ_i = β(x) u A.
    let z_dir: Vec<f64> = (0..q)
        .map(|c| (0..q).map(|r| setup.direction[r] * kernel[r * q + c]).sum())
        .collect();
    let mut ys: Vec<StateFunction> = vec![StateFunction::Constant(0.0); n + 1];
    ys[n] = p.terminal_fn();
    let mut zs = Vec::with_capacity(n);
    let mut chains: Vec<GridChain> = Vec::new();
    let mut y_above: Option<Arc<GridFunction>> = None;
    for i in (0..n).rev() {
        let (origin, spacing, count) = setup.layout(p, spec, i).map_err(Error::at(i))?;
        let (ti, dt) = (p.grid.t(i), p.grid.dt(i));
        let sq = dt.sqrt();
        let order_j: Vec<usize> = std::iter::once(n)
            .filter(|_| i + 1 == n)
            .chain(chains.iter().map(|c| c.j))
            .collect();
        let coeffs: Vec<(f64, f64)> = order_j
            .iter()
            .map(|&j| {
                if j == n {
                    (1.0, 1.0 / (horizon - ti))
                } else {
                    let dj = p.grid.dt(j);
                    (dj, dj / (p.grid.t(j) - ti))
                }
            })
            .collect();
        let width = 2 * order_j.len() + 3;
        let (setup_ref, chains_ref, coeffs_ref, z_dir_ref) = (&setup, &chains, &coeffs, &z_dir);
        let y_above_ref = y_above.as_deref();
        let cols = tabulate(origin, spacing, count, width, |x| {
            let c = coeffs_ref.len();
            let mut a = Vec::with_capacity(c);
            let mut b = Vec::with_capacity(c);
            if i + 1 == n {
                let (e0, e1) = setup_ref.terminal_moments(p, x, dt);
                a.push(e0);
                b.push(sq * e1);
            }
            for ch in chains_ref {
                let (pa0, pa1) = setup_ref.moments(x, dt, |xp| ch.a.eval(xp));
                let pb0 = ch.b.as_ref().map_or(0.0, |bf| setup_ref.moments(x, dt, |xp| bf.eval(xp)).0);
                a.push(pa0);
                b.push(pb0 + sq * pa1);
            }
            let beta: f64 = coeffs_ref.iter().zip(&b).map(|((_, bc), v)| bc * v).sum();
            let z: Vec<f64> = z_dir_ref.iter().map(|u| beta * u).collect();
            let g = if zero {
                0.0
            } else {
                let (mean_v, _) = match y_above_ref {
                    Some(yg) => setup_ref.moments(x, dt, |xp| yg.eval(xp)),
                    None => setup_ref.terminal_moments(p, x, dt),
                };
                setup_ref.driver_mean(p.driver, ti, x, dt, &z, mean_v, |xp| match y_above_ref {
                    Some(yg) => yg.eval(xp),
                    None => p.terminal.eval(&[xp]),
                })
            };
            let y = coeffs_ref.iter().zip(&a).map(|((ac, _), v)| ac * v).sum::<f64>() + dt * g;
            let mut row = a;
            row.extend(b);
            row.extend([beta, g, y]);
            row
        })
        .map_err(Error::at(i))?;
        let k = order_j.len();
        let mut cols = cols.into_iter();
        let a_cols: Vec<Vec<f64>> = cols.by_ref().take(k).collect();
        let b_cols: Vec<Vec<f64>> = cols.by_ref().take(k).collect();
        let beta = Arc::new(GridFunction::new(origin, spacing, cols.next().expect("beta"))?);
        let g = cols.next().expect("g");
        let y = Arc::new(GridFunction::new(origin, spacing, cols.next().expect("y"))?);
        let mut next_chains = Vec::with_capacity(k + 1);
        for ((j, av), bv) in order_j.iter().zip(a_cols).zip(b_cols) {
            next_chains.push(GridChain {
                j: *j,
                a: Arc::new(GridFunction::new(origin, spacing, av)?),
                b: Some(Arc::new(GridFunction::new(origin, spacing, bv)?)),
            });
        }
        if !zero {
            next_chains.push(GridChain {
                j: i,
                a: Arc::new(GridFunction::new(origin, spacing, g)?),
                b: None,
            });
        }
        chains = next_chains;
        ys[i] = StateFunction::Grid(y.clone());
        zs.push((0..q).map(|c| scaled(beta.clone(), z_dir[c])).collect());
        y_above = Some(y);
    }
    zs.reverse();
    Ok(p.solution(SchemeKind::Malliavin, ys, zs))
}
