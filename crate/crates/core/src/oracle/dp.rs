//! Brute-force evaluation of the discrete schemes on the full
//! non-recombining quadrature tree.
//!
//! Level `k` holds `B^k` nodes (`B = n_q^q`), child `l` of node `ν` being
//! `ν B + l`. The Malliavin variant enumerates every descendant path of a
//! node and sums the weights edge by edge, so no conditional-expectation
//! identity beyond the tree itself is used.

use serde::Serialize;

use crate::condexp::QuadratureRule;
use crate::error::{Error, Result};
use crate::grids::TimeGrid;
use crate::models::{Driver, SdeModel, TerminalCondition};
use crate::paths::WeightVariant;
use crate::schemes::SchemeKind;

pub const DEFAULT_TREE_ORDER: usize = 8;
const MAX_STEPS: usize = 8;
const MAX_LEAVES: f64 = 2e8;

#[derive(Debug, Clone, Serialize)]
pub struct TreeLevel {
    pub states: Vec<f64>,
    pub y: Vec<f64>,
    /// `q` values per node; empty at level `N`.
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TreeSolution {
    pub scheme: SchemeKind,
    pub order: usize,
    pub levels: Vec<TreeLevel>,
}

impl TreeSolution {
    pub fn root_y(&self) -> f64 {
        self.levels[0].y[0]
    }

    pub fn root_z(&self) -> &[f64] {
        &self.levels[0].z
    }
}

struct Tree {
    branching: usize,
    q: usize,
    weights: Vec<f64>,
    /// Standard normal node vectors, `branching x q`.
    xi: Vec<f64>,
    states: Vec<Vec<f64>>,
}

impl Tree {
    fn increment(&self, grid: &TimeGrid, k: usize, l: usize) -> impl Iterator<Item = f64> + '_ {
        let s = grid.dt(k).sqrt();
        self.xi[l * self.q..(l + 1) * self.q].iter().map(move |v| s * v)
    }
}

fn build_tree(model: &SdeModel, grid: &TimeGrid, order: usize) -> Result<Tree> {
    let (b, sigma) = model.constant_parts()?;
    let q = model.dim_noise();
    let rule = QuadratureRule::new(order)?;
    let branching = order.pow(q as u32);
    let mut weights = Vec::with_capacity(branching);
    let mut xi = Vec::with_capacity(branching * q);
    for l in 0..branching {
        let mut rest = l;
        let mut w = 1.0;
        let mut digits = vec![0usize; q];
        for c in (0..q).rev() {
            digits[c] = rest % order;
            rest /= order;
        }
        for &dg in &digits {
            w *= rule.weights()[dg];
            xi.push(rule.nodes()[dg]);
        }
        weights.push(w);
    }
    let n = grid.steps();
    let mut states = vec![vec![model.x0()[0]]];
    for k in 0..n {
        let dt = grid.dt(k);
        let parent = &states[k];
        let mut next = Vec::with_capacity(parent.len() * branching);
        for &x in parent {
            for l in 0..branching {
                let noise: f64 = (0..q).map(|c| sigma[(0, c)] * xi[l * q + c]).sum();
                next.push(x + b[0] * dt + dt.sqrt() * noise);
            }
        }
        states.push(next);
    }
    Ok(Tree {
        branching,
        q,
        weights,
        xi,
        states,
    })
}

/// `P = σ^T σ / |σ|^2` (one-dimensional state) or `σ` for the printed variant.
fn kernel(model: &SdeModel, variant: WeightVariant) -> Result<Vec<f64>> {
    let (_, sigma) = model.constant_parts()?;
    let q = model.dim_noise();
    let s: Vec<f64> = (0..q).map(|c| sigma[(0, c)]).collect();
    match variant {
        WeightVariant::Consistent => {
            let n2: f64 = s.iter().map(|v| v * v).sum();
            Ok((0..q * q).map(|e| s[e / q] * s[e % q] / n2).collect())
        }
        WeightVariant::Printed => {
            if q != 1 {
                return Err(Error::UnsupportedCombination(
                    "printed weight variant requires d = q".into(),
                ));
            }
            Ok(s)
        }
    }
}

/// Evaluates the Euler or Malliavin-weights equations exactly on the
/// quadrature tree of order `order` (default [`DEFAULT_TREE_ORDER`]).
pub fn brute_force_dp(
    model: &SdeModel,
    driver: &Driver,
    terminal: &TerminalCondition,
    grid: &TimeGrid,
    scheme: SchemeKind,
    order: usize,
) -> Result<TreeSolution> {
    brute_force_dp_with(model, driver, terminal, grid, scheme, order, WeightVariant::Consistent)
}

pub fn brute_force_dp_with(
    model: &SdeModel,
    driver: &Driver,
    terminal: &TerminalCondition,
    grid: &TimeGrid,
    scheme: SchemeKind,
    order: usize,
    variant: WeightVariant,
) -> Result<TreeSolution> {
    if model.dim_state() != 1 {
        return Err(Error::UnsupportedCombination("the tree oracle needs d = 1".into()));
    }
    let n = grid.steps();
    let leaves = (order as f64).powi((n * model.dim_noise()) as i32);
    if n > MAX_STEPS || leaves > MAX_LEAVES {
        return Err(Error::TooLarge(format!(
            "tree with N = {n} and order {order} has {leaves:.3e} leaves"
        )));
    }
    let tree = build_tree(model, grid, order)?;
    let levels = match scheme {
        SchemeKind::Euler => euler(&tree, driver, terminal, grid),
        SchemeKind::Malliavin => malliavin(&tree, driver, terminal, grid, &kernel(model, variant)?)?,
    };
    Ok(TreeSolution {
        scheme,
        order,
        levels,
    })
}

fn euler(tree: &Tree, driver: &Driver, terminal: &TerminalCondition, grid: &TimeGrid) -> Vec<TreeLevel> {
    let n = grid.steps();
    let (bq, q) = (tree.branching, tree.q);
    let mut levels: Vec<TreeLevel> = Vec::with_capacity(n + 1);
    let leaf_y: Vec<f64> = tree.states[n].iter().map(|&x| terminal.eval(&[x])).collect();
    levels.push(TreeLevel {
        states: tree.states[n].clone(),
        y: leaf_y,
        z: Vec::new(),
    });
    for k in (0..n).rev() {
        let (t, dt) = (grid.t(k), grid.dt(k));
        let below = &levels.last().expect("level").y;
        let mut y = Vec::with_capacity(tree.states[k].len());
        let mut z = Vec::with_capacity(tree.states[k].len() * q);
        for (nu, &x) in tree.states[k].iter().enumerate() {
            let mut zn = vec![0.0; q];
            for l in 0..bq {
                let v = below[nu * bq + l];
                for (zc, inc) in zn.iter_mut().zip(tree.increment(grid, k, l)) {
                    *zc += tree.weights[l] * v * inc / dt;
                }
            }
            let mut yn = 0.0;
            for l in 0..bq {
                let v = below[nu * bq + l];
                yn += tree.weights[l] * (v + driver.eval(t, &[x], v, &zn) * dt);
            }
            y.push(yn);
            z.extend(zn);
        }
        levels.push(TreeLevel {
            states: tree.states[k].clone(),
            y,
            z,
        });
    }
    levels.reverse();
    levels
}

/// Per-edge driver values `F_j` for edges from level `j` to `j + 1`,
/// indexed by the child; filled as the backward sweep reaches `j`.
struct Sweep<'a> {
    tree: &'a Tree,
    grid: &'a TimeGrid,
    kernel: &'a [f64],
    phi: Vec<f64>,
    f_edges: Vec<Vec<f64>>,
}

impl Sweep<'_> {
    /// Accumulates over all descendant paths of node `nu` at level `i`:
    /// `(E[Φ + Σ_{j>=from} F_j Δ_j], E[Φ H^i_N + Σ_{j>i} F_j H^i_j Δ_j])`.
    fn expectations(&self, i: usize, nu: usize, y_from: usize) -> (f64, Vec<f64>) {
        let q = self.tree.q;
        let mut acc_y = 0.0;
        let mut acc_z = vec![0.0; q];
        let mut wsum = vec![0.0; q];
        self.descend(i, i, nu, 1.0, 0.0, y_from, &mut wsum, &mut acc_y, &mut acc_z);
        (acc_y, acc_z)
    }

    #[allow(clippy::too_many_arguments)]
    fn descend(
        &self,
        i: usize,
        k: usize,
        nu: usize,
        prob: f64,
        path_f: f64,
        y_from: usize,
        wsum: &mut Vec<f64>,
        acc_y: &mut f64,
        acc_z: &mut [f64],
    ) {
        let n = self.grid.steps();
        let q = self.tree.q;
        if k == n {
            let phi = self.phi[nu];
            *acc_y += prob * (phi + path_f);
            let g = self.grid.t(n) - self.grid.t(i);
            for c in 0..q {
                acc_z[c] += prob * phi * wsum[c] / g;
            }
            return;
        }
        let bq = self.tree.branching;
        let dt = self.grid.dt(k);
        for l in 0..bq {
            let child = nu * bq + l;
            let p = prob * self.tree.weights[l];
            // H^i_k is built from increments i..k-1, i.e. before this edge.
            let f_term = if k >= y_from || k > i { self.f_edges[k][child] * dt } else { 0.0 };
            if k > i {
                let g = self.grid.t(k) - self.grid.t(i);
                for c in 0..q {
                    acc_z[c] += p * f_term * wsum[c] / g;
                }
            }
            let saved = wsum.clone();
            let inc: Vec<f64> = self.tree.increment(self.grid, k, l).collect();
            for c in 0..q {
                wsum[c] += (0..q).map(|r| inc[r] * self.kernel[r * q + c]).sum::<f64>();
            }
            let add_y = if k >= y_from { f_term } else { 0.0 };
            self.descend(i, k + 1, child, p, path_f + add_y, y_from, wsum, acc_y, acc_z);
            *wsum = saved;
        }
    }
}

fn malliavin(
    tree: &Tree,
    driver: &Driver,
    terminal: &TerminalCondition,
    grid: &TimeGrid,
    kernel: &[f64],
) -> Result<Vec<TreeLevel>> {
    let n = grid.steps();
    let (bq, q) = (tree.branching, tree.q);
    let phi: Vec<f64> = tree.states[n].iter().map(|&x| terminal.eval(&[x])).collect();
    let mut sweep = Sweep {
        tree,
        grid,
        kernel,
        phi: phi.clone(),
        f_edges: vec![Vec::new(); n],
    };
    let mut ys: Vec<Vec<f64>> = vec![Vec::new(); n + 1];
    ys[n] = phi;
    let mut zs: Vec<Vec<f64>> = vec![Vec::new(); n];
    for i in (0..n).rev() {
        let t = grid.t(i);
        let count = tree.states[i].len();
        let mut z = Vec::with_capacity(count * q);
        for nu in 0..count {
            // Driver sums start above i for Z; the Y pass below adds F_i.
            let (_, zn) = sweep.expectations(i, nu, n);
            z.extend(zn);
        }
        let mut f_edge = vec![0.0; count * bq];
        for nu in 0..count {
            let x = tree.states[i][nu];
            let zn = &z[nu * q..(nu + 1) * q];
            for l in 0..bq {
                let child = nu * bq + l;
                f_edge[child] = driver.eval(t, &[x], ys[i + 1][child], zn);
            }
        }
        if f_edge.iter().any(|v| !v.is_finite()) {
            return Err(Error::AtIndex {
                index: i,
                source: Box::new(Error::InvalidParameter("non-finite driver value on the tree".into())),
            });
        }
        sweep.f_edges[i] = f_edge;
        let y: Vec<f64> = (0..count).map(|nu| sweep.expectations(i, nu, i).0).collect();
        ys[i] = y;
        zs[i] = z;
    }
    let mut levels = Vec::with_capacity(n + 1);
    for (k, y) in ys.into_iter().enumerate() {
        levels.push(TreeLevel {
            states: tree.states[k].clone(),
            y,
            z: zs.get(k).cloned().unwrap_or_default(),
        });
    }
    Ok(levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::make_grid;

    #[test]
    fn identity_root() {
        let model = SdeModel::brownian(0.3, 0.0, 1.0).unwrap();
        let grid = make_grid(1.0, 4, 0.6).unwrap();
        let zero = Driver::zero(1.0).unwrap();
        for scheme in [SchemeKind::Euler, SchemeKind::Malliavin] {
            let s = brute_force_dp(&model, &zero, &TerminalCondition::identity(), &grid, scheme, 6).unwrap();
            assert!((s.root_y() - 0.3).abs() < 1e-12);
            assert!((s.root_z()[0] - 1.0).abs() < 1e-12, "{scheme:?} {}", s.root_z()[0]);
        }
    }

    #[test]
    fn schemes_agree_at_zero_driver() {
        let model = SdeModel::brownian(0.0, 0.1, 0.8).unwrap();
        let grid = make_grid(1.0, 4, 0.5).unwrap();
        let zero = Driver::zero(1.0).unwrap();
        let term = TerminalCondition::capped_call(0.0, 1.0).unwrap();
        let e = brute_force_dp(&model, &zero, &term, &grid, SchemeKind::Euler, 5).unwrap();
        let m = brute_force_dp(&model, &zero, &term, &grid, SchemeKind::Malliavin, 5).unwrap();
        for (a, b) in e.levels.iter().zip(&m.levels) {
            for (u, v) in a.y.iter().zip(&b.y) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn budget() {
        let model = SdeModel::brownian(0.0, 0.0, 1.0).unwrap();
        let grid = make_grid(1.0, 9, 1.0).unwrap();
        let zero = Driver::zero(1.0).unwrap();
        assert!(matches!(
            brute_force_dp(&model, &zero, &TerminalCondition::identity(), &grid, SchemeKind::Euler, 2),
            Err(Error::TooLarge(_))
        ));
    }
}
