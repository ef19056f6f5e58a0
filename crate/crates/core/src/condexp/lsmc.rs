use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum BasisKind {
    /// All monomials of total degree `<= degree` in the standardized state.
    GlobalPolynomial { degree: usize },
    /// Intercept and slope on each cell of an equal-mass product partition.
    LocalAffine { cells_per_dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Ridge {
    /// `1e-10 * trace(A^T A) / p`.
    Default,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub kind: BasisKind,
    pub ridge: Ridge,
}

impl RegressionBasis {
    pub fn polynomial(degree: usize) -> Self {
        Self {
            kind: BasisKind::GlobalPolynomial { degree },
            ridge: Ridge::Default,
        }
    }

    pub fn local_affine(cells_per_dim: usize) -> Self {
        Self {
            kind: BasisKind::LocalAffine { cells_per_dim },
            ridge: Ridge::Default,
        }
    }

    pub fn with_ridge(mut self, ridge: Ridge) -> Self {
        self.ridge = ridge;
        self
    }

    /// Number of basis functions in dimension `d`.
    pub fn size(&self, d: usize) -> usize {
        match self.kind {
            BasisKind::GlobalPolynomial { degree } => monomials(d, degree).len(),
            BasisKind::LocalAffine { cells_per_dim } => cells_per_dim.pow(d as u32) * (d + 1),
        }
    }
}

fn monomials(d: usize, degree: usize) -> Vec<Vec<u32>> {
    fn rec(d: usize, left: usize, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == d {
            out.push(prefix.clone());
            return;
        }
        for e in 0..=left {
            prefix.push(e as u32);
            rec(d, left - e, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(d, degree, &mut Vec::new(), &mut out);
    out.sort_by_key(|e| e.iter().sum::<u32>());
    out
}

#[derive(Debug, Clone)]
struct Block {
    coef: Vec<f64>,
    r: DMatrix<f64>,
    residual_sd: f64,
}

/// Least-squares fit of a scalar target on a basis of the state.
#[derive(Debug, Clone)]
pub struct RegressionFit {
    basis: RegressionBasis,
    dim: usize,
    center: Vec<f64>,
    scale: Vec<f64>,
    exponents: Vec<Vec<u32>>,
    edges: Vec<Vec<f64>>,
    blocks: Vec<Block>,
    intercept_only: bool,
    rows: usize,
}

impl RegressionFit {
    pub fn basis(&self) -> &RegressionBasis {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Coefficients of each block (one block for the global basis).
    pub fn coefficients(&self) -> Vec<&[f64]> {
        self.blocks.iter().map(|b| b.coef.as_slice()).collect()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let (b, phi) = self.features(x);
        dot(&self.blocks[b].coef, &phi)
    }

    /// Standard error of the fitted value at `x` under homoscedastic noise.
    pub fn prediction_se(&self, x: &[f64]) -> f64 {
        let (b, phi) = self.features(x);
        let block = &self.blocks[b];
        let v = block
            .r
            .transpose()
            .solve_lower_triangular(&DVector::from_vec(phi))
            .map(|v| v.norm())
            .unwrap_or(f64::INFINITY);
        block.residual_sd * v
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.center.iter().zip(&self.scale))
            .map(|(v, (c, s))| (v - c) / s)
            .collect()
    }

    fn features(&self, x: &[f64]) -> (usize, Vec<f64>) {
        if self.intercept_only {
            return (0, vec![1.0]);
        }
        let u = self.standardize(x);
        match self.basis.kind {
            BasisKind::GlobalPolynomial { .. } => (0, poly_features(&self.exponents, &u)),
            BasisKind::LocalAffine { .. } => {
                let cell = cell_index(&self.edges, x);
                let mut phi = Vec::with_capacity(u.len() + 1);
                phi.push(1.0);
                phi.extend_from_slice(&u);
                (cell, phi)
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn poly_features(exponents: &[Vec<u32>], u: &[f64]) -> Vec<f64> {
    exponents
        .iter()
        .map(|e| e.iter().zip(u).map(|(&k, &v)| v.powi(k as i32)).product())
        .collect()
}

fn cell_index(edges: &[Vec<f64>], x: &[f64]) -> usize {
    let mut idx = 0;
    for (dim_edges, &v) in edges.iter().zip(x) {
        let c = dim_edges.partition_point(|&e| e <= v);
        idx = idx * (dim_edges.len() + 1) + c;
    }
    idx
}

/// Fits every target in `targets` on the same design built from `points`
/// (row-major, `dim` columns).
pub fn fit_regression(
    points: &[f64],
    dim: usize,
    targets: &[&[f64]],
    basis: &RegressionBasis,
) -> Result<Vec<RegressionFit>> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(invalid("state array does not match the dimension"));
    }
    let m = points.len() / dim;
    if targets.iter().any(|t| t.len() != m) {
        return Err(invalid("target length differs from the number of paths"));
    }
    if let Ridge::Fixed(l) = basis.ridge {
        if !(l >= 0.0) {
            return Err(invalid("ridge parameter must be non-negative"));
        }
    }
    let p_full = basis.size(dim);
    if m < p_full {
        return Err(Error::RankDeficientDesign {
            rows: m,
            columns: p_full,
        });
    }

    let mut center = vec![0.0; dim];
    let mut scale = vec![0.0; dim];
    for c in 0..dim {
        let col = points.iter().skip(c).step_by(dim);
        let mean = col.clone().sum::<f64>() / m as f64;
        let var = col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        center[c] = mean;
        scale[c] = var.sqrt();
    }
    let degenerate = scale.iter().all(|&s| s <= 1e-300);
    for s in scale.iter_mut() {
        if *s <= 1e-300 {
            *s = 1.0;
        }
    }

    let base = RegressionFit {
        basis: basis.clone(),
        dim,
        center,
        scale,
        exponents: Vec::new(),
        edges: Vec::new(),
        blocks: Vec::new(),
        intercept_only: degenerate,
        rows: m,
    };

    if degenerate {
        let ones = DMatrix::from_element(m, 1, 1.0);
        let rows: Vec<usize> = (0..m).collect();
        let blocks = solve_block(&ones, &rows, targets, basis.ridge)?;
        return Ok(blocks
            .into_iter()
            .map(|b| RegressionFit {
                blocks: vec![b],
                ..base.clone()
            })
            .collect());
    }

    match basis.kind {
        BasisKind::GlobalPolynomial { degree } => {
            let exponents = monomials(dim, degree);
            let p = exponents.len();
            let mut rowmajor = vec![0.0; m * p];
            rowmajor
                .par_chunks_mut(p)
                .zip(points.par_chunks(dim))
                .for_each(|(row, x)| {
                    let u: Vec<f64> = x
                        .iter()
                        .zip(base.center.iter().zip(&base.scale))
                        .map(|(v, (c, s))| (v - c) / s)
                        .collect();
                    row.copy_from_slice(&poly_features(&exponents, &u));
                });
            let a = DMatrix::from_row_slice(m, p, &rowmajor);
            let rows: Vec<usize> = (0..m).collect();
            let blocks = solve_block(&a, &rows, targets, basis.ridge)?;
            Ok(blocks
                .into_iter()
                .map(|b| RegressionFit {
                    exponents: exponents.clone(),
                    blocks: vec![b],
                    ..base.clone()
                })
                .collect())
        }
        BasisKind::LocalAffine { cells_per_dim } => {
            if cells_per_dim == 0 {
                return Err(invalid("local-affine basis needs at least one cell"));
            }
            let edges: Vec<Vec<f64>> = (0..dim)
                .map(|c| {
                    let mut col: Vec<f64> = points.iter().skip(c).step_by(dim).copied().collect();
                    col.sort_by(f64::total_cmp);
                    (1..cells_per_dim)
                        .map(|k| col[(k * m) / cells_per_dim])
                        .collect()
                })
                .collect();
            let n_cells = cells_per_dim.pow(dim as u32);
            let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_cells];
            for (r, x) in points.chunks(dim).enumerate() {
                members[cell_index(&edges, x)].push(r);
            }
            let mut per_target: Vec<Vec<Block>> = vec![Vec::with_capacity(n_cells); targets.len()];
            for rows in &members {
                if rows.len() < dim + 1 {
                    return Err(Error::RankDeficientDesign {
                        rows: rows.len(),
                        columns: dim + 1,
                    });
                }
                let mut a = DMatrix::zeros(rows.len(), dim + 1);
                for (r, &src) in rows.iter().enumerate() {
                    a[(r, 0)] = 1.0;
                    for c in 0..dim {
                        a[(r, c + 1)] = (points[src * dim + c] - base.center[c]) / base.scale[c];
                    }
                }
                let blocks = solve_block(&a, rows, targets, basis.ridge)?;
                for (t, b) in blocks.into_iter().enumerate() {
                    per_target[t].push(b);
                }
            }
            Ok(per_target
                .into_iter()
                .map(|blocks| RegressionFit {
                    edges: edges.clone(),
                    blocks,
                    ..base.clone()
                })
                .collect())
        }
    }
}

/// QR solve of `a` against the targets restricted to `rows`, with optional
/// ridge rows appended below the design.
fn solve_block(a: &DMatrix<f64>, rows: &[usize], targets: &[&[f64]], ridge: Ridge) -> Result<Vec<Block>> {
    let (n, p) = a.shape();
    let lambda = match ridge {
        Ridge::Default => 1e-10 * a.iter().map(|v| v * v).sum::<f64>() / p as f64,
        Ridge::Fixed(l) => l,
    };
    let aug = if lambda > 0.0 {
        let mut aug = DMatrix::zeros(n + p, p);
        aug.rows_mut(0, n).copy_from(a);
        for k in 0..p {
            aug[(n + k, k)] = lambda.sqrt();
        }
        aug
    } else {
        a.clone()
    };
    let total_rows = aug.nrows();
    let qr = aug.qr();
    let r = qr.r();
    let diag_max = (0..p).map(|k| r[(k, k)].abs()).fold(0.0, f64::max);
    let diag_min = (0..p).map(|k| r[(k, k)].abs()).fold(f64::INFINITY, f64::min);
    if !(diag_min > 1e-12 * diag_max) {
        return Err(Error::RankDeficientDesign { rows: n, columns: p });
    }
    let mut out = Vec::with_capacity(targets.len());
    for t in targets {
        let mut rhs = DVector::zeros(total_rows);
        for (k, &src) in rows.iter().enumerate() {
            rhs[k] = t[src];
        }
        qr.q_tr_mul(&mut rhs);
        let coef = r
            .solve_upper_triangular(&rhs.rows(0, p).into_owned())
            .ok_or(Error::RankDeficientDesign { rows: n, columns: p })?;
        let fitted = a * &coef;
        let rss: f64 = rows
            .iter()
            .enumerate()
            .map(|(k, &src)| (t[src] - fitted[k]).powi(2))
            .sum();
        let dof = n.saturating_sub(p).max(1);
        out.push(Block {
            coef: coef.iter().copied().collect(),
            r: r.clone(),
            residual_sd: (rss / dof as f64).sqrt(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn lcg_points(m: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..m)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
            })
            .collect()
    }

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(1, 3).len(), 4);
        assert_eq!(monomials(2, 2).len(), 6);
        assert_eq!(monomials(3, 1).len(), 4);
        assert_eq!(monomials(2, 0), vec![vec![0, 0]]);
    }

    #[test]
    fn constant_targets_are_reproduced() {
        let x = lcg_points(500, 3);
        let y = vec![2.5; 500];
        for basis in [RegressionBasis::polynomial(3), RegressionBasis::local_affine(4)] {
            let fit = fit_regression(&x, 1, &[&y], &basis.with_ridge(Ridge::Fixed(0.0))).unwrap();
            for v in [-1.9, 0.0, 0.7, 1.99] {
                assert_relative_eq!(fit[0].eval(&[v]), 2.5, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn residuals_are_orthogonal_to_the_basis() {
        let x = lcg_points(300, 9);
        let y: Vec<f64> = x.iter().map(|v| (3.0 * v).sin()).collect();
        let basis = RegressionBasis::polynomial(3).with_ridge(Ridge::Fixed(0.0));
        let fit = fit_regression(&x, 1, &[&y], &basis).unwrap().remove(0);
        for k in 0..4 {
            let s: f64 = x
                .iter()
                .zip(&y)
                .map(|(&v, &t)| (t - fit.eval(&[v])) * ((v - fit.center[0]) / fit.scale[0]).powi(k))
                .sum();
            assert!(s.abs() < 1e-9, "moment {k}: {s}");
        }
    }

    #[test]
    fn too_few_rows_and_singular_designs_fail() {
        let x = [0.0, 1.0, 2.0];
        let y = [1.0, 2.0, 3.0];
        assert!(matches!(
            fit_regression(&x, 1, &[&y], &RegressionBasis::polynomial(3)),
            Err(Error::RankDeficientDesign { rows: 3, columns: 4 })
        ));
        let x = [0.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        let y = [1.0; 6];
        let basis = RegressionBasis::polynomial(3).with_ridge(Ridge::Fixed(0.0));
        assert!(matches!(
            fit_regression(&x, 1, &[&y], &basis),
            Err(Error::RankDeficientDesign { .. })
        ));
        assert!(fit_regression(&x, 1, &[&y], &RegressionBasis::polynomial(3)).is_ok());
    }

    #[test]
    fn constant_state_gives_sample_mean() {
        let x = vec![0.3; 4];
        let y = [1.0, 2.0, 3.0, 6.0];
        let fit = fit_regression(&x, 1, &[&y], &RegressionBasis::polynomial(3))
            .unwrap()
            .remove(0);
        assert_relative_eq!(fit.eval(&[0.3]), 3.0, epsilon = 1e-9);
        let sd = (((4.0f64 + 1.0 + 0.0 + 9.0) / 3.0) as f64).sqrt();
        assert_relative_eq!(fit.prediction_se(&[0.3]), sd / 2.0, epsilon = 1e-6);
    }
}
