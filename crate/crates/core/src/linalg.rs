//! Row-major dense helpers for the tiny matrices on the path hot loops.

use nalgebra::DMatrix;

/// `out (r x c) = a (r x n) * b (n x c)`.
pub fn matmul(a: &[f64], b: &[f64], r: usize, n: usize, c: usize, out: &mut [f64]) {
    for i in 0..r {
        for j in 0..c {
            let mut s = 0.0;
            for k in 0..n {
                s += a[i * n + k] * b[k * c + j];
            }
            out[i * c + j] = s;
        }
    }
}

pub fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

/// Inverse of a square row-major matrix; `None` when numerically singular.
pub fn invert(a: &[f64], d: usize) -> Option<Vec<f64>> {
    match d {
        1 => {
            let v = a[0];
            (v.abs() > f64::MIN_POSITIVE && v.is_finite()).then(|| vec![1.0 / v])
        }
        _ => {
            let m = DMatrix::from_row_slice(d, d, a);
            let scale = m.amax();
            if !(scale > 0.0) || !scale.is_finite() {
                return None;
            }
            let det = m.determinant();
            if det.abs() <= 1e-14 * scale.powi(d as i32) {
                return None;
            }
            m.try_inverse().map(|inv| to_row_major(&inv))
        }
    }
}

pub fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn max_abs_diff_from_identity(a: &[f64], d: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((a[i * d + j] - target).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_round_trip() {
        let a = [2.0, 1.0, 0.5, 0.0, 1.0, 0.3, 0.1, 0.0, 3.0];
        let inv = invert(&a, 3).unwrap();
        let mut p = vec![0.0; 9];
        matmul(&a, &inv, 3, 3, 3, &mut p);
        assert!(max_abs_diff_from_identity(&p, 3) < 1e-14);
        assert!(invert(&[1.0, 2.0, 2.0, 4.0], 2).is_none());
        assert!(invert(&[0.0], 1).is_none());
    }
}
