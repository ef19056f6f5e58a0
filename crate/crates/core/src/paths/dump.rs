//! Little-endian batch dump.
//!
//! Layout: five `u64` header words `M, N, d, q, seed`, one `u64` flag (1 when
//! tangents follow), one `u64` index of the first path, then `f64` arrays in
//! path-major row-major order: states `M x (N+1) x d`, increments `M x N x q`,
//! and optionally tangents and inverse tangents `M x (N+1) x d x d`.

use std::io::{Read, Write};

use super::PathBatch;
use crate::error::{invalid, Result};
use crate::grids::TimeGrid;
use crate::models::SdeModel;

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64s(w: &mut impl Write, vs: &[f64]) -> std::io::Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_binary(batch: &PathBatch, w: &mut impl Write) -> std::io::Result<()> {
    put_u64(w, batch.paths as u64)?;
    put_u64(w, batch.grid.steps() as u64)?;
    put_u64(w, batch.dim_state() as u64)?;
    put_u64(w, batch.dim_noise() as u64)?;
    put_u64(w, batch.seed)?;
    put_u64(w, batch.tangents.is_some() as u64)?;
    put_u64(w, batch.first_path as u64)?;
    put_f64s(w, &batch.states)?;
    put_f64s(w, &batch.dw)?;
    if let (Some(t), Some(i)) = (&batch.tangents, &batch.inv_tangents) {
        put_f64s(w, t)?;
        put_f64s(w, i)?;
    }
    Ok(())
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| invalid(format!("truncated batch dump: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| get_u64(r).map(f64::from_bits)).collect()
}

/// Reads a dump written for `model` on `grid`; dimensions must match.
pub fn read_binary(r: &mut impl Read, model: &SdeModel, grid: &TimeGrid) -> Result<PathBatch> {
    let m = get_u64(r)? as usize;
    let n = get_u64(r)? as usize;
    let d = get_u64(r)? as usize;
    let q = get_u64(r)? as usize;
    let seed = get_u64(r)?;
    let has_tangents = get_u64(r)? == 1;
    let first_path = get_u64(r)? as usize;
    if n != grid.steps() || d != model.dim_state() || q != model.dim_noise() {
        return Err(invalid("batch dump does not match the model and grid"));
    }
    let states = get_f64s(r, m * (n + 1) * d)?;
    let dw = get_f64s(r, m * n * q)?;
    let (tangents, inv_tangents) = if has_tangents {
        let t = get_f64s(r, m * (n + 1) * d * d)?;
        let i = get_f64s(r, m * (n + 1) * d * d)?;
        (Some(t), Some(i))
    } else {
        (None, None)
    };
    Ok(PathBatch {
        model: model.clone(),
        grid: grid.clone(),
        paths: m,
        first_path,
        seed,
        states,
        dw,
        tangents,
        inv_tangents,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::make_grid;
    use crate::paths::simulate;

    #[test]
    fn round_trip() {
        let model = SdeModel::tanh(0.1, 0.2, 0.5, 0.1).unwrap();
        let grid = make_grid(1.0, 5, 0.5).unwrap();
        let b = simulate(&model, &grid, 7, 42).unwrap();
        let mut buf = Vec::new();
        write_binary(&b, &mut buf).unwrap();
        assert_eq!(&buf[..8], &7u64.to_le_bytes());
        let back = read_binary(&mut buf.as_slice(), &model, &grid).unwrap();
        assert_eq!(back.raw_states(), b.raw_states());
        assert_eq!(back.raw_increments(), b.raw_increments());
        assert_eq!(back.tangent(3, 4), b.tangent(3, 4));
        assert_eq!(back.seed(), 42);
    }
}
