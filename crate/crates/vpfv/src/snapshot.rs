//! Binary snapshot of one species' interior cell averages.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "VPFV"            4 bytes magic
//! version           u32
//! d, v              u32, u32
//! n[d+v]            u64 each
//! lo[d+v], hi[d+v]  f64 each
//! tag length        u32, then UTF-8 species tag
//! time              f64
//! data              f64 × Π n, row-major interior (no ghosts)
//! ```

use std::io::{Read, Write};

use thiserror::Error;

use crate::grid::{DistField, GridError, PhaseSpaceGrid};

pub const MAGIC: &[u8; 4] = b"VPFV";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a snapshot (bad magic)")]
    Magic,
    #[error("unsupported snapshot version {0}")]
    Version(u32),
    #[error("species tag is not UTF-8")]
    Tag,
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub fn write_snapshot(w: &mut impl Write, field: &DistField, time: f64) -> Result<(), SnapshotError> {
    let g = &field.grid;
    let mut buf = Vec::with_capacity(64 + 8 * g.interior_cells());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(g.d as u32).to_le_bytes());
    buf.extend_from_slice(&(g.v as u32).to_le_bytes());
    for k in 0..g.dims() {
        buf.extend_from_slice(&(g.n[k] as u64).to_le_bytes());
    }
    for x in g.lo[..g.dims()].iter().chain(&g.hi[..g.dims()]) {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf.extend_from_slice(&(field.species.len() as u32).to_le_bytes());
    buf.extend_from_slice(field.species.as_bytes());
    buf.extend_from_slice(&time.to_le_bytes());
    for x in field.interior() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N], SnapshotError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn u32_le(r: &mut impl Read) -> Result<u32, SnapshotError> {
    Ok(u32::from_le_bytes(take(r)?))
}

fn f64_le(r: &mut impl Read) -> Result<f64, SnapshotError> {
    Ok(f64::from_le_bytes(take(r)?))
}

/// Reads a snapshot back into a field (ghosts zero) and its time.
pub fn read_snapshot(r: &mut impl Read) -> Result<(DistField, f64), SnapshotError> {
    if &take::<4>(r)? != MAGIC {
        return Err(SnapshotError::Magic);
    }
    let version = u32_le(r)?;
    if version != FORMAT_VERSION {
        return Err(SnapshotError::Version(version));
    }
    let d = u32_le(r)? as usize;
    let v = u32_le(r)? as usize;
    let dims = d + v;
    if dims == 0 || dims > crate::grid::MAX_DIMS {
        return Err(GridError::Unsupported { d, v }.into());
    }
    let n: Vec<usize> = (0..dims).map(|_| Ok(u64::from_le_bytes(take(r)?) as usize)).collect::<Result<_, SnapshotError>>()?;
    let lo: Vec<f64> = (0..dims).map(|_| f64_le(r)).collect::<Result<_, _>>()?;
    let hi: Vec<f64> = (0..dims).map(|_| f64_le(r)).collect::<Result<_, _>>()?;
    let len = u32_le(r)? as usize;
    let mut tag = vec![0u8; len];
    r.read_exact(&mut tag)?;
    let tag = String::from_utf8(tag).map_err(|_| SnapshotError::Tag)?;
    let time = f64_le(r)?;
    let g = PhaseSpaceGrid::new(d, v, &n, &lo, &hi)?;
    let mut bytes = vec![0u8; 8 * g.interior_cells()];
    r.read_exact(&mut bytes)?;
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    let mut field = DistField::zeros(&tag, &g);
    field.set_interior(&values);
    Ok((field, time))
}
