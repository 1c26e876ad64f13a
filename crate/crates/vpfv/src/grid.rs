//! Phase-space grid geometry, padded storage and local ghost filling.
//!
//! Dimensions are ordered physical first, then velocity, so with row-major
//! storage the velocity dimensions vary fastest. Every dimension carries a
//! ghost shell of width [`GHOST`].

use std::cell::Cell;

use thiserror::Error;

/// Ghost width on each side of every dimension.
pub const GHOST: usize = 3;

/// Largest supported phase-space dimensionality.
pub const MAX_DIMS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("dimension mismatch: expected {expected} entries, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unsupported dimensionality d={d}, v={v}")]
    Unsupported { d: usize, v: usize },
    #[error("dimension {dim}: non-positive extent [{lo}, {hi}]")]
    NonPositiveExtent { dim: usize, lo: f64, hi: f64 },
    #[error("dimension {dim}: {n} cells, at least 8 required")]
    TooFewCells { dim: usize, n: usize },
    #[error("multi-index {0:?} lies outside the padded box")]
    OutOfBox(Vec<i64>),
    #[error("offset {0} lies outside the padded box")]
    OffsetOutOfBox(usize),
    #[error("frozen ghost snapshot is missing or was captured on another grid")]
    MissingFrozen,
}

/// Uniform Cartesian phase-space grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSpaceGrid {
    pub d: usize,
    pub v: usize,
    pub n: Vec<usize>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub h: Vec<f64>,
    pub periodic: Vec<bool>,
}

pub type MultiIndex = Vec<i64>;

impl PhaseSpaceGrid {
    pub fn new(d: usize, v: usize, n: &[usize], lo: &[f64], hi: &[f64]) -> Result<Self, GridError> {
        if !(1..=2).contains(&d) || !(1..=2).contains(&v) || v < d {
            return Err(GridError::Unsupported { d, v });
        }
        let dims = d + v;
        for len in [n.len(), lo.len(), hi.len()] {
            if len != dims {
                return Err(GridError::DimensionMismatch { expected: dims, got: len });
            }
        }
        for k in 0..dims {
            if !(hi[k] > lo[k]) || !lo[k].is_finite() || !hi[k].is_finite() {
                return Err(GridError::NonPositiveExtent { dim: k, lo: lo[k], hi: hi[k] });
            }
            if n[k] < 8 {
                return Err(GridError::TooFewCells { dim: k, n: n[k] });
            }
        }
        let h = (0..dims).map(|k| (hi[k] - lo[k]) / n[k] as f64).collect();
        let periodic = (0..dims).map(|k| k < d).collect();
        Ok(Self { d, v, n: n.to_vec(), lo: lo.to_vec(), hi: hi.to_vec(), h, periodic })
    }

    pub fn dims(&self) -> usize {
        self.d + self.v
    }

    /// Padded extent of dimension `k`.
    pub fn padded(&self, k: usize) -> usize {
        self.n[k] + 2 * GHOST
    }

    pub fn storage_len(&self) -> usize {
        (0..self.dims()).map(|k| self.padded(k)).product()
    }

    /// Row-major strides over the padded box; the last dimension has stride 1.
    pub fn strides(&self) -> Vec<usize> {
        let dims = self.dims();
        let mut s = vec![1usize; dims];
        for k in (0..dims - 1).rev() {
            s[k] = s[k + 1] * self.padded(k + 1);
        }
        s
    }

    pub fn interior_cells(&self) -> usize {
        self.n.iter().product()
    }

    pub fn physical_cells(&self) -> usize {
        self.n[..self.d].iter().product()
    }

    pub fn velocity_cells(&self) -> usize {
        self.n[self.d..].iter().product()
    }

    pub fn cell_volume(&self) -> f64 {
        self.h.iter().product()
    }

    pub fn velocity_cell_volume(&self) -> f64 {
        self.h[self.d..].iter().product()
    }

    pub fn physical_cell_volume(&self) -> f64 {
        self.h[..self.d].iter().product()
    }

    /// Cell-center coordinate of (possibly ghost) index `i` in dimension `k`.
    pub fn center(&self, k: usize, i: i64) -> f64 {
        self.lo[k] + (i as f64 + 0.5) * self.h[k]
    }

    /// Offset of an interior-relative multi-index; ghost indices are negative or ≥ N.
    pub fn flat_index(&self, mi: &[i64]) -> Result<usize, GridError> {
        if mi.len() != self.dims() {
            return Err(GridError::DimensionMismatch { expected: self.dims(), got: mi.len() });
        }
        let g = GHOST as i64;
        let mut off = 0usize;
        for k in 0..self.dims() {
            let p = mi[k] + g;
            if p < 0 || p >= self.padded(k) as i64 {
                return Err(GridError::OutOfBox(mi.to_vec()));
            }
            off = off * self.padded(k) + p as usize;
        }
        Ok(off)
    }

    pub fn unflatten(&self, offset: usize) -> Result<MultiIndex, GridError> {
        if offset >= self.storage_len() {
            return Err(GridError::OffsetOutOfBox(offset));
        }
        let dims = self.dims();
        let mut mi = vec![0i64; dims];
        let mut rest = offset;
        for k in (0..dims).rev() {
            let p = self.padded(k);
            mi[k] = (rest % p) as i64 - GHOST as i64;
            rest /= p;
        }
        Ok(mi)
    }

    /// Offset of the interior cell with unpadded coordinates `mi` (no bounds check).
    #[inline]
    pub fn interior_offset(&self, mi: &[usize]) -> usize {
        let mut off = 0usize;
        for k in 0..self.dims() {
            off = off * self.padded(k) + mi[k] + GHOST;
        }
        off
    }

    /// Visits every interior multi-index in row-major order.
    pub fn for_each_interior(&self, mut f: impl FnMut(&[usize])) {
        let dims = self.dims();
        let mut mi = vec![0usize; dims];
        loop {
            f(&mi);
            let mut k = dims;
            loop {
                if k == 0 {
                    return;
                }
                k -= 1;
                mi[k] += 1;
                if mi[k] < self.n[k] {
                    break;
                }
                mi[k] = 0;
            }
        }
    }

    /// True when `mi` (interior-relative) lies in the interior.
    pub fn is_interior(&self, mi: &[i64]) -> bool {
        mi.iter().zip(&self.n).all(|(&i, &n)| i >= 0 && i < n as i64)
    }
}

thread_local! {
    static FIELD_ALLOCS: Cell<usize> = const { Cell::new(0) };
}

/// Number of distribution-field buffers allocated on this thread so far.
pub fn field_allocations() -> usize {
    FIELD_ALLOCS.with(|c| c.get())
}

/// Cell averages of one species over the padded box.
#[derive(Debug, PartialEq)]
pub struct DistField {
    pub species: String,
    pub grid: PhaseSpaceGrid,
    pub data: Vec<f64>,
}

impl Clone for DistField {
    fn clone(&self) -> Self {
        FIELD_ALLOCS.with(|c| c.set(c.get() + 1));
        Self { species: self.species.clone(), grid: self.grid.clone(), data: self.data.clone() }
    }
}

impl DistField {
    pub fn zeros(species: &str, grid: &PhaseSpaceGrid) -> Self {
        FIELD_ALLOCS.with(|c| c.set(c.get() + 1));
        Self { species: species.to_string(), grid: grid.clone(), data: vec![0.0; grid.storage_len()] }
    }

    pub fn get(&self, mi: &[i64]) -> f64 {
        self.data[self.grid.flat_index(mi).expect("index inside padded box")]
    }

    pub fn set(&mut self, mi: &[i64], value: f64) {
        let off = self.grid.flat_index(mi).expect("index inside padded box");
        self.data[off] = value;
    }

    /// Interior values in row-major order, ghosts excluded.
    pub fn interior(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.grid.interior_cells());
        let g = &self.grid;
        g.for_each_interior(|mi| out.push(self.data[g.interior_offset(mi)]));
        out
    }

    pub fn set_interior(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.grid.interior_cells());
        let g = self.grid.clone();
        let mut it = values.iter();
        g.for_each_interior(|mi| self.data[g.interior_offset(mi)] = *it.next().unwrap());
    }

    /// Σ f̄ · cell volume over the interior.
    pub fn mass(&self) -> f64 {
        let g = &self.grid;
        let mut s = 0.0;
        g.for_each_interior(|mi| s += self.data[g.interior_offset(mi)]);
        s * g.cell_volume()
    }

    /// First non-finite interior value, if any.
    pub fn find_non_finite(&self) -> Option<Vec<usize>> {
        let g = &self.grid;
        let mut bad = None;
        g.for_each_interior(|mi| {
            if bad.is_none() && !self.data[g.interior_offset(mi)].is_finite() {
                bad = Some(mi.to_vec());
            }
        });
        bad
    }

    /// Copies all values (ghosts included) from `other` without reallocating.
    pub fn copy_from(&mut self, other: &DistField) {
        self.data.copy_from_slice(&other.data);
    }
}

/// Velocity-boundary ghost values captured at t = 0.
///
/// Stores every padded cell whose velocity coordinates leave the interior;
/// those cells are restored verbatim on every ghost fill.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenGhosts {
    grid: PhaseSpaceGrid,
    offsets: Vec<usize>,
    values: Vec<f64>,
}

impl FrozenGhosts {
    pub fn capture(field: &DistField) -> Self {
        let g = &field.grid;
        let mut offsets = Vec::new();
        let mut values = Vec::new();
        for off in 0..g.storage_len() {
            let mi = g.unflatten(off).expect("offset inside box");
            let v_ghost = (g.d..g.dims()).any(|k| mi[k] < 0 || mi[k] >= g.n[k] as i64);
            if v_ghost {
                offsets.push(off);
                values.push(field.data[off]);
            }
        }
        Self { grid: g.clone(), offsets, values }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn restore(&self, field: &mut DistField) -> Result<(), GridError> {
        if field.grid != self.grid {
            return Err(GridError::MissingFrozen);
        }
        for (&o, &v) in self.offsets.iter().zip(&self.values) {
            field.data[o] = v;
        }
        Ok(())
    }
}

/// Periodic wrap of physical-dimension ghosts plus restoration of frozen
/// velocity ghosts.
pub fn fill_local_ghosts(field: &mut DistField, frozen: Option<&FrozenGhosts>) -> Result<(), GridError> {
    let frozen = frozen.ok_or(GridError::MissingFrozen)?;
    frozen.restore(field)?;
    wrap_physical(field);
    Ok(())
}

/// Copies wrapped interior values into the physical ghost slabs. Each slab
/// spans the full padded range of every other dimension, so corners are
/// covered after all physical dimensions are processed.
pub fn wrap_physical(field: &mut DistField) {
    let g = field.grid.clone();
    let strides = g.strides();
    for k in 0..g.d {
        let n = g.n[k];
        let s = strides[k];
        let outer: usize = (0..k).map(|j| g.padded(j)).product();
        let inner = s;
        let block = g.padded(k) * s;
        for o in 0..outer {
            let base = o * block;
            for gi in 0..GHOST {
                // low ghost at padded index gi copies interior n + gi - GHOST
                let dst = base + gi * s;
                let src = base + (n + gi) * s;
                field.data.copy_within(src..src + inner, dst);
                // high ghost at padded index n + GHOST + gi copies interior gi
                let dst = base + (n + GHOST + gi) * s;
                let src = base + (GHOST + gi) * s;
                field.data.copy_within(src..src + inner, dst);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g11() -> PhaseSpaceGrid {
        PhaseSpaceGrid::new(1, 1, &[64, 64], &[0.0, -6.0], &[1.0, 6.0]).unwrap()
    }

    #[test]
    fn spacing_is_extent_over_count() {
        let g = g11();
        assert_eq!(g.h, vec![1.0 / 64.0, 12.0 / 64.0]);
        assert_eq!(g.storage_len(), 70 * 70);
        assert_eq!(g.periodic, vec![true, false]);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert_eq!(
            PhaseSpaceGrid::new(2, 1, &[8, 8, 8], &[0.0; 3], &[1.0; 3]),
            Err(GridError::Unsupported { d: 2, v: 1 })
        );
        assert!(matches!(
            PhaseSpaceGrid::new(1, 1, &[8], &[0.0; 2], &[1.0; 2]),
            Err(GridError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            PhaseSpaceGrid::new(1, 1, &[8, 8], &[0.0, 1.0], &[1.0, 1.0]),
            Err(GridError::NonPositiveExtent { dim: 1, .. })
        ));
        assert!(matches!(
            PhaseSpaceGrid::new(1, 1, &[8, 4], &[0.0; 2], &[1.0; 2]),
            Err(GridError::TooFewCells { dim: 1, n: 4 })
        ));
    }

    #[test]
    fn fastest_dimension_has_unit_stride() {
        let g = PhaseSpaceGrid::new(1, 2, &[8, 9, 10], &[0.0; 3], &[1.0; 3]).unwrap();
        let a = g.flat_index(&[2, 3, 4]).unwrap();
        let b = g.flat_index(&[2, 3, 5]).unwrap();
        assert_eq!(b - a, 1);
        assert_eq!(g.flat_index(&[0, 0, 0]).unwrap(), g.interior_offset(&[0, 0, 0]));
        assert_eq!(g.unflatten(g.flat_index(&[0, 0, 0]).unwrap()).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn exhaustive_round_trip_on_padded_box() {
        let g = PhaseSpaceGrid::new(1, 2, &[8, 8, 8], &[0.0; 3], &[1.0; 3]).unwrap();
        let mut seen = vec![false; g.storage_len()];
        for a in -3..11i64 {
            for b in -3..11i64 {
                for c in -3..11i64 {
                    let off = g.flat_index(&[a, b, c]).unwrap();
                    assert!(!seen[off]);
                    seen[off] = true;
                    assert_eq!(g.unflatten(off).unwrap(), vec![a, b, c]);
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
        assert!(g.flat_index(&[11, 0, 0]).is_err());
        assert!(g.unflatten(g.storage_len()).is_err());
    }

    fn seeded(g: &PhaseSpaceGrid) -> DistField {
        let mut f = DistField::zeros("e", g);
        for (i, x) in f.data.iter_mut().enumerate() {
            *x = (i as f64 * 0.37).sin();
        }
        f
    }

    #[test]
    fn periodic_ghost_is_exact_copy() {
        let g = g11();
        let mut f = seeded(&g);
        let frozen = FrozenGhosts::capture(&f);
        fill_local_ghosts(&mut f, Some(&frozen)).unwrap();
        for j in 0..64 {
            assert_eq!(f.get(&[-1, j]).to_bits(), f.get(&[63, j]).to_bits());
            assert_eq!(f.get(&[-3, j]).to_bits(), f.get(&[61, j]).to_bits());
            assert_eq!(f.get(&[64, j]).to_bits(), f.get(&[0, j]).to_bits());
            assert_eq!(f.get(&[66, j]).to_bits(), f.get(&[2, j]).to_bits());
        }
    }

    #[test]
    fn frozen_velocity_ghosts_never_change() {
        let g = g11();
        let mut f = seeded(&g);
        let before = f.get(&[5, 65]);
        let frozen = FrozenGhosts::capture(&f);
        for step in 0..100 {
            for x in f.data.iter_mut() {
                *x += 1.0 + step as f64;
            }
            fill_local_ghosts(&mut f, Some(&frozen)).unwrap();
        }
        assert_eq!(f.get(&[5, 65]).to_bits(), before.to_bits());
    }

    #[test]
    fn constant_field_has_constant_ghosts() {
        let g = PhaseSpaceGrid::new(2, 2, &[8, 8, 8, 8], &[0.0; 4], &[1.0; 4]).unwrap();
        let mut f = DistField::zeros("e", &g);
        f.data.iter_mut().for_each(|x| *x = 2.5);
        let frozen = FrozenGhosts::capture(&f);
        f.data.iter_mut().for_each(|x| *x = -1.0);
        f.set_interior(&vec![2.5; g.interior_cells()]);
        fill_local_ghosts(&mut f, Some(&frozen)).unwrap();
        assert!(f.data.iter().all(|&x| x == 2.5));
    }

    #[test]
    fn missing_snapshot_is_an_error() {
        let g = g11();
        let mut f = DistField::zeros("e", &g);
        assert_eq!(fill_local_ghosts(&mut f, None), Err(GridError::MissingFrozen));
    }

    proptest! {
        #[test]
        fn flat_index_bijection(n0 in 8usize..12, n1 in 8usize..12, n2 in 8usize..12, seed in 0usize..10_000) {
            let g = PhaseSpaceGrid::new(1, 2, &[n0, n1, n2], &[0.0; 3], &[1.0; 3]).unwrap();
            let off = seed % g.storage_len();
            let mi = g.unflatten(off).unwrap();
            prop_assert_eq!(g.flat_index(&mi).unwrap(), off);
        }
    }
}
