//! Fourth-order finite-volume operator for the Vlasov equation.
//!
//! The update of a cell reads up to three neighbors along each axis for the
//! upwind face reconstruction and one diagonal neighbor in selected
//! dimension pairs for the transverse correction.

use rayon::prelude::*;
use thiserror::Error;

use crate::grid::{DistField, PhaseSpaceGrid, GHOST, MAX_DIMS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FvmError {
    #[error("non-finite value produced at interior cell {0:?}")]
    NonFinite(Vec<usize>),
    #[error("unsupported dimensionality d={d}, v={v}")]
    Unsupported { d: usize, v: usize },
    #[error("electric field has {got} cells, expected {expected}")]
    FieldShape { expected: usize, got: usize },
}

/// Face value at i+½ from the six averages f_{i−2} … f_{i+3}.
///
/// A strictly positive advection speed selects the left-biased stencil; zero
/// and negative speeds select the right-biased one.
#[inline(always)]
pub fn reconstruct_face(w: [f64; 6], positive: bool) -> f64 {
    if positive {
        (2.0 * w[0] - 13.0 * w[1] + 47.0 * w[2] + 27.0 * w[3] - 3.0 * w[4]) / 60.0
    } else {
        (-3.0 * w[1] + 27.0 * w[2] + 47.0 * w[3] - 13.0 * w[4] + 2.0 * w[5]) / 60.0
    }
}

#[inline(always)]
fn face_up(f: &[f64], o: usize, s: usize) -> f64 {
    (2.0 * f[o - 2 * s] - 13.0 * f[o - s] + 47.0 * f[o] + 27.0 * f[o + s] - 3.0 * f[o + 2 * s]) / 60.0
}

#[inline(always)]
fn face_down(f: &[f64], o: usize, s: usize) -> f64 {
    (-3.0 * f[o - s] + 27.0 * f[o] + 47.0 * f[o + s] - 13.0 * f[o + 2 * s] + 2.0 * f[o + 3 * s]) / 60.0
}

/// Charge, mass and normalization of one species plus the external fields it sees.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesConfig {
    pub name: String,
    pub charge: f64,
    pub mass: f64,
    /// ω_p0 t_0
    pub plasma_freq: f64,
    /// ω_c0 t_0
    pub cyclotron_freq: f64,
    /// External acceleration (x, y components).
    pub accel: [f64; 2],
    pub b_z: f64,
}

impl SpeciesConfig {
    pub fn electron(name: &str) -> Self {
        Self {
            name: name.to_string(),
            charge: -1.0,
            mass: 1.0,
            plasma_freq: 1.0,
            cyclotron_freq: 0.0,
            accel: [0.0; 2],
            b_z: 0.0,
        }
    }

    pub fn charge_to_mass(&self) -> f64 {
        self.charge / self.mass
    }

    /// q/m (ω_p0 t_0)²: multiplies E in the acceleration.
    pub fn electric_factor(&self) -> f64 {
        self.charge_to_mass() * self.plasma_freq * self.plasma_freq
    }

    /// q/m (ω_c0 t_0) B_z: the signed gyrofrequency.
    pub fn gyro_factor(&self) -> f64 {
        self.charge_to_mass() * self.cyclotron_freq * self.b_z
    }
}

/// Cell-center electric field on the global physical grid (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct ElectricField {
    pub n: Vec<usize>,
    pub ex: Vec<f64>,
    pub ey: Vec<f64>,
}

impl ElectricField {
    pub fn zeros(n: &[usize]) -> Self {
        let cells: usize = n.iter().product();
        let ey = if n.len() == 2 { vec![0.0; cells] } else { Vec::new() };
        Self { n: n.to_vec(), ex: vec![0.0; cells], ey }
    }

    pub fn cells(&self) -> usize {
        self.n.iter().product()
    }

    /// Linear index of the global physical cell, wrapping periodically.
    #[inline]
    pub fn index(&self, ix: i64, iy: i64) -> usize {
        let nx = self.n[0] as i64;
        let x = ix.rem_euclid(nx) as usize;
        if self.n.len() == 2 {
            let ny = self.n[1] as i64;
            x * self.n[1] + iy.rem_euclid(ny) as usize
        } else {
            x
        }
    }

    pub fn ex_at(&self, ix: i64, iy: i64) -> f64 {
        self.ex[self.index(ix, iy)]
    }

    pub fn ey_at(&self, ix: i64, iy: i64) -> f64 {
        if self.ey.is_empty() {
            0.0
        } else {
            self.ey[self.index(ix, iy)]
        }
    }
}

/// A local box of a global grid: `local` has the box's cell counts and
/// shares the global spacing; `offset` is the box origin in global indices.
#[derive(Debug, Clone, PartialEq)]
pub struct GridWindow {
    pub global: PhaseSpaceGrid,
    pub local: PhaseSpaceGrid,
    pub offset: Vec<usize>,
}

impl GridWindow {
    pub fn whole(grid: &PhaseSpaceGrid) -> Self {
        Self { global: grid.clone(), local: grid.clone(), offset: vec![0; grid.dims()] }
    }

    pub fn sub_box(global: &PhaseSpaceGrid, offset: &[usize], n: &[usize]) -> Self {
        let mut local = global.clone();
        for k in 0..global.dims() {
            local.n[k] = n[k];
            local.lo[k] = global.lo[k] + offset[k] as f64 * global.h[k];
            local.hi[k] = global.lo[k] + (offset[k] + n[k]) as f64 * global.h[k];
        }
        Self { global: global.clone(), local, offset: offset.to_vec() }
    }

    /// Global cell-center coordinate for local index `i` in dimension `k`.
    pub fn center(&self, k: usize, i: i64) -> f64 {
        self.global.center(k, i + self.offset[k] as i64)
    }
}

/// Dimension pairs read by the transverse correction, as
/// (first dim, second dim, coefficient slot, sign of the ++ diagonal).
pub fn correction_pairs(d: usize, v: usize) -> Result<Vec<(usize, usize, usize, f64)>, FvmError> {
    match (d, v) {
        (1, 1) => Ok(vec![(0, 1, 0, -1.0)]),
        (1, 2) => Ok(vec![(0, 1, 0, -1.0), (1, 2, 1, 1.0)]),
        (2, 2) => Ok(vec![
            (0, 2, 0, -1.0),
            (2, 3, 1, 1.0),
            (1, 2, 2, 1.0),
            (1, 3, 3, -1.0),
            (0, 3, 4, 1.0),
        ]),
        _ => Err(FvmError::Unsupported { d, v }),
    }
}

/// c1 … c5 for every local physical cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionCoeffs {
    pub values: Vec<[f64; 5]>,
}

impl CorrectionCoeffs {
    pub fn compute(win: &GridWindow, sp: &SpeciesConfig, e: &ElectricField) -> Result<Self, FvmError> {
        let g = &win.local;
        correction_pairs(g.d, g.v)?;
        let ef = sp.electric_factor();
        let h = &g.h;
        let hvx = h[g.d];
        let hvy = if g.v == 2 { h[g.d + 1] } else { 1.0 };
        let c2 = if g.v == 2 { sp.cyclotron_freq / 48.0 * sp.charge_to_mass() * sp.b_z * (hvx / hvy - hvy / hvx) } else { 0.0 };
        let nx = g.n[0];
        let ny = if g.d == 2 { g.n[1] } else { 1 };
        let mut values = Vec::with_capacity(nx * ny);
        for i in 0..nx {
            for j in 0..ny {
                let gx = (i + win.offset[0]) as i64;
                let gy = if g.d == 2 { (j + win.offset[1]) as i64 } else { 0 };
                let mut c = [0.0; 5];
                c[0] = hvx / (48.0 * h[0]) + ef / (96.0 * hvx) * (e.ex_at(gx + 1, gy) - e.ex_at(gx - 1, gy));
                c[1] = c2;
                if g.d == 2 {
                    c[2] = ef / (96.0 * hvx) * (e.ex_at(gx, gy - 1) - e.ex_at(gx, gy + 1));
                    c[3] = hvy / (48.0 * h[1]) + ef / (96.0 * hvy) * (e.ey_at(gx, gy + 1) - e.ey_at(gx, gy - 1));
                    c[4] = ef / (96.0 * hvy) * (e.ey_at(gx - 1, gy) - e.ey_at(gx + 1, gy));
                }
                values.push(c);
            }
        }
        Ok(Self { values })
    }
}

/// Closed-form diagonal correction at one interior cell (interior-relative multi-index).
pub fn transverse_correction(field: &DistField, coeffs: &CorrectionCoeffs, mi: &[usize]) -> Result<f64, FvmError> {
    let g = &field.grid;
    let pairs = correction_pairs(g.d, g.v)?;
    let strides = g.strides();
    let o = g.interior_offset(mi);
    let p = physical_linear(g, mi);
    let c = &coeffs.values[p];
    let f = &field.data;
    let mut total = 0.0;
    for &(a, b, slot, sign) in &pairs {
        let (sa, sb) = (strides[a], strides[b]);
        let diag = f[o + sa + sb] + f[o - sa - sb] - f[o + sa - sb] - f[o - sa + sb];
        total += sign * c[slot] * diag;
    }
    Ok(total)
}

fn physical_linear(g: &PhaseSpaceGrid, mi: &[usize]) -> usize {
    if g.d == 2 {
        mi[0] * g.n[1] + mi[1]
    } else {
        mi[0]
    }
}

/// Advection speed A^k at a local (possibly ghost) multi-index.
pub fn advection_speed(win: &GridWindow, sp: &SpeciesConfig, e: &ElectricField, k: usize, mi: &[i64]) -> f64 {
    let g = &win.local;
    if k < g.d {
        return win.center(g.d + k, mi[g.d + k]);
    }
    let gx = mi[0] + win.offset[0] as i64;
    let gy = if g.d == 2 { mi[1] + win.offset[1] as i64 } else { 0 };
    let ef = sp.electric_factor();
    let gyro = sp.gyro_factor();
    if k == g.d {
        let vy = if g.v == 2 { win.center(g.d + 1, mi[g.d + 1]) } else { 0.0 };
        ef * e.ex_at(gx, gy) + gyro * vy + sp.accel[0]
    } else {
        let vx = win.center(g.d, mi[g.d]);
        ef * e.ey_at(gx, gy) - gyro * vx + sp.accel[1]
    }
}

/// Largest |A^k| over the local box for every dimension.
pub fn max_speeds(win: &GridWindow, sp: &SpeciesConfig, e: &ElectricField) -> Vec<f64> {
    let g = &win.local;
    let mut out = vec![0.0f64; g.dims()];
    let ef = sp.electric_factor().abs();
    let vmax: Vec<f64> = (0..g.v)
        .map(|j| {
            let k = g.d + j;
            win.center(k, 0).abs().max(win.center(k, g.n[k] as i64 - 1).abs())
        })
        .collect();
    for k in 0..g.d {
        out[k] = vmax[k];
    }
    let emax_x = e.ex.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let emax_y = e.ey.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    // bounds over the velocity box; the extremes sit at box corners
    let vx_range = (win.center(g.d, 0), win.center(g.d, g.n[g.d] as i64 - 1));
    let vy_range = if g.v == 2 { (win.center(g.d + 1, 0), win.center(g.d + 1, g.n[g.d + 1] as i64 - 1)) } else { (0.0, 0.0) };
    let sgyro = sp.gyro_factor();
    let ax = |vy: f64| sgyro * vy + sp.accel[0];
    let ay = |vx: f64| -sgyro * vx + sp.accel[1];
    out[g.d] = ef * emax_x + ax(vy_range.0).abs().max(ax(vy_range.1).abs());
    if g.v == 2 {
        out[g.d + 1] = ef * emax_y + ay(vx_range.0).abs().max(ay(vx_range.1).abs());
    }
    out
}

/// Everything one fused stage needs for one species on one box.
pub struct StageOperator {
    dims: usize,
    d: usize,
    v: usize,
    n: [usize; MAX_DIMS],
    strides: [usize; MAX_DIMS],
    inv_h: [f64; MAX_DIMS],
    centers: Vec<Vec<f64>>,
    e_term_x: Vec<f64>,
    e_term_y: Vec<f64>,
    gyro: f64,
    accel: [f64; 2],
    coeffs: Vec<[f64; 5]>,
    pairs: Vec<(usize, usize, usize, f64)>,
    corrections: bool,
}

impl StageOperator {
    pub fn new(win: &GridWindow, sp: &SpeciesConfig, e: &ElectricField) -> Result<Self, FvmError> {
        let g = &win.local;
        let pairs = correction_pairs(g.d, g.v)?;
        let phys_global: usize = win.global.n[..g.d].iter().product();
        if e.cells() != phys_global || e.n.len() != g.d {
            return Err(FvmError::FieldShape { expected: phys_global, got: e.cells() });
        }
        let dims = g.dims();
        let mut n = [1usize; MAX_DIMS];
        let mut strides = [0usize; MAX_DIMS];
        let mut inv_h = [0.0; MAX_DIMS];
        let s = g.strides();
        for k in 0..dims {
            n[k] = g.n[k];
            strides[k] = s[k];
            inv_h[k] = 1.0 / g.h[k];
        }
        let centers = (0..g.v).map(|j| (0..g.n[g.d + j]).map(|i| win.center(g.d + j, i as i64)).collect()).collect();
        let ef = sp.electric_factor();
        let nx = g.n[0];
        let ny = if g.d == 2 { g.n[1] } else { 1 };
        let mut e_term_x = Vec::with_capacity(nx * ny);
        let mut e_term_y = Vec::with_capacity(nx * ny);
        for i in 0..nx {
            for j in 0..ny {
                let gx = (i + win.offset[0]) as i64;
                let gy = if g.d == 2 { (j + win.offset[1]) as i64 } else { 0 };
                e_term_x.push(ef * e.ex_at(gx, gy));
                e_term_y.push(ef * e.ey_at(gx, gy));
            }
        }
        let coeffs = CorrectionCoeffs::compute(win, sp, e)?.values;
        Ok(Self {
            dims,
            d: g.d,
            v: g.v,
            n,
            strides,
            inv_h,
            centers,
            e_term_x,
            e_term_y,
            gyro: sp.gyro_factor(),
            accel: sp.accel,
            coeffs,
            pairs,
            corrections: true,
        })
    }

    /// Disables the transverse correction (used for order studies).
    pub fn without_corrections(mut self) -> Self {
        self.corrections = false;
        self
    }

    /// Single fused pass: `out[o] = combine(o, out[o], RHS(input)[o])` for
    /// every interior offset `o`. Ghost entries of `out` are untouched.
    pub fn apply<F>(&self, input: &[f64], out: &mut [f64], combine: F) -> Result<(), FvmError>
    where
        F: Fn(usize, f64, f64) -> f64 + Sync,
    {
        match self.dims {
            2 => self.apply_dims::<2, F>(input, out, &combine),
            3 => self.apply_dims::<3, F>(input, out, &combine),
            4 => self.apply_dims::<4, F>(input, out, &combine),
            _ => Err(FvmError::Unsupported { d: self.d, v: self.v }),
        }
    }

    fn apply_dims<const D: usize, F>(&self, input: &[f64], out: &mut [f64], combine: &F) -> Result<(), FvmError>
    where
        F: Fn(usize, f64, f64) -> f64 + Sync,
    {
        let s0 = self.strides[0];
        let bad: Option<usize> = out
            .par_chunks_mut(s0)
            .enumerate()
            .filter(|(p0, _)| *p0 >= GHOST && *p0 < GHOST + self.n[0])
            .map(|(p0, chunk)| self.slab::<D, F>(input, chunk, p0 - GHOST, combine))
            .reduce(|| None, |a, b| a.or(b));
        match bad {
            Some(o) => Err(FvmError::NonFinite(self.unflatten_interior(o))),
            None => Ok(()),
        }
    }

    fn unflatten_interior(&self, mut o: usize) -> Vec<usize> {
        let mut mi = vec![0; self.dims];
        for k in (0..self.dims).rev() {
            let p = self.n[k] + 2 * GHOST;
            mi[k] = (o % p).wrapping_sub(GHOST);
            o /= p;
        }
        mi
    }

    /// Updates the slab with first index `i0`; returns the first non-finite offset.
    fn slab<const D: usize, F>(&self, f: &[f64], chunk: &mut [f64], i0: usize, combine: &F) -> Option<usize>
    where
        F: Fn(usize, f64, f64) -> f64,
    {
        let st = &self.strides;
        let base0 = (i0 + GHOST) * st[0];
        let last = D - 1;
        let nl = self.n[last];
        let d = self.d;
        let mut bad = None;
        // middle indices mi[1..last]
        let mut mid = [0usize; MAX_DIMS];
        loop {
            let mut row = base0;
            for k in 1..last {
                row += (mid[k] + GHOST) * st[k];
            }
            row += GHOST;
            let phys = if d == 2 { i0 * self.n[1] + mid[1] } else { i0 };
            let ex = self.e_term_x[phys];
            let ey = self.e_term_y[phys];
            let c = &self.coeffs[phys];
            // velocity indices other than along the row
            let vx_row = if last != d { self.centers[0][mid[d]] } else { 0.0 };
            for j in 0..nl {
                let o = row + j;
                let vx = if last == d { self.centers[0][j] } else { vx_row };
                let vy = if self.v == 2 { self.centers[1][if last == d + 1 { j } else { mid[d + 1] }] } else { 0.0 };
                let mut flux = 0.0;
                for k in 0..D {
                    let a = if k < d {
                        if k == 0 {
                            vx
                        } else {
                            vy
                        }
                    } else if k == d {
                        ex + self.gyro * vy + self.accel[0]
                    } else {
                        ey - self.gyro * vx + self.accel[1]
                    };
                    let s = st[k];
                    let diff = if a > 0.0 { face_up(f, o, s) - face_up(f, o - s, s) } else { face_down(f, o, s) - face_down(f, o - s, s) };
                    flux += a * self.inv_h[k] * diff;
                }
                let mut corr = 0.0;
                if self.corrections {
                    for &(a, b, slot, sign) in &self.pairs {
                        let (sa, sb) = (st[a], st[b]);
                        let diag = f[o + sa + sb] + f[o - sa - sb] - f[o + sa - sb] - f[o - sa + sb];
                        corr += sign * c[slot] * diag;
                    }
                }
                let rhs = corr - flux;
                let slot = &mut chunk[o - base0];
                let value = combine(o, *slot, rhs);
                if !value.is_finite() && bad.is_none() {
                    bad = Some(o);
                }
                *slot = value;
            }
            // advance middle indices
            let mut k = last;
            loop {
                if k <= 1 {
                    return bad;
                }
                k -= 1;
                mid[k] += 1;
                if mid[k] < self.n[k] {
                    break;
                }
                mid[k] = 0;
            }
        }
    }
}

/// RHS of the semi-discrete equation on a ghost-filled field; ghost entries are zero.
pub fn vlasov_rhs(field: &DistField, e: &ElectricField, sp: &SpeciesConfig) -> Result<Vec<f64>, FvmError> {
    let win = GridWindow::whole(&field.grid);
    let op = StageOperator::new(&win, sp, e)?;
    let mut out = vec![0.0; field.data.len()];
    op.apply(&field.data, &mut out, |_, _, l| l)?;
    Ok(out)
}
