//! Velocity moments, charge density and the periodic spectral Poisson solve.

use std::f64::consts::TAU;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::fvm::ElectricField;
use crate::grid::{DistField, PhaseSpaceGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("charge density has non-zero mean {0:e}")]
    NonZeroMean(f64),
    #[error("expected {expected} physical cells, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("species densities live on different physical grids")]
    Mismatch,
}

/// Order in which velocity cells are accumulated for the zeroth moment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentSchedule {
    /// Each physical cell reduces its contiguous velocity block with a fixed
    /// pairwise tree (nested per velocity dimension, innermost first).
    VelocityMajor,
    /// Sweeps velocity cells in order, adding each to every physical cell.
    PositionMajor,
}

/// Pairwise sum with the split point at half the length. The tree depends
/// only on the length, so sums over aligned sub-ranges are subtrees.
pub fn tree_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            tree_sum(&values[..mid]) + tree_sum(&values[mid..])
        }
    }
}

/// True when `[start, start + len)` is a node of the pairwise tree over `[0, n)`.
pub fn is_tree_node(n: usize, start: usize, len: usize) -> bool {
    if start == 0 && len == n {
        return true;
    }
    if n <= 1 || start + len > n {
        return false;
    }
    let mid = n / 2;
    if start + len <= mid {
        is_tree_node(mid, start, len)
    } else if start >= mid {
        is_tree_node(n - mid, start - mid, len)
    } else {
        false
    }
}

/// Tree sum over `[0, n)` where some nodes have precomputed values.
/// `leaf(i)` supplies single entries not covered by a provided node.
pub fn tree_sum_with(n: usize, start: usize, provided: &dyn Fn(usize, usize) -> Option<f64>, leaf: &dyn Fn(usize) -> f64) -> f64 {
    if let Some(v) = provided(start, n) {
        return v;
    }
    match n {
        0 => 0.0,
        1 => leaf(start),
        _ => {
            let mid = n / 2;
            tree_sum_with(mid, start, provided, leaf) + tree_sum_with(n - mid, start + mid, provided, leaf)
        }
    }
}

/// Offsets of the first interior velocity cell of each physical cell.
fn velocity_block_offsets(g: &PhaseSpaceGrid) -> Vec<usize> {
    let mut out = Vec::with_capacity(g.physical_cells());
    let mut mi = vec![0usize; g.dims()];
    if g.d == 1 {
        for i in 0..g.n[0] {
            mi[0] = i;
            out.push(g.interior_offset(&mi));
        }
    } else {
        for i in 0..g.n[0] {
            for j in 0..g.n[1] {
                mi[0] = i;
                mi[1] = j;
                out.push(g.interior_offset(&mi));
            }
        }
    }
    out
}

/// Un-normalized velocity sums Σ f̄ per physical cell over the local velocity box.
pub fn velocity_sums(field: &DistField, schedule: MomentSchedule) -> Vec<f64> {
    let g = &field.grid;
    let f = &field.data;
    let starts = velocity_block_offsets(g);
    let strides = g.strides();
    match schedule {
        MomentSchedule::VelocityMajor => starts
            .iter()
            .map(|&o| {
                if g.v == 1 {
                    tree_sum(&f[o..o + g.n[g.d]])
                } else {
                    let nvx = g.n[g.d];
                    let nvy = g.n[g.d + 1];
                    let sx = strides[g.d];
                    let rows: Vec<f64> = (0..nvx).map(|j| tree_sum(&f[o + j * sx..o + j * sx + nvy])).collect();
                    tree_sum(&rows)
                }
            })
            .collect(),
        MomentSchedule::PositionMajor => {
            let mut acc = vec![0.0; starts.len()];
            let nvx = g.n[g.d];
            let nvy = if g.v == 2 { g.n[g.d + 1] } else { 1 };
            let sx = strides[g.d];
            for j in 0..nvx {
                for l in 0..nvy {
                    for (a, &o) in acc.iter_mut().zip(&starts) {
                        *a += f[o + j * sx + l];
                    }
                }
            }
            acc
        }
    }
}

/// Number density n(x) = Σ f̄ Π h_v for every local physical cell.
pub fn zeroth_moment(field: &DistField, schedule: MomentSchedule) -> Vec<f64> {
    let hv = field.grid.velocity_cell_volume();
    velocity_sums(field, schedule).into_iter().map(|s| s * hv).collect()
}

/// First and second velocity moments per physical cell.
#[derive(Debug, Clone, PartialEq)]
pub struct HigherMoments {
    /// ∫ v f dv, one entry per velocity component.
    pub momentum: Vec<Vec<f64>>,
    /// ∫ |v|² f / 2 dv.
    pub kinetic: Vec<f64>,
}

/// Midpoint moments with the h²/12 product correction; reads one velocity
/// ghost layer, so ghosts must be current.
pub fn higher_moments(field: &DistField) -> HigherMoments {
    let g = &field.grid;
    let f = &field.data;
    let strides = g.strides();
    let starts = velocity_block_offsets(g);
    let hv = g.velocity_cell_volume();
    let mut momentum = vec![vec![0.0; starts.len()]; g.v];
    let mut kinetic = vec![0.0; starts.len()];
    let nvx = g.n[g.d];
    let nvy = if g.v == 2 { g.n[g.d + 1] } else { 1 };
    for (p, &o) in starts.iter().enumerate() {
        let mut mom = [0.0f64; 2];
        let mut ke = 0.0;
        for j in 0..nvx {
            for l in 0..nvy {
                let c = o + j * strides[g.d] + l;
                let fc = f[c];
                for comp in 0..g.v {
                    let k = g.d + comp;
                    let s = strides[k];
                    let idx = if comp == 0 { j } else { l };
                    let vc = g.center(k, idx as i64);
                    let h = g.h[k];
                    let slope = (f[c + s] - f[c - s]) / (2.0 * h);
                    mom[comp] += vc * fc + h * h / 12.0 * slope;
                    ke += (vc * vc + h * h / 12.0) * fc + h * h / 12.0 * 2.0 * vc * slope;
                }
            }
        }
        for comp in 0..g.v {
            momentum[comp][p] = mom[comp] * hv;
        }
        kinetic[p] = 0.5 * ke * hv;
    }
    HigherMoments { momentum, kinetic }
}

/// ρ = Σ q_s n_s, then the mean is removed (static neutralizing background).
pub fn charge_density(densities: &[Vec<f64>], charges: &[f64]) -> Result<Vec<f64>, FieldError> {
    let cells = densities.first().map_or(0, |n| n.len());
    if densities.iter().any(|n| n.len() != cells) {
        return Err(FieldError::Mismatch);
    }
    let mut rho = vec![0.0; cells];
    for (n, q) in densities.iter().zip(charges) {
        for (r, x) in rho.iter_mut().zip(n) {
            *r += q * x;
        }
    }
    let mean = rho.iter().sum::<f64>() / cells as f64;
    rho.iter_mut().for_each(|r| *r -= mean);
    Ok(rho)
}

/// Potential and field from a periodic spectral solve.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState {
    pub densities: Vec<Vec<f64>>,
    pub rho: Vec<f64>,
    pub phi: Vec<f64>,
    pub e: ElectricField,
}

/// FFT-based solver for ∇²φ = −ρ on a periodic 1D or 2D box, φ̂₀ = 0.
pub struct PoissonSolver {
    n: Vec<usize>,
    lengths: Vec<f64>,
    fwd: Vec<Arc<dyn Fft<f64>>>,
    inv: Vec<Arc<dyn Fft<f64>>>,
}

impl std::fmt::Debug for PoissonSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PoissonSolver").field("n", &self.n).field("lengths", &self.lengths).finish()
    }
}

fn wavenumber(j: usize, n: usize, length: f64) -> f64 {
    let m = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
    TAU * m / length
}

impl PoissonSolver {
    pub fn new(n: &[usize], lengths: &[f64]) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = n.iter().map(|&m| planner.plan_fft_forward(m)).collect();
        let inv = n.iter().map(|&m| planner.plan_fft_inverse(m)).collect();
        Self { n: n.to_vec(), lengths: lengths.to_vec(), fwd, inv }
    }

    pub fn for_grid(g: &PhaseSpaceGrid) -> Self {
        let lengths: Vec<f64> = (0..g.d).map(|k| g.hi[k] - g.lo[k]).collect();
        Self::new(&g.n[..g.d], &lengths)
    }

    fn cells(&self) -> usize {
        self.n.iter().product()
    }

    fn transform(&self, data: &mut [Complex64], plans: &[Arc<dyn Fft<f64>>]) {
        if self.n.len() == 1 {
            plans[0].process(data);
            return;
        }
        let (nx, ny) = (self.n[0], self.n[1]);
        for row in data.chunks_mut(ny) {
            plans[1].process(row);
        }
        let mut col = vec![Complex64::new(0.0, 0.0); nx];
        for j in 0..ny {
            for i in 0..nx {
                col[i] = data[i * ny + j];
            }
            plans[0].process(&mut col);
            for i in 0..nx {
                data[i * ny + j] = col[i];
            }
        }
    }

    /// Solves for φ and E = −∇φ at cell centers.
    pub fn solve(&self, rho: &[f64]) -> Result<(Vec<f64>, ElectricField), FieldError> {
        let cells = self.cells();
        if rho.len() != cells {
            return Err(FieldError::Shape { expected: cells, got: rho.len() });
        }
        let scale = rho.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mean = rho.iter().sum::<f64>() / cells as f64;
        if mean.abs() > 1e-12 * scale.max(1e-300) && mean.abs() > 1e-14 {
            return Err(FieldError::NonZeroMean(mean));
        }
        let mut hat: Vec<Complex64> = rho.iter().map(|&r| Complex64::new(r, 0.0)).collect();
        self.transform(&mut hat, &self.fwd);
        let ny = if self.n.len() == 2 { self.n[1] } else { 1 };
        let mut phi_hat = vec![Complex64::new(0.0, 0.0); cells];
        let mut ex_hat = vec![Complex64::new(0.0, 0.0); cells];
        let mut ey_hat = vec![Complex64::new(0.0, 0.0); if self.n.len() == 2 { cells } else { 0 }];
        let i = Complex64::new(0.0, 1.0);
        for a in 0..self.n[0] {
            let kx = wavenumber(a, self.n[0], self.lengths[0]);
            let nyq_x = self.n[0] % 2 == 0 && a == self.n[0] / 2;
            for b in 0..ny {
                let (ky, nyq_y) = if self.n.len() == 2 {
                    (wavenumber(b, self.n[1], self.lengths[1]), self.n[1] % 2 == 0 && b == self.n[1] / 2)
                } else {
                    (0.0, false)
                };
                let idx = a * ny + b;
                let k2 = kx * kx + ky * ky;
                if k2 == 0.0 {
                    continue;
                }
                let p = hat[idx] / k2;
                phi_hat[idx] = p;
                if !nyq_x {
                    ex_hat[idx] = -i * kx * p;
                }
                if self.n.len() == 2 && !nyq_y {
                    ey_hat[idx] = -i * ky * p;
                }
            }
        }
        let norm = 1.0 / cells as f64;
        let back = |mut v: Vec<Complex64>| -> Vec<f64> {
            self.transform(&mut v, &self.inv);
            v.iter().map(|c| c.re * norm).collect()
        };
        let phi = back(phi_hat);
        let ex = back(ex_hat);
        let ey = if self.n.len() == 2 { back(ey_hat) } else { Vec::new() };
        Ok((phi, ElectricField { n: self.n.clone(), ex, ey }))
    }
}

/// Moments → neutralized charge → potential and field for a set of species.
pub fn solve_fields(
    fields: &[DistField],
    charges: &[f64],
    solver: &PoissonSolver,
    schedule: MomentSchedule,
) -> Result<FieldState, FieldError> {
    let densities: Vec<Vec<f64>> = fields.iter().map(|f| zeroth_moment(f, schedule)).collect();
    field_state_from_densities(densities, charges, solver)
}

pub fn field_state_from_densities(densities: Vec<Vec<f64>>, charges: &[f64], solver: &PoissonSolver) -> Result<FieldState, FieldError> {
    let rho = charge_density(&densities, charges)?;
    let (phi, e) = solver.solve(&rho)?;
    Ok(FieldState { densities, rho, phi, e })
}

/// Σ |E|²/2 · (physical cell volume).
pub fn field_energy(e: &ElectricField, cell_volume: f64) -> f64 {
    let s: f64 = e.ex.iter().map(|x| x * x).sum::<f64>() + e.ey.iter().map(|x| x * x).sum::<f64>();
    0.5 * s * cell_volume
}

/// ‖E‖ = sqrt(∫ E·E dx).
pub fn field_amplitude(e: &ElectricField, cell_volume: f64) -> f64 {
    (2.0 * field_energy(e, cell_volume)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{fill_local_ghosts, FrozenGhosts};
    use crate::problems::{quadrature_init, QuadratureOrder};
    use proptest::prelude::*;

    #[test]
    fn tree_nodes_are_subtrees() {
        let vals: Vec<f64> = (0..64).map(|i| ((i * 37) as f64).sin() * 1e3 + 1e-3).collect();
        let full = tree_sum(&vals);
        for parts in [2, 4, 8] {
            let len = 64 / parts;
            for p in 0..parts {
                assert!(is_tree_node(64, p * len, len));
            }
            let provided = |start: usize, n: usize| if n == len { Some(tree_sum(&vals[start..start + n])) } else { None };
            let combined = tree_sum_with(64, 0, &provided, &|i| vals[i]);
            assert_eq!(combined.to_bits(), full.to_bits());
        }
        assert!(!is_tree_node(48, 0, 16));
        assert!(is_tree_node(48, 12, 12));
    }

    #[test]
    fn unit_field_gives_velocity_box_volume() {
        let g = PhaseSpaceGrid::new(1, 2, &[8, 16, 16], &[0.0, -6.0, -6.0], &[1.0, 6.0, 6.0]).unwrap();
        let mut f = DistField::zeros("e", &g);
        f.data.iter_mut().for_each(|x| *x = 1.0);
        for sched in [MomentSchedule::VelocityMajor, MomentSchedule::PositionMajor] {
            for n in zeroth_moment(&f, sched) {
                assert!((n - 144.0).abs() <= 4.0 * f64::EPSILON * 144.0);
            }
        }
    }

    fn maxwellian_field(g: &PhaseSpaceGrid, drift: f64, temp: f64) -> DistField {
        let v = g.v;
        let d = g.d;
        let mut f = quadrature_init(g, QuadratureOrder::Eight, move |r: &[f64]| {
            let mut e = 0.0;
            for j in 0..v {
                let u = if j == 0 { drift } else { 0.0 };
                e += (r[d + j] - u).powi(2);
            }
            (-e / (2.0 * temp)).exp() / (std::f64::consts::TAU * temp).powf(v as f64 / 2.0)
        });
        let frozen = FrozenGhosts::capture(&f);
        fill_local_ghosts(&mut f, Some(&frozen)).unwrap();
        f
    }

    #[test]
    fn discrete_maxwellian_has_unit_density() {
        let g = PhaseSpaceGrid::new(1, 1, &[8, 64], &[0.0, -8.0], &[1.0, 8.0]).unwrap();
        let f = maxwellian_field(&g, 0.0, 1.0);
        for n in zeroth_moment(&f, MomentSchedule::VelocityMajor) {
            assert!((n - 1.0).abs() < 1e-12, "{n}");
        }
    }

    #[test]
    fn schedules_agree_on_random_field() {
        let g = PhaseSpaceGrid::new(2, 2, &[8, 8, 16, 12], &[0.0; 4], &[1.0; 4]).unwrap();
        let mut f = DistField::zeros("e", &g);
        let mut s = 0.3f64;
        for x in f.data.iter_mut() {
            s = (s * 91.7 + 0.31).fract();
            *x = s;
        }
        let a = zeroth_moment(&f, MomentSchedule::VelocityMajor);
        let b = zeroth_moment(&f, MomentSchedule::PositionMajor);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-13 * x.abs());
        }
    }

    #[test]
    fn moments_of_maxwellians() {
        let g = PhaseSpaceGrid::new(1, 2, &[8, 48, 48], &[0.0, -9.0, -9.0], &[1.0, 9.0, 9.0]).unwrap();
        let f = maxwellian_field(&g, 0.0, 1.0);
        let m = higher_moments(&f);
        for p in 0..8 {
            assert!(m.momentum[0][p].abs() < 1e-13);
            assert!(m.momentum[1][p].abs() < 1e-13);
            assert!((m.kinetic[p] - 1.0).abs() < 1e-8, "{}", m.kinetic[p]);
        }
        let f = maxwellian_field(&g, 0.7, 1.0);
        let m = higher_moments(&f);
        for p in 0..8 {
            assert!((m.momentum[0][p] - 0.7).abs() < 1e-8, "{}", m.momentum[0][p]);
        }
    }

    #[test]
    fn charge_density_examples() {
        let rho = charge_density(&[vec![1.0; 16]], &[-1.0]).unwrap();
        assert!(rho.iter().all(|&r| r == 0.0));
        let n = vec![0.3, 1.7, 2.0, 0.1];
        let rho = charge_density(&[n.clone(), n], &[1.0, -1.0]).unwrap();
        assert!(rho.iter().all(|&r| r == 0.0));
        let ne: Vec<f64> = (0..32).map(|i| 1.0 + 0.1 * (TAU * (i as f64 + 0.5) / 32.0).sin()).collect();
        let rho = charge_density(&[ne], &[-1.0]).unwrap();
        for (i, r) in rho.iter().enumerate() {
            let expect = -0.1 * (TAU * (i as f64 + 0.5) / 32.0).sin();
            assert!((r - expect).abs() < 1e-15);
        }
        assert_eq!(charge_density(&[vec![1.0; 3], vec![1.0; 4]], &[1.0, 1.0]), Err(FieldError::Mismatch));
    }

    #[test]
    fn one_dimensional_eigenfunction() {
        let n = 32;
        let solver = PoissonSolver::new(&[n], &[1.0]);
        let x: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let rho: Vec<f64> = x.iter().map(|x| (TAU * x).sin()).collect();
        let (phi, e) = solver.solve(&rho).unwrap();
        for i in 0..n {
            assert!((phi[i] - (TAU * x[i]).sin() / (TAU * TAU)).abs() < 1e-15);
            assert!((e.ex[i] + (TAU * x[i]).cos() / TAU).abs() < 1e-15);
        }
    }

    #[test]
    fn two_dimensional_eigenfunction() {
        let n = 16;
        let solver = PoissonSolver::new(&[n, n], &[1.0, 1.0]);
        let c = |i: usize| (i as f64 + 0.5) / n as f64;
        let mut rho = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                rho[i * n + j] = (TAU * c(i)).sin() * (TAU * c(j)).sin();
            }
        }
        let (phi, e) = solver.solve(&rho).unwrap();
        for i in 0..n {
            for j in 0..n {
                let idx = i * n + j;
                assert!((phi[idx] - rho[idx] / (2.0 * TAU * TAU)).abs() < 1e-15);
                let ex = -(TAU * c(i)).cos() * (TAU * c(j)).sin() / (2.0 * TAU);
                assert!((e.ex[idx] - ex).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_charge_and_bad_input() {
        let solver = PoissonSolver::new(&[8, 8], &[1.0, 2.0]);
        let (phi, e) = solver.solve(&vec![0.0; 64]).unwrap();
        assert!(phi.iter().chain(&e.ex).chain(&e.ey).all(|&x| x == 0.0));
        assert!(matches!(solver.solve(&vec![1.0; 64]), Err(FieldError::NonZeroMean(_))));
        assert!(matches!(solver.solve(&vec![0.0; 8]), Err(FieldError::Shape { .. })));
    }

    #[test]
    fn low_mode_residual_and_gauge() {
        let (nx, ny) = (24, 20);
        let (lx, ly) = (3.0, 2.0);
        let solver = PoissonSolver::new(&[nx, ny], &[lx, ly]);
        let mut rho = vec![0.0; nx * ny];
        let mut phi_exact = vec![0.0; nx * ny];
        for i in 0..nx {
            for j in 0..ny {
                let x = (i as f64 + 0.5) * lx / nx as f64;
                let y = (j as f64 + 0.5) * ly / ny as f64;
                for m in 1..=4 {
                    let kx = TAU * m as f64 / lx;
                    let ky = TAU * (m % 3) as f64 / ly;
                    let amp = 1.0 / m as f64;
                    let val = amp * (kx * x + ky * y + 0.3 * m as f64).cos();
                    rho[i * ny + j] += val;
                    phi_exact[i * ny + j] += val / (kx * kx + ky * ky);
                }
            }
        }
        let (phi, e) = solver.solve(&rho).unwrap();
        let scale = phi_exact.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for (a, b) in phi.iter().zip(&phi_exact) {
            assert!((a - b).abs() <= 1e-12 * scale);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&phi).abs() < 1e-15 && mean(&e.ex).abs() < 1e-15 && mean(&e.ey).abs() < 1e-15);
        let (phi2, _) = solver.solve(&rho).unwrap();
        assert_eq!(phi, phi2);
    }

    proptest! {
        #[test]
        fn neutralized_charge_has_zero_mean(vals in proptest::collection::vec(0.0f64..2.0, 8..40)) {
            let rho = charge_density(&[vals], &[-1.0]).unwrap();
            let mean = rho.iter().sum::<f64>() / rho.len() as f64;
            prop_assert!(mean.abs() < 1e-13);
        }
    }
}
