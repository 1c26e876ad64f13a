//! RK4 3/8-rule integrators and stable-timestep selection.
//!
//! The low-storage path keeps exactly three persistent copies of the
//! distribution (per species). With stage inputs
//! Y1 = f0 + Δt K0/3, Y2 = f0 + Δt(K1 − K0/3), Y3 = f0 + Δt(K0 − K1 + K2),
//! the Butcher update can be rewritten as
//!
//! ```text
//! B1 ← B0 + (Δt/3) L(B0)                  B1 = Y1
//! B2 ← 2 B0 − B1 + Δt L(B1)               B2 = Y2
//! B1 ← 2 B1 − B2 + Δt L(B2)               B1 = Y3   (in place)
//! B0 ← (−B0 + 6 B2 + 3 B1 + Δt L(B1)) / 8  B0 = f(t + Δt)   (in place)
//! ```
//!
//! On u' = λu this reproduces 1 + z + z²/2 + z³/6 + z⁴/24 exactly. Every
//! line is a single fused pass: the operator evaluates L at a cell and
//! immediately combines it with point values of the other buffers.

use thiserror::Error;

use crate::field::FieldError;
use crate::fvm::FvmError;
use crate::grid::{DistField, GridError};

#[derive(Debug, Error)]
pub enum StepError {
    #[error(transparent)]
    Fvm(#[from] FvmError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("{0}")]
    Other(String),
}

/// A semi-discrete right-hand side evaluated in fused form.
pub trait SemiDiscrete {
    /// Brings `input` to a state where L can be evaluated: ghost cells,
    /// moments, potential and field for this stage.
    fn prepare(&mut self, input: &mut [DistField]) -> Result<(), StepError>;

    /// For every species `s` and interior offset `o`:
    /// `out[s][o] = combine(s, o, out[s][o], L(input)[s][o])`.
    fn apply<F>(&self, input: &[DistField], out: &mut [DistField], combine: F) -> Result<(), StepError>
    where
        F: Fn(usize, usize, f64, f64) -> f64 + Sync;
}

/// Three-buffer RK4 3/8 integrator.
pub struct LowStorageRk4 {
    bufs: [Vec<DistField>; 3],
    pub t: f64,
}

impl LowStorageRk4 {
    /// Takes ownership of the initial state and clones it into the two work buffers.
    pub fn new(state: Vec<DistField>, t: f64) -> Self {
        let b1 = state.clone();
        let b2 = state.clone();
        Self { bufs: [state, b1, b2], t }
    }

    pub fn state(&self) -> &[DistField] {
        &self.bufs[0]
    }

    pub fn state_mut(&mut self) -> &mut [DistField] {
        &mut self.bufs[0]
    }

    pub fn into_state(self) -> Vec<DistField> {
        let [b0, _, _] = self.bufs;
        b0
    }

    /// Number of persistent distribution buffers held (always three per species).
    pub fn buffer_count(&self) -> usize {
        self.bufs.iter().map(|b| b.len()).sum()
    }

    pub fn step<L: SemiDiscrete>(&mut self, op: &mut L, dt: f64) -> Result<(), StepError> {
        let [b0, b1, b2] = &mut self.bufs;
        op.prepare(b0)?;
        {
            let f0: &[DistField] = b0;
            op.apply(f0, b1, |s, o, _, l| f0[s].data[o] + dt / 3.0 * l)?;
        }
        op.prepare(b1)?;
        {
            let (f0, y1): (&[DistField], &[DistField]) = (b0, b1);
            op.apply(y1, b2, |s, o, _, l| 2.0 * f0[s].data[o] - y1[s].data[o] + dt * l)?;
        }
        op.prepare(b2)?;
        {
            let y2: &[DistField] = b2;
            op.apply(y2, b1, |s, o, old, l| 2.0 * old - y2[s].data[o] + dt * l)?;
        }
        op.prepare(b1)?;
        {
            let (y2, y3): (&[DistField], &[DistField]) = (b2, b1);
            op.apply(y3, b0, |s, o, old, l| (-old + 6.0 * y2[s].data[o] + 3.0 * y3[s].data[o] + dt * l) / 8.0)?;
        }
        self.t += dt;
        Ok(())
    }
}

/// Reference RK4 3/8 step in Butcher form with four stage buffers.
pub fn rk4_butcher_step<L: SemiDiscrete>(state: &mut Vec<DistField>, op: &mut L, dt: f64) -> Result<(), StepError> {
    let mut k: Vec<Vec<DistField>> = (0..4).map(|_| state.iter().map(|f| DistField::zeros(&f.species, &f.grid)).collect()).collect();
    let mut y = state.clone();
    let rhs = |_: usize, _: usize, _: f64, l: f64| l;

    op.prepare(state)?;
    op.apply(state, &mut k[0], rhs)?;

    combine_into(&mut y, state, &k, &[1.0 / 3.0, 0.0, 0.0], dt);
    op.prepare(&mut y)?;
    op.apply(&y, &mut k[1], rhs)?;

    combine_into(&mut y, state, &k, &[-1.0 / 3.0, 1.0, 0.0], dt);
    op.prepare(&mut y)?;
    op.apply(&y, &mut k[2], rhs)?;

    combine_into(&mut y, state, &k, &[1.0, -1.0, 1.0], dt);
    op.prepare(&mut y)?;
    op.apply(&y, &mut k[3], rhs)?;

    for s in 0..state.len() {
        let f = &mut state[s].data;
        for o in 0..f.len() {
            let incr = k[0][s].data[o] + 3.0 * k[1][s].data[o] + 3.0 * k[2][s].data[o] + k[3][s].data[o];
            f[o] += dt * incr / 8.0;
        }
    }
    Ok(())
}

fn combine_into(y: &mut [DistField], f0: &[DistField], k: &[Vec<DistField>], a: &[f64; 3], dt: f64) {
    for s in 0..y.len() {
        for o in 0..y[s].data.len() {
            let mut acc = 0.0;
            for (j, &aj) in a.iter().enumerate() {
                if aj != 0.0 {
                    acc += aj * k[j][s].data[o];
                }
            }
            y[s].data[o] = f0[s].data[o] + dt * acc;
        }
    }
}

/// Timestep bound from the L1 norm of speed-to-width ratios.
///
/// `speeds[s][k]` is the largest |A^k| of species `s`, `widths[s][k]` its
/// cell width. Returns `None` when every speed is zero.
pub fn max_stable_dt(speeds: &[Vec<f64>], widths: &[Vec<f64>], sigma: f64, safety: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    for (a, h) in speeds.iter().zip(widths) {
        let norm: f64 = a.iter().zip(h).map(|(a, h)| a.abs() / h).sum();
        if norm > 0.0 {
            let dt = sigma / norm;
            best = Some(best.map_or(dt, |b: f64| b.min(dt)));
        }
    }
    best.map(|dt| dt * safety)
}

/// Conventional bound σ / (D · max_k |A^k|/h_k), for comparison with the L1 bound.
pub fn max_stable_dt_linf(speeds: &[Vec<f64>], widths: &[Vec<f64>], sigma: f64, safety: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    for (a, h) in speeds.iter().zip(widths) {
        let m = a.iter().zip(h).map(|(a, h)| a.abs() / h).fold(0.0f64, f64::max);
        if m > 0.0 {
            let dt = sigma / (a.len() as f64 * m);
            best = Some(best.map_or(dt, |b: f64| b.min(dt)));
        }
    }
    best.map(|dt| dt * safety)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{field_allocations, PhaseSpaceGrid};

    /// u' = λu (optionally + forcing) in every cell, independently.
    struct Decay {
        lambda: f64,
        offsets: Vec<usize>,
        prepared: usize,
    }

    impl Decay {
        fn new(g: &PhaseSpaceGrid, lambda: f64) -> Self {
            let mut offsets = Vec::new();
            g.for_each_interior(|mi| offsets.push(g.interior_offset(mi)));
            Self { lambda, offsets, prepared: 0 }
        }
    }

    impl SemiDiscrete for Decay {
        fn prepare(&mut self, _input: &mut [DistField]) -> Result<(), StepError> {
            self.prepared += 1;
            Ok(())
        }

        fn apply<F>(&self, input: &[DistField], out: &mut [DistField], combine: F) -> Result<(), StepError>
        where
            F: Fn(usize, usize, f64, f64) -> f64 + Sync,
        {
            for s in 0..input.len() {
                for &o in &self.offsets {
                    let l = self.lambda * input[s].data[o];
                    out[s].data[o] = combine(s, o, out[s].data[o], l);
                }
            }
            Ok(())
        }
    }

    fn ones() -> (PhaseSpaceGrid, Vec<DistField>) {
        let g = PhaseSpaceGrid::new(1, 1, &[8, 8], &[0.0, -1.0], &[1.0, 1.0]).unwrap();
        let mut f = DistField::zeros("e", &g);
        f.data.iter_mut().for_each(|x| *x = 1.0);
        (g, vec![f])
    }

    fn stability_poly(z: f64) -> f64 {
        1.0 + z + z * z / 2.0 + z.powi(3) / 6.0 + z.powi(4) / 24.0
    }

    #[test]
    fn butcher_step_matches_polynomial() {
        let (g, mut state) = ones();
        let mut op = Decay::new(&g, -0.7);
        rk4_butcher_step(&mut state, &mut op, 0.9).unwrap();
        let r = stability_poly(-0.7 * 0.9);
        let got = state[0].data[g.interior_offset(&[2, 3])];
        assert!((got - r).abs() <= 1e-14 * r.abs());
    }

    #[test]
    fn low_storage_matches_polynomial() {
        let (g, state) = ones();
        let mut op = Decay::new(&g, -1.3);
        let mut rk = LowStorageRk4::new(state, 0.0);
        rk.step(&mut op, 0.5).unwrap();
        let r = stability_poly(-1.3 * 0.5);
        let got = rk.state()[0].data[g.interior_offset(&[4, 4])];
        assert!((got - r).abs() <= 1e-14 * r.abs());
        assert_eq!(op.prepared, 4);
    }

    #[test]
    fn low_storage_tracks_butcher_over_many_steps() {
        let (g, state) = ones();
        let mut reference = state.clone();
        let mut rk = LowStorageRk4::new(state, 0.0);
        let mut op = Decay::new(&g, 0.8);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            rk.step(&mut op, 0.05).unwrap();
            rk4_butcher_step(&mut reference, &mut op, 0.05).unwrap();
            let o = g.interior_offset(&[1, 1]);
            let a = rk.state()[0].data[o];
            let b = reference[0].data[o];
            worst = worst.max((a - b).abs() / b.abs());
        }
        assert!(worst <= 1e-12, "{worst}");
    }

    #[test]
    fn zero_rhs_and_zero_step_are_identities() {
        let (g, state) = ones();
        let before = state[0].data.clone();
        let mut rk = LowStorageRk4::new(state, 0.0);
        let mut op = Decay::new(&g, 0.0);
        rk.step(&mut op, 0.3).unwrap();
        assert_eq!(rk.state()[0].data, before);
        let mut op = Decay::new(&g, -2.0);
        rk.step(&mut op, 0.0).unwrap();
        assert_eq!(rk.state()[0].data, before);
        let mut copy = vec![rk.state()[0].clone()];
        rk4_butcher_step(&mut copy, &mut Decay::new(&g, 0.0), 0.7).unwrap();
        assert_eq!(copy[0].data, before);
    }

    #[test]
    fn low_storage_allocates_no_field_buffers_while_stepping() {
        let (g, state) = ones();
        let before = field_allocations();
        let mut rk = LowStorageRk4::new(state, 0.0);
        assert_eq!(field_allocations() - before, 2);
        let mut op = Decay::new(&g, -0.1);
        let mid = field_allocations();
        for _ in 0..10 {
            rk.step(&mut op, 0.1).unwrap();
        }
        assert_eq!(field_allocations(), mid);
        assert_eq!(rk.buffer_count(), 3);
    }

    /// u' = cos t, carried as a two-component autonomous system (u, t).
    struct Quadrature {
        offsets: [usize; 2],
    }

    impl SemiDiscrete for Quadrature {
        fn prepare(&mut self, _: &mut [DistField]) -> Result<(), StepError> {
            Ok(())
        }
        fn apply<F>(&self, input: &[DistField], out: &mut [DistField], combine: F) -> Result<(), StepError>
        where
            F: Fn(usize, usize, f64, f64) -> f64 + Sync,
        {
            let [ou, ot] = self.offsets;
            let t = input[0].data[ot];
            out[0].data[ou] = combine(0, ou, out[0].data[ou], t.cos());
            out[0].data[ot] = combine(0, ot, out[0].data[ot], 1.0);
            Ok(())
        }
    }

    #[test]
    fn cosine_quadrature_is_fourth_order() {
        let (g, _) = ones();
        let ou = g.interior_offset(&[0, 0]);
        let ot = g.interior_offset(&[0, 1]);
        let err = |dt: f64| {
            let f = DistField::zeros("e", &g);
            let mut rk = LowStorageRk4::new(vec![f], 0.0);
            let mut op = Quadrature { offsets: [ou, ot] };
            rk.step(&mut op, dt).unwrap();
            (rk.state()[0].data[ou] - dt.sin()).abs()
        };
        let e1 = err(0.4);
        let e2 = err(0.2);
        let e3 = err(0.1);
        // single-step local error is O(dt^5); global order is one less
        let slope1 = (e1 / e2).log2() - 1.0;
        let slope2 = (e2 / e3).log2() - 1.0;
        assert!((slope1 - 4.0).abs() < 0.2 && (slope2 - 4.0).abs() < 0.2, "{slope1} {slope2}");
    }

    #[test]
    fn l1_bound_examples() {
        let dt = max_stable_dt(&[vec![1.0, 1.0]], &[vec![1.0, 1.0]], 1.73, 1.0).unwrap();
        assert!((dt - 0.865).abs() < 1e-15);
        let a = vec![vec![1.0, 0.01]];
        let h = vec![vec![1.0, 1.0]];
        let ratio = max_stable_dt(&a, &h, 1.73, 1.0).unwrap() / max_stable_dt_linf(&a, &h, 1.73, 1.0).unwrap();
        assert!((ratio - 2.0 / 1.01).abs() < 1e-12);
        let eq = vec![vec![2.0, 2.0, 2.0]];
        let w = vec![vec![0.5, 0.5, 0.5]];
        assert_eq!(max_stable_dt(&eq, &w, 1.73, 1.0), max_stable_dt_linf(&eq, &w, 1.73, 1.0));
        assert_eq!(max_stable_dt(&[vec![0.0, 0.0]], &[vec![1.0, 1.0]], 1.73, 0.9), None);
    }

    #[test]
    fn global_step_is_minimum_over_species() {
        let speeds = vec![vec![1.0, 2.0], vec![10.0, 1.0]];
        let widths = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let dt = max_stable_dt(&speeds, &widths, 1.0, 0.9).unwrap();
        assert!((dt - 0.9 / 11.0).abs() < 1e-15);
    }
}
