//! Single-box Vlasov–Poisson system and the stepping driver built on it.

use crate::diagnostics::{conserved_quantities, DiagnosticsRow};
use crate::field::{solve_fields, FieldState, MomentSchedule, PoissonSolver};
use crate::fvm::{max_speeds, GridWindow, SpeciesConfig, StageOperator};
use crate::grid::{fill_local_ghosts, DistField, FrozenGhosts};
use crate::timestep::{max_stable_dt, max_stable_dt_linf, LowStorageRk4, SemiDiscrete, StepError};

/// CFL constant of fourth-order FV with RK4 under the L1 speed bound.
pub const RK4_SIGMA: f64 = 1.73;

/// All species on one box sharing a physical grid. `prepare` fills ghosts,
/// takes moments, solves for the field and builds the stage operators.
pub struct VlasovPoisson {
    pub species: Vec<SpeciesConfig>,
    windows: Vec<GridWindow>,
    frozen: Vec<FrozenGhosts>,
    solver: PoissonSolver,
    pub schedule: MomentSchedule,
    pub corrections: bool,
    operators: Vec<StageOperator>,
    pub last: Option<FieldState>,
    pub evaluations: usize,
}

impl VlasovPoisson {
    /// Captures frozen velocity ghosts from the initial fields.
    pub fn new(species: Vec<SpeciesConfig>, initial: &[DistField]) -> Result<Self, StepError> {
        if species.len() != initial.len() || initial.is_empty() {
            return Err(StepError::Other(format!("{} species configs for {} fields", species.len(), initial.len())));
        }
        let g0 = &initial[0].grid;
        for f in initial {
            let g = &f.grid;
            if g.d != g0.d || g.n[..g.d] != g0.n[..g0.d] || g.lo[..g.d] != g0.lo[..g0.d] || g.hi[..g.d] != g0.hi[..g0.d] {
                return Err(StepError::Other("species must share the physical grid".into()));
            }
        }
        Ok(Self {
            species,
            windows: initial.iter().map(|f| GridWindow::whole(&f.grid)).collect(),
            frozen: initial.iter().map(FrozenGhosts::capture).collect(),
            solver: PoissonSolver::for_grid(g0),
            schedule: MomentSchedule::VelocityMajor,
            corrections: true,
            operators: Vec::new(),
            last: None,
            evaluations: 0,
        })
    }

    fn charges(&self) -> Vec<f64> {
        self.species.iter().map(|s| s.charge).collect()
    }

    /// Ghost fill plus field solve, without building stage operators.
    pub fn field_state(&self, fields: &mut [DistField]) -> Result<FieldState, StepError> {
        for (f, fr) in fields.iter_mut().zip(&self.frozen) {
            fill_local_ghosts(f, Some(fr))?;
        }
        Ok(solve_fields(fields, &self.charges(), &self.solver, self.schedule)?)
    }

    /// Largest |A^k| per species and dimension for the given field.
    pub fn speeds(&self, fs: &FieldState) -> Vec<Vec<f64>> {
        self.windows.iter().zip(&self.species).map(|(w, sp)| max_speeds(w, sp, &fs.e)).collect()
    }

    pub fn widths(&self) -> Vec<Vec<f64>> {
        self.windows.iter().map(|w| w.local.h.clone()).collect()
    }

    /// (L1-bound Δt, L∞-bound Δt) for the given field.
    pub fn stable_dt(&self, fs: &FieldState, fraction: f64) -> (Option<f64>, Option<f64>) {
        let sp = self.speeds(fs);
        let w = self.widths();
        (max_stable_dt(&sp, &w, RK4_SIGMA, fraction), max_stable_dt_linf(&sp, &w, RK4_SIGMA, fraction))
    }
}

impl SemiDiscrete for VlasovPoisson {
    fn prepare(&mut self, input: &mut [DistField]) -> Result<(), StepError> {
        let fs = self.field_state(input)?;
        self.operators.clear();
        for (w, sp) in self.windows.iter().zip(&self.species) {
            let op = StageOperator::new(w, sp, &fs.e)?;
            self.operators.push(if self.corrections { op } else { op.without_corrections() });
        }
        self.last = Some(fs);
        Ok(())
    }

    fn apply<F>(&self, input: &[DistField], out: &mut [DistField], combine: F) -> Result<(), StepError>
    where
        F: Fn(usize, usize, f64, f64) -> f64 + Sync,
    {
        for (s, op) in self.operators.iter().enumerate() {
            op.apply(&input[s].data, &mut out[s].data, |o, old, l| combine(s, o, old, l))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimestepControl {
    Fixed(f64),
    /// Fraction of the L1-bound stable step, re-evaluated every step.
    Cfl(f64),
}

/// System, integrator and clock.
pub struct Simulation {
    pub system: VlasovPoisson,
    pub rk: LowStorageRk4,
    pub control: TimestepControl,
    pub steps: usize,
    pub last_dt: f64,
}

impl Simulation {
    pub fn new(species: Vec<SpeciesConfig>, fields: Vec<DistField>, control: TimestepControl) -> Result<Self, StepError> {
        let system = VlasovPoisson::new(species, &fields)?;
        Ok(Self { system, rk: LowStorageRk4::new(fields, 0.0), control, steps: 0, last_dt: 0.0 })
    }

    pub fn time(&self) -> f64 {
        self.rk.t
    }

    pub fn fields(&self) -> &[DistField] {
        self.rk.state()
    }

    pub fn field_state(&mut self) -> Result<FieldState, StepError> {
        self.system.field_state(self.rk.state_mut())
    }

    pub fn diagnostics(&mut self) -> Result<DiagnosticsRow, StepError> {
        let fs = self.field_state()?;
        Ok(conserved_quantities(self.rk.t, self.last_dt, self.rk.state(), &self.system.species, &fs))
    }

    pub fn next_dt(&mut self) -> Result<f64, StepError> {
        match self.control {
            TimestepControl::Fixed(dt) => Ok(dt),
            TimestepControl::Cfl(frac) => {
                let fs = self.field_state()?;
                self.system.stable_dt(&fs, frac).0.ok_or_else(|| StepError::Other("all advection speeds are zero".into()))
            }
        }
    }

    pub fn step_with(&mut self, dt: f64) -> Result<(), StepError> {
        self.rk.step(&mut self.system, dt)?;
        self.steps += 1;
        self.last_dt = dt;
        Ok(())
    }

    pub fn step(&mut self) -> Result<f64, StepError> {
        let dt = self.next_dt()?;
        self.step_with(dt)?;
        Ok(dt)
    }

    /// Steps until `t_end`, shortening the final step to land on it exactly.
    /// `observe` is called after every step.
    pub fn advance_to(&mut self, t_end: f64, mut observe: impl FnMut(&mut Self) -> Result<(), StepError>) -> Result<(), StepError> {
        while self.rk.t < t_end - 1e-12 * t_end.abs().max(1.0) {
            let dt = self.next_dt()?.min(t_end - self.rk.t);
            self.step_with(dt)?;
            observe(self)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::PhaseSpaceGrid;
    use crate::problems::{init_landau, init_two_stream, LandauParams, QuadratureOrder, TwoStreamParams};

    #[test]
    fn unperturbed_landau_stays_at_rest() {
        let p = LandauParams { alpha: 0.0, ..Default::default() };
        let g = p.grid(1, 16, 6.0).unwrap();
        let f = init_landau(&g, &p, QuadratureOrder::Eight).unwrap();
        let mut sim = Simulation::new(vec![SpeciesConfig::electron("electron")], vec![f], TimestepControl::Fixed(0.05)).unwrap();
        let r0 = sim.diagnostics().unwrap();
        for _ in 0..100 {
            sim.step().unwrap();
        }
        let r = sim.diagnostics().unwrap();
        assert!(r.e_norm < 1e-13, "{}", r.e_norm);
        assert!((r.mass[0] - r0.mass[0]).abs() <= 1e-12 * r0.mass[0]);
        assert!((r.total_energy - r0.total_energy).abs() <= 1e-12 * r0.total_energy);
        assert_eq!(r.total_energy, r.field_energy + r.kinetic_energy);
    }

    #[test]
    fn cfl_control_uses_l1_bound() {
        let p = TwoStreamParams::default();
        let g = p.grid(32, 6.0).unwrap();
        let f = init_two_stream(&g, &p, QuadratureOrder::Four).unwrap();
        let mut sim = Simulation::new(vec![SpeciesConfig::electron("electron")], vec![f], TimestepControl::Cfl(0.9)).unwrap();
        let fs = sim.field_state().unwrap();
        let (l1, linf) = sim.system.stable_dt(&fs, 0.9);
        let dt = sim.next_dt().unwrap();
        assert_eq!(Some(dt), l1);
        assert!(l1.unwrap() >= linf.unwrap());
        sim.advance_to(0.5, |_| Ok(())).unwrap();
        assert!((sim.time() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn mismatched_species_are_rejected() {
        let p = TwoStreamParams::default();
        let f = init_two_stream(&p.grid(16, 6.0).unwrap(), &p, QuadratureOrder::Four).unwrap();
        assert!(VlasovPoisson::new(vec![], &[f.clone()]).is_err());
        let g2 = PhaseSpaceGrid::new(1, 1, &[32, 16], &[0.0, -6.0], &[p.length(), 6.0]).unwrap();
        let f2 = init_two_stream(&g2, &p, QuadratureOrder::Four).unwrap();
        let sp = SpeciesConfig::electron("e");
        assert!(VlasovPoisson::new(vec![sp.clone(), sp], &[f, f2]).is_err());
    }
}
