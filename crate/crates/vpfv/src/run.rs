//! Drives a configured run: stepping, diagnostics output and snapshots.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::diagnostics::{conserved_quantities, observed_order, richardson_error, DiagnosticsError, DiagnosticsRow};
use crate::field::MomentSchedule;
use crate::grid::{DistField, PhaseSpaceGrid};
use crate::partition::{gather, plan_partitions, scatter, PartitionError, PartitionedSystem, Strategy};
use crate::sim::{TimestepControl, VlasovPoisson};
use crate::snapshot::{write_snapshot, SnapshotError};
use crate::timestep::{LowStorageRk4, StepError};

/// Overrides `[output] directory` when set.
pub const OUTPUT_DIR_ENV: &str = "VPFV_OUTPUT_DIR";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Step(#[from] StepError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("non-finite state after step {step} (t = {t}); last good snapshot: {snapshot:?}")]
    NonFinite { step: usize, t: f64, snapshot: Option<PathBuf> },
    #[error("{0}")]
    Invalid(String),
}

pub fn output_dir(cfg: &RunConfig) -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(&cfg.output.directory))
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub steps: usize,
    pub t: f64,
    pub rows: Vec<DiagnosticsRow>,
    pub csv: PathBuf,
    pub snapshots: Vec<PathBuf>,
}

enum Stepper {
    Single,
    Multi { system: Box<PartitionedSystem>, grids: Vec<PhaseSpaceGrid> },
}

/// Holds the integrator state; the single-box system doubles as the
/// observer that evaluates fields, diagnostics and stable steps on the
/// assembled global state.
struct Driver {
    observer: VlasovPoisson,
    rk: LowStorageRk4,
    stepper: Stepper,
    control: TimestepControl,
}

impl Driver {
    fn new(cfg: &RunConfig, species: Vec<crate::fvm::SpeciesConfig>, grids: Vec<PhaseSpaceGrid>, fields: Vec<DistField>) -> Result<Self, RunError> {
        let mut observer = VlasovPoisson::new(species.clone(), &fields)?;
        observer.schedule = if cfg.partition.deterministic { MomentSchedule::VelocityMajor } else { MomentSchedule::PositionMajor };
        let single = cfg.partition.ranks == 1 && cfg.partition.counts.iter().all(|&c| c == 1);
        let (stepper, rk) = if single {
            (Stepper::Single, LowStorageRk4::new(fields, 0.0))
        } else {
            if !cfg.partition.deterministic {
                return Err(RunError::Invalid("partitioned runs always use the deterministic reduction; set deterministic = true".into()));
            }
            let counts = vec![cfg.partition.counts.clone(); grids.len()];
            let plan = plan_partitions(&grids, &counts, cfg.partition.ranks, cfg.partition.species_per_rank, Strategy::Vp)?;
            let boxes = scatter(&plan, &fields);
            let system = PartitionedSystem::new(plan, species, grids.clone(), &boxes)?;
            (Stepper::Multi { system: Box::new(system), grids }, LowStorageRk4::new(boxes, 0.0))
        };
        Ok(Self { observer, rk, stepper, control: cfg.time.control })
    }

    /// Global per-species fields (ghosts refreshed by the observer).
    fn global(&mut self) -> Vec<DistField> {
        match &self.stepper {
            Stepper::Single => self.rk.state().to_vec(),
            Stepper::Multi { system, grids } => gather(&system.plan, self.rk.state(), grids),
        }
    }

    fn diagnostics(&mut self, dt: f64) -> Result<(DiagnosticsRow, Vec<DistField>), RunError> {
        let mut fields = self.global();
        let fs = self.observer.field_state(&mut fields)?;
        Ok((conserved_quantities(self.rk.t, dt, &fields, &self.observer.species, &fs), fields))
    }

    fn next_dt(&mut self) -> Result<f64, RunError> {
        match self.control {
            TimestepControl::Fixed(dt) => Ok(dt),
            TimestepControl::Cfl(frac) => {
                let mut fields = self.global();
                let fs = self.observer.field_state(&mut fields)?;
                self.observer.stable_dt(&fs, frac).0.ok_or_else(|| RunError::Invalid("all advection speeds are zero".into()))
            }
        }
    }

    fn step(&mut self, dt: f64) -> Result<(), StepError> {
        match &mut self.stepper {
            Stepper::Single => self.rk.step(&mut self.observer, dt),
            Stepper::Multi { system, .. } => self.rk.step(system.as_mut(), dt),
        }
    }
}

fn snapshot_files(dir: &Path, fields: &[DistField], t: f64, step: usize) -> Result<Vec<PathBuf>, RunError> {
    let mut out = Vec::new();
    for f in fields {
        let path = dir.join(format!("snapshot_{}_{step:06}.vpfv", f.species));
        let mut w = BufWriter::new(File::create(&path)?);
        write_snapshot(&mut w, f, t)?;
        w.flush()?;
        out.push(path);
    }
    Ok(out)
}

/// Runs `cfg` to `t_end`, writing `diagnostics.csv` (and snapshots when
/// enabled) into `dir`. Rows go through a channel to a single writer thread.
pub fn run(cfg: &RunConfig, dir: &Path) -> Result<RunSummary, RunError> {
    fs::create_dir_all(dir)?;
    let setup = cfg.setup()?;
    let names: Vec<String> = setup.species.iter().map(|s| s.name.clone()).collect();
    let mut driver = Driver::new(cfg, setup.species, setup.grids, setup.fields)?;
    let csv = dir.join("diagnostics.csv");
    let (tx, rx) = mpsc::channel::<DiagnosticsRow>();
    let writer = {
        let csv = csv.clone();
        thread::spawn(move || -> std::io::Result<()> {
            let mut w = BufWriter::new(File::create(csv)?);
            writeln!(w, "{}", DiagnosticsRow::csv_header(&names))?;
            for row in rx {
                writeln!(w, "{}", row.csv_line())?;
            }
            w.flush()
        })
    };
    let mut rows = Vec::new();
    let mut snapshots = Vec::new();
    // kept even with snapshots off so an abort can still write the last good state
    let (row, fields) = driver.diagnostics(0.0)?;
    let mut last_good = (fields, 0.0, 0usize);
    rows.push(row.clone());
    let _ = tx.send(row);
    let t_end = cfg.time.t_end;
    let mut steps = 0usize;
    let result = (|| -> Result<(), RunError> {
        while driver.rk.t < t_end - 1e-12 * t_end.abs().max(1.0) {
            let dt = driver.next_dt()?.min(t_end - driver.rk.t);
            match driver.step(dt) {
                Ok(()) => {}
                Err(StepError::Fvm(crate::fvm::FvmError::NonFinite(_))) => return Err(RunError::NonFinite { step: steps + 1, t: driver.rk.t, snapshot: None }),
                Err(e) => return Err(e.into()),
            }
            steps += 1;
            let done = driver.rk.t >= t_end - 1e-12 * t_end.abs().max(1.0);
            if steps % cfg.output.cadence == 0 || done {
                let (row, fields) = driver.diagnostics(dt)?;
                if fields.iter().any(|f| f.find_non_finite().is_some()) {
                    return Err(RunError::NonFinite { step: steps, t: driver.rk.t, snapshot: None });
                }
                last_good = (fields, driver.rk.t, steps);
                rows.push(row.clone());
                let _ = tx.send(row);
            }
        }
        Ok(())
    })();
    drop(tx);
    writer.join().map_err(|_| RunError::Invalid("diagnostics writer panicked".into()))??;
    match result {
        Ok(()) => {
            if cfg.output.snapshot {
                let (fields, t, step) = &last_good;
                snapshots = snapshot_files(dir, fields, *t, *step)?;
            }
            Ok(RunSummary { steps, t: driver.rk.t, rows, csv, snapshots })
        }
        Err(RunError::NonFinite { step, t, .. }) => {
            let (fields, good_t, s) = &last_good;
            let snapshot = snapshot_files(dir, fields, *good_t, *s)?.into_iter().next();
            Err(RunError::NonFinite { step, t, snapshot })
        }
        Err(e) => Err(e),
    }
}

/// One refinement level of a self-convergence study.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceLevel {
    pub cells: Vec<usize>,
    /// Richardson error against the next finer level (absent on the finest).
    pub error: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceStudy {
    pub levels: Vec<ConvergenceLevel>,
    pub order: f64,
}

/// Final state of `cfg` on its own grid, stepping with a fixed `dt`.
pub fn final_state(cfg: &RunConfig, dt: f64) -> Result<Vec<DistField>, RunError> {
    let setup = cfg.setup()?;
    let mut cfg = cfg.clone();
    cfg.time.control = TimestepControl::Fixed(dt);
    let mut driver = Driver::new(&cfg, setup.species, setup.grids, setup.fields)?;
    let t_end = cfg.time.t_end;
    while driver.rk.t < t_end - 1e-12 * t_end.abs().max(1.0) {
        let step = dt.min(t_end - driver.rk.t);
        driver.step(step)?;
    }
    Ok(driver.global())
}

/// Runs `levels` successive doublings of every cell count with one shared
/// timestep (the configured fixed Δt, or the CFL step of the finest level)
/// and fits the order of the Richardson errors.
pub fn convergence(cfg: &RunConfig, levels: usize) -> Result<ConvergenceStudy, RunError> {
    if levels < 2 {
        return Err(RunError::Invalid("convergence needs at least two levels".into()));
    }
    let configs: Vec<RunConfig> = (0..levels).map(|l| cfg.refined(1 << l)).collect();
    let dt = match cfg.time.control {
        TimestepControl::Fixed(dt) => dt,
        TimestepControl::Cfl(frac) => {
            let finest = configs.last().expect("levels ≥ 2");
            let setup = finest.setup()?;
            let mut fields = setup.fields;
            let sys = VlasovPoisson::new(setup.species, &fields)?;
            let fs = sys.field_state(&mut fields)?;
            sys.stable_dt(&fs, frac).0.ok_or_else(|| RunError::Invalid("all advection speeds are zero".into()))?
        }
    };
    let finals: Vec<Vec<DistField>> = configs.iter().map(|c| final_state(c, dt)).collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    let mut h = Vec::new();
    let mut err = Vec::new();
    for l in 0..levels {
        let error = if l + 1 < levels {
            let e = finals[l].iter().zip(&finals[l + 1]).map(|(c, f)| richardson_error(c, f)).sum::<Result<f64, _>>()?;
            h.push(1.0 / (1 << l) as f64);
            err.push(e);
            Some(e)
        } else {
            None
        };
        out.push(ConvergenceLevel { cells: finals[l][0].grid.n[..finals[l][0].grid.dims()].to_vec(), error });
    }
    Ok(ConvergenceStudy { levels: out, order: observed_order(&h, &err) })
}
