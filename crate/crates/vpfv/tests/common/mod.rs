#![allow(dead_code)]

use std::collections::BTreeMap;

use vpfv::fvm::{ElectricField, GridWindow, SpeciesConfig, StageOperator};
use vpfv::grid::{DistField, PhaseSpaceGrid};
use vpfv::partition::{plan_partitions, scatter, PartitionPlan, PartitionedSystem, Strategy};
use vpfv::problems::{init_lhdi, LhdiClosure, LhdiParams, QuadratureOrder};
use vpfv::sim::{Simulation, TimestepControl};
use vpfv::timestep::LowStorageRk4;

/// Ghost cells read by the stage operator, found by poisoning one ghost at a
/// time with NaN. Both advection signs are covered by two runs with the
/// velocity box and acceleration mirrored. Keyed by neighbor direction.
pub fn probe_ghost_reads(d: usize, v: usize, n: usize) -> BTreeMap<Vec<i8>, usize> {
    let dims = d + v;
    let mut read: BTreeMap<Vec<i8>, std::collections::BTreeSet<usize>> = BTreeMap::new();
    for sign in [1.0, -1.0] {
        let lo: Vec<f64> = (0..dims).map(|k| if k < d { 0.0 } else if sign > 0.0 { 0.5 } else { -1.5 }).collect();
        let hi: Vec<f64> = (0..dims).map(|k| if k < d { 1.0 } else if sign > 0.0 { 1.5 } else { -0.5 }).collect();
        let g = PhaseSpaceGrid::new(d, v, &vec![n; dims], &lo, &hi).unwrap();
        let mut e = ElectricField::zeros(&vec![n; d]);
        for (i, x) in e.ex.iter_mut().enumerate() {
            *x = 0.1 * (i as f64).sin();
        }
        for (i, y) in e.ey.iter_mut().enumerate() {
            *y = 0.1 * (i as f64).cos();
        }
        let sp = SpeciesConfig { accel: [10.0 * sign, 10.0 * sign], cyclotron_freq: 0.3, ..SpeciesConfig::electron("probe") };
        let op = StageOperator::new(&GridWindow::whole(&g), &sp, &e).unwrap();
        let base = DistField::zeros("probe", &g);
        let mut f = base.clone();
        for x in f.data.iter_mut() {
            *x = 1.0;
        }
        let mut out = base.data.clone();
        for off in 0..g.storage_len() {
            let mi = g.unflatten(off).unwrap();
            if g.is_interior(&mi) {
                continue;
            }
            f.data[off] = f64::NAN;
            if op.apply(&f.data, &mut out, |_, _, l| l).is_err() {
                let dir: Vec<i8> = mi.iter().zip(&g.n).map(|(&i, &nk)| if i < 0 { -1 } else if i >= nk as i64 { 1 } else { 0 }).collect();
                read.entry(dir).or_default().insert(off);
            }
            f.data[off] = 1.0;
        }
    }
    read.into_iter().map(|(k, s)| (k, s.len())).collect()
}

pub fn lhdi_closure() -> LhdiClosure {
    LhdiParams { k: 2.0, ..LhdiParams::for_mass_ratio(25.0) }.closure().unwrap()
}

pub fn lhdi_fields(c: &LhdiClosure, n: usize) -> (Vec<PhaseSpaceGrid>, Vec<DistField>) {
    let length = std::f64::consts::TAU / 2.0;
    let grids: Vec<PhaseSpaceGrid> = (0..2).map(|s| c.grid(s, length, &[n, n, n]).unwrap()).collect();
    let fields = grids.iter().enumerate().map(|(s, g)| init_lhdi(g, c, s, QuadratureOrder::Four).unwrap()).collect();
    (grids, fields)
}

/// Single-box reference run; returns the species interiors.
pub fn single_rank_run(c: &LhdiClosure, fields: Vec<DistField>, dt: f64, steps: usize) -> Vec<Vec<f64>> {
    let mut sim = Simulation::new(c.species.to_vec(), fields, TimestepControl::Fixed(dt)).unwrap();
    for _ in 0..steps {
        sim.step().unwrap();
    }
    sim.fields().iter().map(|f| f.interior()).collect()
}

pub struct MultiRun {
    pub interiors: Vec<Vec<f64>>,
    pub system: PartitionedSystem,
    pub plan: PartitionPlan,
}

pub fn multi_rank_run(c: &LhdiClosure, grids: &[PhaseSpaceGrid], fields: &[DistField], counts: [usize; 3], species_per_rank: usize, dt: f64, steps: usize) -> MultiRun {
    let ranks = 2 * counts.iter().product::<usize>() / species_per_rank;
    let plan = plan_partitions(grids, &[counts.to_vec(), counts.to_vec()], ranks, species_per_rank, Strategy::Vp).unwrap();
    let boxes = scatter(&plan, fields);
    let mut system = PartitionedSystem::new(plan.clone(), c.species.to_vec(), grids.to_vec(), &boxes).unwrap();
    let mut rk = LowStorageRk4::new(boxes, 0.0);
    for _ in 0..steps {
        rk.step(&mut system, dt).unwrap();
    }
    let merged = vpfv::partition::gather(&plan, rk.state(), grids);
    MultiRun { interiors: merged.iter().map(|f| f.interior()).collect(), system, plan }
}

pub fn bitwise_equal(a: &[Vec<f64>], b: &[Vec<f64>]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()))
}
