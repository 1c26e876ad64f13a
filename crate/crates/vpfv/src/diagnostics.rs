//! Conserved quantities, growth-rate fits and the Richardson self-convergence metric.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{field_energy, higher_moments, FieldState};
use crate::fvm::SpeciesConfig;
use crate::grid::{DistField, PhaseSpaceGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("fit window holds {0} samples, need at least 10")]
    WindowTooShort(usize),
    #[error("non-positive amplitude {0} inside the fit window")]
    NonPositive(f64),
    #[error("resolution mismatch: fine grid must double every dimension of the coarse grid")]
    ResolutionMismatch,
}

/// One output line of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub t: f64,
    pub mass: Vec<f64>,
    /// |Σ_s m_s ∫ v f|
    pub momentum: f64,
    pub field_energy: f64,
    pub kinetic_energy: f64,
    pub total_energy: f64,
    pub e_norm: f64,
    pub dt: f64,
}

pub const CSV_VERSION: u32 = 1;

impl DiagnosticsRow {
    pub fn csv_header(species: &[String]) -> String {
        let mut cols = vec!["t".to_string()];
        cols.extend(species.iter().map(|s| format!("mass_{s}")));
        cols.extend(["momentum", "field_energy", "kinetic_energy", "total_energy", "e_norm", "dt"].map(String::from));
        cols.join(",")
    }

    pub fn csv_line(&self) -> String {
        let mut cols = vec![format!("{:e}", self.t)];
        cols.extend(self.mass.iter().map(|m| format!("{m:e}")));
        for x in [self.momentum, self.field_energy, self.kinetic_energy, self.total_energy, self.e_norm, self.dt] {
            cols.push(format!("{x:e}"));
        }
        cols.join(",")
    }
}

/// Mass, momentum and energy of ghost-filled fields at the state described by `fs`.
pub fn conserved_quantities(t: f64, dt: f64, fields: &[DistField], species: &[SpeciesConfig], fs: &FieldState) -> DiagnosticsRow {
    let grid = &fields[0].grid;
    let dx = grid.physical_cell_volume();
    let mut mass = Vec::with_capacity(fields.len());
    let mut mom = [0.0f64; 2];
    let mut kinetic = 0.0;
    for (f, sp) in fields.iter().zip(species) {
        mass.push(f.mass());
        let m = higher_moments(f);
        let weight = sp.mass / (sp.plasma_freq * sp.plasma_freq);
        for (c, comp) in m.momentum.iter().enumerate() {
            mom[c] += sp.mass * comp.iter().sum::<f64>() * dx;
        }
        kinetic += weight * m.kinetic.iter().sum::<f64>() * dx;
    }
    let ue = field_energy(&fs.e, dx);
    DiagnosticsRow {
        t,
        mass,
        momentum: mom[0].hypot(mom[1]),
        field_energy: ue,
        kinetic_energy: kinetic,
        total_energy: ue + kinetic,
        e_norm: (2.0 * ue).sqrt(),
        dt,
    }
}

/// Least-squares slope of ln‖E‖ against t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthFit {
    pub rate: f64,
    pub stderr: f64,
    pub intercept: f64,
    pub samples: usize,
}

pub fn fit_growth_rate(t: &[f64], amp: &[f64], window: (f64, f64)) -> Result<GrowthFit, DiagnosticsError> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (&ti, &a) in t.iter().zip(amp) {
        if ti >= window.0 && ti <= window.1 {
            if a <= 0.0 {
                return Err(DiagnosticsError::NonPositive(a));
            }
            xs.push(ti);
            ys.push(a.ln());
        }
    }
    fit_line(&xs, &ys)
}

fn fit_line(xs: &[f64], ys: &[f64]) -> Result<GrowthFit, DiagnosticsError> {
    let n = xs.len();
    if n < 10 {
        return Err(DiagnosticsError::WindowTooShort(n));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let rate = sxy / sxx;
    let intercept = my - rate * mx;
    let ssr: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - rate * x).powi(2)).sum();
    let stderr = (ssr / (nf - 2.0) / sxx).sqrt();
    Ok(GrowthFit { rate, stderr, intercept, samples: n })
}

/// Local maxima of an oscillating amplitude, each refined by a parabola
/// through the three samples around it.
pub fn amplitude_peaks(t: &[f64], amp: &[f64]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for i in 1..amp.len().saturating_sub(1) {
        if amp[i] > amp[i - 1] && amp[i] >= amp[i + 1] {
            let (y0, y1, y2) = (amp[i - 1], amp[i], amp[i + 1]);
            let h = 0.5 * (t[i + 1] - t[i - 1]);
            let denom = y0 - 2.0 * y1 + y2;
            let (dt, peak) = if denom != 0.0 {
                let s = 0.5 * (y0 - y2) / denom;
                (s * h, y1 - 0.25 * (y0 - y2) * s)
            } else {
                (0.0, y1)
            };
            out.push((t[i] + dt, peak));
        }
    }
    out
}

/// Growth rate fitted through the amplitude peaks inside `window`.
/// Needs at least two peaks; the ≥ 10-sample rule applies to raw series only.
pub fn fit_peak_rate(t: &[f64], amp: &[f64], window: (f64, f64)) -> Option<(f64, usize)> {
    let peaks: Vec<(f64, f64)> = amplitude_peaks(t, amp).into_iter().filter(|(ti, _)| *ti >= window.0 && *ti <= window.1).collect();
    if peaks.len() < 2 {
        return None;
    }
    let n = peaks.len() as f64;
    let mx = peaks.iter().map(|p| p.0).sum::<f64>() / n;
    let my = peaks.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let sxx: f64 = peaks.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = peaks.iter().map(|p| (p.0 - mx) * (p.1.ln() - my)).sum();
    Some((sxy / sxx, peaks.len()))
}

/// Sums each block of 2^D fine cells into the coarse cell it covers, divided by 2^D.
pub fn aggregate(fine: &DistField, coarse_grid: &PhaseSpaceGrid) -> Result<Vec<f64>, DiagnosticsError> {
    let g = &fine.grid;
    if g.d != coarse_grid.d || g.v != coarse_grid.v || (0..g.dims()).any(|k| g.n[k] != 2 * coarse_grid.n[k]) {
        return Err(DiagnosticsError::ResolutionMismatch);
    }
    let dims = g.dims();
    let blocks = 1usize << dims;
    let mut out = Vec::with_capacity(coarse_grid.interior_cells());
    let mut fi = vec![0usize; dims];
    coarse_grid.for_each_interior(|ci| {
        let mut s = 0.0;
        for b in 0..blocks {
            for k in 0..dims {
                fi[k] = 2 * ci[k] + ((b >> (dims - 1 - k)) & 1);
            }
            s += fine.data[g.interior_offset(&fi)];
        }
        out.push(s / blocks as f64);
    });
    Ok(out)
}

/// (1/V) Σ |⟨f_N⟩ − ⟨f̂_2N⟩| · cell volume: the L1 self-convergence error.
pub fn richardson_error(coarse: &DistField, fine: &DistField) -> Result<f64, DiagnosticsError> {
    let agg = aggregate(fine, &coarse.grid)?;
    let g = &coarse.grid;
    let vol: f64 = (0..g.dims()).map(|k| g.hi[k] - g.lo[k]).product();
    let sum: f64 = coarse.interior().iter().zip(&agg).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum * g.cell_volume() / vol)
}

/// Least-squares slope of ln(err) against ln(h).
pub fn observed_order(h: &[f64], err: &[f64]) -> f64 {
    let xs: Vec<f64> = h.iter().map(|x| x.ln()).collect();
    let ys: Vec<f64> = err.iter().map(|x| x.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    sxy / sxx
}
