//! Benchmark initial conditions and Gauss–Legendre cell-average initialization.

use std::f64::consts::{PI, TAU};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fvm::SpeciesConfig;
use crate::grid::{wrap_physical, DistField, GridError, PhaseSpaceGrid, GHOST};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("{problem} needs a {expected} grid, got {d}D-{v}V")]
    Dimensionality { problem: &'static str, expected: &'static str, d: usize, v: usize },
    #[error("inconsistent parameters: {0}")]
    Closure(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuadratureOrder {
    Four,
    Eight,
    Sixteen,
}

impl QuadratureOrder {
    pub fn points(self) -> usize {
        match self {
            Self::Four => 4,
            Self::Eight => 8,
            Self::Sixteen => 16,
        }
    }
}

/// Gauss–Legendre nodes and weights on [−1, 1] by Newton iteration on P_n.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let legendre = |z: f64| {
            let (mut p0, mut p1) = (1.0, z);
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * z * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            (p1, n as f64 * (z * p1 - p0) / (z * z - 1.0))
        };
        for _ in 0..100 {
            let (p, dp) = legendre(z);
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let dp = legendre(z).1;
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

pub type Profile = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A function of a subset of phase-space coordinates.
pub struct Factor {
    pub dims: Vec<usize>,
    pub profile: Profile,
}

impl Factor {
    pub fn new(dims: &[usize], profile: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self { dims: dims.to_vec(), profile: Box::new(profile) }
    }
}

/// coeff × Π factors; dimensions not named by any factor contribute 1.
pub struct Term {
    pub coeff: f64,
    pub factors: Vec<Factor>,
}

/// Cell range used for a dimension: interior for physical dimensions,
/// padded for velocity dimensions (the frozen ghosts need values too).
fn index_range(g: &PhaseSpaceGrid, k: usize) -> (i64, i64) {
    if k < g.d {
        (0, g.n[k] as i64)
    } else {
        (-(GHOST as i64), (g.n[k] + GHOST) as i64)
    }
}

/// Averages of one factor over every cell of its own dimension subset.
fn factor_table(g: &PhaseSpaceGrid, factor: &Factor, nodes: &[f64], weights: &[f64]) -> Vec<f64> {
    let ranges: Vec<(i64, i64)> = factor.dims.iter().map(|&k| index_range(g, k)).collect();
    let counts: Vec<usize> = ranges.iter().map(|(a, b)| (b - a) as usize).collect();
    let total: usize = counts.iter().product();
    let m = factor.dims.len();
    let q = nodes.len();
    let qn = q.pow(m as u32);
    (0..total)
        .into_par_iter()
        .map(|flat| {
            let mut rem = flat;
            let mut idx = vec![0i64; m];
            for j in (0..m).rev() {
                idx[j] = ranges[j].0 + (rem % counts[j]) as i64;
                rem /= counts[j];
            }
            let centers: Vec<f64> = (0..m).map(|j| g.center(factor.dims[j], idx[j])).collect();
            let halves: Vec<f64> = factor.dims.iter().map(|&k| 0.5 * g.h[k]).collect();
            let mut r = vec![0.0; m];
            let (mut acc, mut wsum) = (0.0, 0.0);
            for p in 0..qn {
                let mut rem = p;
                let mut w = 1.0;
                for j in (0..m).rev() {
                    let a = rem % q;
                    rem /= q;
                    r[j] = centers[j] + halves[j] * nodes[a];
                    w *= weights[a];
                }
                acc += w * (factor.profile)(&r);
                wsum += w;
            }
            // dividing by the accumulated weight makes constants exact
            acc / wsum
        })
        .collect()
}

/// Cell averages of Σ terms by tensor Gauss–Legendre quadrature, factor by
/// factor. Physical ghosts are filled by periodic wrap.
pub fn separable_init(g: &PhaseSpaceGrid, species: &str, order: QuadratureOrder, terms: &[Term]) -> DistField {
    let (nodes, weights) = gauss_legendre(order.points());
    let dims = g.dims();
    let mut field = DistField::zeros(species, g);
    let strides = g.strides();
    let ranges: Vec<(i64, i64)> = (0..dims).map(|k| index_range(g, k)).collect();
    let counts: Vec<usize> = ranges.iter().map(|(a, b)| (b - a) as usize).collect();
    for term in terms {
        let tables: Vec<Vec<f64>> = term.factors.iter().map(|f| factor_table(g, f, &nodes, &weights)).collect();
        let total: usize = counts.iter().product();
        let mut idx = vec![0usize; dims];
        for _ in 0..total {
            let mut v = term.coeff;
            for (f, table) in term.factors.iter().zip(&tables) {
                let mut t = 0usize;
                for &k in &f.dims {
                    t = t * counts[k] + idx[k];
                }
                v *= table[t];
            }
            let off: usize = (0..dims).map(|k| (idx[k] as i64 + ranges[k].0 + GHOST as i64) as usize * strides[k]).sum();
            field.data[off] += v;
            for k in (0..dims).rev() {
                idx[k] += 1;
                if idx[k] < counts[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
    }
    wrap_physical(&mut field);
    field
}

/// Cell averages of an arbitrary function by full tensor quadrature.
pub fn quadrature_init(g: &PhaseSpaceGrid, order: QuadratureOrder, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> DistField {
    let dims: Vec<usize> = (0..g.dims()).collect();
    separable_init(g, "f", order, &[Term { coeff: 1.0, factors: vec![Factor::new(&dims, f)] }])
}

fn maxwellian_1d(u: f64, vt: f64) -> impl Fn(&[f64]) -> f64 + Send + Sync + 'static {
    move |r: &[f64]| (-(r[0] - u).powi(2) / (2.0 * vt * vt)).exp() / (vt * TAU.sqrt())
}

fn require(g: &PhaseSpaceGrid, problem: &'static str, d: usize, v: usize, expected: &'static str) -> Result<(), ProblemError> {
    if g.d != d || g.v != v {
        return Err(ProblemError::Dimensionality { problem, expected, d: g.d, v: g.v });
    }
    Ok(())
}

/// Two counter-streaming Maxwellian beams.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoStreamParams {
    /// Beam thermal speed squared.
    pub vt2: f64,
    pub u: f64,
    pub delta: f64,
    pub k: f64,
}

impl Default for TwoStreamParams {
    fn default() -> Self {
        Self { vt2: 0.1, u: 1.0, delta: 1e-5, k: 0.6 }
    }
}

impl TwoStreamParams {
    pub fn length(&self) -> f64 {
        TAU / self.k
    }

    pub fn grid(&self, n: usize, v_max: f64) -> Result<PhaseSpaceGrid, GridError> {
        PhaseSpaceGrid::new(1, 1, &[n, n], &[0.0, -v_max], &[self.length(), v_max])
    }
}

pub fn init_two_stream(g: &PhaseSpaceGrid, p: &TwoStreamParams, order: QuadratureOrder) -> Result<DistField, ProblemError> {
    require(g, "two-stream", 1, 1, "1D-1V")?;
    let vt = p.vt2.sqrt();
    let k = TAU / (g.hi[0] - g.lo[0]);
    let mut terms = Vec::new();
    for sign in [1.0, -1.0] {
        terms.push(Term { coeff: 0.5, factors: vec![Factor::new(&[1], maxwellian_1d(sign * p.u, vt))] });
        if p.delta != 0.0 {
            terms.push(Term {
                coeff: sign * p.delta,
                factors: vec![Factor::new(&[0], move |r: &[f64]| (k * r[0]).sin()), Factor::new(&[1], maxwellian_1d(sign * p.u, vt))],
            });
        }
    }
    let mut f = separable_init(g, "electron", order, &terms);
    f.species = "electron".into();
    Ok(f)
}

/// Perturbed electron ring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DghParams {
    pub ell: u32,
    pub alpha_perp: f64,
    pub delta: f64,
    pub k: f64,
    /// |Ω_e| / ω_pe
    pub cyclotron_ratio: f64,
}

impl Default for DghParams {
    fn default() -> Self {
        let mut p = Self { ell: 4, alpha_perp: std::f64::consts::FRAC_1_SQRT_2, delta: 1e-4, k: 0.0, cyclotron_ratio: 1.0 / 20.0 };
        p.k = p.k_from_normalized(3.2);
        p
    }
}

impl DghParams {
    /// Speed at which the ring peaks.
    pub fn ring_speed(&self) -> f64 {
        (self.ell as f64).sqrt() * self.alpha_perp
    }

    /// k from the normalized wavenumber k v_⊥0 / |Ω_e|.
    pub fn k_from_normalized(&self, k_bar: f64) -> f64 {
        k_bar * self.cyclotron_ratio / self.ring_speed()
    }

    pub fn normalized_k(&self) -> f64 {
        self.k * self.ring_speed() / self.cyclotron_ratio
    }

    pub fn length(&self) -> f64 {
        TAU / self.k
    }

    pub fn species(&self) -> SpeciesConfig {
        SpeciesConfig { cyclotron_freq: self.cyclotron_ratio, b_z: 1.0, ..SpeciesConfig::electron("electron") }
    }

    pub fn grid(&self, n: usize, v_max: f64) -> Result<PhaseSpaceGrid, GridError> {
        PhaseSpaceGrid::new(1, 2, &[n, n, n], &[0.0, -v_max, -v_max], &[self.length(), v_max, v_max])
    }

    /// Unperturbed ring f₀(v_⊥).
    pub fn ring(&self, v_perp: f64) -> f64 {
        let a2 = self.alpha_perp * self.alpha_perp;
        let s = v_perp * v_perp / a2;
        let fact: f64 = (1..=self.ell).map(f64::from).product();
        s.powi(self.ell as i32) * (-s).exp() / (PI * fact * a2)
    }
}

pub fn init_dgh(g: &PhaseSpaceGrid, p: &DghParams, order: QuadratureOrder) -> Result<DistField, ProblemError> {
    require(g, "DGH", 1, 2, "1D-2V")?;
    let k = TAU / (g.hi[0] - g.lo[0]);
    let ring = *p;
    let base = move |r: &[f64]| ring.ring(r[0].hypot(r[1]));
    let mut terms = vec![Term { coeff: 1.0, factors: vec![Factor::new(&[1, 2], base)] }];
    if p.delta != 0.0 {
        // sin(4θ − kx) = sin 4θ cos kx − cos 4θ sin kx
        let ring = *p;
        let ring2 = *p;
        terms.push(Term {
            coeff: p.delta,
            factors: vec![
                Factor::new(&[0], move |r: &[f64]| (k * r[0]).cos()),
                Factor::new(&[1, 2], move |r: &[f64]| ring.ring(r[0].hypot(r[1])) * (4.0 * r[1].atan2(r[0])).sin()),
            ],
        });
        terms.push(Term {
            coeff: -p.delta,
            factors: vec![
                Factor::new(&[0], move |r: &[f64]| (k * r[0]).sin()),
                Factor::new(&[1, 2], move |r: &[f64]| ring2.ring(r[0].hypot(r[1])) * (4.0 * r[1].atan2(r[0])).cos()),
            ],
        });
    }
    let mut f = separable_init(g, "electron", order, &terms);
    f.species = "electron".into();
    Ok(f)
}

/// Acceleration-driven lower hybrid drift setup, stated by its ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LhdiParams {
    pub mass_ratio: f64,
    pub temp_ratio: f64,
    pub beta: f64,
    /// v_D / v_Ti
    pub drift_ratio: f64,
    /// |Ω_e / ω_pe|
    pub cyclotron_ratio: f64,
    pub delta_e: f64,
    pub delta_i: f64,
    pub k: f64,
}

impl LhdiParams {
    pub fn for_mass_ratio(m_r: f64) -> Self {
        Self {
            mass_ratio: m_r,
            temp_ratio: 1.0,
            beta: 2.5e-3,
            drift_ratio: 9.0 + 9.0 / m_r,
            cyclotron_ratio: 1e-2 * m_r.sqrt(),
            delta_e: 1e-3,
            delta_i: 0.0,
            k: 0.0,
        }
    }

    /// Converts the ratios to primitive per-species values. Reference mass
    /// is the ion (proton) mass, n = 1 for both species, B_z = 1.
    pub fn closure(&self) -> Result<LhdiClosure, ProblemError> {
        let m_r = self.mass_ratio;
        if !(m_r > 0.0 && self.temp_ratio > 0.0 && self.beta > 0.0 && self.cyclotron_ratio > 0.0) {
            return Err(ProblemError::Closure("mass ratio, temperature ratio, beta and cyclotron ratio must be positive".into()));
        }
        // β = 2 (T_i + T_e) / B² with n = B = 1
        let t_e = self.beta / (2.0 * (1.0 + self.temp_ratio));
        let t_i = self.temp_ratio * t_e;
        let m_e = 1.0 / m_r;
        let v_ti = t_i.sqrt();
        let v_te = (t_e / m_e).sqrt();
        // |Ω_e| / ω_pe = ω_c m_r / √m_r
        let omega_c = self.cyclotron_ratio / m_r.sqrt();
        let omega_i = omega_c;
        let omega_e = -omega_c * m_r;
        // v_D = G_y |1/Ω_i − 1/Ω_e|
        let g_y = self.drift_ratio * v_ti / (1.0 / omega_i - 1.0 / omega_e);
        let drift = [g_y / omega_i, g_y / omega_e];
        let alpha_e = if m_r < 100.0 { 18.21 } else { 6.07 };
        let mk = |name: &str, q: f64, m: f64| SpeciesConfig {
            name: name.into(),
            charge: q,
            mass: m,
            plasma_freq: 1.0,
            cyclotron_freq: omega_c,
            accel: [0.0, g_y],
            b_z: 1.0,
        };
        Ok(LhdiClosure {
            species: [mk("ion", 1.0, 1.0), mk("electron", -1.0, m_e)],
            temperature: [t_i, t_e],
            thermal_speed: [v_ti, v_te],
            drift,
            alpha: [12.14, alpha_e],
            delta: [self.delta_i, self.delta_e],
            g_y,
            omega_c,
        })
    }

    pub fn length(&self) -> f64 {
        TAU / self.k
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LhdiClosure {
    /// Ion first, electron second.
    pub species: [SpeciesConfig; 2],
    pub temperature: [f64; 2],
    pub thermal_speed: [f64; 2],
    /// x drift u_{s,x} = G_y / Ω_s.
    pub drift: [f64; 2],
    pub alpha: [f64; 2],
    pub delta: [f64; 2],
    pub g_y: f64,
    /// ω_c0 t_0
    pub omega_c: f64,
}

impl LhdiClosure {
    pub fn gyrofrequency(&self, s: usize) -> f64 {
        self.species[s].gyro_factor()
    }

    /// Per-species grid with velocity box u_s ± α_s v_Ts.
    pub fn grid(&self, s: usize, length: f64, n: &[usize; 3]) -> Result<PhaseSpaceGrid, GridError> {
        let w = self.alpha[s] * self.thermal_speed[s];
        let u = self.drift[s];
        PhaseSpaceGrid::new(1, 2, n, &[0.0, u - w, -w], &[length, u + w, w])
    }
}

pub fn init_lhdi(g: &PhaseSpaceGrid, c: &LhdiClosure, s: usize, order: QuadratureOrder) -> Result<DistField, ProblemError> {
    require(g, "LHDI", 1, 2, "1D-2V")?;
    if s > 1 {
        return Err(ProblemError::Closure(format!("species index {s} out of range")));
    }
    let k = TAU / (g.hi[0] - g.lo[0]);
    let vt = c.thermal_speed[s];
    let u = c.drift[s];
    let delta = c.delta[s];
    let vx = maxwellian_1d(u, vt);
    let vy = maxwellian_1d(0.0, vt);
    let mut terms = vec![Term { coeff: 1.0, factors: vec![Factor::new(&[1], vx), Factor::new(&[2], vy)] }];
    if delta != 0.0 {
        terms.push(Term {
            coeff: delta,
            factors: vec![
                Factor::new(&[0], move |r: &[f64]| (k * r[0]).sin()),
                Factor::new(&[1], maxwellian_1d(u, vt)),
                Factor::new(&[2], maxwellian_1d(0.0, vt)),
            ],
        });
    }
    let mut f = separable_init(g, &c.species[s].name, order, &terms);
    f.species = c.species[s].name.clone();
    Ok(f)
}

/// Perturbed unit Maxwellian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandauParams {
    pub alpha: f64,
    pub kx: f64,
    pub ky: f64,
}

impl Default for LandauParams {
    fn default() -> Self {
        Self { alpha: 0.5, kx: 0.5, ky: 0.5 }
    }
}

impl LandauParams {
    pub fn grid(&self, d: usize, n: usize, v_max: f64) -> Result<PhaseSpaceGrid, GridError> {
        let lx = TAU / self.kx;
        let ly = TAU / self.ky;
        match d {
            1 => PhaseSpaceGrid::new(1, 1, &[n, n], &[0.0, -v_max], &[lx, v_max]),
            _ => PhaseSpaceGrid::new(2, 2, &[n; 4], &[0.0, 0.0, -v_max, -v_max], &[lx, ly, v_max, v_max]),
        }
    }
}

/// 2D-2V: (1 + α cos k_x x + α cos k_y y) e^{−|v|²/2}/2π; 1D-1V drops the y term.
pub fn init_landau(g: &PhaseSpaceGrid, p: &LandauParams, order: QuadratureOrder) -> Result<DistField, ProblemError> {
    let two_d = match (g.d, g.v) {
        (2, 2) => true,
        (1, 1) => false,
        _ => return Err(ProblemError::Dimensionality { problem: "Landau", expected: "2D-2V or 1D-1V", d: g.d, v: g.v }),
    };
    let vdims: Vec<usize> = (g.d..g.dims()).collect();
    let vel = || -> Vec<Factor> { vdims.iter().map(|&k| Factor::new(&[k], maxwellian_1d(0.0, 1.0))).collect() };
    let mut terms = vec![Term { coeff: 1.0, factors: vel() }];
    if p.alpha != 0.0 {
        let kx = p.kx;
        let mut fx = vel();
        fx.push(Factor::new(&[0], move |r: &[f64]| (kx * r[0]).cos()));
        terms.push(Term { coeff: p.alpha, factors: fx });
        if two_d {
            let ky = p.ky;
            let mut fy = vel();
            fy.push(Factor::new(&[1], move |r: &[f64]| (ky * r[0]).cos()));
            terms.push(Term { coeff: p.alpha, factors: fy });
        }
    }
    let mut f = separable_init(g, "electron", order, &terms);
    f.species = "electron".into();
    Ok(f)
}

/// Any of the benchmark configurations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ProblemSpec {
    TwoStream(TwoStreamParams),
    Dgh(DghParams),
    Lhdi(LhdiParams),
    Landau(LandauParams),
}

impl ProblemSpec {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::TwoStream(_) => "two-stream",
            Self::Dgh(_) => "dgh",
            Self::Lhdi(_) => "lhdi",
            Self::Landau(_) => "landau",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{higher_moments, zeroth_moment, MomentSchedule};
    use crate::grid::{fill_local_ghosts, FrozenGhosts};

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        for n in [4, 8, 16] {
            let (x, w) = gauss_legendre(n);
            assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
            for p in 0..(2 * n) {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(p as i32)).sum();
                let exact = if p % 2 == 1 { 0.0 } else { 2.0 / (p as f64 + 1.0) };
                assert!((q - exact).abs() < 1e-14, "n={n} p={p}");
            }
        }
    }

    #[test]
    fn constant_and_quadratic_averages() {
        let g = PhaseSpaceGrid::new(1, 1, &[8, 8], &[0.0, -1.0], &[1.0, 1.0]).unwrap();
        let f = quadrature_init(&g, QuadratureOrder::Eight, |_| 1.0);
        assert!(f.interior().iter().all(|&x| x == 1.0));
        let f = quadrature_init(&g, QuadratureOrder::Eight, |r| r[0] * r[0]);
        assert!((f.get(&[0, 0]) - 1.0 / 192.0).abs() < 1e-15);
        for i in 0..8 {
            let (a, b) = (i as f64 / 8.0, (i + 1) as f64 / 8.0);
            let exact = (b.powi(3) - a.powi(3)) / 3.0 / (b - a);
            assert!((f.get(&[i, 0]) - exact).abs() <= 1e-15 * exact.max(1.0) * 2.0);
        }
    }

    #[test]
    fn gaussian_averages_are_converged_at_eight_points() {
        let g = PhaseSpaceGrid::new(1, 1, &[8, 60], &[0.0, -3.0], &[1.0, 3.0]).unwrap();
        let gauss = |r: &[f64]| (-r[1] * r[1]).exp();
        let a = quadrature_init(&g, QuadratureOrder::Eight, gauss);
        let b = quadrature_init(&g, QuadratureOrder::Sixteen, gauss);
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn two_stream_density_and_symmetry() {
        let p = TwoStreamParams::default();
        let g = PhaseSpaceGrid::new(1, 1, &[16, 64], &[0.0, -8.0], &[p.length(), 8.0]).unwrap();
        let f = init_two_stream(&g, &p, QuadratureOrder::Eight).unwrap();
        for (i, n) in zeroth_moment(&f, MomentSchedule::VelocityMajor).iter().enumerate() {
            let x = g.center(0, i as i64);
            // the perturbation carries density δ sin kx only through beam imbalance: Σ±(±δ) = 0
            assert!((n - 1.0).abs() < 1e-10, "{x} {n}");
        }
        let p0 = TwoStreamParams { delta: 0.0, ..p };
        let mut f = init_two_stream(&g, &p0, QuadratureOrder::Eight).unwrap();
        let nv = g.n[1] as i64;
        for j in 0..nv {
            assert!((f.get(&[3, j]) - f.get(&[3, nv - 1 - j])).abs() < 1e-15);
        }
        let fr = FrozenGhosts::capture(&f);
        fill_local_ghosts(&mut f, Some(&fr)).unwrap();
        assert!(higher_moments(&f).momentum[0].iter().all(|m| m.abs() < 1e-14));
        assert!(init_two_stream(&DghParams::default().grid(8, 5.0).unwrap(), &p, QuadratureOrder::Four).is_err());
    }

    #[test]
    fn dgh_ring_density_and_peak() {
        let p = DghParams { delta: 0.0, ..Default::default() };
        let g = PhaseSpaceGrid::new(1, 2, &[8, 64, 64], &[0.0, -8.0, -8.0], &[p.length(), 8.0, 8.0]).unwrap();
        let hv = g.h[1];
        let f = init_dgh(&g, &p, QuadratureOrder::Eight).unwrap();
        for n in zeroth_moment(&f, MomentSchedule::VelocityMajor) {
            assert!((n - 1.0).abs() < 1e-10, "{n}");
        }
        let mut best = (0.0, 0.0);
        let row = g.n[1] as i64 / 2;
        for j in 0..g.n[2] as i64 {
            let val = f.get(&[0, row, j]);
            if val > best.0 {
                best = (val, g.center(2, j));
            }
        }
        assert!((best.1.abs() - 2f64.sqrt()).abs() <= hv, "{}", best.1);
    }

    #[test]
    fn dgh_perturbation_is_mode_four() {
        let p = DghParams::default();
        let g = PhaseSpaceGrid::new(1, 2, &[32, 64, 64], &[0.0, -5.0, -5.0], &[p.length(), 5.0, 5.0]).unwrap();
        let f = init_dgh(&g, &p, QuadratureOrder::Eight).unwrap();
        let f0 = init_dgh(&g, &DghParams { delta: 0.0, ..p }, QuadratureOrder::Eight).unwrap();
        let k = p.k;
        let (mut num, mut den) = (0.0, 0.0);
        g.for_each_interior(|mi| {
            let o = g.interior_offset(mi);
            let x = g.center(0, mi[0] as i64);
            let vx = g.center(1, mi[1] as i64);
            let vy = g.center(2, mi[2] as i64);
            let phase = (4.0 * vy.atan2(vx) - k * x).sin();
            num += (f.data[o] - f0.data[o]) * f0.data[o] * phase;
            den += f0.data[o] * f0.data[o] * phase * phase;
        });
        let amp = num / den;
        assert!((amp / p.delta - 1.0).abs() < 0.01, "{amp}");
    }

    #[test]
    fn lhdi_closure_values() {
        let p = LhdiParams::for_mass_ratio(25.0);
        let c = p.closure().unwrap();
        let v_d = (c.drift[0] - c.drift[1]).abs();
        assert!((v_d / c.thermal_speed[0] - (9.0 + 9.0 / 25.0)).abs() < 1e-12);
        assert_eq!(c.alpha, [12.14, 18.21]);
        assert_eq!(LhdiParams::for_mass_ratio(100.0).closure().unwrap().alpha[1], 6.07);
        let r = c.species[1].gyro_factor().abs() / (c.species[1].charge_to_mass().abs()).sqrt();
        assert!((r - 1e-2 * 5.0).abs() < 1e-15);
        let beta = 2.0 * (c.temperature[0] + c.temperature[1]);
        assert!((beta - 2.5e-3).abs() < 1e-18);
        assert!(LhdiParams { beta: -1.0, ..p }.closure().is_err());
    }

    #[test]
    fn lhdi_ion_is_unperturbed() {
        let p = LhdiParams { k: 2.0, ..LhdiParams::for_mass_ratio(25.0) };
        let c = p.closure().unwrap();
        let g = c.grid(0, p.length(), &[8, 24, 24]).unwrap();
        let f = init_lhdi(&g, &c, 0, QuadratureOrder::Four).unwrap();
        let n = zeroth_moment(&f, MomentSchedule::VelocityMajor);
        let mean = n.iter().sum::<f64>() / n.len() as f64;
        let var = n.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n.len() as f64;
        assert!(var <= 1e-14);
        assert!((mean - 1.0).abs() < 1e-10);
    }

    #[test]
    fn landau_density_mean_and_equilibrium_shape() {
        let p = LandauParams::default();
        let g = PhaseSpaceGrid::new(2, 2, &[8, 8, 32, 32], &[0.0, 0.0, -8.0, -8.0], &[4.0 * PI, 4.0 * PI, 8.0, 8.0]).unwrap();
        let f = init_landau(&g, &p, QuadratureOrder::Eight).unwrap();
        let n = zeroth_moment(&f, MomentSchedule::VelocityMajor);
        let mean = n.iter().sum::<f64>() / n.len() as f64;
        assert!((mean - 1.0).abs() < 1e-8);
        let flat = init_landau(&g, &LandauParams { alpha: 0.0, ..p }, QuadratureOrder::Four).unwrap();
        let n0 = zeroth_moment(&flat, MomentSchedule::VelocityMajor);
        assert!(n0.iter().all(|&x| x == n0[0]));
        assert!(init_landau(&DghParams::default().grid(8, 5.0).unwrap(), &p, QuadratureOrder::Four).is_err());
    }
}
