//! Linear-theory oracles: the plasma dispersion function, a Newton root
//! scanner, and the two-stream, ring (DGH), lower-hybrid-drift and Landau relations.

use std::f64::consts::{PI, TAU};
use std::sync::OnceLock;

use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::problems::{gauss_legendre, DghParams, LhdiClosure};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DispersionError {
    #[error("exp(-z²) overflows for z = {0}")]
    Overflow(Complex64),
    #[error("no root with residual ≤ 1e-10 in the scanned window")]
    NoRoot,
    #[error("quadrature did not converge: change {0:e} between refinements")]
    Quadrature(f64),
    #[error("kernel singular: W = {0} is an integer")]
    Resonance(Complex64),
    #[error("wavenumber {0} is outside the supported range")]
    BadWavenumber(f64),
}

const J: Complex64 = Complex64 { re: 0.0, im: 1.0 };
const WEIDEMAN_TERMS: usize = 48;
const ASYMPTOTIC_RADIUS: f64 = 50.0;

struct Weideman {
    l: f64,
    coeffs: Vec<f64>,
}

/// Coefficients of Weideman's rational expansion, by direct cosine sums.
fn weideman() -> &'static Weideman {
    static TABLE: OnceLock<Weideman> = OnceLock::new();
    TABLE.get_or_init(|| {
        let n = WEIDEMAN_TERMS;
        let m = 2 * n;
        let l = (n as f64 / 2f64.sqrt()).sqrt();
        let g = |k: i64| {
            let t = l * (k as f64 * PI / m as f64 / 2.0).tan();
            (-t * t).exp() * (l * l + t * t)
        };
        let coeffs = (1..=n)
            .map(|j| {
                let mut s = g(0);
                for k in 1..m as i64 {
                    s += 2.0 * g(k) * (PI * k as f64 * j as f64 / m as f64).cos();
                }
                s / (2 * m) as f64
            })
            .collect();
        Weideman { l, coeffs }
    })
}

/// w(z) for Im z ≥ 0 and |z| < 50.
fn faddeeva_upper_rational(z: Complex64) -> Complex64 {
    let w = weideman();
    let lz = w.l - J * z;
    let zz = (w.l + J * z) / lz;
    let mut p = Complex64::new(0.0, 0.0);
    for &c in w.coeffs.iter().rev() {
        p = p * zz + c;
    }
    2.0 * p / (lz * lz) + 1.0 / (PI.sqrt() * lz)
}

/// Asymptotic series (i/√π z) Σ (2n−1)!!/(2z²)ⁿ for Im z ≥ 0, |z| ≥ 50.
fn faddeeva_upper_asymptotic(z: Complex64) -> Complex64 {
    let inv2 = 1.0 / (2.0 * z * z);
    let mut term = Complex64::new(1.0, 0.0);
    let mut sum = term;
    for n in 1..12 {
        term *= (2 * n - 1) as f64 * inv2;
        sum += term;
    }
    J * sum / (PI.sqrt() * z)
}

fn faddeeva_upper(z: Complex64) -> Complex64 {
    if z.norm() < ASYMPTOTIC_RADIUS {
        faddeeva_upper_rational(z)
    } else {
        faddeeva_upper_asymptotic(z)
    }
}

/// Faddeeva function w(z) = e^{−z²} erfc(−iz).
pub fn faddeeva(z: Complex64) -> Result<Complex64, DispersionError> {
    if z.im >= 0.0 {
        return Ok(faddeeva_upper(z));
    }
    let e = -z * z;
    if e.re > 700.0 {
        return Err(DispersionError::Overflow(z));
    }
    Ok(2.0 * e.exp() - faddeeva_upper(-z))
}

/// Z(ζ) = i√π w(ζ).
pub fn plasma_z(zeta: Complex64) -> Result<Complex64, DispersionError> {
    Ok(J * PI.sqrt() * faddeeva(zeta)?)
}

/// 1 + ζZ(ζ), summed directly from the asymptotic series for large |ζ|
/// where the two terms would cancel.
pub fn plasma_response(zeta: Complex64) -> Result<Complex64, DispersionError> {
    if zeta.norm() < ASYMPTOTIC_RADIUS {
        return Ok(1.0 + zeta * plasma_z(zeta)?);
    }
    let inv2 = 1.0 / (2.0 * zeta * zeta);
    let mut term = Complex64::new(1.0, 0.0);
    let mut sum = Complex64::new(0.0, 0.0);
    for n in 1..12 {
        term *= (2 * n - 1) as f64 * inv2;
        sum -= term;
    }
    if zeta.im < 0.0 {
        let e = -zeta * zeta;
        if e.re > 700.0 {
            return Err(DispersionError::Overflow(zeta));
        }
        sum += 2.0 * J * PI.sqrt() * zeta * e.exp();
    }
    Ok(sum)
}

/// Accepted root with its provenance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComplexRoot {
    pub omega: Complex64,
    pub residual: f64,
    pub iterations: usize,
    pub guess: Complex64,
}

pub const RESIDUAL_TOL: f64 = 1e-10;

/// Initial-guess grid for the root scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanWindow {
    pub re: (f64, f64),
    pub im: (f64, f64),
    pub n: usize,
}

impl ScanWindow {
    /// Re ω ∈ [0, 3 ω_max], Im ω ∈ [−1, 1] on a 40×40 grid.
    pub fn standard(omega_max: f64) -> Self {
        Self { re: (0.0, 3.0 * omega_max), im: (-1.0, 1.0), n: 40 }
    }

    fn guesses(&self) -> impl Iterator<Item = Complex64> + '_ {
        let step = |(a, b): (f64, f64), i: usize| a + (b - a) * i as f64 / (self.n - 1) as f64;
        (0..self.n).flat_map(move |i| (0..self.n).map(move |j| Complex64::new(step(self.re, i), step(self.im, j))))
    }

    fn contains(&self, w: Complex64) -> bool {
        let pad_re = 0.05 * (self.re.1 - self.re.0);
        let pad_im = 0.05 * (self.im.1 - self.im.0);
        w.re >= self.re.0 - pad_re && w.re <= self.re.1 + pad_re && w.im >= self.im.0 - pad_im && w.im <= self.im.1 + pad_im
    }
}

/// Newton iteration with a centered-difference derivative.
pub fn newton(f: &dyn Fn(Complex64) -> Result<Complex64, DispersionError>, guess: Complex64, scale: f64) -> Option<ComplexRoot> {
    let mut w = guess;
    for it in 1..=80 {
        let h = 1e-7 * scale.max(w.norm());
        let fw = f(w).ok()?;
        let d = (f(w + h).ok()? - f(w - h).ok()?) / (2.0 * h);
        if !d.is_finite() || d.norm() == 0.0 {
            return None;
        }
        let step = fw / d;
        w -= step;
        if !w.is_finite() {
            return None;
        }
        if step.norm() <= 1e-14 * scale.max(w.norm()) {
            let residual = f(w).ok()?.norm();
            return Some(ComplexRoot { omega: w, residual, iterations: it, guess });
        }
    }
    let residual = f(w).ok()?.norm();
    Some(ComplexRoot { omega: w, residual, iterations: 80, guess })
}

/// Runs Newton from every guess and returns all accepted roots (deduplicated),
/// sorted by decreasing Im ω.
pub fn scan_roots(f: &dyn Fn(Complex64) -> Result<Complex64, DispersionError>, window: &ScanWindow) -> Vec<ComplexRoot> {
    let scale = (window.re.1 - window.re.0).abs().max((window.im.1 - window.im.0).abs());
    let mut roots: Vec<ComplexRoot> = Vec::new();
    for g in window.guesses() {
        if let Some(r) = newton(f, g, scale) {
            if r.residual <= RESIDUAL_TOL && window.contains(r.omega) && !roots.iter().any(|q| (q.omega - r.omega).norm() < 1e-8 * scale) {
                roots.push(r);
            }
        }
    }
    roots.sort_by(|a, b| b.omega.im.total_cmp(&a.omega.im));
    roots
}

/// Root with the largest imaginary part.
pub fn fastest_root(f: &dyn Fn(Complex64) -> Result<Complex64, DispersionError>, window: &ScanWindow) -> Result<ComplexRoot, DispersionError> {
    scan_roots(f, window).into_iter().next().ok_or(DispersionError::NoRoot)
}

/// Polishes a known approximate root (for continuation along k-scans).
pub fn refine_root(f: &dyn Fn(Complex64) -> Result<Complex64, DispersionError>, guess: Complex64) -> Result<ComplexRoot, DispersionError> {
    newton(f, guess, guess.norm().max(1e-3)).filter(|r| r.residual <= RESIDUAL_TOL).ok_or(DispersionError::NoRoot)
}

/// Symmetric counter-streaming Maxwellian beams of half density each.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoStreamRelation {
    pub k: f64,
    pub vt: f64,
    pub u: f64,
}

impl TwoStreamRelation {
    /// 1 + (1/(2k²v_T²)) Σ_± (1 + ζ_± Z(ζ_±)), ζ_± = (ω/|k| ∓ u)/(√2 v_T).
    pub fn eval(&self, w: Complex64) -> Result<Complex64, DispersionError> {
        let s = (2.0f64).sqrt() * self.vt;
        let mut sum = Complex64::new(0.0, 0.0);
        for u in [self.u, -self.u] {
            sum += plasma_response((w / self.k.abs() - u) / s)?;
        }
        Ok(1.0 + sum / (2.0 * self.k * self.k * self.vt * self.vt))
    }
}

/// Fastest-growing two-stream root.
pub fn two_stream_dispersion(k: f64, vt: f64, u: f64) -> Result<ComplexRoot, DispersionError> {
    if k <= 0.0 {
        return Err(DispersionError::BadWavenumber(k));
    }
    let rel = TwoStreamRelation { k, vt, u };
    fastest_root(&|w| rel.eval(w), &ScanWindow::standard(1.0))
}

/// Electrostatic Langmuir relation for a unit Maxwellian.
pub fn landau_relation(k: f64, w: Complex64) -> Result<Complex64, DispersionError> {
    let zeta = w / (2f64.sqrt() * k);
    Ok(1.0 + plasma_response(zeta)? / (k * k))
}

/// Least-damped Langmuir root (Re ω > 0), for 0 < k ≤ 1.
pub fn landau_rate(k: f64) -> Result<ComplexRoot, DispersionError> {
    if k <= 0.0 || k > 1.0 {
        return Err(DispersionError::BadWavenumber(k));
    }
    let window = ScanWindow::standard(1.0);
    scan_roots(&|w| landau_relation(k, w), &window)
        .into_iter()
        .find(|r| r.omega.re > 1e-6)
        .ok_or(DispersionError::NoRoot)
}

/// Composite Gauss–Legendre rule on [a, b].
#[derive(Debug, Clone)]
pub struct CompositeRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl CompositeRule {
    pub fn new(a: f64, b: f64, panels: usize, order: usize) -> Self {
        let (x, w) = gauss_legendre(order);
        let h = (b - a) / panels as f64;
        let mut nodes = Vec::with_capacity(panels * order);
        let mut weights = Vec::with_capacity(panels * order);
        for p in 0..panels {
            let lo = a + p as f64 * h;
            for (xi, wi) in x.iter().zip(&w) {
                nodes.push(lo + 0.5 * h * (xi + 1.0));
                weights.push(0.5 * h * wi);
            }
        }
        Self { nodes, weights }
    }
}

/// F₀(τ) = ∫₀^∞ f₀(v) J₀(b v) 2πv dv for the ring, with b = 2k cos(τ/2)/|Ω|,
/// integrated in s = v²/α² on a composite rule.
pub fn ring_bessel_transform(ring: &DghParams, b: f64) -> f64 {
    static RULE: OnceLock<CompositeRule> = OnceLock::new();
    let rule = RULE.get_or_init(|| CompositeRule::new(0.0, 80.0, 320, 8));
    let ell = ring.ell as i32;
    let fact: f64 = (1..=ring.ell).map(f64::from).product();
    let a = ring.alpha_perp;
    rule.nodes.iter().zip(&rule.weights).map(|(&s, &w)| w * s.powi(ell) * (-s).exp() * libm::j0(b * a * s.sqrt())).sum::<f64>() / fact
}

/// Electrostatic perpendicular relation for the ring at wavenumber k.
#[derive(Debug, Clone)]
pub struct DghRelation {
    pub k: f64,
    /// |Ω_e| / ω_pe
    pub omega_c: f64,
    tau: CompositeRule,
    f0: Vec<f64>,
}

impl DghRelation {
    pub fn new(ring: &DghParams, panels: usize) -> Self {
        let tau = CompositeRule::new(0.0, PI, panels, 16);
        let f0 = tau.nodes.iter().map(|&t| ring_bessel_transform(ring, 2.0 * ring.k * (t / 2.0).cos() / ring.cyclotron_ratio)).collect();
        Self { k: ring.k, omega_c: ring.cyclotron_ratio, tau, f0 }
    }

    /// 1 + (ω_pe²/Ω²) ∫₀^π sin(ντ)/sin(νπ) sin τ F₀(τ) dτ, ν = ω/|Ω|.
    pub fn eval(&self, w: Complex64) -> Result<Complex64, DispersionError> {
        let nu = w / self.omega_c;
        let den = (nu * PI).sin();
        if den.norm() < 1e-13 {
            return Err(DispersionError::Resonance(nu));
        }
        let mut s = Complex64::new(0.0, 0.0);
        for ((&t, &wt), &f) in self.tau.nodes.iter().zip(&self.tau.weights).zip(&self.f0) {
            s += wt * (nu * t).sin() * t.sin() * f;
        }
        Ok(1.0 + s / (den * self.omega_c * self.omega_c))
    }
}

/// Fastest-growing ring root; the quadrature is checked by doubling the τ rule.
pub fn dgh_dispersion(ring: &DghParams) -> Result<ComplexRoot, DispersionError> {
    if ring.k <= 0.0 {
        return Err(DispersionError::BadWavenumber(ring.k));
    }
    let rel = DghRelation::new(ring, 16);
    let root = fastest_root(&|w| rel.eval(w), &ScanWindow::standard(1.0f64.max(ring.cyclotron_ratio)))?;
    let fine = DghRelation::new(ring, 32);
    let change = fine.eval(root.omega)?.norm();
    if change > RESIDUAL_TOL {
        return Err(DispersionError::Quadrature(change));
    }
    Ok(root)
}

/// Per-species data for the drifting magnetized Maxwellian relation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagnetizedSpecies {
    /// ω_ps²
    pub plasma_freq2: f64,
    /// Signed gyrofrequency Ω_s.
    pub gyro: f64,
    pub thermal_speed: f64,
}

/// Lower-hybrid-drift relation with the exp(jWφ)/(1 − exp(2πjW)) kernel.
#[derive(Debug, Clone)]
pub struct LhdiRelation {
    pub k: f64,
    pub g_y: f64,
    pub species: Vec<MagnetizedSpecies>,
    phi: CompositeRule,
}

impl LhdiRelation {
    pub fn new(k: f64, g_y: f64, species: Vec<MagnetizedSpecies>, panels: usize) -> Self {
        Self { k, g_y, species, phi: CompositeRule::new(0.0, TAU, panels, 16) }
    }

    pub fn from_closure(c: &LhdiClosure, k: f64, panels: usize) -> Self {
        let species = (0..2)
            .map(|s| {
                let sp = &c.species[s];
                MagnetizedSpecies { plasma_freq2: sp.charge * sp.charge / sp.mass * sp.plasma_freq * sp.plasma_freq, gyro: sp.gyro_factor(), thermal_speed: c.thermal_speed[s] }
            })
            .collect();
        Self::new(k, c.g_y, species, panels)
    }

    /// W_s = ω/Ω_s − k G_y/Ω_s².
    pub fn doppler(&self, s: usize, w: Complex64) -> Complex64 {
        let om = self.species[s].gyro;
        w / om - self.k * self.g_y / (om * om)
    }

    /// 1 + Σ_s (ω_ps²/Ω_s²) ∫₀^{2π} e^{jWφ}/(1 − e^{2πjW}) sin φ · 2π I_s(φ) dφ, where
    /// I_s = ∫ f₀ J₀((2kv/Ω_s) sin(φ/2)) v dv = e^{−a²v_T²/2}/2π for a Maxwellian.
    /// The 2π restores the v-plane normalization so the G_y = 0 limit is the
    /// standard magnetized Maxwellian relation.
    pub fn eval(&self, w: Complex64) -> Result<Complex64, DispersionError> {
        let mut total = Complex64::new(1.0, 0.0);
        for (s, sp) in self.species.iter().enumerate() {
            let wd = self.doppler(s, w);
            let den = 1.0 - (2.0 * PI * J * wd).exp();
            if den.norm() < 1e-13 {
                return Err(DispersionError::Resonance(wd));
            }
            let mut acc = Complex64::new(0.0, 0.0);
            for (&p, &wt) in self.phi.nodes.iter().zip(&self.phi.weights) {
                let a = 2.0 * self.k / sp.gyro * (p / 2.0).sin();
                let i_s = (-0.5 * a * a * sp.thermal_speed * sp.thermal_speed).exp();
                acc += wt * (J * wd * p).exp() * p.sin() * i_s;
            }
            total += sp.plasma_freq2 / (sp.gyro * sp.gyro) * acc / den;
        }
        Ok(total)
    }
}

/// Fastest-growing lower-hybrid-drift root in `window`; the φ rule is checked by doubling.
pub fn lhdi_dispersion(c: &LhdiClosure, k: f64, window: &ScanWindow) -> Result<ComplexRoot, DispersionError> {
    if k <= 0.0 {
        return Err(DispersionError::BadWavenumber(k));
    }
    let rel = LhdiRelation::from_closure(c, k, 64);
    let root = fastest_root(&|w| rel.eval(w), window)?;
    let fine = LhdiRelation::from_closure(c, k, 128);
    let change = fine.eval(root.omega)?.norm();
    if change > RESIDUAL_TOL {
        return Err(DispersionError::Quadrature(change));
    }
    Ok(root)
}

/// Guess window scaled to the lower-hybrid frequency √(Ω_i |Ω_e|) and the
/// ion Doppler shift, since the standard window is far too coarse here.
pub fn lhdi_window(c: &LhdiClosure, k: f64) -> ScanWindow {
    let lh = (c.gyrofrequency(0) * c.gyrofrequency(1)).abs().sqrt();
    let shift = k * c.drift[0].abs().max(c.drift[1].abs());
    ScanWindow { re: (-3.0 * lh - shift, 3.0 * lh + shift), im: (1e-3, 3.0 * lh), n: 40 }
}
