//! Von Neumann analysis of the upwind stencil under RK4: symbol curves,
//! CFL constants and the two-dimensional stability envelope.

use std::f64::consts::TAU;

use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StabilityError {
    #[error("bisection did not bracket a stability limit below {0}")]
    NoBracket(f64),
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("tangency scan found no {0} branch")]
    MissingBranch(&'static str),
    #[error("neither tangency branch encloses the other")]
    NoEnclosure,
}

/// Coefficients of e^{jkξ} for k = −3..=2 in the fourth-order upwind symbol (×60).
pub const UPWIND_COEFFS: [f64; 6] = [2.0, -15.0, 60.0, -20.0, -30.0, 3.0];

fn symbol_from(coeffs: &[f64; 6], xi: f64) -> Complex64 {
    coeffs.iter().enumerate().map(|(i, &c)| c * Complex64::from_polar(1.0, (i as f64 - 3.0) * xi)).sum()
}

/// 60 × the semi-discrete eigenvalue of −∂_x for unit speed and width.
pub fn upwind_symbol(xi: f64) -> Complex64 {
    symbol_from(&UPWIND_COEFFS, xi)
}

fn upwind_symbol_derivative(xi: f64) -> Complex64 {
    let j = Complex64::new(0.0, 1.0);
    UPWIND_COEFFS
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let k = i as f64 - 3.0;
            j * k * c * Complex64::from_polar(1.0, k * xi)
        })
        .sum()
}

/// Symbol of first-order upwind, e^{−jξ} − 1.
pub fn first_order_symbol(xi: f64) -> Complex64 {
    Complex64::from_polar(1.0, -xi) - 1.0
}

/// Stability polynomial shared by every four-stage fourth-order RK method.
pub fn rk4_stability(z: Complex64) -> Complex64 {
    1.0 + z * (1.0 + z * (0.5 + z * (1.0 / 6.0 + z / 24.0)))
}

/// Largest σ with max_ξ |R(σ · scale · symbol(ξ))| ≤ 1, bisected to `tol`.
pub fn cfl_constant(
    symbol: impl Fn(f64) -> Complex64,
    scale: f64,
    poly: impl Fn(Complex64) -> Complex64,
    samples: usize,
    tol: f64,
) -> Result<f64, StabilityError> {
    if samples < 4096 {
        return Err(StabilityError::TooFewSamples { min: 4096, got: samples });
    }
    let curve: Vec<Complex64> = (0..samples).map(|i| scale * symbol(TAU * i as f64 / samples as f64)).collect();
    let stable = |s: f64| curve.iter().all(|&z| poly(s * z).norm() <= 1.0 + 1e-12);
    let mut hi = 1.0;
    while stable(hi) {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(StabilityError::NoBracket(hi));
        }
    }
    let mut lo = 0.0;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if stable(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// σ for fourth-order FV + RK4 and the per-stage value σ/4.
pub fn fourth_order_rk4_cfl() -> Result<(f64, f64), StabilityError> {
    let s = cfl_constant(upwind_symbol, 1.0 / 60.0, rk4_stability, 8192, 1e-5)?;
    Ok((s, s / 4.0))
}

pub fn first_order_rk4_cfl() -> Result<(f64, f64), StabilityError> {
    let s = cfl_constant(first_order_symbol, 1.0, rk4_stability, 8192, 1e-5)?;
    Ok((s, s / 4.0))
}

/// A closed curve in the complex plane sampled in order.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolCurve {
    pub points: Vec<Complex64>,
    /// Parameter values that generated each point (ξ₁, ξ₂).
    pub params: Vec<[f64; 2]>,
}

impl SymbolCurve {
    pub fn sample(f: impl Fn(f64) -> Complex64, n: usize) -> Self {
        let params: Vec<[f64; 2]> = (0..n).map(|i| [TAU * i as f64 / n as f64; 2]).collect();
        Self { points: params.iter().map(|p| f(p[0])).collect(), params }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn diameter(&self) -> f64 {
        let mut d = 0.0f64;
        for a in &self.points {
            for b in self.points.iter().step_by((self.points.len() / 512).max(1)) {
                d = d.max((a - b).norm());
            }
        }
        d
    }

    /// Shoelace area (absolute).
    pub fn area(&self) -> f64 {
        let n = self.points.len();
        let mut s = 0.0;
        for i in 0..n {
            let a = self.points[i];
            let b = self.points[(i + 1) % n];
            s += a.re * b.im - b.re * a.im;
        }
        0.5 * s.abs()
    }

    /// Even-odd point-in-polygon test.
    pub fn contains(&self, z: Complex64) -> bool {
        let n = self.points.len();
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (a, b) = (self.points[i], self.points[j]);
            if (a.im > z.im) != (b.im > z.im) {
                let x = a.re + (z.im - a.im) * (b.re - a.re) / (b.im - a.im);
                if z.re < x {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    /// Distance to the polygon, positive inside.
    pub fn signed_distance(&self, z: Complex64) -> f64 {
        let n = self.points.len();
        let mut d = f64::INFINITY;
        for i in 0..n {
            let a = self.points[i];
            let b = self.points[(i + 1) % n];
            let ab = b - a;
            let t = (((z - a) * ab.conj()).re / ab.norm_sqr()).clamp(0.0, 1.0);
            d = d.min((a + t * ab - z).norm());
        }
        if self.contains(z) {
            d
        } else {
            -d
        }
    }
}

/// Distance from `z` to the smooth curve scale·P(ξ), positive inside.
/// The nearest sample is refined by a golden-section search in ξ.
pub fn signed_distance_to_scaled_symbol(z: Complex64, scale: f64, polygon: &SymbolCurve) -> f64 {
    let n = polygon.points.len();
    let (mut best, mut xi) = (f64::INFINITY, 0.0);
    for (p, par) in polygon.points.iter().zip(&polygon.params) {
        let d = (p - z).norm();
        if d < best {
            best = d;
            xi = par[0];
        }
    }
    let h = TAU / n as f64;
    let dist = |x: f64| (scale * upwind_symbol(x) - z).norm();
    // golden-section over the bracketing samples
    let (mut a, mut b) = (xi - h, xi + h);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if dist(c) < dist(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let d = dist(0.5 * (a + b)).min(best);
    if polygon.contains(z) {
        d
    } else {
        -d
    }
}

/// (Σ w_α) · P(ξ).
pub fn approx_envelope(weights: &[f64], samples: usize) -> SymbolCurve {
    let w: f64 = weights.iter().sum();
    SymbolCurve::sample(|x| w * upwind_symbol(x), samples)
}

/// Both solution branches of the tangency condition for w₁P(ξ₁) + w₂P(ξ₂).
#[derive(Debug, Clone)]
pub struct EnvelopeBranches {
    /// Outer branch: the envelope.
    pub accepted: SymbolCurve,
    /// Branch enclosed by the accepted one.
    pub rejected: SymbolCurve,
    /// Worst signed distance of rejected points inside the accepted polygon.
    pub enclosure_margin: f64,
}

/// Jacobian determinant of (ξ₁, ξ₂) ↦ w₁P(ξ₁) + w₂P(ξ₂) viewed as a map to ℝ².
pub fn tangency_determinant(w1: f64, w2: f64, x1: f64, x2: f64) -> f64 {
    let a = w1 * upwind_symbol_derivative(x1);
    let b = w2 * upwind_symbol_derivative(x2);
    a.re * b.im - a.im * b.re
}

fn wrap_angle(x: f64) -> f64 {
    (x + TAU / 2.0).rem_euclid(TAU) - TAU / 2.0
}

/// Scans an n×n torus grid for sign changes of the tangency determinant
/// along ξ₂, polishes each root by bisection and splits the roots into the
/// diagonal branch (ξ₁ = ξ₂) and the off-diagonal branch.
pub fn true_envelope_2d(w1: f64, w2: f64, n: usize) -> Result<EnvelopeBranches, StabilityError> {
    let h = TAU / n as f64;
    let mut diag = (Vec::new(), Vec::new());
    let mut off = (Vec::new(), Vec::new());
    for i in 0..n {
        // ξ₁ sits between ξ₂ samples so diagonal roots are never on a node
        let x1 = (i as f64 + 0.5) * h;
        let g: Vec<f64> = (0..=n).map(|j| tangency_determinant(w1, w2, x1, j as f64 * h)).collect();
        for j in 0..n {
            if g[j] == 0.0 || g[j].signum() != g[j + 1].signum() {
                let (mut a, mut b) = (j as f64 * h, (j + 1) as f64 * h);
                let ga = g[j];
                for _ in 0..70 {
                    let m = 0.5 * (a + b);
                    let gm = tangency_determinant(w1, w2, x1, m);
                    if gm == 0.0 {
                        a = m;
                        b = m;
                        break;
                    }
                    if gm.signum() == ga.signum() {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                let x2 = 0.5 * (a + b);
                let z = w1 * upwind_symbol(x1) + w2 * upwind_symbol(x2);
                let target = if wrap_angle(x2 - x1).abs() < 1e-6 { &mut diag } else { &mut off };
                target.0.push(z);
                target.1.push([x1, x2]);
            }
        }
    }
    if diag.0.is_empty() {
        return Err(StabilityError::MissingBranch("diagonal"));
    }
    if off.0.is_empty() {
        return Err(StabilityError::MissingBranch("off-diagonal"));
    }
    let a = SymbolCurve { points: diag.0, params: diag.1 };
    let b = SymbolCurve { points: off.0, params: off.1 };
    let worst = |outer: &SymbolCurve, inner: &SymbolCurve| {
        inner.points.iter().map(|&z| outer.signed_distance(z)).fold(f64::INFINITY, f64::min)
    };
    let tol = -1e-6 * a.diameter();
    let ab = worst(&a, &b);
    if ab >= tol {
        return Ok(EnvelopeBranches { accepted: a, rejected: b, enclosure_margin: ab });
    }
    let ba = worst(&b, &a);
    if ba >= tol {
        return Ok(EnvelopeBranches { accepted: b, rejected: a, enclosure_margin: ba });
    }
    Err(StabilityError::NoEnclosure)
}

/// Smallest signed distance of `curve` points to the approximate envelope
/// for `weights`, relative to the approximate curve's diameter.
pub fn enclosure_by_approx(curve: &SymbolCurve, weights: &[f64]) -> f64 {
    let w: f64 = weights.iter().sum();
    let approx = approx_envelope(weights, 16384);
    let diam = approx.diameter();
    curve.points.iter().map(|&z| signed_distance_to_scaled_symbol(z, w, &approx)).fold(f64::INFINITY, f64::min) / diam
}
