//! Half-plane cell problem for a window `(-a, a)` on the boundary of the
//! upper half-plane: `X` harmonic, `X = 0` off the window, `dX/dn = 0` on it,
//! `X ~ xi_2` at infinity. The explicit solution is `Im sqrt(z^2 - a^2)`.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::modesum::linear_fit;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSolution {
    pub half_width: f64,
    /// Far-field constant `c` in `X = xi_2 + c xi_2 / rho^2 + o(1/rho)`.
    pub c: f64,
}

impl CellSolution {
    pub fn eval(&self, xi1: f64, xi2: f64) -> Result<f64> {
        if !(xi2 >= 0.0) {
            return Err(Error::Domain(format!("cell solution is defined for xi_2 >= 0, got {xi2}")));
        }
        Ok(window_potential(self.half_width, xi1, xi2))
    }
}

/// `Im sqrt(z - a) sqrt(z + a)`; the split into two principal roots keeps the
/// branch cut on the window, so the value is nonnegative on the closed upper
/// half-plane.
fn window_potential(a: f64, xi1: f64, xi2: f64) -> f64 {
    let z = Complex64::new(xi1, xi2);
    let v = ((z - a).sqrt() * (z + a).sqrt()).im;
    // -0.0 and roundoff negatives on the Dirichlet part
    v.max(0.0)
}

pub fn explicit_window_solution_2d(a: f64) -> Result<CellSolution> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::invalid(format!("window half-width must be positive, got {a}")));
    }
    Ok(CellSolution { half_width: a, c: 0.5 * a * a })
}

/// Fits `(X(0, rho) - rho) rho = c + d / rho^2` over geometric samples in
/// `[rho_min, rho_max]` and returns `c`.
pub fn fit_farfield_coefficient(x: impl Fn(f64, f64) -> f64, rho_min: f64, rho_max: f64) -> Result<f64> {
    if !(rho_min > 0.0) || !(rho_max >= 2.0 * rho_min) || !rho_max.is_finite() {
        return Err(Error::invalid(format!(
            "need 0 < 2 rho_min <= rho_max, got [{rho_min}, {rho_max}]"
        )));
    }
    let n = 64;
    let ratio = (rho_max / rho_min).ln();
    let rho: Vec<f64> = (0..n).map(|i| rho_min * (ratio * i as f64 / (n - 1) as f64).exp()).collect();
    let inv2: Vec<f64> = rho.iter().map(|r| r.powi(-2)).collect();
    let y: Vec<f64> = rho.iter().map(|&r| (x(0.0, r) - r) * r).collect();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fit("non-finite far-field samples".into()));
    }
    let (slope, c, _) = linear_fit(&inv2, &y);
    let rms = (y.iter().zip(&inv2).map(|(v, t)| (v - c - slope * t).powi(2)).sum::<f64>() / n as f64).sqrt();
    let spread = if rms == 0.0 { 0.0 } else { rms / c.abs().max(f64::MIN_POSITIVE) };
    if spread > 1e-2 {
        return Err(Error::PoorFit { spread });
    }
    Ok(c)
}
