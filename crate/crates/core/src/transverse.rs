//! Transverse eigenbasis of the cross-section interval `(0, d)`.
//!
//! Dirichlet: `mu_j = (j pi / d)^2`, `phi_j = sqrt(2/d) sin(j pi x / d)`.
//! Neumann: `mu_1 = 0`, `phi_1 = d^{-1/2}`, and for `j >= 2`
//! `mu_j = ((j-1) pi / d)^2`, `phi_j = sqrt(2/d) cos((j-1) pi x / d)`.
//!
//! Mode indices are 1-based throughout the crate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryCondition {
    Dirichlet,
    Neumann,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossSection {
    pub width: f64,
    pub bc: BoundaryCondition,
}

impl CrossSection {
    pub fn new(width: f64, bc: BoundaryCondition) -> Result<Self> {
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::invalid(format!("cross-section width must be positive, got {width}")));
        }
        Ok(Self { width, bc })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransverseMode {
    pub index: usize,
    pub mu: f64,
    /// `Phi_j = phi_j'(0)`.
    pub trace_derivative: f64,
    /// `phi_j(0)`.
    pub trace_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransverseBasis {
    section: CrossSection,
    modes: Vec<TransverseMode>,
}

impl TransverseBasis {
    pub fn build(section: CrossSection, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::invalid("mode count must be at least 1"));
        }
        let section = CrossSection::new(section.width, section.bc)?;
        let d = section.width;
        let amp = (2.0 / d).sqrt();
        let modes = (1..=count)
            .map(|j| {
                let wn = wavenumber(section.bc, j, d);
                match section.bc {
                    BoundaryCondition::Dirichlet => TransverseMode {
                        index: j,
                        mu: wn * wn,
                        trace_derivative: amp * wn,
                        trace_value: 0.0,
                    },
                    BoundaryCondition::Neumann => TransverseMode {
                        index: j,
                        mu: wn * wn,
                        trace_derivative: 0.0,
                        trace_value: if j == 1 { d.sqrt().recip() } else { amp },
                    },
                }
            })
            .collect();
        Ok(Self { section, modes })
    }

    pub fn section(&self) -> CrossSection {
        self.section
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn modes(&self) -> &[TransverseMode] {
        &self.modes
    }

    /// Mode `j` (1-based). Panics when `j` is out of range.
    pub fn mode(&self, j: usize) -> &TransverseMode {
        assert!(j >= 1 && j <= self.modes.len(), "mode index {j} out of range 1..={}", self.modes.len());
        &self.modes[j - 1]
    }

    pub fn mu(&self, j: usize) -> f64 {
        self.mode(j).mu
    }

    /// Evaluates `phi_j(x)`.
    pub fn eval(&self, j: usize, x: f64) -> f64 {
        let _ = self.mode(j);
        phi(self.section, j, x)
    }

    /// Evaluates `phi_j'(x)`.
    pub fn eval_derivative(&self, j: usize, x: f64) -> f64 {
        let _ = self.mode(j);
        let d = self.section.width;
        let wn = wavenumber(self.section.bc, j, d);
        let amp = (2.0 / d).sqrt();
        match self.section.bc {
            BoundaryCondition::Dirichlet => amp * wn * (wn * x).cos(),
            BoundaryCondition::Neumann if j == 1 => 0.0,
            BoundaryCondition::Neumann => -amp * wn * (wn * x).sin(),
        }
    }

    /// `(Phi_j, phi_j(0))` for every mode.
    pub fn boundary_traces(&self) -> Vec<(f64, f64)> {
        self.modes.iter().map(|m| (m.trace_derivative, m.trace_value)).collect()
    }
}

fn wavenumber(bc: BoundaryCondition, j: usize, d: f64) -> f64 {
    match bc {
        BoundaryCondition::Dirichlet => j as f64 * PI / d,
        BoundaryCondition::Neumann => (j - 1) as f64 * PI / d,
    }
}

/// Closed-form `phi_j(x)` without building a basis; used by wide mode sums.
pub(crate) fn phi(section: CrossSection, j: usize, x: f64) -> f64 {
    let d = section.width;
    let wn = wavenumber(section.bc, j, d);
    match section.bc {
        BoundaryCondition::Dirichlet => (2.0 / d).sqrt() * (wn * x).sin(),
        BoundaryCondition::Neumann if j == 1 => d.sqrt().recip(),
        BoundaryCondition::Neumann => (2.0 / d).sqrt() * (wn * x).cos(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn trapezoid(n: usize, d: f64, f: impl Fn(f64) -> f64) -> f64 {
        let h = d / n as f64;
        (0..=n)
            .map(|i| {
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * f(i as f64 * h)
            })
            .sum::<f64>()
            * h
    }

    #[test]
    fn dirichlet_spectrum_on_pi() {
        let b = TransverseBasis::build(CrossSection::new(PI, BoundaryCondition::Dirichlet).unwrap(), 3).unwrap();
        let mu: Vec<f64> = b.modes().iter().map(|m| m.mu).collect();
        assert_abs_diff_eq!(mu[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(mu[1], 4.0, epsilon = 1e-14);
        assert_abs_diff_eq!(mu[2], 9.0, epsilon = 1e-13);
    }

    #[test]
    fn neumann_first_mode_is_constant() {
        let b = TransverseBasis::build(CrossSection::new(PI, BoundaryCondition::Neumann).unwrap(), 2).unwrap();
        assert_eq!(b.mu(1), 0.0);
        assert_abs_diff_eq!(b.mu(2), 1.0, epsilon = 1e-14);
        for x in [0.0, 0.3, 2.0, PI] {
            assert_abs_diff_eq!(b.eval(1, x), PI.powf(-0.5), epsilon = 1e-15);
        }
    }

    #[test]
    fn orthonormal_under_fine_quadrature() {
        for bc in [BoundaryCondition::Dirichlet, BoundaryCondition::Neumann] {
            let d = 2.3;
            let b = TransverseBasis::build(CrossSection::new(d, bc).unwrap(), 6).unwrap();
            for i in 1..=6 {
                for j in 1..=6 {
                    let ip = trapezoid(10_000, d, |x| b.eval(i, x) * b.eval(j, x));
                    let expected = if i == j { 1.0 } else { 0.0 };
                    assert_abs_diff_eq!(ip, expected, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn spectrum_strictly_increasing() {
        for bc in [BoundaryCondition::Dirichlet, BoundaryCondition::Neumann] {
            let b = TransverseBasis::build(CrossSection::new(1.7, bc).unwrap(), 12).unwrap();
            assert!(b.modes().windows(2).all(|w| w[0].mu < w[1].mu));
        }
    }

    #[test]
    fn dirichlet_trace_matches_finite_difference() {
        let b = TransverseBasis::build(CrossSection::new(PI, BoundaryCondition::Dirichlet).unwrap(), 3).unwrap();
        let (phi1, v1) = b.boundary_traces()[0];
        assert_abs_diff_eq!(phi1, (2.0 / PI).sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(phi1, 0.797_884_6, epsilon = 1e-7);
        let h = 1e-6;
        let fd = (-3.0 * b.eval(1, 0.0) + 4.0 * b.eval(1, h) - b.eval(1, 2.0 * h)) / (2.0 * h);
        assert_abs_diff_eq!(fd, phi1, epsilon = 1e-8);
        assert_eq!(v1, 0.0);
        for (_, v) in b.boundary_traces() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn neumann_trace_value() {
        let b = TransverseBasis::build(CrossSection::new(PI, BoundaryCondition::Neumann).unwrap(), 3).unwrap();
        let (dphi, v) = b.boundary_traces()[0];
        assert_eq!(dphi, 0.0);
        assert_abs_diff_eq!(v * v, 1.0 / PI, epsilon = 1e-15);
        assert_abs_diff_eq!(v * v, 0.318_309_9, epsilon = 1e-7);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(CrossSection::new(0.0, BoundaryCondition::Dirichlet).is_err());
        assert!(CrossSection::new(-1.0, BoundaryCondition::Neumann).is_err());
        let cs = CrossSection { width: PI, bc: BoundaryCondition::Dirichlet };
        assert!(TransverseBasis::build(cs, 0).is_err());
        let bad = CrossSection { width: -2.0, bc: BoundaryCondition::Dirichlet };
        assert!(TransverseBasis::build(bad, 3).is_err());
    }

    #[test]
    fn fd_transverse_eigenvalue_converges_second_order() {
        // j-th eigenvalue of the 3-point Laplacian on (0, d) with Dirichlet ends.
        let d = PI;
        let b = TransverseBasis::build(CrossSection::new(d, BoundaryCondition::Dirichlet).unwrap(), 3).unwrap();
        let fd = |n: usize, j: usize| {
            let h = d / n as f64;
            let s = (j as f64 * PI * h / (2.0 * d)).sin();
            4.0 * s * s / (h * h)
        };
        for j in 1..=3 {
            let e1 = (fd(50, j) - b.mu(j)).abs();
            let e2 = (fd(100, j) - b.mu(j)).abs();
            let order = (e1 / e2).log2();
            assert!((order - 2.0).abs() < 0.05, "order {order}");
        }
    }
}
