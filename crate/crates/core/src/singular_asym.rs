//! Leading pole terms for the singular boundary perturbations: a Neumann
//! window cut into a Dirichlet wall, and a Dirichlet patch placed on a Neumann
//! wall. Both sit at `x = 0` on the `x_2 = 0` side of the strip.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modesum::exponent_unchecked;
use crate::regular_pole::{classify_pole, Classification};
use crate::transverse::{BoundaryCondition, TransverseBasis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SingularKind {
    DirichletGuideNeumannWindow,
    NeumannGuideDirichletPatch,
}

impl SingularKind {
    fn guide_condition(self) -> BoundaryCondition {
        match self {
            SingularKind::DirichletGuideNeumannWindow => BoundaryCondition::Dirichlet,
            SingularKind::NeumannGuideDirichletPatch => BoundaryCondition::Neumann,
        }
    }
}

/// Window `eps * omega` with `omega = (-a, a)` when `n = 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub dimension: usize,
    pub half_width: f64,
    pub eps: f64,
    pub kind: SingularKind,
}

impl WindowSpec {
    pub fn new(dimension: usize, half_width: f64, eps: f64, kind: SingularKind) -> Result<Self> {
        if dimension < 2 {
            return Err(Error::invalid(format!("dimension must be at least 2, got {dimension}")));
        }
        if !(half_width > 0.0) || !half_width.is_finite() {
            return Err(Error::invalid(format!("window half-width must be positive, got {half_width}")));
        }
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::invalid(format!("scale eps must be positive, got {eps}")));
        }
        Ok(Self { dimension, half_width, eps, kind })
    }

    fn expect_kind(&self, kind: SingularKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::invalid(format!("expected a {kind:?} spec, got {:?}", self.kind)));
        }
        Ok(())
    }
}

/// Power of `eps` (or inverse logarithm) carried by the leading term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AsymptoticOrder {
    Power(usize),
    InverseLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AsymptoticPole {
    pub k_lead: f64,
    /// Leading `Im k`; zero when no open channel lies below the threshold.
    pub im_k_lead: f64,
    /// `-k_lead^2`, measured from the threshold.
    pub lambda_lead: f64,
    pub a1_pred: Option<Complex64>,
    pub order: AsymptoticOrder,
    /// `None` for `m >= 2` until the width is known.
    pub classification: Option<Classification>,
}

/// Surface area of the unit sphere in `R^n`.
pub fn unit_sphere_area(n: usize) -> f64 {
    use std::f64::consts::PI;
    // |S_1| = 2 (two points), |S_2| = 2 pi, |S_{n+2}| = 2 pi |S_n| / n
    let (mut area, mut dim) = if n % 2 == 0 { (2.0 * PI, 2) } else { (2.0, 1) };
    while dim < n {
        area *= 2.0 * PI / dim as f64;
        dim += 2;
    }
    area
}

fn window_strength(spec: &WindowSpec, c_n: f64, trace: f64) -> Result<f64> {
    if !(c_n > 0.0) || !c_n.is_finite() {
        return Err(Error::invalid(format!("cell constant must be positive, got {c_n}")));
    }
    if trace == 0.0 {
        return Err(Error::DegenerateTrace("Phi_m = 0 makes the window formula void".into()));
    }
    Ok(c_n * unit_sphere_area(spec.dimension) * trace * trace / 4.0)
}

/// `k = eps^n c_n |S_n| Phi_m^2 / 4`.
pub fn dirichlet_window_pole(spec: &WindowSpec, c_n: f64, phi_m: f64, m: usize) -> Result<AsymptoticPole> {
    spec.expect_kind(SingularKind::DirichletGuideNeumannWindow)?;
    if m == 0 {
        return Err(Error::invalid("threshold index m must be at least 1"));
    }
    let tau = window_strength(spec, c_n, phi_m)?;
    let n = spec.dimension;
    let k_lead = spec.eps.powi(n as i32) * tau;
    Ok(AsymptoticPole {
        k_lead,
        im_k_lead: 0.0,
        lambda_lead: -k_lead * k_lead,
        a1_pred: if m == 1 { Some(Complex64::from(1.0)) } else { None },
        order: AsymptoticOrder::Power(n),
        classification: if m == 1 { Some(Classification::BoundState) } else { None },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WindowWidth {
    pub im_k_lead: f64,
    pub a1_pred: Complex64,
    pub classification: Classification,
}

/// `Im k = -eps^{2n} (c_n |S_n| Phi_m / 4)^2 sum_{j<m} Phi_j^2 / sqrt(mu_m - mu_j)`
/// together with `a_1 = k Phi_1 / (K_1 Phi_m)`.
pub fn dirichlet_window_width(spec: &WindowSpec, c_n: f64, basis: &TransverseBasis, m: usize) -> Result<WindowWidth> {
    spec.expect_kind(SingularKind::DirichletGuideNeumannWindow)?;
    if basis.section().bc != BoundaryCondition::Dirichlet {
        return Err(Error::invalid("window formulas need a Dirichlet guide"));
    }
    if m == 0 || m > basis.len() {
        return Err(Error::invalid(format!("threshold index {m} outside 1..={}", basis.len())));
    }
    let phi_m = basis.mode(m).trace_derivative;
    let pole = dirichlet_window_pole(spec, c_n, phi_m, m)?;
    let n = spec.dimension as i32;
    let amp = c_n * unit_sphere_area(spec.dimension) * phi_m / 4.0;
    let mu_m = basis.mu(m);
    let sum: f64 = (1..m)
        .map(|j| basis.mode(j).trace_derivative.powi(2) / (mu_m - basis.mu(j)).sqrt())
        .sum();
    let im_k_lead = -spec.eps.powi(2 * n) * amp * amp * sum;
    let k = Complex64::from(pole.k_lead);
    let k1 = exponent_unchecked(basis.mu(1), mu_m, 1, m, k);
    let a1_pred = k * basis.mode(1).trace_derivative / (k1 * phi_m);
    let classification = classify_pole(Complex64::new(pole.k_lead, im_k_lead), m, Some(a1_pred))?;
    Ok(WindowWidth { im_k_lead, a1_pred, classification })
}

/// Dirichlet patch on a Neumann wall. `n = 2`: `k = pi phi_m(0)^2 / (2 ln eps)`;
/// `n >= 3`: `k = -eps^{n-2} C_n |S_n| phi_m(0)^2 / 4`.
pub fn neumann_patch_pole(
    spec: &WindowSpec,
    basis: &TransverseBasis,
    m: usize,
    capacity: Option<f64>,
) -> Result<AsymptoticPole> {
    spec.expect_kind(SingularKind::NeumannGuideDirichletPatch)?;
    if basis.section().bc != BoundaryCondition::Neumann {
        return Err(Error::invalid("patch formulas need a Neumann guide"));
    }
    if m == 0 || m > basis.len() {
        return Err(Error::invalid(format!("threshold index {m} outside 1..={}", basis.len())));
    }
    let trace = basis.mode(m).trace_value;
    if trace == 0.0 {
        return Err(Error::DegenerateTrace("phi_m(0) = 0 makes the patch formula void".into()));
    }
    let n = spec.dimension;
    let (k_lead, order) = if n == 2 {
        if !(spec.eps < 1.0) {
            return Err(Error::invalid(format!("logarithmic term needs eps < 1, got {}", spec.eps)));
        }
        (std::f64::consts::PI * trace * trace / (2.0 * spec.eps.ln()), AsymptoticOrder::InverseLog)
    } else {
        let cap = capacity.ok_or(Error::MissingCapacity)?;
        if !(cap > 0.0) || !cap.is_finite() {
            return Err(Error::invalid(format!("capacity must be positive, got {cap}")));
        }
        let k = -spec.eps.powi(n as i32 - 2) * cap * unit_sphere_area(n) * trace * trace / 4.0;
        (k, AsymptoticOrder::Power(n - 2))
    };
    Ok(AsymptoticPole {
        k_lead,
        im_k_lead: 0.0,
        lambda_lead: -k_lead * k_lead,
        a1_pred: None,
        order,
        classification: Some(classify_pole(Complex64::from(k_lead), m, None)?),
    })
}

/// Fitted near-field singularity of the limit profile `Psi_m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NearFieldReport {
    /// Coefficient of `x_2 / r^2` (window) or `-ln r` (patch).
    pub singular: Complex64,
    pub predicted: f64,
    pub relative_deviation: f64,
    pub constant: Complex64,
    pub linear: Complex64,
}

fn check_guide(kind: SingularKind, basis: &TransverseBasis, m: usize) -> Result<f64> {
    if basis.section().bc != kind.guide_condition() {
        return Err(Error::invalid(format!("{kind:?} needs a {:?} guide", kind.guide_condition())));
    }
    if m == 0 || m >= basis.len() {
        return Err(Error::invalid(format!("threshold index {m} needs more than {} modes", basis.len())));
    }
    let mode = basis.mode(m);
    let t = match kind {
        SingularKind::DirichletGuideNeumannWindow => mode.trace_derivative,
        SingularKind::NeumannGuideDirichletPatch => mode.trace_value,
    };
    if t == 0.0 {
        return Err(Error::DegenerateTrace(format!("boundary trace of mode {m} vanishes")));
    }
    Ok(t)
}

fn profile_unchecked(kind: SingularKind, m: usize, k: f64, basis: &TransverseBasis, x1: f64, x2: f64, t_m: f64) -> Complex64 {
    let kc = Complex64::from(k);
    let mu_m = basis.mu(m);
    basis
        .modes()
        .iter()
        .map(|mode| {
            let j = mode.index;
            let t_j = match kind {
                SingularKind::DirichletGuideNeumannWindow => mode.trace_derivative,
                SingularKind::NeumannGuideDirichletPatch => mode.trace_value,
            };
            let kj = exponent_unchecked(mode.mu, mu_m, j, m, kc);
            kc * t_j / (kj * t_m) * basis.eval(j, x2) * (-kj * x1.abs()).exp()
        })
        .sum()
}

/// Limit profile `Psi_m(x, k)` built from the mode-sum Green function with its
/// source on the boundary point `0`, normalized so that `Psi_m -> phi_m` as
/// `k -> 0` away from the source.
pub fn near_field_profile(kind: SingularKind, m: usize, k: f64, basis: &TransverseBasis, x1: f64, x2: f64) -> Result<Complex64> {
    let t_m = check_guide(kind, basis, m)?;
    if !(k > 0.0) {
        return Err(Error::invalid(format!("k must be positive, got {k}")));
    }
    if x1 == 0.0 && x2 == 0.0 {
        return Err(Error::Domain("the profile is singular at the source point".into()));
    }
    Ok(profile_unchecked(kind, m, k, basis, x1, x2, t_m))
}

/// Fits `Psi_m` along the diagonal ray at radii `r in [0.01, 0.1]` against the
/// expected singular term plus `1` and `r`, and compares the singular
/// coefficient with `4k / (T_m |S_2|)`, `T_m` the boundary trace of `phi_m`.
pub fn near_field_check(kind: SingularKind, m: usize, k: f64, basis: &TransverseBasis) -> Result<NearFieldReport> {
    let t_m = check_guide(kind, basis, m)?;
    if !(k > 0.0 && k <= 0.05) {
        return Err(Error::invalid(format!("near-field check needs 0 < k <= 0.05, got {k}")));
    }
    let (r_min, r_max) = (0.01, 0.1);
    let theta = std::f64::consts::FRAC_PI_4;
    let width = basis.section().width;
    let last = basis.mode(basis.len());
    let decay = ((last.mu - basis.mu(m)).max(0.0)).sqrt() * r_min * theta.cos();
    if decay < 25.0 {
        return Err(Error::invalid(format!(
            "{} modes do not resolve radius {r_min} on a guide of width {width}",
            basis.len()
        )));
    }
    let samples = 40;
    let radii: Vec<f64> = (0..samples)
        .map(|i| r_min * ((r_max / r_min).ln() * i as f64 / (samples - 1) as f64).exp())
        .collect();
    let singular = |r: f64| match kind {
        SingularKind::DirichletGuideNeumannWindow => theta.sin() / r,
        SingularKind::NeumannGuideDirichletPatch => -r.ln(),
    };
    let design = DMatrix::from_fn(samples, 3, |i, c| match c {
        0 => singular(radii[i]),
        1 => 1.0,
        _ => radii[i],
    });
    let values: Vec<Complex64> = radii
        .iter()
        .map(|&r| profile_unchecked(kind, m, k, basis, r * theta.cos(), r * theta.sin(), t_m))
        .collect();
    let svd = design.svd(true, true);
    let solve = |part: fn(&Complex64) -> f64| -> Result<DVector<f64>> {
        let rhs = DVector::from_iterator(samples, values.iter().map(part));
        svd.solve(&rhs, 1e-14).map_err(|e| Error::Fit(e.to_string()))
    };
    let re = solve(|z| z.re)?;
    let im = solve(|z| z.im)?;
    let coef = |i: usize| Complex64::new(re[i], im[i]);
    let predicted = 4.0 * k / (t_m * unit_sphere_area(2));
    let relative_deviation = (coef(0) - predicted).norm() / predicted.abs();
    if relative_deviation > 0.2 {
        return Err(Error::ExpansionMismatch { deviation: relative_deviation });
    }
    Ok(NearFieldReport { singular: coef(0), predicted, relative_deviation, constant: coef(1), linear: coef(2) })
}
