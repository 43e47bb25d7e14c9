//! Mode-sum resolvent of the unperturbed guide near the threshold `mu_m`.
//!
//! For a source `g` supported in the box `Q = (-R, R) x (0, d)`,
//!
//! ```text
//! u(x) = sum_j phi_j(x') / (2 K_j) * int_Q exp(-K_j |x1 - t1|) phi_j(t') g(t) dt
//! ```
//!
//! solves `-(Delta + mu_m) u + k^2 u = g` with the guide's boundary condition.
//! The threshold term `j = m` has `K_m = k`; inside the Birman-Schwinger
//! operator it is replaced by the regularized kernel `(exp(-k s) - 1) / (2k)`,
//! which stays finite at `k = 0`.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::transverse::TransverseBasis;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Uniform tensor grid on `Q` with trapezoid weights in both directions.
///
/// Nodes include the box edges, so the weights sum to `2 R d` and the kink of
/// `exp(-K |x1 - t1|)` always falls on a node when evaluating at grid points.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRegion {
    half_length: f64,
    width: f64,
    x1: Vec<f64>,
    x2: Vec<f64>,
    w1: Vec<f64>,
    w2: Vec<f64>,
}

impl BoxRegion {
    pub fn new(half_length: f64, width: f64, n1: usize, n2: usize) -> Result<Self> {
        if !(half_length > 0.0) || !(width > 0.0) {
            return Err(Error::invalid("box half-length and width must be positive"));
        }
        if n1 < 2 || n2 < 2 {
            return Err(Error::invalid(format!("box grid needs at least 2x2 nodes, got {n1}x{n2}")));
        }
        let (x1, w1) = trapezoid(-half_length, half_length, n1);
        let (x2, w2) = trapezoid(0.0, width, n2);
        Ok(Self { half_length, width, x1, x2, w1, w2 })
    }

    pub fn half_length(&self) -> f64 {
        self.half_length
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn n1(&self) -> usize {
        self.x1.len()
    }

    pub fn n2(&self) -> usize {
        self.x2.len()
    }

    pub fn len(&self) -> usize {
        self.n1() * self.n2()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x1(&self) -> &[f64] {
        &self.x1
    }

    pub fn x2(&self) -> &[f64] {
        &self.x2
    }

    pub fn w1(&self) -> &[f64] {
        &self.w1
    }

    pub fn w2(&self) -> &[f64] {
        &self.w2
    }

    pub fn step1(&self) -> f64 {
        self.x1[1] - self.x1[0]
    }

    pub fn step2(&self) -> f64 {
        self.x2[1] - self.x2[0]
    }

    /// Flat index of node `(a, b)`; x2 varies fastest.
    pub fn index(&self, a: usize, b: usize) -> usize {
        a * self.n2() + b
    }

    pub fn point(&self, idx: usize) -> (f64, f64) {
        (self.x1[idx / self.n2()], self.x2[idx % self.n2()])
    }

    pub fn weight(&self, idx: usize) -> f64 {
        self.w1[idx / self.n2()] * self.w2[idx % self.n2()]
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.weight(i)).collect()
    }

    /// Weighted inner product `sum w f conj(g)` on the grid.
    pub fn inner(&self, f: &[Complex64], g: &[Complex64]) -> Complex64 {
        f.iter()
            .zip(g)
            .enumerate()
            .map(|(i, (a, b))| a * b.conj() * self.weight(i))
            .sum()
    }
}

fn trapezoid(lo: f64, hi: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let h = (hi - lo) / (n - 1) as f64;
    let x = (0..n).map(|i| if i + 1 == n { hi } else { lo + i as f64 * h }).collect();
    let w = (0..n).map(|i| if i == 0 || i + 1 == n { 0.5 * h } else { h }).collect();
    (x, w)
}

/// Branch-resolved exponent `K_j^(m)(k)` on the principal sheet.
pub fn longitudinal_exponent(j: usize, m: usize, k: Complex64, basis: &TransverseBasis) -> Result<Complex64> {
    if j == 0 || j > basis.len() || m == 0 || m > basis.len() {
        return Err(Error::invalid(format!("mode indices j={j}, m={m} outside 1..={}", basis.len())));
    }
    check_branch_domain(m, k, basis)?;
    Ok(exponent_unchecked(basis.mu(j), basis.mu(m), j, m, k))
}

pub(crate) fn exponent_unchecked(mu_j: f64, mu_m: f64, j: usize, m: usize, k: Complex64) -> Complex64 {
    use std::cmp::Ordering;
    match j.cmp(&m) {
        Ordering::Less => I * (Complex64::from(mu_m - mu_j) - k * k).sqrt(),
        Ordering::Equal => k,
        Ordering::Greater => (Complex64::from(mu_j - mu_m) + k * k).sqrt(),
    }
}

/// `|k|^2` must stay below the gap to the neighbouring thresholds.
pub(crate) fn check_branch_domain(m: usize, k: Complex64, basis: &TransverseBasis) -> Result<()> {
    let mu_m = basis.mu(m);
    let mut gap = f64::INFINITY;
    if m > 1 {
        gap = gap.min(mu_m - basis.mu(m - 1));
    }
    if m < basis.len() {
        gap = gap.min(basis.mu(m + 1) - mu_m);
    }
    if !k.is_finite() || k.norm_sqr() >= gap {
        return Err(Error::Domain(format!("|k|^2 = {:.3e} not below threshold gap {gap:.3e}", k.norm_sqr())));
    }
    Ok(())
}

/// Threshold kernel `(exp(-k s) - 1) / (2k)` with its limit `-s/2` at `k = 0`.
pub fn regularized_kernel(s: f64, k: Complex64) -> Result<Complex64> {
    if s < 0.0 || s.is_nan() {
        return Err(Error::invalid(format!("separation must be nonnegative, got {s}")));
    }
    Ok(regularized_unchecked(s, k))
}

pub(crate) fn regularized_unchecked(s: f64, k: Complex64) -> Complex64 {
    if k.norm() < 1e-12 {
        return Complex64::from(-0.5 * s);
    }
    let z = k * s;
    if z.norm() < 1e-2 {
        // (e^{-z} - 1) / (2k) = (s/2) * sum_{n>=1} (-z)^n / (n! z)
        let mut term = Complex64::from(-1.0);
        let mut sum = term;
        for n in 2..14 {
            term *= -z / n as f64;
            sum += term;
        }
        return sum * (0.5 * s);
    }
    ((-z).exp() - 1.0) / (2.0 * k)
}

fn raw_kernel(s: f64, kj: Complex64) -> Complex64 {
    (-kj * s).exp() / (2.0 * kj)
}

/// Truncated mode-sum operator attached to a box grid.
#[derive(Debug, Clone)]
pub struct ModeSumKernel {
    basis: TransverseBasis,
    m: usize,
    region: BoxRegion,
    /// `phi[j-1][b] = phi_j(x2_b)`.
    phi: Vec<Vec<f64>>,
}

impl ModeSumKernel {
    /// Uses every mode of `basis`; requires `J >= m + 3`.
    pub fn new(basis: TransverseBasis, m: usize, region: BoxRegion) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("threshold index m must be at least 1"));
        }
        if basis.len() < m {
            return Err(Error::invalid(format!("J = {} < m = {m}", basis.len())));
        }
        if basis.len() < m + 3 {
            return Err(Error::invalid(format!(
                "J = {} must keep at least three evanescent modes beyond m = {m}",
                basis.len()
            )));
        }
        if (region.width() - basis.section().width).abs() > 1e-12 * region.width() {
            return Err(Error::invalid("box width differs from the cross-section width"));
        }
        let phi = (1..=basis.len())
            .map(|j| region.x2().iter().map(|&x| basis.eval(j, x)).collect())
            .collect();
        Ok(Self { basis, m, region, phi })
    }

    /// Default truncation `J = m + 8`.
    pub fn with_default_modes(section: crate::transverse::CrossSection, m: usize, region: BoxRegion) -> Result<Self> {
        let basis = TransverseBasis::build(section, m + 8)?;
        Self::new(basis, m, region)
    }

    pub fn basis(&self) -> &TransverseBasis {
        &self.basis
    }

    pub fn threshold(&self) -> usize {
        self.m
    }

    pub fn modes(&self) -> usize {
        self.basis.len()
    }

    pub fn region(&self) -> &BoxRegion {
        &self.region
    }

    /// `phi_j` sampled at the x2 nodes.
    pub fn phi_nodes(&self, j: usize) -> &[f64] {
        &self.phi[j - 1]
    }

    /// `phi_m` sampled on the whole grid.
    pub fn threshold_mode_on_grid(&self) -> Vec<Complex64> {
        let phi = self.phi_nodes(self.m);
        (0..self.region.len())
            .map(|i| Complex64::from(phi[i % self.region.n2()]))
            .collect()
    }

    pub fn exponents(&self, k: Complex64) -> Result<Vec<Complex64>> {
        check_branch_domain(self.m, k, &self.basis)?;
        let mu_m = self.basis.mu(self.m);
        Ok((1..=self.modes())
            .map(|j| exponent_unchecked(self.basis.mu(j), mu_m, j, self.m, k))
            .collect())
    }

    /// Longitudinal kernel of mode `j` at separation `s`.
    pub(crate) fn kernel_value(&self, j: usize, s: f64, kj: Complex64, regularize: bool) -> Complex64 {
        if j == self.m && regularize {
            regularized_unchecked(s, kj)
        } else {
            raw_kernel(s, kj)
        }
    }

    /// Transverse projections `G_j(a) = sum_b w2_b phi_j(x2_b) g(a, b)`.
    pub fn project(&self, g: &[Complex64]) -> Result<Vec<Vec<Complex64>>> {
        self.check_samples(g)?;
        let (n1, n2) = (self.region.n1(), self.region.n2());
        let w2 = self.region.w2();
        Ok(self
            .phi
            .iter()
            .map(|phi| {
                (0..n1)
                    .map(|a| (0..n2).map(|b| g[a * n2 + b] * (w2[b] * phi[b])).sum())
                    .collect()
            })
            .collect())
    }

    fn check_samples(&self, g: &[Complex64]) -> Result<()> {
        if g.len() != self.region.len() {
            return Err(Error::invalid(format!(
                "field has {} samples but the box grid has {}",
                g.len(),
                self.region.len()
            )));
        }
        Ok(())
    }

    /// Builds an evaluator for `A^(m)(k) g`, optionally with the regularized
    /// threshold kernel.
    pub fn apply(&self, g: &[Complex64], k: Complex64, regularize_m: bool) -> Result<ModeSumField> {
        let projections = self.project(g)?;
        self.field_from_projections(projections, k, regularize_m)
    }

    pub(crate) fn field_from_projections(
        &self,
        projections: Vec<Vec<Complex64>>,
        k: Complex64,
        regularize_m: bool,
    ) -> Result<ModeSumField> {
        if !regularize_m && k.norm() == 0.0 {
            return Err(Error::invalid("raw threshold kernel exp(-k s)/(2k) is singular at k = 0"));
        }
        let exponents = self.exponents(k)?;
        let w1 = self.region.w1();
        let weighted = projections
            .into_iter()
            .map(|gj| gj.iter().zip(w1).map(|(v, w)| v * *w).collect())
            .collect();
        Ok(ModeSumField {
            section: self.basis.section(),
            m: self.m,
            regularize_m,
            exponents,
            sources: self.region.x1().to_vec(),
            weighted,
        })
    }
}

/// Evaluator of a mode-sum field `sum_j phi_j(x2) u_j(x1)` on the whole guide.
#[derive(Debug, Clone)]
pub struct ModeSumField {
    section: crate::transverse::CrossSection,
    m: usize,
    regularize_m: bool,
    exponents: Vec<Complex64>,
    sources: Vec<f64>,
    /// `w1_c G_j(c)` per mode.
    weighted: Vec<Vec<Complex64>>,
}

impl ModeSumField {
    pub fn modes(&self) -> usize {
        self.exponents.len()
    }

    pub fn exponents(&self) -> &[Complex64] {
        &self.exponents
    }

    /// Longitudinal profile `u_j(x1)`, i.e. the `phi_j` coefficient at `x1`.
    pub fn mode_profile(&self, j: usize, x1: f64) -> Complex64 {
        let kj = self.exponents[j - 1];
        let reg = self.regularize_m && j == self.m;
        self.sources
            .iter()
            .zip(&self.weighted[j - 1])
            .map(|(&t, &c)| {
                let s = (x1 - t).abs();
                let kern = if reg { regularized_unchecked(s, kj) } else { raw_kernel(s, kj) };
                kern * c
            })
            .sum()
    }

    pub fn eval(&self, x1: f64, x2: f64) -> Complex64 {
        (1..=self.modes())
            .map(|j| self.mode_profile(j, x1) * crate::transverse::phi(self.section, j, x2))
            .sum()
    }

    pub(crate) fn scale(&mut self, factor: Complex64) {
        for row in &mut self.weighted {
            for v in row {
                *v *= factor;
            }
        }
    }
}

/// Least-squares slope and intercept of `y` against `x`, plus `R^2`.
pub(crate) fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, intercept, r2)
}
