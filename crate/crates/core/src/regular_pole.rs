//! Regular perturbation `H_eps = H_0 - eps L` and the secular equation for its
//! small pole.
//!
//! Writing `u = A(k) g` turns the perturbed problem into
//! `(I - eps L A(k)) g = f`. Splitting off the singular threshold part of
//! `A(k)` leaves the bounded operator `T(k) = L A_reg(k)` and the scalar
//! secular equation
//!
//! ```text
//! 2k - eps <phi_m S(k) L[phi_m]> = 0,   S(k) = (I - eps T(k))^{-1},
//! ```
//!
//! solved here by fixed-point iteration from `k = 0`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modesum::{linear_fit, BoxRegion, ModeSumField, ModeSumKernel};

/// Localized operator `L_eps` acting on samples over the box grid.
pub trait LocalizedOperator: Send + Sync {
    fn apply(&self, region: &BoxRegion, u: &[Complex64]) -> Vec<Complex64>;

    /// Bound `C(L)` on the operator norm, independent of `eps`.
    fn bound(&self) -> f64;

    /// Multiplication operators take the fast mode-space route.
    fn as_multiplier(&self) -> Option<&PerturbationField> {
        None
    }
}

/// Multiplier `L[u] = V u` sampled on the box grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationField {
    n1: usize,
    n2: usize,
    samples: Vec<Complex64>,
}

impl PerturbationField {
    pub fn from_samples(region: &BoxRegion, samples: Vec<Complex64>) -> Result<Self> {
        if samples.len() != region.len() {
            return Err(Error::invalid(format!(
                "perturbation has {} samples, grid has {}",
                samples.len(),
                region.len()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("perturbation samples must be finite"));
        }
        Ok(Self { n1: region.n1(), n2: region.n2(), samples })
    }

    pub fn from_fn(region: &BoxRegion, f: impl Fn(f64, f64) -> Complex64) -> Result<Self> {
        let samples = (0..region.len())
            .map(|i| {
                let (x1, x2) = region.point(i);
                f(x1, x2)
            })
            .collect();
        Self::from_samples(region, samples)
    }

    pub fn zero(region: &BoxRegion) -> Self {
        Self { n1: region.n1(), n2: region.n2(), samples: vec![Complex64::from(0.0); region.len()] }
    }

    /// `value` times the indicator of `[x1a, x1b] x [x2a, x2b]`, averaged over
    /// each node's dual cell so that grid quadrature of the indicator is exact
    /// for rectangles.
    pub fn indicator(region: &BoxRegion, x1: (f64, f64), x2: (f64, f64), value: f64) -> Result<Self> {
        if !(x1.0 < x1.1 && x2.0 < x2.1) {
            return Err(Error::invalid("indicator box must have positive extent"));
        }
        let f1 = dual_cell_fractions(region.x1(), x1);
        let f2 = dual_cell_fractions(region.x2(), x2);
        let samples = (0..region.len())
            .map(|i| Complex64::from(value * f1[i / region.n2()] * f2[i % region.n2()]))
            .collect();
        Self::from_samples(region, samples)
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.samples
    }

    pub fn max_abs(&self) -> f64 {
        self.samples.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn is_real(&self) -> bool {
        self.samples.iter().all(|v| v.im == 0.0)
    }
}

impl LocalizedOperator for PerturbationField {
    fn apply(&self, _region: &BoxRegion, u: &[Complex64]) -> Vec<Complex64> {
        self.samples.iter().zip(u).map(|(v, x)| v * x).collect()
    }

    fn bound(&self) -> f64 {
        self.max_abs()
    }

    fn as_multiplier(&self) -> Option<&PerturbationField> {
        Some(self)
    }
}

/// Fraction of each node's trapezoid dual cell covered by `[lo, hi]`.
pub(crate) fn dual_cell_fractions(nodes: &[f64], (lo, hi): (f64, f64)) -> Vec<f64> {
    let n = nodes.len();
    (0..n)
        .map(|i| {
            let left = if i == 0 { nodes[0] } else { 0.5 * (nodes[i - 1] + nodes[i]) };
            let right = if i + 1 == n { nodes[n - 1] } else { 0.5 * (nodes[i] + nodes[i + 1]) };
            let overlap = (right.min(hi) - left.max(lo)).max(0.0);
            overlap / (right - left)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classification {
    BoundState,
    Resonance,
    NoEigenvalue,
    PoleAtZero,
}

impl std::fmt::Display for Classification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Classification::BoundState => "BoundState",
            Classification::Resonance => "Resonance",
            Classification::NoEigenvalue => "NoEigenvalue",
            Classification::PoleAtZero => "PoleAtZero",
        };
        f.write_str(s)
    }
}

/// Eigenvalue / resonance / absence rules for a pole `k` near threshold `m`.
pub fn classify_pole(k: Complex64, m: usize, a1: Option<Complex64>) -> Result<Classification> {
    if m == 0 {
        return Err(Error::invalid("threshold index m must be at least 1"));
    }
    if k.re == 0.0 && k.im == 0.0 {
        return Ok(Classification::PoleAtZero);
    }
    if k.re <= 0.0 {
        return Ok(Classification::NoEigenvalue);
    }
    if m == 1 || k.im > 0.0 {
        return Ok(Classification::BoundState);
    }
    if k.im == 0.0 {
        return Err(Error::AmbiguousClassification(format!(
            "m = {m} with Re k > 0 and Im k = 0 exactly"
        )));
    }
    match a1 {
        Some(a) if a.norm() > 0.0 => Ok(Classification::Resonance),
        _ => Err(Error::AmbiguousClassification(format!(
            "m = {m}, Im k < 0 but a_1 is zero or unknown"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SecularMethod {
    FixedPoint,
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecularOptions {
    pub max_iter: usize,
    /// Stop when `|k_{t+1} - k_t| < tol * max(eps^2, |k_t|)`.
    pub tol: f64,
    pub method: SecularMethod,
    /// Use the dense grid matrix even for multipliers.
    pub force_full_grid: bool,
}

impl Default for SecularOptions {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-12, method: SecularMethod::FixedPoint, force_full_grid: false }
    }
}

#[derive(Debug, Clone)]
pub struct PoleResult {
    pub k: Complex64,
    /// `lambda = -k^2`, measured from the threshold `mu_m`.
    pub lambda: Complex64,
    pub classification: Classification,
    pub eps: f64,
    pub m: usize,
    /// `g = S(k) L[phi_m]` on the box grid.
    pub residue: Vec<Complex64>,
    pub trace: Vec<Complex64>,
}

/// Dense matrix of `I - eps T(k)` on grid samples, quadrature weights folded in.
#[derive(Debug, Clone)]
pub struct BirmanSchwingerMatrix {
    pub matrix: DMatrix<Complex64>,
    /// `eps C(L) ||A_reg||` in the weighted grid norm.
    pub coupling_bound: f64,
    /// Set when `coupling_bound >= 1`: the Neumann series bound is lost.
    pub warning: bool,
}

/// Grid matrix of the regularized mode-sum operator `A_reg(k)`.
pub fn regularized_mode_sum_matrix(kernel: &ModeSumKernel, k: Complex64) -> Result<DMatrix<Complex64>> {
    let region = kernel.region();
    let (n1, n2) = (region.n1(), region.n2());
    let n = region.len();
    let exps = kernel.exponents(k)?;
    let table = longitudinal_table(kernel, &exps, true);
    let mut out = DMatrix::<Complex64>::zeros(n, n);
    for a in 0..n1 {
        for b in 0..n2 {
            let row = a * n2 + b;
            for c in 0..n1 {
                for e in 0..n2 {
                    let col = c * n2 + e;
                    let w = region.w1()[c] * region.w2()[e];
                    let mut s = Complex64::from(0.0);
                    for j in 1..=kernel.modes() {
                        let phi = kernel.phi_nodes(j);
                        s += table[j - 1][a * n1 + c] * (phi[b] * phi[e]);
                    }
                    out[(row, col)] = s * w;
                }
            }
        }
    }
    Ok(out)
}

/// `kappa_j(|x_a - x_c|)` for all node pairs, flattened `a * n1 + c`.
fn longitudinal_table(kernel: &ModeSumKernel, exps: &[Complex64], regularize: bool) -> Vec<Vec<Complex64>> {
    let x1 = kernel.region().x1();
    let n1 = x1.len();
    (1..=kernel.modes())
        .map(|j| {
            let kj = exps[j - 1];
            let mut t = vec![Complex64::from(0.0); n1 * n1];
            for a in 0..n1 {
                for c in a..n1 {
                    let v = kernel.kernel_value(j, (x1[a] - x1[c]).abs(), kj, regularize);
                    t[a * n1 + c] = v;
                    t[c * n1 + a] = v;
                }
            }
            t
        })
        .collect()
}

fn operator_matrix(op: &dyn LocalizedOperator, region: &BoxRegion) -> DMatrix<Complex64> {
    let n = region.len();
    let mut out = DMatrix::<Complex64>::zeros(n, n);
    let mut unit = vec![Complex64::from(0.0); n];
    for col in 0..n {
        unit[col] = Complex64::from(1.0);
        let image = op.apply(region, &unit);
        for (row, v) in image.into_iter().enumerate() {
            out[(row, col)] = v;
        }
        unit[col] = Complex64::from(0.0);
    }
    out
}

/// Operator norm of a grid matrix in the weighted `l^2` norm, by power iteration.
pub fn weighted_operator_norm(matrix: &DMatrix<Complex64>, region: &BoxRegion) -> f64 {
    let w: Vec<f64> = region.weights();
    let n = w.len();
    let scaled = DMatrix::from_fn(n, n, |i, j| matrix[(i, j)] * (w[i].sqrt() / w[j].sqrt()));
    let gram = scaled.adjoint() * &scaled;
    let mut v = DVector::from_fn(n, |i, _| Complex64::new(1.0 + (i % 7) as f64 * 0.1, 0.05 * (i % 3) as f64));
    let mut est = 0.0;
    for _ in 0..200 {
        let next = &gram * &v;
        let norm = next.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let prev = est;
        est = norm / v.norm();
        v = next / Complex64::from(norm);
        if (est - prev).abs() <= 1e-12 * est {
            break;
        }
    }
    est.sqrt()
}

pub fn assemble_birman_schwinger(
    op: &dyn LocalizedOperator,
    k: Complex64,
    eps: f64,
    kernel: &ModeSumKernel,
) -> Result<BirmanSchwingerMatrix> {
    if !(eps >= 0.0) {
        return Err(Error::invalid(format!("coupling eps must be nonnegative, got {eps}")));
    }
    let region = kernel.region();
    let a_reg = regularized_mode_sum_matrix(kernel, k)?;
    let t = match op.as_multiplier() {
        Some(field) => {
            let mut t = a_reg.clone();
            for (row, v) in field.samples().iter().enumerate() {
                for c in 0..t.ncols() {
                    t[(row, c)] *= v;
                }
            }
            t
        }
        None => operator_matrix(op, region) * &a_reg,
    };
    let n = region.len();
    let matrix = DMatrix::<Complex64>::identity(n, n) - t * Complex64::from(eps);
    let coupling_bound = if eps == 0.0 || op.bound() == 0.0 {
        0.0
    } else {
        eps * op.bound() * weighted_operator_norm(&a_reg, region)
    };
    Ok(BirmanSchwingerMatrix { matrix, coupling_bound, warning: coupling_bound >= 1.0 })
}

/// Evaluates the secular map for one operator and coupling.
pub struct SecularProblem<'a> {
    op: &'a dyn LocalizedOperator,
    kernel: &'a ModeSumKernel,
    eps: f64,
    source: Vec<Complex64>,
    route: Route,
}

enum Route {
    /// `coupling[a][i][j] = sum_b w2_b phi_i V(a,b) phi_j`.
    ModeSpace { coupling: Vec<Vec<Vec<Complex64>>> },
    FullGrid { op_matrix: Option<DMatrix<Complex64>> },
}

impl<'a> SecularProblem<'a> {
    pub fn new(op: &'a dyn LocalizedOperator, kernel: &'a ModeSumKernel, eps: f64, full_grid: bool) -> Result<Self> {
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(Error::invalid(format!("coupling eps must be nonnegative, got {eps}")));
        }
        let region = kernel.region();
        let source = op.apply(region, &kernel.threshold_mode_on_grid());
        if source.len() != region.len() {
            return Err(Error::invalid("operator output does not match the box grid"));
        }
        let route = match (op.as_multiplier(), full_grid) {
            (Some(field), false) => {
                let (n1, n2) = (region.n1(), region.n2());
                let jn = kernel.modes();
                let coupling = (0..n1)
                    .map(|a| {
                        (1..=jn)
                            .map(|i| {
                                (1..=jn)
                                    .map(|j| {
                                        let (pi, pj) = (kernel.phi_nodes(i), kernel.phi_nodes(j));
                                        (0..n2)
                                            .map(|b| field.samples()[a * n2 + b] * (region.w2()[b] * pi[b] * pj[b]))
                                            .sum()
                                    })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect();
                Route::ModeSpace { coupling }
            }
            (Some(_), true) => Route::FullGrid { op_matrix: None },
            (None, _) => Route::FullGrid { op_matrix: Some(operator_matrix(op, region)) },
        };
        Ok(Self { op, kernel, eps, source, route })
    }

    /// `L[phi_m]` on the grid.
    pub fn source(&self) -> &[Complex64] {
        &self.source
    }

    pub fn source_vanishes(&self) -> bool {
        let scale = self.op.bound().max(1.0);
        self.source.iter().all(|v| v.norm() <= 1e-14 * scale)
    }

    /// `<phi_m S(k) L[phi_m]>` together with `g = S(k) L[phi_m]` on the grid.
    pub fn quadratic_form(&self, k: Complex64) -> Result<(Complex64, Vec<Complex64>)> {
        let region = self.kernel.region();
        let m = self.kernel.threshold();
        let exps = self.kernel.exponents(k)?;
        match &self.route {
            Route::ModeSpace { coupling } => {
                let (n1, n2) = (region.n1(), region.n2());
                let jn = self.kernel.modes();
                let table = longitudinal_table(self.kernel, &exps, true);
                let n = n1 * jn;
                let eps = Complex64::from(self.eps);
                let w1 = region.w1();
                let mut mat = DMatrix::<Complex64>::identity(n, n);
                for a in 0..n1 {
                    for i in 0..jn {
                        let row = a * jn + i;
                        for c in 0..n1 {
                            for j in 0..jn {
                                let cij = coupling[a][i][j];
                                if cij.norm() == 0.0 {
                                    continue;
                                }
                                mat[(row, c * jn + j)] -= eps * cij * table[j][a * n1 + c] * w1[c];
                            }
                        }
                    }
                }
                let rhs = DVector::from_fn(n, |row, _| coupling[row / jn][row % jn][m - 1]);
                let sol = mat
                    .lu()
                    .solve(&rhs)
                    .ok_or_else(|| Error::invalid("I - eps T(k) is singular"))?;
                let q: Complex64 = (0..n1).map(|a| sol[a * jn + m - 1] * w1[a]).sum();
                // g = L[phi_m] + eps V A_reg g, with A_reg g rebuilt from the mode projections
                let field = self.op.as_multiplier().expect("multiplier route");
                let mut profile = vec![Complex64::from(0.0); n1 * jn];
                for a in 0..n1 {
                    for j in 0..jn {
                        profile[a * jn + j] =
                            (0..n1).map(|c| table[j][a * n1 + c] * w1[c] * sol[c * jn + j]).sum();
                    }
                }
                let residue = (0..region.len())
                    .map(|idx| {
                        let (a, b) = (idx / n2, idx % n2);
                        let u: Complex64 =
                            (0..jn).map(|j| profile[a * jn + j] * self.kernel.phi_nodes(j + 1)[b]).sum();
                        self.source[idx] + eps * field.samples()[idx] * u
                    })
                    .collect();
                Ok((q, residue))
            }
            Route::FullGrid { op_matrix } => {
                let a_reg = regularized_mode_sum_matrix(self.kernel, k)?;
                let t = match op_matrix {
                    Some(lm) => lm * &a_reg,
                    None => {
                        let field = self.op.as_multiplier().expect("multiplier route");
                        let mut t = a_reg;
                        for (row, v) in field.samples().iter().enumerate() {
                            for c in 0..t.ncols() {
                                t[(row, c)] *= v;
                            }
                        }
                        t
                    }
                };
                let n = region.len();
                let mat = DMatrix::<Complex64>::identity(n, n) - t * Complex64::from(self.eps);
                let rhs = DVector::from_column_slice(&self.source);
                let sol = mat
                    .lu()
                    .solve(&rhs)
                    .ok_or_else(|| Error::invalid("I - eps T(k) is singular"))?;
                let phi = self.kernel.threshold_mode_on_grid();
                let q = (0..n).map(|i| phi[i] * sol[i] * region.weight(i)).sum();
                Ok((q, sol.iter().copied().collect()))
            }
        }
    }

    /// Right-hand side of the fixed-point map, `(eps/2) <phi_m S(k) L[phi_m]>`.
    pub fn secular_map(&self, k: Complex64) -> Result<Complex64> {
        Ok(self.quadratic_form(k)?.0 * (0.5 * self.eps))
    }
}

/// Solves `2k = eps <phi_m S(k) L[phi_m]>` for the small pole.
pub fn solve_secular(
    op: &dyn LocalizedOperator,
    eps: f64,
    kernel: &ModeSumKernel,
    k0: Complex64,
    opts: &SecularOptions,
) -> Result<PoleResult> {
    let problem = SecularProblem::new(op, kernel, eps, opts.force_full_grid)?;
    let m = kernel.threshold();
    if problem.source_vanishes() || eps == 0.0 {
        return Ok(PoleResult {
            k: Complex64::from(0.0),
            lambda: Complex64::from(0.0),
            classification: Classification::PoleAtZero,
            eps,
            m,
            residue: vec![Complex64::from(0.0); kernel.region().len()],
            trace: vec![Complex64::from(0.0)],
        });
    }
    let scale = |k: Complex64| (eps * eps).max(k.norm());
    let mut k = k0;
    let mut trace = vec![k0];
    let mut converged = false;
    for _ in 0..opts.max_iter {
        let next = match opts.method {
            SecularMethod::FixedPoint => problem.secular_map(k)?,
            SecularMethod::Newton => {
                let f = |z: Complex64| -> Result<Complex64> { Ok(z * 2.0 - problem.quadratic_form(z)?.0 * eps) };
                let delta = 1e-6 * eps.max(k.norm());
                let fk = f(k)?;
                let df = (f(k + delta)? - fk) / delta;
                k - fk / df
            }
        };
        trace.push(next);
        let step = (next - k).norm();
        let done = step < opts.tol * scale(k);
        k = next;
        if done {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::IterationDiverged { iterations: opts.max_iter, trace });
    }
    let (_, residue) = problem.quadratic_form(k)?;
    let mut result = PoleResult {
        k,
        lambda: -k * k,
        classification: Classification::PoleAtZero,
        eps,
        m,
        residue,
        trace,
    };
    let a1 = if m >= 2 && k.norm() > 0.0 {
        Some(residue_amplitudes(&result, kernel)?.0[0])
    } else {
        None
    };
    result.classification = classify_pole(k, m, a1)?;
    Ok(result)
}

/// `lambda_asym = -(eps^2 / 4) <phi_m L[phi_m]>^2`.
pub fn regular_leading_asymptotic(op: &dyn LocalizedOperator, eps: f64, kernel: &ModeSumKernel) -> Complex64 {
    let q = threshold_moment(op, kernel);
    -(q * q) * (eps * eps / 4.0)
}

/// `<phi_m L[phi_m]>` by grid quadrature.
pub fn threshold_moment(op: &dyn LocalizedOperator, kernel: &ModeSumKernel) -> Complex64 {
    let region = kernel.region();
    let phi = kernel.threshold_mode_on_grid();
    let lphi = op.apply(region, &phi);
    (0..region.len()).map(|i| phi[i] * lphi[i] * region.weight(i)).sum()
}

/// Residue `psi = eps A(k) S(k) L[phi_m]` with its tail amplitudes.
#[derive(Debug, Clone)]
pub struct EigenfunctionField {
    field: ModeSumField,
    /// `a_j` such that `psi ~ sum_j a_j phi_j exp(-K_j x1)` for `x1 > R`,
    /// normalized by `a_m` when it is nonzero.
    pub amplitudes: Vec<Complex64>,
    /// `a_m` before normalization; tends to 1 as `eps -> 0`.
    pub raw_threshold_amplitude: Complex64,
    pub decay_rate: f64,
    /// False when the pole is not a bound state (second-sheet tail).
    pub square_integrable: bool,
}

impl EigenfunctionField {
    pub fn eval(&self, x1: f64, x2: f64) -> Complex64 {
        self.field.eval(x1, x2)
    }

    /// Transverse projection `<psi(x1, .), phi_j>`.
    pub fn mode_profile(&self, j: usize, x1: f64) -> Complex64 {
        self.field.mode_profile(j, x1)
    }

    /// Slope of `-ln |<psi(x1, .), phi_j>|` over `[from, to]`.
    pub fn fitted_decay_rate(&self, j: usize, from: f64, to: f64, samples: usize) -> f64 {
        let xs: Vec<f64> = (0..samples)
            .map(|i| from + (to - from) * i as f64 / (samples - 1) as f64)
            .collect();
        let ys: Vec<f64> = xs.iter().map(|&x| self.mode_profile(j, x).norm().ln()).collect();
        -linear_fit(&xs, &ys).0
    }
}

fn residue_field(p: &PoleResult, kernel: &ModeSumKernel) -> Result<ModeSumField> {
    let mut field = kernel.apply(&p.residue, p.k, false)?;
    field.scale(Complex64::from(p.eps));
    Ok(field)
}

/// Raw tail amplitudes at `x1 = R + 1`, plus the field they came from.
fn residue_amplitudes(p: &PoleResult, kernel: &ModeSumKernel) -> Result<(Vec<Complex64>, ModeSumField)> {
    let field = residue_field(p, kernel)?;
    let x = kernel.region().half_length() + 1.0;
    let amps = (1..=field.modes())
        .map(|j| field.mode_profile(j, x) * (field.exponents()[j - 1] * x).exp())
        .collect();
    Ok((amps, field))
}

pub fn assemble_residue(p: &PoleResult, kernel: &ModeSumKernel) -> Result<EigenfunctionField> {
    if p.classification == Classification::PoleAtZero {
        return Err(Error::invalid("no residue at a pole fixed at k = 0"));
    }
    let (raw, field) = residue_amplitudes(p, kernel)?;
    let am = raw[p.m - 1];
    let amplitudes = if am.norm() > 0.0 { raw.iter().map(|a| a / am).collect() } else { raw.clone() };
    Ok(EigenfunctionField {
        field,
        amplitudes,
        raw_threshold_amplitude: am,
        decay_rate: p.k.re,
        square_integrable: p.classification == Classification::BoundState,
    })
}
