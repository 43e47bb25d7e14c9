//! Finite-difference eigensolver on a truncated strip `(-L, L) x (0, d)`.
//!
//! The operator is the symmetric 5-point Laplacian `H = M^{-1/2} S M^{-1/2}`
//! built from the trapezoid energy form, so Neumann boundary nodes carry half
//! mass and the discrete transverse spectrum is known in closed form. Columns
//! away from the perturbation are identical; they are eliminated exactly, mode
//! by mode, with a scalar continued fraction. Only the few perturbed columns
//! near `x1 = 0` are handled as dense blocks. Vectors are stored in a mixed
//! form: transverse modal coefficients on the outer columns and node values on
//! the inner ones.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modesum::linear_fit;
use crate::regular_pole::dual_cell_fractions;
use crate::transverse::{BoundaryCondition, CrossSection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndCondition {
    DirichletEnds,
    NeumannEnds,
}

/// Boundary condition changes on the `x2 = 0` side, centred at `x1 = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BoundaryPlan {
    Uniform,
    NeumannWindow { half_width: f64 },
    DirichletPatch { half_width: f64 },
}

/// `value` on the rectangle `x1 x x2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPotential {
    pub x1: (f64, f64),
    pub x2: (f64, f64),
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncatedGuide {
    pub half_length: f64,
    /// Nominal grid step; the actual steps are adjusted to align edges.
    pub h: f64,
    pub section: CrossSection,
    pub ends: EndCondition,
    pub boundary: BoundaryPlan,
    /// The operator receives `-coupling * sum(potential)`.
    pub coupling: f64,
    pub potential: Vec<BoxPotential>,
}

impl TruncatedGuide {
    pub fn new(half_length: f64, h: f64, section: CrossSection) -> Self {
        Self {
            half_length,
            h,
            section,
            ends: EndCondition::DirichletEnds,
            boundary: BoundaryPlan::Uniform,
            coupling: 0.0,
            potential: Vec::new(),
        }
    }

    pub fn with_ends(mut self, ends: EndCondition) -> Self {
        self.ends = ends;
        self
    }

    pub fn with_boundary(mut self, boundary: BoundaryPlan) -> Self {
        self.boundary = boundary;
        self
    }

    pub fn with_potential(mut self, coupling: f64, potential: Vec<BoxPotential>) -> Self {
        self.coupling = coupling;
        self.potential = potential;
        self
    }

    fn validate(&self) -> Result<()> {
        let d = self.section.width;
        if !(self.half_length > 0.0) || !self.half_length.is_finite() {
            return Err(Error::invalid(format!("half-length must be positive, got {}", self.half_length)));
        }
        if !(self.h > 0.0) || self.h > d / 4.0 {
            return Err(Error::invalid(format!("grid step {} must lie in (0, d/4]", self.h)));
        }
        match (self.boundary, self.section.bc) {
            (BoundaryPlan::NeumannWindow { half_width }, BoundaryCondition::Dirichlet)
            | (BoundaryPlan::DirichletPatch { half_width }, BoundaryCondition::Neumann) => {
                if !(half_width > 0.0) || half_width >= self.half_length {
                    return Err(Error::invalid(format!("window half-width {half_width} out of range")));
                }
            }
            (BoundaryPlan::Uniform, _) => {}
            (plan, bc) => return Err(Error::invalid(format!("{plan:?} does not fit a {bc:?} guide"))),
        }
        if !self.coupling.is_finite() {
            return Err(Error::invalid("coupling must be finite"));
        }
        for b in &self.potential {
            if !(b.x1.0 < b.x1.1 && b.x2.0 < b.x2.1) || !b.value.is_finite() {
                return Err(Error::invalid(format!("malformed potential box {b:?}")));
            }
            if b.x1.0.abs().max(b.x1.1.abs()) >= self.half_length {
                return Err(Error::invalid("potential must vanish near the ends"));
            }
        }
        Ok(())
    }

    fn active_potential(&self) -> impl Iterator<Item = &BoxPotential> {
        self.potential.iter().filter(move |b| self.coupling != 0.0 && b.value != 0.0)
    }
}

/// Resolved grid of a [`TruncatedGuide`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridLayout {
    pub hx: f64,
    pub hy: f64,
    /// Number of `x1` steps from the centre to an end.
    pub half_steps: usize,
    /// Number of `x2` steps across the section.
    pub cross_steps: usize,
    /// Columns `|i| <= interior_half` are stored as dense blocks.
    pub interior_half: usize,
    /// Boundary nodes inside the window or patch: `|i| <= window_nodes`.
    pub window_nodes: Option<usize>,
    /// Largest distance from a potential edge to the nearest dual-cell edge.
    pub snap: f64,
}

impl GridLayout {
    /// Unknown columns along `x1`.
    pub fn columns(&self, ends: EndCondition) -> usize {
        match ends {
            EndCondition::DirichletEnds => 2 * self.half_steps - 1,
            EndCondition::NeumannEnds => 2 * self.half_steps + 1,
        }
    }

    /// Unknown rows in an unperturbed column.
    pub fn rows(&self, bc: BoundaryCondition) -> usize {
        match bc {
            BoundaryCondition::Dirichlet => self.cross_steps - 1,
            BoundaryCondition::Neumann => self.cross_steps + 1,
        }
    }

    pub fn effective_half_length(&self) -> f64 {
        self.half_steps as f64 * self.hx
    }
}

fn resolve_layout(g: &TruncatedGuide) -> Result<GridLayout> {
    g.validate()?;
    let d = g.section.width;
    let cross_steps = (d / g.h).round().max(4.0) as usize;
    let hy = d / cross_steps as f64;
    let window = match g.boundary {
        BoundaryPlan::Uniform => None,
        BoundaryPlan::NeumannWindow { half_width } | BoundaryPlan::DirichletPatch { half_width } => Some(half_width),
    };
    let pot_edge = g
        .active_potential()
        .flat_map(|b| [b.x1.0.abs(), b.x1.1.abs()])
        .fold(None, |acc: Option<f64>, e| Some(acc.map_or(e, |a| a.max(e))));
    // edges sit half-way between nodes
    let aligned = |edge: f64| {
        let q = (edge / g.h - 0.5).round().max(0.0);
        (q as usize, edge / (q + 0.5))
    };
    let (hx, window_nodes) = match (window, pot_edge) {
        (Some(w), _) => {
            let (q, hx) = aligned(w);
            if 2 * q + 1 < 8 {
                return Err(Error::invalid(format!(
                    "window of half-width {w} spans {} nodes at h = {}; need at least 8",
                    2 * q + 1,
                    g.h
                )));
            }
            (hx, Some(q))
        }
        (None, Some(e)) if e > 0.0 => (aligned(e).1, None),
        _ => (g.half_length / (g.half_length / g.h).round().max(1.0), None),
    };
    let half_steps = (g.half_length / hx).round() as usize;
    let snap = g
        .active_potential()
        .flat_map(|b| [b.x1.0, b.x1.1])
        .map(|t| {
            let s = t / hx - 0.5;
            (s - s.round()).abs() * hx
        })
        .fold(0.0, f64::max);
    let mut special = window_nodes.unwrap_or(0);
    for b in g.active_potential() {
        let reach = b.x1.0.abs().max(b.x1.1.abs()) / hx - 0.5;
        special = special.max(reach.ceil().max(0.0) as usize);
    }
    let interior_half = special + 1;
    let last = match g.ends {
        EndCondition::DirichletEnds => half_steps.saturating_sub(1),
        EndCondition::NeumannEnds => half_steps,
    };
    if last < interior_half + 2 {
        return Err(Error::invalid(format!(
            "guide of half-length {} is too short for a perturbation reaching column {special}",
            g.half_length
        )));
    }
    Ok(GridLayout { hx, hy, half_steps, cross_steps, interior_half, window_nodes, snap })
}

/// Eigenvalues `(4/hy^2) sin^2(q pi hy / (2d))` of the discrete transverse
/// operator, lowest first, with the orthonormal modal matrix (rows are nodes).
fn transverse_modes(bc: BoundaryCondition, cross_steps: usize, hy: f64) -> (Vec<f64>, DMatrix<f64>) {
    let n = cross_steps;
    let nf = n as f64;
    let value = |q: usize| (4.0 / (hy * hy)) * (q as f64 * PI / (2.0 * nf)).sin().powi(2);
    match bc {
        BoundaryCondition::Dirichlet => {
            let mu = (1..n).map(value).collect();
            let q = DMatrix::from_fn(n - 1, n - 1, |r, c| {
                (2.0 / nf).sqrt() * (((r + 1) * (c + 1)) as f64 * PI / nf).sin()
            });
            (mu, q)
        }
        BoundaryCondition::Neumann => {
            let mu = (0..=n).map(value).collect();
            let q = DMatrix::from_fn(n + 1, n + 1, |r, c| {
                let w = if r == 0 || r == n { 0.5 } else { 1.0 };
                let norm = if c == 0 || c == n { 1.0 / nf } else { 2.0 / nf };
                (w * norm).sqrt() * ((r * c) as f64 * PI / nf).cos()
            });
            (mu, q)
        }
    }
}

/// `mu_m^h` of the unperturbed discrete cross-section.
pub fn discrete_threshold(section: CrossSection, hy: f64, m: usize) -> f64 {
    let steps = (section.width / hy).round();
    let q = match section.bc {
        BoundaryCondition::Dirichlet => m as f64,
        BoundaryCondition::Neumann => m as f64 - 1.0,
    };
    (4.0 / (hy * hy)) * (q * PI / (2.0 * steps)).sin().powi(2)
}

/// Compressed sparse row matrix with sorted column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub nrows: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows, self.nrows);
        for r in 0..self.nrows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                out[(r, self.indices[k])] = self.values[k];
            }
        }
        out
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.nrows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                worst = worst.max((self.values[k] - self.get(self.indices[k], r)).abs());
            }
        }
        worst
    }
}

/// Structured discrete operator of a truncated guide.
#[derive(Debug, Clone)]
pub struct FdOperator {
    guide: TruncatedGuide,
    layout: GridLayout,
    beta: f64,
    mu: Vec<f64>,
    modal: DMatrix<f64>,
    /// Dense diagonal blocks of the interior columns `-I..=I`.
    blocks: Vec<DMatrix<f64>>,
    rows: Vec<Vec<usize>>,
    /// Matching rows `(pos in k, pos in k + 1)` between neighbouring blocks.
    links: Vec<Vec<(usize, usize)>>,
    /// Unperturbed columns on each side of the interior.
    exterior: usize,
}

pub fn build_fd_operator(g: &TruncatedGuide) -> Result<FdOperator> {
    let layout = resolve_layout(g)?;
    let (mu, modal) = transverse_modes(g.section.bc, layout.cross_steps, layout.hy);
    let op_rows = |i: isize| column_rows(g, &layout, i);
    let ih = layout.interior_half as isize;
    let rows: Vec<Vec<usize>> = (-ih..=ih).map(op_rows).collect();
    let blocks = (-ih..=ih)
        .zip(&rows)
        .map(|(i, r)| {
            let mut b = DMatrix::zeros(r.len(), r.len());
            for (a, &ja) in r.iter().enumerate() {
                b[(a, a)] = column_diagonal(g, &layout, i, ja);
                if a + 1 < r.len() && r[a + 1] == ja + 1 {
                    let off = transverse_coupling(&layout, ja);
                    b[(a, a + 1)] = off;
                    b[(a + 1, a)] = off;
                }
            }
            b
        })
        .collect();
    let links = rows
        .windows(2)
        .map(|w| {
            w[0].iter()
                .enumerate()
                .filter_map(|(a, j)| w[1].binary_search(j).ok().map(|b| (a, b)))
                .collect()
        })
        .collect();
    let last = match g.ends {
        EndCondition::DirichletEnds => layout.half_steps - 1,
        EndCondition::NeumannEnds => layout.half_steps,
    };
    Ok(FdOperator {
        guide: g.clone(),
        beta: 1.0 / (layout.hx * layout.hx),
        exterior: last - layout.interior_half,
        layout,
        mu,
        modal,
        blocks,
        rows,
        links,
    })
}

fn row_weight(layout: &GridLayout, j: usize) -> f64 {
    if j == 0 || j == layout.cross_steps {
        0.5
    } else {
        1.0
    }
}

fn column_rows(g: &TruncatedGuide, layout: &GridLayout, i: isize) -> Vec<usize> {
    let n = layout.cross_steps;
    let in_window = layout.window_nodes.is_some_and(|q| i.unsigned_abs() <= q);
    match g.section.bc {
        BoundaryCondition::Dirichlet => {
            let first = if in_window { 0 } else { 1 };
            (first..n).collect()
        }
        BoundaryCondition::Neumann => {
            let first = if in_window { 1 } else { 0 };
            (first..=n).collect()
        }
    }
}

fn transverse_coupling(layout: &GridLayout, j: usize) -> f64 {
    -1.0 / (layout.hy * layout.hy * (row_weight(layout, j) * row_weight(layout, j + 1)).sqrt())
}

/// Diagonal entry at node `(i, j)`, potential included.
fn column_diagonal(g: &TruncatedGuide, layout: &GridLayout, i: isize, j: usize) -> f64 {
    let base = 2.0 / (layout.hx * layout.hx) + 2.0 / (layout.hy * layout.hy);
    base - g.coupling * potential_average(g, layout, i, j)
}

/// Cell average of the potential over the dual cell of node `(i, j)`.
fn potential_average(g: &TruncatedGuide, layout: &GridLayout, i: isize, j: usize) -> f64 {
    let x1 = [(i as f64 - 1.0) * layout.hx, i as f64 * layout.hx, (i as f64 + 1.0) * layout.hx];
    let x2: Vec<f64> = match j {
        0 => vec![0.0, layout.hy],
        j if j == layout.cross_steps => vec![(j - 1) as f64 * layout.hy, j as f64 * layout.hy],
        j => vec![(j - 1) as f64 * layout.hy, j as f64 * layout.hy, (j + 1) as f64 * layout.hy],
    };
    let pos2 = if j == 0 { 0 } else { 1 };
    g.active_potential()
        .map(|b| {
            let f1 = dual_cell_fractions(&x1, b.x1)[1];
            let f2 = dual_cell_fractions(&x2, b.x2)[pos2];
            b.value * f1 * f2
        })
        .sum()
}

/// Pivots and inverse blocks of `H - sigma` in block `LDL^T` form.
#[derive(Debug, Clone)]
pub struct Factorization {
    pub sigma: f64,
    /// Chain pivots per mode, from the far end inwards; a chain that becomes
    /// stationary is cut and its last pivot repeats.
    chain: Vec<Vec<f64>>,
    inverses: Vec<DMatrix<f64>>,
    /// Eigenvalues of `H` below `sigma`; `None` when only definiteness was checked.
    pub below: Option<usize>,
}

impl Factorization {
    fn pivot(&self, q: usize, e: usize, exterior: usize) -> f64 {
        let c = &self.chain[q];
        let from_far = exterior - 1 - e;
        c[from_far.min(c.len() - 1)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FactorMode {
    Definite,
    Inertia,
}

impl FdOperator {
    pub fn guide(&self) -> &TruncatedGuide {
        &self.guide
    }

    pub fn layout(&self) -> &GridLayout {
        &self.layout
    }

    /// Discrete transverse eigenvalues of an unperturbed column.
    pub fn transverse_spectrum(&self) -> &[f64] {
        &self.mu
    }

    pub fn unknowns(&self) -> usize {
        let std_rows = self.mu.len();
        let inner: usize = (-(self.layout.interior_half as isize)..=self.layout.interior_half as isize)
            .map(|i| column_rows(&self.guide, &self.layout, i).len())
            .sum();
        let outer = self.layout.columns(self.guide.ends) - self.rows.len();
        inner + outer * std_rows
    }

    /// Length of the mixed-form vectors used by the solver.
    pub fn dim(&self) -> usize {
        2 * self.exterior * self.mu.len() + self.rows.iter().map(Vec::len).sum::<usize>()
    }

    fn modes(&self) -> usize {
        self.mu.len()
    }

    fn left(&self) -> usize {
        0
    }

    fn inner_offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.rows.len() + 1);
        let mut o = self.exterior * self.modes();
        off.push(o);
        for r in &self.rows {
            o += r.len();
            off.push(o);
        }
        off
    }

    fn right(&self) -> usize {
        *self.inner_offsets().last().unwrap()
    }

    /// Coupling between exterior columns `e` and `e + 1`.
    fn chain_coupling(&self, e: usize) -> f64 {
        if self.guide.ends == EndCondition::NeumannEnds && e + 2 == self.exterior {
            2f64.sqrt() * self.beta
        } else {
            self.beta
        }
    }

    fn a_q(&self, q: usize) -> f64 {
        2.0 * self.beta + self.mu[q]
    }

    /// Node positions `(x1, x2)` of every unknown, column by column.
    pub fn node_positions(&self) -> Vec<(f64, f64)> {
        let l = &self.layout;
        let span = self.end_index();
        let mut out = Vec::new();
        for i in -span..=span {
            for j in column_rows(&self.guide, l, i) {
                out.push((i as f64 * l.hx, j as f64 * l.hy));
            }
        }
        out
    }

    fn end_index(&self) -> isize {
        match self.guide.ends {
            EndCondition::DirichletEnds => self.layout.half_steps as isize - 1,
            EndCondition::NeumannEnds => self.layout.half_steps as isize,
        }
    }

    fn column_weight(&self, i: isize) -> f64 {
        if self.guide.ends == EndCondition::NeumannEnds && i.abs() == self.end_index() {
            0.5
        } else {
            1.0
        }
    }

    /// Assembles the full matrix in the node basis, columns ordered by `x1`
    /// and rows by `x2` within a column.
    pub fn to_csr(&self) -> CsrMatrix {
        let l = &self.layout;
        let span = self.end_index();
        let cols: Vec<Vec<usize>> = (-span..=span).map(|i| column_rows(&self.guide, l, i)).collect();
        let mut start = vec![0usize; cols.len() + 1];
        for (c, r) in cols.iter().enumerate() {
            start[c + 1] = start[c] + r.len();
        }
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for (c, r) in cols.iter().enumerate() {
            let i = c as isize - span;
            for (a, &j) in r.iter().enumerate() {
                let mut entries = Vec::new();
                if c > 0 {
                    if let Ok(b) = cols[c - 1].binary_search(&j) {
                        let w = (self.column_weight(i) * self.column_weight(i - 1)).sqrt();
                        entries.push((start[c - 1] + b, -self.beta / w));
                    }
                }
                if a > 0 && r[a - 1] + 1 == j {
                    entries.push((start[c] + a - 1, transverse_coupling(l, j - 1)));
                }
                entries.push((start[c] + a, column_diagonal(&self.guide, l, i, j)));
                if a + 1 < r.len() && r[a + 1] == j + 1 {
                    entries.push((start[c] + a + 1, transverse_coupling(l, j)));
                }
                if c + 1 < cols.len() {
                    if let Ok(b) = cols[c + 1].binary_search(&j) {
                        let w = (self.column_weight(i) * self.column_weight(i + 1)).sqrt();
                        entries.push((start[c + 1] + b, -self.beta / w));
                    }
                }
                for (k, v) in entries {
                    indices.push(k);
                    values.push(v);
                }
                indptr.push(indices.len());
            }
        }
        CsrMatrix { nrows: start[cols.len()], indptr, indices, values }
    }

    /// Converts a mixed-form vector to node values in [`Self::to_csr`] order.
    pub fn to_nodes(&self, x: &[f64]) -> Vec<f64> {
        let m = self.modes();
        let c = self.exterior;
        let off = self.inner_offsets();
        let modal_col = |base: usize, e: usize| {
            let v = DVector::from_column_slice(&x[base + e * m..base + (e + 1) * m]);
            (&self.modal * v).as_slice().to_vec()
        };
        let mut out = Vec::with_capacity(self.unknowns());
        for e in (0..c).rev() {
            out.extend(modal_col(self.left(), e));
        }
        out.extend_from_slice(&x[off[0]..off[self.rows.len()]]);
        for e in 0..c {
            out.extend(modal_col(self.right(), e));
        }
        out
    }

    /// `H x` in mixed form.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let m = self.modes();
        let c = self.exterior;
        let off = self.inner_offsets();
        let nb = self.rows.len();
        let mut y = vec![0.0; x.len()];
        let edge_modal = |k: usize| -> DVector<f64> {
            let u = DVector::from_column_slice(&x[off[k]..off[k + 1]]);
            self.modal.transpose() * u
        };
        for (base, edge) in [(self.left(), 0), (self.right(), nb - 1)] {
            let inner = edge_modal(edge);
            for e in 0..c {
                for q in 0..m {
                    let mut v = self.a_q(q) * x[base + e * m + q];
                    v -= if e == 0 { self.beta * inner[q] } else { self.chain_coupling(e - 1) * x[base + (e - 1) * m + q] };
                    if e + 1 < c {
                        v -= self.chain_coupling(e) * x[base + (e + 1) * m + q];
                    }
                    y[base + e * m + q] = v;
                }
            }
        }
        for k in 0..nb {
            let u = DVector::from_column_slice(&x[off[k]..off[k + 1]]);
            let mut v = &self.blocks[k] * u;
            if k > 0 {
                for &(a, b) in &self.links[k - 1] {
                    v[b] -= self.beta * x[off[k - 1] + a];
                }
            }
            if k + 1 < nb {
                for &(a, b) in &self.links[k] {
                    v[a] -= self.beta * x[off[k + 1] + b];
                }
            }
            for (base, edge) in [(self.left(), 0), (self.right(), nb - 1)] {
                if k == edge {
                    let outer = DVector::from_column_slice(&x[base..base + m]);
                    v -= (&self.modal * outer) * self.beta;
                }
            }
            y[off[k]..off[k + 1]].copy_from_slice(v.as_slice());
        }
        y
    }

    fn factor(&self, sigma: f64, mode: FactorMode) -> Option<Factorization> {
        let m = self.modes();
        let c = self.exterior;
        let mut chain = Vec::with_capacity(m);
        let mut negatives = 0usize;
        for q in 0..m {
            let a = self.a_q(q) - sigma;
            let mut piv = Vec::new();
            let mut d = a;
            piv.push(d);
            let mut neg = usize::from(d < 0.0);
            for e in (0..c - 1).rev() {
                let b = self.chain_coupling(e);
                let next = a - b * b / d;
                if next < 0.0 {
                    neg += 1;
                }
                if next == d && e + 2 < c {
                    // stationary: the remaining pivots repeat, including their signs
                    neg += usize::from(next < 0.0) * e;
                    d = next;
                    break;
                }
                d = next;
                piv.push(d);
            }
            if mode == FactorMode::Definite && (neg > 0 || d == 0.0) {
                return None;
            }
            negatives += 2 * neg;
            chain.push(piv);
        }
        let nb = self.rows.len();
        let inv_last: DVector<f64> = DVector::from_fn(m, |q, _| 1.0 / *chain[q].last().unwrap());
        let schur = {
            let scaled = DMatrix::from_fn(m, m, |r, q| self.modal[(r, q)] * inv_last[q]);
            -(scaled * self.modal.transpose()) * (self.beta * self.beta)
        };
        let mut inverses: Vec<DMatrix<f64>> = Vec::with_capacity(nb);
        for k in 0..nb {
            let mut s = self.blocks[k].clone();
            for t in 0..s.nrows() {
                s[(t, t)] -= sigma;
            }
            if k == 0 {
                s += &schur;
            }
            if k == nb - 1 {
                s += &schur;
            }
            if k > 0 {
                let prev = &inverses[k - 1];
                let b2 = self.beta * self.beta;
                for &(pa, ca) in &self.links[k - 1] {
                    for &(pb, cb) in &self.links[k - 1] {
                        s[(ca, cb)] -= b2 * prev[(pa, pb)];
                    }
                }
            }
            let inv = match mode {
                FactorMode::Definite => s.cholesky()?.inverse(),
                FactorMode::Inertia => {
                    let eig = SymmetricEigen::new(s);
                    if eig.eigenvalues.iter().any(|&v| v == 0.0) {
                        return None;
                    }
                    negatives += eig.eigenvalues.iter().filter(|&&v| v < 0.0).count();
                    let scaled = DMatrix::from_fn(eig.eigenvectors.nrows(), eig.eigenvectors.ncols(), |r, q| {
                        eig.eigenvectors[(r, q)] / eig.eigenvalues[q]
                    });
                    scaled * eig.eigenvectors.transpose()
                }
            };
            inverses.push(inv);
        }
        Some(Factorization {
            sigma,
            chain,
            inverses,
            below: match mode {
                FactorMode::Definite => Some(0),
                FactorMode::Inertia => Some(negatives),
            },
        })
    }

    /// Number of eigenvalues below `sigma` (Sylvester inertia).
    pub fn count_below(&self, sigma: f64) -> Option<usize> {
        self.factor(sigma, FactorMode::Inertia).and_then(|f| f.below)
    }

    /// True when `H - sigma` is positive definite.
    pub fn is_below_spectrum(&self, sigma: f64) -> bool {
        self.factor(sigma, FactorMode::Definite).is_some()
    }

    /// Solves `(H - sigma) u = f` with a factorization at `sigma`.
    pub fn solve(&self, fac: &Factorization, f: &[f64]) -> Vec<f64> {
        let m = self.modes();
        let c = self.exterior;
        let off = self.inner_offsets();
        let nb = self.rows.len();
        let mut u = f.to_vec();
        let mut rhs: Vec<DVector<f64>> = (0..nb).map(|k| DVector::from_column_slice(&f[off[k]..off[k + 1]])).collect();
        // outer chains, far end inwards: u holds g_e for now
        for (base, edge) in [(self.left(), 0), (self.right(), nb - 1)] {
            for q in 0..m {
                for e in (0..c - 1).rev() {
                    let g_next = u[base + (e + 1) * m + q];
                    u[base + e * m + q] += self.chain_coupling(e) * g_next / fac.pivot(q, e + 1, c);
                }
            }
            let z = DVector::from_fn(m, |q, _| u[base + q] / fac.pivot(q, 0, c));
            rhs[edge] += (&self.modal * z) * self.beta;
        }
        // interior blocks
        for k in 1..nb {
            let carried = &fac.inverses[k - 1] * &rhs[k - 1];
            for &(a, b) in &self.links[k - 1] {
                rhs[k][b] += self.beta * carried[a];
            }
        }
        let mut sol: Vec<DVector<f64>> = vec![DVector::zeros(0); nb];
        sol[nb - 1] = &fac.inverses[nb - 1] * &rhs[nb - 1];
        for k in (0..nb - 1).rev() {
            let mut w = rhs[k].clone();
            for &(a, b) in &self.links[k] {
                w[a] += self.beta * sol[k + 1][b];
            }
            sol[k] = &fac.inverses[k] * w;
        }
        for k in 0..nb {
            u[off[k]..off[k + 1]].copy_from_slice(sol[k].as_slice());
        }
        // outer chains, back-substitution outwards
        for (base, edge) in [(self.left(), 0), (self.right(), nb - 1)] {
            let inner = self.modal.transpose() * &sol[edge];
            for q in 0..m {
                let mut prev = inner[q];
                let mut coup = self.beta;
                for e in 0..c {
                    let idx = base + e * m + q;
                    let v = (u[idx] + coup * prev) / fac.pivot(q, e, c);
                    u[idx] = v;
                    prev = v;
                    coup = self.chain_coupling(e);
                }
            }
        }
        u
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenOptions {
    pub max_iter: usize,
    /// Target for `||H x - rho x||` with `||x|| = 1`.
    pub tol: f64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self { max_iter: 300, tol: 1e-8 }
    }
}

/// Lowest eigenpairs of a truncated guide.
#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub eigenvalues: Vec<f64>,
    /// Mixed-form eigenvectors, unit norm.
    pub vectors: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub iterations: Vec<usize>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = dot(x, x).sqrt();
    for v in x.iter_mut() {
        *v /= n;
    }
    n
}

fn deflate(x: &mut [f64], basis: &[Vec<f64>]) {
    for v in basis {
        let c = dot(x, v);
        for (a, b) in x.iter_mut().zip(v) {
            *a -= c * b;
        }
    }
}

/// Safeguarded shift-invert iteration for the `count` lowest eigenpairs.
///
/// Every shift is kept strictly below the target eigenvalue, verified by a
/// definiteness (or inertia) test; accepted Rayleigh shifts `rho - 1.5 eta`
/// give fast convergence, and rejected ones fall back to bisection.
pub fn lowest_eigenpairs(op: &FdOperator, count: usize, shift: Option<f64>, opts: &EigenOptions) -> Result<OracleSolution> {
    if count == 0 {
        return Err(Error::invalid("eigenpair count must be at least 1"));
    }
    let mut sol = OracleSolution { eigenvalues: vec![], vectors: vec![], residuals: vec![], iterations: vec![] };
    let scale = op.a_q(op.modes() - 1) + op.guide.coupling.abs() * 10.0;
    for t in 0..count {
        let mode = if t == 0 { FactorMode::Definite } else { FactorMode::Inertia };
        let admissible = |s: f64| -> Option<Factorization> {
            let f = op.factor(s, mode)?;
            match f.below {
                Some(b) if b == t => Some(f),
                _ => None,
            }
        };
        let fail = |msg: String, res: Vec<f64>| Error::Solver { message: msg, residuals: res };
        // bracket [lo, hi] with lo admissible and hi not
        let reference = op.mu[0];
        let (mut lo, mut fac) = if t == 0 {
            let mut s = shift.unwrap_or(reference - 1e-3);
            let mut step = (reference - s).abs().max(1e-3);
            loop {
                if let Some(f) = admissible(s) {
                    break (s, f);
                }
                s -= step;
                step *= 2.0;
                if step > 1e3 * scale {
                    return Err(fail("no definite shift below the spectrum".into(), vec![]));
                }
            }
        } else {
            let prev = sol.eigenvalues[t - 1];
            let s = prev + 1e-12 * prev.abs().max(1.0);
            match admissible(s) {
                Some(f) => (s, f),
                None => return Err(fail(format!("eigenvalue {t} is not separated from {prev}"), vec![])),
            }
        };
        let mut step = (PI / (2.0 * op.layout.effective_half_length())).powi(2).max(1e-8);
        let mut hi = loop {
            let s = lo + step;
            if admissible(s).is_none() {
                break s;
            }
            step *= 2.0;
            if step > 1e3 * scale {
                return Err(fail("no eigenvalue found above the shift".into(), vec![]));
            }
        };
        let mut x = vec![1.0; op.dim()];
        deflate(&mut x, &sol.vectors);
        normalize(&mut x);
        let mut history = Vec::new();
        let mut best: Option<(f64, f64, Vec<f64>)> = None;
        let mut polish = 0;
        for _ in 0..opts.max_iter {
            let mut y = op.solve(&fac, &x);
            deflate(&mut y, &sol.vectors);
            if !y.iter().all(|v| v.is_finite()) || normalize(&mut y) == 0.0 {
                return Err(fail("shift-invert produced a non-finite vector".into(), history));
            }
            x = y;
            let hx = op.apply(&x);
            let rho = dot(&x, &hx);
            let eta = hx.iter().zip(&x).map(|(a, b)| (a - rho * b).powi(2)).sum::<f64>().sqrt();
            history.push(eta);
            if best.as_ref().is_none_or(|b| eta < b.1) {
                best = Some((rho, eta, x.clone()));
            }
            if eta <= opts.tol {
                polish += 1;
                if polish > 2 || eta <= 1e-3 * opts.tol {
                    break;
                }
            }
            if t == 0 && rho < hi {
                hi = rho;
            }
            let candidate = rho - 1.5 * eta;
            if candidate > lo && candidate < hi {
                if let Some(f) = admissible(candidate) {
                    lo = candidate;
                    fac = f;
                    continue;
                }
                hi = candidate;
            }
            if hi - lo > 1e-15 * hi.abs().max(1.0) {
                let mid = 0.5 * (lo + hi);
                match admissible(mid) {
                    Some(f) => {
                        lo = mid;
                        fac = f;
                    }
                    None => hi = mid,
                }
            }
        }
        let (rho, eta, vec) = best.expect("at least one iteration");
        if eta > opts.tol {
            return Err(fail(format!("eigenpair {t} stalled at residual {eta:.3e}"), history));
        }
        sol.eigenvalues.push(rho);
        sol.vectors.push(vec);
        sol.residuals.push(eta);
        sol.iterations.push(history.len());
    }
    Ok(sol)
}

/// `b = mu_m^h - E_1` against the discrete threshold of the same grid.
pub fn discrete_binding(sol: &OracleSolution, op: &FdOperator, m: usize) -> f64 {
    discrete_threshold(op.guide.section, op.layout.hy, m) - sol.eigenvalues[0]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailCoefficient {
    pub mode: usize,
    /// Amplitude at `x1 = 0` of the fitted exponential, relative to mode `m`.
    pub amplitude: f64,
    pub rate: f64,
    pub r_squared: f64,
}

/// Fits `<psi(x1, .), phi_j> ~ a_j exp(-rate_j x1)` over `x1 in [from, to]` on
/// the right end of the guide, for `j = 1..=modes`, normalized so `a_m = 1`.
pub fn extract_tail_coefficients(
    op: &FdOperator,
    sol: &OracleSolution,
    m: usize,
    modes: usize,
    window: (f64, f64),
) -> Result<Vec<TailCoefficient>> {
    let l = &op.layout;
    let first = (l.interior_half + 1) as f64 * l.hx;
    let far = l.effective_half_length() - 2.0;
    if !(window.0 >= first && window.1 <= far && window.1 > window.0) {
        return Err(Error::invalid(format!(
            "tail window [{}, {}] must lie in [{first:.3}, {far:.3}]",
            window.0, window.1
        )));
    }
    if m == 0 || m > modes || modes > op.modes() {
        return Err(Error::invalid(format!("modes 1..={modes} with m = {m} unavailable")));
    }
    let x = &sol.vectors[0];
    let base = op.right();
    let nm = op.modes();
    let cols: Vec<usize> = (0..op.exterior)
        .filter(|&e| {
            let x1 = (l.interior_half + 1 + e) as f64 * l.hx;
            x1 >= window.0 && x1 <= window.1
        })
        .collect();
    if cols.len() < 3 {
        return Err(Error::invalid("tail window holds fewer than 3 columns"));
    }
    let mut fits = Vec::with_capacity(modes);
    for j in 1..=modes {
        let xs: Vec<f64> = cols.iter().map(|&e| (l.interior_half + 1 + e) as f64 * l.hx).collect();
        let vals: Vec<f64> = cols.iter().map(|&e| x[base + e * nm + j - 1]).collect();
        if vals.iter().any(|v| *v == 0.0) || vals.windows(2).any(|w| w[0].signum() != w[1].signum()) {
            return Err(Error::TailFit { mode: j, r_squared: 0.0 });
        }
        let logs: Vec<f64> = vals.iter().map(|v| v.abs().ln()).collect();
        let (slope, intercept, r2) = linear_fit(&xs, &logs);
        if !(r2 >= 0.99) {
            return Err(Error::TailFit { mode: j, r_squared: r2 });
        }
        fits.push(TailCoefficient { mode: j, amplitude: vals[0].signum() * intercept.exp(), rate: -slope, r_squared: r2 });
    }
    let norm = fits[m - 1].amplitude;
    for f in &mut fits {
        f.amplitude /= norm;
    }
    Ok(fits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn strip(bc: BoundaryCondition) -> CrossSection {
        CrossSection::new(PI, bc).unwrap()
    }

    #[test]
    fn grid_counts() {
        let g = TruncatedGuide::new(20.0, PI / 100.0, strip(BoundaryCondition::Dirichlet));
        let op = build_fd_operator(&g).unwrap();
        assert_eq!(op.layout().columns(g.ends), 1273);
        assert_eq!(op.layout().rows(g.section.bc), 99);
        assert_eq!(op.unknowns(), 1273 * 99);
        assert_eq!(op.to_csr().nrows, 1273 * 99);
    }

    #[test]
    fn operator_is_symmetric() {
        let sec = strip(BoundaryCondition::Dirichlet);
        let g = TruncatedGuide::new(20.0, PI / 100.0, sec);
        assert_eq!(build_fd_operator(&g).unwrap().to_csr().max_asymmetry(), 0.0);
        let g = TruncatedGuide::new(3.0, PI / 20.0, sec)
            .with_boundary(BoundaryPlan::NeumannWindow { half_width: 0.7 })
            .with_potential(0.3, vec![BoxPotential { x1: (-1.0, 1.2), x2: (0.0, 2.0), value: 1.0 }]);
        assert_eq!(build_fd_operator(&g).unwrap().to_csr().max_asymmetry(), 0.0);
        let g = TruncatedGuide::new(3.0, PI / 20.0, strip(BoundaryCondition::Neumann))
            .with_ends(EndCondition::NeumannEnds)
            .with_boundary(BoundaryPlan::DirichletPatch { half_width: 0.7 });
        assert_eq!(build_fd_operator(&g).unwrap().to_csr().max_asymmetry(), 0.0);
    }

    #[test]
    fn modal_matrix_diagonalizes_columns() {
        for bc in [BoundaryCondition::Dirichlet, BoundaryCondition::Neumann] {
            let g = TruncatedGuide::new(2.0, PI / 12.0, strip(bc));
            let op = build_fd_operator(&g).unwrap();
            let b = &op.blocks[0];
            let beta = op.beta;
            let d = op.modal.transpose() * b * &op.modal;
            for r in 0..d.nrows() {
                for c in 0..d.ncols() {
                    let expect = if r == c { op.mu[r] + 2.0 * beta } else { 0.0 };
                    assert_abs_diff_eq!(d[(r, c)], expect, epsilon = 1e-9 * beta);
                }
            }
        }
    }

    #[test]
    fn discrete_threshold_example() {
        let sec = strip(BoundaryCondition::Dirichlet);
        assert_abs_diff_eq!(discrete_threshold(sec, PI / 100.0, 1), 0.9999177, epsilon = 1e-7);
        let h: f64 = PI / 100.0;
        assert_abs_diff_eq!(discrete_threshold(sec, h, 1), 4.0 / (h * h) * (h / 2.0).sin().powi(2), epsilon = 1e-14);
        assert_eq!(discrete_threshold(strip(BoundaryCondition::Neumann), h, 1), 0.0);
    }

    fn perturbed_small() -> Vec<TruncatedGuide> {
        let d = strip(BoundaryCondition::Dirichlet);
        let n = strip(BoundaryCondition::Neumann);
        vec![
            TruncatedGuide::new(2.5, PI / 10.0, d)
                .with_potential(0.8, vec![BoxPotential { x1: (-0.6, 0.4), x2: (0.3, 2.0), value: 1.0 }]),
            TruncatedGuide::new(2.5, PI / 10.0, d).with_boundary(BoundaryPlan::NeumannWindow { half_width: 1.4 }),
            TruncatedGuide::new(2.5, PI / 10.0, n)
                .with_ends(EndCondition::NeumannEnds)
                .with_boundary(BoundaryPlan::DirichletPatch { half_width: 1.4 }),
        ]
    }

    #[test]
    fn mixed_apply_matches_sparse_matrix() {
        for g in perturbed_small() {
            let op = build_fd_operator(&g).unwrap();
            let csr = op.to_csr().to_dense();
            let x: Vec<f64> = (0..op.dim()).map(|i| ((i * 7919) % 113) as f64 / 113.0 - 0.5).collect();
            let lhs = op.to_nodes(&op.apply(&x));
            let rhs = &csr * DVector::from_vec(op.to_nodes(&x));
            let err = lhs.iter().zip(rhs.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9 * op.beta, "{err}");
        }
    }

    #[test]
    fn structured_solve_inverts_shifted_operator() {
        for g in perturbed_small() {
            let op = build_fd_operator(&g).unwrap();
            for sigma in [-0.5, 0.3] {
                let fac = op.factor(sigma, FactorMode::Inertia).unwrap();
                let f: Vec<f64> = (0..op.dim()).map(|i| ((i * 31) % 17) as f64 - 8.0).collect();
                let u = op.solve(&fac, &f);
                let hu = op.apply(&u);
                let err = hu.iter().zip(&u).zip(&f).map(|((a, b), c)| (a - sigma * b - c).abs()).fold(0.0, f64::max);
                assert!(err < 1e-8, "{err}");
            }
        }
    }

    #[test]
    fn small_grid_against_dense_eigensolver() {
        for g in perturbed_small() {
            let op = build_fd_operator(&g).unwrap();
            let dense = SymmetricEigen::new(op.to_csr().to_dense());
            let mut ev: Vec<f64> = dense.eigenvalues.iter().copied().collect();
            ev.sort_by(f64::total_cmp);
            let sol = lowest_eigenpairs(&op, 3, None, &EigenOptions::default()).unwrap();
            for t in 0..3 {
                assert_abs_diff_eq!(sol.eigenvalues[t], ev[t], epsilon = 1e-9);
                assert!(sol.residuals[t] <= 1e-8);
            }
            for s in [ev[0] - 0.1, 0.5 * (ev[1] + ev[2]), ev[4] + 1e-6] {
                let expect = ev.iter().filter(|&&v| v < s).count();
                assert_eq!(op.count_below(s), Some(expect));
            }
            assert!(op.is_below_spectrum(ev[0] - 1e-9));
            assert!(!op.is_below_spectrum(ev[0] + 1e-9));
        }
    }

    #[test]
    fn separable_closed_form() {
        let h = PI / 100.0;
        let g = TruncatedGuide::new(20.0, h, strip(BoundaryCondition::Dirichlet));
        let op = build_fd_operator(&g).unwrap();
        let l = *op.layout();
        let mu = discrete_threshold(g.section, l.hy, 1);
        let nu = 4.0 / (l.hx * l.hx) * (PI / (4.0 * l.half_steps as f64)).sin().powi(2);
        let csr = op.to_csr();
        // separable eigenvector evaluated directly on the sparse matrix
        let pos = op.node_positions();
        let v: Vec<f64> = pos.iter().map(|&(x1, x2)| (PI * (x1 + 20.0) / 40.0).sin() * x2.sin()).collect();
        let mut worst: f64 = 0.0;
        for r in 0..csr.nrows {
            let hv: f64 = (csr.indptr[r]..csr.indptr[r + 1]).map(|k| csr.values[k] * v[csr.indices[k]]).sum();
            worst = worst.max((hv - (mu + nu) * v[r]).abs());
        }
        assert!(worst < 1e-10, "{worst}");
        let sol = lowest_eigenpairs(&op, 1, None, &EigenOptions::default()).unwrap();
        assert_abs_diff_eq!(sol.eigenvalues[0], mu + nu, epsilon = 1e-8);
        assert!(sol.residuals[0] <= 1e-8);
        assert!(discrete_binding(&sol, &op, 1) < 0.0);
    }

    #[test]
    fn attractive_potential_binds() {
        let sec = strip(BoundaryCondition::Dirichlet);
        let g = TruncatedGuide::new(100.0, PI / 40.0, sec)
            .with_potential(0.05, vec![BoxPotential { x1: (-1.0, 1.0), x2: (0.0, PI), value: 1.0 }]);
        let op = build_fd_operator(&g).unwrap();
        let sol = lowest_eigenpairs(&op, 1, None, &EigenOptions::default()).unwrap();
        let mu = discrete_threshold(sec, op.layout().hy, 1);
        assert!(sol.eigenvalues[0] < mu);
        assert!(sol.residuals[0] <= 1e-8);
        let b = discrete_binding(&sol, &op, 1);
        // one-dimensional square well of depth 0.05 on (-1, 1)
        assert!((b / 0.0023451 - 1.0).abs() < 0.02, "b = {b}");
        let tails = extract_tail_coefficients(&op, &sol, 1, 1, (2.0, 30.0)).unwrap();
        assert_eq!(tails[0].amplitude, 1.0);
        assert!((tails[0].rate / b.sqrt() - 1.0).abs() < 0.02);
    }

    #[test]
    fn evanescent_tail_of_half_section_potential() {
        let sec = strip(BoundaryCondition::Dirichlet);
        let g = TruncatedGuide::new(400.0, PI / 40.0, sec)
            .with_potential(0.05, vec![BoxPotential { x1: (-1.0, 1.0), x2: (0.0, PI / 2.0), value: 1.0 }]);
        let op = build_fd_operator(&g).unwrap();
        let sol = lowest_eigenpairs(&op, 1, None, &EigenOptions::default()).unwrap();
        let b = discrete_binding(&sol, &op, 1);
        assert!(b > 0.0);
        let tails = extract_tail_coefficients(&op, &sol, 1, 2, (2.0, 7.0)).unwrap();
        assert!((tails[0].rate / b.sqrt() - 1.0).abs() < 0.05);
        assert!((tails[1].rate / (3.0 + b).sqrt() - 1.0).abs() < 0.05, "{tails:?}");
        assert!(tails[1].amplitude.abs() > 0.0);
    }

    #[test]
    fn rejects_bad_guides() {
        let d = strip(BoundaryCondition::Dirichlet);
        let narrow = TruncatedGuide::new(10.0, PI / 20.0, d).with_boundary(BoundaryPlan::NeumannWindow { half_width: 0.2 });
        assert!(build_fd_operator(&narrow).is_err());
        let wrong = TruncatedGuide::new(10.0, PI / 20.0, d).with_boundary(BoundaryPlan::DirichletPatch { half_width: 1.0 });
        assert!(build_fd_operator(&wrong).is_err());
        let short = TruncatedGuide::new(1.0, PI / 20.0, d)
            .with_potential(1.0, vec![BoxPotential { x1: (-0.9, 0.9), x2: (0.0, PI), value: 1.0 }]);
        assert!(build_fd_operator(&short).is_err());
    }

    #[test]
    fn window_is_aligned_and_resolved() {
        let g = TruncatedGuide::new(10.0, PI / 50.0, strip(BoundaryCondition::Dirichlet))
            .with_boundary(BoundaryPlan::NeumannWindow { half_width: 0.3 });
        let l = *build_fd_operator(&g).unwrap().layout();
        let q = l.window_nodes.unwrap();
        assert!(2 * q + 1 >= 8);
        assert_abs_diff_eq!((q as f64 + 0.5) * l.hx, 0.3, epsilon = 1e-15);
    }
}
