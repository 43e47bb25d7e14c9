//! Experiment driver: epsilon sweeps across the asymptotic predictors, the
//! secular solver and the finite-difference oracle, with log-log fits.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::explicit_window_solution_2d;
use crate::error::{Error, Result};
use crate::modesum::{BoxRegion, ModeSumKernel};
use crate::oracle::{
    build_fd_operator, discrete_binding, lowest_eigenpairs, BoundaryPlan, BoxPotential, EigenOptions, EndCondition,
    TruncatedGuide,
};
use crate::regular_pole::{
    regular_leading_asymptotic, solve_secular, threshold_moment, PerturbationField, SecularOptions,
};
use crate::singular_asym::{
    dirichlet_window_pole, dirichlet_window_width, neumann_patch_pole, SingularKind, WindowSpec,
};
use crate::transverse::{CrossSection, TransverseBasis};

pub const CSV_HEADER: &str = "epsilon,k_re,k_im,lambda_pred,lambda_pole,b_oracle,rel_err,classification";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    RegularPotential,
    DirichletWindow,
    NeumannPatch,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    /// Potential boxes for the regular scenario.
    #[serde(default)]
    pub potential: Vec<BoxPotential>,
    /// Window or patch half-width `a`; the physical half-width is `eps a`.
    #[serde(default)]
    pub half_width: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    /// Grid steps, coarsest first; the last two feed the extrapolation.
    pub h: Vec<f64>,
    #[serde(rename = "L")]
    pub half_lengths: Vec<f64>,
    #[serde(default = "default_ends")]
    pub ends: EndCondition,
    #[serde(default = "default_order")]
    pub richardson_order: f64,
    /// The guide is lengthened to at least this many decay lengths `1/k`.
    #[serde(default = "default_decay_lengths")]
    pub decay_lengths: f64,
}

fn default_ends() -> EndCondition {
    EndCondition::DirichletEnds
}

fn default_order() -> f64 {
    2.0
}

fn default_decay_lengths() -> f64 {
    6.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecularConfig {
    #[serde(default)]
    pub modes: Option<usize>,
    #[serde(default = "default_grid")]
    pub grid: (usize, usize),
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_grid() -> (usize, usize) {
    (64, 32)
}

fn default_tol() -> f64 {
    1e-12
}

impl Default for SecularConfig {
    fn default() -> Self {
        Self { modes: None, grid: default_grid(), tol: default_tol() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Accepted range of the oracle log-log slope.
    #[serde(default)]
    pub slope: Option<(f64, f64)>,
    /// Relative tolerance on the fitted prefactor.
    #[serde(default)]
    pub prefactor: Option<f64>,
    /// Per-row bound on `rel_err`.
    #[serde(default)]
    pub rel_err: Option<f64>,
    /// Patch scenario: `b_oracle` must stay below this.
    #[serde(default)]
    pub binding_ceiling: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub cross_section: CrossSection,
    pub m: usize,
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub perturbation: PerturbationConfig,
    #[serde(default)]
    pub oracle: Option<OracleConfig>,
    #[serde(default)]
    pub secular: SecularConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        CrossSection::new(self.cross_section.width, self.cross_section.bc).map_err(|e| Error::Config(e.to_string()))?;
        if self.epsilons.is_empty() {
            return bad("epsilon list is empty".into());
        }
        if self.epsilons.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return bad("epsilons must be positive".into());
        }
        if self.epsilons.windows(2).any(|w| w[1] >= w[0]) {
            return bad("epsilons must be strictly descending".into());
        }
        if self.m == 0 {
            return bad("threshold index m must be at least 1".into());
        }
        match self.scenario {
            Scenario::RegularPotential if self.perturbation.potential.is_empty() => {
                return bad("regular scenario needs potential boxes".into())
            }
            Scenario::DirichletWindow | Scenario::NeumannPatch => match self.perturbation.half_width {
                Some(a) if a > 0.0 => {}
                _ => return bad("window scenarios need a positive half_width".into()),
            },
            _ => {}
        }
        if let Some(o) = &self.oracle {
            if o.h.is_empty() || o.half_lengths.is_empty() {
                return bad("oracle needs at least one h and one L".into());
            }
            if o.h.windows(2).any(|w| w[1] >= w[0]) {
                return bad("oracle h list must be strictly descending".into());
            }
            if o.h.iter().chain(&o.half_lengths).any(|v| !(*v > 0.0)) {
                return bad("oracle h and L must be positive".into());
            }
        }
        Ok(())
    }
}

/// One epsilon of a sweep. Absent numbers stay absent; a failed sub-solver
/// leaves its message in `error`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub k_re: Option<f64>,
    pub k_im: Option<f64>,
    pub lambda_pred: Option<f64>,
    pub lambda_pole: Option<f64>,
    pub b_oracle: Option<f64>,
    pub rel_err: Option<f64>,
    pub classification: String,
    #[serde(default)]
    pub error: Option<String>,
    /// Extrapolated binding per configured `L`.
    #[serde(default)]
    pub b_by_length: Vec<(f64, f64)>,
}

impl SweepRow {
    fn empty(epsilon: f64) -> Self {
        Self {
            epsilon,
            k_re: None,
            k_im: None,
            lambda_pred: None,
            lambda_pole: None,
            b_oracle: None,
            rel_err: None,
            classification: String::new(),
            error: None,
            b_by_length: Vec::new(),
        }
    }
}

/// `(2^p b(h/2) - b(h)) / (2^p - 1)` generalized to the ratio `h1 / h2`.
pub fn richardson(h1: f64, b1: f64, h2: f64, b2: f64, order: f64) -> f64 {
    let w = (h1 / h2).powf(order);
    (w * b2 - b1) / (w - 1.0)
}

pub fn regular_potential_field(region: &BoxRegion, boxes: &[BoxPotential]) -> Result<PerturbationField> {
    let mut total = vec![Complex64::from(0.0); region.len()];
    for b in boxes {
        let f = PerturbationField::indicator(region, b.x1, b.x2, b.value)?;
        for (t, v) in total.iter_mut().zip(f.samples()) {
            *t += v;
        }
    }
    PerturbationField::from_samples(region, total)
}

/// Mode-sum kernel on the box that holds every potential box.
pub fn regular_kernel(cfg: &ExperimentConfig) -> Result<ModeSumKernel> {
    let r = cfg
        .perturbation
        .potential
        .iter()
        .map(|b| b.x1.0.abs().max(b.x1.1.abs()))
        .fold(0.0, f64::max);
    let (n1, n2) = cfg.secular.grid;
    let region = BoxRegion::new(r, cfg.cross_section.width, n1, n2)?;
    let modes = cfg.secular.modes.unwrap_or(cfg.m + 8);
    ModeSumKernel::new(TransverseBasis::build(cfg.cross_section, modes)?, cfg.m, region)
}

/// Oracle binding for one epsilon, extrapolated in `h` for every configured `L`.
pub fn oracle_binding(cfg: &ExperimentConfig, eps: f64, decay: Option<f64>) -> Result<Vec<(f64, f64)>> {
    let o = cfg.oracle.as_ref().ok_or_else(|| Error::Config("no oracle section".into()))?;
    let mut out = Vec::new();
    for &l_cfg in &o.half_lengths {
        let l = match decay {
            Some(k) if k > 0.0 => l_cfg.max(o.decay_lengths / k),
            _ => l_cfg,
        };
        let mut values = Vec::new();
        for &h in &o.h {
            let guide = scenario_guide(cfg, eps, l, h, o.ends)?;
            let op = build_fd_operator(&guide)?;
            let sol = lowest_eigenpairs(&op, 1, None, &EigenOptions::default())?;
            values.push((h, discrete_binding(&sol, &op, cfg.m)));
        }
        let b = match values.as_slice() {
            [.., (h1, b1), (h2, b2)] => richardson(*h1, *b1, *h2, *b2, o.richardson_order),
            [(_, b)] => *b,
            [] => unreachable!(),
        };
        out.push((l_cfg, b));
    }
    Ok(out)
}

fn scenario_guide(cfg: &ExperimentConfig, eps: f64, l: f64, h: f64, ends: EndCondition) -> Result<TruncatedGuide> {
    let g = TruncatedGuide::new(l, h, cfg.cross_section).with_ends(ends);
    Ok(match cfg.scenario {
        Scenario::RegularPotential => g.with_potential(eps, cfg.perturbation.potential.clone()),
        Scenario::DirichletWindow => {
            g.with_boundary(BoundaryPlan::NeumannWindow { half_width: eps * half_width(cfg)? })
        }
        Scenario::NeumannPatch => g.with_boundary(BoundaryPlan::DirichletPatch { half_width: eps * half_width(cfg)? }),
    })
}

fn half_width(cfg: &ExperimentConfig) -> Result<f64> {
    cfg.perturbation.half_width.ok_or_else(|| Error::Config("missing half_width".into()))
}

fn run_row(cfg: &ExperimentConfig, eps: f64) -> SweepRow {
    let mut row = SweepRow::empty(eps);
    if let Err(e) = fill_row(cfg, eps, &mut row) {
        row.error = Some(e.to_string());
    }
    row
}

fn fill_row(cfg: &ExperimentConfig, eps: f64, row: &mut SweepRow) -> Result<()> {
    let decay = match cfg.scenario {
        Scenario::RegularPotential => {
            let kernel = regular_kernel(cfg)?;
            let v = regular_potential_field(kernel.region(), &cfg.perturbation.potential)?;
            row.lambda_pred = Some(regular_leading_asymptotic(&v, eps, &kernel).re);
            let opts = SecularOptions { tol: cfg.secular.tol, ..SecularOptions::default() };
            let p = solve_secular(&v, eps, &kernel, Complex64::from(0.0), &opts)?;
            row.k_re = Some(p.k.re);
            row.k_im = Some(p.k.im);
            row.lambda_pole = Some(p.lambda.re);
            row.classification = p.classification.to_string();
            Some(p.k.re)
        }
        Scenario::DirichletWindow => {
            let a = half_width(cfg)?;
            let spec = WindowSpec::new(2, a, eps, SingularKind::DirichletGuideNeumannWindow)?;
            let c2 = explicit_window_solution_2d(a)?.c;
            let basis = TransverseBasis::build(cfg.cross_section, cfg.m.max(2))?;
            let pole = dirichlet_window_pole(&spec, c2, basis.mode(cfg.m).trace_derivative, cfg.m)?;
            let width = dirichlet_window_width(&spec, c2, &basis, cfg.m)?;
            row.k_re = Some(pole.k_lead);
            row.k_im = Some(width.im_k_lead);
            row.lambda_pred = Some(pole.lambda_lead);
            row.classification = width.classification.to_string();
            // the oracle has no resonance mode
            (cfg.m == 1).then_some(pole.k_lead)
        }
        Scenario::NeumannPatch => {
            let a = half_width(cfg)?;
            let spec = WindowSpec::new(2, a, eps, SingularKind::NeumannGuideDirichletPatch)?;
            let basis = TransverseBasis::build(cfg.cross_section, cfg.m)?;
            let pole = neumann_patch_pole(&spec, &basis, cfg.m, None)?;
            row.k_re = Some(pole.k_lead);
            row.k_im = Some(pole.im_k_lead);
            row.lambda_pred = Some(pole.lambda_lead);
            row.classification = pole.classification.map(|c| c.to_string()).unwrap_or_default();
            None
        }
    };
    if cfg.oracle.is_some() && !(cfg.scenario == Scenario::DirichletWindow && cfg.m != 1) {
        let by_length = oracle_binding(cfg, eps, decay)?;
        let b = by_length.last().map(|x| x.1);
        row.b_by_length = by_length;
        row.b_oracle = b;
        if cfg.scenario != Scenario::NeumannPatch {
            if let (Some(b), Some(lp)) = (b, row.lambda_pred) {
                row.rel_err = Some((b + lp).abs() / lp.abs());
            }
        }
    }
    Ok(())
}

/// Rows in the order of `cfg.epsilons`, computed concurrently.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    Ok(cfg.epsilons.par_iter().map(|&eps| run_row(cfg, eps)).collect())
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.12e}")).unwrap_or_default()
}

pub fn write_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(CSV_HEADER.split(',')).map_err(csv_err)?;
    for r in rows {
        let class = match &r.error {
            Some(e) => format!("error: {e}"),
            None => r.classification.clone(),
        };
        w.write_record([
            format!("{}", r.epsilon),
            cell(r.k_re),
            cell(r.k_im),
            cell(r.lambda_pred),
            cell(r.lambda_pole),
            cell(r.b_oracle),
            cell(r.rel_err),
            class,
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = rd.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Config(format!("unexpected CSV header {}", header.join(","))));
    }
    let num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|e| Error::Config(format!("bad number {s:?}: {e}")))
        }
    };
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let mut row = SweepRow::empty(num(&rec[0])?.ok_or_else(|| Error::Config("missing epsilon".into()))?);
        row.k_re = num(&rec[1])?;
        row.k_im = num(&rec[2])?;
        row.lambda_pred = num(&rec[3])?;
        row.lambda_pole = num(&rec[4])?;
        row.b_oracle = num(&rec[5])?;
        row.rel_err = num(&rec[6])?;
        match rec[7].strip_prefix("error: ") {
            Some(e) => row.error = Some(e.to_owned()),
            None => row.classification = rec[7].to_owned(),
        }
        rows.push(row);
    }
    Ok(rows)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Least-squares slope of `log |value|` against `log eps`, with its standard error.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 3 {
        return Err(Error::Fit(format!("need at least 3 points, got {}", points.len())));
    }
    let sign = points[0].1.signum();
    if points.iter().any(|p| p.1 == 0.0 || p.1.signum() != sign || !(p.0 > 0.0)) {
        return Err(Error::Fit("values must share one sign and eps must be positive".into()));
    }
    let x: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1.abs().ln()).collect();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let ssr: f64 = x.iter().zip(&y).map(|(a, b)| (b - my - slope * (a - mx)).powi(2)).sum();
    Ok((slope, (ssr / (n - 2.0) / sxx).sqrt()))
}

/// Prefactor `C` of `value = C eps^power` with the power held fixed:
/// the geometric mean of `value / eps^power`.
pub fn fixed_power_prefactor(points: &[(f64, f64)], power: f64) -> f64 {
    let n = points.len() as f64;
    (points.iter().map(|(e, v)| v.abs().ln() - power * e.ln()).sum::<f64>() / n).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeFit {
    pub quantity: String,
    pub slope: f64,
    pub stderr: f64,
    pub expected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrefactorCheck {
    pub power: f64,
    pub fitted: f64,
    pub predicted: f64,
    pub rel_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
    /// Offending row indices.
    pub rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub config: ExperimentConfig,
    pub rows: Vec<SweepRow>,
    pub fits: Vec<SlopeFit>,
    pub prefactor: Option<PrefactorCheck>,
    pub checks: Vec<CheckResult>,
    pub pass: bool,
}

/// `b ~ C eps^power` predicted by the leading term of each scenario.
fn predicted_law(cfg: &ExperimentConfig) -> Result<Option<(f64, f64)>> {
    Ok(match cfg.scenario {
        Scenario::RegularPotential => {
            let kernel = regular_kernel(cfg)?;
            let v = regular_potential_field(kernel.region(), &cfg.perturbation.potential)?;
            let q = threshold_moment(&v, &kernel).re;
            Some((2.0, (q / 2.0).powi(2)))
        }
        Scenario::DirichletWindow if cfg.m == 1 => {
            let a = half_width(cfg)?;
            let basis = TransverseBasis::build(cfg.cross_section, 1)?;
            let phi = basis.mode(1).trace_derivative;
            let tau = explicit_window_solution_2d(a)?.c * 2.0 * PI * phi * phi / 4.0;
            Some((4.0, tau * tau))
        }
        _ => None,
    })
}

pub fn build_report(cfg: &ExperimentConfig, rows: Vec<SweepRow>) -> Result<Report> {
    let mut fits = Vec::new();
    let mut checks = Vec::new();
    let law = predicted_law(cfg)?;
    let errored: Vec<usize> = rows.iter().enumerate().filter(|(_, r)| r.error.is_some()).map(|(i, _)| i).collect();
    checks.push(CheckResult {
        name: "rows_complete".into(),
        pass: errored.is_empty(),
        detail: format!("{} of {} rows failed", errored.len(), rows.len()),
        rows: errored,
    });
    let pred: Vec<(f64, f64)> = rows.iter().filter_map(|r| Some((r.epsilon, r.lambda_pred?))).collect();
    if pred.len() >= 3 {
        if let Ok((slope, stderr)) = fit_loglog_slope(&pred) {
            fits.push(SlopeFit { quantity: "lambda_pred".into(), slope, stderr, expected: law.map_or(f64::NAN, |l| l.0) });
        }
    }
    let pole_err: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| Some((r.epsilon, r.lambda_pole? - r.lambda_pred?)))
        .collect();
    if pole_err.len() >= 3 {
        if let Ok((slope, stderr)) = fit_loglog_slope(&pole_err) {
            fits.push(SlopeFit { quantity: "lambda_pole_minus_pred".into(), slope, stderr, expected: 3.0 });
        }
    }
    let bind: Vec<(f64, f64)> = rows.iter().filter_map(|r| Some((r.epsilon, r.b_oracle?))).collect();
    let mut prefactor = None;
    if let Some((power, predicted)) = law {
        if bind.len() >= 3 && bind.iter().all(|p| p.1 > 0.0) {
            let (slope, stderr) = fit_loglog_slope(&bind)?;
            fits.push(SlopeFit { quantity: "b_oracle".into(), slope, stderr, expected: power });
            if let Some((lo, hi)) = cfg.tolerances.slope {
                checks.push(CheckResult {
                    name: "oracle_slope".into(),
                    pass: slope >= lo && slope <= hi,
                    detail: format!("slope {slope:.4} against [{lo}, {hi}]"),
                    rows: vec![],
                });
            }
            let fitted = fixed_power_prefactor(&bind, power);
            let rel_diff = (fitted - predicted).abs() / predicted;
            if let Some(tol) = cfg.tolerances.prefactor {
                checks.push(CheckResult {
                    name: "prefactor".into(),
                    pass: rel_diff <= tol,
                    detail: format!("fitted {fitted:.6e} vs predicted {predicted:.6e}"),
                    rows: vec![],
                });
            }
            prefactor = Some(PrefactorCheck { power, fitted, predicted, rel_diff });
        } else if let Some((lo, hi)) = cfg.tolerances.slope {
            checks.push(CheckResult {
                name: "oracle_slope".into(),
                pass: false,
                detail: format!("no positive oracle bindings to fit against [{lo}, {hi}]"),
                rows: rows.iter().enumerate().filter(|(_, r)| !r.b_oracle.is_some_and(|b| b > 0.0)).map(|(i, _)| i).collect(),
            });
        }
    }
    if let Some(tol) = cfg.tolerances.rel_err {
        let bad: Vec<usize> =
            rows.iter().enumerate().filter(|(_, r)| !r.rel_err.is_some_and(|e| e <= tol)).map(|(i, _)| i).collect();
        checks.push(CheckResult {
            name: "rel_err".into(),
            pass: bad.is_empty(),
            detail: format!("rel_err <= {tol}"),
            rows: bad,
        });
    }
    if let Some(ceiling) = cfg.tolerances.binding_ceiling {
        let bad: Vec<usize> = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.b_oracle.is_some_and(|b| b <= ceiling))
            .map(|(i, _)| i)
            .collect();
        checks.push(CheckResult {
            name: "binding_ceiling".into(),
            pass: bad.is_empty(),
            detail: format!("b_oracle <= {ceiling}"),
            rows: bad,
        });
    }
    let pass = checks.iter().all(|c| c.pass);
    Ok(Report { config: cfg.clone(), rows, fits, prefactor, checks, pass })
}

/// Pretty JSON with struct field order, so equal inputs give equal bytes.
pub fn emit_report(report: &Report) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}
