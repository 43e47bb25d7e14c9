use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use num_complex::Complex64;
use serde::Serialize;

use wglab::cell::{explicit_window_solution_2d, fit_farfield_coefficient};
use wglab::harness::{
    build_report, emit_report, read_csv, regular_kernel, regular_potential_field, run_sweep, write_csv,
    ExperimentConfig, Scenario,
};
use wglab::oracle::{build_fd_operator, discrete_binding, lowest_eigenpairs, BoundaryPlan, EigenOptions, TruncatedGuide};
use wglab::regular_pole::{regular_leading_asymptotic, solve_secular, SecularOptions};
use wglab::singular_asym::{dirichlet_window_pole, dirichlet_window_width, neumann_patch_pole, SingularKind, WindowSpec};
use wglab::transverse::{BoundaryCondition, CrossSection, TransverseBasis};
use wglab::Error;

#[derive(Parser)]
#[command(name = "wglab", version, about = "Poles and bound states of perturbed waveguides")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of transverse modes in the mode sum.
    #[arg(long, global = true)]
    modes: Option<usize>,
    /// Quadrature grid of the secular solver.
    #[arg(long, global = true, num_args = 2, value_names = ["NX", "NY"])]
    grid: Option<Vec<usize>>,
    /// Secular iteration tolerance.
    #[arg(long, global = true)]
    tol: Option<f64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Transverse eigenvalues and boundary traces.
    Basis {
        #[arg(long, default_value_t = std::f64::consts::PI)]
        width: f64,
        #[arg(long, default_value = "dirichlet")]
        bc: String,
    },
    /// Secular pole for every epsilon of a regular-potential config.
    Pole,
    /// Leading asymptotic poles for every epsilon of a config.
    Asym,
    /// Far-field constant of the half-plane window problem.
    Cell {
        #[arg(long, default_value_t = 1.0)]
        a: f64,
    },
    /// Single finite-difference solve.
    Oracle {
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        h: Option<f64>,
        #[arg(long = "L")]
        half_length: Option<f64>,
    },
    /// Full epsilon sweep, writing sweep.csv and report.json.
    Sweep {
        /// Exit with status 4 when a declared tolerance fails.
        #[arg(long)]
        check: bool,
    },
    /// Rebuilds report.json from a sweep CSV.
    Report {
        #[arg(long)]
        csv: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_) | Error::Io(_) => 2,
        Error::IterationDiverged { .. } | Error::Solver { .. } => 3,
        _ => 1,
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(j) = cli.modes {
        cfg.secular.modes = Some(j);
    }
    if let Some(g) = &cli.grid {
        cfg.secular.grid = (g[0], g[1]);
    }
    if let Some(t) = cli.tol {
        cfg.secular.tol = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<PathBuf, Error> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

#[derive(Serialize)]
struct PoleLine {
    epsilon: f64,
    k: Complex64,
    lambda: Complex64,
    lambda_asym: f64,
    classification: String,
    iterations: usize,
}

#[derive(Serialize)]
struct OracleLine {
    epsilon: f64,
    h: f64,
    half_length: f64,
    hx: f64,
    hy: f64,
    eigenvalue: f64,
    binding: f64,
    residual: f64,
}

fn run(cli: &Cli) -> Result<u8, Error> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match &cli.command {
        Command::Basis { width, bc } => {
            let bc = match bc.as_str() {
                "dirichlet" => BoundaryCondition::Dirichlet,
                "neumann" => BoundaryCondition::Neumann,
                other => return Err(Error::Config(format!("unknown boundary condition {other:?}"))),
            };
            let basis = TransverseBasis::build(CrossSection::new(*width, bc)?, cli.modes.unwrap_or(8))?;
            let rows: Vec<_> = basis.modes().iter().map(|m| (m.index, m.mu, m.trace_derivative, m.trace_value)).collect();
            print_json(&rows)?;
        }
        Command::Pole => {
            let cfg = load_config(cli)?;
            if cfg.scenario != Scenario::RegularPotential {
                return Err(Error::Config("pole needs a regular_potential config".into()));
            }
            let kernel = regular_kernel(&cfg)?;
            let v = regular_potential_field(kernel.region(), &cfg.perturbation.potential)?;
            let opts = SecularOptions { tol: cfg.secular.tol, ..Default::default() };
            let mut lines = Vec::new();
            for &eps in &cfg.epsilons {
                let p = solve_secular(&v, eps, &kernel, Complex64::from(0.0), &opts)?;
                lines.push(PoleLine {
                    epsilon: eps,
                    k: p.k,
                    lambda: p.lambda,
                    lambda_asym: regular_leading_asymptotic(&v, eps, &kernel).re,
                    classification: p.classification.to_string(),
                    iterations: p.trace.len() - 1,
                });
            }
            print_json(&lines)?;
        }
        Command::Asym => {
            let cfg = load_config(cli)?;
            let a = cfg.perturbation.half_width.unwrap_or(1.0);
            let mut lines = Vec::new();
            for &eps in &cfg.epsilons {
                let line = match cfg.scenario {
                    Scenario::DirichletWindow => {
                        let spec = WindowSpec::new(2, a, eps, SingularKind::DirichletGuideNeumannWindow)?;
                        let c2 = explicit_window_solution_2d(a)?.c;
                        let basis = TransverseBasis::build(cfg.cross_section, cfg.m.max(2))?;
                        let pole = dirichlet_window_pole(&spec, c2, basis.mode(cfg.m).trace_derivative, cfg.m)?;
                        let width = dirichlet_window_width(&spec, c2, &basis, cfg.m)?;
                        serde_json::json!({"epsilon": eps, "pole": pole, "width": width})
                    }
                    Scenario::NeumannPatch => {
                        let spec = WindowSpec::new(2, a, eps, SingularKind::NeumannGuideDirichletPatch)?;
                        let basis = TransverseBasis::build(cfg.cross_section, cfg.m)?;
                        serde_json::json!({"epsilon": eps, "pole": neumann_patch_pole(&spec, &basis, cfg.m, None)?})
                    }
                    Scenario::RegularPotential => {
                        let kernel = regular_kernel(&cfg)?;
                        let v = regular_potential_field(kernel.region(), &cfg.perturbation.potential)?;
                        serde_json::json!({"epsilon": eps, "lambda_asym": regular_leading_asymptotic(&v, eps, &kernel).re})
                    }
                };
                lines.push(line);
            }
            print_json(&lines)?;
        }
        Command::Cell { a } => {
            let sol = explicit_window_solution_2d(*a)?;
            let fitted = fit_farfield_coefficient(|x, y| sol.eval(x, y).unwrap_or(f64::NAN), 20.0 * a, 100.0 * a)?;
            print_json(&serde_json::json!({"a": a, "c_exact": sol.c, "c_fit": fitted}))?;
        }
        Command::Oracle { epsilon, h, half_length } => {
            let cfg = load_config(cli)?;
            let o = cfg.oracle.clone().ok_or_else(|| Error::Config("config has no oracle section".into()))?;
            let h = h.unwrap_or(*o.h.last().expect("validated"));
            let l = half_length.unwrap_or(*o.half_lengths.last().expect("validated"));
            let g = TruncatedGuide::new(l, h, cfg.cross_section).with_ends(o.ends);
            let g = match cfg.scenario {
                Scenario::RegularPotential => g.with_potential(*epsilon, cfg.perturbation.potential.clone()),
                Scenario::DirichletWindow => g.with_boundary(BoundaryPlan::NeumannWindow {
                    half_width: epsilon * cfg.perturbation.half_width.unwrap_or(1.0),
                }),
                Scenario::NeumannPatch => g.with_boundary(BoundaryPlan::DirichletPatch {
                    half_width: epsilon * cfg.perturbation.half_width.unwrap_or(1.0),
                }),
            };
            let op = build_fd_operator(&g)?;
            let sol = lowest_eigenpairs(&op, 1, None, &EigenOptions::default())?;
            let layout = op.layout();
            print_json(&OracleLine {
                epsilon: *epsilon,
                h,
                half_length: l,
                hx: layout.hx,
                hy: layout.hy,
                eigenvalue: sol.eigenvalues[0],
                binding: discrete_binding(&sol, &op, cfg.m),
                residual: sol.residuals[0],
            })?;
        }
        Command::Sweep { check } => {
            let cfg = load_config(cli)?;
            let dir = out_dir(cli)?;
            let rows = run_sweep(&cfg)?;
            write_csv(&rows, &dir.join("sweep.csv"))?;
            let report = build_report(&cfg, rows)?;
            write_report(&dir, &emit_report(&report)?)?;
            for c in &report.checks {
                eprintln!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if *check && !report.pass {
                return Ok(4);
            }
            if report.rows.iter().any(|r| r.error.is_some()) {
                return Ok(3);
            }
        }
        Command::Report { csv } => {
            let cfg = load_config(cli)?;
            let rows = read_csv(csv)?;
            let report = build_report(&cfg, rows)?;
            write_report(&out_dir(cli)?, &emit_report(&report)?)?;
        }
    }
    Ok(0)
}

fn write_report(dir: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(dir.join("report.json"), text)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
