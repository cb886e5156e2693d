//! `fbl`: config-driven runner for the free-boundary laboratory. Wires the
//! pipeline solve -> extract -> estimate -> verify and emits the CSV/report
//! artifacts; exit code 0 iff every verdict passes, 2 on config errors, 3 on
//! numerical failures.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use config::{ResolvedConfig, RunConfig, DEFAULT_H_FRACTIONS};
use fbl_core::bessel::bessel_report;
use fbl_core::lambda::{
    build_boundary_curve_y, estimate_lambda_opts, estimate_vh_opts, expansion_convergence,
    write_lambda_csv, LambdaCsvRow, McOptions,
};
use fbl_core::pde::{solve_full, write_boundary_csv, write_surface_csv, ValueSurface};
use fbl_core::stefan::stefan_report;
use fbl_core::{Error as CoreError, Orientation, ProblemSpec};

const REPORT_SCHEMA: &str = "fbl run report v1";

#[derive(Parser)]
#[command(name = "fbl", version, about = "free-boundary laboratory runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// path to the run configuration (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// output directory (overrides [output].dir; default "out")
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// override mc.seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// worker threads (fallback: env FBL_WORKERS, then all cores)
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// suppress progress output
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Clone, Copy, PartialEq)]
enum Cmd {
    /// solve the obstacle problem; emit surface.csv and boundary.csv
    Solve,
    /// extract the boundary and run regularity checks; emit boundary.csv
    Boundary,
    /// Monte Carlo boundary-derivative formula; emit lambda.csv
    Lambda,
    /// pre-limit functional V_h against the solver; emit vh.csv
    Vh,
    /// Stefan-problem verification; emit stefan_report.{txt,csv}
    VerifyStefan,
    /// Bessel/Pitman distributional test battery; emit bessel_report.txt
    BesselCheck,
    /// run every stage and emit run_report.txt
    All,
}

enum CliErr {
    Config(String),
    Numerical(String),
}

impl From<CoreError> for CliErr {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(_) | CoreError::Domain(_) => CliErr::Config(format!("{e}")),
            other => CliErr::Numerical(format!("{other}")),
        }
    }
}

fn io_err(stage: &str, e: std::io::Error) -> CliErr {
    CliErr::Numerical(format!("stage {stage}: io error: {e}"))
}

/// One line of the run report.
struct Line {
    label: String,
    detail: String,
    pass: Option<bool>,
}

impl Line {
    fn check(label: &str, detail: String, pass: bool) -> Line {
        Line {
            label: label.into(),
            detail,
            pass: Some(pass),
        }
    }

    fn info(label: &str, detail: String) -> Line {
        Line {
            label: label.into(),
            detail,
            pass: None,
        }
    }
}

struct StageResult {
    name: &'static str,
    lines: Vec<Line>,
    seconds: f64,
}

impl StageResult {
    fn all_pass(&self) -> bool {
        self.lines.iter().all(|l| l.pass != Some(false))
    }
}

struct Ctx {
    rc: ResolvedConfig,
    spec: ProblemSpec,
    out: PathBuf,
    quiet: bool,
    workers: usize,
    /// lazily solved fine and half-resolution surfaces
    fine: Option<ValueSurface>,
    coarse: Option<ValueSurface>,
}

impl Ctx {
    fn fine(&mut self) -> Result<&ValueSurface, CliErr> {
        if self.fine.is_none() {
            self.progress("solving obstacle problem");
            self.fine = Some(solve_full(&self.spec, self.rc.n_t, self.rc.n_x)?);
        }
        Ok(self.fine.as_ref().unwrap())
    }

    fn coarse(&mut self) -> Result<&ValueSurface, CliErr> {
        if self.coarse.is_none() {
            self.progress("solving half-resolution grid for budgets");
            self.coarse = Some(solve_full(&self.spec, self.rc.n_t / 2, self.rc.n_x / 2)?);
        }
        Ok(self.coarse.as_ref().unwrap())
    }

    fn mc_options(&self) -> McOptions {
        let mut opts = McOptions {
            n_paths: self.rc.n_paths,
            dt_path: self.rc.dt_path,
            seed: self.rc.seed,
            bridge_max: self.rc.bridge_max,
            ..McOptions::default()
        };
        if let Some(f) = self.rc.config.mc.rho_floor {
            opts.rho_floor_factor = f;
        }
        opts
    }

    fn progress(&self, msg: &str) {
        if !self.quiet {
            eprintln!("fbl: {msg}");
        }
    }
}

fn stage_solve(ctx: &mut Ctx) -> Result<StageResult, CliErr> {
    let start = Instant::now();
    ctx.fine()?;
    let surface = ctx.fine.as_ref().unwrap();
    write_surface_csv(surface, &ctx.out.join("surface.csv")).map_err(|e| io_err("solve", e))?;
    write_boundary_csv(surface, &ctx.out.join("boundary.csv"))
        .map_err(|e| io_err("solve", e))?;
    let min_u = surface.min_u();
    let tol = 1e-12 * surface.scale;
    let lines = vec![
        Line::info(
            "grid",
            format!("{} x {} nodes", surface.grid.n_t() + 1, surface.grid.x_nodes.len()),
        ),
        Line::check("value dominates payoff", format!("min(v - g) = {min_u:.3e}"), min_u >= -tol),
        Line::info("artifacts", "surface.csv, boundary.csv".into()),
    ];
    Ok(StageResult {
        name: "solve",
        lines,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn stage_boundary(ctx: &mut Ctx) -> Result<StageResult, CliErr> {
    let start = Instant::now();
    let t2 = ctx.rc.t2;
    ctx.fine()?;
    let surface = ctx.fine.as_ref().unwrap();
    write_boundary_csv(surface, &ctx.out.join("boundary.csv"))
        .map_err(|e| io_err("boundary", e))?;
    let grid = &surface.grid;
    // monotone toward the terminal value within one cell of extraction noise
    let sign = match surface.orientation {
        Orientation::StopBelow => 1.0,
        Orientation::StopAbove => -1.0,
    };
    let mut worst = f64::INFINITY;
    for i in 0..grid.n_t() {
        if grid.t_nodes[i + 1] <= ctx.spec.rect_t1 {
            worst = worst.min(sign * (surface.b[i + 1] - surface.b[i]));
        }
    }
    let lipschitz = fbl_core::pde::lipschitz_ratio_check(surface, t2);
    let lines = vec![
        Line::check(
            "boundary monotone",
            format!("worst signed step {worst:.3e} vs -dx = {:.3e}", -grid.dx),
            worst >= -grid.dx,
        ),
        Line::check(
            "boundary slope bounded",
            format!("max |b_dot| on [0, T2] = {lipschitz:.3e}"),
            lipschitz.is_finite(),
        ),
        Line::info("artifacts", "boundary.csv".into()),
    ];
    Ok(StageResult {
        name: "boundary",
        lines,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn stage_lambda(ctx: &mut Ctx) -> Result<StageResult, CliErr> {
    let start = Instant::now();
    let opts = ctx.mc_options();
    let (t_list, se_mult, budget_mult) = (
        ctx.rc.t_list.clone(),
        ctx.rc.se_mult,
        ctx.rc.budget_mult,
    );
    let h_list_cfg = ctx.rc.h_list.clone();
    ctx.fine()?;
    ctx.coarse()?;
    let surface = ctx.fine.as_ref().unwrap();
    let coarse = ctx.coarse.as_ref().unwrap();
    let spec = &ctx.spec;
    let map = spec.lamperti();
    let curve = build_boundary_curve_y(surface, spec, &map)?;
    let h_list: Vec<f64> = h_list_cfg.unwrap_or_else(|| {
        DEFAULT_H_FRACTIONS
            .iter()
            .map(|f| f * (map.y2 - map.y1))
            .collect()
    });
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for &t in &t_list {
        if !ctx.quiet {
            eprintln!("fbl: lambda estimate at t = {t}");
        }
        let est = estimate_lambda_opts(spec, surface, &curve, &map, t, &opts)?;
        let bdot_fd = surface.b_dot_at(t);
        let budget = (bdot_fd - coarse.b_dot_at(t)).abs();
        let tol = se_mult * est.bdot_se() + budget_mult * budget;
        let row = LambdaCsvRow::new(&est, bdot_fd, tol);
        lines.push(Line::check(
            "boundary derivative formula",
            format!(
                "t = {t}: |formula - fd| = {:.3e} vs tol {:.3e}",
                row.abs_diff, tol
            ),
            row.pass,
        ));
        let study = expansion_convergence(surface, &curve, &map, t, &h_list, &est);
        if study.skipped {
            lines.push(Line::info(
                "expansion study",
                format!("t = {t}: skipped (Lambda within noise of zero)"),
            ));
        } else {
            let ratios: Vec<String> = study
                .rows
                .iter()
                .map(|(h, r)| format!("r({h:.4}) = {r:.4}"))
                .collect();
            // the MC Lambda in the denominator shifts every ratio together,
            // so grant the comparison its relative standard error
            let slack = se_mult * est.se_lambda() / est.lambda.abs();
            let gap = (study.rows.last().unwrap().1 - 1.0).abs()
                - (study.rows[0].1 - 1.0).abs();
            lines.push(Line::check(
                "expansion ratio drifts to 1",
                format!("t = {t}: {} (slack {slack:.3e})", ratios.join(", ")),
                study.improving || gap < slack,
            ));
        }
        rows.push(row);
    }
    write_lambda_csv(&rows, &ctx.out.join("lambda.csv")).map_err(|e| io_err("lambda", e))?;
    lines.push(Line::info("artifacts", "lambda.csv".into()));
    Ok(StageResult {
        name: "lambda",
        lines,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn stage_vh(ctx: &mut Ctx) -> Result<StageResult, CliErr> {
    let start = Instant::now();
    let opts = ctx.mc_options();
    let (t_list, se_mult, budget_mult) = (
        ctx.rc.t_list.clone(),
        ctx.rc.se_mult,
        ctx.rc.budget_mult,
    );
    ctx.fine()?;
    ctx.coarse()?;
    let surface = ctx.fine.as_ref().unwrap();
    let coarse = ctx.coarse.as_ref().unwrap();
    let spec = &ctx.spec;
    let map = spec.lamperti();
    let curve = build_boundary_curve_y(surface, spec, &map)?;
    let h = 0.05 * (map.y2 - map.y1);
    let mut lines = Vec::new();
    let mut csv = String::from("t,h,Vh_mc,se,wdot_solver,abs_diff,tolerance,verdict\n");
    for &t in &t_list {
        if !ctx.quiet {
            eprintln!("fbl: V_h estimate at t = {t}");
        }
        let est = estimate_vh_opts(spec, surface, &curve, &map, t, h, &opts)?;
        let x = map.f_inv(curve.c_at(t) + h);
        let solver = surface.u_dot_at(t, x);
        let solver_coarse = coarse.u_dot_at(t, x);
        let budget = (solver - solver_coarse).abs();
        let tol = se_mult * est.std_err + budget_mult * budget;
        let diff = (est.value - solver).abs();
        let pass = diff <= tol;
        writeln!(
            csv,
            "{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{}",
            t,
            h,
            est.value,
            est.std_err,
            solver,
            diff,
            tol,
            if pass { "PASS" } else { "FAIL" }
        )
        .unwrap();
        lines.push(Line::check(
            "pre-limit functional",
            format!("t = {t}: |V_h - wdot| = {diff:.3e} vs tol {tol:.3e}"),
            pass,
        ));
    }
    fs::write(ctx.out.join("vh.csv"), csv).map_err(|e| io_err("vh", e))?;
    lines.push(Line::info("artifacts", "vh.csv".into()));
    Ok(StageResult {
        name: "vh",
        lines,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn stage_stefan(ctx: &mut Ctx) -> Result<StageResult, CliErr> {
    let start = Instant::now();
    ctx.progress("stefan verification (fine, coarse and terminal solves)");
    let report = stefan_report(&ctx.spec, ctx.rc.n_x, ctx.rc.t2)?;
    fs::write(ctx.out.join("stefan_report.txt"), report.render_text())
        .map_err(|e| io_err("verify-stefan", e))?;
    fs::write(ctx.out.join("stefan_report.csv"), report.csv())
        .map_err(|e| io_err("verify-stefan", e))?;
    let mut lines: Vec<Line> = report
        .verdicts
        .iter()
        .map(|v| {
            Line::check(
                &format!("{} {}", v.condition, v.id),
                format!("residual {:.3e} vs budget {:.3e}", v.residual, v.budget),
                v.pass,
            )
        })
        .collect();
    lines.push(Line::info(
        "artifacts",
        "stefan_report.txt, stefan_report.csv".into(),
    ));
    Ok(StageResult {
        name: "verify-stefan",
        lines,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn stage_bessel(ctx: &mut Ctx) -> Result<StageResult, CliErr> {
    let start = Instant::now();
    ctx.progress("bessel/pitman distributional checks");
    let report = bessel_report(
        ctx.rc.n_paths,
        ctx.rc.dt_path,
        ctx.rc.seed,
        ctx.rc.bridge_max,
    );
    fs::write(ctx.out.join("bessel_report.txt"), report.render())
        .map_err(|e| io_err("bessel-check", e))?;
    let lines = vec![
        Line::check(
            "distributional battery",
            format!(
                "{} checks, all thresholds as reported",
                report.lines.len()
            ),
            report.all_pass(),
        ),
        Line::info("artifacts", "bessel_report.txt".into()),
    ];
    Ok(StageResult {
        name: "bessel-check",
        lines,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn render_report(ctx: &Ctx, config_path: &Path, stages: &[StageResult]) -> String {
    let overall = stages.iter().all(|s| s.all_pass());
    let mut out = String::new();
    writeln!(out, "{REPORT_SCHEMA}").unwrap();
    writeln!(out, "version: {}", env!("CARGO_PKG_VERSION")).unwrap();
    writeln!(out, "config: {}", config_path.display()).unwrap();
    writeln!(out, "seed: {}", ctx.rc.seed).unwrap();
    writeln!(out, "workers: {}", ctx.workers).unwrap();
    for s in stages {
        writeln!(
            out,
            "stage {}: {} ({:.2} s)",
            s.name,
            if s.all_pass() { "PASS" } else { "FAIL" },
            s.seconds
        )
        .unwrap();
        for l in &s.lines {
            let tag = match l.pass {
                Some(true) => "PASS",
                Some(false) => "FAIL",
                None => "info",
            };
            writeln!(out, "  [{tag}] {}: {}", l.label, l.detail).unwrap();
        }
    }
    writeln!(out, "overall: {}", if overall { "PASS" } else { "FAIL" }).unwrap();
    out
}

fn run(cli: &Cli) -> Result<bool, CliErr> {
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliErr::Config("config error: --config PATH is required".into()))?;
    let text = fs::read_to_string(config_path).map_err(|e| {
        CliErr::Config(format!(
            "config error: cannot read {}: {e}",
            config_path.display()
        ))
    })?;
    let mut config = RunConfig::parse(&text).map_err(CliErr::Config)?;
    if let Some(seed) = cli.seed {
        config.mc.seed = Some(seed);
    }
    let rc = config.resolve().map_err(CliErr::Config)?;
    let spec = config.problem_spec().map_err(CliErr::Config)?;

    let workers = cli
        .workers
        .or_else(|| {
            std::env::var("FBL_WORKERS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(0);
    if workers > 0 {
        // ignore failure: the global pool may already exist in-process
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }

    let out = cli
        .out
        .clone()
        .or_else(|| rc.config.output.dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out).map_err(|e| {
        CliErr::Config(format!(
            "config error: cannot create output dir {}: {e}",
            out.display()
        ))
    })?;

    let mut ctx = Ctx {
        rc,
        spec,
        out,
        quiet: cli.quiet,
        workers: if workers > 0 {
            workers
        } else {
            rayon::current_num_threads()
        },
        fine: None,
        coarse: None,
    };

    let stages: Vec<StageResult> = match cli.cmd {
        Cmd::Solve => vec![stage_solve(&mut ctx)?],
        Cmd::Boundary => vec![stage_boundary(&mut ctx)?],
        Cmd::Lambda => vec![stage_lambda(&mut ctx)?],
        Cmd::Vh => vec![stage_vh(&mut ctx)?],
        Cmd::VerifyStefan => vec![stage_stefan(&mut ctx)?],
        Cmd::BesselCheck => vec![stage_bessel(&mut ctx)?],
        Cmd::All => vec![
            stage_solve(&mut ctx)?,
            stage_boundary(&mut ctx)?,
            stage_lambda(&mut ctx)?,
            stage_vh(&mut ctx)?,
            stage_stefan(&mut ctx)?,
            stage_bessel(&mut ctx)?,
        ],
    };

    let report = render_report(&ctx, config_path, &stages);
    if cli.cmd == Cmd::All {
        fs::write(ctx.out.join("run_report.txt"), &report).map_err(|e| io_err("all", e))?;
    }
    if !cli.quiet {
        print!("{report}");
    }
    Ok(stages.iter().all(|s| s.all_pass()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(CliErr::Config(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(2)
        }
        Err(CliErr::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(3)
        }
    }
}
