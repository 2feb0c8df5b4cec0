//! Command-line front end.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | configuration or usage error |
//! | 2 | structural condition failed (`check`) |
//! | 3 | outer iteration diverged or did not converge |
//! | 4 | deviation test failed (`game`) |
//!
//! With `--out DIR` the run writes `diagnostics.jsonl`, `moments.csv` and
//! `report.json` there; the report is printed to stdout in any case.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Config, ProblemConfig, SolverConfig};
use crate::error::{Error, Result};
use crate::fixpoint::{self, IterationDiagnostics, IterationRecord};
use crate::lqgame::{self, boundary_matrix, example3, GameSpec, MeanOutcome};
use crate::paths::{write_moments_csv, PathEnsemble};
use crate::problem::{check_h1, check_smallness, MfProblem};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_CONDITION: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_DEVIATION: i32 = 4;

pub const THREADS_ENV: &str = "MFBSDE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "mfbsde", version, about = "Mean-field backward-forward SDE solver and LQ mean-field game toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the structural conditions of a problem or game.
    Check {
        config: PathBuf,
        /// Random probes for the monotonicity check of affine problems.
        #[arg(long, default_value_t = 4096)]
        probes: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve a problem (or a game's aggregated system) by the outer iteration.
    Solve {
        config: PathBuf,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Synthesize an open-loop Nash equilibrium and test unilateral deviations.
    Game {
        config: PathBuf,
        #[command(flatten)]
        run: RunFlags,
        /// Random deviations per player; 0 skips the test.
        #[arg(long)]
        deviations: Option<usize>,
        #[arg(long)]
        deviation_magnitude: Option<f64>,
        /// Shift player 0's control by this amount before the deviation test.
        #[arg(long, hide = true)]
        corrupt_control: Option<f64>,
    },
    /// Mean boundary problem of the built-in two-player counterexample.
    Counterexample {
        #[arg(long = "T", required_unless_present = "sweep", conflicts_with = "sweep", allow_negative_numbers = true)]
        horizon: Option<f64>,
        /// `a:b:step`; prints `T,det` as CSV.
        #[arg(long = "T-sweep")]
        sweep: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    #[arg(long)]
    pub particles: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_outer: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; falls back to MFBSDE_THREADS, then all cores.
    #[arg(long)]
    pub threads: Option<usize>,
}

impl RunFlags {
    fn solver(&self) -> SolverConfig {
        SolverConfig {
            particles: self.particles,
            steps: self.steps,
            seed: self.seed,
            delta: self.delta,
            tol: self.tol,
            max_outer: self.max_outer,
            ..Default::default()
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_CONFIG
            } else {
                EXIT_OK
            }
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    let threads = match &cli.command {
        Command::Solve { run, .. } | Command::Game { run, .. } => run.threads,
        _ => None,
    };
    let pool = match thread_pool(threads) {
        Ok(p) => p,
        Err(e) => return fail(&e),
    };
    pool.install(|| match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => fail(&e),
    })
}

fn fail(e: &Error) -> i32 {
    eprintln!("error: {e}");
    exit_code(e)
}

/// Exit code for an error that escaped a command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } | Error::NumericalBreakdown { .. } | Error::NonFinite(_) => EXIT_NOT_CONVERGED,
        _ => EXIT_CONFIG,
    }
}

fn thread_pool(flag: Option<usize>) -> Result<rayon::ThreadPool> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse().map_err(|_| Error::Config(format!("{THREADS_ENV}={v} is not a count")))?),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        return Err(Error::Config("thread count must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(e.to_string()))
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Check { config, probes, seed, out } => cmd_check(&config, probes, seed, out.as_deref()),
        Command::Solve { config, run } => cmd_solve(&config, &run),
        Command::Game { config, run, deviations, deviation_magnitude, corrupt_control } => {
            let extra = SolverConfig { deviations, deviation_magnitude, ..Default::default() };
            cmd_game(&config, &run, &extra, corrupt_control)
        }
        Command::Counterexample { horizon: Some(t), out, .. } => cmd_counterexample(t, out.as_deref()),
        Command::Counterexample { sweep: Some(s), out, .. } => cmd_sweep(&s, out.as_deref()),
        Command::Counterexample { .. } => Err(Error::Config("one of --T or --T-sweep is required".into())),
    }
}

struct Outputs<'a> {
    dir: Option<&'a Path>,
}

impl<'a> Outputs<'a> {
    fn new(dir: Option<&'a Path>) -> Result<Self> {
        if let Some(d) = dir {
            fs::create_dir_all(d)?;
        }
        Ok(Self { dir })
    }

    fn write(&self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        if let Some(d) = self.dir {
            let mut buf = Vec::new();
            f(&mut buf)?;
            fs::write(d.join(name), buf)?;
        }
        Ok(())
    }

    fn report(&self, report: &impl Serialize) -> Result<()> {
        let text = serde_json::to_string_pretty(report)?;
        println!("{text}");
        self.write("report.json", |b| {
            b.extend_from_slice(text.as_bytes());
            b.push(b'\n');
            Ok(())
        })
    }

    fn diagnostics(&self, history: &[IterationRecord]) -> Result<()> {
        self.write("diagnostics.jsonl", |b| {
            let d = IterationDiagnostics { history: history.to_vec(), converged: false, residual_report: Vec::new() };
            d.write_jsonl(b)
        })
    }
}

pub fn cmd_check(path: &Path, probes: usize, seed: Option<u64>, out: Option<&Path>) -> Result<i32> {
    let cfg = Config::load(path)?;
    let outputs = Outputs::new(out)?;
    let seed = seed.unwrap_or(cfg.solver.seed());
    let (report, pass) = match &cfg.problem {
        ProblemConfig::Game(gs) => {
            let grid = cfg.solver.grid(gs.horizon)?;
            let r = lqgame::check_h2(gs, &grid)?;
            let pass = r.pass;
            (json!({"kind": "game", "h2": r}), pass)
        }
        ProblemConfig::Affine(spec) => {
            let p = spec.build()?;
            if probes == 0 {
                return Err(Error::Config("--probes must be positive".into()));
            }
            let mono = check_h1(&p, probes, seed)?;
            let small = match (p.lipschitz, p.monotonicity) {
                (Some(l), Some(m)) => Some(check_smallness(&l, &m)),
                _ => None,
            };
            let pass = mono.pass && small.as_ref().is_none_or(|s| s.pass);
            (json!({"kind": "affine", "monotonicity": mono, "smallness": small, "pass": pass}), pass)
        }
    };
    outputs.report(&report)?;
    Ok(if pass { EXIT_OK } else { EXIT_CONDITION })
}

fn load_with_flags(path: &Path, flags: &SolverConfig) -> Result<Config> {
    let mut cfg = Config::load(path)?;
    cfg.solver = cfg.solver.overridden_by(flags);
    Ok(cfg)
}

fn build_problem(cfg: &Config) -> Result<MfProblem> {
    match &cfg.problem {
        ProblemConfig::Affine(spec) => spec.build(),
        ProblemConfig::Game(gs) => lqgame::build_aggregated(gs, true),
    }
    .map_err(|e| Error::Config(e.to_string()))
}

pub fn cmd_solve(path: &Path, run: &RunFlags) -> Result<i32> {
    let cfg = load_with_flags(path, &run.solver())?;
    let params = cfg.solver.scheme()?;
    let grid = cfg.solver.grid(cfg.horizon())?;
    let p = build_problem(&cfg)?;
    let outputs = Outputs::new(run.out.as_deref())?;
    let solver = &cfg.solver;
    match fixpoint::solve(&p, &grid, &params, solver.seed()) {
        Ok(sol) => {
            let history = &sol.diagnostics.history;
            outputs.diagnostics(history)?;
            outputs.write("moments.csv", |b| write_moments_csv(&grid, &[&sol.x, &sol.y], b))?;
            let residuals = fixpoint::residual(&p, &sol);
            let condition = match (p.lipschitz, p.monotonicity) {
                (Some(l), Some(m)) => Some(check_smallness(&l, &m)),
                _ => None,
            };
            outputs.report(&json!({
                "converged": sol.converged(),
                "outer_iterations": history.len(),
                "final_gap": history.last().map(IterationRecord::gap),
                "residuals": residuals,
                "condition": condition,
                "solver": solver,
            }))?;
            Ok(if sol.converged() { EXIT_OK } else { EXIT_NOT_CONVERGED })
        }
        Err(Error::Diverged { history }) => {
            outputs.diagnostics(&history)?;
            outputs.report(&json!({
                "converged": false,
                "diverged": true,
                "outer_iterations": history.len(),
                "final_gap": history.last().map(IterationRecord::gap),
                "solver": solver,
            }))?;
            Ok(EXIT_NOT_CONVERGED)
        }
        Err(e) => Err(e),
    }
}

fn game_spec(cfg: &Config) -> Result<&GameSpec> {
    match &cfg.problem {
        ProblemConfig::Game(g) => Ok(g),
        ProblemConfig::Affine(_) => Err(Error::Config("the game command needs a \"game\" problem".into())),
    }
}

/// `time, E[X], E[p_i]..., E[u_i]...` moments, players in order.
fn game_moments(nash: &lqgame::NashResult, out: &mut Vec<u8>) -> Result<()> {
    let mut ens: Vec<&PathEnsemble> = vec![&nash.x];
    ens.extend(&nash.p);
    ens.extend(&nash.controls);
    write_moments_csv(&nash.grid, &ens, out)
}

pub fn cmd_game(path: &Path, run: &RunFlags, extra: &SolverConfig, corrupt: Option<f64>) -> Result<i32> {
    let cfg = load_with_flags(path, &run.solver().overridden_by(extra))?;
    let gs = game_spec(&cfg)?;
    let solver = &cfg.solver;
    let params = solver.scheme()?;
    let grid = solver.grid(gs.horizon)?;
    let deviations = solver.deviations();
    let magnitude = solver.deviation_magnitude()?;
    gs.validate().map_err(|e| Error::Config(e.to_string()))?;
    let h2 = lqgame::check_h2(gs, &grid)?;
    let outputs = Outputs::new(run.out.as_deref())?;
    let mut nash = match lqgame::solve_nash(gs, &grid, &params, solver.seed()) {
        Ok(n) => n,
        Err(Error::Diverged { history }) => {
            outputs.diagnostics(&history)?;
            outputs.report(&json!({"converged": false, "diverged": true, "h2": h2, "solver": solver}))?;
            return Ok(EXIT_NOT_CONVERGED);
        }
        Err(e) => return Err(e),
    };
    if let Some(shift) = corrupt {
        nash = nash.with_shifted_control(0, shift);
    }
    outputs.diagnostics(&nash.aggregated.diagnostics.history)?;
    outputs.write("moments.csv", |b| game_moments(&nash, b))?;
    let mut reports = Vec::new();
    if deviations > 0 {
        for i in 0..gs.player_count() {
            let seed = solver.seed().wrapping_add(1 + i as u64);
            reports.push(lqgame::deviation_test(gs, &nash, i, deviations, magnitude, seed)?);
        }
    }
    let summary = nash.summary();
    for (i, c) in summary.costs.iter().enumerate() {
        eprintln!("J_{i} = {:.6} ± {:.6}", c.value, c.stderr);
    }
    let deviation_pass = reports.iter().all(|r| r.pass);
    outputs.report(&json!({
        "nash": summary,
        "h2": h2,
        "deviations": reports,
        "deviation_pass": deviation_pass,
        "corrupted_control": corrupt,
        "solver": solver,
    }))?;
    Ok(if !summary.converged {
        EXIT_NOT_CONVERGED
    } else if !deviation_pass {
        EXIT_DEVIATION
    } else {
        EXIT_OK
    })
}

fn closed_form_det(t: f64) -> f64 {
    (1.0 - t) * (1.0 + 3.0 * t)
}

pub fn cmd_counterexample(t: f64, out: Option<&Path>) -> Result<i32> {
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::Config(format!("--T must be positive, got {t}")));
    }
    let outputs = Outputs::new(out)?;
    let gs = example3(t);
    let players = gs.player_count();
    let report: Value = match lqgame::solve_mean_fbode(&gs)? {
        MeanOutcome::Solution(s) => json!({
            "T": t,
            "outcome": "solution",
            "det": s.det,
            "det_closed_form": closed_form_det(t),
            "terminal_mean": s.terminal_mean,
            "terminal_controls": (0..players).map(|i| s.control_at(i, t)).collect::<Vec<_>>(),
            "initial_controls": (0..players).map(|i| s.control_at(i, 0.0)).collect::<Vec<_>>(),
            "boundary": s.boundary,
        }),
        MeanOutcome::Nonexistence(n) => json!({
            "T": t,
            "outcome": "nonexistence",
            "det": n.det,
            "det_closed_form": closed_form_det(t),
            "cond": n.cond,
            "boundary": n.boundary,
        }),
    };
    outputs.report(&report)?;
    Ok(EXIT_OK)
}

/// Nodes `a, a + step, ...` up to `b` inclusive (within a tenth of a step).
pub fn parse_sweep(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("--T-sweep expects a:b:step with 0 <= a <= b and step > 0, got {s:?}"));
    let parts: Vec<f64> = s.split(':').map(|p| p.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
    let [a, b, step] = parts[..] else { return Err(bad()) };
    if !(a.is_finite() && b.is_finite() && step.is_finite() && a >= 0.0 && b >= a && step > 0.0) {
        return Err(bad());
    }
    let count = ((b - a) / step + 0.1).floor() as usize + 1;
    Ok((0..count).map(|j| ((a + j as f64 * step) * 1e12).round() / 1e12).collect())
}

pub fn cmd_sweep(spec: &str, out: Option<&Path>) -> Result<i32> {
    let ts = parse_sweep(spec)?;
    let mut csv = String::from("T,det\n");
    for t in ts {
        let (b, _) = boundary_matrix(&example3(t))?;
        csv.push_str(&format!("{t},{}\n", b.determinant()));
    }
    print!("{csv}");
    std::io::stdout().flush()?;
    if let Some(d) = out {
        fs::create_dir_all(d)?;
        fs::write(d.join("sweep.csv"), csv)?;
    }
    Ok(EXIT_OK)
}
