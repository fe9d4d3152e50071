//! Command-line front door.
//!
//! Subcommands mirror the library layers: `validate` and `spectrum`
//! inspect a model file, `lambda`/`scale`/`zmatrix` evaluate the scale
//! objects, `exit` evaluates the closed-form identities, `simulate`
//! estimates the same functionals by Monte Carlo, and `verify` runs an
//! analytic invariant suite plus MC cross-checks and emits a JSON
//! report.
//!
//! Output conventions:
//! - matrices are CSV with header `row_phase,col_phase,value` (plus a
//!   `stderr` column for simulation output); phases are 0-based and
//!   floats carry 17 significant digits, so identical invocations emit
//!   identical bytes;
//! - grid evaluations prefix an `x` column;
//! - `spectrum`, `simulate` (default) and `verify` emit JSON on stdout;
//!   `verify` additionally prints a human-readable summary on stderr.
//!
//! Exit status: `0` success, `1` usage error, `2` model validation
//! failure, `3` numerical assertion failure. The environment variable
//! `MAPEXIT_THREADS` caps simulation workers (`0` = automatic); the
//! analytic subcommands never touch the simulation engine.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::exit::{self, ExitError, Side};
use crate::mcsim::{self, Query, SimConfig, SimEstimate, SimError};
use crate::model::{MapModel, ModelError};
use crate::scale::{ScaleError, ScaleEvaluator};
use crate::spectral::ZeroRoot;
use crate::tol;

/// Entry point for the binary: parses `std::env::args_os` and writes to
/// the process streams. Returns the exit status.
pub fn run() -> i32 {
    let args: Vec<OsString> = std::env::args_os().collect();
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

/// Testable entry point: runs `argv` against the given output streams
/// and returns the exit status.
pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{rendered}");
                    0
                }
                _ => {
                    let _ = write!(err, "{rendered}");
                    1
                }
            };
        }
    };
    match dispatch(cli.cmd, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.code()
        }
    }
}

// ---------------------------------------------------------------------
// Argument tree
// ---------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "mapexit",
    version,
    about = "Exit, reflection and occupation identities for Markov-modulated Brownian models"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check a model file and report violations.
    Validate { model: PathBuf },
    /// Print the spectral data (root families, overall growth rate) as JSON.
    Spectrum { model: PathBuf },
    /// Print the upward first-passage generator as CSV.
    Lambda { model: PathBuf },
    /// Evaluate the scale matrix W on a grid of levels.
    Scale {
        model: PathBuf,
        /// Comma-separated levels, e.g. `--x 0.5,1,2`.
        #[arg(long, required = true, value_delimiter = ',', num_args = 1..)]
        x: Vec<f64>,
    },
    /// Evaluate the second scale matrix Z(alpha, x) on a grid of levels.
    Zmatrix {
        model: PathBuf,
        #[arg(long)]
        alpha: f64,
        /// Comma-separated levels, e.g. `--x 0,1,2`.
        #[arg(long, required = true, value_delimiter = ',', num_args = 1..)]
        x: Vec<f64>,
    },
    /// Evaluate an exit identity in closed form (CSV matrix).
    Exit {
        model: PathBuf,
        #[command(subcommand)]
        identity: Identity,
    },
    /// Monte Carlo estimate of an identity's left-hand side (JSON).
    Simulate {
        model: PathBuf,
        #[command(subcommand)]
        query: SimQuery,
    },
    /// Run the analytic invariant suite plus MC cross-checks.
    Verify {
        model: PathBuf,
        /// Paths per Monte Carlo cross-check.
        #[arg(long, default_value_t = 10_000)]
        paths: usize,
        /// Grid step for the Monte Carlo cross-checks.
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        /// Master seed for the Monte Carlo cross-checks.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Maximum |z| accepted on any matrix entry.
        #[arg(long, default_value_t = tol::VERIFY_Z_THRESHOLD)]
        threshold: f64,
    },
}

/// Closed-form identity selector; values are emitted as a CSV matrix.
#[derive(Subcommand)]
enum Identity {
    /// Probability of crossing `a` upward before `-b` downward.
    TwoSidedUp {
        #[arg(long)]
        a: f64,
        #[arg(long)]
        b: f64,
    },
    /// Probability of crossing `a` upward before killing.
    FirstUp {
        #[arg(long)]
        a: f64,
    },
    /// Regulator transform of the process reflected at 0, started at
    /// `x`, stopped on crossing `a`.
    ReflectedUp {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        x: f64,
        #[arg(long)]
        a: f64,
    },
    /// Downward-passage transform with an upper absorbing barrier.
    TwoSidedDown {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        x: f64,
        #[arg(long)]
        a: f64,
    },
    /// Downward-passage transform with no upper barrier.
    FirstDown {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        x: f64,
    },
    /// Joint regulator/overshoot transform of the process reflected at
    /// its running maximum, stopped at drawdown `a`.
    ReflectedDown {
        #[arg(long)]
        theta: f64,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        x: f64,
        #[arg(long)]
        a: f64,
    },
    /// Lower-regulator transform of the doubly reflected process on
    /// `[-a, 0]`, stopped when the upper regulator exceeds `r`.
    TwoSidedReflection {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        a: f64,
        #[arg(long, allow_negative_numbers = true)]
        x: f64,
        #[arg(long)]
        r: f64,
    },
    /// Generator of the upper-regulator Markov process (excursion
    /// occupation derivative).
    Excursion {
        #[arg(long)]
        a: f64,
        /// One-sided derivative to take (identical for smooth scale
        /// matrices).
        #[arg(long, value_enum, default_value_t = SideArg::Right)]
        side: SideArg,
    },
    /// Joint transform of both regulators over the first excursion of
    /// the doubly reflected process that reaches `-a`.
    FirstExcursion {
        #[arg(long)]
        theta: f64,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        a: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SideArg {
    Right,
    Left,
}

impl From<SideArg> for Side {
    fn from(s: SideArg) -> Side {
        match s {
            SideArg::Right => Side::Right,
            SideArg::Left => Side::Left,
        }
    }
}

/// Simulation parameters shared by every `simulate` query.
#[derive(Args)]
struct SimOpts {
    /// Number of simulated paths.
    #[arg(long, default_value_t = 10_000)]
    paths: usize,
    /// Grid step for the Brownian segments.
    #[arg(long, default_value_t = tol::DEFAULT_DT)]
    dt: f64,
    /// Master seed (path i draws from stream i of this seed).
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Maximum simulated time per path (default: killing-adapted).
    #[arg(long)]
    horizon: Option<f64>,
    /// Disable the Brownian-bridge crossing/regulator corrections.
    #[arg(long)]
    no_bridge: bool,
    /// Average each path with its Gaussian mirror image.
    #[arg(long)]
    antithetic: bool,
    /// Emit a CSV matrix (with stderr column) instead of JSON.
    #[arg(long)]
    csv: bool,
}

/// Monte Carlo query selector; mirrors the identity flags.
#[derive(Subcommand)]
enum SimQuery {
    /// Probability of crossing `a` upward before `-b` downward.
    TwoSidedUp {
        #[arg(long)]
        a: f64,
        #[arg(long)]
        b: f64,
        #[command(flatten)]
        opts: SimOpts,
    },
    /// Probability of crossing `a` upward before killing.
    FirstUp {
        #[arg(long)]
        a: f64,
        #[command(flatten)]
        opts: SimOpts,
    },
    /// Regulator transform of the process reflected at 0.
    ReflectedUp {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        x: f64,
        #[arg(long)]
        a: f64,
        #[command(flatten)]
        opts: SimOpts,
    },
    /// Joint transform at the first drawdown of size `a`.
    ReflectedDown {
        #[arg(long)]
        theta: f64,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        x: f64,
        #[arg(long)]
        a: f64,
        #[command(flatten)]
        opts: SimOpts,
    },
    /// Lower-regulator transform of the doubly reflected process.
    TwoSidedReflection {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        a: f64,
        #[arg(long, allow_negative_numbers = true)]
        x: f64,
        #[arg(long)]
        r: f64,
        #[command(flatten)]
        opts: SimOpts,
    },
    /// Probability of hitting 0 from `x > 0` before killing (jump-free
    /// models).
    HittingBelow {
        #[arg(long)]
        x: f64,
        #[command(flatten)]
        opts: SimOpts,
    },
    /// Band estimator of the occupation density at 0 up to the first
    /// passage of `x`.
    Occupation {
        #[arg(long)]
        x: f64,
        #[arg(long)]
        eps: f64,
        #[command(flatten)]
        opts: SimOpts,
    },
    /// Joint regulator transform over the first excursion reaching `-a`.
    FirstExcursion {
        #[arg(long)]
        theta: f64,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        a: f64,
        #[command(flatten)]
        opts: SimOpts,
    },
}

impl SimQuery {
    fn into_parts(self) -> (Query, SimOpts) {
        match self {
            SimQuery::TwoSidedUp { a, b, opts } => (Query::TwoSidedUp { a, b }, opts),
            SimQuery::FirstUp { a, opts } => (Query::FirstPassageUp { a }, opts),
            SimQuery::ReflectedUp { alpha, x, a, opts } => {
                (Query::ReflectedUpRegulator { alpha, x, a }, opts)
            }
            SimQuery::ReflectedDown {
                theta,
                alpha,
                x,
                a,
                opts,
            } => (Query::ReflectedDownJoint { theta, alpha, x, a }, opts),
            SimQuery::TwoSidedReflection {
                alpha,
                a,
                x,
                r,
                opts,
            } => (Query::TwoSidedReflection { alpha, a, x, r }, opts),
            SimQuery::HittingBelow { x, opts } => (Query::HittingBelow { x }, opts),
            SimQuery::Occupation { x, eps, opts } => (Query::OccupationAtZero { x, eps }, opts),
            SimQuery::FirstExcursion {
                theta,
                alpha,
                a,
                opts,
            } => (Query::FirstExcursion { theta, alpha, a }, opts),
        }
    }
}

// ---------------------------------------------------------------------
// Errors and exit codes
// ---------------------------------------------------------------------

enum CliError {
    Usage(String),
    Validation(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Validation(m) | CliError::Numerical(m) => m,
        }
    }
}

fn model_err(e: ModelError) -> CliError {
    CliError::Validation(e.to_string())
}

fn scale_err(e: ScaleError) -> CliError {
    CliError::Numerical(e.to_string())
}

fn exit_err(e: ExitError) -> CliError {
    match e {
        ExitError::Domain { .. } => CliError::Usage(e.to_string()),
        ExitError::Model(m) => model_err(m),
        other => CliError::Numerical(other.to_string()),
    }
}

fn sim_err(e: SimError) -> CliError {
    match e {
        SimError::Model(m) => model_err(m),
        other @ (SimError::InvalidConfig { .. } | SimError::InvalidQuery { .. }) => {
            CliError::Usage(other.to_string())
        }
    }
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::Numerical(format!("cannot write output: {e}"))
}

// ---------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------

fn load_model(path: &Path) -> Result<MapModel, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Validation(format!("cannot read model file {}: {e}", path.display()))
    })?;
    let m = MapModel::from_json_str(&text).map_err(model_err)?;
    let violations = m.validate();
    if !violations.is_empty() {
        let list = violations
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join("; ");
        return Err(CliError::Validation(format!(
            "model validation failed: {list}"
        )));
    }
    Ok(m)
}

fn mat(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter()
        .map(|row| row.iter().copied().collect())
        .collect()
}

fn write_matrix(
    out: &mut dyn Write,
    m: &DMatrix<f64>,
    se: Option<&DMatrix<f64>>,
) -> std::io::Result<()> {
    match se {
        Some(_) => writeln!(out, "row_phase,col_phase,value,stderr")?,
        None => writeln!(out, "row_phase,col_phase,value")?,
    }
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            match se {
                Some(s) => writeln!(out, "{i},{j},{:.16e},{:.16e}", m[(i, j)], s[(i, j)])?,
                None => writeln!(out, "{i},{j},{:.16e}", m[(i, j)])?,
            }
        }
    }
    Ok(())
}

fn write_grid(out: &mut dyn Write, xs: &[f64], mats: &[DMatrix<f64>]) -> std::io::Result<()> {
    writeln!(out, "x,row_phase,col_phase,value")?;
    for (x, m) in xs.iter().zip(mats) {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                writeln!(out, "{x:.16e},{i},{j},{:.16e}", m[(i, j)])?;
            }
        }
    }
    Ok(())
}

fn parse_thread_cap(raw: &str) -> Result<usize, String> {
    raw.trim()
        .parse::<usize>()
        .map_err(|_| format!("MAPEXIT_THREADS must be a non-negative integer, got {raw:?}"))
}

/// Runs one estimate with the worker cap from `MAPEXIT_THREADS` applied
/// (0 or unset = automatic). Estimates are worker-count independent, so
/// the cap is purely a resource knob.
fn run_sim(model: &MapModel, query: &Query, cfg: &SimConfig) -> Result<SimEstimate, CliError> {
    let cap = match std::env::var("MAPEXIT_THREADS") {
        Ok(raw) => Some(parse_thread_cap(&raw).map_err(CliError::Usage)?),
        Err(_) => None,
    };
    let go = || mcsim::estimate(model, query, cfg);
    let result = match cap {
        Some(k) if k > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| CliError::Numerical(format!("cannot build worker pool: {e}")))?
            .install(go),
        _ => go(),
    };
    result.map_err(sim_err)
}

// ---------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------

fn dispatch(cmd: Cmd, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Cmd::Validate { model } => cmd_validate(&model, out),
        Cmd::Spectrum { model } => cmd_spectrum(&model, out),
        Cmd::Lambda { model } => {
            let m = load_model(&model)?;
            let ev = ScaleEvaluator::new(&m).map_err(scale_err)?;
            write_matrix(out, ev.lambda(), None).map_err(io_err)
        }
        Cmd::Scale { model, x } => {
            let m = load_model(&model)?;
            let ev = ScaleEvaluator::new(&m).map_err(scale_err)?;
            let mats = x
                .iter()
                .map(|&xi| ev.scale_w(xi))
                .collect::<Result<Vec<_>, _>>()
                .map_err(scale_err)?;
            write_grid(out, &x, &mats).map_err(io_err)
        }
        Cmd::Zmatrix { model, alpha, x } => {
            let m = load_model(&model)?;
            let ev = ScaleEvaluator::new(&m).map_err(scale_err)?;
            let mats = x
                .iter()
                .map(|&xi| ev.z_matrix(alpha, xi))
                .collect::<Result<Vec<_>, _>>()
                .map_err(scale_err)?;
            write_grid(out, &x, &mats).map_err(io_err)
        }
        Cmd::Exit { model, identity } => {
            let m = load_model(&model)?;
            let ev = ScaleEvaluator::new(&m).map_err(scale_err)?;
            let value = eval_identity(&ev, &identity)?;
            write_matrix(out, &value, None).map_err(io_err)
        }
        Cmd::Simulate { model, query } => {
            let m = load_model(&model)?;
            let (q, opts) = query.into_parts();
            let cfg = SimConfig {
                n_paths: opts.paths,
                dt: opts.dt,
                seed: opts.seed,
                horizon: opts.horizon,
                bridge_correction: !opts.no_bridge,
                antithetic: opts.antithetic,
            };
            let est = run_sim(&m, &q, &cfg)?;
            if opts.csv {
                write_matrix(out, &est.mean, Some(&est.stderr)).map_err(io_err)
            } else {
                let payload = SimulateOut {
                    mean: mat(&est.mean),
                    stderr: mat(&est.stderr),
                    n_paths: cfg.n_paths,
                    censored: est.censored,
                    seed: cfg.seed,
                    dt: cfg.dt,
                };
                let text = serde_json::to_string(&payload)
                    .map_err(|e| CliError::Numerical(format!("cannot encode report: {e}")))?;
                writeln!(out, "{text}").map_err(io_err)
            }
        }
        Cmd::Verify {
            model,
            paths,
            dt,
            seed,
            threshold,
        } => cmd_verify(&model, paths, dt, seed, threshold, out, err),
    }
}

fn eval_identity(ev: &ScaleEvaluator, id: &Identity) -> Result<DMatrix<f64>, CliError> {
    let value = match *id {
        Identity::TwoSidedUp { a, b } => exit::two_sided_up(ev, a, b).map_err(exit_err)?.value,
        Identity::FirstUp { a } => exit::first_passage_up(ev, a).map_err(exit_err)?.value,
        Identity::ReflectedUp { alpha, x, a } => {
            exit::reflected_up_regulator(ev, alpha, x, a)
                .map_err(exit_err)?
                .value
        }
        Identity::TwoSidedDown { alpha, x, a } => {
            exit::two_sided_down(ev, alpha, x, a).map_err(exit_err)?.value
        }
        Identity::FirstDown { alpha, x } => {
            exit::first_passage_down(ev, alpha, x).map_err(exit_err)?.value
        }
        Identity::ReflectedDown { theta, alpha, x, a } => {
            exit::reflected_down_joint(ev, theta, alpha, x, a)
                .map_err(exit_err)?
                .value
        }
        Identity::TwoSidedReflection { alpha, a, x, r } => {
            exit::two_sided_reflection_at(ev, alpha, a, x, r)
                .map_err(exit_err)?
                .value
        }
        Identity::Excursion { a, side } => {
            exit::excursion_generator(ev, a, side.into()).map_err(exit_err)?
        }
        Identity::FirstExcursion { theta, alpha, a } => {
            exit::first_excursion_transform(ev, theta, alpha, a).map_err(exit_err)?
        }
    };
    Ok(value)
}

fn cmd_validate(path: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Validation(format!("cannot read model file {}: {e}", path.display()))
    })?;
    let m = MapModel::from_json_str(&text).map_err(model_err)?;
    let violations = m.validate();
    if violations.is_empty() {
        let drift = m
            .asymptotic_drift()
            .map(|d| format!("{d:.6}"))
            .unwrap_or_else(|_| "n/a".into());
        writeln!(
            out,
            "ok: {} phase(s); kill rate {}; conservative: {}; jump-free: {}; asymptotic drift: {}",
            m.n(),
            m.kill_rate,
            m.is_conservative(),
            m.is_jump_free(),
            drift,
        )
        .map_err(io_err)?;
        Ok(())
    } else {
        for v in &violations {
            writeln!(out, "violation: {v}").map_err(io_err)?;
        }
        Err(CliError::Validation(format!(
            "{} violation(s) found",
            violations.len()
        )))
    }
}

#[derive(Serialize)]
struct RootOut {
    re: f64,
    im: f64,
}

#[derive(Serialize)]
struct SpectrumOut {
    phases: usize,
    eta: f64,
    oscillating: bool,
    k_prime0: Option<f64>,
    zero_root: &'static str,
    ascending: Vec<RootOut>,
    descending: Vec<RootOut>,
}

#[derive(Serialize)]
struct SimulateOut {
    mean: Vec<Vec<f64>>,
    stderr: Vec<Vec<f64>>,
    n_paths: usize,
    censored: usize,
    seed: u64,
    dt: f64,
}

fn cmd_spectrum(path: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let m = load_model(path)?;
    let ev = ScaleEvaluator::new(&m).map_err(scale_err)?;
    let sp = ev.spectrum();
    let roots = |rs: Vec<&crate::spectral::Root>| {
        let mut v: Vec<RootOut> = rs
            .iter()
            .map(|r| RootOut {
                re: r.rho.re,
                im: r.rho.im,
            })
            .collect();
        v.sort_by(|a, b| (a.re, a.im).partial_cmp(&(b.re, b.im)).unwrap());
        v
    };
    let payload = SpectrumOut {
        phases: ev.n(),
        eta: ev.eta(),
        oscillating: ev.oscillating(),
        k_prime0: sp.k_prime0,
        zero_root: match sp.zero {
            ZeroRoot::None => "none",
            ZeroRoot::SimpleUp(_) => "ascending",
            ZeroRoot::SimpleDown(_) => "descending",
            ZeroRoot::Double { .. } => "double",
        },
        ascending: roots(sp.ascending()),
        descending: roots(sp.descending()),
    };
    let text = serde_json::to_string(&payload)
        .map_err(|e| CliError::Numerical(format!("cannot encode report: {e}")))?;
    writeln!(out, "{text}").map_err(io_err)
}

// ---------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------

#[derive(Serialize)]
struct ParamOut {
    name: String,
    value: f64,
}

#[derive(Serialize)]
struct VerifyCheck {
    name: String,
    kind: &'static str,
    params: Vec<ParamOut>,
    analytic: Option<Vec<Vec<f64>>>,
    mc: Option<Vec<Vec<f64>>>,
    stderr: Option<Vec<Vec<f64>>>,
    max_abs_z: Option<f64>,
    max_abs_err: Option<f64>,
    tolerance: Option<f64>,
    status: &'static str,
    note: String,
}

#[derive(Serialize)]
struct VerifyReport {
    model: String,
    phases: usize,
    threshold: f64,
    paths: usize,
    dt: f64,
    seed: u64,
    checks: Vec<VerifyCheck>,
    passed: usize,
    failed: usize,
    skipped: usize,
    all_pass: bool,
}

struct Reporter<'w> {
    threshold: f64,
    checks: Vec<VerifyCheck>,
    w: &'w mut dyn Write,
}

fn params_of(ps: &[(&str, f64)]) -> Vec<ParamOut> {
    ps.iter()
        .map(|&(name, value)| ParamOut {
            name: name.into(),
            value,
        })
        .collect()
}

impl Reporter<'_> {
    fn line(&mut self, status: &str, name: &str, detail: &str) {
        let _ = writeln!(self.w, "{status:<5} {name:<46} {detail}");
    }

    /// Records an analytic comparison `got` vs `want` at absolute
    /// tolerance `tol`.
    fn analytic(
        &mut self,
        name: &str,
        ps: &[(&str, f64)],
        got: &DMatrix<f64>,
        want: &DMatrix<f64>,
        tol: f64,
        note: &str,
    ) {
        let e = (got - want).amax();
        let pass = e <= tol;
        self.line(
            if pass { "PASS" } else { "FAIL" },
            name,
            &format!("max err {e:.2e} (tol {tol:.0e})"),
        );
        self.checks.push(VerifyCheck {
            name: name.into(),
            kind: "analytic",
            params: params_of(ps),
            analytic: Some(mat(got)),
            mc: None,
            stderr: None,
            max_abs_z: None,
            max_abs_err: Some(e),
            tolerance: Some(tol),
            status: if pass { "pass" } else { "fail" },
            note: note.into(),
        });
    }

    /// Records a scalar residual check.
    fn scalar(&mut self, name: &str, ps: &[(&str, f64)], e: f64, tol: f64, note: &str) {
        let pass = e <= tol;
        self.line(
            if pass { "PASS" } else { "FAIL" },
            name,
            &format!("residual {e:.2e} (tol {tol:.0e})"),
        );
        self.checks.push(VerifyCheck {
            name: name.into(),
            kind: "analytic",
            params: params_of(ps),
            analytic: None,
            mc: None,
            stderr: None,
            max_abs_z: None,
            max_abs_err: Some(e),
            tolerance: Some(tol),
            status: if pass { "pass" } else { "fail" },
            note: note.into(),
        });
    }

    /// Records a Monte Carlo cross-check: every entry must match the
    /// analytic value within `threshold` standard errors.
    fn mc(
        &mut self,
        name: &str,
        ps: &[(&str, f64)],
        want: &DMatrix<f64>,
        est: &SimEstimate,
        note: &str,
    ) {
        let mut z: f64 = 0.0;
        for i in 0..want.nrows() {
            for j in 0..want.ncols() {
                let se = est.stderr[(i, j)].max(1e-9);
                z = z.max((est.mean[(i, j)] - want[(i, j)]).abs() / se);
            }
        }
        let pass = z <= self.threshold;
        self.line(
            if pass { "PASS" } else { "FAIL" },
            name,
            &format!("max |z| {z:.2} (threshold {})", self.threshold),
        );
        self.checks.push(VerifyCheck {
            name: name.into(),
            kind: "mc",
            params: params_of(ps),
            analytic: Some(mat(want)),
            mc: Some(mat(&est.mean)),
            stderr: Some(mat(&est.stderr)),
            max_abs_z: Some(z),
            max_abs_err: None,
            tolerance: None,
            status: if pass { "pass" } else { "fail" },
            note: note.into(),
        });
    }

    fn fail(&mut self, name: &str, note: &str) {
        self.line("FAIL", name, note);
        self.checks.push(VerifyCheck {
            name: name.into(),
            kind: "analytic",
            params: Vec::new(),
            analytic: None,
            mc: None,
            stderr: None,
            max_abs_z: None,
            max_abs_err: None,
            tolerance: None,
            status: "fail",
            note: note.into(),
        });
    }

    fn skip(&mut self, name: &str, note: &str) {
        self.line("SKIP", name, note);
        self.checks.push(VerifyCheck {
            name: name.into(),
            kind: "analytic",
            params: Vec::new(),
            analytic: None,
            mc: None,
            stderr: None,
            max_abs_z: None,
            max_abs_err: None,
            tolerance: None,
            status: "skipped",
            note: note.into(),
        });
    }
}

fn cmd_verify(
    path: &Path,
    paths: usize,
    dt: f64,
    seed: u64,
    threshold: f64,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<(), CliError> {
    let m = load_model(path)?;
    let ev = ScaleEvaluator::new(&m).map_err(scale_err)?;
    let n = ev.n();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut rep = Reporter {
        threshold,
        checks: Vec::new(),
        w: err,
    };

    // A killed companion evaluator for checks whose preconditions the
    // given model may not meet (transform domain, deep-barrier decay).
    let killed_model;
    let killed_store;
    let (ev_kill, kill_tag): (Option<&ScaleEvaluator>, &str) = if m.kill_rate > 0.0 {
        (Some(&ev), "")
    } else {
        killed_model = m.with_killing(0.5);
        match ScaleEvaluator::new(&killed_model) {
            Ok(e) => {
                killed_store = e;
                (Some(&killed_store), " [killed variant q=0.5]")
            }
            Err(_) => (None, ""),
        }
    };

    // ----- analytic invariants -----

    match ev.z_matrix(1.0, 0.0) {
        Ok(z) => rep.analytic(
            "Z(alpha, 0) = I",
            &[("alpha", 1.0)],
            &z,
            &eye,
            tol::VERIFY_ANALYTIC_TOL,
            "",
        ),
        Err(e) => rep.fail("Z(alpha, 0) = I", &e.to_string()),
    }

    match exit::two_sided_up(&ev, 0.0, 1.0) {
        Ok(r) => rep.analytic(
            "two-sided-up degenerate barrier",
            &[("a", 0.0), ("b", 1.0)],
            &r.value,
            &eye,
            tol::VERIFY_ANALYTIC_TOL,
            "",
        ),
        Err(e) => rep.fail("two-sided-up degenerate barrier", &e.to_string()),
    }

    {
        let splice = exit::two_sided_up(&ev, 0.4, 0.5)
            .and_then(|u1| Ok((u1, exit::two_sided_up(&ev, 0.6, 0.9)?)))
            .and_then(|(u1, u2)| Ok((u1.value * u2.value, exit::two_sided_up(&ev, 1.0, 0.5)?)));
        match splice {
            Ok((got, want)) => rep.analytic(
                "two-sided-up splice consistency",
                &[("a1", 0.4), ("a2", 0.6), ("b", 0.5)],
                &got,
                &want.value,
                tol::VERIFY_ANALYTIC_TOL,
                "strong Markov composition across an intermediate level",
            ),
            Err(e) => rep.fail("two-sided-up splice consistency", &e.to_string()),
        }
    }

    match ev_kill {
        Some(evk) => {
            let rmin = evk
                .spectrum()
                .ascending()
                .iter()
                .filter(|r| r.rho.im.abs() < 1e-9 && r.rho.re > 1e-9)
                .map(|r| r.rho.re)
                .fold(f64::INFINITY, f64::min);
            if rmin.is_finite() {
                for frac in [1.0 / 3.0, 2.0 / 3.0] {
                    let alpha = frac * rmin;
                    let name = format!("transform residual{kill_tag}");
                    match evk.transform_identity_residual(alpha) {
                        Ok(r) => rep.scalar(
                            &name,
                            &[("alpha", alpha)],
                            r,
                            tol::TRANSFORM_RESIDUAL,
                            "resolvent vs transform of the occupation representation",
                        ),
                        Err(e) => rep.fail(&name, &e.to_string()),
                    }
                }
            } else {
                rep.skip("transform residual", "no positive real ascending root");
            }
        }
        None => rep.skip("transform residual", "could not build the killed variant"),
    }

    {
        // The deep-barrier limit needs the descending spectrum bounded
        // away from 0 (error ~ e^{50 max Re rho_desc}).
        let decays = |e: &ScaleEvaluator| {
            let worst = e
                .spectrum()
                .descending()
                .iter()
                .map(|r| r.rho.re)
                .fold(f64::NEG_INFINITY, f64::max);
            !e.oscillating() && (50.0 * worst).exp() <= 1e-8
        };
        let picked = if decays(&ev) {
            Some((&ev, ""))
        } else {
            ev_kill.filter(|e| decays(e)).map(|e| (e, kill_tag))
        };
        match picked {
            Some((e, tag)) => {
                let name = format!("deep-barrier limit{tag}");
                match exit::two_sided_up(e, 1.0, 50.0)
                    .map_err(|x| x.to_string())
                    .and_then(|u| e.exp_lambda(1.0).map(|l| (u, l)).map_err(|x| x.to_string()))
                {
                    Ok((u, l)) => rep.analytic(
                        &name,
                        &[("a", 1.0), ("b", 50.0)],
                        &u.value,
                        &l,
                        1e-6,
                        "lower barrier pushed to -50 reproduces the one-barrier law",
                    ),
                    Err(e) => rep.fail(&name, &e),
                }
            }
            None => rep.skip(
                "deep-barrier limit",
                "descending spectrum too close to 0 for a b=50 comparison",
            ),
        }
    }

    match ev_kill {
        Some(evk) => {
            let name = format!("occupation nonneg/monotone/limit{kill_tag}");
            let body = || -> Result<(f64, f64, f64), String> {
                let grid = [0.5, 1.0, 2.0];
                let ls = grid
                    .iter()
                    .map(|&x| evk.occupation_matrix(Some(x)))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| e.to_string())?;
                let min_of = |m: &DMatrix<f64>| m.iter().copied().fold(f64::INFINITY, f64::min);
                let mut neg: f64 = (-min_of(&ls[0])).max(0.0);
                for k in 1..ls.len() {
                    neg = neg.max((-min_of(&(&ls[k] - &ls[k - 1]))).max(0.0));
                }
                let scale = ls.last().expect("non-empty grid").amax().max(1.0);
                let rho_min = evk
                    .spectrum()
                    .all_simple()
                    .iter()
                    .map(|r| r.rho.re.abs())
                    .filter(|re| *re > 1e-9)
                    .fold(f64::INFINITY, f64::min);
                let limit = evk.occupation_matrix(None).map_err(|e| e.to_string())?;
                let at = evk
                    .occupation_matrix(Some(10.0 / rho_min))
                    .map_err(|e| e.to_string())?;
                Ok((neg, scale, (at - limit).amax()))
            };
            match body() {
                Ok((neg, scale, limit_err)) => {
                    let e = (neg / scale).max(limit_err);
                    rep.scalar(
                        &name,
                        &[],
                        e,
                        1e-6,
                        "grid monotonicity violation (relative) and distance to the closed-form limit",
                    );
                }
                Err(e) => rep.fail(&name, &e),
            }
        }
        None => rep.skip(
            "occupation nonneg/monotone/limit",
            "could not build the killed variant",
        ),
    }

    {
        let name = "excursion generator is the stiff limit";
        match exit::excursion_generator(&ev, 1.0, Side::Right)
            .map_err(|e| e.to_string())
            .and_then(|g| {
                exit::f_star_at(&ev, 1.0, 1e7)
                    .map(|f| (g, f))
                    .map_err(|e| e.to_string())
            }) {
            Ok((g, f)) => rep.analytic(
                name,
                &[("a", 1.0), ("alpha", 1e7)],
                &f,
                &g,
                1e-4,
                "two-sided-reflection exponent at large alpha vs the derivative form",
            ),
            Err(e) => rep.fail(name, &e),
        }
    }

    if m.kill_rate == 0.0 && m.is_conservative() {
        let ones = DMatrix::<f64>::from_element(n, 1, 1.0);
        let zeros = DMatrix::<f64>::zeros(n, 1);
        match exit::f_star_at(&ev, 1.0, 0.0) {
            Ok(f0) => rep.analytic(
                "conservation: F*(0) row sums",
                &[("a", 1.0)],
                &(&f0 * &ones),
                &zeros,
                tol::VERIFY_ANALYTIC_TOL,
                "",
            ),
            Err(e) => rep.fail("conservation: F*(0) row sums", &e.to_string()),
        }
        match exit::reflected_up_regulator(&ev, 0.0, 0.3, 1.0) {
            Ok(r) => rep.analytic(
                "conservation: reflected-up rows at alpha=0",
                &[("x", 0.3), ("a", 1.0)],
                &(&r.value * &ones),
                &ones,
                tol::VERIFY_ANALYTIC_TOL,
                "",
            ),
            Err(e) => rep.fail("conservation: reflected-up rows at alpha=0", &e.to_string()),
        }
        match exit::reflected_down_joint(&ev, 0.0, 0.0, 0.3, 1.0) {
            Ok(r) => rep.analytic(
                "conservation: drawdown rows at theta=alpha=0",
                &[("x", 0.3), ("a", 1.0)],
                &(&r.value * &ones),
                &ones,
                tol::VERIFY_ANALYTIC_TOL,
                "",
            ),
            Err(e) => rep.fail(
                "conservation: drawdown rows at theta=alpha=0",
                &e.to_string(),
            ),
        }
    } else {
        rep.skip(
            "conservation rows",
            "requires an unkilled conservative model",
        );
    }

    // ----- Monte Carlo cross-checks -----

    let base_cfg = |horizon: Option<f64>| SimConfig {
        n_paths: paths,
        dt,
        seed,
        horizon,
        bridge_correction: true,
        antithetic: false,
    };
    // An unkilled path with no reachable stopping barrier would run to
    // the very long default horizon; cap it for the open-ended queries
    // (the missed mass decays exponentially in the horizon).
    let cap = if m.kill_rate == 0.0 { Some(50.0) } else { None };
    let cap_note = if m.kill_rate == 0.0 {
        "horizon capped at 50"
    } else {
        ""
    };

    {
        let name = "MC two-sided-up";
        match exit::two_sided_up(&ev, 1.0, 1.0) {
            Ok(want) => match run_sim(&m, &Query::TwoSidedUp { a: 1.0, b: 1.0 }, &base_cfg(None)) {
                Ok(est) => rep.mc(name, &[("a", 1.0), ("b", 1.0)], &want.value, &est, ""),
                Err(e) => rep.fail(name, e.message()),
            },
            Err(e) => rep.fail(name, &e.to_string()),
        }
    }

    {
        let name = "MC first-passage-up";
        match ev.exp_lambda(1.0) {
            Ok(want) => match run_sim(&m, &Query::FirstPassageUp { a: 1.0 }, &base_cfg(cap)) {
                Ok(est) => rep.mc(name, &[("a", 1.0)], &want, &est, cap_note),
                Err(e) => rep.fail(name, e.message()),
            },
            Err(e) => rep.fail(name, &e.to_string()),
        }
    }

    {
        let name = "MC reflected-up regulator";
        match exit::reflected_up_regulator(&ev, 1.0, 0.0, 1.0) {
            Ok(want) => match run_sim(
                &m,
                &Query::ReflectedUpRegulator {
                    alpha: 1.0,
                    x: 0.0,
                    a: 1.0,
                },
                &base_cfg(None),
            ) {
                Ok(est) => rep.mc(
                    name,
                    &[("alpha", 1.0), ("x", 0.0), ("a", 1.0)],
                    &want.value,
                    &est,
                    "",
                ),
                Err(e) => rep.fail(name, e.message()),
            },
            Err(e) => rep.fail(name, &e.to_string()),
        }
    }

    {
        let name = "MC drawdown joint transform";
        match exit::reflected_down_joint(&ev, 1.0, 1.0, 0.0, 1.0) {
            Ok(want) => match run_sim(
                &m,
                &Query::ReflectedDownJoint {
                    theta: 1.0,
                    alpha: 1.0,
                    x: 0.0,
                    a: 1.0,
                },
                &base_cfg(None),
            ) {
                Ok(est) => rep.mc(
                    name,
                    &[("theta", 1.0), ("alpha", 1.0), ("x", 0.0), ("a", 1.0)],
                    &want.value,
                    &est,
                    "",
                ),
                Err(e) => rep.fail(name, e.message()),
            },
            Err(e) => rep.fail(name, &e.to_string()),
        }
    }

    {
        let name = "MC two-sided reflection";
        match exit::two_sided_reflection_at(&ev, 1.0, 1.0, 0.0, 0.5) {
            Ok(want) => match run_sim(
                &m,
                &Query::TwoSidedReflection {
                    alpha: 1.0,
                    a: 1.0,
                    x: 0.0,
                    r: 0.5,
                },
                &base_cfg(None),
            ) {
                Ok(est) => rep.mc(
                    name,
                    &[("alpha", 1.0), ("a", 1.0), ("x", 0.0), ("r", 0.5)],
                    &want.value,
                    &est,
                    "",
                ),
                Err(e) => rep.fail(name, e.message()),
            },
            Err(e) => rep.fail(name, &e.to_string()),
        }
    }

    {
        let name = "MC first excursion";
        match exit::first_excursion_transform(&ev, 1.0, 1.0, 1.0) {
            Ok(want) => match run_sim(
                &m,
                &Query::FirstExcursion {
                    theta: 1.0,
                    alpha: 1.0,
                    a: 1.0,
                },
                &base_cfg(None),
            ) {
                Ok(est) => rep.mc(
                    name,
                    &[("theta", 1.0), ("alpha", 1.0), ("a", 1.0)],
                    &want,
                    &est,
                    "",
                ),
                Err(e) => rep.fail(name, e.message()),
            },
            Err(ExitError::NotConvergent { .. }) => {
                rep.skip(name, "first-jump extrapolation did not converge")
            }
            Err(e) => rep.fail(name, &e.to_string()),
        }
    }

    if m.is_jump_free() {
        let name = "MC hitting below";
        match ev.hitting_below(1.0) {
            Ok(want) => match run_sim(&m, &Query::HittingBelow { x: 1.0 }, &base_cfg(cap)) {
                Ok(est) => rep.mc(name, &[("x", 1.0)], &want, &est, cap_note),
                Err(e) => rep.fail(name, e.message()),
            },
            Err(e) => rep.fail(name, &e.to_string()),
        }
    } else {
        rep.skip("MC hitting below", "model has jumps");
    }

    let transient = m.kill_rate > 0.0
        || !m.is_conservative()
        || m
            .asymptotic_drift()
            .map(|d| d.abs() > tol::DRIFT_ZERO)
            .unwrap_or(true);
    if m.is_jump_free() && transient {
        let name = "MC occupation band";
        match ev.occupation_matrix(Some(1.0)) {
            Ok(want) => match run_sim(
                &m,
                &Query::OccupationAtZero { x: 1.0, eps: 0.1 },
                &base_cfg(cap),
            ) {
                Ok(est) => rep.mc(
                    name,
                    &[("x", 1.0), ("eps", 0.1)],
                    &want,
                    &est,
                    "band estimator carries O(eps) + O(dt) bias",
                ),
                Err(e) => rep.fail(name, e.message()),
            },
            Err(e) => rep.fail(name, &e.to_string()),
        }
    } else {
        rep.skip(
            "MC occupation band",
            "needs a jump-free model with finite occupation",
        );
    }

    // ----- report -----

    let checks = rep.checks;
    let passed = checks.iter().filter(|c| c.status == "pass").count();
    let failed = checks.iter().filter(|c| c.status == "fail").count();
    let skipped = checks.iter().filter(|c| c.status == "skipped").count();
    let all_pass = failed == 0;
    let report = VerifyReport {
        model: path.display().to_string(),
        phases: n,
        threshold,
        paths,
        dt,
        seed,
        checks,
        passed,
        failed,
        skipped,
        all_pass,
    };
    let _ = writeln!(
        err,
        "verify: {} checks - {passed} passed, {failed} failed, {skipped} skipped",
        report.checks.len(),
    );
    let text = serde_json::to_string(&report)
        .map_err(|e| CliError::Numerical(format!("cannot encode report: {e}")))?;
    writeln!(out, "{text}").map_err(io_err)?;
    if all_pass {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "{failed} verification check(s) failed"
        )))
    }
}
