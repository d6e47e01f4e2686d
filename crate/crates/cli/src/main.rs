//! `fluid-exit`: Wiener–Hopf factors, exit operators and Monte Carlo checks
//! for Markov-modulated fluid models.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid model, 3 bad parameter or
//! violated precondition, 4 failed verification.

mod checks;
mod inputs;
mod output;

use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fluid_exit::exit_ops::{pre_exit_law, two_sided, ExitError, ExpDecayFunction, Method};
use fluid_exit::mc_engine::{estimate_with_paths, CrossingKind, McConfig, McError, Query};
use fluid_exit::model::LoadError;
use fluid_exit::wh_factor::{factorize_model, FactorConfig, FactorError, FactorMethod};
use fluid_exit::{load_model, Side, ValidatedModel};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use output::{fmt_f64, print_csv, print_json};

#[derive(Debug, Error)]
pub enum Failure {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Model(String),
    #[error("{0}")]
    Param(String),
    #[error("{0}")]
    Verify(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Model(_) => 2,
            Failure::Param(_) => 3,
            Failure::Verify(_) => 4,
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<LoadError> for Failure {
    fn from(e: LoadError) -> Self {
        match e {
            LoadError::Io(e) => Failure::Io(format!("cannot read model file: {e}")),
            LoadError::Invalid(e) => Failure::Model(format!("invalid model: {e}")),
        }
    }
}

impl From<FactorError> for Failure {
    fn from(e: FactorError) -> Self {
        match e {
            FactorError::NotHomogeneous => Failure::Model(e.to_string()),
            other => Failure::Param(other.to_string()),
        }
    }
}

impl From<McError> for Failure {
    fn from(e: McError) -> Self {
        match e {
            McError::Model(e) => Failure::Model(e.to_string()),
            other => Failure::Param(other.to_string()),
        }
    }
}

impl From<ExitError> for Failure {
    fn from(e: ExitError) -> Self {
        match e {
            ExitError::FactorizationFailed(f) => f.into(),
            ExitError::MonteCarlo(m) => m.into(),
            other => Failure::Param(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "fluid-exit",
    version,
    about = "Two-sided exit problems for Markov-modulated fluid models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Solver {
    Newton,
    FixedPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SeriesArg {
    Neumann,
    Resolvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    /// Every check that applies to the model.
    Full,
    /// Factor residual and the matrix decomposition identity.
    Analytic,
    /// Simulation checks only; these also run on piecewise schedules.
    Mc,
}

#[derive(Args)]
struct ModelArgs {
    /// Model file (JSON).
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args)]
struct FactorArgs {
    /// Convergence tolerance on the Riccati residual.
    #[arg(long, default_value_t = fluid_exit::wh_factor::DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = fluid_exit::wh_factor::DEFAULT_MAX_ITER)]
    max_iter: usize,
    #[arg(long, value_enum, default_value_t = Solver::Newton)]
    solver: Solver,
}

impl FactorArgs {
    fn config(&self) -> FactorConfig {
        FactorConfig {
            tol: self.tol,
            max_iter: self.max_iter,
            method: match self.solver {
                Solver::Newton => FactorMethod::Newton,
                Solver::FixedPoint => FactorMethod::FixedPoint,
            },
        }
    }
}

#[derive(Args)]
struct McArgs {
    /// Number of simulated paths.
    #[arg(short = 'N', long = "paths", default_value_t = 100_000)]
    n: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Absolute simulation cutoff; derived from the decay when omitted.
    #[arg(long)]
    horizon: Option<f64>,
}

impl McArgs {
    fn config(&self) -> McConfig {
        McConfig {
            horizon: self.horizon,
            ..McConfig::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check a model file and summarize it.
    Validate {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Wiener–Hopf factors of a time-homogeneous model.
    Factorize {
        #[command(flatten)]
        model: ModelArgs,
        /// Tilt the generator by this discount rate.
        #[arg(long, default_value_t = 0.0)]
        decay: f64,
        #[command(flatten)]
        factor: FactorArgs,
    },
    /// Two-sided exit values at time `--time`.
    Exit {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        lminus: f64,
        #[arg(long)]
        lplus: f64,
        /// Discount rate; defaults to 0 when the model kills mass.
        #[arg(long)]
        decay: Option<f64>,
        /// Payoff on the plus states: number, array or object (JSON or @file).
        #[arg(long)]
        fplus: String,
        /// Payoff on the minus states.
        #[arg(long)]
        fminus: String,
        #[arg(long, default_value_t = 0.0)]
        time: f64,
        /// Start state label; all states when omitted.
        #[arg(long)]
        state: Option<String>,
        #[arg(long, value_enum, default_value_t = SeriesArg::Resolvent)]
        method: SeriesArg,
        #[command(flatten)]
        factor: FactorArgs,
    },
    /// Monte Carlo estimate of a query.
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
        /// Query as JSON or @file.
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 0.0)]
        time: f64,
        #[arg(long)]
        state: String,
        #[command(flatten)]
        mc: McArgs,
        /// Also write per-path outcomes to this CSV file.
        #[arg(long)]
        csv_out: Option<PathBuf>,
    },
    /// Run the verification battery; exits with 4 if any check fails.
    Verify {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum, default_value_t = Suite::Full)]
        suite: Suite,
        /// Discount rate; 0 with killing, 0.5 otherwise.
        #[arg(long)]
        decay: Option<f64>,
        #[arg(long, default_value_t = 0.5)]
        lminus: f64,
        #[arg(long, default_value_t = 0.5)]
        lplus: f64,
        #[arg(long, default_value_t = 0.0)]
        time: f64,
        /// Start state label; the first state when omitted.
        #[arg(long)]
        state: Option<String>,
        #[arg(short = 'N', long = "paths", default_value_t = 20_000)]
        n: u64,
        /// Inner paths per outer path in the nested checks.
        #[arg(long, default_value_t = 100)]
        n_inner: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = fluid_exit::wh_factor::DEFAULT_TOL)]
        tol: f64,
        /// Perturb the factors before checking (negative control).
        #[arg(long, hide = true)]
        corrupt_factors: bool,
    },
    /// Expectation of `h(X_T)` on exit by `T`, and its complement.
    PreExit {
        #[command(flatten)]
        model: ModelArgs,
        /// The time `T` at which `h` is read.
        #[arg(long)]
        until: f64,
        #[arg(long)]
        lminus: f64,
        #[arg(long)]
        lplus: f64,
        /// Values of `h` on all states (JSON or @file).
        #[arg(long)]
        h: String,
        #[arg(long, default_value_t = 0.0)]
        time: f64,
        #[arg(long)]
        state: String,
        #[command(flatten)]
        mc: McArgs,
    },
}

fn labels(model: &ValidatedModel, states: &[usize]) -> Vec<String> {
    states.iter().map(|&i| model.labels()[i].clone()).collect()
}

fn state_index(model: &ValidatedModel, label: &str) -> Result<usize, Failure> {
    model.state_index(label).map_err(|_| {
        Failure::Param(format!(
            "unknown state {label:?}; states are {}",
            model.labels().join(", ")
        ))
    })
}

fn default_decay(model: &ValidatedModel, decay: Option<f64>) -> Result<f64, Failure> {
    match decay {
        Some(c) => Ok(c),
        None if model.killing_floor() > 0.0 => Ok(0.0),
        None => Err(Failure::Param(
            "--decay is required: the model has no killing, so c = 0 gives no decay".into(),
        )),
    }
}

fn side_values(
    model: &ValidatedModel,
    side: Side,
    arg: &str,
    what: &str,
) -> Result<Vec<f64>, Failure> {
    let names = labels(model, model.side_states(side));
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    inputs::values_for(arg, what, &names)
}

fn all_values(model: &ValidatedModel, arg: &str, what: &str) -> Result<Vec<f64>, Failure> {
    let names: Vec<&str> = model.labels().iter().map(String::as_str).collect();
    inputs::values_for(arg, what, &names)
}

fn cmd_validate(args: &ModelArgs) -> Result<(), Failure> {
    let m = load_model(&args.model)?;
    let summary = json!({
        "states": m.labels(),
        "m": m.len(),
        "plusStates": labels(&m, m.plus_states()),
        "minusStates": labels(&m, m.minus_states()),
        "uniformBound": m.uniform_bound(),
        "killingFloor": m.killing_floor(),
        "maxSpeed": m.max_speed(),
        "homogeneous": m.is_homogeneous(),
        "segments": m.segments().len(),
    });
    match args.format {
        Format::Json => print_json(&summary)?,
        Format::Csv => print_csv(
            &["key", "value"],
            [
                vec!["m".into(), m.len().to_string()],
                vec!["plusStates".into(), labels(&m, m.plus_states()).join(" ")],
                vec!["minusStates".into(), labels(&m, m.minus_states()).join(" ")],
                vec!["uniformBound".into(), fmt_f64(m.uniform_bound())],
                vec!["killingFloor".into(), fmt_f64(m.killing_floor())],
                vec!["maxSpeed".into(), fmt_f64(m.max_speed())],
                vec!["homogeneous".into(), m.is_homogeneous().to_string()],
                vec!["segments".into(), m.segments().len().to_string()],
            ],
        )?,
    }
    Ok(())
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct FactorReport {
    plus_states: Vec<String>,
    minus_states: Vec<String>,
    #[serde(flatten)]
    factors: fluid_exit::WienerHopfFactors,
}

fn cmd_factorize(args: &ModelArgs, decay: f64, factor: &FactorArgs) -> Result<(), Failure> {
    let m = load_model(&args.model)?;
    let f = factorize_model(&m, decay, &factor.config())?;
    let (plus, minus) = (labels(&m, m.plus_states()), labels(&m, m.minus_states()));
    match args.format {
        Format::Json => print_json(&FactorReport {
            plus_states: plus,
            minus_states: minus,
            factors: f,
        })?,
        Format::Csv => {
            let mut rows = Vec::new();
            let blocks = [
                ("qPlus", &f.q_plus, &plus, &plus),
                ("qMinus", &f.q_minus, &minus, &minus),
                ("jPlus", &f.j_plus, &minus, &plus),
                ("jMinus", &f.j_minus, &plus, &minus),
            ];
            for (name, mat, rl, cl) in blocks {
                for r in 0..mat.rows() {
                    for c in 0..mat.cols() {
                        rows.push(vec![
                            name.to_string(),
                            rl[r].clone(),
                            cl[c].clone(),
                            fmt_f64(mat[(r, c)]),
                        ]);
                    }
                }
            }
            print_csv(&["matrix", "row", "col", "value"], rows)?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_exit(
    args: &ModelArgs,
    lminus: f64,
    lplus: f64,
    decay: Option<f64>,
    fplus: &str,
    fminus: &str,
    time: f64,
    state: Option<&str>,
    method: SeriesArg,
    factor: &FactorArgs,
) -> Result<(), Failure> {
    let m = load_model(&args.model)?;
    let c = default_decay(&m, decay)?;
    let gp = ExpDecayFunction::new(
        c,
        Side::Plus,
        side_values(&m, Side::Plus, fplus, "--fplus")?,
    );
    let gm = ExpDecayFunction::new(
        c,
        Side::Minus,
        side_values(&m, Side::Minus, fminus, "--fminus")?,
    );
    let method = match method {
        SeriesArg::Neumann => Method::Neumann,
        SeriesArg::Resolvent => Method::Resolvent,
    };
    let start = state.map(|s| state_index(&m, s)).transpose()?;
    let r = two_sided(&m, &gp, &gm, lminus, lplus, time, method, &factor.config())?;
    let picked: Vec<usize> = match start {
        Some(i) => vec![i],
        None => (0..m.len()).collect(),
    };
    match args.format {
        Format::Json => {
            let report = match start {
                Some(i) => json!({
                    "state": m.labels()[i],
                    "time": time,
                    "decay": c,
                    "xiPlus": r.xi_plus[i],
                    "xiMinus": r.xi_minus[i],
                    "joint": r.joint[i],
                    "method": r.method,
                    "truncationBound": r.truncation_bound,
                }),
                None => json!({
                    "states": m.labels(),
                    "time": time,
                    "decay": c,
                    "xiPlus": r.xi_plus,
                    "xiMinus": r.xi_minus,
                    "joint": r.joint,
                    "method": r.method,
                    "truncationBound": r.truncation_bound,
                }),
            };
            print_json(&report)?;
        }
        Format::Csv => print_csv(
            &["state", "xiPlus", "xiMinus", "joint", "truncationBound"],
            picked.iter().map(|&i| {
                vec![
                    m.labels()[i].clone(),
                    fmt_f64(r.xi_plus[i]),
                    fmt_f64(r.xi_minus[i]),
                    fmt_f64(r.joint[i]),
                    fmt_f64(r.truncation_bound),
                ]
            }),
        )?,
    }
    Ok(())
}

fn kind_name(k: CrossingKind) -> &'static str {
    match k {
        CrossingKind::UpExit => "UpExit",
        CrossingKind::DownExit => "DownExit",
        CrossingKind::Neither => "Neither",
    }
}

fn cmd_simulate(
    args: &ModelArgs,
    query: &str,
    time: f64,
    state: &str,
    mc: &McArgs,
    csv_out: Option<&PathBuf>,
) -> Result<(), Failure> {
    let m = load_model(&args.model)?;
    let text = inputs::inline_or_file(query)?;
    let q: Query =
        serde_json::from_str(&text).map_err(|e| Failure::Param(format!("--query: {e}")))?;
    let i = state_index(&m, state)?;
    let (est, paths) = estimate_with_paths(&m, &q, time, i, mc.n, mc.seed, &mc.config())?;
    let rows = || {
        paths.iter().map(|p| {
            vec![
                p.path_index.to_string(),
                kind_name(p.outcome.kind).to_string(),
                p.outcome.time.map(fmt_f64).unwrap_or_default(),
                p.outcome
                    .state
                    .map(|j| m.labels()[j].clone())
                    .unwrap_or_default(),
                fmt_f64(p.payoff),
            ]
        })
    };
    const HEADER: [&str; 5] = [
        "pathIndex",
        "outcomeKind",
        "exitTime",
        "exitState",
        "payoff",
    ];
    if let Some(path) = csv_out {
        let file = File::create(path)
            .map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))?;
        output::write_csv(file, &HEADER, rows())?;
    }
    for w in &est.warnings {
        eprintln!("warning: {w}");
    }
    match args.format {
        Format::Json => print_json(&json!({
            "state": state,
            "time": time,
            "estimate": est,
        }))?,
        Format::Csv => print_csv(&HEADER, rows())?,
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_pre_exit(
    args: &ModelArgs,
    until: f64,
    lminus: f64,
    lplus: f64,
    h: &str,
    time: f64,
    state: &str,
    mc: &McArgs,
) -> Result<(), Failure> {
    let m = load_model(&args.model)?;
    let h = all_values(&m, h, "--h")?;
    let i = state_index(&m, state)?;
    let r = pre_exit_law(
        &m,
        &h,
        until,
        lminus,
        lplus,
        time,
        i,
        mc.n,
        mc.seed,
        &mc.config(),
    )?;
    match args.format {
        Format::Json => print_json(&json!({
            "state": state,
            "time": time,
            "until": until,
            "estimate": r.estimate,
            "evolution": r.evolution,
            "complement": r.complement,
        }))?,
        Format::Csv => print_csv(
            &["mean", "stderr", "n", "evolution", "complement"],
            [vec![
                fmt_f64(r.estimate.mean),
                fmt_f64(r.estimate.stderr),
                r.estimate.n.to_string(),
                fmt_f64(r.evolution),
                fmt_f64(r.complement),
            ]],
        )?,
    }
    Ok(())
}

fn set_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("FLUID_EXIT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
        Failure::Param(format!(
            "FLUID_EXIT_THREADS must be a positive integer, got {raw:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Param(format!("cannot size the worker pool: {e}")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    set_threads()?;
    match &cli.command {
        Command::Validate { model } => cmd_validate(model),
        Command::Factorize {
            model,
            decay,
            factor,
        } => cmd_factorize(model, *decay, factor),
        Command::Exit {
            model,
            lminus,
            lplus,
            decay,
            fplus,
            fminus,
            time,
            state,
            method,
            factor,
        } => cmd_exit(
            model,
            *lminus,
            *lplus,
            *decay,
            fplus,
            fminus,
            *time,
            state.as_deref(),
            *method,
            factor,
        ),
        Command::Simulate {
            model,
            query,
            time,
            state,
            mc,
            csv_out,
        } => cmd_simulate(model, query, *time, state, mc, csv_out.as_ref()),
        Command::Verify {
            model,
            suite,
            decay,
            lminus,
            lplus,
            time,
            state,
            n,
            n_inner,
            seed,
            tol,
            corrupt_factors,
        } => {
            let m = load_model(&model.model)?;
            let c = match decay {
                Some(c) => *c,
                None if m.killing_floor() > 0.0 => 0.0,
                None => 0.5,
            };
            let i = match state {
                Some(s) => state_index(&m, s)?,
                None => 0,
            };
            let plan = checks::Plan {
                suite: *suite,
                c,
                lminus: *lminus,
                lplus: *lplus,
                s: *time,
                i,
                n: *n,
                n_inner: *n_inner,
                seed: *seed,
                tol: *tol,
                corrupt: *corrupt_factors,
            };
            let report = checks::run(&m, &plan)?;
            match model.format {
                Format::Json => print_json(&report)?,
                Format::Csv => print_csv(
                    &["check", "value", "threshold", "status", "detail"],
                    report.checks.iter().map(|c| {
                        vec![
                            c.name.to_string(),
                            c.value.map(fmt_f64).unwrap_or_default(),
                            c.threshold.map(fmt_f64).unwrap_or_default(),
                            c.status.to_string(),
                            c.detail.clone(),
                        ]
                    }),
                )?,
            }
            if report.passed {
                Ok(())
            } else {
                Err(Failure::Verify("verification failed".into()))
            }
        }
        Command::PreExit {
            model,
            until,
            lminus,
            lplus,
            h,
            time,
            state,
            mc,
        } => cmd_pre_exit(model, *until, *lminus, *lplus, h, *time, state, mc),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(3)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
