//! Command-line front end: config resolution, subcommands and exit codes.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use schro_chaos::chaos::{
    first_order_kernels, gamma_coefficients, kernel_identity_residuals, second_order_kernels,
    simulate_second_order_limit,
};
use schro_chaos::config::{load_config, ExperimentConfig};
use schro_chaos::estimator::{estimator, SampleInput};
use schro_chaos::fixtures::fixture_names;
use schro_chaos::harness::{experiment_names, run_experiment, Context};
use schro_chaos::measures::{sample_bridge, sample_product, SampleSource, SeededStream};
use schro_chaos::operators::build_operators;
use schro_chaos::sinkhorn::solve_bridge;
use schro_chaos::verify::verify_all;
use schro_chaos::Error;

const EXIT_FAILED_CHECK: u8 = 1;
const EXIT_BAD_ARGS: u8 = 2;
const EXIT_SCHEMA: u8 = 3;

#[derive(Parser)]
#[command(name = "schro-chaos", version, about = "Exact entropic-transport statistics and their limit laws")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Schrödinger bridge solves.
    Bridge {
        #[command(subcommand)]
        action: BridgeAction,
    },
    /// Dump the Markov operators and their singular system.
    Operators(Common),
    /// Exact `T_N` on one seeded batch.
    Estimate(EstimateArgs),
    /// Chaos kernels and the second-order limit law.
    Chaos {
        #[command(subcommand)]
        action: ChaosAction,
    },
    /// Seeded Monte Carlo experiments.
    Mc(McArgs),
    /// Run the identity and property checks and print a table.
    Verify(VerifyArgs),
}

#[derive(Subcommand)]
enum BridgeAction {
    Solve(Common),
}

#[derive(Subcommand)]
enum ChaosAction {
    /// JSON dump of every kernel, the variances and the limit coefficients.
    Kernels(Common),
    /// CSV of draws from the second-order limit.
    SimulateLimit(SimulateArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config.
    #[arg(long, conflicts_with = "fixture")]
    config: Option<PathBuf>,
    /// Built-in fixture; sym2 when neither this nor --config is given.
    #[arg(long, value_parser = PossibleValuesParser::new(fixture_names()))]
    fixture: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sample sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    n: Vec<usize>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long, value_parser = ["product", "bridge"])]
    source: Option<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Fail with exit code 1 when a check fails (`--strict=false` to report only).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    strict: Option<bool>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "auto", value_parser = ["brute", "permanent", "auto", "both"])]
    method: String,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 100_000)]
    draws: usize,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct McArgs {
    #[arg(value_parser = PossibleValuesParser::new(experiment_names()))]
    experiment: String,
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = ["brute", "permanent", "auto"])]
    method: Option<String>,
    #[arg(long)]
    limit_draws: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Restrict to one fixture; all fixtures by default.
    #[arg(long, value_parser = PossibleValuesParser::new(fixture_names()))]
    fixture: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value = "true")]
    strict: bool,
}

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::SchemaViolation { .. } => EXIT_SCHEMA,
            Error::FileNotFound(_) | Error::Unknown { .. } => EXIT_BAD_ARGS,
            _ => EXIT_FAILED_CHECK,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn bad_args(message: String) -> Failure {
    Failure {
        code: EXIT_BAD_ARGS,
        message,
    }
}

type CliResult = Result<(), Failure>;

/// Parses `args` (program name first), runs the command with stdout going to
/// `out`, and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code() as u8;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> CliResult {
    match command {
        Command::Bridge {
            action: BridgeAction::Solve(common),
        } => bridge_solve(&common, out),
        Command::Operators(common) => operators(&common, out),
        Command::Estimate(args) => estimate(&args, out),
        Command::Chaos {
            action: ChaosAction::Kernels(common),
        } => chaos_kernels(&common, out),
        Command::Chaos {
            action: ChaosAction::SimulateLimit(args),
        } => simulate_limit(&args, out),
        Command::Mc(args) => monte_carlo(&args, out),
        Command::Verify(args) => verify(&args, out),
    }
}

/// Loads the config (schema errors exit 3), then applies flag overrides
/// (invalid overrides exit 2).
fn resolve_config(common: &Common, method: Option<&str>) -> Result<ExperimentConfig, Failure> {
    let mut config = match &common.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::for_fixture(common.fixture.as_deref().unwrap_or("sym2")),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if !common.n.is_empty() {
        config.n_list = common.n.clone();
    }
    if let Some(r) = common.replicates {
        config.replicates = r;
    }
    if let Some(source) = &common.source {
        config.source = Some(parse_source(source));
    }
    if let Some(dir) = &common.output_dir {
        config.output_dir = Some(dir.display().to_string());
    }
    if let Some(strict) = common.strict {
        config.strict = strict;
    }
    if let Some(m) = method {
        config.method = m.to_string();
    }
    config.validate().map_err(|e| bad_args(e.to_string()))?;
    Ok(config)
}

fn parse_source(name: &str) -> SampleSource {
    if name == "bridge" {
        SampleSource::Bridge
    } else {
        SampleSource::Product
    }
}

fn matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn vector(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// A closed pipe ends output quietly.
fn emit(out: &mut dyn Write, text: &str) -> CliResult {
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::from(e).into()),
        _ => Ok(()),
    }
}

fn print_json(out: &mut dyn Write, value: &Value) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    emit(out, &text)
}

fn bridge_solve(common: &Common, out: &mut dyn Write) -> CliResult {
    let config = resolve_config(common, None)?;
    let problem = config.problem()?;
    let (kernel, report) = solve_bridge(&problem.rho0, &problem.rho1, &problem.cost, problem.eps, config.tol, config.max_iter)?;
    print_json(out, &json!({
        "fixture": config.fixture_label(),
        "eps": problem.eps,
        "xi": matrix(&kernel.xi),
        "coupling": matrix(&kernel.mu),
        "a_eps": vector(&kernel.a_eps),
        "b_eps": vector(&kernel.b_eps),
        "marginal_residual": kernel.marginal_residual(),
        "iterations": report.iterations,
        "converged": report.converged,
    }))
}

fn operators(common: &Common, out: &mut dyn Write) -> CliResult {
    let ctx = Context::new(&resolve_config(common, None)?)?;
    let ops = &ctx.ops;
    print_json(out, &json!({
        "fixture": ctx.config.fixture_label(),
        "a": matrix(&ops.a),
        "a_star": matrix(&ops.a_star),
        "s": ops.s,
        "alpha": matrix(&ops.alpha),
        "beta": matrix(&ops.beta),
        "gap": ops.gap,
    }))
}

fn estimate(args: &EstimateArgs, out: &mut dyn Write) -> CliResult {
    let config = resolve_config(&args.common, None)?;
    let problem = config.problem()?;
    let eta = config.eta_matrix(&problem)?;
    let (kernel, _) = solve_bridge(&problem.rho0, &problem.rho1, &problem.cost, problem.eps, config.tol, config.max_iter)?;
    let n = match config.n_list.as_slice() {
        [n] => *n,
        _ => return Err(bad_args("estimate needs a single sample size".into())),
    };
    let mut stream = SeededStream::new(config.seed, 0);
    let batch = match config.source.unwrap_or(SampleSource::Product) {
        SampleSource::Product => sample_product(&problem.rho0, &problem.rho1, n, &mut stream),
        SampleSource::Bridge => sample_bridge(&kernel, n, &mut stream),
    };
    let input = SampleInput::from_batch(&batch, &eta, &problem.cost, &kernel);
    let methods: Vec<&str> = if args.method == "both" {
        vec!["brute", "permanent"]
    } else {
        vec![args.method.as_str()]
    };
    let mut estimates = serde_json::Map::new();
    for name in &methods {
        let est = estimator(name)?.estimate(&input)?;
        estimates.insert(
            name.to_string(),
            json!({
                "t_n": est.t_n,
                "likelihood_ratio": est.l_n,
                "coupling": matrix(&est.coupling),
                "method": est.method,
            }),
        );
    }
    let mut report = json!({
        "fixture": config.fixture_label(),
        "n": n,
        "seed": config.seed,
        "x": batch.x_idx,
        "y": batch.y_idx,
        "estimates": estimates,
    });
    if let (Some(b), Some(p)) = (report["estimates"].get("brute"), report["estimates"].get("permanent")) {
        let gap = (b["t_n"].as_f64().unwrap_or(f64::NAN) - p["t_n"].as_f64().unwrap_or(f64::NAN)).abs();
        report["brute_permanent_gap"] = json!(gap);
    }
    print_json(out, &report)
}

fn chaos_kernels(common: &Common, out: &mut dyn Write) -> CliResult {
    let config = resolve_config(common, None)?;
    let ctx = Context::new(&config)?;
    let (fk, sk) = (&ctx.first, &ctx.second);
    let residuals = kernel_identity_residuals(sk, &ctx.kernel, &ctx.ops);
    print_json(out, &json!({
        "fixture": config.fixture_label(),
        "theta": fk.theta,
        "sigma2": fk.sigma2,
        "kappa10": vector(&fk.kappa10),
        "kappa01": vector(&fk.kappa01),
        "f_chaos": vector(&fk.f_chaos),
        "g_chaos": vector(&fk.g_chaos),
        "eta_tilde": matrix(&sk.eta_tilde),
        "kappa20": matrix(&sk.kappa20),
        "kappa02": matrix(&sk.kappa02),
        "kappa11p": matrix(&sk.kappa11p),
        "theta11p": sk.theta11p,
        "ell11p": {
            "constant": sk.ell11p.constant,
            "x": vector(&sk.ell11p.x_part),
            "y": vector(&sk.ell11p.y_part),
        },
        "gamma": matrix(&sk.gamma),
        "s": ctx.ops.s,
        "identity_residuals": residuals,
    }))
}

fn simulate_limit(args: &SimulateArgs, out: &mut dyn Write) -> CliResult {
    if args.draws == 0 {
        return Err(bad_args("--draws must be positive".into()));
    }
    let config = resolve_config(&args.common, None)?;
    let problem = config.problem()?;
    let eta = config.eta_matrix(&problem)?;
    let (kernel, _) = solve_bridge(&problem.rho0, &problem.rho1, &problem.cost, problem.eps, config.tol, config.max_iter)?;
    let ops = build_operators(&kernel)?;
    let fk = first_order_kernels(&eta, &kernel, &ops)?;
    // Validates the degenerate-first-order hypothesis before drawing.
    let gamma = gamma_coefficients(&eta, &kernel, &ops)?;
    second_order_kernels(&eta, &kernel, &ops, &fk)?;
    let draws = simulate_second_order_limit(&gamma, &ops.s, args.draws, config.seed);
    let sink: Box<dyn Write + '_> = match &args.output {
        Some(path) => Box::new(std::fs::File::create(path).map_err(|e| bad_args(format!("{}: {e}", path.display())))?),
        None => Box::new(out),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["draw", "z"]).map_err(Error::from)?;
    for (i, z) in draws.iter().enumerate() {
        w.write_record([i.to_string(), format!("{z:?}")]).map_err(Error::from)?;
    }
    w.flush().map_err(Error::from)?;
    Ok(())
}

fn ensure_writable(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| bad_args(format!("output directory {}: {e}", dir.display())))?;
    let probe = dir.join(".schro-chaos-write-probe");
    std::fs::write(&probe, b"").map_err(|e| bad_args(format!("output directory {} is not writable: {e}", dir.display())))?;
    let _ = std::fs::remove_file(probe);
    Ok(())
}

fn monte_carlo(args: &McArgs, out: &mut dyn Write) -> CliResult {
    let mut common = args.common.clone();
    if common.n.is_empty() && common.config.is_none() {
        common.n = vec![12];
    }
    let mut config = resolve_config(&common, args.method.as_deref())?;
    if let Some(d) = args.limit_draws {
        config.limit_draws = Some(d);
        config.validate().map_err(|e| bad_args(e.to_string()))?;
    }
    let dir = PathBuf::from(config.output_dir.clone().unwrap_or_else(|| "results".into()));
    ensure_writable(&dir)?;
    let result = run_experiment(&args.experiment, &config)?;
    let written = result.write(&dir)?;
    let mut report = String::new();
    for check in &result.checks {
        let status = match check.passed {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "REPORT",
        };
        let n = check.n.map(|n| format!(" N={n}")).unwrap_or_default();
        let value = check.value.map(|v| format!("{v:.6}")).unwrap_or_else(|| "NaN".into());
        report.push_str(&format!("{status} {}{n}: {value} (threshold {})\n", check.name, check.threshold));
    }
    emit(out, &report)?;
    for path in &written {
        eprintln!("wrote {}", path.display());
    }
    if config.strict && !result.passed() {
        return Err(Failure {
            code: EXIT_FAILED_CHECK,
            message: format!("{} check(s) failed", result.failed_checks().len()),
        });
    }
    Ok(())
}

fn verify(args: &VerifyArgs, out: &mut dyn Write) -> CliResult {
    let names: Vec<&str> = match &args.fixture {
        Some(f) => vec![f.as_str()],
        None => fixture_names(),
    };
    let rows = verify_all(&names)?;
    let mut table = format!("{:<4} {:<8} {:<56} {:>12} {:>10}  status\n", "crit", "fixture", "check", "value", "threshold");
    for r in &rows {
        table.push_str(&format!(
            "{:<4} {:<8} {:<56} {:>12.3e} {:>10.1e}  {}\n",
            r.criterion,
            r.fixture,
            r.name,
            r.value,
            r.threshold,
            if r.passed { "PASS" } else { "FAIL" }
        ));
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    table.push_str(&format!("{} checks, {} failed\n", rows.len(), failed));
    emit(out, &table)?;
    if failed > 0 && args.strict {
        return Err(Failure {
            code: EXIT_FAILED_CHECK,
            message: format!("{failed} check(s) failed"),
        });
    }
    Ok(())
}
