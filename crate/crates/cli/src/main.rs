//! Command-line front end: model registry dispatch, analytic and empirical
//! measure runs, figure-data generation, and the validation suite.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage/config error,
//! 3 numerical failure. All randomness flows from --seed, so any invocation
//! repeated with the same arguments produces identical bytes.

mod config;

use std::fmt::Write as FmtWrite;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use inforesp::analytic::{
    self, default_grid, local_gamma_grid, local_te_grid, stationary_density_grid, GridSpec,
    LocalGrid,
};
use inforesp::empirical::{
    ensemble_information_response_empirical, information_response_empirical, write_ladder_csv,
    EmpiricalConfig, EpsilonProtocol, GammaEstimate,
};
use inforesp::experiments::{
    run_brownian, run_fig1, run_fig2, run_fig_a1, run_nonlinear, run_validation_suite,
    CheckResult, ExperimentSpec, OutputWriter, ValidationReport,
};
use inforesp::gauss::LinearModel;
use inforesp::sde::{BrownianParams, SdeModel};
use inforesp::Error as CoreError;

use config::{or_file, FileConfig};

const DEFAULT_SEED: u64 = 17;

#[derive(Parser)]
#[command(
    name = "inforesp",
    version,
    about = "Numerical laboratory for information-theoretic response measures in stochastic systems"
)]
struct Cli {
    /// Emit machine-readable JSON on stdout instead of tables
    #[arg(long, global = true)]
    json: bool,

    /// Base seed for all random streams
    #[arg(long, global = true, env = "INFORESP_SEED")]
    seed: Option<u64>,

    /// Output directory for generated files
    #[arg(long, global = true, env = "INFORESP_OUTDIR")]
    outdir: Option<PathBuf>,

    /// Cap the worker thread count (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Flat key-value config file; command-line flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form measures of a linear model over a lag grid
    Analytic {
        #[command(flatten)]
        model: ModelArgs,
        /// Lag spec: single value, comma list, or start:end:step
        #[arg(long, allow_hyphen_values = true)]
        tau: Option<String>,
    },
    /// Empirical response measures via perturbed simulation
    Measure {
        #[command(flatten)]
        model: ModelArgs,
        /// Response lag
        #[arg(long)]
        tau: Option<f64>,
        /// Which measure to estimate
        #[arg(long, value_enum)]
        kind: Option<MeasureKindArg>,
        #[command(flatten)]
        empirical: EmpiricalArgs,
    },
    /// Local measure fields on an (x0, y0) grid as CSV
    Grid {
        #[command(flatten)]
        model: ModelArgs,
        /// Response lag (ignored for the density field)
        #[arg(long)]
        tau: Option<f64>,
        /// Which field to evaluate
        #[arg(long, value_enum)]
        quantity: Option<QuantityArg>,
        /// Multiply by the stationary density
        #[arg(long)]
        weighted: bool,
        /// Grid points along x0
        #[arg(long)]
        nx: Option<usize>,
        /// Grid points along y0
        #[arg(long)]
        ny: Option<usize>,
        /// Half-width of the grid in stationary standard deviations
        #[arg(long)]
        span: Option<f64>,
    },
    /// Generate the data behind one canned figure and check its shape
    Figure {
        /// Which figure to generate
        #[arg(value_enum)]
        which: FigureArg,
        /// Use reduced sample sizes (quick look, wider error bars)
        #[arg(long)]
        reduced: bool,
    },
    /// Work statistics of a kicked Brownian particle vs the information cost
    Brownian {
        /// Particle mass
        #[arg(long)]
        m: Option<f64>,
        /// Friction coefficient
        #[arg(long)]
        lambda: Option<f64>,
        /// Bath temperature
        #[arg(long)]
        temp: Option<f64>,
        /// Total impulse of the force pulse
        #[arg(long)]
        f: Option<f64>,
        /// Pulse duration
        #[arg(long)]
        pulse_duration: Option<f64>,
        /// Trajectories
        #[arg(long)]
        n: Option<usize>,
        /// Integration step
        #[arg(long)]
        dt: Option<f64>,
    },
    /// Run the validation suite (all numbered checks, fixed seeds)
    Validate {
        /// Only run sections whose name starts with this prefix
        #[arg(long)]
        check: Option<String>,
    },
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Builtin model: ou1, ou2, or quad
    #[arg(long)]
    model: Option<String>,
    /// Inline drift matrix, rows ';'-separated: 'a11,a12;a21,a22'
    /// (dynamics dxi/dt = -A xi + noise)
    #[arg(long)]
    a: Option<String>,
    /// Inline noise covariance, same layout as --a
    #[arg(long)]
    q: Option<String>,
    /// Source coordinate of the inline model
    #[arg(long)]
    x_index: Option<usize>,
    /// Target coordinate of the inline model
    #[arg(long)]
    y_index: Option<usize>,
}

#[derive(Args, Clone)]
struct EmpiricalArgs {
    /// Perturbation sizes, comma-separated ascending (default: model-scaled ladder)
    #[arg(long)]
    epsilon: Option<String>,
    /// Stratified conditions for the conditional average
    #[arg(long)]
    n_conditions: Option<usize>,
    /// Trajectories per conditional ensemble
    #[arg(long)]
    n_conditional: Option<usize>,
    /// Pooled stationary samples
    #[arg(long)]
    n_stationary: Option<usize>,
    /// Chains in the stationary pool
    #[arg(long)]
    chains: Option<usize>,
    /// Neighbor count for divergence estimation
    #[arg(long)]
    k: Option<usize>,
    /// Integration step
    #[arg(long)]
    dt: Option<f64>,
    /// Use reduced sample sizes (quick look, wider error bars)
    #[arg(long)]
    reduced: bool,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum MeasureKindArg {
    /// Conditional-route information response
    Gamma,
    /// Ensemble-route information response
    GammaEnsemble,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum QuantityArg {
    /// Local transfer entropy
    LocalTe,
    /// Local information response
    LocalGamma,
    /// Stationary density
    Density,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum FigureArg {
    /// Twin natural/perturbed trajectory pair
    Fig1,
    /// Weighted local-measure grids of the linear pair
    Fig2,
    /// Response measures against lag
    #[value(name = "fig_a1", alias = "fig-a1")]
    FigA1,
    /// Quadratic-coupling comparison against the linear identity
    Nonlinear,
}

/// Failure classes mapped onto exit codes.
enum CliError {
    Usage(String),
    Check(String),
    Core(CoreError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                CoreError::InvalidConfig(_)
                | CoreError::DimensionMismatch { .. }
                | CoreError::NonSquare { .. }
                | CoreError::Io(_) => 2,
                _ => 3,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) | CliError::Check(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

fn usage<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Usage(msg.into()))
}

/// Write to stdout, treating a closed pipe (e.g. `| head`) as a clean stop
/// rather than a panic.
fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    if out.write_all(text.as_bytes()).is_err() || out.flush().is_err() {
        std::process::exit(0);
    }
}

// ---------------------------------------------------------------------------
// Resolution: command line over config file over defaults.

const GLOBAL_KEYS: [&str; 4] = ["seed", "outdir", "threads", "json"];
const MODEL_KEYS: [&str; 5] = ["model", "a", "q", "x_index", "y_index"];
const EMPIRICAL_KEYS: [&str; 8] = [
    "epsilon",
    "n_conditions",
    "n_conditional",
    "n_stationary",
    "chains",
    "k",
    "dt",
    "reduced",
];

fn allowed_keys(command: &Command) -> Vec<&'static str> {
    let mut keys: Vec<&'static str> = GLOBAL_KEYS.to_vec();
    match command {
        Command::Analytic { .. } => {
            keys.extend(MODEL_KEYS);
            keys.push("tau");
        }
        Command::Measure { .. } => {
            keys.extend(MODEL_KEYS);
            keys.extend(EMPIRICAL_KEYS);
            keys.extend(["tau", "kind"]);
        }
        Command::Grid { .. } => {
            keys.extend(MODEL_KEYS);
            keys.extend(["tau", "quantity", "weighted", "nx", "ny", "span"]);
        }
        Command::Figure { .. } => keys.push("reduced"),
        Command::Brownian { .. } => {
            keys.extend(["m", "lambda", "temp", "f", "pulse_duration", "n", "dt"]);
        }
        Command::Validate { .. } => keys.push("check"),
    }
    keys
}

fn parse_matrix(text: &str) -> Result<nalgebra::DMatrix<f64>, CliError> {
    let rows: Vec<Vec<f64>> = text
        .split(';')
        .map(|row| {
            row.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| CliError::Usage(format!("bad matrix entry '{}'", v.trim())))
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return usage("matrix spec must be square: rows ';'-separated, entries ','-separated");
    }
    Ok(nalgebra::DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn resolve_model(args: &ModelArgs, file: &FileConfig) -> Result<SdeModel, CliError> {
    let name = or_file(args.model.clone(), file.get("model").map(String::from));
    let a_spec = or_file(args.a.clone(), file.get("a").map(String::from));
    let q_spec = or_file(args.q.clone(), file.get("q").map(String::from));
    match (name, a_spec, q_spec) {
        (Some(n), None, None) => SdeModel::by_name(&n).ok_or_else(|| {
            CliError::Usage(format!("unknown model '{n}' (builtin: ou1, ou2, quad)"))
        }),
        (None, Some(a), Some(q)) => {
            let x = or_file(args.x_index, file.get_parsed("x_index").map_err(CliError::Usage)?)
                .unwrap_or(0);
            let y = or_file(args.y_index, file.get_parsed("y_index").map_err(CliError::Usage)?)
                .unwrap_or(1);
            let lm = LinearModel::new(parse_matrix(&a)?, parse_matrix(&q)?, x, y)?;
            Ok(SdeModel::linear_ou("custom", &lm)?)
        }
        (None, None, None) => usage("select a model: --model NAME or --a ROWS --q ROWS"),
        (Some(_), _, _) => usage("--model conflicts with an inline --a/--q spec"),
        _ => usage("an inline model needs both --a and --q"),
    }
}

fn resolve_linear(model: &SdeModel) -> Result<LinearModel, CliError> {
    model.as_linear().ok_or_else(|| {
        CliError::Usage(format!(
            "the analytic path requires a linear model; '{}' is nonlinear",
            model.name
        ))
    })
}

fn resolve_empirical(
    seed: u64,
    args: &EmpiricalArgs,
    file: &FileConfig,
) -> Result<(EmpiricalConfig, Option<EpsilonProtocol>), CliError> {
    let reduced = args.reduced
        || file
            .get_parsed::<bool>("reduced")
            .map_err(CliError::Usage)?
            .unwrap_or(false);
    let mut cfg = if reduced {
        EmpiricalConfig::reduced(seed)
    } else {
        EmpiricalConfig::new(seed)
    };
    let file_usize = |key: &str| file.get_parsed::<usize>(key).map_err(CliError::Usage);
    if let Some(v) = or_file(args.n_conditions, file_usize("n_conditions")?) {
        cfg.n_conditions = v;
    }
    if let Some(v) = or_file(args.n_conditional, file_usize("n_conditional")?) {
        cfg.n_conditional = v;
    }
    if let Some(v) = or_file(args.n_stationary, file_usize("n_stationary")?) {
        cfg.n_stationary = v;
    }
    if let Some(v) = or_file(args.chains, file_usize("chains")?) {
        cfg.chains = v;
    }
    if let Some(v) = or_file(args.k, file_usize("k")?) {
        cfg.k = v;
    }
    if let Some(v) = or_file(args.dt, file.get_parsed("dt").map_err(CliError::Usage)?) {
        cfg.dt = v;
    }

    let eps_spec = or_file(args.epsilon.clone(), file.get("epsilon").map(String::from));
    let protocol = match eps_spec {
        None => None,
        Some(spec) => {
            let values: Vec<f64> = spec
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| CliError::Usage(format!("bad epsilon '{}'", v.trim())))
                })
                .collect::<Result<_, _>>()?;
            Some(EpsilonProtocol::new(values)?)
        }
    };
    Ok((cfg, protocol))
}

/// Lag grids: a single value, a comma list, or start:end:step (inclusive).
fn parse_tau_spec(spec: &str) -> Result<Vec<f64>, CliError> {
    let parse_one = |v: &str| {
        v.trim()
            .parse::<f64>()
            .map_err(|_| CliError::Usage(format!("bad lag value '{}'", v.trim())))
    };
    if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return usage("lag range syntax is start:end:step");
        }
        let (start, end, step) = (parse_one(parts[0])?, parse_one(parts[1])?, parse_one(parts[2])?);
        if !(step > 0.0) || end < start {
            return usage("lag range needs step > 0 and end >= start");
        }
        let n = ((end - start) / step).round() as usize;
        let mut out = Vec::with_capacity(n + 1);
        let mut i = 0usize;
        loop {
            let tau = start + step * i as f64;
            if tau > end + 1e-9 * step {
                break;
            }
            out.push(tau);
            i += 1;
        }
        Ok(out)
    } else if spec.contains(',') {
        spec.split(',').map(parse_one).collect()
    } else {
        Ok(vec![parse_one(spec)?])
    }
}

// ---------------------------------------------------------------------------
// Subcommand bodies.

struct Ctx {
    json: bool,
    seed: u64,
    outdir: Option<PathBuf>,
}

impl Ctx {
    fn writer(&self) -> OutputWriter {
        OutputWriter::new(self.outdir.as_deref())
    }

    /// Experiments always materialize their outputs somewhere.
    fn writer_defaulted(&self) -> OutputWriter {
        match &self.outdir {
            Some(d) => OutputWriter::new(Some(d)),
            None => OutputWriter::new(Some(std::path::Path::new("out"))),
        }
    }
}

#[derive(serde::Serialize)]
struct AnalyticRow {
    tau: f64,
    gamma: f64,
    transfer_entropy: f64,
    gamma_ensemble: f64,
    mutual_info_yy: f64,
    mutual_info_xy_y: f64,
}

fn cmd_analytic(ctx: &Ctx, model: &SdeModel, tau_spec: &str) -> Result<(), CliError> {
    let lin = resolve_linear(model)?;
    let taus = parse_tau_spec(tau_spec)?;
    if taus.is_empty() {
        return usage("empty lag grid");
    }
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in &taus {
        rows.push(AnalyticRow {
            tau,
            gamma: analytic::information_response(&lin, tau)?.value,
            transfer_entropy: analytic::transfer_entropy(&lin, tau)?.value,
            gamma_ensemble: analytic::ensemble_information_response(&lin, tau)?.value,
            mutual_info_yy: analytic::mutual_info_yy(&lin, tau)?.value,
            mutual_info_xy_y: analytic::mutual_info_xy_y(&lin, tau)?.value,
        });
    }

    let output = if ctx.json {
        let mut s = serde_json::to_string_pretty(&rows).expect("serializable rows");
        s.push('\n');
        s
    } else {
        let mut csv = String::new();
        writeln!(csv, "# model = {}", model.name).unwrap();
        writeln!(csv, "# tau = {tau_spec}").unwrap();
        writeln!(
            csv,
            "tau,gamma,transfer_entropy,gamma_ensemble,mutual_info_yy,mutual_info_xy_y"
        )
        .unwrap();
        for r in &rows {
            writeln!(
                csv,
                "{},{},{},{},{},{}",
                r.tau,
                r.gamma,
                r.transfer_entropy,
                r.gamma_ensemble,
                r.mutual_info_yy,
                r.mutual_info_xy_y
            )
            .unwrap();
        }
        csv
    };
    emit(&output);
    ctx.writer().write(
        "analytic",
        if ctx.json { "measures.json" } else { "measures.csv" },
        &output,
    )?;
    Ok(())
}

fn gamma_table(est: &GammaEstimate) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "{}  value {:.6}  stderr {:.6}  (lag {})",
        est.measure.kind.as_str(),
        est.measure.value,
        est.measure.stderr.unwrap_or(f64::NAN),
        est.measure.tau
    )
    .unwrap();
    writeln!(
        s,
        "numerator curvature   {:.6e} (stderr {:.2e})",
        est.numerator.value, est.numerator.stderr
    )
    .unwrap();
    writeln!(
        s,
        "denominator curvature {:.6e} (stderr {:.2e})",
        est.denominator.value, est.denominator.stderr
    )
    .unwrap();
    writeln!(s, "epsilon    d_mean      d_stderr    c           c_stderr").unwrap();
    for p in &est.ladder {
        writeln!(
            s,
            "{:<10.5} {:<11.6} {:<11.6} {:<11.6} {:<11.6}",
            p.epsilon, p.d_mean, p.d_stderr, p.c, p.c_stderr
        )
        .unwrap();
    }
    for (k, v) in &est.measure.meta {
        writeln!(s, "# {k} = {v}").unwrap();
    }
    s
}

fn cmd_measure(
    ctx: &Ctx,
    model: &SdeModel,
    tau: f64,
    kind: MeasureKindArg,
    cfg: &EmpiricalConfig,
    protocol: Option<&EpsilonProtocol>,
) -> Result<(), CliError> {
    let est = match kind {
        MeasureKindArg::Gamma => information_response_empirical(model, tau, protocol, cfg)?,
        MeasureKindArg::GammaEnsemble => {
            ensemble_information_response_empirical(model, tau, protocol, cfg)?
        }
    };
    if ctx.json {
        let mut s = serde_json::to_string_pretty(&est).expect("serializable estimate");
        s.push('\n');
        emit(&s);
        ctx.writer().write("measure", "measure.json", &s)?;
    } else {
        emit(&gamma_table(&est));
        let mut ladder = Vec::new();
        write_ladder_csv(
            &mut ladder,
            &est.ladder,
            &[
                ("model".into(), model.name.clone()),
                ("tau".into(), tau.to_string()),
                ("seed".into(), cfg.seed.to_string()),
            ],
        )?;
        ctx.writer().write(
            "measure",
            "ladder.csv",
            &String::from_utf8(ladder).expect("csv utf-8"),
        )?;
    }
    Ok(())
}

fn cmd_grid(
    ctx: &Ctx,
    model: &SdeModel,
    tau: Option<f64>,
    quantity: QuantityArg,
    weighted: bool,
    nx: Option<usize>,
    ny: Option<usize>,
    span: Option<f64>,
) -> Result<(), CliError> {
    let lin = resolve_linear(model)?;
    let grid = match (nx, ny, span) {
        (None, None, None) => default_grid(&lin)?,
        _ => {
            let nx = nx.unwrap_or(201);
            let ny = ny.unwrap_or(201);
            let span = span.unwrap_or(4.0);
            if !(span > 0.0) {
                return usage("--span must be positive");
            }
            let cov = lin.stationary_cov()?;
            let sx = cov[(lin.x_index(), lin.x_index())].sqrt();
            let sy = cov[(lin.y_index(), lin.y_index())].sqrt();
            GridSpec::linspace(-span * sx, span * sx, nx, -span * sy, span * sy, ny)?
        }
    };
    let field: LocalGrid = match quantity {
        QuantityArg::Density => {
            if weighted {
                return usage("--weighted does not apply to the density field");
            }
            stationary_density_grid(&lin, &grid)?
        }
        QuantityArg::LocalTe => {
            let tau = tau.ok_or_else(|| CliError::Usage("--tau is required".into()))?;
            local_te_grid(&lin, tau, &grid, weighted)?
        }
        QuantityArg::LocalGamma => {
            let tau = tau.ok_or_else(|| CliError::Usage("--tau is required".into()))?;
            local_gamma_grid(&lin, tau, &grid, weighted)?
        }
    };
    let output = if ctx.json {
        let mut s = serde_json::to_string(&field).expect("serializable grid");
        s.push('\n');
        s
    } else {
        let mut buf = Vec::new();
        field.write_csv(&mut buf)?;
        String::from_utf8(buf).expect("csv utf-8")
    };
    emit(&output);
    let file = format!(
        "{}.{}",
        field.quantity,
        if ctx.json { "json" } else { "csv" }
    );
    ctx.writer().write("grid", &file, &output)?;
    Ok(())
}

/// Shared tail for experiment commands: write report.json, print the check
/// lines (or the report itself under --json), fail with exit 1 if any check
/// failed.
fn finish_experiment(
    ctx: &Ctx,
    writer: &OutputWriter,
    experiment: &str,
    checks: Vec<CheckResult>,
) -> Result<(), CliError> {
    let mut report = ValidationReport::new(ctx.seed);
    report.meta.insert("experiment".into(), experiment.into());
    report.extend(checks);
    writer.write(experiment, "report.json", &report.to_json())?;
    if ctx.json {
        emit(&report.to_json());
    } else {
        let mut text = String::new();
        for c in &report.checks {
            writeln!(text, "{}", c.line()).unwrap();
        }
        writeln!(
            text,
            "{}: {} passed, {} failed",
            experiment, report.passed, report.failed
        )
        .unwrap();
        emit(&text);
    }
    if report.all_passed() {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "{} of {} checks failed",
            report.failed,
            report.checks.len()
        )))
    }
}

fn cmd_figure(ctx: &Ctx, which: FigureArg, reduced: bool) -> Result<(), CliError> {
    let writer = ctx.writer_defaulted();
    let mut spec = match which {
        FigureArg::Fig1 => ExperimentSpec::fig1(ctx.seed),
        FigureArg::Fig2 => ExperimentSpec::fig2(ctx.seed),
        FigureArg::FigA1 => ExperimentSpec::fig_a1(ctx.seed),
        FigureArg::Nonlinear => ExperimentSpec::nonlinear(ctx.seed),
    };
    if reduced {
        spec.cfg = EmpiricalConfig::reduced(ctx.seed);
    }
    let (name, checks) = match which {
        FigureArg::Fig1 => ("fig1", run_fig1(&spec, &writer)?),
        FigureArg::Fig2 => ("fig2", run_fig2(&spec, &writer)?),
        FigureArg::FigA1 => ("fig_a1", run_fig_a1(&spec, &writer)?),
        FigureArg::Nonlinear => ("nonlinear", run_nonlinear(&spec, &writer)?),
    };
    finish_experiment(ctx, &writer, name, checks)
}

#[allow(clippy::too_many_arguments)]
fn cmd_brownian(
    ctx: &Ctx,
    file: &FileConfig,
    m: Option<f64>,
    lambda: Option<f64>,
    temp: Option<f64>,
    f: Option<f64>,
    pulse_duration: Option<f64>,
    n: Option<usize>,
    dt: Option<f64>,
) -> Result<(), CliError> {
    let file_f64 = |key: &str| file.get_parsed::<f64>(key).map_err(CliError::Usage);
    let defaults = BrownianParams::default();
    let params = BrownianParams {
        mass: or_file(m, file_f64("m")?).unwrap_or(defaults.mass),
        friction: or_file(lambda, file_f64("lambda")?).unwrap_or(defaults.friction),
        temperature: or_file(temp, file_f64("temp")?).unwrap_or(defaults.temperature),
        impulse: or_file(f, file_f64("f")?).unwrap_or(defaults.impulse),
        pulse_duration: or_file(pulse_duration, file_f64("pulse_duration")?)
            .unwrap_or(defaults.pulse_duration),
    };
    let n = or_file(n, file.get_parsed("n").map_err(CliError::Usage)?).unwrap_or(100_000);
    let dt = or_file(dt, file_f64("dt")?).unwrap_or(2e-5);
    let writer = ctx.writer_defaulted();
    let checks = run_brownian(&params, n, dt, ctx.seed, &writer)?;
    finish_experiment(ctx, &writer, "brownian", checks)
}

fn cmd_validate(ctx: &Ctx, check: Option<&str>) -> Result<(), CliError> {
    let report = run_validation_suite(ctx.seed, check)?;
    let writer = ctx.writer_defaulted();
    writer.write("validate", "report.json", &report.to_json())?;
    if ctx.json {
        emit(&report.to_json());
    } else {
        let mut text = String::new();
        for c in &report.checks {
            writeln!(text, "{}", c.line()).unwrap();
        }
        writeln!(
            text,
            "validate: {} passed, {} failed",
            report.passed, report.failed
        )
        .unwrap();
        emit(&text);
    }
    if report.all_passed() {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "{} of {} checks failed",
            report.failed,
            report.checks.len()
        )))
    }
}

// ---------------------------------------------------------------------------

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return usage("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }

    let file = match &cli.config {
        Some(path) => FileConfig::load(path).map_err(CliError::Usage)?,
        None => FileConfig::default(),
    };
    file.check_keys(&allowed_keys(&cli.command))
        .map_err(CliError::Usage)?;

    let seed = or_file(cli.seed, file.get_parsed("seed").map_err(CliError::Usage)?)
        .unwrap_or(DEFAULT_SEED);
    let outdir = or_file(
        cli.outdir.clone(),
        file.get("outdir").map(PathBuf::from),
    );
    let json = cli.json
        || file
            .get_parsed::<bool>("json")
            .map_err(CliError::Usage)?
            .unwrap_or(false);
    let ctx = Ctx { json, seed, outdir };

    match &cli.command {
        Command::Analytic { model, tau } => {
            let model = resolve_model(model, &file)?;
            let tau_spec = or_file(tau.clone(), file.get("tau").map(String::from))
                .ok_or_else(|| CliError::Usage("--tau is required".into()))?;
            cmd_analytic(&ctx, &model, &tau_spec)
        }
        Command::Measure {
            model,
            tau,
            kind,
            empirical,
        } => {
            let model = resolve_model(model, &file)?;
            let tau = or_file(*tau, file.get_parsed("tau").map_err(CliError::Usage)?)
                .ok_or_else(|| CliError::Usage("--tau is required".into()))?;
            let kind_file = match file.get("kind") {
                None => None,
                Some("gamma") => Some(MeasureKindArg::Gamma),
                Some("gamma-ensemble") => Some(MeasureKindArg::GammaEnsemble),
                Some(other) => {
                    return usage(format!(
                        "config key 'kind': unknown value '{other}' (gamma, gamma-ensemble)"
                    ))
                }
            };
            let kind = or_file(*kind, kind_file).unwrap_or(MeasureKindArg::Gamma);
            let (cfg, protocol) = resolve_empirical(seed, empirical, &file)?;
            cmd_measure(&ctx, &model, tau, kind, &cfg, protocol.as_ref())
        }
        Command::Grid {
            model,
            tau,
            quantity,
            weighted,
            nx,
            ny,
            span,
        } => {
            let model = resolve_model(model, &file)?;
            let tau = or_file(*tau, file.get_parsed("tau").map_err(CliError::Usage)?);
            let quantity_file = match file.get("quantity") {
                None => None,
                Some("local-te") => Some(QuantityArg::LocalTe),
                Some("local-gamma") => Some(QuantityArg::LocalGamma),
                Some("density") => Some(QuantityArg::Density),
                Some(other) => {
                    return usage(format!(
                        "config key 'quantity': unknown value '{other}' \
                         (local-te, local-gamma, density)"
                    ))
                }
            };
            let quantity = or_file(*quantity, quantity_file)
                .ok_or_else(|| CliError::Usage("--quantity is required".into()))?;
            let weighted = *weighted
                || file
                    .get_parsed::<bool>("weighted")
                    .map_err(CliError::Usage)?
                    .unwrap_or(false);
            let nx = or_file(*nx, file.get_parsed("nx").map_err(CliError::Usage)?);
            let ny = or_file(*ny, file.get_parsed("ny").map_err(CliError::Usage)?);
            let span = or_file(*span, file.get_parsed("span").map_err(CliError::Usage)?);
            cmd_grid(&ctx, &model, tau, quantity, weighted, nx, ny, span)
        }
        Command::Figure { which, reduced } => {
            let reduced = *reduced
                || file
                    .get_parsed::<bool>("reduced")
                    .map_err(CliError::Usage)?
                    .unwrap_or(false);
            cmd_figure(&ctx, *which, reduced)
        }
        Command::Brownian {
            m,
            lambda,
            temp,
            f,
            pulse_duration,
            n,
            dt,
        } => cmd_brownian(&ctx, &file, *m, *lambda, *temp, *f, *pulse_duration, *n, *dt),
        Command::Validate { check } => {
            let check = or_file(check.clone(), file.get("check").map(String::from));
            cmd_validate(&ctx, check.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
