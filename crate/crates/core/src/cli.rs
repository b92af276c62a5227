//! Command-line front end.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Like `println!`, but a closed stdout (e.g. piped into `head`) is not an error.
macro_rules! out {
    ($($arg:tt)*) => {{
        let _ = writeln!(io::stdout(), $($arg)*);
    }};
}

use crate::analysis::{
    build_m, projection_identities, symmetric_eigenvalues, DualProblem, DualVector,
    StepConditions,
};
use crate::control::{BitMode, ControllerParams};
use crate::feeder::{emit_feeder, parse_feeder};
use crate::generator::{generate_feeder, GeneratorSpec};
use crate::grid::{build_matrices, LinearModel, RadialNetwork};
use crate::plant::{OperatingCondition, Plant, PlantKind};
use crate::sim::{
    certify, read_trace, run, scenario_conditions, summarize, write_trace, DynamicProtocol,
    Scenario, ScenarioKind, TraceFormat, DEFAULT_BAND_TOLERANCE,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CERTIFICATE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "voltreg", version, about = "Distributed volt/var control with 2-bit messages")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a controller against a plant and write the trace.
    Simulate(SimulateArgs),
    /// Recompute certificates and the run summary from a trace file.
    Analyze(AnalyzeArgs),
    /// Write a generated feeder file.
    GenNet(GenNetArgs),
    /// Evaluate the plant once at a given reactive setpoint.
    Powerflow(PowerflowArgs),
    /// Check model identities and projection relations on an instance.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// Feeder file.
    #[arg(long)]
    network: Option<PathBuf>,
    /// Generator spec, e.g. "tree,N=20,max_children=3,load=1.5".
    #[arg(long = "gen")]
    generator: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ControllerArg {
    Vclb,
    Vclbp,
    Baseline,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PlantArg {
    Linear,
    Distflow,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Jsonl,
}

#[derive(Debug, Args)]
struct ControlArgs {
    #[arg(long, value_enum, default_value = "vclb")]
    controller: ControllerArg,
    #[arg(long, value_enum, default_value = "linear")]
    plant: PlantArg,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Step size of the unquantized baseline.
    #[arg(long)]
    gamma: Option<f64>,
    /// Bound tightening.
    #[arg(long, default_value_t = 0.0)]
    rho: f64,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// alpha = 1/L, beta = epsilon/(4 N^1.5 L); gamma = 1/L for the baseline.
    #[arg(long, conflicts_with_all = ["alpha", "beta", "gamma", "paper_static", "paper_small_alpha"])]
    theorem1_steps: bool,
    /// alpha = 0.2, beta = 1e-5, rho = 0.
    #[arg(long, conflicts_with_all = ["alpha", "beta", "paper_small_alpha"])]
    paper_static: bool,
    /// alpha = 0.08, beta = 1e-5, rho = 0.
    #[arg(long, conflicts_with_all = ["alpha", "beta"])]
    paper_small_alpha: bool,
    /// "intervals=8,rounds=500,range=0.75:1.25"
    #[arg(long)]
    dynamic: Option<String>,
    /// One load factor per interval shared by all buses.
    #[arg(long, requires = "dynamic")]
    global_scale: bool,
    /// Reset duals at interval boundaries.
    #[arg(long, requires = "dynamic")]
    cold_start: bool,
    /// Seed for network generation and load fluctuations.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Count two bits per neighbour link instead of per bus.
    #[arg(long)]
    per_link: bool,
    /// Tolerance on squared voltages when reporting band entry.
    #[arg(long, default_value_t = DEFAULT_BAND_TOLERANCE)]
    band_tolerance: f64,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    control: ControlArgs,
    #[arg(long, default_value_t = 1000)]
    rounds: u64,
    /// Stop once fes falls to this value.
    #[arg(long)]
    stop_threshold: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    /// Monitor the convergence certificates; exit 2 if one fails.
    #[arg(long)]
    certify: bool,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    control: ControlArgs,
    /// Trace file written by `simulate` (CSV or JSON lines).
    #[arg(long)]
    trace: PathBuf,
}

#[derive(Debug, Args)]
struct GenNetArgs {
    #[arg(long = "gen")]
    generator: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PowerflowArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "distflow")]
    plant: PlantArg,
    /// Comma-separated reactive setpoints (default: zero).
    #[arg(long)]
    q: Option<String>,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random samples per randomized check.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Failed(String),
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Failed(e.to_string())
    }
}

type CliResult = Result<i32, CliError>;

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Analyze(a) => analyze(a),
        Command::GenNet(a) => gen_net(a),
        Command::Powerflow(a) => powerflow(a),
        Command::Validate(a) => validate(a),
    };
    match result {
        Ok(code) => code,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(CliError::Failed(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
    }
}

pub fn main() -> i32 {
    main_with_args(std::env::args_os())
}

fn load_instance(source: &Source, seed: u64) -> Result<(RadialNetwork, OperatingCondition), CliError> {
    match (&source.network, &source.generator) {
        (Some(path), _) => Ok(parse_feeder(path)?),
        (None, Some(spec)) => {
            let spec: GeneratorSpec = spec.parse().map_err(|e| CliError::Usage(format!("{e}")))?;
            let g = generate_feeder(&spec.with_seed(seed))?;
            Ok((g.network, g.condition))
        }
        (None, None) => Err(CliError::Usage("one of --network or --gen is required".into())),
    }
}

fn parse_dynamic(spec: &str, seed: u64) -> Result<DynamicProtocol, CliError> {
    let mut p = DynamicProtocol::new(8, 500, (0.75, 1.25), seed);
    for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--dynamic: expected key=value, found '{part}'")))?;
        let bad = || CliError::Usage(format!("--dynamic: invalid value '{v}' for '{k}'"));
        match k {
            "intervals" => p.intervals = v.parse().map_err(|_| bad())?,
            "rounds" => p.rounds_per_interval = v.parse().map_err(|_| bad())?,
            "range" => {
                let (lo, hi) = v.split_once(':').ok_or_else(bad)?;
                p.scale_lo = lo.parse().map_err(|_| bad())?;
                p.scale_hi = hi.parse().map_err(|_| bad())?;
            }
            other => return Err(CliError::Usage(format!("--dynamic: unknown key '{other}'"))),
        }
    }
    if p.intervals == 0 || p.rounds_per_interval == 0 || !(p.scale_lo <= p.scale_hi) {
        return Err(CliError::Usage(format!("--dynamic: invalid protocol '{spec}'")));
    }
    Ok(p)
}

fn controller_params(c: &ControlArgs, model: &LinearModel) -> Result<ControllerParams, CliError> {
    let n = model.dim() as f64;
    let l = model.lipschitz();
    let params = match c.controller {
        ControllerArg::Baseline => {
            if c.alpha.is_some() || c.beta.is_some() || c.paper_static || c.paper_small_alpha {
                return Err(CliError::Usage(
                    "the baseline controller takes --gamma or --theorem1-steps".into(),
                ));
            }
            let gamma = if c.theorem1_steps {
                1.0 / l
            } else {
                c.gamma
                    .ok_or_else(|| CliError::Usage("baseline requires --gamma".into()))?
            };
            ControllerParams::baseline(gamma)
        }
        ControllerArg::Vclb | ControllerArg::Vclbp => {
            if c.gamma.is_some() {
                return Err(CliError::Usage(
                    "--gamma applies only to the baseline controller".into(),
                ));
            }
            let (alpha, beta) = if c.theorem1_steps {
                if !(c.epsilon > 0.0 && c.epsilon <= 1.0) {
                    return Err(CliError::Usage("--epsilon must lie in (0, 1]".into()));
                }
                (1.0 / l, c.epsilon / (4.0 * n.powf(1.5) * l))
            } else if c.paper_static {
                (0.2, 1e-5)
            } else if c.paper_small_alpha {
                (0.08, 1e-5)
            } else {
                match (c.alpha, c.beta) {
                    (Some(a), Some(b)) => (a, b),
                    _ => {
                        return Err(CliError::Usage(
                            "give --alpha and --beta, --theorem1-steps or a paper preset".into(),
                        ))
                    }
                }
            };
            if matches!(c.controller, ControllerArg::Vclb) {
                ControllerParams::vclb(alpha, beta)
            } else {
                ControllerParams::vclbp(alpha, beta)
            }
        }
    };
    if (c.paper_static || c.paper_small_alpha) && c.rho != 0.0 {
        return Err(CliError::Usage("paper presets fix rho = 0".into()));
    }
    Ok(params.with_rho(c.rho))
}

fn scenario_from(
    c: &ControlArgs,
    model: &LinearModel,
    cond: &OperatingCondition,
    rounds: u64,
) -> Result<Scenario, CliError> {
    let params = controller_params(c, model)?;
    params
        .validate(cond)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let kind = match &c.dynamic {
        Some(spec) => {
            let mut p = parse_dynamic(spec, c.seed)?;
            p.global_scale = c.global_scale;
            p.cold_start = c.cold_start;
            ScenarioKind::Dynamic(p)
        }
        None => ScenarioKind::Static { rounds },
    };
    let plant = match c.plant {
        PlantArg::Linear => PlantKind::Linear,
        PlantArg::Distflow => PlantKind::distflow(),
    };
    let mut s = Scenario::new(kind, plant, params);
    if c.per_link {
        s.bit_mode = BitMode::PerLink;
    }
    Ok(s)
}

fn open_out(path: &Option<PathBuf>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn simulate(a: SimulateArgs) -> CliResult {
    if a.rounds == 0 {
        return Err(CliError::Usage("--rounds must be positive".into()));
    }
    let (net, cond) = load_instance(&a.source, a.control.seed)?;
    let model = build_matrices(&net)?;
    let mut scenario = scenario_from(&a.control, &model, &cond, a.rounds)?;
    scenario.stop_threshold = a.stop_threshold;

    let eps = a.control.epsilon;
    if a.certify {
        let p = &scenario.params;
        let (alpha, beta) = (p.alpha, p.beta);
        let conds = StepConditions::new(alpha, beta, eps, &model);
        if !conds.satisfied() {
            eprintln!(
                "warning: step sizes violate the ascent conditions (alpha < {:.6e}, beta < {:.6e}); \
                 the per-round descent guarantee does not apply",
                conds.alpha_limit,
                conds.beta_limit()
            );
        }
    }

    let trace = run(&net, &model, &cond, &scenario)?;
    if let Some(path) = &a.out {
        let mut out = open_out(&Some(path.clone()))?;
        let fmt = match a.format {
            FormatArg::Csv => TraceFormat::Csv,
            FormatArg::Jsonl => TraceFormat::Jsonl,
        };
        write_trace(&trace, fmt, &mut out)?;
        out.flush()?;
    }
    let conditions = scenario_conditions(&cond, &scenario.kind);
    let summary = summarize(&trace, &conditions, eps, a.control.band_tolerance);
    print!("{summary}");

    let mut code = EXIT_OK;
    if a.certify {
        let report = certify(&model, &conditions, &scenario, &trace, eps)?;
        out!("{report}");
        if report.violated() {
            code = EXIT_CERTIFICATE;
        }
    }
    if let Some(abort) = &trace.aborted {
        if code == EXIT_OK {
            return Err(CliError::Failed(format!(
                "run aborted at round {}: {}",
                abort.round, abort.reason
            )));
        }
    }
    Ok(code)
}

fn analyze(a: AnalyzeArgs) -> CliResult {
    let (net, cond) = load_instance(&a.source, a.control.seed)?;
    let model = build_matrices(&net)?;
    let scenario = scenario_from(&a.control, &model, &cond, 1)?;
    let file = File::open(&a.trace)
        .map_err(|e| CliError::Failed(format!("{}: {e}", a.trace.display())))?;
    let trace = read_trace(BufReader::new(file), net.bus_count())?;
    if trace.records.is_empty() {
        return Err(CliError::Failed("trace has no records".into()));
    }
    let conditions = scenario_conditions(&cond, &scenario.kind);
    let eps = a.control.epsilon;
    print!("{}", summarize(&trace, &conditions, eps, a.control.band_tolerance));
    let report = certify(&model, &conditions, &scenario, &trace, eps)?;
    out!("{report}");
    Ok(if report.violated() { EXIT_CERTIFICATE } else { EXIT_OK })
}

fn gen_net(a: GenNetArgs) -> CliResult {
    let spec: GeneratorSpec = a
        .generator
        .parse()
        .map_err(|e| CliError::Usage(format!("{e}")))?;
    let g = generate_feeder(&spec.with_seed(a.seed))?;
    let mut out = open_out(&a.out)?;
    writeln!(out, "# generated by voltreg gen-net --gen \"{}\" --seed {}", a.generator, a.seed)?;
    out.write_all(emit_feeder(&g.network, &g.condition).as_bytes())?;
    out.flush()?;
    Ok(EXIT_OK)
}

fn powerflow(a: PowerflowArgs) -> CliResult {
    let (net, cond) = load_instance(&a.source, a.seed)?;
    let model = build_matrices(&net)?;
    let n = net.bus_count();
    let q = match &a.q {
        None => DVector::zeros(n),
        Some(s) => {
            let xs: Vec<f64> = s
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| CliError::Usage(format!("--q: invalid list '{s}'")))?;
            if xs.len() != n {
                return Err(CliError::Usage(format!("--q needs {n} values, got {}", xs.len())));
            }
            DVector::from_vec(xs)
        }
    };
    let kind = match a.plant {
        PlantArg::Linear => PlantKind::Linear,
        PlantArg::Distflow => PlantKind::distflow(),
    };
    let plant = Plant::new(kind, &net, &model, cond)?;
    let m = plant.measure(&q)?;
    out!("bus,v,v_magnitude");
    for k in 0..n {
        out!("{},{:.12},{:.12}", k + 1, m.v[k], m.v[k].sqrt());
    }
    if let Some(r) = m.residual {
        out!("# residual {r:.3e}");
    }
    Ok(EXIT_OK)
}

fn validate(a: ValidateArgs) -> CliResult {
    let (net, cond) = load_instance(&a.source, a.seed)?;
    let model = build_matrices(&net)?;
    let n = model.dim();
    let mut failed = false;
    let mut report = |name: &str, ok: bool, detail: String| {
        out!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        failed |= !ok;
    };

    let prod = model.a() * model.a_inv() - nalgebra::DMatrix::<f64>::identity(n, n);
    report("inverse", prod.amax() <= 1e-9, format!("max |A A^-1 - I| = {:.3e}", prod.amax()));

    let ev = symmetric_eigenvalues(&build_m(&model));
    let zeros = ev.iter().filter(|e| e.abs() < 1e-9).count();
    let mut nonzero: Vec<f64> = ev.iter().copied().filter(|e| e.abs() >= 1e-9).collect();
    let mut expect: Vec<f64> = model
        .eigenvalues_a()
        .iter()
        .map(|l| -2.0 * (l + 1.0 / l))
        .collect();
    nonzero.sort_by(f64::total_cmp);
    expect.sort_by(f64::total_cmp);
    let rel = if nonzero.len() == expect.len() {
        nonzero
            .iter()
            .zip(&expect)
            .map(|(a, b)| ((a - b) / b).abs())
            .fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };
    report(
        "spectrum",
        zeros == 3 * n && rel <= 1e-6,
        format!("{zeros} zero eigenvalues (expected {}), max relative error {rel:.3e}", 3 * n),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let problem = DualProblem::new(&model, cond)?;
    let mut bad = 0;
    for _ in 0..a.samples {
        let scale = 10f64.powf(rng.gen_range(-3.0..1.0));
        let z = DVector::from_fn(4 * n, |_, _| {
            if rng.gen_bool(0.3) {
                0.0
            } else {
                scale * rng.gen::<f64>()
            }
        });
        let e = problem.evaluate(&DualVector::from_stacked(&z)?);
        if e.feasibility > e.merit {
            bad += 1;
        }
    }
    report("fes <= V", bad == 0, format!("{bad} violations in {} samples", a.samples));

    let mut bad = 0;
    for _ in 0..a.samples {
        let x = if rng.gen_bool(0.2) { 0.0 } else { 10.0 * rng.gen::<f64>() };
        let z = 20.0 * rng.gen::<f64>() - 10.0;
        let beta = rng.gen::<f64>();
        let a1 = rng.gen::<f64>() * (x - (x + z).max(0.0)).abs();
        let a2 = 10.0 * rng.gen::<f64>();
        if !projection_identities(x, z, beta, a1, a2)?.all() {
            bad += 1;
        }
    }
    report("projection", bad == 0, format!("{bad} violations in {} samples", a.samples));

    Ok(if failed { EXIT_CERTIFICATE } else { EXIT_OK })
}
