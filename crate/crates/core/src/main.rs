use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use moneyfrac::analysis::{gen_binomial_cascade, gen_fgn};
use moneyfrac::harness::{
    self, load_plan, ExperimentPlan, ExportSource, RunManifest, RunSpec, OUTPUT_ROOT_ENV,
};
use moneyfrac::model::UnmetDemandRule;
use moneyfrac::{mfdfa, wtmm, Error};

const EXIT_CONFIG: u8 = 1;
const EXIT_UNDER_SAMPLED: u8 = 2;
const EXIT_ANALYSIS: u8 = 3;

#[derive(Parser)]
#[command(name = "moneyfrac", version, about = "Money emergence simulation and multifractal lifetime analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one (thresh, seed) run and write its per-turn and lifetime tables.
    Simulate(SimulateArgs),
    /// MFDFA of a numeric series.
    AnalyzeMfdfa(MfdfaArgs),
    /// WTMM of a numeric series.
    AnalyzeWtmm(WtmmArgs),
    /// Simulate and analyse every (thresh, seed) pair of a plan.
    Sweep(SweepArgs),
    /// Write a synthetic test series.
    GenOracle(OracleArgs),
    /// Collect run and sweep outputs into figure tables.
    Export(ExportArgs),
}

#[derive(Args)]
struct PlanArgs {
    /// Plan file (TOML, or JSON by extension); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_agents: Option<usize>,
    #[arg(long)]
    max_turns: Option<u64>,
    #[arg(long)]
    min_lifetime_events: Option<usize>,
    #[arg(long, value_enum)]
    unmet_demand: Option<UnmetDemandArg>,
    /// Minimum lifetime for money qualification.
    #[arg(long)]
    min_lifetime: Option<u64>,
    /// Skip the per-turn table and the wavelet coefficient matrix.
    #[arg(long)]
    no_detail: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum UnmetDemandArg {
    Standing,
    Ignore,
}

impl PlanArgs {
    fn plan(&self) -> Result<ExperimentPlan, Error> {
        let mut plan = match &self.config {
            Some(path) => load_plan(path)?,
            None => ExperimentPlan::default(),
        };
        if let Some(n) = self.n_agents {
            plan.model.n_agents = n;
        }
        if let Some(t) = self.max_turns {
            plan.model.max_turns = t;
        }
        if let Some(e) = self.min_lifetime_events {
            plan.min_lifetime_events = e;
        }
        if let Some(rule) = self.unmet_demand {
            plan.model.unmet_demand = match rule {
                UnmetDemandArg::Standing => UnmetDemandRule::Standing,
                UnmetDemandArg::Ignore => UnmetDemandRule::Ignore,
            };
        }
        if let Some(l) = self.min_lifetime {
            plan.criteria.min_lifetime = l;
        }
        if self.no_detail {
            plan.detail = false;
        }
        Ok(plan)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    plan: PlanArgs,
    #[arg(long)]
    thresh: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Replay the run recorded in a manifest; other run flags are ignored.
    #[arg(long, conflicts_with_all = ["thresh", "seed", "config"])]
    from_manifest: Option<PathBuf>,
    /// Also run both estimators on the lifetimes.
    #[arg(long)]
    analyze: bool,
    /// Run directory [default: <output root>/runs/thresh-<T>-seed-<S>]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output root for the default run directory.
    #[arg(long, env = OUTPUT_ROOT_ENV)]
    out_root: Option<PathBuf>,
}

#[derive(Args)]
struct QGridArgs {
    #[arg(long, allow_hyphen_values = true)]
    q_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    q_max: Option<f64>,
    #[arg(long)]
    q_step: Option<f64>,
}

impl QGridArgs {
    fn apply(&self, grid: &mut Vec<f64>) -> Result<(), Error> {
        if self.q_min.is_none() && self.q_max.is_none() && self.q_step.is_none() {
            return Ok(());
        }
        let lo = self.q_min.unwrap_or(-4.0);
        let hi = self.q_max.unwrap_or(4.0);
        let step = self.q_step.unwrap_or(0.25);
        if !(step > 0.0) || hi < lo {
            return Err(Error::Config(format!("bad q grid {lo}..{hi} step {step}")));
        }
        let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
        *grid = (0..count).map(|i| lo + step * i as f64).collect();
        Ok(())
    }
}

#[derive(Args)]
struct MfdfaArgs {
    /// One value per line, or a lifetime table (second column is used).
    input: PathBuf,
    /// Plan file whose `mfdfa` section supplies defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    poly_order: Option<usize>,
    #[command(flatten)]
    q: QGridArgs,
    /// Explicit scales, comma separated.
    #[arg(long, value_delimiter = ',')]
    scales: Vec<usize>,
    #[arg(long)]
    scales_per_octave: Option<usize>,
    #[arg(long, requires = "fit_hi")]
    fit_lo: Option<usize>,
    #[arg(long, requires = "fit_lo")]
    fit_hi: Option<usize>,
    /// Directory for the output tables.
    #[arg(long, env = OUTPUT_ROOT_ENV)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WtmmArgs {
    input: PathBuf,
    /// Plan file whose `wtmm` section supplies defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    q: QGridArgs,
    #[arg(long, value_delimiter = ',')]
    scales: Vec<f64>,
    #[arg(long)]
    scale_count: Option<usize>,
    #[arg(long)]
    link_window: Option<f64>,
    #[arg(long)]
    edge_margin_factor: Option<f64>,
    #[arg(long, requires = "fit_hi")]
    fit_lo: Option<f64>,
    #[arg(long, requires = "fit_lo")]
    fit_hi: Option<f64>,
    /// Analyse the series as given instead of its cumulative sum.
    #[arg(long)]
    no_integrate: bool,
    /// Also write the `s, n, T` coefficient matrix.
    #[arg(long)]
    field: bool,
    #[arg(long, env = OUTPUT_ROOT_ENV)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    plan: PlanArgs,
    #[arg(long, value_delimiter = ',')]
    thresh_list: Vec<f64>,
    /// Comma-separated seeds or a half-open range such as `0..20`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, env = OUTPUT_ROOT_ENV)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[command(subcommand)]
    kind: OracleKind,
    /// Output file; standard output when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum OracleKind {
    /// Fractional Gaussian noise.
    Fgn {
        #[arg(long, default_value_t = 1 << 16)]
        length: usize,
        #[arg(long)]
        hurst: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Deterministic binomial cascade of length 2^levels.
    Cascade {
        #[arg(long, default_value_t = 16)]
        levels: u32,
        #[arg(long, default_value_t = 0.6)]
        p: f64,
    },
}

#[derive(Args)]
struct ExportArgs {
    /// Run directory for the per-run figures.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Sweep output root; supplies the threshold figure, and with
    /// --thresh/--seed the run directory.
    #[arg(long)]
    sweep_dir: Option<PathBuf>,
    #[arg(long, requires = "seed", requires = "sweep_dir")]
    thresh: Option<f64>,
    #[arg(long, requires = "thresh")]
    seed: Option<u64>,
    /// Destination directory [default: <output root>/figures]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = OUTPUT_ROOT_ENV)]
    out_root: Option<PathBuf>,
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Parse { .. } | Error::Io(_) | Error::Json(_) => EXIT_CONFIG,
            Error::Invariant(_) | Error::Degenerate(_) | Error::Insufficient(_) | Error::Domain(_) => EXIT_ANALYSIS,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    let outcome = match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::AnalyzeMfdfa(args) => analyze_mfdfa(args),
        Command::AnalyzeWtmm(args) => analyze_wtmm(args),
        Command::Sweep(args) => sweep(args),
        Command::GenOracle(args) => gen_oracle(args),
        Command::Export(args) => export(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

fn output_root(flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(harness::default_output_root)
}

fn simulate(args: SimulateArgs) -> CliResult {
    let spec: RunSpec = match &args.from_manifest {
        Some(path) => RunManifest::load(path)?.spec,
        None => {
            let plan = args.plan.plan()?;
            let thresh = args.thresh.unwrap_or(plan.model.thresh);
            let seed = args.seed.unwrap_or(plan.model.seed);
            plan.run_spec(thresh, seed)
        }
    };
    let dir = args.out.unwrap_or_else(|| {
        output_root(args.out_root)
            .join("runs")
            .join(harness::run_dir_name(spec.model.thresh, spec.model.seed))
    });
    let manifest = if args.analyze {
        harness::run_pipeline(&spec, &dir)?.0
    } else {
        harness::run_single(&spec, &dir)?.0
    };
    println!(
        "{}: {} turns, {} lifetimes ({} qualify as money), checksum {}",
        dir.display(),
        manifest.turns_simulated,
        manifest.events,
        manifest.qualified_events,
        manifest.final_checksum
    );
    for w in &manifest.warnings {
        eprintln!("warning: {w}");
    }
    if args.analyze && manifest.warnings.iter().any(|w| !w.starts_with("under-sampled")) {
        return Ok(EXIT_ANALYSIS);
    }
    Ok(if manifest.under_sampled { EXIT_UNDER_SAMPLED } else { 0 })
}

fn input_header(input: &Path, method: &str) -> Vec<String> {
    vec![
        format!("{method} ({})", harness::CODE_VERSION),
        format!("input: {}", input.display()),
    ]
}

fn analyze_mfdfa(args: MfdfaArgs) -> CliResult {
    let mut cfg = match &args.config {
        Some(path) => load_plan(path)?.mfdfa,
        None => mfdfa::MfdfaConfig::default(),
    };
    if let Some(m) = args.poly_order {
        cfg.poly_order = m;
    }
    args.q.apply(&mut cfg.q_grid)?;
    if !args.scales.is_empty() {
        cfg.scales = args.scales.clone();
    }
    if let Some(n) = args.scales_per_octave {
        cfg.scales_per_octave = n;
    }
    if let (Some(lo), Some(hi)) = (args.fit_lo, args.fit_hi) {
        cfg.fit_range = Some((lo, hi));
    }
    let x = harness::read_series(&args.input)?;
    let result = mfdfa::analyze(&x, &cfg)?;
    let dir = output_root(args.out);
    let files = harness::write_mfdfa_tables(&result, None, &input_header(&args.input, "MFDFA"), &dir)?;
    if let Some(h2) = result.hurst.at(2.0) {
        println!("h(2) = {h2:.4}");
    }
    println!("delta alpha = {:.4}", result.spectrum.width());
    for w in &result.hurst.warnings {
        eprintln!("warning: {w}");
    }
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(0)
}

fn analyze_wtmm(args: WtmmArgs) -> CliResult {
    let mut cfg = match &args.config {
        Some(path) => load_plan(path)?.wtmm,
        None => wtmm::WtmmConfig::default(),
    };
    args.q.apply(&mut cfg.q_grid)?;
    if !args.scales.is_empty() {
        cfg.scales = args.scales.clone();
    }
    if let Some(n) = args.scale_count {
        cfg.scale_count = n;
    }
    if let Some(w) = args.link_window {
        cfg.link_window = w;
    }
    if let Some(e) = args.edge_margin_factor {
        cfg.edge_margin_factor = e;
    }
    if let (Some(lo), Some(hi)) = (args.fit_lo, args.fit_hi) {
        cfg.fit_range = Some((lo, hi));
    }
    if args.no_integrate {
        cfg.integrate = false;
    }
    let x = harness::read_series(&args.input)?;
    let result = wtmm::analyze(&x, &cfg)?;
    let dir = output_root(args.out);
    let files = harness::write_wtmm_tables(&result, None, &input_header(&args.input, "WTMM"), &dir, args.field)?;
    println!("{} maxima lines", result.line_count);
    println!("delta alpha = {:.4}", result.spectrum.width());
    if !result.field.dropped_scales.is_empty() {
        eprintln!("warning: dropped scales {:?}", result.field.dropped_scales);
    }
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(0)
}

fn parse_seeds(text: &str) -> Result<Vec<u64>, Error> {
    let bad = |e: std::num::ParseIntError| Error::Config(format!("seeds {text:?}: {e}"));
    if let Some((a, b)) = text.split_once("..") {
        let (a, b) = (a.trim().parse::<u64>().map_err(bad)?, b.trim().parse::<u64>().map_err(bad)?);
        return Ok((a..b).collect());
    }
    text.split(',').map(|s| s.trim().parse::<u64>().map_err(bad)).collect()
}

fn sweep(args: SweepArgs) -> CliResult {
    let mut plan = args.plan.plan()?;
    if !args.thresh_list.is_empty() {
        plan.thresh_list = args.thresh_list.clone();
    }
    if let Some(seeds) = &args.seeds {
        plan.seeds = parse_seeds(seeds)?;
    }
    if let Some(w) = args.workers {
        plan.workers = w;
    }
    if let Some(out) = args.out {
        plan.output_dir = out;
    }
    let report = harness::run_sweep(&plan)?;
    println!("wrote {} ({} rows)", report.table.display(), report.rows.len());
    for (thresh, seed, e) in &report.failures {
        eprintln!("run thresh={thresh} seed={seed} failed: {e}");
    }
    for row in report.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "{} thresh={} seed={}: {}",
            row.method,
            row.thresh,
            row.seed,
            row.error.as_deref().unwrap_or_default()
        );
    }
    Ok(if report.analysis_failures() > 0 {
        EXIT_ANALYSIS
    } else if report.under_sampled() > 0 {
        eprintln!("{} runs under-sampled", report.under_sampled());
        EXIT_UNDER_SAMPLED
    } else {
        0
    })
}

fn gen_oracle(args: OracleArgs) -> CliResult {
    let (values, header) = match args.kind {
        OracleKind::Fgn { length, hurst, seed } => (
            gen_fgn(length, hurst, seed)?,
            format!("fractional Gaussian noise H={hurst} length={length} seed={seed}"),
        ),
        OracleKind::Cascade { levels, p } => (
            gen_binomial_cascade(levels, p)?,
            format!("binomial cascade p={p} levels={levels}"),
        ),
    };
    let text = harness::format_series(&[header], &values);
    match args.out {
        Some(path) => fs::write(&path, text).map_err(Error::from)?,
        None => print!("{text}"),
    }
    Ok(0)
}

fn export(args: ExportArgs) -> CliResult {
    let mut source = ExportSource {
        run_dir: args.run_dir.clone(),
        sweep_table: args.sweep_dir.as_ref().map(|d| d.join(harness::SWEEP_FILE)),
    };
    if let (Some(dir), Some(thresh), Some(seed)) = (&args.sweep_dir, args.thresh, args.seed) {
        source.run_dir = Some(dir.join("runs").join(harness::run_dir_name(thresh, seed)));
    }
    let out = args.out.unwrap_or_else(|| output_root(args.out_root).join("figures"));
    let report = harness::export_figures(&source, &out)?;
    for path in &report.written {
        println!("wrote {}", path.display());
    }
    for f in &report.failures {
        eprintln!("{}: cannot read {}: {}", f.figure, f.path.display(), f.reason);
    }
    Ok(if report.failures.is_empty() { 0 } else { EXIT_ANALYSIS })
}
