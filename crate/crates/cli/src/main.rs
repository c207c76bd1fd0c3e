use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use covadj::simulation::McOptions;
use covadj_cli::config::{parse_methods, parse_pmodel, parse_selector, parse_variance, split_list};
use covadj_cli::simulate::{render_orderings, resolve_dgp, run_simulation};
use covadj_cli::{export_csv, run_analysis, CliResult, RunConfig};

#[derive(Parser)]
#[command(
    name = "covadj",
    version,
    about = "Covariate-adjusted treatment effects with missing outcomes and covariates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate treatment effects from a CSV file and write a JSON report.
    Analyze(AnalyzeArgs),
    /// Run a Monte Carlo study on a built-in or custom design.
    Simulate(SimulateArgs),
    /// Write one synthetic dataset as CSV.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    outcome: String,
    #[arg(long)]
    treatment: String,
    /// Comma-separated, fully observed.
    #[arg(long, default_value = "")]
    covariates: String,
    /// Comma-separated, may contain missing tokens.
    #[arg(long, default_value = "")]
    partial_covariates: String,
    #[arg(long, default_value = "unadj,x-reg,x-ps,dr")]
    method: String,
    /// Outcome-missingness model terms: interacted, additive or covariates.
    #[arg(long, default_value = "interacted")]
    pmodel: String,
    /// Covariate set of the outcome-missingness model.
    #[arg(long, default_value = "full-mim")]
    pmodel_covariates: String,
    /// Covariate set of the treatment-propensity model.
    #[arg(long, default_value = "full-mim")]
    emodel: String,
    #[arg(long, default_value = "sandwich")]
    variance: String,
    #[arg(long, default_value_t = 500)]
    bootstrap_reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Extra missing-value token, on top of "" and "NA"; repeatable.
    #[arg(long = "missing-token")]
    missing_tokens: Vec<String>,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Preset name: sinusoidal or latent-class.
    #[arg(long)]
    dgp: Option<String>,
    /// JSON design file instead of a preset.
    #[arg(long)]
    dgp_file: Option<PathBuf>,
    #[arg(long)]
    e: f64,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    workers: Option<usize>,
    /// Bootstrap replicates per replication (slow).
    #[arg(long)]
    bootstrap_reps: Option<usize>,
    /// Summary JSON path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-replication CSV path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    dgp: Option<String>,
    #[arg(long)]
    dgp_file: Option<PathBuf>,
    #[arg(long)]
    e: f64,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn analyze(args: AnalyzeArgs) -> CliResult<i32> {
    let mut cfg = RunConfig::new(args.data, &args.outcome, &args.treatment);
    cfg.covariates = split_list(&args.covariates).map(String::from).collect();
    cfg.partial_covariates = split_list(&args.partial_covariates)
        .map(String::from)
        .collect();
    cfg.methods = parse_methods(&args.method)?;
    cfg.pmodel = parse_pmodel(&args.pmodel, &args.pmodel_covariates)?;
    cfg.emodel = parse_selector(&args.emodel)?;
    cfg.variance = parse_variance(&args.variance)?;
    cfg.bootstrap_reps = args.bootstrap_reps;
    cfg.seed = args.seed;
    cfg.missing_tokens.extend(args.missing_tokens);
    cfg.output = args.out;
    let report = run_analysis(&cfg)?;
    let json = report.to_json()?;
    match &cfg.output {
        Some(path) => {
            fs::write(path, json)?;
            eprint!("{}", report.render_table());
        }
        None => print!("{json}"),
    }
    Ok(report.exit_code())
}

fn simulate(args: SimulateArgs) -> CliResult<i32> {
    let dgp = resolve_dgp(
        args.dgp.as_deref(),
        args.dgp_file.as_deref(),
        args.n,
        args.e,
    )?;
    let mut opts = McOptions::new(args.reps, args.seed);
    opts.workers = args.workers;
    opts.bootstrap = args.bootstrap_reps;
    let run = run_simulation(&dgp, &opts)?;
    let mut json = serde_json::to_string_pretty(&run.output)?;
    json.push('\n');
    match &args.out {
        Some(path) => fs::write(path, json)?,
        None => print!("{json}"),
    }
    if let Some(path) = &args.csv {
        fs::write(path, &run.csv)?;
    }
    eprint!("{}", render_orderings(&run.output.orderings));
    Ok(if run.output.failed_records > 0 { 4 } else { 0 })
}

fn generate(args: GenerateArgs) -> CliResult<i32> {
    let dgp = resolve_dgp(
        args.dgp.as_deref(),
        args.dgp_file.as_deref(),
        args.n,
        args.e,
    )?;
    let sample = dgp.sample(args.seed, 0)?;
    let file = fs::File::create(&args.out)?;
    export_csv(&sample.dataset, "y", "z", file)?;
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Simulate(a) => simulate(a),
        Command::Generate(a) => generate(a),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
