//! `aggrefuse`: runs the averaged-data fusion algorithm on the builtin
//! simulation studies and writes plot-ready CSV files.
//!
//! Exit status: 0 when the runs converged, 2 when they completed without
//! converging (cross-run R-hat or final k-hat), 1 on any error.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aggrefuse::ep_core::Relaxation;
use aggrefuse::models_builtin::BuiltinConfig;
use aggrefuse::oracle::{fit_blue, fit_green, fit_red, OracleConfig, PosteriorSummary};
use aggrefuse::orchestrator::{check_convergence, importance_resample, run_many, RunTrace, Schedule};
use aggrefuse::psis::Regime;
use aggrefuse::report::{
    apply_config_entry, parse_config, write_convergence, write_draws, write_references, write_summary,
    write_trace_file,
};
use aggrefuse::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "aggrefuse", version, about = "Fuse averaged external data into a hierarchical Bayesian analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the iterative algorithm on a builtin study.
    Run(RunArgs),
    /// Compute reference posteriors only.
    Oracle(OracleArgs),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long, value_enum)]
    model: ModelName,
    /// Seed for the simulated data and all runs.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Flat `key = value` file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    outer: Option<usize>,
    #[arg(long)]
    inner: Option<usize>,
    #[arg(long)]
    jtilde: Option<usize>,
    #[arg(long = "mcmc-init-iters")]
    mcmc_init_iters: Option<usize>,
    #[arg(long = "warmup-resample-steps")]
    warmup_resample_steps: Option<usize>,
    #[arg(long, value_enum)]
    relaxation: Option<RelaxationName>,
    /// Reference fits to compute for references.csv.
    #[arg(long, value_enum, default_value_t = Which::All)]
    references: Which,
    /// Also write this many importance-resampled final draws per run.
    #[arg(long = "export-draws")]
    export_draws: Option<usize>,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value_t = Which::All)]
    which: Which,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ModelName {
    Linear,
    Logistic,
    Turnover,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum RelaxationName {
    Damped,
    #[value(name = "paper_literal")]
    PaperLiteral,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Which {
    Red,
    Green,
    Blue,
    /// Every reference available for the model.
    All,
    /// Only the simulation truth.
    None,
}

impl ModelName {
    fn as_str(self) -> &'static str {
        match self {
            ModelName::Linear => "linear",
            ModelName::Logistic => "logistic",
            ModelName::Turnover => "turnover",
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Run(args) => run(&args),
        Command::Oracle(args) => oracle(&args).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("AGGREFUSE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("AGGREFUSE_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn load_settings(common: &Common) -> Result<(Schedule, BuiltinConfig)> {
    let mut schedule = Schedule::default();
    let mut model = BuiltinConfig::from_name(common.model.as_str())?;
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)?;
        for (k, v) in parse_config(&text)? {
            apply_config_entry(&mut schedule, &mut model, &k, &v)?;
        }
    }
    Ok((schedule, model))
}

fn run(args: &RunArgs) -> Result<bool> {
    let (mut schedule, builtin) = load_settings(&args.common)?;
    let flags = [
        (&mut schedule.n_runs, args.runs),
        (&mut schedule.outer_steps, args.outer),
        (&mut schedule.inner_steps, args.inner),
        (&mut schedule.j_tilde, args.jtilde),
        (&mut schedule.initial_mcmc_iterations, args.mcmc_init_iters),
        (&mut schedule.resample_warmup_steps, args.warmup_resample_steps),
    ];
    for (slot, value) in flags {
        if let Some(v) = value {
            *slot = v;
        }
    }
    if let Some(r) = args.relaxation {
        schedule.relaxation = match r {
            RelaxationName::Damped => Relaxation::Damped,
            RelaxationName::PaperLiteral => Relaxation::PaperLiteral,
        };
    }
    schedule.validate()?;
    let seed = args.common.seed;
    let out = &args.common.out;
    fs::create_dir_all(out)?;

    let exp = builtin.simulate_experiment(seed)?;
    let model = builtin.model();
    let traces = run_many(model.as_ref(), &exp.local, &exp.external, &schedule, seed)
        .into_iter()
        .collect::<Result<Vec<RunTrace>>>()?;

    for tr in &traces {
        write_trace_file(tr, &out.join(format!("trace_run{}.csv", tr.run_id)))?;
        if let Some(n) = args.export_draws {
            let draws = importance_resample(tr, n)?;
            let path = out.join(format!("draws_run{}.csv", tr.run_id));
            write_draws(&tr.names, &draws, create(&path)?)?;
        }
    }
    write_summary(&traces, create(&out.join("summary.csv"))?)?;
    let converged = if traces.len() >= 2 {
        let report = check_convergence(&traces)?;
        write_convergence(&report, create(&out.join("convergence.csv"))?)?;
        report.converged
    } else {
        traces
            .iter()
            .all(|t| t.last().is_some_and(|r| r.regime != Regime::Unreliable))
    };
    write_reference_file(&builtin, &exp, args.references, seed, out)?;

    for tr in &traces {
        if let Some(last) = tr.last() {
            println!(
                "run {}: final k_hat {} efficiency {:.4}",
                tr.run_id,
                last.k_hat.map_or("n/a".to_string(), |k| format!("{k:.3}")),
                last.efficiency
            );
        }
    }
    println!("converged: {converged}");
    Ok(converged)
}

fn oracle(args: &OracleArgs) -> Result<()> {
    let (_, builtin) = load_settings(&args.common)?;
    fs::create_dir_all(&args.common.out)?;
    let exp = builtin.simulate_experiment(args.common.seed)?;
    write_reference_file(&builtin, &exp, args.which, args.common.seed, &args.common.out)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn write_reference_file(
    builtin: &BuiltinConfig,
    exp: &aggrefuse::models_builtin::Experiment,
    which: Which,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let model = builtin.model();
    let mut cfg = OracleConfig::default();
    cfg.sampler.seed = seed;
    let wants = |w: Which| which == w || which == Which::All;
    let mut fits: Vec<(&str, PosteriorSummary)> = Vec::new();
    if wants(Which::Red) {
        fits.push(("red", fit_red(model.as_ref(), &exp.local, &cfg)?));
    }
    if wants(Which::Green) {
        fits.push(("green", fit_green(model.as_ref(), &exp.local, &exp.external_full, &cfg)?));
    }
    if which == Which::Blue || (which == Which::All && matches!(builtin, BuiltinConfig::Linear(_))) {
        fits.push(("blue", fit_blue(builtin, &exp.local, &exp.external, &cfg)?));
    }
    let names = model.parameter_spec().all_names();
    let truth: Vec<f64> = exp.phi_true.iter().chain(&exp.delta_true).copied().collect();
    let refs: Vec<(&str, &PosteriorSummary)> = fits.iter().map(|(l, f)| (*l, f)).collect();
    write_references(&refs, Some((&names, &truth)), create(&out.join("references.csv"))?)
}
