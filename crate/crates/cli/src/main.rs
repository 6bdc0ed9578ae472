//! `soldfl` — the experiment runner.
//!
//! Two commands over one configuration format:
//!
//! * `run`: execute every configured (method, seed) cell, writing one
//!   metrics file per run, a cross-seed summary, and an echo of the
//!   resolved configuration; or, with `--suite acceptance`, execute the
//!   self-check suite and print one verdict line per criterion.
//! * `plan`: build the clustering and link-power plan for each seed
//!   without training, reporting infeasible device pairs with the
//!   constraint that binds them.
//!
//! Every file lands inside `--out`; nothing else on disk is touched.
//! Exit codes: 0 success, 1 runtime failure (diverged run, failed
//! criterion, I/O), 2 configuration problem (unparseable config, unknown
//! method, bad flag).

mod config;
mod emit;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use soldfl_core::acceptance::{self, CriterionReport};
use soldfl_core::sim::metrics::{render_csv, render_summary};
use soldfl_core::sim::{plan_experiment, run_experiment, ExperimentConfig, Method};

#[derive(Parser)]
#[command(
    name = "soldfl",
    version,
    about = "Desk-scale simulator for decentralized multi-task fine-tuning \
             with sparse, orthogonal low-rank adapters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured method-by-seed matrix, or a named check suite
    Run(RunArgs),
    /// Plan clustering, link powers and bit counts without training
    Plan(CommonArgs),
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Execute a named check suite instead of the config's matrix
    /// (available: acceptance)
    #[arg(long, value_name = "NAME")]
    suite: Option<String>,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration file
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; the only place this tool writes
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Comma-separated seeds overriding the config's list
    #[arg(long, value_name = "CSV")]
    seeds: Option<String>,
    /// Single method overriding the config's list
    #[arg(long, value_name = "NAME")]
    method: Option<String>,
}

/// Failures split by exit code: configuration problems exit 2, runtime
/// failures exit 1.
enum CliError {
    Config(String),
    Runtime(String),
}

type CliResult<T> = Result<T, CliError>;

impl From<soldfl_core::Error> for CliError {
    fn from(e: soldfl_core::Error) -> CliError {
        match e {
            soldfl_core::Error::InvalidArgument(_) | soldfl_core::Error::Config(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<config::ConfigError> for CliError {
    fn from(e: config::ConfigError) -> CliError {
        CliError::Config(e.0)
    }
}

fn main() -> ExitCode {
    // Die quietly when stdout closes early (`soldfl run | head`), like
    // other unix tools, instead of panicking mid-print.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Plan(args) => cmd_plan(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn load_manifest(common: &CommonArgs) -> CliResult<config::Manifest> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required (unless running --suite)".into()))?;
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut manifest = config::parse(&text, &path.display().to_string())?;
    let env_seed = std::env::var("SOLDFL_SEED").ok();
    config::apply_overrides(
        &mut manifest,
        common.seeds.as_deref(),
        common.method.as_deref(),
        env_seed.as_deref(),
    )?;
    // Semantic validation fails here, before any run starts or any file
    // is written.
    manifest.base.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(manifest)
}

fn prepare_out(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))
}

fn write_file(out: &Path, name: &str, content: &str) -> CliResult<()> {
    let path = out.join(name);
    fs::write(&path, content)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

fn cmd_run(args: RunArgs) -> CliResult<()> {
    prepare_out(&args.common.out)?;
    if let Some(suite) = &args.suite {
        return run_suite(suite, &args.common.out);
    }
    let manifest = load_manifest(&args.common)?;
    write_file(&args.common.out, "resolved.cfg", &config::render(&manifest))?;

    let mut scores = Vec::new();
    for &method in &manifest.methods {
        for &seed in &manifest.seeds {
            let cfg = ExperimentConfig { method, seed, ..manifest.base.clone() };
            let started = Instant::now();
            let outcome = run_experiment(&cfg)?;
            let csv = render_csv(&outcome.metrics, cfg.tasks)?;
            write_file(
                &args.common.out,
                &format!("metrics_{}_seed{}.csv", method.name(), seed),
                &csv,
            )?;
            println!(
                "{} seed {}: final avg loss {:.4} ({:.1}s)",
                method.name(),
                seed,
                outcome.final_avg_loss,
                started.elapsed().as_secs_f64()
            );
            scores.push(outcome.score());
        }
    }

    let summary = render_summary(&scores, manifest.base.tasks)?;
    let mut document = String::from("# final scores per method, mean (std) over seeds\n\n");
    document.push_str(&summary);
    write_file(&args.common.out, "summary.txt", &document)?;
    print!("\n{summary}");
    Ok(())
}

fn run_suite(name: &str, out: &Path) -> CliResult<()> {
    if name != "acceptance" {
        return Err(CliError::Config(format!("unknown suite '{name}' (available: acceptance)")));
    }
    // Run criterion by criterion so verdicts stream as they finish.
    let checks: [fn() -> CriterionReport; 11] = [
        acceptance::check_collision_oracle,
        acceptance::check_fresh_projection_orthogonality,
        acceptance::check_updated_adapter_orthogonality,
        acceptance::check_aggregation_gap_bound,
        acceptance::check_power_delay_round_trip,
        acceptance::check_cluster_plan_validity,
        acceptance::check_payload_accounting,
        acceptance::check_method_ordering,
        acceptance::check_gradient_correctness,
        acceptance::check_entropy_allocation,
        acceptance::check_determinism,
    ];
    let mut reports = Vec::with_capacity(checks.len());
    for check in checks {
        let report = check();
        println!("{}", report.line());
        reports.push(report);
    }
    write_file(out, "acceptance.txt", &acceptance::render_report(&reports))?;
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::Runtime(format!(
            "{failed} of {} acceptance criteria failed",
            reports.len()
        )));
    }
    println!("all {} criteria passed", reports.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// plan
// ---------------------------------------------------------------------------

fn cmd_plan(args: CommonArgs) -> CliResult<()> {
    prepare_out(&args.out)?;
    let manifest = load_manifest(&args)?;
    let method = manifest
        .methods
        .iter()
        .copied()
        .find(|m| matches!(m, Method::Proposed | Method::ProposedSingleCluster))
        .ok_or_else(|| {
            CliError::Config(
                "plan covers the clustered methods; put 'proposed' or \
                 'proposed_single_cluster' in [experiment].methods or pass --method"
                    .into(),
            )
        })?;
    write_file(&args.out, "resolved.cfg", &config::render(&manifest))?;
    for &seed in &manifest.seeds {
        let cfg = ExperimentConfig { method, seed, ..manifest.base.clone() };
        let report = plan_experiment(&cfg)?;
        write_file(
            &args.out,
            &format!("plan_seed{seed}.txt"),
            &emit::render_plan(&report, &cfg, seed),
        )?;
        println!(
            "seed {seed}: {} clusters, {} bits per inner round, {} infeasible pairs",
            report.clusters.len(),
            report.total_bits_per_round,
            report.infeasible_pairs.len()
        );
    }
    Ok(())
}
