//! Thin command-line front end over the `injectbench` library.
//!
//! Subcommands map one-to-one onto library entry points: `validate` checks a
//! config and shows the trial plan, `evaluate` executes it, `rank-attacks`
//! orders attacks by how well they beat defenses, `generate-defenses` runs
//! the prompt-synthesis loop, and `report` renders tables from stored
//! metrics.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime failure,
//! 3 partial result (trial or refiner budget ran out before completion).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use injectbench::refine::{generate_defenses, RefineError, RefineOptions};
use injectbench::report::{self, ReportError, ReportFormat};
use injectbench::run::{
    execute_run, plan_trials, read_manifest, ExecuteOptions, RunError, RunPaths, SystemClock,
};
use injectbench::{rank_attacks, select_top_attacks, AttackScores, ConfigError, RunConfig};

const EXIT_USAGE: i32 = 1;
const EXIT_RUNTIME: i32 = 2;
const EXIT_PARTIAL: i32 = 3;

#[derive(Parser)]
#[command(
    name = "injectbench",
    version,
    about = "Benchmark prompt-injection attacks and defenses, and synthesize defense prompts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config file and print what a run of it would execute.
    Validate {
        /// Path to the run config (TOML).
        #[arg(long)]
        config: PathBuf,
    },
    /// Execute the configured trial grid into an output directory.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Run directory for trials, metrics, manifest and cache.
        #[arg(long)]
        output_dir: PathBuf,
        /// Worker threads; overrides the config value.
        #[arg(long)]
        parallelism: Option<usize>,
        /// Continue a directory that already holds trials.
        #[arg(long)]
        resume: bool,
        /// Stop after this many new trials (the run resumes later; exits 3).
        #[arg(long)]
        max_trials: Option<usize>,
    },
    /// Evaluate, then rank attacks by prevention + detection bypass.
    RankAttacks {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long)]
        parallelism: Option<usize>,
        #[arg(long)]
        resume: bool,
        /// Length of the shortlist printed after the full table.
        #[arg(long, default_value_t = injectbench::DEFAULT_TOP_K)]
        top_k: usize,
    },
    /// Iteratively synthesize defense prompts that pass the quality gates.
    GenerateDefenses {
        #[arg(long)]
        config: PathBuf,
        /// Refinement directory for candidates, audit log and per-candidate runs.
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long)]
        parallelism: Option<usize>,
        /// Continue a directory that already holds refinement state.
        #[arg(long)]
        resume: bool,
    },
    /// Render tables and CSVs from a finished run's metrics.
    Report {
        /// Run directory holding metrics.json.
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = OutputFormat::Markdown)]
        format: OutputFormat,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Markdown,
    Csv,
    Both,
}

/// An error plus the exit code it maps to.
struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

/// Formats an error with its full source chain on one line.
fn chain(err: &dyn std::error::Error) -> String {
    let mut text = err.to_string();
    let mut source = err.source();
    while let Some(cause) = source {
        text.push_str(&format!(": {cause}"));
        source = cause.source();
    }
    text
}

impl From<ConfigError> for CliError {
    fn from(err: ConfigError) -> Self {
        Self {
            code: EXIT_USAGE,
            message: chain(&err),
        }
    }
}

impl From<RunError> for CliError {
    fn from(err: RunError) -> Self {
        let code = match &err {
            RunError::Config(_) | RunError::WouldOverwrite { .. } => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Self {
            code,
            message: chain(&err),
        }
    }
}

impl From<RefineError> for CliError {
    fn from(err: RefineError) -> Self {
        let code = match &err {
            RefineError::Config(_) | RefineError::MissingRefiner => EXIT_USAGE,
            RefineError::Run(run) => {
                return Self {
                    code: match run {
                        RunError::Config(_) => EXIT_USAGE,
                        _ => EXIT_RUNTIME,
                    },
                    message: chain(&err),
                }
            }
            _ => EXIT_RUNTIME,
        };
        Self {
            code,
            message: chain(&err),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(err: ReportError) -> Self {
        let code = match &err {
            ReportError::MissingMetrics { .. } => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Self {
            code,
            message: chain(&err),
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are successes; real parse errors are
            // usage errors (clap's own default would exit 2).
            let code = if err.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    match dispatch(cli.command) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {}", err.message);
            std::process::exit(err.code);
        }
    }
}

fn load_config(path: &Path, parallelism: Option<usize>) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::load(path)?;
    if let Some(workers) = parallelism {
        config.parallelism = workers;
    }
    config.validate()?;
    Ok(config)
}

fn dispatch(command: Command) -> Result<i32, CliError> {
    match command {
        Command::Validate { config } => validate(&config),
        Command::Evaluate {
            config,
            output_dir,
            parallelism,
            resume,
            max_trials,
        } => evaluate(&config, &output_dir, parallelism, resume, max_trials),
        Command::RankAttacks {
            config,
            output_dir,
            parallelism,
            resume,
            top_k,
        } => rank(&config, &output_dir, parallelism, resume, top_k),
        Command::GenerateDefenses {
            config,
            output_dir,
            parallelism,
            resume,
        } => refine(&config, &output_dir, parallelism, resume),
        Command::Report { output_dir, format } => render(&output_dir, format),
    }
}

fn validate(config_path: &Path) -> Result<i32, CliError> {
    let config = load_config(config_path, None)?;
    let plan = plan_trials(&config)?;
    println!("config OK: run '{}'", config.run_id);
    println!(
        "  tasks: {}, attacks: {}, defenses: {}, temperatures: {}, items per task: {}",
        config.tasks.len(),
        config.attacks.len(),
        config.defenses.len(),
        config.temperatures.len(),
        config.items_per_task,
    );
    println!(
        "  planned trials: {} reference + {} clean + {} attacked = {}",
        plan.counts.reference,
        plan.counts.clean,
        plan.counts.attacked,
        plan.counts.total(),
    );
    Ok(0)
}

/// Runs the grid and reports how it ended: 0 when every planned trial is
/// done, 3 when the trial budget stopped it early, 2 when trials failed.
fn evaluate(
    config_path: &Path,
    output_dir: &Path,
    parallelism: Option<usize>,
    resume: bool,
    max_trials: Option<usize>,
) -> Result<i32, CliError> {
    let config = load_config(config_path, parallelism)?;
    let mut options = ExecuteOptions::new(output_dir);
    options.resume = resume;
    options.max_trials = max_trials;
    let summary = execute_run(&config, &options)?;
    let manifest = &summary.manifest;
    println!(
        "run '{}': executed {}, skipped {} (already done), failed {}",
        manifest.run_id, summary.executed, summary.skipped, summary.failed,
    );
    println!(
        "cache: {} hits, {} misses",
        manifest.cache_hits, manifest.cache_misses
    );
    if summary.failed > 0 {
        eprintln!(
            "error: {} trials failed; see {}",
            summary.failed,
            RunPaths::new(output_dir).errors().display()
        );
        return Ok(EXIT_RUNTIME);
    }
    if !manifest.is_complete() {
        println!(
            "stopped after {} of {} trials; re-run with --resume to continue",
            manifest.completed,
            manifest.planned.total(),
        );
        return Ok(EXIT_PARTIAL);
    }
    println!("metrics: {}", RunPaths::new(output_dir).metrics().display());
    Ok(0)
}

fn rank(
    config_path: &Path,
    output_dir: &Path,
    parallelism: Option<usize>,
    resume: bool,
    top_k: usize,
) -> Result<i32, CliError> {
    let exit = evaluate(config_path, output_dir, parallelism, resume, None)?;
    if exit != 0 {
        return Ok(exit);
    }
    let metrics = report::load_metrics(output_dir)?;
    print!("\n{}", report::render_attack_table(&metrics));

    let scores: std::collections::BTreeMap<String, AttackScores> = metrics
        .per_attack
        .iter()
        .filter_map(|(id, m)| {
            Some((
                id.clone(),
                AttackScores {
                    aps: m.aps?,
                    ads: m.ads?,
                },
            ))
        })
        .collect();
    if scores.is_empty() {
        println!("\nno attack had both prevention and detection scores; nothing to shortlist");
        return Ok(0);
    }
    let ranked = rank_attacks(&scores).map_err(|err| CliError {
        code: EXIT_RUNTIME,
        message: chain(&err),
    })?;
    let shortlist: Vec<&str> = select_top_attacks(&ranked, top_k)
        .iter()
        .map(|r| r.attack_id.as_str())
        .collect();
    println!(
        "\ntop {} attacks: {}",
        shortlist.len(),
        shortlist.join(", ")
    );
    Ok(0)
}

fn refine(
    config_path: &Path,
    output_dir: &Path,
    parallelism: Option<usize>,
    resume: bool,
) -> Result<i32, CliError> {
    let config = load_config(config_path, parallelism)?;
    let state_file = output_dir.join("refine_state.json");
    if state_file.exists() && !resume {
        return Err(CliError::usage(format!(
            "{} already holds refinement state; pass --resume to continue it",
            output_dir.display()
        )));
    }
    let options = RefineOptions::new(output_dir).with_clock(Arc::new(SystemClock));
    let outcome = generate_defenses(&config, &options)?;
    println!(
        "stopped after {} iterations ({:?}); {} refiner calls",
        outcome.iterations, outcome.stop, outcome.refiner_calls
    );
    for candidate in &outcome.accepted {
        let m = &candidate.metrics;
        println!(
            "  accepted {} (score {}, asv {}, fnr {}, fpr {})",
            candidate.candidate_id,
            opt(m.score),
            opt(m.asv),
            opt(m.fnr),
            opt(m.fpr),
        );
    }
    if outcome.partial {
        println!(
            "partial: {} of {} requested prompts accepted",
            outcome.accepted.len(),
            config.refine.target_count
        );
        return Ok(EXIT_PARTIAL);
    }
    println!(
        "prompts written to {}",
        output_dir.join("defenses").display()
    );
    Ok(0)
}

fn opt(value: Option<f64>) -> String {
    value.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

fn render(output_dir: &Path, format: OutputFormat) -> Result<i32, CliError> {
    // A run directory without a manifest is the wrong directory, not a
    // missing-file runtime failure.
    if read_manifest(&RunPaths::new(output_dir).manifest())?.is_none() {
        return Err(CliError::usage(format!(
            "{} does not look like a run directory (no manifest.json)",
            output_dir.display()
        )));
    }
    let formats: &[ReportFormat] = match format {
        OutputFormat::Markdown => &[ReportFormat::Markdown],
        OutputFormat::Csv => &[ReportFormat::Csv],
        OutputFormat::Both => &[ReportFormat::Markdown, ReportFormat::Csv],
    };
    for f in formats {
        for path in report::emit_report(output_dir, *f)? {
            println!("wrote {}", path.display());
        }
    }
    Ok(0)
}
