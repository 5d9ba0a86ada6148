use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use wfeval_core::agents::TemplateSet;
use wfeval_core::analysis::{build_frequency_table, build_taxonomy_matrix, load_annotations, suggest_labels};
use wfeval_core::config::Config;
use wfeval_core::corpus::{format_lint, lint, Corpus};
use wfeval_core::exec::RunnerHandle;
use wfeval_core::gateway::{
    oracle_gateway, Cassette, LiveGateway, ModelGateway, Provider, RecordingGateway, ReplayGateway, TokenBucket,
};
use wfeval_core::grid::{
    error_records, evaluate_grid, failing_runs, load_evaluations, load_runs, run_grid, EvalOptions, RunManifest,
};
use wfeval_core::process::{NoExecutor, Pipeline, ProcessVariant, RunnerExecutor, ScriptExecutor, RUN_LOG};
use wfeval_core::report::{
    aggregate_metrics, comparison_table, errors_table, load_quality_dir, metrics_csv, taxonomy_table, Table,
};

#[derive(Parser)]
#[command(name = "wfeval", version, about = "Run and score multi-agent process variants on class-level tasks")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus utilities.
    Corpus {
        #[command(subcommand)]
        command: CorpusCommand,
    },
    /// Generate code for every cell of the configured grid, resuming where a
    /// previous run stopped.
    Run(RunArgs),
    /// Score generated code against the benchmark tests.
    Evaluate(EvaluateArgs),
    /// Error and failure-cause analyses.
    Analyze {
        #[command(subcommand)]
        command: AnalyzeCommand,
    },
    /// Write a report table as aligned text and CSV.
    Report(ReportArgs),
    /// Re-run the grid from a cassette and optionally compare with the original runs.
    Replay(ReplayArgs),
    /// Prompt template utilities.
    Templates {
        #[command(subcommand)]
        command: TemplatesCommand,
    },
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Print `<task_id> OK|<error>` for every task.
    Lint { path: PathBuf },
}

#[derive(Subcommand)]
enum TemplatesCommand {
    /// Write the built-in templates into a directory for editing.
    Export { dir: PathBuf },
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Override the configured provider.
    #[arg(long, value_parser = parse_provider)]
    provider: Option<Provider>,
    /// Override the configured cassette path.
    #[arg(long)]
    cassette: Option<PathBuf>,
    /// Record every exchange into this cassette.
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(short, long)]
    jobs: Option<usize>,
    /// Discard an existing manifest and run logs in the output directory.
    #[arg(long)]
    fresh: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Runner command line, overriding the configured one.
    #[arg(long)]
    runner: Option<String>,
    /// Per-run timeout in seconds.
    #[arg(long)]
    timeout: Option<f64>,
    /// Keep sandbox directories for inspection.
    #[arg(long)]
    keep_sandbox: bool,
    #[arg(short, long)]
    jobs: Option<usize>,
    /// Re-score runs that already have an evaluation.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Error-type frequencies per model and variant.
    Errors {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_parser = parse_variant)]
        baseline: Option<ProcessVariant>,
    },
    /// Validate failure-cause labels and count them per model and variant.
    Taxonomy {
        #[command(flatten)]
        config: ConfigArg,
        /// Label file (JSONL), overriding the configured one.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, value_parser = parse_variant)]
        baseline: Option<ProcessVariant>,
        /// Write heuristic label suggestions for failing runs.
        #[arg(long)]
        suggest: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportKind {
    Comparison,
    Errors,
    Taxonomy,
}

#[derive(Args)]
struct ReportArgs {
    kind: ReportKind,
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_parser = parse_variant)]
    baseline: Option<ProcessVariant>,
    /// Annotate every cell with the run ids it aggregates.
    #[arg(long)]
    provenance: bool,
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    cassette: PathBuf,
    /// Output directory for the replayed runs.
    #[arg(long)]
    out: PathBuf,
    /// Byte-compare every replayed run log with the configured output's.
    #[arg(long)]
    verify: bool,
    #[arg(short, long)]
    jobs: Option<usize>,
}

fn parse_provider(s: &str) -> Result<Provider, String> {
    s.parse()
}

fn parse_variant(s: &str) -> Result<ProcessVariant, String> {
    s.parse()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default)))
        .with_writer(std::io::stderr)
        .init();
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// `Ok(false)` means the command ran but did not fully succeed.
fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::Corpus { command: CorpusCommand::Lint { path } } => {
            let results = lint(&path)?;
            print!("{}", format_lint(&results));
            Ok(results.iter().all(|(_, r)| r.is_ok()))
        }
        Command::Run(args) => cmd_run(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Analyze { command } => cmd_analyze(command),
        Command::Report(args) => cmd_report(args),
        Command::Replay(args) => cmd_replay(args),
        Command::Templates { command: TemplatesCommand::Export { dir } } => {
            TemplateSet::export_defaults(&dir).with_context(|| format!("writing templates to {}", dir.display()))?;
            println!("templates written to {}", dir.display());
            Ok(true)
        }
    }
}

fn load_config(arg: &ConfigArg) -> Result<Config> {
    Ok(Config::load(&arg.config)?)
}

fn load_corpus(cfg: &Config) -> Result<Corpus> {
    let corpus = Corpus::load(&cfg.corpus).with_context(|| format!("loading corpus {}", cfg.corpus.display()))?;
    for r in &corpus.rejected {
        eprintln!("warning: task {} skipped: {}", r.task_id, r.reason);
    }
    if corpus.is_empty() {
        bail!("corpus {} holds no valid task", cfg.corpus.display());
    }
    Ok(corpus)
}

fn base_gateway(cfg: &Config, corpus: &Corpus, templates: &TemplateSet) -> Result<Arc<dyn ModelGateway>> {
    Ok(match cfg.provider {
        Provider::Scripted => Arc::new(oracle_gateway(corpus.clone(), templates.clone())),
        Provider::Replay => {
            let path = cfg.cassette.as_ref().ok_or_else(|| anyhow!("provider `replay` needs a cassette"))?;
            Arc::new(ReplayGateway::from_file(path).with_context(|| format!("loading cassette {}", path.display()))?)
        }
        Provider::Live => {
            let mut g = LiveGateway::from_env(Duration::from_secs(300));
            if let Some(rl) = &cfg.rate_limit {
                g = g.with_rate_limit(Arc::new(TokenBucket::new(rl.capacity, rl.per_second)));
            }
            Arc::new(g)
        }
    })
}

/// Runs the configured grid into `cfg.output`. Returns whether every cell
/// completed.
fn execute_grid(cfg: &Config, record: Option<PathBuf>, fresh: bool) -> Result<bool> {
    cfg.validate().map_err(|e| anyhow!("invalid configuration: {e}"))?;
    let templates = cfg.template_set().map_err(|e| anyhow!(e))?;
    let corpus = load_corpus(cfg)?;
    let base = base_gateway(cfg, &corpus, &templates)?;

    // Live runs record into the configured cassette unless told otherwise.
    let record = record.or_else(|| (cfg.provider == Provider::Live).then(|| cfg.cassette.clone()).flatten());
    let recorder = match &record {
        Some(path) => {
            let existing = if path.is_file() {
                Cassette::load(path).with_context(|| format!("loading cassette {}", path.display()))?
            } else {
                Cassette::new()
            };
            Some(Arc::new(RecordingGateway::resume(base.clone(), existing)))
        }
        None => None,
    };
    let gateway: Arc<dyn ModelGateway> = match &recorder {
        Some(r) => r.clone(),
        None => base,
    };

    let executor: Box<dyn ScriptExecutor> = match cfg.runner() {
        Some(r) => {
            Box::new(RunnerExecutor { runner: r.map_err(|e| anyhow!(e))?, timeout_s: cfg.execution.script_timeout_s })
        }
        None => {
            if cfg.variants.iter().any(|v| v.activities().contains(&wfeval_core::process::Activity::Testing)) {
                eprintln!("warning: no runner configured; Tester scripts cannot be executed");
            }
            Box::new(NoExecutor)
        }
    };

    if fresh {
        for p in [RunManifest::path(&cfg.output), cfg.runs_dir()] {
            if p.is_dir() {
                fs::remove_dir_all(&p)?;
            } else if p.is_file() {
                fs::remove_file(&p)?;
            }
        }
    }
    let fresh_manifest =
        RunManifest::new(cfg.digest(&templates), &corpus, cfg.provider, &cfg.models, &cfg.variants);
    let mut manifest = RunManifest::open_or_create(&cfg.output, fresh_manifest)?;
    let pipeline = Pipeline::new(&templates, gateway.as_ref(), executor.as_ref(), cfg.params.clone())
        .with_refinement_rounds(cfg.refinement_rounds);

    let save_cassette = |_: &wfeval_core::RunRecord| {
        if let (Some(r), Some(p)) = (&recorder, &record) {
            if let Err(e) = r.save(p) {
                tracing::error!("saving cassette {}: {e}", p.display());
            }
        }
    };
    let summary = run_grid(
        &mut manifest,
        &corpus,
        &pipeline,
        &cfg.output,
        &cfg.runs_dir(),
        "py",
        cfg.jobs,
        &save_cassette,
    );
    if let (Some(r), Some(p)) = (&recorder, &record) {
        r.save(p).with_context(|| format!("saving cassette {}", p.display()))?;
    }
    let summary = summary?;
    let counts = manifest
        .status_counts()
        .into_iter()
        .map(|(k, v)| format!("{k} {v}"))
        .collect::<Vec<_>>()
        .join(", ");
    println!(
        "{} cell(s) run, {} already done; {} | manifest {}",
        summary.executed.len(),
        summary.skipped,
        counts,
        RunManifest::path(&cfg.output).display()
    );
    Ok(manifest.is_complete())
}

fn cmd_run(args: RunArgs) -> Result<bool> {
    let mut cfg = load_config(&args.config)?;
    if let Some(p) = args.provider {
        cfg.provider = p;
    }
    if let Some(c) = args.cassette {
        cfg.cassette = Some(c);
    }
    if let Some(j) = args.jobs {
        cfg.jobs = j;
    }
    execute_grid(&cfg, args.record, args.fresh)
}

fn cmd_replay(args: ReplayArgs) -> Result<bool> {
    let original = load_config(&args.config)?;
    let mut cfg = original.clone();
    cfg.provider = Provider::Replay;
    cfg.cassette = Some(args.cassette);
    cfg.output = args.out;
    if let Some(j) = args.jobs {
        cfg.jobs = j;
    }
    let complete = execute_grid(&cfg, None, false)?;
    if !args.verify {
        return Ok(complete);
    }
    let manifest = RunManifest::load(&cfg.output)?;
    let mut mismatched = Vec::new();
    for e in &manifest.entries {
        let id = &e.descriptor.run_id;
        let a = fs::read(original.runs_dir().join(id).join(RUN_LOG));
        let b = fs::read(cfg.runs_dir().join(id).join(RUN_LOG));
        match (a, b) {
            (Ok(a), Ok(b)) if a == b => {}
            _ => mismatched.push(id.clone()),
        }
    }
    if mismatched.is_empty() {
        println!("verified: {} run log(s) byte-identical", manifest.entries.len());
        Ok(complete)
    } else {
        for id in &mismatched {
            eprintln!("differs: {id}");
        }
        println!("{} of {} run log(s) differ", mismatched.len(), manifest.entries.len());
        Ok(false)
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<bool> {
    let cfg = load_config(&args.config)?;
    let runner = match args.runner {
        Some(cmd) => RunnerHandle::parse(&cmd)?.resolve_in(&std::env::current_dir()?),
        None => cfg.runner().ok_or_else(|| anyhow!("no runner: set [execution].runner or pass --runner"))?.map_err(|e| anyhow!(e))?,
    };
    let corpus = load_corpus(&cfg)?;
    let manifest = RunManifest::load(&cfg.output).context("no grid to evaluate; run `wfeval run` first")?;
    let opts = EvalOptions {
        timeout_s: args.timeout.unwrap_or(cfg.execution.timeout_s),
        keep_sandbox: args.keep_sandbox || cfg.execution.keep_sandbox,
        jobs: args.jobs.unwrap_or(cfg.jobs),
        force: args.force,
    };
    let (records, failures) = evaluate_grid(&manifest, &corpus, &cfg.runs_dir(), &runner, &opts)?;
    for f in &failures {
        eprintln!("error: {f}");
    }
    let evaluated: Vec<_> = records.iter().filter_map(|r| r.evaluation.result()).collect();
    let correct = evaluated.iter().filter(|r| r.all_passed()).count();
    println!(
        "{} evaluated ({} class-correct), {} not evaluated, {} failed",
        evaluated.len(),
        correct,
        records.len() - evaluated.len(),
        failures.len()
    );
    Ok(failures.is_empty())
}

fn baseline_of(cfg: &Config, flag: Option<ProcessVariant>) -> Result<ProcessVariant> {
    let b = flag.unwrap_or(cfg.baseline);
    if !cfg.variants.contains(&b) {
        bail!("baseline {b} is not among the configured variants");
    }
    Ok(b)
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    for item in items {
        writeln!(f, "{}", serde_json::to_string(&item)?)?;
    }
    Ok(())
}

fn errors_report(cfg: &Config, baseline: ProcessVariant) -> Result<Table> {
    let evals = load_evaluations(&cfg.runs_dir())?;
    if evals.is_empty() {
        bail!("no evaluations under {}; run `wfeval evaluate` first", cfg.runs_dir().display());
    }
    let records = error_records(&evals);
    write_jsonl(&cfg.output.join("analysis").join("error_records.jsonl"), &records)?;
    let table = build_frequency_table(&records, &cfg.models, &cfg.variants, baseline)?;
    Ok(errors_table(&table))
}

fn taxonomy_report(cfg: &Config, labels: Option<PathBuf>, baseline: ProcessVariant) -> Result<Table> {
    let path = labels
        .or_else(|| cfg.labels.clone())
        .ok_or_else(|| anyhow!("no labels: set `labels` in the configuration or pass --labels"))?;
    let evals = load_evaluations(&cfg.runs_dir()).unwrap_or_default();
    let failing = (!evals.is_empty()).then(|| failing_runs(&evals));
    let labels = load_annotations(&path, failing.as_ref())?;
    let matrix = build_taxonomy_matrix(&labels, &cfg.models, &cfg.variants, baseline)?;
    Ok(taxonomy_table(&matrix))
}

fn cmd_analyze(command: AnalyzeCommand) -> Result<bool> {
    match command {
        AnalyzeCommand::Errors { config, baseline } => {
            let cfg = load_config(&config)?;
            let table = errors_report(&cfg, baseline_of(&cfg, baseline)?)?;
            print!("{}", table.render_text(false));
            Ok(true)
        }
        AnalyzeCommand::Taxonomy { config, labels, baseline, suggest } => {
            let cfg = load_config(&config)?;
            if suggest {
                let corpus = load_corpus(&cfg)?;
                let evals = load_evaluations(&cfg.runs_dir())?;
                let rows: Vec<serde_json::Value> = evals
                    .iter()
                    .filter_map(|e| {
                        let result = e.evaluation.result()?;
                        if result.all_passed() {
                            return None;
                        }
                        let task = corpus.get(&e.task_id)?;
                        Some(serde_json::json!({
                            "task_id": e.task_id,
                            "variant": e.variant,
                            "model_id": e.model_id,
                            "suggestions": suggest_labels(result, task),
                        }))
                    })
                    .collect();
                let path = cfg.output.join("analysis").join("label_suggestions.jsonl");
                write_jsonl(&path, &rows)?;
                println!("{} suggestion row(s) written to {}", rows.len(), path.display());
                if labels.is_none() && cfg.labels.is_none() {
                    return Ok(true);
                }
            }
            let table = taxonomy_report(&cfg, labels, baseline_of(&cfg, baseline)?)?;
            print!("{}", table.render_text(false));
            Ok(true)
        }
    }
}

fn cmd_report(args: ReportArgs) -> Result<bool> {
    let cfg = load_config(&args.config)?;
    let baseline = baseline_of(&cfg, args.baseline)?;
    let reports = cfg.reports_dir();
    let (table, stem) = match args.kind {
        ReportKind::Comparison => {
            let corpus = load_corpus(&cfg)?;
            let evals = load_evaluations(&cfg.runs_dir())?;
            let runs = load_runs(&cfg.runs_dir())?;
            let quality = match &cfg.quality_dir {
                Some(dir) => load_quality_dir(dir, &cfg.models, &cfg.variants)?,
                None => Default::default(),
            };
            let rows = aggregate_metrics(&evals, &runs, &corpus, &quality, &cfg.models, &cfg.variants)?;
            fs::create_dir_all(&reports)?;
            fs::write(reports.join("metrics.csv"), metrics_csv(&rows)?)?;
            (comparison_table(&rows, baseline)?, "comparison")
        }
        ReportKind::Errors => (errors_report(&cfg, baseline)?, "errors"),
        ReportKind::Taxonomy => (taxonomy_report(&cfg, args.labels, baseline)?, "taxonomy"),
    };
    let (txt, csv) = table.write(&reports, stem, args.provenance)?;
    print!("{}", table.render_text(args.provenance));
    eprintln!("wrote {} and {}", txt.display(), csv.display());
    Ok(true)
}
