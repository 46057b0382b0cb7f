use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use kgcot::config::PipelineConfig;
use kgcot::pipeline::{Pipeline, PipelineError};
use kgcot::study::{self, server, StudyStore};

#[derive(Parser)]
#[command(name = "kgcot", version, about = "Knowledge-graph guided reasoning corpus pipeline")]
struct Cli {
    /// Pipeline config (JSON). Built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Align vocabulary codes and disease targets to KG nodes.
    MapEntities,
    /// Select relevance nodes and pruned paths per disease.
    MineEvidence,
    /// Pair adjacent visits and split into test/train/dev.
    BuildCohort,
    /// Generate, filter, and package reasoning traces.
    GenCot,
    /// Score a prediction file against cohort labels.
    Evaluate {
        /// Defaults to predictions.jsonl in the output directory.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Serve the blinded pairwise preference study.
    ServeStudy {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Outputs of the first system (JSONL). With --system2, (re)builds the study.
        #[arg(long, requires = "system2")]
        system1: Option<PathBuf>,
        #[arg(long, requires = "system1")]
        system2: Option<PathBuf>,
        /// Static bundle for the review UI.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
    /// Every stage end to end on the configured inputs.
    RunAll,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Study(#[from] study::StudyError),
    #[error("{0}")]
    Input(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Pipeline(e) => e.exit_code() as u8,
            _ => 1,
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path).map_err(PipelineError::from)?,
        None => {
            let mut c = PipelineConfig::default();
            c.rebase(Path::new(""));
            c
        }
    };
    if let Some(seed) = cli.seed {
        config.parameters.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.paths.out = out.clone();
    }
    Ok(config)
}

fn serve_study(
    pipeline: &Pipeline,
    port: u16,
    host: &str,
    system1: Option<&Path>,
    system2: Option<&Path>,
    static_dir: Option<PathBuf>,
) -> Result<(), CliError> {
    let dir = pipeline.artifact("study");
    let study_path = dir.join("study.json");
    let cfg = pipeline.config();
    let bundle = match (system1, system2) {
        (Some(a), Some(b)) => {
            let s = study::build_study(
                study::read_system_outputs(a)?,
                study::read_system_outputs(b)?,
                cfg.parameters.seed,
                &cfg.study,
            )?;
            std::fs::create_dir_all(&dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
            study::write_study(&study_path, &s)?;
            restrict_permissions(&study_path);
            s
        }
        _ if study_path.exists() => study::read_study(&study_path)?,
        _ => {
            return Err(CliError::Input(format!(
                "no study at {}; pass --system1 and --system2 to build one",
                study_path.display()
            )))
        }
    };
    let store = Arc::new(StudyStore::open(bundle, &dir.join("preferences.jsonl"))?);
    let config = server::ServerConfig {
        static_dir,
        admin_token: std::env::var("KGCOT_STUDY_TOKEN").ok().filter(|t| !t.is_empty()),
    };
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Input(e.to_string()))?;
    runtime.block_on(async {
        let addr = format!("{host}:{port}");
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Input(format!("cannot listen on {addr}: {e}")))?;
        eprintln!(
            "serving {} comparisons on http://{addr} (log: {})",
            store.study().comparisons.len(),
            store.log_path().display()
        );
        server::serve(listener, store.clone(), &config, server::shutdown_signal())
            .await
            .map_err(|e| CliError::Input(e.to_string()))
    })?;
    let report_path = dir.join("report.json");
    let body = serde_json::to_string_pretty(&store.report()).expect("report serializes");
    std::fs::write(&report_path, body + "\n").map_err(|e| CliError::Input(format!("{}: {e}", report_path.display())))?;
    restrict_permissions(&report_path);
    eprintln!("preference log synced; report written to {}", report_path.display());
    Ok(())
}

#[cfg(unix)]
fn restrict_permissions(path: &Path) {
    use std::os::unix::fs::PermissionsExt;
    if let Err(e) = std::fs::set_permissions(path, std::fs::Permissions::from_mode(0o600)) {
        log::warn!("cannot restrict permissions on {}: {e}", path.display());
    }
}

#[cfg(not(unix))]
fn restrict_permissions(_: &Path) {}

fn run(cli: Cli) -> Result<(), CliError> {
    let pipeline = Pipeline::new(load_config(&cli)?)?;
    pipeline.write_resolved_config()?;
    match cli.command {
        Command::MapEntities => {
            let kg = pipeline.load_kg()?;
            pipeline.map_entities(&kg)?;
        }
        Command::MineEvidence => {
            let kg = pipeline.load_kg()?;
            let (mapping, summary) = pipeline.load_alignment()?;
            pipeline.mine_evidence(&kg, &mapping, &summary)?;
        }
        Command::BuildCohort => {
            pipeline.build_cohort()?;
        }
        Command::GenCot => {
            let kg = pipeline.load_kg()?;
            let (mapping, _) = pipeline.load_alignment()?;
            let evidence = pipeline.load_evidence()?;
            let cohort = pipeline.load_cohort()?;
            pipeline.gen_cot(&kg, &mapping, &evidence, &cohort)?;
        }
        Command::Evaluate { predictions } => {
            let cohort = pipeline.load_cohort()?;
            let path = predictions.unwrap_or_else(|| pipeline.artifact("predictions.jsonl"));
            let report = pipeline.evaluate(&path, &cohort)?;
            println!("{}", serde_json::to_string_pretty(&report.macro_avg).expect("serializes"));
        }
        Command::ServeStudy {
            port,
            host,
            system1,
            system2,
            static_dir,
        } => serve_study(&pipeline, port, &host, system1.as_deref(), system2.as_deref(), static_dir)?,
        Command::RunAll => {
            let summary = pipeline.run_all()?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("serializes"));
        }
    }
    pipeline.write_provider_stats()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
