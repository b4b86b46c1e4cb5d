//! The `casegraph` command line.

use std::path::{Path, PathBuf};

use casegraph_core::config::{AppConfig, ConfigError};
use casegraph_core::kg::{GraphStore, KnowledgeGraph};
use casegraph_core::scenario::{eval_dir, run_scenario, ScenarioPack};
use casegraph_service::ServiceConfig;
use clap::{Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(
    name = "casegraph",
    version,
    about = "Knowledge-graph assisted history taking and diagnosis"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `server.bind`.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Build a graph store from node and edge JSON-lines files.
    ImportKg {
        #[arg(long)]
        nodes: PathBuf,
        #[arg(long)]
        edges: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a store's current graph as node and edge files.
    ExportKg {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run one scenario pack and write the full run record.
    RunScenario {
        #[arg(long)]
        pack: PathBuf,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run every pack in a directory and report hit rates.
    Eval {
        #[arg(long)]
        packs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        top_k: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Leave wall-clock timings out of the JSON so reruns compare equal.
        #[arg(long)]
        stable: bool,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

fn run_err(e: impl std::fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

fn config_err(e: ConfigError) -> CliError {
    match e {
        ConfigError::Invalid(m) => CliError::Usage(m),
        other => CliError::Run(other.to_string()),
    }
}

fn app_config(path: Option<&Path>) -> Result<AppConfig, CliError> {
    let mut c = match path {
        Some(p) => AppConfig::load::<AppConfig>(p).map_err(config_err)?,
        None => AppConfig::default(),
    };
    c.provider = c
        .provider
        .with_env_overrides()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    c.validate().map_err(config_err)?;
    Ok(c)
}

fn write_json(out: Option<&Path>, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(run_err)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n")
            .map_err(|e| CliError::Run(format!("{}: {e}", p.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Serve { config, bind } => {
            let mut c: ServiceConfig = AppConfig::load(&config).map_err(config_err)?;
            c.app.provider = c
                .app
                .provider
                .with_env_overrides()
                .map_err(|e| CliError::Usage(e.to_string()))?;
            if let Some(b) = bind {
                c.server.bind = b;
            }
            c.app.validate().map_err(config_err)?;
            if c.app.storage.data_dir.is_none() {
                return Err(CliError::Usage(
                    "storage.data_dir is required to serve".into(),
                ));
            }
            let rt = tokio::runtime::Runtime::new().map_err(run_err)?;
            rt.block_on(casegraph_service::serve(c)).map_err(run_err)
        }
        Command::ImportKg { nodes, edges, out } => {
            let g = KnowledgeGraph::load_files(&nodes, &edges).map_err(run_err)?;
            let (n, m) = (g.entity_count(), g.triple_count());
            GraphStore::create(&out, g).map_err(run_err)?;
            println!(
                "imported {n} entities and {m} triples into {}",
                out.display()
            );
            Ok(())
        }
        Command::ExportKg { store, out_dir } => {
            let s = GraphStore::open(&store).map_err(run_err)?;
            std::fs::create_dir_all(&out_dir).map_err(run_err)?;
            s.graph()
                .save_files(&out_dir.join("nodes.jsonl"), &out_dir.join("edges.jsonl"))
                .map_err(run_err)?;
            println!(
                "exported {} entities and {} triples to {}",
                s.graph().entity_count(),
                s.graph().triple_count(),
                out_dir.display()
            );
            Ok(())
        }
        Command::RunScenario { pack, out, config } => {
            let cfg = app_config(config.as_deref())?;
            let p = ScenarioPack::load(&pack).map_err(run_err)?;
            let run = run_scenario(&p, &cfg).map_err(run_err)?;
            eprintln!(
                "{}: top1 {} top3 {} ({})",
                run.metrics.pack_id,
                run.metrics.top1_hit,
                run.metrics.top3_hit,
                run.metrics.top.join(", ")
            );
            write_json(
                out.as_deref(),
                &serde_json::to_value(&run).map_err(run_err)?,
            )
        }
        Command::Eval {
            packs,
            out,
            top_k,
            config,
            stable,
        } => {
            if top_k == 0 {
                return Err(CliError::Usage("--top-k must be at least 1".into()));
            }
            let mut cfg = app_config(config.as_deref())?;
            cfg.thresholds.k = top_k;
            let m = eval_dir(&packs, &cfg)
                .map_err(|e| CliError::Run(format!("{}: {e}", packs.display())))?;
            print!("{}", m.to_table());
            let v = if stable {
                m.stable_json()
            } else {
                serde_json::to_value(&m).map_err(run_err)?
            };
            if out.is_some() {
                write_json(out.as_deref(), &v)?;
            }
            if m.aggregate.failed_count > 0 {
                return Err(CliError::Run(format!(
                    "{} of {} packs failed",
                    m.aggregate.failed_count, m.aggregate.pack_count
                )));
            }
            Ok(())
        }
    }
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
