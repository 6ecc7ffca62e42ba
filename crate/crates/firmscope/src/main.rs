use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use firmscope::emulation::{self, BackendKind, EmulationSession};
use firmscope::error::{Error, Result};
use firmscope::fixtures::{build_corpus, default_specs, parse_specs};
use firmscope::pipeline::{self, BatchOptions, Config, ReportFormat};
use firmscope::workspace::{read_json, Workspace};
use firmscope::{archscan, collector, corpus, fsroot, staticintake, triage, webscan};
use firmscope_core::report::render_markdown;
use firmscope_core::session::SessionState;
use firmscope_core::triage::FailureStage;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "firmscope", version, about = "Emulate and probe the web interfaces of unpacked firmware")]
struct Cli {
    /// Workspace directory.
    #[arg(long, global = true, default_value = "firmscope-ws")]
    workspace: PathBuf,
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Fixture,
    Qemu,
    Hosted,
}

impl From<Backend> for BackendKind {
    fn from(b: Backend) -> Self {
        match b {
            Backend::Fixture => BackendKind::Fixture,
            Backend::Qemu => BackendKind::QemuChroot,
            Backend::Hosted => BackendKind::HostedTransplant,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Md,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Chroot,
    Web,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest unpacked firmware trees.
    Ingest {
        trees: Vec<PathBuf>,
        #[arg(long)]
        vendor: Option<String>,
    },
    /// Find, sanitize and pack root filesystem candidates.
    Rootfs { id: String },
    /// Vote on each candidate's architecture.
    Arch { id: String },
    /// Find web servers, configs, document roots and HTTPS material.
    Webheur { id: String },
    /// Boot candidates until one serves HTTP; prints the sessions.
    Emulate {
        id: String,
        #[arg(long, value_enum, default_value = "fixture")]
        backend: Backend,
    },
    /// Scan a session's web interface, then snapshot and collect.
    Scan {
        session: String,
        /// Scan files with High static findings first.
        #[arg(long)]
        focus_from_static: bool,
    },
    /// Diff a session's snapshots and attribute injection artifacts.
    Collect { session: String },
    /// Import a static-analysis report (JSON Lines or CSV).
    StaticIngest { id: String, report: PathBuf },
    /// Render the batch report from stored outcomes.
    Report {
        #[arg(long, value_enum, default_value = "md")]
        format: Format,
    },
    /// Sample failures and extrapolate their causes.
    Triage {
        #[arg(long, value_enum)]
        stage: Option<Stage>,
        #[arg(long)]
        sample_seed: Option<u64>,
        #[arg(long)]
        confidence: Option<f64>,
        #[arg(long)]
        half_width: Option<f64>,
    },
    /// Run every stage on every ingested firmware.
    Run {
        #[arg(long, value_enum, default_value = "fixture")]
        backend: Backend,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Recompute firmware that already have an outcome.
        #[arg(long)]
        fresh: bool,
    },
    /// Generate the synthetic fixture corpus.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        /// JSON spec list; the built-in twelve fixtures when absent.
        #[arg(long)]
        specs: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// `println!` that ends output quietly on a closed pipe.
macro_rules! outln {
    ($($arg:tt)*) => {
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    };
}

fn out(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_json<T: Serialize>(value: &T) {
    out(&(serde_json::to_string_pretty(value).expect("outputs serialize") + "\n"));
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    path.map_or_else(|| Ok(Config::default()), Config::load)
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(cli.config.as_deref())?;
    if let Command::Fixtures { out, specs, seed } = &cli.command {
        let specs = match specs {
            Some(p) => parse_specs(&std::fs::read_to_string(p).map_err(|source| Error::Io { path: p.clone(), source })?)?,
            None => default_specs(),
        };
        for p in build_corpus(&specs, out, *seed)? {
            outln!("{}", p.display());
        }
        return Ok(());
    }
    let ws = Workspace::open(&cli.workspace)?;
    match cli.command {
        Command::Fixtures { .. } => unreachable!("handled above"),
        Command::Ingest { trees, vendor } => {
            for tree in trees {
                let image = corpus::ingest(&ws, &tree, vendor.as_deref())?;
                outln!("{}  {}  {:?}", image.id, tree.display(), image.selection);
            }
        }
        Command::Rootfs { id } => print_json(&fsroot::prepare_rootfs(&ws, &ws.resolve_id(&id)?)?),
        Command::Arch { id } => {
            let id = ws.resolve_id(&id)?;
            let rootfs = fsroot::load_rootfs(&ws, &id).or_else(|_| fsroot::prepare_rootfs(&ws, &id))?;
            print_json(&archscan::detect_architectures(&ws, &rootfs)?);
        }
        Command::Webheur { id } => {
            let id = ws.resolve_id(&id)?;
            let rootfs = fsroot::load_rootfs(&ws, &id).or_else(|_| fsroot::prepare_rootfs(&ws, &id))?;
            print_json(&webscan::analyze_firmware_web(&ws, &rootfs)?);
        }
        Command::Emulate { id, backend } => {
            let id = ws.resolve_id(&id)?;
            let backend = emulation::make_backend(backend.into(), config.qemu_images.clone());
            for r in pipeline::emulate_firmware(&ws, &id, backend.as_ref(), &config)? {
                let failure = r.failure.map_or(String::new(), |f| format!(" ({f:?})"));
                outln!("{}  {:?}{}", r.session_id, r.state, failure);
            }
        }
        Command::Scan { session, focus_from_static } => {
            let dir = pipeline::find_session(&ws, &session)?;
            let record: emulation::SessionRecord = read_json(&dir.join(emulation::SESSION_FILE))?;
            let backend = emulation::make_backend(record.backend, config.qemu_images.clone());
            let mut s = EmulationSession::resume(backend.as_ref(), &dir)?;
            if s.state() != SessionState::WebUp {
                return Err(Error::Snapshot(format!("session {session} did not bring its web interface back up")));
            }
            let web = webscan::analyze_web(&s.plan.candidate.materialized_path)?;
            let sitemap = web.sitemaps.first().cloned().ok_or_else(|| Error::InvalidPlan("no document root to scan".into()))?;
            let focus = if focus_from_static {
                pipeline::static_focus(&ws, &record.firmware_id, &sitemap.docroot.dir_rel_path)?
            } else {
                None
            };
            let (outcome, collected) = pipeline::scan_and_collect(&mut s, sitemap, focus, &config)?;
            s.stop()?;
            print_json(&serde_json::json!({ "scan": outcome, "collect": collected }));
        }
        Command::Collect { session } => print_json(&collector::collect(&pipeline::find_session(&ws, &session)?)?),
        Command::StaticIngest { id, report } => {
            let id = ws.resolve_id(&id)?;
            let intake = staticintake::store_static_report(&ws, &id, &report)?;
            outln!("{} findings imported, {} malformed lines skipped", intake.findings.len(), intake.skipped);
        }
        Command::Report { format } => {
            let report = pipeline::build_report(&ws, &config)?;
            let format = match format {
                Format::Json => ReportFormat::Json,
                Format::Md => ReportFormat::Markdown,
            };
            out(&pipeline::render_report(&report, format));
        }
        Command::Triage { stage, sample_seed, confidence, half_width } => {
            let mut t = config.triage.clone();
            t.seed = sample_seed.unwrap_or(t.seed);
            t.confidence = confidence.unwrap_or(t.confidence);
            t.half_width = half_width.unwrap_or(t.half_width);
            let stage = stage.map(|s| match s {
                Stage::Chroot => FailureStage::Chroot,
                Stage::Web => FailureStage::WebServer,
            });
            print_json(&triage::run_triage(&ws, &t.params()?, stage)?);
        }
        Command::Run { backend, jobs, fresh } => {
            let opts = BatchOptions { backend: backend.into(), jobs, fresh };
            let report = pipeline::run_batch(&ws, &config, &opts)?;
            out(&render_markdown(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("firmscope: {e}");
            ExitCode::FAILURE
        }
    }
}
