mod config;

use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use dlgf_core::flow::{parse_flow, serialize_flow};
use dlgf_core::hcn::{gradient_check, Shape};
use dlgf_core::regress::{parse_transcripts, Rating, Verdict};
use dlgf_core::teach::{Correction, HyperOverrides, LogFilter, LogStatus, TeachError, TeachService, RULES_VERSION};

use config::{CliConfig, ConfigError};

/// Dialog flows to a trainable dialog manager, with teaching and regression testing.
#[derive(Debug, Parser)]
#[command(name = "dlgf", version)]
struct Cli {
    /// Data directory holding the flow, dialogs, logs and models.
    #[arg(long, global = true, env = "DLGF_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Config file (default: ./dlgf.toml when present).
    #[arg(long, global = true, env = "DLGF_CONFIG")]
    config: Option<PathBuf>,
    /// Training seed.
    #[arg(long, global = true, env = "DLGF_SEED")]
    seed: Option<u64>,
    #[command(flatten)]
    hyper: HyperFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct HyperFlags {
    #[arg(long, global = true, env = "DLGF_EMBEDDING_DIM")]
    embedding_dim: Option<usize>,
    #[arg(long, global = true, env = "DLGF_HIDDEN_SIZE")]
    hidden_size: Option<usize>,
    #[arg(long, global = true, env = "DLGF_LEARNING_RATE")]
    learning_rate: Option<f64>,
    #[arg(long, global = true, env = "DLGF_MAX_EPOCHS")]
    max_epochs: Option<usize>,
}

impl HyperFlags {
    fn overrides(&self) -> HyperOverrides {
        HyperOverrides {
            embedding_dim: self.embedding_dim,
            hidden_size: self.hidden_size,
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            ..HyperOverrides::default()
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse, validate and store a flow.
    Import { flow: PathBuf },
    /// Enumerate walks into training dialogs and action masks.
    Compile,
    /// Train a new model version on the current training set.
    Train,
    /// Talk to the active model; one utterance per line.
    Chat {
        #[arg(long)]
        conversation: Option<String>,
    },
    /// Run the HTTP API and the teaching UI.
    Serve {
        #[arg(long, env = "DLGF_PORT", value_parser = clap::value_parser!(u16).range(1024..))]
        port: Option<u16>,
        /// Directory of static UI files.
        #[arg(long, env = "DLGF_ASSETS")]
        assets: Option<PathBuf>,
    },
    /// Replay transcripts on two versions (0 or `rules` is the imported flow).
    Replay {
        #[arg(long, value_parser = parse_version)]
        left: u64,
        #[arg(long, value_parser = parse_version)]
        right: u64,
        /// JSON Lines file of transcripts.
        #[arg(long, conflicts_with = "set")]
        transcripts: Option<PathBuf>,
        /// Stored transcript set: `logs`, `compiled` or a name under transcripts/.
        #[arg(long)]
        set: Option<String>,
    },
    /// Rebuild a flow from the compiled dialogs.
    ExportFlow {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences on tiny random models.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// List logs, least confident first.
    Logs {
        /// unreviewed, corrected, dismissed or all.
        #[arg(long, default_value = "unreviewed")]
        status: String,
    },
    /// Print one log as JSON.
    Log { id: u64 },
    /// Apply a correction read from a JSON file (`-` for stdin).
    Correct { file: PathBuf },
    /// Print the pairs of a regression run still waiting for a verdict.
    Queue { run: u64 },
    /// Rate a pair of a regression run as shown by `queue`.
    Rate {
        run: u64,
        pair: usize,
        #[arg(value_parser = parse_verdict)]
        verdict: Verdict,
    },
    /// Print the rating report of a regression run.
    Report { run: u64 },
}

fn parse_version(s: &str) -> Result<u64, String> {
    if s == "rules" {
        return Ok(RULES_VERSION);
    }
    s.trim_start_matches('v').parse().map_err(|_| format!("`{s}` is not a version like v2, 2 or rules"))
}

fn parse_verdict(s: &str) -> Result<Verdict, String> {
    match s {
        "same" => Ok(Verdict::Same),
        "left" | "left_better" => Ok(Verdict::LeftBetter),
        "right" | "right_better" => Ok(Verdict::RightBetter),
        _ => Err(format!("`{s}` is not one of same, left, right")),
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{code}: {0}", code = .0.code())]
    Teach(#[from] TeachError),
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn settings(cli: &Cli, port: Option<u16>) -> Result<CliConfig, CliError> {
    let file = config::load_file(cli.config.as_deref())?;
    Ok(config::resolve(file, cli.data_dir.clone(), port, cli.seed, cli.hyper.overrides())?)
}

fn open(cfg: &CliConfig) -> Result<TeachService, CliError> {
    Ok(TeachService::open(&cfg.data_dir, cfg.service)?)
}

fn read_input(path: &PathBuf) -> Result<Vec<u8>, CliError> {
    if path.as_os_str() == "-" {
        let mut buf = Vec::new();
        std::io::Read::read_to_end(&mut std::io::stdin(), &mut buf)?;
        return Ok(buf);
    }
    Ok(std::fs::read(path)?)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let port = match &cli.command {
        Command::Serve { port, .. } => *port,
        _ => None,
    };
    let cfg = settings(&cli, port)?;
    let out = &mut std::io::stdout().lock();
    match cli.command {
        Command::Import { flow } => {
            let flow = parse_flow(&read_input(&flow)?).map_err(TeachError::from)?;
            open(&cfg)?.import_flow(&flow)?;
            writeln!(
                out,
                "imported {}: {} nodes, {} edges, {} entities",
                flow.name,
                flow.nodes.len(),
                flow.edges.len(),
                flow.entities.len()
            )?;
        }
        Command::Compile => {
            let s = open(&cfg)?.compile()?;
            writeln!(out, "{} walks, {} dialogs, {} templates, {} masks", s.walks, s.dialogs, s.templates, s.masks)?;
        }
        Command::Train => {
            let svc = open(&cfg)?;
            let r = svc.retrain(&HyperOverrides::default())?;
            let m = &r.metrics;
            writeln!(out, "model v{}", r.version)?;
            writeln!(out, "dialogs {} steps {} epochs {}", m.dialogs, m.steps, m.epochs)?;
            writeln!(out, "accuracy {:.4} loss {:.6}", m.accuracy, m.final_loss)?;
            writeln!(out, "hash {}", r.model_hash)?;
        }
        Command::Chat { conversation } => {
            let svc = open(&cfg)?;
            let id = conversation.unwrap_or_else(|| format!("cli-{}", dlgf_core::teach::now()));
            let reply = svc.chat(&id, None)?;
            print_actions(out, &reply.actions)?;
            let (mut ended, log) = (reply.state_summary.ended, reply.state_summary.log_id);
            for line in std::io::stdin().lock().lines() {
                if ended {
                    break;
                }
                let reply = svc.chat(&id, Some(line?.trim_end()))?;
                print_actions(out, &reply.actions)?;
                ended = reply.state_summary.ended;
            }
            writeln!(out, "log {log}")?;
        }
        Command::Serve { assets, .. } => {
            let svc = Arc::new(open(&cfg)?);
            let addr = std::net::SocketAddr::from(([127, 0, 0, 1], cfg.port));
            writeln!(out, "listening on http://{addr}")?;
            out.flush()?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(dlgf_server::serve(svc, addr, assets))?;
        }
        Command::Replay { left, right, transcripts, set } => {
            let svc = open(&cfg)?;
            let ts = match (transcripts, set) {
                (Some(path), _) => {
                    let text = String::from_utf8_lossy(&read_input(&path)?).into_owned();
                    parse_transcripts(&text).map_err(TeachError::from)?
                }
                (None, Some(name)) => svc.transcript_set(&name)?,
                (None, None) => svc.transcript_set("logs")?,
            };
            let run = svc.start_run(left, right, &ts)?;
            let same = run.pairs.iter().filter(|p| p.pair.auto_same).count();
            writeln!(
                out,
                "run {}: {} pairs, {} identical, {} to rate",
                run.id,
                run.pairs.len(),
                same,
                run.pairs.len() - same
            )?;
            for p in run.pairs.iter().filter(|p| !p.pair.auto_same) {
                writeln!(out, "  {} diverges at turn {}", p.pair.transcript_id, p.pair.divergence.unwrap_or_default())?;
            }
        }
        Command::ExportFlow { out: path } => {
            let flow = open(&cfg)?.export_flow()?;
            let bytes = serialize_flow(&flow).map_err(TeachError::from)?;
            match path {
                Some(p) => std::fs::write(p, bytes)?,
                None => out.write_all(&bytes)?,
            }
        }
        Command::Gradcheck { seeds } => {
            let shape = Shape { vocab: 4, embedding: 3, entities: 2, templates: 3, hidden: 4 };
            let base = cfg.seed.unwrap_or(0);
            let mut worst: f64 = 0.0;
            for s in base..base + seeds {
                let e = gradient_check(shape, s);
                writeln!(out, "seed {s}: max relative error {e:.3e}")?;
                worst = worst.max(e);
            }
            writeln!(out, "max {worst:.3e}")?;
            if worst.is_nan() || worst >= 1e-4 {
                return Err(CliError::Domain(format!("gradient check failed: {worst:.3e} >= 1e-4")));
            }
        }
        Command::Logs { status } => {
            let status = match status.as_str() {
                "unreviewed" => Some(LogStatus::Unreviewed),
                "corrected" => Some(LogStatus::Corrected),
                "dismissed" => Some(LogStatus::Dismissed),
                "all" => None,
                other => return Err(CliError::Domain(format!("unknown status `{other}`"))),
            };
            for r in open(&cfg)?.ranked_logs(LogFilter { status }) {
                writeln!(out, "{}\t{:.4}\t{} turns\t{:?}", r.log_id, r.score, r.turns, r.status)?;
            }
        }
        Command::Log { id } => {
            let log = open(&cfg)?.log(id)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&log).expect("logs serialize"))?;
        }
        Command::Correct { file } => {
            let c: Correction = serde_json::from_slice(&read_input(&file)?)
                .map_err(|e| CliError::Domain(format!("bad correction: {e}")))?;
            let outcome = open(&cfg)?.correct(&c)?;
            writeln!(out, "{} ({} turns)", outcome.dialog.id, outcome.dialog.turns.len())?;
        }
        Command::Queue { run } => {
            let q = open(&cfg)?.run_queue(run)?;
            writeln!(out, "run {run}: {} of {} rated", q.rated, q.needs_rating)?;
            for p in &q.pending {
                writeln!(
                    out,
                    "pair {} ({}), diverges at turn {}",
                    p.pair_id,
                    p.transcript_id,
                    p.divergence.unwrap_or_default()
                )?;
                for (side, turns) in [("left", &p.left), ("right", &p.right)] {
                    for t in turns.iter() {
                        let said: Vec<&str> = t.actions.iter().map(|a| a.text.as_str()).collect();
                        writeln!(out, "  {side}\t{}\t{}", t.user.as_deref().unwrap_or(""), said.join(" | "))?;
                    }
                }
            }
        }
        Command::Rate { run, pair, verdict } => {
            open(&cfg)?.rate(run, &[Rating { pair_id: pair, verdict }])?;
            writeln!(out, "rated pair {pair}")?;
        }
        Command::Report { run } => {
            write!(out, "{}", open(&cfg)?.report(run)?.render())?;
        }
    }
    Ok(())
}

fn print_actions(out: &mut impl Write, actions: &[dlgf_core::teach::ChatAction]) -> std::io::Result<()> {
    for a in actions {
        if a.text.is_empty() {
            writeln!(out, "[{}]", a.template_id)?;
        } else {
            writeln!(out, "{}", a.text)?;
        }
    }
    Ok(())
}
