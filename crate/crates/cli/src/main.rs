use std::io::BufRead;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use webpilot_core::gateway::{load_script, HttpModel, LanguageModel, RecordingProxy, ScriptedOracle};
use webpilot_core::harvest::{harvest_with, parse_elements, serialize_elements, PageSnapshot};
use webpilot_core::orchestrator::{
    replay, Agent, AgentConfig, ControlCommand, EventType, SessionTranscript, TaskRunner, TaskSpec, TaskStatus,
};
use webpilot_core::protocol::{parse_output, validate_events, CursorState};
use webpilot_core::session::{BrowserSession, FixtureSession, FixtureWorld, LiveSession};
use webpilot_server::{loopback, serve, AppState, ServerConfig, DEFAULT_PORT, ENV_BROWSER_WS};

#[derive(Parser)]
#[command(name = "agent", version, about = "Drive a browser toward a goal with a language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one task to a terminal status, asking for answers on stdin.
    Run(RunArgs),
    /// Print the element map for a snapshot file or a live page.
    Harvest {
        /// Page snapshot JSON.
        #[arg(long, conflicts_with = "url")]
        fixture: Option<PathBuf>,
        #[arg(long)]
        url: Option<String>,
        /// Browser debugging WebSocket (defaults to AGENT_BROWSER_WS).
        #[arg(long)]
        browser: Option<String>,
    },
    /// Check a model output against an element map.
    Validate {
        /// File holding the raw model output.
        #[arg(long)]
        output: PathBuf,
        /// Element map JSON, as printed by `harvest`.
        #[arg(long)]
        elements: PathBuf,
        /// Item the cursor already rests on.
        #[arg(long)]
        cursor_item: Option<usize>,
        #[arg(long)]
        strict: bool,
    },
    /// Re-run a fixture transcript and report the first divergence.
    Replay {
        transcript: PathBuf,
        #[arg(long)]
        fixture: PathBuf,
    },
    /// Serve the control API on loopback.
    Serve {
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Relative world and oracle paths in requests resolve here.
        #[arg(long, default_value = ".")]
        base_dir: PathBuf,
        #[arg(long)]
        transcripts: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    goal: String,
    /// Fixture world JSON.
    #[arg(long, requires = "oracle", conflicts_with_all = ["url", "endpoint"])]
    fixture: Option<PathBuf>,
    /// Scripted model responses for fixture runs.
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// Start page: a url, or a fixture page id (defaults to the world's start).
    #[arg(long)]
    start: Option<String>,
    /// Alias of --start for live runs.
    #[arg(long)]
    url: Option<String>,
    /// Model endpoint; the key comes from AGENT_LLM_API_KEY.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    browser: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the JSONL transcript here.
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Record every model exchange to this oracle script.
    #[arg(long)]
    record: Option<PathBuf>,
}

fn load_config(path: Option<&PathBuf>) -> Result<AgentConfig> {
    match path {
        Some(p) => AgentConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(AgentConfig::default()),
    }
}

fn browser_url(arg: Option<String>) -> Result<String> {
    arg.or_else(|| std::env::var(ENV_BROWSER_WS).ok())
        .with_context(|| format!("no browser: pass --browser or set {ENV_BROWSER_WS}"))
}

fn http_model(endpoint: Option<String>, record: Option<PathBuf>) -> Result<Box<dyn LanguageModel>> {
    let model = match endpoint {
        Some(e) => HttpModel::with_env_credentials(e),
        None => HttpModel::from_env()?,
    };
    Ok(match record {
        Some(path) => Box::new(RecordingProxy::new(model, path)),
        None => Box::new(model),
    })
}

async fn run(args: RunArgs) -> Result<ExitCode> {
    let config = load_config(args.config.as_ref())?;
    let start = args.start.or(args.url);
    let (mut session, model, start): (Box<dyn BrowserSession>, Box<dyn LanguageModel>, String) =
        if let Some(world_path) = &args.fixture {
            let world = FixtureWorld::load(world_path)?;
            let start = start
                .or_else(|| world.start_page().map(str::to_string))
                .context("the world names no start page; pass --start")?;
            let oracle = ScriptedOracle::new(load_script(args.oracle.as_ref().expect("clap requires it"))?);
            let model: Box<dyn LanguageModel> = match args.record {
                Some(path) => Box::new(RecordingProxy::new(oracle, path)),
                None => Box::new(oracle),
            };
            (Box::new(FixtureSession::with_config(world, config.harvest.clone())), model, start)
        } else {
            let start = start.context("live runs need --url")?;
            let session = LiveSession::connect(&browser_url(args.browser)?)
                .await?
                .with_harvest_config(config.harvest.clone());
            (Box::new(session), http_model(args.endpoint, args.record)?, start)
        };

    let mut spec = TaskSpec::new("cli", args.goal, start);
    spec.transcript_path = args.transcript;
    let (runner, handle) = TaskRunner::new(spec, Agent::new(config))?;

    let driver = tokio::spawn(async move {
        let (past, mut live) = handle.events().subscribe_since(0);
        for event in past {
            eprintln!("{}", serde_json::to_string(&event).expect("event serializes"));
        }
        while let Ok(event) = live.recv().await {
            eprintln!("{}", serde_json::to_string(&event).expect("event serializes"));
            match event.kind {
                EventType::TaskComplete => break,
                EventType::QuestionPending => {
                    let questions = handle.state().pending_questions;
                    let answers = tokio::task::spawn_blocking(move || ask(&questions)).await.expect("stdin reader");
                    let result = match answers {
                        Some(answers) => handle.answer(answers).await,
                        None => handle.control(ControlCommand::Abort).await,
                    };
                    if let Err(e) = result {
                        eprintln!("answer rejected: {e}");
                    }
                }
                _ => {}
            }
        }
    });
    let transcript = runner.run(session.as_mut(), model.as_ref()).await?;
    driver.await?;

    let status = transcript.final_status().unwrap_or(TaskStatus::Failed);
    let last = transcript.final_record().expect("runs end with a final record");
    println!("{}", serde_json::to_string(last)?);
    Ok(if status == TaskStatus::Complete { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

/// One line of stdin per question; `None` on end of input.
fn ask(questions: &[String]) -> Option<Vec<String>> {
    let stdin = std::io::stdin();
    let mut lines = stdin.lock().lines();
    let mut answers = Vec::new();
    for q in questions {
        eprint!("{q}\n> ");
        answers.push(lines.next()?.ok()?);
    }
    Some(answers)
}

async fn harvest_cmd(fixture: Option<PathBuf>, url: Option<String>, browser: Option<String>) -> Result<()> {
    let snapshot = match (fixture, url) {
        (Some(path), _) => PageSnapshot::load(path)?,
        (None, Some(url)) => {
            let mut session = LiveSession::connect(&browser_url(browser)?).await?;
            session.navigate(&url).await?;
            session.snapshot().await?
        }
        (None, None) => bail!("pass --fixture or --url"),
    };
    println!("{}", serialize_elements(&harvest_with(&snapshot, &AgentConfig::default().harvest)));
    Ok(())
}

fn validate_cmd(output: PathBuf, elements: PathBuf, cursor_item: Option<usize>, strict: bool) -> Result<ExitCode> {
    let raw = std::fs::read_to_string(&output).with_context(|| format!("reading {}", output.display()))?;
    let elements = parse_elements(&std::fs::read_to_string(&elements)?).context("element map")?;
    let parsed = parse_output(&raw, strict)?;
    let cursor = match cursor_item {
        Some(item) => {
            let rec = elements.get(item).with_context(|| format!("no item {item} in the element map"))?;
            CursorState::on(item, rec.location)
        }
        None => CursorState::default(),
    };
    let report = validate_events(&parsed.event_list, &elements, &cursor);
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(if report.ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

async fn replay_cmd(transcript: PathBuf, fixture: PathBuf) -> Result<ExitCode> {
    let transcript = SessionTranscript::load(&transcript)?;
    let world = FixtureWorld::load(&fixture)?;
    match replay(&transcript, world).await {
        Ok(again) => {
            println!("no divergence: {} steps, final status {:?}", again.steps().count(), again.final_status());
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            println!("{e}");
            Ok(ExitCode::FAILURE)
        }
    }
}

async fn serve_cmd(port: u16, config: Option<PathBuf>, base_dir: PathBuf, transcripts: Option<PathBuf>) -> Result<()> {
    let mut server = ServerConfig { agent: load_config(config.as_ref())?, base_dir, ..ServerConfig::default() };
    if let Some(dir) = transcripts {
        server.transcripts_dir = dir;
    }
    let listener = tokio::net::TcpListener::bind(loopback(port)).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    serve(listener, AppState::new(server)).await?;
    Ok(())
}

#[tokio::main]
async fn main() -> Result<ExitCode> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Run(args) => run(args).await,
        Command::Harvest { fixture, url, browser } => harvest_cmd(fixture, url, browser).await.map(|_| ExitCode::SUCCESS),
        Command::Validate { output, elements, cursor_item, strict } => validate_cmd(output, elements, cursor_item, strict),
        Command::Replay { transcript, fixture } => replay_cmd(transcript, fixture).await,
        Command::Serve { port, config, base_dir, transcripts } => {
            serve_cmd(port, config, base_dir, transcripts).await.map(|_| ExitCode::SUCCESS)
        }
    }
}
