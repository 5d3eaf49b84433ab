use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use scope_client::{http_backends, http_descriptors, EventStream, SessionControl};
use scope_core::backends::scene::{generate_synthetic_scene, SceneParams};
use scope_core::config::ScopeConfig;
use scope_core::mask::{write_mask_dir, Mask};
use scope_core::metrics::{self, eval_report, FramePair, ReportRow};
use scope_core::session::{
    mock_backends, mock_session_header, read_script, render_pgm, replay, run_scripted_session, ClientCommand,
    CommandEnvelope, FrameSource, LogHeader, SceneManifest, Session, SessionLog, SCENE_MANIFEST,
};
use scope_server::{AppState, Clock, LiveSession};

#[derive(Parser)]
#[command(name = "scope", version, about = "Speech-guided perception sessions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scripted session over a frame directory.
    Run(RunArgs),
    /// Re-run a logged session against mocks and compare hashes.
    Replay {
        #[arg(long)]
        log: PathBuf,
    },
    /// Score predicted mask sequences against truth and render a report.
    Eval(EvalArgs),
    /// Serve the backend protocol and a live session.
    Serve(ServeArgs),
    /// Write a synthetic frame directory with truth masks.
    Synth(SynthArgs),
    /// Send one command to a live session.
    Say(SayArgs),
    /// Print the live event stream as JSON lines.
    Watch {
        #[arg(long)]
        server: String,
        /// Resume after this sequence number instead of starting from a snapshot.
        #[arg(long)]
        since: Option<u64>,
        /// Stop after this many messages.
        #[arg(long)]
        limit: Option<usize>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    frames: PathBuf,
    /// JSONL, one `{"frame": N, "utterance": "..."}` per line.
    #[arg(long)]
    script: PathBuf,
    /// `mock`, or the base URL of a backend server.
    #[arg(long, default_value = "mock")]
    backends: String,
    /// Overrides the seed in the frame directory's scene.json.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write each tracked object's masks to DIR/<label>/.
    #[arg(long)]
    masks_out: Option<PathBuf>,
    #[arg(long, default_value_t = 5000)]
    timeout_ms: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Segmentation,
    Propagation,
}

#[derive(Args)]
struct EvalArgs {
    /// Prediction directory; repeat for several rows.
    #[arg(long, required = true)]
    pred: Vec<PathBuf>,
    /// Truth directory, one per `--pred`.
    #[arg(long, required = true)]
    gt: Vec<PathBuf>,
    #[arg(long)]
    label: Vec<String>,
    #[arg(long)]
    method: Vec<String>,
    #[arg(long, value_enum, default_value = "propagation")]
    task: Task,
    /// `.json` writes the JSON report, anything else the text tables.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Synthetic scene length.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    /// Frames advance only on `POST /v1/session/advance`.
    #[arg(long)]
    manual: bool,
    /// Serve the backend protocol without a live session.
    #[arg(long)]
    backends_only: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    instruments: Option<usize>,
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
}

#[derive(Args)]
struct SayArgs {
    #[arg(long)]
    server: String,
    #[arg(long)]
    id: Option<String>,
    /// Pick a candidate from the current page (1-based).
    #[arg(long, conflicts_with_all = ["stop", "text"])]
    select: Option<usize>,
    #[arg(long, conflicts_with = "text")]
    stop: bool,
    text: Vec<String>,
}

fn load_config(path: Option<&Path>) -> Result<ScopeConfig> {
    match path {
        Some(p) => ScopeConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(ScopeConfig::default()),
    }
}

fn read_manifest(dir: &Path) -> Result<Option<SceneManifest>> {
    let path = dir.join(SCENE_MANIFEST);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?))
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let config = load_config(args.config.as_deref())?;
    let frames = FrameSource::from_dir(&args.frames)?;
    let manifest = read_manifest(&args.frames)?;
    let script = read_script(&args.script).with_context(|| format!("reading {}", args.script.display()))?;

    let (header, backends) = if args.backends == "mock" {
        let manifest = manifest.ok_or_else(|| {
            anyhow!("mock backends need {SCENE_MANIFEST} in {} (see `scope synth`)", args.frames.display())
        })?;
        let seed = args.seed.unwrap_or(manifest.seed);
        let truth = generate_synthetic_scene(seed, &manifest.scene)?;
        let expected = FrameSource::synthetic(&truth);
        if (expected.count, expected.width, expected.height) != (frames.count, frames.width, frames.height) {
            bail!(
                "{} holds {} frames of {}x{} but the scene describes {} of {}x{}",
                args.frames.display(),
                frames.count,
                frames.width,
                frames.height,
                expected.count,
                expected.width,
                expected.height
            );
        }
        let header = LogHeader::mock(seed, manifest.scene, frames, config, script);
        let (_, backends) = mock_backends(&header)?;
        (header, backends)
    } else {
        let timeout = Duration::from_millis(args.timeout_ms);
        let header = LogHeader {
            format: 1,
            seed: args.seed.or(manifest.as_ref().map(|m| m.seed)).unwrap_or(0),
            scene: manifest.map(|m| m.scene),
            frames,
            config,
            backends: http_descriptors(&args.backends, timeout)?,
            script,
        };
        (header, http_backends(&args.backends, timeout)?)
    };

    let out = run_scripted_session(header, backends, Some(&args.log))?;
    if let Some(dir) = &args.masks_out {
        for object in &out.objects {
            let name = object.label.clone().unwrap_or_else(|| format!("object-{}", object.id));
            let masks: Vec<(usize, Mask)> = object.sequence().map(|(i, m)| (i, m.clone())).collect();
            write_mask_dir(&dir.join(name), &masks)?;
        }
    }
    let snapshot = out.log.snapshot();
    println!("events {}", out.log.len());
    println!("event_hash {}", out.log.event_hash());
    println!("state_hash {}", snapshot.state_hash());
    println!("agent {:?}", out.agent.module);
    println!("clicks {}", snapshot.clicks);
    for object in &out.objects {
        println!(
            "object {} {} frames {}..{}",
            object.id,
            object.label.as_deref().unwrap_or("-"),
            object.start,
            object.start + object.masks.len()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn replay_log(path: &Path) -> Result<ExitCode> {
    let log = SessionLog::read(path).with_context(|| format!("reading {}", path.display()))?;
    let report = replay(&log)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if report.matches() {
        println!("replay matches");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("replay differs");
        Ok(ExitCode::from(1))
    }
}

fn eval(args: EvalArgs) -> Result<ExitCode> {
    if args.pred.len() != args.gt.len() {
        bail!("got {} --pred and {} --gt directories", args.pred.len(), args.gt.len());
    }
    let name = |names: &[String], i: usize, default: &Path| {
        names.get(i).cloned().unwrap_or_else(|| {
            default.file_name().map_or_else(|| format!("row-{i}"), |n| n.to_string_lossy().into_owned())
        })
    };
    let mut rows = Vec::new();
    for (i, (pred, gt)) in args.pred.iter().zip(&args.gt).enumerate() {
        let label = name(&args.label, i, gt);
        let method = args.method.get(i).or(args.method.last()).cloned().unwrap_or_else(|| "scope".into());
        let seq = metrics::load_sequence(pred, gt)?;
        let pairs: Vec<FramePair<'_>> = seq.iter().map(|(p, g)| FramePair::new(p, g)).collect::<Result<_, _>>()?;
        rows.push(match args.task {
            Task::Propagation => ReportRow::propagation(label, method, &metrics::sequence_means(&pairs)?),
            Task::Segmentation => {
                let first = pairs[0];
                let asd = match metrics::asd(first) {
                    Ok(d) => Some(d),
                    Err(metrics::MetricError::Undefined(_)) => None,
                    Err(e) => return Err(e.into()),
                };
                ReportRow::segmentation(label, method, metrics::dice(first)?, asd, &[])
            }
        });
    }
    let report = eval_report(rows);
    let text = report.render_text();
    print!("{text}");
    if let Some(out) = &args.out {
        let body = if out.extension().is_some_and(|e| e == "json") { report.to_json() + "\n" } else { text };
        fs::write(out, body).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn serve(args: ServeArgs) -> Result<ExitCode> {
    let config = load_config(args.config.as_deref())?;
    let mut params = SceneParams::default();
    if let Some(n) = args.frames {
        params.frames = n;
        params.contacts.retain(|c| c.end < n);
    }
    let (header, _, backends) = mock_session_header(args.seed, params, config, None, Vec::new())?;
    let live = if args.backends_only {
        None
    } else {
        let clock = if args.manual {
            Clock::Manual
        } else {
            if !(args.fps > 0.0 && args.fps.is_finite()) {
                bail!("--fps must be positive");
            }
            Clock::Realtime(Duration::from_secs_f64(1.0 / args.fps))
        };
        let session = Session::new(header.config.clone(), header.frames.clone(), backends.clone())?;
        Some(LiveSession::start(session, clock, header.config.session.event_buffer))
    };
    let state = AppState {
        backends: Some(backends),
        live,
    };
    let addr: SocketAddr = format!("{}:{}", args.host, args.port).parse().context("listen address")?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        println!("listening on http://{}", listener.local_addr()?);
        scope_server::serve(listener, state).await
    })?;
    Ok(ExitCode::SUCCESS)
}

fn synth(args: SynthArgs) -> Result<ExitCode> {
    let mut scene = SceneParams::default();
    if let Some(n) = args.frames {
        scene.frames = n;
        scene.contacts.retain(|c| c.end < n);
    }
    if let Some(n) = args.instruments {
        scene.instruments = n;
    }
    if let Some(w) = args.width {
        scene.width = w;
    }
    if let Some(h) = args.height {
        scene.height = h;
    }
    let truth = generate_synthetic_scene(args.seed, &scene)?;
    fs::create_dir_all(&args.out)?;
    for i in 0..truth.frame_count() {
        fs::write(args.out.join(format!("frame_{i:06}.pgm")), render_pgm(&truth, i))?;
    }
    let manifest = SceneManifest {
        seed: args.seed,
        scene,
    };
    fs::write(args.out.join(SCENE_MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    let gt = args.out.join("gt");
    let anatomy: Vec<(usize, Mask)> = truth.frames.iter().enumerate().map(|(i, f)| (i, f.anatomy.clone())).collect();
    write_mask_dir(&gt.join("anatomy"), &anatomy)?;
    for k in 0..manifest.scene.instruments {
        let masks: Vec<(usize, Mask)> =
            truth.frames.iter().enumerate().map(|(i, f)| (i, f.instruments[k].mask.clone())).collect();
        write_mask_dir(&gt.join(format!("instrument-{}", k + 1)), &masks)?;
    }
    println!("wrote {} frames to {}", truth.frame_count(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn say(args: SayArgs) -> Result<ExitCode> {
    let command = if let Some(n) = args.select {
        ClientCommand::Select(n)
    } else if args.stop {
        ClientCommand::Stop {}
    } else if args.text.is_empty() {
        bail!("nothing to say: give text, --select N or --stop");
    } else {
        ClientCommand::Utterance(args.text.join(" "))
    };
    let control = SessionControl::new(&args.server)?;
    let ack = control.command(&CommandEnvelope { id: args.id, command })?;
    println!("{}", serde_json::to_string(&ack)?);
    Ok(ExitCode::SUCCESS)
}

fn watch(server: &str, since: Option<u64>, limit: Option<usize>) -> Result<ExitCode> {
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    rt.block_on(async {
        let mut stream = EventStream::connect(server, since).await?;
        let mut seen = 0usize;
        while limit.is_none_or(|l| seen < l) {
            let Some(msg) = stream.next().await else { break };
            println!("{}", serde_json::to_string(&msg?)?);
            seen += 1;
        }
        stream.close().await;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Replay { log } => replay_log(&log),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
        Command::Synth(a) => synth(a),
        Command::Say(a) => say(a),
        Command::Watch { server, since, limit } => watch(&server, since, limit),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(2)
    })
}
