//! `mms`: compose, inspect and play multimedia messages, talk to a relay,
//! run one, and drive scripted or load-test sessions against it.
//!
//! Exit codes: 0 success, 1 usage, 2 parse or validation, 3 network,
//! 4 protocol (unexpected status, failed expectation, broken invariant).

mod play;

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use mms_core::composer::{Composer, ExportOptions, Manifest};
use mms_core::layout::{fit, DeviceProfile};
use mms_core::mime::{decapsulate, encapsulate, resolve_media, MmsEnvelope};
use mms_core::net::{NetClient, NetError, Tracer};
use mms_core::relay::ServerConfig;
use mms_core::scheduler::build_plan;
use mms_core::server::{self, SystemClock};
use mms_core::sim::{bench, run_scenario, run_scenario_tcp, BenchConfig, BenchError, BenchMode, CommandMix, ScenarioError, ScenarioScript};
use mms_core::smil::{validate, SmilTree};
use mms_core::syntax::{parse_str_with, serialize, ParseOptions};
use mms_core::transport::{ClientSession, DEFAULT_PORT};

#[derive(Debug, Parser)]
#[command(name = "mms", version, about = "Multimedia messaging client, relay and test driver")]
struct Cli {
    /// Print every frame sent or received on standard error.
    #[arg(long, global = true)]
    trace: bool,
    /// More logging (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Build a .mms message from a slide manifest.
    Compose {
        manifest: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Parse and validate a .smil or .mms file, listing every problem.
    Lint {
        file: PathBuf,
        /// Skip unknown elements with a warning instead of failing.
        #[arg(long)]
        lenient: bool,
    },
    /// Fit a presentation's layout to a device screen.
    Adapt {
        file: PathBuf,
        /// Built-in profile name or a profile JSON file.
        #[arg(long)]
        device: String,
        /// Defaults to standard output (SMIL text only).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Write the render plan (timeline events) as JSON.
    Plan {
        file: PathBuf,
        #[arg(long)]
        device: Option<String>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Step through playback. Inputs are play, pause, stop, rewind, next,
    /// `+MS` to let time pass, and quit; read from standard input unless
    /// `--inputs` is given.
    Play {
        file: PathBuf,
        #[arg(long)]
        device: Option<String>,
        /// Comma-separated inputs, e.g. `play,+1500,next,pause`.
        #[arg(long)]
        inputs: Option<String>,
    },
    /// Register and send one message.
    Send {
        #[command(flatten)]
        server: ServerArg,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        file: PathBuf,
    },
    /// Register, collect waiting messages and list them.
    Inbox {
        #[command(flatten)]
        server: ServerArg,
        #[arg(long)]
        id: String,
        /// How long the connection must stay quiet before the inbox is
        /// considered drained.
        #[arg(long, default_value_t = 300)]
        wait_ms: u64,
        /// Save each message as `<dir>/<message id>.mms`.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Query a running relay's counters.
    Stats {
        #[command(flatten)]
        server: ServerArg,
        #[arg(long, default_value = "monitor")]
        id: String,
    },
    /// Run the relay server.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the port from the config file.
        #[arg(long)]
        port: Option<u16>,
    },
    /// Load test: N clients issuing M commands each.
    Bench {
        #[arg(long, default_value_t = 7)]
        clients: usize,
        #[arg(long, default_value_t = 100)]
        messages: usize,
        /// sim or tcp-loopback
        #[arg(long, default_value = "sim")]
        mode: BenchMode,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Command mix as SEND,DELETE,FORWARD weights.
        #[arg(long, default_value = "80,10,10")]
        mix: String,
    },
    /// Run a scenario script and print its report.
    Scenario {
        script: PathBuf,
        /// Replay over a loopback TCP relay instead of the simulated network.
        #[arg(long)]
        tcp: bool,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ServerArg {
    /// Relay address; MMS_SERVER is used when the flag is absent.
    #[arg(long, env = "MMS_SERVER", default_value_t = format!("127.0.0.1:{DEFAULT_PORT}"))]
    server: String,
    #[arg(long, default_value_t = 5000)]
    timeout_ms: u64,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(m: impl ToString) -> Self {
        Failure { code: 1, message: m.to_string() }
    }
    fn parse(m: impl ToString) -> Self {
        Failure { code: 2, message: m.to_string() }
    }
    fn network(m: impl ToString) -> Self {
        Failure { code: 3, message: m.to_string() }
    }
    fn protocol(m: impl ToString) -> Self {
        Failure { code: 4, message: m.to_string() }
    }
}

impl From<NetError> for Failure {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Io(_) => Failure::network(e),
            _ => Failure::protocol(e),
        }
    }
}

type Res<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let tracer = cli.trace.then(Tracer::stderr);
    match run(cli.command, tracer) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("mms: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Cmd, tracer: Option<Tracer>) -> Res {
    match command {
        Cmd::Compose { manifest, output } => compose(&manifest, &output),
        Cmd::Lint { file, lenient } => lint(&file, lenient),
        Cmd::Adapt { file, device, output } => adapt(&file, &device, output.as_deref()),
        Cmd::Plan { file, device, output } => {
            let tree = fitted(&file, device.as_deref())?;
            let plan = build_plan(&tree).map_err(Failure::parse)?;
            emit(output.as_deref(), plan.to_json_trace().as_bytes())
        }
        Cmd::Play { file, device, inputs } => {
            let tree = fitted(&file, device.as_deref())?;
            let plan = build_plan(&tree).map_err(Failure::parse)?;
            let stdout = io::stdout();
            let mut out = stdout.lock();
            let result = match inputs {
                Some(list) => play::run(&tree, &plan, list.split(',').map(|s| s.to_string()), &mut out),
                None => play::run(&tree, &plan, io::stdin().lock().lines().map_while(Result::ok), &mut out),
            };
            result.map_err(Failure::usage)
        }
        Cmd::Send { server, from, to, file } => {
            let bytes = read(&file)?;
            decapsulate(&bytes).map_err(|e| Failure::parse(format!("{}: {e}", file.display())))?;
            let mut client = connect(&server, &from, tracer)?;
            let (code, id) = client.send(bytes, &to)?;
            client.close()?;
            println!("{code} {id}");
            if code.is_accepted() {
                Ok(())
            } else {
                Err(Failure::protocol(format!("relay answered {code}")))
            }
        }
        Cmd::Inbox { server, id, wait_ms, save } => inbox(&server, &id, wait_ms, save.as_deref(), tracer),
        Cmd::Stats { server, id } => {
            let mut client = connect(&server, &id, tracer)?;
            let stats = client.stats()?;
            client.close()?;
            println!("{}", serde_json::to_string_pretty(&stats).expect("json value"));
            Ok(())
        }
        Cmd::Serve { config, port } => serve(config.as_deref(), port),
        Cmd::Bench { clients, messages, mode, seed, mix } => {
            let config = BenchConfig { clients, messages, mode, seed, mix: parse_mix(&mix)?, ..Default::default() };
            let report = bench(&config).map_err(|e| match e {
                BenchError::Config(_) => Failure::usage(e),
                BenchError::Net(_) | BenchError::Server(_) => Failure::network(e),
                _ => Failure::protocol(e),
            })?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(())
        }
        Cmd::Scenario { script, tcp, output } => {
            let s = ScenarioScript::load(&script).map_err(scenario_failure)?;
            let report = if tcp { run_scenario_tcp(&s, Duration::from_millis(50)) } else { run_scenario(&s, s.net) }
                .map_err(scenario_failure)?;
            let mut json = report.to_json();
            json.push('\n');
            emit(output.as_deref(), json.as_bytes())
        }
    }
}

fn read(path: &Path) -> Res<Vec<u8>> {
    fs::read(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn emit(output: Option<&Path>, bytes: &[u8]) -> Res {
    match output {
        Some(path) => fs::write(path, bytes).map_err(|e| Failure::usage(format!("{}: {e}", path.display()))),
        None => io::stdout().write_all(bytes).map_err(Failure::usage),
    }
}

fn is_mms(path: &Path, bytes: &[u8]) -> bool {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("mms") => true,
        Some(e) if e.eq_ignore_ascii_case("smil") => false,
        _ => !bytes.trim_ascii_start().starts_with(b"<"),
    }
}

struct Loaded {
    tree: SmilTree,
    envelope: Option<MmsEnvelope>,
    warnings: Vec<String>,
}

fn load(path: &Path, lenient: bool) -> Res<Loaded> {
    let bytes = read(path)?;
    let name = path.display();
    let (text, envelope) = if is_mms(path, &bytes) {
        let env = decapsulate(&bytes).map_err(|e| Failure::parse(format!("{name}: {e}")))?;
        let text = env.smil_text().ok_or_else(|| Failure::parse(format!("{name}: no SMIL part")))?.to_string();
        (text, Some(env))
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Failure::parse(format!("{name}: not UTF-8")))?;
        (text, None)
    };
    let parsed = parse_str_with(&text, ParseOptions { lenient }).map_err(|e| Failure::parse(format!("{name}:{e}")))?;
    let warnings = parsed.warnings.iter().map(|w| format!("{name}:{w}")).collect();
    Ok(Loaded { tree: parsed.tree, envelope, warnings })
}

fn device(arg: Option<&str>) -> Res<DeviceProfile> {
    let Some(arg) = arg else { return Ok(DeviceProfile::default_profile()) };
    let path = Path::new(arg);
    if path.exists() {
        DeviceProfile::load(path).map_err(|e| Failure::parse(format!("{arg}: {e}")))
    } else {
        DeviceProfile::builtin(arg).map_err(Failure::usage)
    }
}

fn fitted(path: &Path, device_arg: Option<&str>) -> Res<SmilTree> {
    let loaded = load(path, false)?;
    Ok(fit(&loaded.tree, &device(device_arg)?))
}

fn compose(manifest_path: &Path, output: &Path) -> Res {
    let manifest = Manifest::load(manifest_path).map_err(Failure::parse)?;
    let bytes = Composer::for_manifest_file(manifest_path)
        .export_with(&manifest, &ExportOptions::now())
        .map_err(Failure::parse)?;
    fs::write(output, &bytes).map_err(|e| Failure::usage(format!("{}: {e}", output.display())))?;
    println!("{} ({} bytes, {} slide(s))", output.display(), bytes.len(), manifest.slides.len());
    Ok(())
}

fn lint(path: &Path, lenient: bool) -> Res {
    let loaded = load(path, lenient)?;
    for w in &loaded.warnings {
        println!("warning: {w}");
    }
    let mut problems: Vec<String> = validate(&loaded.tree).iter().map(|v| v.to_string()).collect();
    if let Some(env) = &loaded.envelope {
        problems.extend(resolve_media(env, &loaded.tree).unbound.iter().map(|v| v.to_string()));
    }
    for p in &problems {
        println!("{}: {p}", path.display());
    }
    if problems.is_empty() {
        println!("{}: ok ({} par(s))", path.display(), loaded.tree.pars.len());
        Ok(())
    } else {
        Err(Failure::parse(format!("{} problem(s)", problems.len())))
    }
}

fn adapt(path: &Path, device_arg: &str, output: Option<&Path>) -> Res {
    let loaded = load(path, false)?;
    let tree = fit(&loaded.tree, &device(Some(device_arg))?);
    let smil = serialize(&tree).map_err(Failure::parse)?;
    let wants_mms = output.is_some_and(|o| o.extension().is_some_and(|e| e.eq_ignore_ascii_case("mms")));
    match (loaded.envelope, wants_mms) {
        (Some(mut env), true) => {
            let at = env.parts.iter().position(|p| p.content_id == env.start_id).ok_or_else(|| Failure::parse("no start part"))?;
            env.parts[at].body = smil.into_bytes();
            env.boundary.clear();
            emit(output, &encapsulate(&env).map_err(Failure::parse)?)
        }
        (None, true) => Err(Failure::usage("a .mms output needs a .mms input")),
        _ => emit(output, smil.as_bytes()),
    }
}

fn connect(server: &ServerArg, id: &str, tracer: Option<Tracer>) -> Res<NetClient> {
    let timeout = Duration::from_millis(server.timeout_ms);
    let mut client = NetClient::connect(&server.server, ClientSession::new(id, "cli"), timeout)
        .map_err(|e| Failure::network(format!("{}: {e}", server.server)))?
        .with_tracer(tracer);
    let code = client.register()?;
    if code.is_accepted() {
        Ok(client)
    } else {
        Err(Failure::protocol(format!("registration answered {code}")))
    }
}

fn inbox(server: &ServerArg, id: &str, wait_ms: u64, save: Option<&Path>, tracer: Option<Tracer>) -> Res {
    let mut client = connect(server, id, tracer)?;
    let messages = client.drain_inbox(Duration::from_millis(wait_ms))?;
    client.close()?;
    if let Some(dir) = save {
        fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))?;
    }
    for m in &messages {
        let message_id = m.message_id().unwrap_or("-");
        let from = m.header("From").unwrap_or("-");
        let body = m.body.as_deref().unwrap_or_default();
        let subject = decapsulate(body).ok().and_then(|e| e.header("Subject").map(str::to_string)).unwrap_or_default();
        println!("{message_id}\t{from}\t{} bytes\t{subject}", body.len());
        if let Some(dir) = save {
            let name: String = message_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '@' { c } else { '_' }).collect();
            let path = dir.join(format!("{name}.mms"));
            fs::write(&path, body).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        }
    }
    if messages.is_empty() {
        println!("no messages");
    }
    Ok(())
}

fn serve(config: Option<&Path>, port: Option<u16>) -> Res {
    let mut config = match config {
        Some(path) => ServerConfig::load(path).map_err(Failure::parse)?,
        None => ServerConfig::default(),
    };
    if let Some(p) = port {
        config.port = p;
    }
    let handle = server::spawn(&config, Arc::new(SystemClock)).map_err(Failure::network)?;
    println!("listening on {}", handle.local_addr());
    let _ = io::stdout().flush();
    handle.join();
    Ok(())
}

fn parse_mix(text: &str) -> Res<CommandMix> {
    let parts: Vec<u32> = text
        .split(',')
        .map(|p| p.trim().parse::<u32>())
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::usage(format!("--mix {text:?}: {e}")))?;
    match parts[..] {
        [send, delete, forward] => Ok(CommandMix { send, delete, forward }),
        _ => Err(Failure::usage(format!("--mix wants three weights, got {text:?}"))),
    }
}

fn scenario_failure(e: ScenarioError) -> Failure {
    match e {
        ScenarioError::Script(_) | ScenarioError::Compose(_) => Failure::parse(e),
        ScenarioError::Server(_) => Failure::network(e),
        ScenarioError::Net(n) => n.into(),
        ScenarioError::Expectation { .. } => Failure::protocol(e),
    }
}
