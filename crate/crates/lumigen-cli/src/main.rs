//! Operator entry point: run pipelines, sweeps, ablations, replays, reports,
//! and serve scripted mock backends.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use lumigen::backends::mock::{MockServer, MockStep, WireKind};
use lumigen::backends::{HttpChatBackend, HttpEndpoint, HttpT2iBackend};
use lumigen::eval;
use lumigen::model::{
    format2, Ablation, BackendKind, Dimension, Prompt, RunConfig, RunRecord, StopReason, Validate,
};
use lumigen::orchestrator::{self, run_id, run_pipeline, with_recording, Backends, RunPersister};

#[derive(Parser)]
#[command(name = "lumigen", version, about = "Closed-loop text-to-image refinement engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Full,
    NoIppa,
    NoIvfr,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::NoIppa => Ablation::NoIppa,
            AblationArg::NoIvfr => Ablation::NoIvfr,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Live,
    Mock,
    Sim,
}

impl From<BackendArg> for BackendKind {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Live => BackendKind::Live,
            BackendArg::Mock => BackendKind::Mock,
            BackendArg::Sim => BackendKind::Sim,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one refinement pipeline and persist the run directory.
    Run {
        /// Prompt text, or a path to a file containing the prompt.
        #[arg(long)]
        prompt: String,
        /// TOML configuration file mirroring the run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        backend: Option<BackendArg>,
        /// Parent directory for the run directory.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Seeded refinement-depth sweep over the simulator.
    Sweep {
        /// File with one prompt per line.
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, default_value = "0,1,3,5")]
        checkpoints: String,
        #[arg(long, default_value_t = 200)]
        seeds: u64,
        #[arg(long, default_value = "reports")]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Seeded ablation suite (full vs no_ippa vs no_ivfr).
    Ablate {
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, default_value_t = 200)]
        seeds: u64,
        #[arg(long, default_value = "reports")]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Re-run a persisted run from its response store and verify it.
    Replay {
        #[arg(long)]
        run: PathBuf,
    },
    /// Summarize final scores of all runs under a directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
        /// Comma-separated output formats (md, csv).
        #[arg(long, default_value = "md,csv")]
        format: String,
    },
    /// Serve a scripted mock backend over HTTP.
    ServeMock {
        #[arg(long, default_value_t = 0)]
        port: u16,
        /// JSON script: {"kind": "chat"|"t2i", "steps": [...]}.
        #[arg(long)]
        script: PathBuf,
    },
}

enum CliError {
    /// Bad flags, unreadable config, invalid invariants: exit 2.
    Config(String),
    /// The work itself failed: exit 1.
    Run(String),
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => {}
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            std::process::exit(2);
        }
        Err(CliError::Run(msg)) => {
            eprintln!("run failure: {msg}");
            std::process::exit(1);
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run { prompt, config, ablation, seed, backend, out } => {
            cmd_run(&prompt, config.as_deref(), ablation, seed, backend, &out)
        }
        Command::Sweep { prompts, checkpoints, seeds, out, config, jobs } => {
            cmd_sweep(&prompts, &checkpoints, seeds, &out, config.as_deref(), jobs)
        }
        Command::Ablate { prompts, seeds, out, config, jobs } => {
            cmd_ablate(&prompts, seeds, &out, config.as_deref(), jobs)
        }
        Command::Replay { run } => cmd_replay(&run),
        Command::Report { runs, format } => cmd_report(&runs, &format),
        Command::ServeMock { port, script } => cmd_serve_mock(port, &script),
    }
}

// ---------------------------------------------------------------------------
// Configuration loading
// ---------------------------------------------------------------------------

/// Precedence, lowest to highest: built-in defaults, config file, environment
/// overrides (endpoint URLs and bearer token only), command-line flags.
fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => {
            let raw = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            toml::from_str(&raw).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Ok(url) = std::env::var("LUMIGEN_CHAT_URL") {
        cfg.endpoints.chat_url = url;
    }
    if let Ok(url) = std::env::var("LUMIGEN_T2I_URL") {
        cfg.endpoints.t2i_url = url;
    }
    if let Ok(token) = std::env::var("LUMIGEN_BEARER_TOKEN") {
        cfg.endpoints.bearer_token = Some(token);
    }
    cfg.ensure_valid().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn build_backends(cfg: &RunConfig) -> Result<Backends, CliError> {
    match cfg.backend {
        BackendKind::Sim => Ok(eval::sim_backends(cfg)),
        BackendKind::Live | BackendKind::Mock => {
            if cfg.endpoints.chat_url.is_empty() || cfg.endpoints.t2i_url.is_empty() {
                return Err(CliError::Config(
                    "live/mock backends require chat and T2I endpoint URLs".into(),
                ));
            }
            let endpoint = |url: &str| HttpEndpoint {
                url: url.to_string(),
                bearer_token: cfg.endpoints.bearer_token.clone(),
                policy: Default::default(),
            };
            Ok(Backends {
                chat: Arc::new(HttpChatBackend { endpoint: endpoint(&cfg.endpoints.chat_url) }),
                t2i: Arc::new(HttpT2iBackend { endpoint: endpoint(&cfg.endpoints.t2i_url) }),
                scorer: None,
            })
        }
    }
}

fn read_prompt_arg(arg: &str) -> Result<Prompt, CliError> {
    let path = Path::new(arg);
    let text = if path.is_file() {
        std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{arg}: {e}")))?
            .trim()
            .to_string()
    } else {
        arg.to_string()
    };
    let p = Prompt::new("cli", text);
    p.ensure_valid().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(p)
}

fn read_prompts_file(path: &Path) -> Result<Vec<Prompt>, CliError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let prompts: Vec<Prompt> = raw
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| Prompt::new(format!("p{}", i + 1), l))
        .collect();
    if prompts.is_empty() {
        return Err(CliError::Config(format!("{}: no prompts", path.display())));
    }
    Ok(prompts)
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Run(format!("{}: {e}", path.display()));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_run(
    prompt_arg: &str,
    config: Option<&Path>,
    ablation: Option<AblationArg>,
    seed: Option<u64>,
    backend: Option<BackendArg>,
    out: &Path,
) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    if let Some(a) = ablation {
        cfg.ablation = a.into();
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(b) = backend {
        cfg.backend = b.into();
    }
    let prompt = read_prompt_arg(prompt_arg)?;
    let backends = build_backends(&cfg)?;
    let dir = out.join(run_id(&cfg, &prompt));
    let persister = RunPersister::create(&dir)
        .map_err(|e| CliError::Run(format!("{}: {e}", dir.display())))?;
    let recorded = with_recording(&backends, Arc::clone(&persister.store));
    let record = run_pipeline(&prompt, &cfg, &recorded, Some(&persister))
        .map_err(|e| CliError::Run(e.to_string()))?;
    println!(
        "run {} finished: {} iteration(s), stop reason {:?}",
        dir.display(),
        record.traces.len(),
        record.stop_reason
    );
    if record.stop_reason == StopReason::BackendFailure {
        return Err(CliError::Run(record.failure.unwrap_or_default()));
    }
    Ok(())
}

fn parse_checkpoints(arg: &str) -> Result<Vec<u32>, CliError> {
    let cs: Result<Vec<u32>, _> = arg.split(',').map(|s| s.trim().parse::<u32>()).collect();
    let cs = cs.map_err(|e| CliError::Config(format!("bad checkpoints '{arg}': {e}")))?;
    if cs.is_empty() {
        return Err(CliError::Config("checkpoints must be non-empty".into()));
    }
    Ok(cs)
}

/// Split `0..seeds` into `jobs` contiguous chunks.
fn seed_chunks(seeds: u64, jobs: usize) -> Vec<std::ops::Range<u64>> {
    let jobs = jobs.max(1).min(seeds.max(1) as usize) as u64;
    let base = seeds / jobs;
    let extra = seeds % jobs;
    let mut start = 0;
    (0..jobs)
        .map(|i| {
            let len = base + u64::from(i < extra);
            let range = start..start + len;
            start += len;
            range
        })
        .collect()
}

fn cmd_sweep(
    prompts_path: &Path,
    checkpoints_arg: &str,
    seeds: u64,
    out: &Path,
    config: Option<&Path>,
    jobs: usize,
) -> Result<(), CliError> {
    let prompts = read_prompts_file(prompts_path)?;
    let checkpoints = parse_checkpoints(checkpoints_arg)?;
    let base = match config {
        Some(_) => load_config(config)?,
        None => eval::sweep_run_config(),
    };
    let parts: Result<Vec<_>, _> = std::thread::scope(|scope| {
        let handles: Vec<_> = seed_chunks(seeds, jobs)
            .into_iter()
            .map(|range| {
                let (prompts, checkpoints, base) = (&prompts, &checkpoints, &base);
                scope.spawn(move || eval::run_sweep(prompts, checkpoints, range, base))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker")).collect()
    });
    let parts = parts.map_err(|e| CliError::Run(e.to_string()))?;
    let report =
        eval::merge_sweep_reports(parts).ok_or_else(|| CliError::Run("empty sweep".into()))?;
    let (md, csv) = eval::render_sweep_report(&report);
    let digest = eval::config_digest(&base);
    atomic_write(&out.join(format!("sweep-{digest}.md")), md.as_bytes())?;
    atomic_write(&out.join(format!("sweep-{digest}.csv")), csv.as_bytes())?;
    print!("{md}");
    Ok(())
}

fn cmd_ablate(
    prompts_path: &Path,
    seeds: u64,
    out: &Path,
    config: Option<&Path>,
    jobs: usize,
) -> Result<(), CliError> {
    let prompts = read_prompts_file(prompts_path)?;
    let base = match config {
        Some(_) => load_config(config)?,
        None => eval::ablation_run_config(),
    };
    let parts: Result<Vec<_>, _> = std::thread::scope(|scope| {
        let handles: Vec<_> = seed_chunks(seeds, jobs)
            .into_iter()
            .map(|range| {
                let (prompts, base) = (&prompts, &base);
                scope.spawn(move || eval::run_ablation_suite(prompts, range, base))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("ablation worker")).collect()
    });
    let parts = parts.map_err(|e| CliError::Run(e.to_string()))?;
    let report = eval::merge_ablation_reports(parts)
        .ok_or_else(|| CliError::Run("empty ablation suite".into()))?;
    let (md, csv) = eval::render_ablation_report(&report);
    let digest = eval::config_digest(&base);
    atomic_write(&out.join(format!("ablation-{digest}.md")), md.as_bytes())?;
    atomic_write(&out.join(format!("ablation-{digest}.csv")), csv.as_bytes())?;
    print!("{md}");
    Ok(())
}

fn cmd_replay(run: &Path) -> Result<(), CliError> {
    match orchestrator::replay(run, None) {
        Ok(record) => {
            println!(
                "replay OK: {} iteration(s) reproduced byte-identically",
                record.traces.len()
            );
            Ok(())
        }
        Err(e) => Err(CliError::Run(e.to_string())),
    }
}

fn cmd_report(runs: &Path, format: &str) -> Result<(), CliError> {
    let formats: Vec<&str> = format.split(',').map(str::trim).collect();
    for f in &formats {
        if !matches!(*f, "md" | "csv") {
            return Err(CliError::Config(format!("unknown format '{f}'")));
        }
    }
    let mut rows: Vec<(String, [f64; 9], f64)> = Vec::new();
    let entries = std::fs::read_dir(runs)
        .map_err(|e| CliError::Run(format!("{}: {e}", runs.display())))?;
    let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok()).map(|e| e.path()).collect();
    dirs.sort();
    for dir in dirs {
        let record_path = dir.join("record.json");
        if !record_path.is_file() {
            continue;
        }
        let raw = std::fs::read_to_string(&record_path)
            .map_err(|e| CliError::Run(format!("{}: {e}", record_path.display())))?;
        let record: RunRecord = serde_json::from_str(&raw)
            .map_err(|e| CliError::Run(format!("{}: {e}", record_path.display())))?;
        let scores = record
            .traces
            .last()
            .and_then(|t| t.scores.as_ref())
            .or(record.initial_scores.as_ref())
            .and_then(|s| s.as_array());
        let name = dir.file_name().unwrap_or_default().to_string_lossy().to_string();
        match scores {
            Some(means) => {
                let avg = means.iter().sum::<f64>() / 9.0;
                rows.push((name, means, avg));
            }
            None => eprintln!("note: run {name} has no scores, skipped"),
        }
    }
    if rows.is_empty() {
        return Err(CliError::Run(format!("no scored runs under {}", runs.display())));
    }
    let header: Vec<&str> = Dimension::ALL.iter().map(|d| d.name()).collect();
    let mut md = String::from("## Run report\n\n");
    md.push_str(&format!("| Run | {} | Avg |\n", header.join(" | ")));
    md.push_str(&format!("|---|{}\n", "---|".repeat(10)));
    let mut csv = format!("run,{},avg\n", header.join(",").to_lowercase());
    for (name, means, avg) in &rows {
        let cells: Vec<String> = means.iter().chain([avg]).map(|v| format2(*v)).collect();
        md.push_str(&format!("| {name} | {} |\n", cells.join(" | ")));
        csv.push_str(&format!("{name},{}\n", cells.join(",")));
    }
    if formats.contains(&"md") {
        atomic_write(&runs.join("report.md"), md.as_bytes())?;
        print!("{md}");
    }
    if formats.contains(&"csv") {
        atomic_write(&runs.join("report.csv"), csv.as_bytes())?;
    }
    Ok(())
}

#[derive(serde::Deserialize)]
struct MockScript {
    kind: String,
    #[serde(default)]
    steps: Vec<MockScriptStep>,
}

#[derive(serde::Deserialize)]
#[serde(untagged)]
enum MockScriptStep {
    Respond { status: u16, body: String },
    Drop {
        #[allow(dead_code)]
        drop: bool,
    },
}

fn cmd_serve_mock(port: u16, script_path: &Path) -> Result<(), CliError> {
    let raw = std::fs::read_to_string(script_path)
        .map_err(|e| CliError::Config(format!("{}: {e}", script_path.display())))?;
    let script: MockScript = serde_json::from_str(&raw)
        .map_err(|e| CliError::Config(format!("{}: {e}", script_path.display())))?;
    let kind = match script.kind.as_str() {
        "chat" => WireKind::Chat,
        "t2i" => WireKind::T2i,
        other => return Err(CliError::Config(format!("unknown mock kind '{other}'"))),
    };
    let steps = script
        .steps
        .into_iter()
        .map(|s| match s {
            MockScriptStep::Respond { status, body } => MockStep::Respond { status, body },
            MockScriptStep::Drop { .. } => MockStep::DropConnection,
        })
        .collect();
    let server = MockServer::start_on(&format!("127.0.0.1:{port}"), kind, steps);
    println!("mock {} server listening on {}", script.kind, server.url());
    loop {
        std::thread::park();
    }
}
