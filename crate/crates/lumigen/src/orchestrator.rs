//! The closed refinement loop: augment, generate, critique, translate,
//! refine, with stopping rules, trace persistence and deterministic replay.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::backends::{
    request_digest, sha256_hex, BackendError, ChatBackend, ChatRequest, ChatResponse, T2IRequest,
    T2IResponse, T2iBackend,
};
use crate::critic;
use crate::ippa::{self, PipelineError};
use crate::model::{
    canonical_json, average_score, Critique, DimensionScores, ImageArtifact, Prompt, RunConfig,
    RunRecord, StopReason, Validate,
};
use crate::refine;
use crate::translator;

/// Best-effort per-image scoring (the simulator observes its latent state;
/// live runs may have no scorer at all).
pub trait Scorer: Send + Sync {
    fn score(&self, img: &ImageArtifact) -> Option<DimensionScores>;
}

/// The backend bundle one run talks to.
#[derive(Clone)]
pub struct Backends {
    pub chat: Arc<dyn ChatBackend>,
    pub t2i: Arc<dyn T2iBackend>,
    pub scorer: Option<Arc<dyn Scorer>>,
}

/// Stable run identifier: digest of the configuration and prompt.
pub fn run_id(cfg: &RunConfig, p: &Prompt) -> String {
    request_digest(&(cfg, p))[..16].to_string()
}

// ---------------------------------------------------------------------------
// Stopping rules
// ---------------------------------------------------------------------------

/// True when the last `patience` consecutive mean-score improvements are each
/// below `epsilon`. Only meaningful when scores exist for every entry.
pub fn plateau_reached(mean_history: &[f64], cfg: &RunConfig) -> bool {
    let patience = cfg.plateau_patience as usize;
    if patience == 0 || mean_history.len() < patience + 1 {
        return false;
    }
    mean_history
        .windows(2)
        .map(|w| w[1] - w[0])
        .collect::<Vec<_>>()
        .iter()
        .rev()
        .take(patience)
        .all(|imp| *imp < cfg.plateau_epsilon)
}

/// Canonical stopping decision for iteration `k`, checked in priority order:
/// iteration budget, satisfaction, plateau.
pub fn should_stop(
    k: u32,
    critique: &Critique,
    mean_history: &[f64],
    cfg: &RunConfig,
) -> Option<StopReason> {
    if k >= cfg.effective_max_iterations() {
        return Some(StopReason::MaxIterations);
    }
    if critic::is_satisfied(critique, cfg) {
        return Some(StopReason::Satisfied);
    }
    if plateau_reached(mean_history, cfg) {
        return Some(StopReason::Plateau);
    }
    None
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Content-addressed response store: one JSON file per request digest, body
/// digest alongside for tamper detection.
pub struct ResponseStore {
    dir: PathBuf,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct StoredResponse {
    request_digest: String,
    body: String,
    body_sha256: String,
}

impl ResponseStore {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(ResponseStore { dir })
    }

    fn path(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    pub fn put(&self, digest: &str, body: &str) -> std::io::Result<()> {
        let entry = StoredResponse {
            request_digest: digest.to_string(),
            body: body.to_string(),
            body_sha256: sha256_hex(body.as_bytes()),
        };
        atomic_write(&self.path(digest), canonical_json(&entry).as_bytes())
    }

    pub fn get(&self, digest: &str) -> Result<String, BackendError> {
        let path = self.path(digest);
        let raw = std::fs::read_to_string(&path)
            .map_err(|_| BackendError::DigestMiss { digest: digest.to_string() })?;
        let entry: StoredResponse = serde_json::from_str(&raw)
            .map_err(|_| BackendError::Tampered { digest: digest.to_string() })?;
        if entry.body_sha256 != sha256_hex(entry.body.as_bytes()) {
            return Err(BackendError::Tampered { digest: digest.to_string() });
        }
        Ok(entry.body)
    }
}

fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

/// Records every backend exchange into a store; the replay backends read the
/// same store back.
pub struct RecordingChat {
    pub inner: Arc<dyn ChatBackend>,
    pub store: Arc<ResponseStore>,
}

impl ChatBackend for RecordingChat {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let digest = request_digest(req);
        let resp = self.inner.chat(req)?;
        self.store
            .put(&digest, &canonical_json(&resp))
            .map_err(|e| BackendError::Other(format!("response store: {e}")))?;
        Ok(resp)
    }
}

pub struct RecordingT2i {
    pub inner: Arc<dyn T2iBackend>,
    pub store: Arc<ResponseStore>,
}

impl T2iBackend for RecordingT2i {
    fn t2i(&self, req: &T2IRequest) -> Result<T2IResponse, BackendError> {
        let digest = request_digest(req);
        let resp = self.inner.t2i(req)?;
        self.store
            .put(&digest, &canonical_json(&resp))
            .map_err(|e| BackendError::Other(format!("response store: {e}")))?;
        Ok(resp)
    }
}

pub struct ReplayChat {
    pub store: Arc<ResponseStore>,
}

impl ChatBackend for ReplayChat {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let digest = request_digest(req);
        let body = self.store.get(&digest)?;
        serde_json::from_str(&body).map_err(|_| BackendError::Tampered { digest })
    }
}

pub struct ReplayT2i {
    pub store: Arc<ResponseStore>,
}

impl T2iBackend for ReplayT2i {
    fn t2i(&self, req: &T2IRequest) -> Result<T2IResponse, BackendError> {
        let digest = request_digest(req);
        let body = self.store.get(&digest)?;
        serde_json::from_str(&body).map_err(|_| BackendError::Tampered { digest })
    }
}

/// Wrap the bundle so every exchange is recorded into `store`.
pub fn with_recording(backends: &Backends, store: Arc<ResponseStore>) -> Backends {
    Backends {
        chat: Arc::new(RecordingChat { inner: Arc::clone(&backends.chat), store: Arc::clone(&store) }),
        t2i: Arc::new(RecordingT2i { inner: Arc::clone(&backends.t2i), store }),
        scorer: backends.scorer.clone(),
    }
}

/// Writes one run directory: record.json, traces.jsonl (appended before each
/// next step), artifacts/, responses/, and a timestamp sidecar.
pub struct RunPersister {
    dir: PathBuf,
    pub store: Arc<ResponseStore>,
}

impl RunPersister {
    pub fn create(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(dir.join("artifacts"))?;
        let store = Arc::new(ResponseStore::open(dir.join("responses"))?);
        Ok(RunPersister { dir, store })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn write_artifact(&self, img: &ImageArtifact) -> std::io::Result<()> {
        atomic_write(&self.dir.join("artifacts").join(format!("{}.png", img.id)), &img.png)
    }

    fn append_trace(&self, trace: &crate::model::IterationTrace) -> std::io::Result<()> {
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.dir.join("traces.jsonl"))?;
        writeln!(f, "{}", canonical_json(trace))?;
        f.sync_all()
    }

    fn write_record(&self, record: &RunRecord) -> std::io::Result<()> {
        atomic_write(&self.dir.join("record.json"), canonical_json(record).as_bytes())
    }

    fn write_meta(&self, run_id: &str) -> std::io::Result<()> {
        let meta = serde_json::json!({
            "run_id": run_id,
            "created_unix": std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        });
        atomic_write(&self.dir.join("meta.json"), meta.to_string().as_bytes())
    }
}

// ---------------------------------------------------------------------------
// The loop
// ---------------------------------------------------------------------------

fn persist_err(e: std::io::Error) -> PipelineError {
    PipelineError::Backend(BackendError::Other(format!("persistence: {e}")))
}

/// Run the full closed loop for one prompt. Failures before the first image
/// exists are returned as errors; later backend failures close the record as
/// a valid prefix with `StopReason::BackendFailure`.
pub fn run_pipeline(
    p: &Prompt,
    cfg: &RunConfig,
    backends: &Backends,
    persister: Option<&RunPersister>,
) -> Result<RunRecord, PipelineError> {
    p.ensure_valid()?;
    cfg.ensure_valid()?;
    if let Some(persister) = persister {
        persister.write_meta(&run_id(cfg, p)).map_err(persist_err)?;
    }

    let (aug, _ippa_calls) = ippa::augment_prompt(p, backends.chat.as_ref(), cfg)?;
    let (initial, _digest) = refine::generate_initial(&aug, backends.t2i.as_ref(), cfg)
        .map_err(|e| PipelineError::Backend(BackendError::Other(e.to_string())))?;
    if let Some(persister) = persister {
        persister.write_artifact(&initial).map_err(persist_err)?;
    }
    let initial_scores = backends.scorer.as_ref().and_then(|s| s.score(&initial));
    let mut mean_history: Vec<f64> = Vec::new();
    if let Some(s) = &initial_scores {
        if let Ok(m) = average_score(s) {
            mean_history.push(m);
        }
    }

    // Bearer tokens never reach disk or records.
    let mut record_cfg = cfg.clone();
    record_cfg.endpoints.bearer_token = None;
    let mut record = RunRecord {
        config: record_cfg,
        prompt: p.clone(),
        augmented: aug.clone(),
        initial_image_ref: initial.id.clone(),
        initial_scores,
        traces: Vec::new(),
        final_image_ref: initial.id.clone(),
        stop_reason: StopReason::MaxIterations,
        final_critique: None,
        failure: None,
    };

    let mut current = initial;
    let max = cfg.effective_max_iterations();
    let mut k = 0;
    loop {
        if k >= max {
            record.stop_reason = StopReason::MaxIterations;
            break;
        }
        let critique =
            match critic::critique_image(p, &aug, &current, backends.chat.as_ref(), cfg) {
                Ok((c, _calls)) => c,
                Err(e) => {
                    record.stop_reason = StopReason::BackendFailure;
                    record.failure = Some(e.to_string());
                    break;
                }
            };
        if cfg.stop_on_satisfied && critic::is_satisfied(&critique, cfg) {
            record.stop_reason = StopReason::Satisfied;
            record.final_critique = Some(critique);
            break;
        }
        if plateau_reached(&mean_history, cfg) {
            record.stop_reason = StopReason::Plateau;
            record.final_critique = Some(critique);
            break;
        }
        let signals = translator::translate(&critique, &current, cfg);
        if signals.is_empty() {
            // Nothing actionable survives translation; refining would be a
            // no-op request, so the loop closes here.
            record.stop_reason = StopReason::Satisfied;
            record.final_critique = Some(critique);
            break;
        }
        let step = plan_and_refine(&signals, &aug, &current, cfg, backends);
        let (next, digest) = match step {
            Ok(v) => v,
            Err(e) => {
                record.stop_reason = StopReason::BackendFailure;
                record.failure = Some(e.to_string());
                break;
            }
        };
        let scores = backends.scorer.as_ref().and_then(|s| s.score(&next));
        if let Some(s) = &scores {
            if let Ok(m) = average_score(s) {
                mean_history.push(m);
            }
        }
        let trace = crate::model::IterationTrace {
            index: k,
            critique,
            signals,
            refinement_request_digest: digest,
            image_ref: next.id.clone(),
            scores,
        };
        if let Some(persister) = persister {
            persister.write_artifact(&next).map_err(persist_err)?;
            persister.append_trace(&trace).map_err(persist_err)?;
        }
        record.traces.push(trace);
        record.final_image_ref = next.id.clone();
        current = next;
        k += 1;
    }

    if let Some(persister) = persister {
        persister.write_record(&record).map_err(persist_err)?;
    }
    Ok(record)
}

fn plan_and_refine(
    signals: &[crate::model::ControlSignal],
    aug: &crate::model::AugmentedPrompt,
    current: &ImageArtifact,
    cfg: &RunConfig,
    backends: &Backends,
) -> Result<(ImageArtifact, String), refine::RefineError> {
    let plan = refine::plan_refinement(signals, aug, current, cfg)?;
    refine::refine(&plan, current, backends.t2i.as_ref())
}

// ---------------------------------------------------------------------------
// Replay
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt run record: {0}")]
    Parse(String),
    #[error("missing recorded response: {0}")]
    MissingResponse(String),
    #[error("recorded response tampered: {0}")]
    Tampered(String),
    #[error("replay diverged from the recorded run{}: {detail}", fmt_iter(.iteration))]
    Divergence { iteration: Option<u32>, detail: String },
    #[error("replay pipeline failure: {0}")]
    Pipeline(String),
}

fn fmt_iter(it: &Option<u32>) -> String {
    match it {
        Some(k) => format!(" at iteration {k}"),
        None => String::new(),
    }
}

/// Re-run a persisted run purely from its recorded responses and verify the
/// reproduced record is byte-identical to the original.
pub fn replay(run_dir: &Path, scorer: Option<Arc<dyn Scorer>>) -> Result<RunRecord, ReplayError> {
    let raw = std::fs::read_to_string(run_dir.join("record.json"))?;
    let original: RunRecord =
        serde_json::from_str(&raw).map_err(|e| ReplayError::Parse(e.to_string()))?;
    let store = Arc::new(ResponseStore::open(run_dir.join("responses"))?);
    let scorer = scorer.or_else(|| default_scorer(&original.config));
    let backends = Backends {
        chat: Arc::new(ReplayChat { store: Arc::clone(&store) }),
        t2i: Arc::new(ReplayT2i { store }),
        scorer,
    };
    let reproduced = run_pipeline(&original.prompt, &original.config, &backends, None)
        .map_err(|e| ReplayError::Pipeline(e.to_string()))?;

    if let Some(failure) = &reproduced.failure {
        if failure != original.failure.as_deref().unwrap_or("") {
            if failure.contains("no recorded response") {
                return Err(ReplayError::MissingResponse(failure.clone()));
            }
            if failure.contains("tampered") {
                return Err(ReplayError::Tampered(failure.clone()));
            }
        }
    }
    if canonical_json(&reproduced) == canonical_json(&original) {
        return Ok(reproduced);
    }
    // Find the first iteration whose trace differs.
    let iteration = original
        .traces
        .iter()
        .zip(&reproduced.traces)
        .position(|(a, b)| canonical_json(a) != canonical_json(b))
        .map(|i| i as u32)
        .or_else(|| {
            (original.traces.len() != reproduced.traces.len())
                .then(|| original.traces.len().min(reproduced.traces.len()) as u32)
        });
    let a = canonical_json(&original);
    let b = canonical_json(&reproduced);
    let at = a.bytes().zip(b.bytes()).position(|(x, y)| x != y).unwrap_or(a.len().min(b.len()));
    let ctx = |s: &str| {
        let start = at.saturating_sub(60);
        s.get(start..(at + 60).min(s.len())).unwrap_or("").to_string()
    };
    Err(ReplayError::Divergence {
        iteration,
        detail: format!(
            "records differ at byte {at}: stored '...{}...' vs reproduced '...{}...'",
            ctx(&a),
            ctx(&b)
        ),
    })
}

/// The scorer a run of this configuration would have used.
pub fn default_scorer(cfg: &RunConfig) -> Option<Arc<dyn Scorer>> {
    match cfg.backend {
        crate::model::BackendKind::Sim => {
            Some(Arc::new(crate::backends::sim::SimScorer { sim: cfg.sim.clone() }))
        }
        _ => None,
    }
}
