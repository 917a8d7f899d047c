//! Evaluation harness: seeded simulator sweeps over refinement depth, the
//! ablation suite, an optional LVLM judge, and deterministic report
//! rendering.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backends::sim::{profile_for, SimChatBackend, SimScorer, SimT2iBackend};
use crate::backends::{encode_b64, ChatBackend, ChatMessage, ChatRequest, ContentPart};
use crate::ippa::PipelineError;
use crate::model::{
    average_score, canonical_json, format2, Ablation, AugmentedPrompt, Dimension, DimensionScores,
    ImageArtifact, Prompt, RunConfig, RunRecord, Validate,
};
use crate::orchestrator::{run_pipeline, Backends};
use crate::structured::extract_first_json_object;

pub const JUDGE_TEMPLATE: &str = include_str!("../assets/judge_prompt.txt");
pub const JUDGE_TEMPLATE_VERSION: &str = "judge-v1";

/// Build the simulator backend bundle for a configuration. The latent profile
/// follows the configured ablation unless overridden.
pub fn sim_backends(cfg: &RunConfig) -> Backends {
    let profile = cfg.sim.profile.unwrap_or_else(|| profile_for(cfg.ablation));
    Backends {
        chat: Arc::new(SimChatBackend { sim: cfg.sim.clone() }),
        t2i: Arc::new(SimT2iBackend { sim: cfg.sim.clone(), profile }),
        scorer: Some(Arc::new(SimScorer { sim: cfg.sim.clone() })),
    }
}

/// Configuration for depth sweeps. The critic threshold is raised and the
/// signal cap widened so every dimension is actively refined each iteration,
/// and the stopping rules are disabled so all runs are comparable at every
/// checkpoint depth.
pub fn sweep_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.sim.tau = 3.75;
    cfg.max_signals_per_iteration = 9;
    cfg.stop_on_satisfied = false;
    cfg.plateau_patience = u32::MAX;
    cfg.width = 16;
    cfg.height = 16;
    cfg
}

/// Configuration for the ablation suite: default loop behavior, fixed depth.
pub fn ablation_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.stop_on_satisfied = false;
    cfg.plateau_patience = u32::MAX;
    cfg.width = 16;
    cfg.height = 16;
    cfg
}

/// Below this many runs every report carries a small-sample warning.
pub const SMALL_SAMPLE_THRESHOLD: usize = 30;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointRow {
    pub checkpoint: u32,
    pub means: [f64; 9],
    pub avg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    /// Score provenance label: "SIM" or "JUDGE".
    pub label: String,
    pub n_runs: usize,
    pub rows: Vec<CheckpointRow>,
    pub small_sample_warning: bool,
}

/// Scores of a run at refinement depth `checkpoint`: the initial image at 0,
/// otherwise the image after that many refinements (clamped to the run's
/// actual length).
pub fn scores_at_checkpoint(record: &RunRecord, checkpoint: u32) -> Option<&DimensionScores> {
    if checkpoint == 0 || record.traces.is_empty() {
        return record.initial_scores.as_ref();
    }
    let idx = (checkpoint as usize).min(record.traces.len()) - 1;
    record.traces[idx].scores.as_ref().or(record.initial_scores.as_ref())
}

/// Run `prompts x seed_range` simulator runs to the deepest checkpoint and
/// average per-dimension scores at each checkpoint. Disjoint seed ranges can
/// run on separate threads and be combined with [`merge_sweep_reports`].
pub fn run_sweep(
    prompts: &[Prompt],
    checkpoints: &[u32],
    seed_range: std::ops::Range<u64>,
    base: &RunConfig,
) -> Result<SweepReport, PipelineError> {
    let max_depth = checkpoints.iter().copied().max().unwrap_or(0);
    let mut sums: HashMap<u32, [f64; 9]> = checkpoints.iter().map(|c| (*c, [0.0; 9])).collect();
    let mut n_runs = 0usize;
    for p in prompts {
        for seed in seed_range.clone() {
            let cfg = RunConfig { seed, max_iterations: max_depth, ..base.clone() };
            let backends = sim_backends(&cfg);
            let record = run_pipeline(p, &cfg, &backends, None)?;
            n_runs += 1;
            for c in checkpoints {
                let scores = scores_at_checkpoint(&record, *c)
                    .and_then(|s| s.as_array())
                    .expect("simulator runs always carry scores");
                let sum = sums.get_mut(c).unwrap();
                for i in 0..9 {
                    sum[i] += scores[i];
                }
            }
        }
    }
    let mut rows = Vec::new();
    for c in checkpoints {
        let mut means = sums[c];
        for v in &mut means {
            *v /= n_runs as f64;
        }
        let avg = average_score(&DimensionScores::from_array(means))
            .map_err(PipelineError::Invalid)?;
        rows.push(CheckpointRow { checkpoint: *c, means, avg });
    }
    Ok(SweepReport {
        label: "SIM".into(),
        n_runs,
        rows,
        small_sample_warning: n_runs < SMALL_SAMPLE_THRESHOLD,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub means: [f64; 9],
    pub avg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub label: String,
    pub n_runs_per_variant: usize,
    pub rows: Vec<AblationRow>,
    pub small_sample_warning: bool,
}

/// Run all three variants at fixed depth and average final-image scores.
pub fn run_ablation_suite(
    prompts: &[Prompt],
    seed_range: std::ops::Range<u64>,
    base: &RunConfig,
) -> Result<AblationReport, PipelineError> {
    let mut rows = Vec::new();
    let mut n_runs = 0usize;
    for ablation in [Ablation::Full, Ablation::NoIppa, Ablation::NoIvfr] {
        let mut sum = [0.0; 9];
        n_runs = 0;
        for p in prompts {
            for seed in seed_range.clone() {
                let cfg = RunConfig { seed, ablation, ..base.clone() };
                let backends = sim_backends(&cfg);
                let record = run_pipeline(p, &cfg, &backends, None)?;
                let final_scores = record
                    .traces
                    .last()
                    .and_then(|t| t.scores.as_ref())
                    .or(record.initial_scores.as_ref())
                    .and_then(|s| s.as_array())
                    .expect("simulator runs always carry scores");
                for i in 0..9 {
                    sum[i] += final_scores[i];
                }
                n_runs += 1;
            }
        }
        let mut means = sum;
        for v in &mut means {
            *v /= n_runs as f64;
        }
        let avg = average_score(&DimensionScores::from_array(means))
            .map_err(PipelineError::Invalid)?;
        rows.push(AblationRow { ablation, means, avg });
    }
    Ok(AblationReport {
        label: "SIM".into(),
        n_runs_per_variant: n_runs,
        rows,
        small_sample_warning: n_runs < SMALL_SAMPLE_THRESHOLD,
    })
}

/// Combine sweep reports over disjoint seed ranges (weighted by run count).
pub fn merge_sweep_reports(parts: Vec<SweepReport>) -> Option<SweepReport> {
    let first = parts.first()?;
    let label = first.label.clone();
    let checkpoints: Vec<u32> = first.rows.iter().map(|r| r.checkpoint).collect();
    let mut n_runs = 0usize;
    let mut sums: Vec<[f64; 9]> = vec![[0.0; 9]; checkpoints.len()];
    for part in &parts {
        if part.rows.iter().map(|r| r.checkpoint).collect::<Vec<_>>() != checkpoints {
            return None;
        }
        n_runs += part.n_runs;
        for (sum, row) in sums.iter_mut().zip(&part.rows) {
            for i in 0..9 {
                sum[i] += row.means[i] * part.n_runs as f64;
            }
        }
    }
    let rows = checkpoints
        .iter()
        .zip(sums)
        .map(|(c, mut means)| {
            for v in &mut means {
                *v /= n_runs as f64;
            }
            let avg = means.iter().sum::<f64>() / 9.0;
            CheckpointRow { checkpoint: *c, means, avg }
        })
        .collect();
    Some(SweepReport {
        label,
        n_runs,
        rows,
        small_sample_warning: n_runs < SMALL_SAMPLE_THRESHOLD,
    })
}

/// Combine ablation reports over disjoint seed ranges (weighted by run count).
pub fn merge_ablation_reports(parts: Vec<AblationReport>) -> Option<AblationReport> {
    let first = parts.first()?;
    let label = first.label.clone();
    let variants: Vec<Ablation> = first.rows.iter().map(|r| r.ablation).collect();
    let mut n_runs = 0usize;
    let mut sums: Vec<[f64; 9]> = vec![[0.0; 9]; variants.len()];
    for part in &parts {
        if part.rows.iter().map(|r| r.ablation).collect::<Vec<_>>() != variants {
            return None;
        }
        n_runs += part.n_runs_per_variant;
        for (sum, row) in sums.iter_mut().zip(&part.rows) {
            for i in 0..9 {
                sum[i] += row.means[i] * part.n_runs_per_variant as f64;
            }
        }
    }
    let rows = variants
        .iter()
        .zip(sums)
        .map(|(ablation, mut means)| {
            for v in &mut means {
                *v /= n_runs as f64;
            }
            let avg = means.iter().sum::<f64>() / 9.0;
            AblationRow { ablation: *ablation, means, avg }
        })
        .collect();
    Some(AblationReport {
        label,
        n_runs_per_variant: n_runs,
        rows,
        small_sample_warning: n_runs < SMALL_SAMPLE_THRESHOLD,
    })
}

// ---------------------------------------------------------------------------
// LVLM judge
// ---------------------------------------------------------------------------

/// Build the judge request: rubric plus the image.
pub fn render_judge_request(
    p: &Prompt,
    aug: &AugmentedPrompt,
    img: &ImageArtifact,
    model: &str,
) -> ChatRequest {
    let user_text = format!(
        "Original prompt (P_raw): {}\nAugmented prompt (P_aug): {}",
        serde_json::to_string(&p.text).unwrap(),
        canonical_json(aug),
    );
    ChatRequest {
        model: model.to_string(),
        messages: vec![
            ChatMessage::text("system", JUDGE_TEMPLATE),
            ChatMessage {
                role: "user".into(),
                content: vec![
                    ContentPart::Text { text: user_text },
                    ContentPart::Image { data_b64: encode_b64(&img.png) },
                ],
            },
        ],
        temperature: 0.0,
        max_tokens: 512,
    }
}

#[derive(Debug, Deserialize)]
struct JudgeDoc {
    scores: std::collections::BTreeMap<Dimension, f64>,
}

fn parse_judge(text: &str) -> Option<DimensionScores> {
    let json = extract_first_json_object(text)?;
    let doc: JudgeDoc = serde_json::from_str(json).ok()?;
    let scores = DimensionScores { scores: doc.scores };
    scores.ensure_valid().ok()?;
    Some(scores)
}

/// Score one image with the LVLM judge. One repair re-prompt; if that also
/// fails the image simply goes unscored. Scores are never fabricated.
pub fn judge_scores(
    p: &Prompt,
    aug: &AugmentedPrompt,
    img: &ImageArtifact,
    chat: &dyn ChatBackend,
    model: &str,
) -> Result<Option<DimensionScores>, PipelineError> {
    let mut req = render_judge_request(p, aug, img, model);
    let first = chat.chat(&req)?;
    if let Some(scores) = parse_judge(&first.content) {
        return Ok(Some(scores));
    }
    req.messages.push(ChatMessage::text("assistant", first.content));
    req.messages.push(ChatMessage::text(
        "user",
        "Your previous reply was not a valid scores document. Reply again with exactly \
         one JSON object of the form {\"scores\": {...}} covering all nine dimensions.",
    ));
    let second = chat.chat(&req)?;
    Ok(parse_judge(&second.content))
}

// ---------------------------------------------------------------------------
// Report rendering
// ---------------------------------------------------------------------------

fn header_cells() -> Vec<&'static str> {
    let mut cells: Vec<&'static str> = Dimension::ALL.iter().map(|d| d.name()).collect();
    cells.push("Avg");
    cells
}

fn render_tables(
    title: &str,
    label: &str,
    n_runs: usize,
    warn: bool,
    rows: &[(String, [f64; 9], f64)],
) -> (String, String) {
    let mut md = String::new();
    md.push_str(&format!("## {title}\n\n"));
    md.push_str(&format!("Scores: {label}. Runs: {n_runs}.\n"));
    if warn {
        md.push_str("\n> Warning: small sample, means are noisy.\n");
    }
    md.push('\n');
    md.push_str(&format!("| Variant | {} |\n", header_cells().join(" | ")));
    md.push_str(&format!("|---|{}\n", "---|".repeat(10)));
    let mut csv = format!("variant,{}\n", header_cells().join(",").to_lowercase());
    for (name, means, avg) in rows {
        let cells: Vec<String> = means.iter().chain([avg]).map(|v| format2(*v)).collect();
        md.push_str(&format!("| {name} | {} |\n", cells.join(" | ")));
        csv.push_str(&format!("{name},{}\n", cells.join(",")));
    }
    (md, csv)
}

pub fn render_sweep_report(report: &SweepReport) -> (String, String) {
    let rows: Vec<(String, [f64; 9], f64)> = report
        .rows
        .iter()
        .map(|r| {
            let name = match r.checkpoint {
                0 => "Initial".to_string(),
                n => format!("After {n} refinement(s)"),
            };
            (name, r.means, r.avg)
        })
        .collect();
    render_tables(
        "Refinement depth sweep",
        &report.label,
        report.n_runs,
        report.small_sample_warning,
        &rows,
    )
}

pub fn render_ablation_report(report: &AblationReport) -> (String, String) {
    let rows: Vec<(String, [f64; 9], f64)> = report
        .rows
        .iter()
        .map(|r| (r.ablation.to_string(), r.means, r.avg))
        .collect();
    render_tables(
        "Ablation suite",
        &report.label,
        report.n_runs_per_variant,
        report.small_sample_warning,
        &rows,
    )
}

/// Digest that names report files so distinct configurations never collide.
pub fn config_digest(cfg: &RunConfig) -> String {
    crate::backends::request_digest(cfg)[..16].to_string()
}
