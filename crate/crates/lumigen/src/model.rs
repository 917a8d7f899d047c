//! Shared domain types: prompts, critiques, control signals, run records,
//! score aggregation and invariant validation.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The nine evaluation dimensions, in fixed canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Dimension {
    Obj,
    Backg,
    Color,
    Texture,
    Light,
    Text,
    Comp,
    Pose,
    FX,
}

impl Dimension {
    pub const ALL: [Dimension; 9] = [
        Dimension::Obj,
        Dimension::Backg,
        Dimension::Color,
        Dimension::Texture,
        Dimension::Light,
        Dimension::Text,
        Dimension::Comp,
        Dimension::Pose,
        Dimension::FX,
    ];

    /// Position in canonical order.
    pub fn index(self) -> usize {
        Dimension::ALL.iter().position(|d| *d == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Obj => "Obj",
            Dimension::Backg => "Backg",
            Dimension::Color => "Color",
            Dimension::Texture => "Texture",
            Dimension::Light => "Light",
            Dimension::Text => "Text",
            Dimension::Comp => "Comp",
            Dimension::Pose => "Pose",
            Dimension::FX => "FX",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A single violated invariant, naming the field and the rule it broke.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Violation { field: field.into(), rule: rule.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("json syntax error: {0}")]
    Syntax(String),
    #[error("invariant violations: {}", format_violations(.0))]
    Invalid(Vec<Violation>),
}

fn format_violations(vs: &[Violation]) -> String {
    vs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

/// Types that can check their own invariants.
pub trait Validate {
    fn check(&self) -> Vec<Violation>;

    fn ensure_valid(&self) -> Result<(), ModelError> {
        let vs = self.check();
        if vs.is_empty() { Ok(()) } else { Err(ModelError::Invalid(vs)) }
    }
}

/// Parse a raw JSON document into a typed, invariant-checked value.
pub fn validate_json<T: DeserializeOwned + Validate>(document: &str) -> Result<T, ModelError> {
    let value: T = serde_json::from_str(document).map_err(|e| ModelError::Syntax(e.to_string()))?;
    value.ensure_valid()?;
    Ok(value)
}

/// Compact canonical JSON form. Struct fields serialize in declaration order
/// and maps in key order, so equal values yield byte-equal strings.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("serializable value")
}

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub text: String,
}

impl Prompt {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Prompt { id: id.into(), text: text.into() }
    }
}

impl Validate for Prompt {
    fn check(&self) -> Vec<Violation> {
        let mut vs = Vec::new();
        if self.text.trim().is_empty() {
            vs.push(Violation::new("Prompt.text", "must be non-empty after trimming"));
        }
        vs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    #[serde(default)]
    pub attributes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Emphasis {
    pub dimension: Dimension,
    pub directive: String,
}

/// Structured planning output of prompt augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedPrompt {
    pub source: Prompt,
    pub narrative: String,
    #[serde(default)]
    pub entities: Vec<Entity>,
    #[serde(default)]
    pub relations: Vec<Relation>,
    #[serde(default)]
    pub style: Vec<String>,
    #[serde(default)]
    pub emphases: Vec<Emphasis>,
    #[serde(default)]
    pub stages: Vec<String>,
}

impl AugmentedPrompt {
    /// Pass-through fallback: the raw prompt verbatim, no structure.
    pub fn passthrough(p: &Prompt) -> Self {
        AugmentedPrompt {
            source: p.clone(),
            narrative: p.text.clone(),
            entities: Vec::new(),
            relations: Vec::new(),
            style: Vec::new(),
            emphases: Vec::new(),
            stages: Vec::new(),
        }
    }
}

impl Validate for AugmentedPrompt {
    fn check(&self) -> Vec<Violation> {
        let mut vs = self.source.check();
        if self.narrative.trim().is_empty() {
            vs.push(Violation::new("AugmentedPrompt.narrative", "must be non-empty"));
        }
        if self.entities.is_empty() && self.narrative != self.source.text {
            vs.push(Violation::new(
                "AugmentedPrompt.entities",
                "may be empty only when narrative equals the source text",
            ));
        }
        vs
    }
}

// ---------------------------------------------------------------------------
// Scores
// ---------------------------------------------------------------------------

/// Per-dimension rubric scores on the [0, 5] scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionScores {
    pub scores: BTreeMap<Dimension, f64>,
}

impl DimensionScores {
    /// Build from values in canonical dimension order.
    pub fn from_array(values: [f64; 9]) -> Self {
        let scores = Dimension::ALL.iter().copied().zip(values).collect();
        DimensionScores { scores }
    }

    pub fn get(&self, d: Dimension) -> Option<f64> {
        self.scores.get(&d).copied()
    }

    /// Values in canonical dimension order; requires all nine present.
    pub fn as_array(&self) -> Option<[f64; 9]> {
        let mut out = [0.0; 9];
        for (i, d) in Dimension::ALL.iter().enumerate() {
            out[i] = self.scores.get(d).copied()?;
        }
        Some(out)
    }
}

impl Validate for DimensionScores {
    fn check(&self) -> Vec<Violation> {
        let mut vs = Vec::new();
        for d in Dimension::ALL {
            match self.scores.get(&d) {
                None => vs.push(Violation::new(
                    format!("DimensionScores.scores.{d}"),
                    "missing dimension",
                )),
                Some(v) if !(0.0..=5.0).contains(v) || !v.is_finite() => vs.push(Violation::new(
                    format!("DimensionScores.scores.{d}"),
                    "value must lie in [0, 5]",
                )),
                _ => {}
            }
        }
        vs
    }
}

/// Arithmetic mean of the nine dimension scores. Rounding happens only at
/// display time via [`round2_half_up`].
pub fn average_score(scores: &DimensionScores) -> Result<f64, ModelError> {
    scores.ensure_valid()?;
    let values = scores.as_array().expect("validated scores are complete");
    Ok(values.iter().sum::<f64>() / 9.0)
}

/// Round to two decimals, ties away from zero (half-up for the non-negative
/// scores used here).
pub fn round2_half_up(x: f64) -> f64 {
    (x * 100.0 + 0.5).floor() / 100.0
}

/// Two-decimal display form, half-up.
pub fn format2(x: f64) -> String {
    format!("{:.2}", round2_half_up(x))
}

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

/// A generated image plus provenance. PNG bytes live beside the metadata but
/// stay out of serialized records; `id` is a digest of the bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageArtifact {
    pub id: String,
    #[serde(skip)]
    pub png: Vec<u8>,
    pub width: u32,
    pub height: u32,
    pub iteration: u32,
    pub seed: u64,
    pub parent: Option<String>,
}

impl Validate for ImageArtifact {
    fn check(&self) -> Vec<Violation> {
        let mut vs = Vec::new();
        if self.width == 0 || self.height == 0 {
            vs.push(Violation::new("ImageArtifact.width/height", "must be > 0"));
        }
        vs
    }
}

// ---------------------------------------------------------------------------
// Critiques
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

/// A normalized-coordinate image region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Region {
    Bbox { x0: f64, y0: f64, x1: f64, y1: f64 },
    Polygon { points: Vec<Point> },
}

impl Validate for Region {
    fn check(&self) -> Vec<Violation> {
        let mut vs = Vec::new();
        let in_unit = |v: f64| (0.0..=1.0).contains(&v) && v.is_finite();
        match self {
            Region::Bbox { x0, y0, x1, y1 } => {
                if ![*x0, *y0, *x1, *y1].iter().all(|v| in_unit(*v)) {
                    vs.push(Violation::new("Region.bbox", "coordinates must lie in [0, 1]"));
                }
                if !(x0 < x1) || !(y0 < y1) {
                    vs.push(Violation::new("Region.bbox", "requires x0 < x1 and y0 < y1"));
                }
            }
            Region::Polygon { points } => {
                if points.len() < 3 {
                    vs.push(Violation::new("Region.polygon", "requires at least 3 points"));
                }
                if !points.iter().all(|p| in_unit(p.x) && in_unit(p.y)) {
                    vs.push(Violation::new("Region.polygon", "coordinates must lie in [0, 1]"));
                }
            }
        }
        vs
    }
}

/// One per-dimension finding from the visual critic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    pub dimension: Dimension,
    pub severity: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
    pub directive: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_text: Option<String>,
}

impl Validate for Issue {
    fn check(&self) -> Vec<Violation> {
        let mut vs = Vec::new();
        if !(1..=3).contains(&self.severity) {
            vs.push(Violation::new("Issue.severity", "must be 1, 2 or 3"));
        }
        if self.directive.trim().is_empty() {
            vs.push(Violation::new("Issue.directive", "must be non-empty"));
        }
        if self.target_text.is_some() && self.dimension != Dimension::Text {
            vs.push(Violation::new("Issue.target_text", "only allowed when dimension is Text"));
        }
        if let Some(r) = &self.region {
            vs.extend(r.check());
        }
        vs
    }
}

/// The critic's verdict on one intermediate image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Critique {
    #[serde(default)]
    pub issues: Vec<Issue>,
    #[serde(default)]
    pub overall_comment: String,
    pub satisfied: bool,
}

impl Validate for Critique {
    fn check(&self) -> Vec<Violation> {
        let mut vs = Vec::new();
        for issue in &self.issues {
            vs.extend(issue.check());
        }
        if self.satisfied && self.issues.iter().any(|i| i.severity >= 2) {
            vs.push(Violation::new(
                "Critique.satisfied",
                "may not be true while an issue of severity >= 2 exists",
            ));
        }
        vs
    }
}

// ---------------------------------------------------------------------------
// Control signals
// ---------------------------------------------------------------------------

/// How aggressively a signal should steer refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrengthClass {
    Local,
    Global,
    Attribute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub name: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignalPayload {
    PromptEdit {
        added: Vec<String>,
        removed: Vec<String>,
        class: StrengthClass,
    },
    InpaintMask {
        region: Region,
        local_prompt: String,
    },
    PoseSkeleton {
        keypoints: Vec<Keypoint>,
        directive: String,
    },
    /// Opaque pass-through; backends may ignore it.
    AttentionHint {
        dimension: Dimension,
        weight: f64,
    },
}

/// A typed, machine-actionable instruction compiled from a critique.
/// `sources` records the issue dimension(s) the signal originated from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSignal {
    #[serde(flatten)]
    pub payload: SignalPayload,
    pub sources: Vec<Dimension>,
}

impl Validate for ControlSignal {
    fn check(&self) -> Vec<Violation> {
        let mut vs = Vec::new();
        match &self.payload {
            SignalPayload::InpaintMask { region, local_prompt } => {
                vs.extend(region.check());
                if local_prompt.trim().is_empty() {
                    vs.push(Violation::new("InpaintMask.local_prompt", "must be non-empty"));
                }
            }
            SignalPayload::PoseSkeleton { keypoints, .. } => {
                for kp in keypoints {
                    if !crate::translator::KEYPOINT_NAMES.contains(&kp.name.as_str()) {
                        vs.push(Violation::new(
                            "PoseSkeleton.keypoints",
                            format!("unknown keypoint name '{}'", kp.name),
                        ));
                    }
                }
            }
            SignalPayload::AttentionHint { weight, .. } => {
                if !(*weight > 0.0 && *weight <= 2.0) {
                    vs.push(Violation::new("AttentionHint.weight", "must lie in (0, 2]"));
                }
            }
            SignalPayload::PromptEdit { .. } => {}
        }
        vs
    }
}

// ---------------------------------------------------------------------------
// Run configuration and records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoIppa,
    NoIvfr,
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::NoIppa => "no_ippa",
            Ablation::NoIvfr => "no_ivfr",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Live,
    Mock,
    Sim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub chat_url: String,
    pub t2i_url: String,
    pub bearer_token: Option<String>,
    pub chat_model: String,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            chat_url: String::new(),
            t2i_url: String::new(),
            bearer_token: None,
            chat_model: "lvlm-default".to_string(),
        }
    }
}

/// Simulator calibration knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Latent-quality starting profile in canonical dimension order.
    /// `None` selects the built-in profile for the configured ablation.
    pub profile: Option<[f64; 9]>,
    /// Critic issue threshold.
    pub tau: f64,
    /// Noise sigma used by every simulator draw.
    pub sigma: f64,
    /// Per-step geometric approach rate toward the asymptote.
    pub alpha: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { profile: None, tau: 3.0, sigma: 0.05, alpha: 0.55 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub max_iterations: u32,
    pub ablation: Ablation,
    pub satisfaction_severity_threshold: u8,
    pub plateau_epsilon: f64,
    pub plateau_patience: u32,
    pub max_signals_per_iteration: usize,
    pub seed: u64,
    pub backend: BackendKind,
    pub endpoints: EndpointConfig,
    pub sim: SimConfig,
    /// Generated image size (pixels).
    pub width: u32,
    pub height: u32,
    /// When false the loop always runs to `max_iterations`; used by the
    /// evaluation suites so every run is comparable at the same depth.
    pub stop_on_satisfied: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            max_iterations: 5,
            ablation: Ablation::Full,
            satisfaction_severity_threshold: 2,
            plateau_epsilon: 0.02,
            plateau_patience: 2,
            max_signals_per_iteration: 3,
            seed: 0,
            backend: BackendKind::Sim,
            endpoints: EndpointConfig::default(),
            sim: SimConfig::default(),
            width: 64,
            height: 64,
            stop_on_satisfied: true,
        }
    }
}

impl RunConfig {
    /// Loop length after applying the ablation: no_ivfr disables the loop.
    pub fn effective_max_iterations(&self) -> u32 {
        match self.ablation {
            Ablation::NoIvfr => 0,
            _ => self.max_iterations,
        }
    }
}

impl Validate for RunConfig {
    fn check(&self) -> Vec<Violation> {
        let mut vs = Vec::new();
        if !(1..=3).contains(&self.satisfaction_severity_threshold) {
            vs.push(Violation::new(
                "RunConfig.satisfaction_severity_threshold",
                "must be 1, 2 or 3",
            ));
        }
        if self.plateau_epsilon < 0.0 {
            vs.push(Violation::new("RunConfig.plateau_epsilon", "must be >= 0"));
        }
        if self.width == 0 || self.height == 0 {
            vs.push(Violation::new("RunConfig.width/height", "must be > 0"));
        }
        if let Some(profile) = &self.sim.profile {
            if !profile.iter().all(|v| (0.0..=5.0).contains(v)) {
                vs.push(Violation::new("RunConfig.sim.profile", "values must lie in [0, 5]"));
            }
        }
        vs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    Satisfied,
    Plateau,
    /// A backend failed after retries; the record is a valid prefix.
    BackendFailure,
}

/// One completed loop iteration: critique of `I_k`, the signals compiled from
/// it, and the refined image `I_{k+1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub index: u32,
    pub critique: Critique,
    pub signals: Vec<ControlSignal>,
    pub refinement_request_digest: String,
    pub image_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<DimensionScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub prompt: Prompt,
    pub augmented: AugmentedPrompt,
    pub initial_image_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_scores: Option<DimensionScores>,
    pub traces: Vec<IterationTrace>,
    pub final_image_ref: String,
    pub stop_reason: StopReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_critique: Option<Critique>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl Validate for RunRecord {
    fn check(&self) -> Vec<Violation> {
        let mut vs = Vec::new();
        vs.extend(self.config.check());
        vs.extend(self.prompt.check());
        vs.extend(self.augmented.check());
        if self.traces.len() as u32 > self.config.max_iterations {
            vs.push(Violation::new("RunRecord.traces", "length exceeds max_iterations"));
        }
        for (i, t) in self.traces.iter().enumerate() {
            if t.index != i as u32 {
                vs.push(Violation::new("IterationTrace.index", "indices must be 0..L-1"));
            }
            if t.signals.len() > self.config.max_signals_per_iteration {
                vs.push(Violation::new(
                    "IterationTrace.signals",
                    "length exceeds max_signals_per_iteration",
                ));
            }
        }
        vs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE1_LUMIGEN: [f64; 9] = [2.95, 3.32, 3.70, 3.45, 2.91, 2.60, 3.55, 2.58, 2.62];
    const NO_IVFR_ROW: [f64; 9] = [2.85, 3.20, 3.60, 3.35, 2.85, 2.05, 3.25, 2.15, 2.40];

    #[test]
    fn average_of_full_model_row_is_3_08() {
        let scores = DimensionScores::from_array(TABLE1_LUMIGEN);
        let avg = average_score(&scores).unwrap();
        assert_eq!(format2(avg), "3.08");
    }

    #[test]
    fn average_of_zero_scores_is_zero() {
        let scores = DimensionScores::from_array([0.0; 9]);
        assert_eq!(format2(average_score(&scores).unwrap()), "0.00");
    }

    #[test]
    fn average_of_no_ivfr_row_is_2_86() {
        // The arithmetic mean of the printed per-dimension values; the table's
        // own Avg column disagrees with itself here, the mean wins.
        let scores = DimensionScores::from_array(NO_IVFR_ROW);
        assert_eq!(format2(average_score(&scores).unwrap()), "2.86");
    }

    #[test]
    fn average_rejects_missing_dimension() {
        let mut scores = DimensionScores::from_array([3.0; 9]);
        scores.scores.remove(&Dimension::Pose);
        assert!(average_score(&scores).is_err());
    }

    #[test]
    fn average_is_permutation_invariant_and_bounded() {
        let values = [1.0, 4.5, 2.2, 3.3, 0.1, 5.0, 2.9, 1.7, 4.0];
        let scores = DimensionScores::from_array(values);
        let avg = average_score(&scores).unwrap();
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(avg >= min && avg <= max);
        // Shuffle values across dimensions: the mean does not change.
        let mut rotated = values;
        rotated.rotate_left(4);
        let avg2 = average_score(&DimensionScores::from_array(rotated)).unwrap();
        assert!((avg - avg2).abs() < 1e-12);
    }

    #[test]
    fn critique_roundtrip_through_validate_json() {
        let c = Critique {
            issues: vec![Issue {
                dimension: Dimension::Text,
                severity: 2,
                region: None,
                directive: "Incorporate 'AI Era' text more clearly".into(),
                target_text: Some("AI Era".into()),
            }],
            overall_comment: "text needs work".into(),
            satisfied: false,
        };
        let json = canonical_json(&c);
        let parsed: Critique = validate_json(&json).unwrap();
        assert_eq!(parsed, c);
        assert_eq!(canonical_json(&parsed), json);
    }

    #[test]
    fn satisfied_critique_with_severe_issue_is_invalid() {
        let json = r#"{
            "issues": [{"dimension": "Pose", "severity": 3, "directive": "fix the pose"}],
            "overall_comment": "",
            "satisfied": true
        }"#;
        match validate_json::<Critique>(json) {
            Err(ModelError::Invalid(vs)) => {
                assert!(vs.iter().any(|v| v.field == "Critique.satisfied"));
            }
            other => panic!("expected invariant violation, got {other:?}"),
        }
    }

    #[test]
    fn inverted_bbox_is_invalid_and_names_the_field() {
        let json = r#"{"shape": "bbox", "x0": 0.7, "y0": 0.1, "x1": 0.2, "y1": 0.9}"#;
        match validate_json::<Region>(json) {
            Err(ModelError::Invalid(vs)) => {
                assert!(vs.iter().any(|v| v.field == "Region.bbox"));
            }
            other => panic!("expected invariant violation, got {other:?}"),
        }
    }

    #[test]
    fn dimension_tokens_are_exact() {
        let names: Vec<String> = Dimension::ALL
            .iter()
            .map(|d| serde_json::to_string(d).unwrap())
            .collect();
        assert_eq!(
            names,
            ["\"Obj\"", "\"Backg\"", "\"Color\"", "\"Texture\"", "\"Light\"", "\"Text\"",
             "\"Comp\"", "\"Pose\"", "\"FX\""]
        );
    }

    #[test]
    fn no_ivfr_disables_the_loop() {
        let cfg = RunConfig { ablation: Ablation::NoIvfr, ..RunConfig::default() };
        assert_eq!(cfg.effective_max_iterations(), 0);
    }
}
