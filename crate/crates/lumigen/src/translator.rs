//! Compiles linguistic critiques into typed control signals, rasterizes
//! region masks, and composes effective prompts from prompt edits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    AugmentedPrompt, ControlSignal, Critique, Dimension, ImageArtifact, Issue, Keypoint, Point,
    Region, RunConfig, SignalPayload, StrengthClass, Violation,
};
use crate::pngio;

/// Fixed 17-name keypoint catalog (the common full-body convention).
pub const KEYPOINT_NAMES: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// Attention weight attached to attribute-class hints.
pub const ATTENTION_HINT_WEIGHT: f64 = 1.3;

/// Mask dilation margin in pixels (Euclidean radius).
pub const MASK_DILATION_PX: i64 = 2;

#[derive(Debug, Error)]
pub enum TranslateError {
    #[error("degenerate polygon: zero area")]
    DegeneratePolygon,
    #[error("mask dimensions must be positive")]
    EmptyMask,
}

// ---------------------------------------------------------------------------
// Rule table
// ---------------------------------------------------------------------------

/// What one issue compiles into. The table is total over
/// Dimension x {region, no-region}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationRule {
    pub dimension: Dimension,
    pub has_region: bool,
    pub emits_mask: bool,
    pub emits_pose: bool,
    pub emits_prompt_edit: bool,
    pub emits_attention_hint: bool,
    pub strength_class: StrengthClass,
}

/// Fixed rule table:
/// Text+region -> InpaintMask + PromptEdit(local); Text no-region ->
/// PromptEdit(attribute); Pose -> PoseSkeleton + PromptEdit(attribute);
/// Obj+region -> InpaintMask(local); Obj no-region -> PromptEdit(global);
/// Comp, Backg -> PromptEdit(global); Color, Light, Texture, FX ->
/// PromptEdit(attribute) + AttentionHint.
pub fn rule_for(dimension: Dimension, has_region: bool) -> TranslationRule {
    use Dimension::*;
    let rule = |mask, pose, pe, hint, class| TranslationRule {
        dimension,
        has_region,
        emits_mask: mask,
        emits_pose: pose,
        emits_prompt_edit: pe,
        emits_attention_hint: hint,
        strength_class: class,
    };
    match (dimension, has_region) {
        (Text, true) => rule(true, false, true, false, StrengthClass::Local),
        (Text, false) => rule(false, false, true, false, StrengthClass::Attribute),
        (Pose, _) => rule(false, true, true, false, StrengthClass::Attribute),
        (Obj, true) => rule(true, false, false, false, StrengthClass::Local),
        (Obj, false) => rule(false, false, true, false, StrengthClass::Global),
        (Comp, _) | (Backg, _) => rule(false, false, true, false, StrengthClass::Global),
        (Color, _) | (Light, _) | (Texture, _) | (FX, _) => {
            rule(false, false, true, true, StrengthClass::Attribute)
        }
    }
}

fn strip_terminal_punct(s: &str) -> &str {
    s.trim().trim_end_matches(['.', '!'])
}

/// Prompt phrase compiled from one issue.
fn issue_phrase(issue: &Issue) -> String {
    match issue.dimension {
        Dimension::Text => match &issue.target_text {
            Some(t) => format!("legible ornate lettering reading \"{t}\""),
            None => strip_terminal_punct(&issue.directive).to_string(),
        },
        Dimension::Pose => pose_phrase(&issue.directive),
        _ => strip_terminal_punct(&issue.directive).to_string(),
    }
}

fn pose_phrase(directive: &str) -> String {
    let lower = directive.to_lowercase();
    if lower.contains("relax") {
        "relaxed, natural pose".to_string()
    } else if lower.contains("leap") || lower.contains("jump") {
        "dynamic mid-leap pose, arms outstretched gracefully".to_string()
    } else if lower.contains("sit") {
        "natural seated pose".to_string()
    } else {
        format!("{}, natural pose", strip_terminal_punct(directive))
    }
}

// Canned keypoint templates, selected by directive keywords.
const STANDING_POSE: [(f64, f64); 17] = [
    (0.50, 0.10), // nose
    (0.47, 0.09),
    (0.53, 0.09), // eyes
    (0.45, 0.10),
    (0.55, 0.10), // ears
    (0.42, 0.22),
    (0.58, 0.22), // shoulders
    (0.38, 0.35),
    (0.62, 0.35), // elbows
    (0.36, 0.48),
    (0.64, 0.48), // wrists
    (0.44, 0.52),
    (0.56, 0.52), // hips
    (0.44, 0.70),
    (0.56, 0.70), // knees
    (0.44, 0.90),
    (0.56, 0.90), // ankles
];

const SITTING_POSE: [(f64, f64); 17] = [
    (0.50, 0.18),
    (0.47, 0.17),
    (0.53, 0.17),
    (0.45, 0.18),
    (0.55, 0.18),
    (0.42, 0.30),
    (0.58, 0.30),
    (0.38, 0.42),
    (0.62, 0.42),
    (0.40, 0.54),
    (0.60, 0.54),
    (0.44, 0.56),
    (0.56, 0.56),
    (0.36, 0.70),
    (0.64, 0.70),
    (0.38, 0.88),
    (0.62, 0.88),
];

const LEAPING_POSE: [(f64, f64); 17] = [
    (0.50, 0.12),
    (0.47, 0.11),
    (0.53, 0.11),
    (0.45, 0.12),
    (0.55, 0.12),
    (0.40, 0.24),
    (0.60, 0.24),
    (0.26, 0.18),
    (0.74, 0.18), // elbows raised
    (0.14, 0.10),
    (0.86, 0.10), // wrists outstretched
    (0.44, 0.50),
    (0.56, 0.50),
    (0.30, 0.62),
    (0.68, 0.66),
    (0.18, 0.70),
    (0.80, 0.82),
];

/// Neutral skeleton template posed by directive keywords.
pub fn pose_template(directive: &str) -> Vec<Keypoint> {
    let lower = directive.to_lowercase();
    let coords: &[(f64, f64); 17] = if lower.contains("sit") {
        &SITTING_POSE
    } else if lower.contains("leap") || lower.contains("jump") || lower.contains("danc") {
        &LEAPING_POSE
    } else {
        &STANDING_POSE
    };
    KEYPOINT_NAMES
        .iter()
        .zip(coords.iter())
        .map(|(name, (x, y))| Keypoint { name: name.to_string(), x: *x, y: *y })
        .collect()
}

// ---------------------------------------------------------------------------
// translate
// ---------------------------------------------------------------------------

fn sorted_issues(c: &Critique) -> Vec<&Issue> {
    let mut issues: Vec<&Issue> = c.issues.iter().collect();
    issues.sort_by_key(|i| (std::cmp::Reverse(i.severity), i.dimension.index()));
    issues
}

/// Compile a critique into at most `cfg.max_signals_per_iteration` control
/// signals. Issues are processed in (severity desc, canonical dimension)
/// order; all PromptEdit contributions merge into a single signal; an issue
/// whose signals would exceed the cap stops processing.
pub fn translate(c: &Critique, _img: &ImageArtifact, cfg: &RunConfig) -> Vec<ControlSignal> {
    let cap = cfg.max_signals_per_iteration;
    let mut signals: Vec<ControlSignal> = Vec::new();
    let mut prompt_edit_slot: Option<usize> = None;

    for issue in sorted_issues(c) {
        // A full list stops processing entirely: lower-priority issues do not
        // ride along by merging into the existing PromptEdit.
        if signals.len() >= cap {
            break;
        }
        let rule = rule_for(issue.dimension, issue.region.is_some());
        let mut staged: Vec<ControlSignal> = Vec::new();
        let mut staged_pe: Option<(String, StrengthClass)> = None;

        if rule.emits_mask {
            let region = issue.region.clone().expect("mask rule requires a region");
            let local_prompt = match (&issue.dimension, &issue.target_text) {
                (Dimension::Text, Some(t)) => {
                    format!("clear, legible text reading \"{t}\"")
                }
                _ => strip_terminal_punct(&issue.directive).to_string(),
            };
            staged.push(ControlSignal {
                payload: SignalPayload::InpaintMask { region, local_prompt },
                sources: vec![issue.dimension],
            });
        }
        if rule.emits_pose {
            staged.push(ControlSignal {
                payload: SignalPayload::PoseSkeleton {
                    keypoints: pose_template(&issue.directive),
                    directive: issue.directive.clone(),
                },
                sources: vec![issue.dimension],
            });
        }
        if rule.emits_prompt_edit {
            staged_pe = Some((issue_phrase(issue), rule.strength_class));
        }
        if rule.emits_attention_hint {
            staged.push(ControlSignal {
                payload: SignalPayload::AttentionHint {
                    dimension: issue.dimension,
                    weight: ATTENTION_HINT_WEIGHT,
                },
                sources: vec![issue.dimension],
            });
        }

        let new_pe = staged_pe.is_some() && prompt_edit_slot.is_none();
        let projected = signals.len() + staged.len() + usize::from(new_pe);
        if projected > cap {
            break;
        }

        // The merged PromptEdit keeps the position where it first appeared.
        if let Some((phrase, class)) = staged_pe {
            match prompt_edit_slot {
                Some(idx) => {
                    if let SignalPayload::PromptEdit { added, class: merged_class, .. } =
                        &mut signals[idx].payload
                    {
                        if !added.contains(&phrase) {
                            added.push(phrase);
                        }
                        // Global dominates: it drives refinement strength.
                        if class == StrengthClass::Global {
                            *merged_class = StrengthClass::Global;
                        }
                        if !signals[idx].sources.contains(&issue.dimension) {
                            signals[idx].sources.push(issue.dimension);
                        }
                    }
                }
                None => {
                    // Masks and skeletons for this issue come before its edit,
                    // hints after, matching the rule table's stated order.
                    let hint_split = staged
                        .iter()
                        .position(|s| matches!(s.payload, SignalPayload::AttentionHint { .. }))
                        .unwrap_or(staged.len());
                    let mut rest = staged.split_off(hint_split);
                    signals.append(&mut staged);
                    prompt_edit_slot = Some(signals.len());
                    signals.push(ControlSignal {
                        payload: SignalPayload::PromptEdit {
                            added: vec![phrase],
                            removed: Vec::new(),
                            class,
                        },
                        sources: vec![issue.dimension],
                    });
                    signals.append(&mut rest);
                    continue;
                }
            }
        }
        signals.append(&mut staged);
    }
    signals
}

/// Dimensions whose issues produced the given signal list, in canonical order.
pub fn targeted_dimensions(signals: &[ControlSignal]) -> Vec<Dimension> {
    let mut dims: Vec<Dimension> = Vec::new();
    for s in signals {
        for d in &s.sources {
            if !dims.contains(d) {
                dims.push(*d);
            }
        }
    }
    dims.sort_by_key(|d| d.index());
    dims
}

// ---------------------------------------------------------------------------
// Mask rasterization
// ---------------------------------------------------------------------------

/// Binary inpainting mask: 255 = editable, 0 = frozen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskBitmap {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl MaskBitmap {
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn check(&self) -> Vec<Violation> {
        let mut vs = Vec::new();
        if self.pixels.len() != (self.width * self.height) as usize {
            vs.push(Violation::new("MaskBitmap.pixels", "length must equal width*height"));
        }
        if !self.pixels.iter().all(|p| *p == 0 || *p == 255) {
            vs.push(Violation::new("MaskBitmap.pixels", "only values 0 and 255 may appear"));
        }
        vs
    }

    pub fn to_png(&self) -> Result<Vec<u8>, pngio::PngError> {
        pngio::encode_gray(self.width, self.height, &self.pixels)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self, pngio::PngError> {
        let decoded = pngio::decode(bytes)?;
        Ok(MaskBitmap { width: decoded.width, height: decoded.height, pixels: decoded.pixels })
    }
}

fn point_in_region(r: &Region, x: f64, y: f64) -> bool {
    match r {
        Region::Bbox { x0, y0, x1, y1 } => x >= *x0 && x <= *x1 && y >= *y0 && y <= *y1,
        Region::Polygon { points } => {
            // Even-odd rule: count edge crossings of a ray to +x.
            let mut inside = false;
            let n = points.len();
            for i in 0..n {
                let a = points[i];
                let b = points[(i + 1) % n];
                if (a.y > y) != (b.y > y) {
                    let x_cross = a.x + (y - a.y) / (b.y - a.y) * (b.x - a.x);
                    if x < x_cross {
                        inside = !inside;
                    }
                }
            }
            inside
        }
    }
}

fn polygon_area(points: &[Point]) -> f64 {
    let n = points.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = points[i];
        let b = points[(i + 1) % n];
        acc += a.x * b.y - b.x * a.y;
    }
    acc.abs() / 2.0
}

/// Rasterize a normalized region at the given pixel dimensions: a pixel is
/// editable iff its center lies inside the region, then the set is dilated by
/// a Euclidean margin of [`MASK_DILATION_PX`] pixels.
pub fn rasterize_region(r: &Region, width: u32, height: u32) -> Result<MaskBitmap, TranslateError> {
    if width == 0 || height == 0 {
        return Err(TranslateError::EmptyMask);
    }
    if let Region::Polygon { points } = r {
        if polygon_area(points) == 0.0 {
            return Err(TranslateError::DegeneratePolygon);
        }
    }
    let (w, h) = (width as usize, height as usize);
    let mut inside = vec![false; w * h];
    for j in 0..h {
        let cy = (j as f64 + 0.5) / height as f64;
        for i in 0..w {
            let cx = (i as f64 + 0.5) / width as f64;
            inside[j * w + i] = point_in_region(r, cx, cy);
        }
    }
    // Euclidean dilation: offsets with dx^2 + dy^2 <= margin^2.
    let margin = MASK_DILATION_PX;
    let mut offsets = Vec::new();
    for dy in -margin..=margin {
        for dx in -margin..=margin {
            if dx * dx + dy * dy <= margin * margin {
                offsets.push((dx, dy));
            }
        }
    }
    let mut pixels = vec![0u8; w * h];
    for j in 0..h as i64 {
        for i in 0..w as i64 {
            let hit = offsets.iter().any(|(dx, dy)| {
                let (x, y) = (i + dx, j + dy);
                x >= 0 && y >= 0 && x < w as i64 && y < h as i64 && inside[y as usize * w + x as usize]
            });
            if hit {
                pixels[(j * w as i64 + i) as usize] = 255;
            }
        }
    }
    Ok(MaskBitmap { width, height, pixels })
}

// ---------------------------------------------------------------------------
// Prompt composition
// ---------------------------------------------------------------------------

/// Apply a PromptEdit to the augmented narrative: removed phrases are deleted
/// by exact substring match, added phrases are appended comma-separated in
/// order, skipping phrases already present.
pub fn compose_prompt_edit(aug: &AugmentedPrompt, added: &[String], removed: &[String]) -> String {
    let mut prompt = aug.narrative.clone();
    for phrase in removed {
        if !phrase.is_empty() {
            prompt = prompt.replace(phrase.as_str(), "");
        }
    }
    for phrase in added {
        if !prompt.contains(phrase.as_str()) {
            prompt.push_str(", ");
            prompt.push_str(phrase);
        }
    }
    prompt
}
