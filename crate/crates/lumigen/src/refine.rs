//! Refinement execution: compile control signals into one concrete T2I
//! backend request and produce the next image artifact.

use thiserror::Error;

use crate::backends::{
    encode_b64, request_digest, AttentionExtension, BackendError, PoseExtension, T2IExtensions,
    T2IMode, T2IRequest, T2iBackend,
};
use crate::model::{
    AugmentedPrompt, ControlSignal, ImageArtifact, RunConfig, SignalPayload, StrengthClass,
};
use crate::translator::{rasterize_region, targeted_dimensions, MaskBitmap, TranslateError};

/// Denoising strength per refinement mode.
pub const STRENGTH_INPAINT: f64 = 0.75;
pub const STRENGTH_GLOBAL: f64 = 0.45;
pub const STRENGTH_ATTRIBUTE: f64 = 0.30;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("no signals to act on")]
    NoSignals,
    #[error("mask dimensions {mask_w}x{mask_h} do not match image {img_w}x{img_h}")]
    MaskMismatch { mask_w: u32, mask_h: u32, img_w: u32, img_h: u32 },
    #[error("mask rasterization failed: {0}")]
    Mask(#[from] TranslateError),
    #[error("backend failure: {0}")]
    Backend(#[from] BackendError),
    #[error("malformed backend image: {0}")]
    BadImage(String),
}

/// A fully resolved refinement plan, ready to send to a T2I backend.
#[derive(Debug, Clone)]
pub struct RefinementRequest {
    pub mode: T2IMode,
    pub effective_prompt: String,
    pub strength: f64,
    pub mask: Option<MaskBitmap>,
    pub pose: Option<PoseExtension>,
    pub attention_hints: Vec<AttentionExtension>,
    pub targeted: Vec<crate::model::Dimension>,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
}

/// Generate the initial image `I_0` from the augmented narrative.
pub fn generate_initial(
    aug: &AugmentedPrompt,
    t2i: &dyn T2iBackend,
    cfg: &RunConfig,
) -> Result<(ImageArtifact, String), RefineError> {
    let req = T2IRequest {
        mode: T2IMode::Txt2Img,
        prompt: aug.narrative.clone(),
        negative_prompt: String::new(),
        seed: cfg.seed,
        strength: 1.0,
        width: cfg.width,
        height: cfg.height,
        init_image_b64: None,
        mask_b64: None,
        extensions: T2IExtensions::default(),
    };
    let digest = request_digest(&req);
    let artifact = execute(&req, 0, None, t2i)?;
    Ok((artifact, digest))
}

/// Decide mode, strength, prompt and conditioning from the compiled signals.
///
/// The first inpaint mask wins and forces inpaint mode at strength 0.75;
/// otherwise a global prompt edit selects img2img at 0.45 and attribute-only
/// edits select img2img at 0.30. The seed is inherited from the image so a
/// run stays on one noise trajectory.
pub fn plan_refinement(
    signals: &[ControlSignal],
    aug: &AugmentedPrompt,
    img: &ImageArtifact,
    _cfg: &RunConfig,
) -> Result<RefinementRequest, RefineError> {
    if signals.is_empty() {
        return Err(RefineError::NoSignals);
    }

    let mut effective_prompt = aug.narrative.clone();
    let mut prompt_class: Option<StrengthClass> = None;
    let mut mask: Option<MaskBitmap> = None;
    let mut pose: Option<PoseExtension> = None;
    let mut hints = Vec::new();

    for signal in signals {
        match &signal.payload {
            SignalPayload::PromptEdit { added, removed, class } => {
                effective_prompt = crate::translator::compose_prompt_edit(aug, added, removed);
                prompt_class = Some(*class);
            }
            SignalPayload::InpaintMask { region, .. } => {
                if mask.is_none() {
                    mask = Some(rasterize_region(region, img.width, img.height)?);
                }
            }
            SignalPayload::PoseSkeleton { keypoints, directive } => {
                if pose.is_none() {
                    pose = Some(PoseExtension {
                        keypoints: keypoints.clone(),
                        directive: directive.clone(),
                    });
                }
            }
            SignalPayload::AttentionHint { dimension, weight } => {
                hints.push(AttentionExtension { dimension: *dimension, weight: *weight });
            }
        }
    }

    let (mode, strength) = if mask.is_some() {
        (T2IMode::Inpaint, STRENGTH_INPAINT)
    } else if prompt_class == Some(StrengthClass::Global) {
        (T2IMode::Img2Img, STRENGTH_GLOBAL)
    } else {
        (T2IMode::Img2Img, STRENGTH_ATTRIBUTE)
    };

    Ok(RefinementRequest {
        mode,
        effective_prompt,
        strength,
        mask,
        pose,
        attention_hints: hints,
        targeted: targeted_dimensions(signals),
        seed: img.seed,
        width: img.width,
        height: img.height,
    })
}

/// Execute a refinement plan against the backend, producing `I_{k+1}` and the
/// digest of the wire request.
pub fn refine(
    plan: &RefinementRequest,
    parent: &ImageArtifact,
    t2i: &dyn T2iBackend,
) -> Result<(ImageArtifact, String), RefineError> {
    if let Some(mask) = &plan.mask {
        if (mask.width, mask.height) != (parent.width, parent.height) {
            return Err(RefineError::MaskMismatch {
                mask_w: mask.width,
                mask_h: mask.height,
                img_w: parent.width,
                img_h: parent.height,
            });
        }
    }
    let mask_b64 = match &plan.mask {
        Some(mask) => Some(encode_b64(&mask.to_png().map_err(|e| RefineError::BadImage(e.to_string()))?)),
        None => None,
    };
    let req = T2IRequest {
        mode: plan.mode,
        prompt: plan.effective_prompt.clone(),
        negative_prompt: String::new(),
        seed: plan.seed,
        strength: plan.strength,
        width: plan.width,
        height: plan.height,
        init_image_b64: Some(encode_b64(&parent.png)),
        mask_b64,
        extensions: T2IExtensions {
            pose: plan.pose.clone(),
            attention_hints: plan.attention_hints.clone(),
            targeted_dimensions: plan.targeted.clone(),
        },
    };
    let digest = request_digest(&req);
    let artifact = execute(&req, parent.iteration + 1, Some(parent.id.clone()), t2i)?;
    Ok((artifact, digest))
}

fn execute(
    req: &T2IRequest,
    iteration: u32,
    parent: Option<String>,
    t2i: &dyn T2iBackend,
) -> Result<ImageArtifact, RefineError> {
    let resp = t2i.t2i(req)?;
    let png = crate::backends::decode_b64(&resp.image_b64)?;
    let (width, height) = crate::pngio::probe_dimensions(&png)
        .map_err(|e| RefineError::BadImage(e.to_string()))?;
    if (width, height) != (req.width, req.height) {
        return Err(RefineError::BadImage(format!(
            "backend returned {width}x{height}, requested {}x{}",
            req.width, req.height
        )));
    }
    Ok(ImageArtifact {
        id: crate::backends::sha256_hex(&png)[..16].to_string(),
        png,
        width,
        height,
        iteration,
        seed: resp.seed,
        parent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::ScriptedT2iBackend;
    use crate::model::{
        Critique, Dimension, Issue, Prompt, Region, RunConfig,
    };

    fn aug() -> AugmentedPrompt {
        AugmentedPrompt::passthrough(&Prompt::new("p", "a dancer mid-leap"))
    }

    fn artifact(w: u32, h: u32) -> ImageArtifact {
        let png = crate::pngio::encode_rgb(w, h, &vec![0u8; (w * h * 3) as usize], &[]).unwrap();
        ImageArtifact {
            id: "init".into(),
            png,
            width: w,
            height: h,
            iteration: 0,
            seed: 99,
            parent: None,
        }
    }

    fn critique(issues: Vec<Issue>) -> Critique {
        Critique { issues, overall_comment: String::new(), satisfied: false }
    }

    #[test]
    fn initial_generation_uses_the_narrative_and_config_seed() {
        let t2i = ScriptedT2iBackend::new();
        let cfg = RunConfig { seed: 7, width: 32, height: 24, ..RunConfig::default() };
        let (img, digest) = generate_initial(&aug(), &t2i, &cfg).unwrap();
        assert_eq!((img.width, img.height, img.iteration, img.seed), (32, 24, 0, 7));
        assert!(img.parent.is_none());
        assert_eq!(digest.len(), 64);
        let sent = &t2i.requests()[0];
        assert_eq!(sent.mode, T2IMode::Txt2Img);
        assert_eq!(sent.prompt, "a dancer mid-leap");
        assert_eq!(sent.seed, 7);
    }

    #[test]
    fn mask_signal_forces_inpaint_at_0_75() {
        let cfg = RunConfig::default();
        let img = artifact(16, 16);
        let c = critique(vec![Issue {
            dimension: Dimension::Obj,
            severity: 3,
            region: Some(Region::Bbox { x0: 0.25, y0: 0.25, x1: 0.75, y1: 0.75 }),
            directive: "add the missing cat".into(),
            target_text: None,
        }]);
        let signals = crate::translator::translate(&c, &img, &cfg);
        let plan = plan_refinement(&signals, &aug(), &img, &cfg).unwrap();
        assert_eq!(plan.mode, T2IMode::Inpaint);
        assert_eq!(plan.strength, STRENGTH_INPAINT);
        let mask = plan.mask.as_ref().unwrap();
        assert_eq!((mask.width, mask.height), (16, 16));
        assert_eq!(mask.get(8, 8), 255);
        assert_eq!(mask.get(0, 0), 0);
        assert_eq!(plan.seed, 99);
    }

    #[test]
    fn global_edit_selects_img2img_at_0_45() {
        let cfg = RunConfig::default();
        let img = artifact(8, 8);
        let c = critique(vec![Issue {
            dimension: Dimension::Comp,
            severity: 2,
            region: None,
            directive: "rebalance the composition".into(),
            target_text: None,
        }]);
        let signals = crate::translator::translate(&c, &img, &cfg);
        let plan = plan_refinement(&signals, &aug(), &img, &cfg).unwrap();
        assert_eq!(plan.mode, T2IMode::Img2Img);
        assert_eq!(plan.strength, STRENGTH_GLOBAL);
        assert!(plan.mask.is_none());
    }

    #[test]
    fn attribute_only_edit_selects_img2img_at_0_30() {
        let cfg = RunConfig::default();
        let img = artifact(8, 8);
        let c = critique(vec![Issue {
            dimension: Dimension::Light,
            severity: 2,
            region: None,
            directive: "warmer lighting".into(),
            target_text: None,
        }]);
        let signals = crate::translator::translate(&c, &img, &cfg);
        let plan = plan_refinement(&signals, &aug(), &img, &cfg).unwrap();
        assert_eq!(plan.mode, T2IMode::Img2Img);
        assert_eq!(plan.strength, STRENGTH_ATTRIBUTE);
        assert_eq!(plan.attention_hints.len(), 1);
        assert_eq!(plan.attention_hints[0].weight, 1.3);
    }

    #[test]
    fn empty_signals_are_rejected() {
        let cfg = RunConfig::default();
        let img = artifact(8, 8);
        assert!(matches!(
            plan_refinement(&[], &aug(), &img, &cfg),
            Err(RefineError::NoSignals)
        ));
    }

    #[test]
    fn mismatched_mask_fails_before_the_backend_call() {
        let cfg = RunConfig::default();
        let img = artifact(8, 8);
        let c = critique(vec![Issue {
            dimension: Dimension::Obj,
            severity: 3,
            region: Some(Region::Bbox { x0: 0.2, y0: 0.2, x1: 0.8, y1: 0.8 }),
            directive: "fix".into(),
            target_text: None,
        }]);
        let signals = crate::translator::translate(&c, &img, &cfg);
        let mut plan = plan_refinement(&signals, &aug(), &img, &cfg).unwrap();
        plan.mask = Some(MaskBitmap { width: 4, height: 4, pixels: vec![0; 16] });
        let t2i = ScriptedT2iBackend::new();
        assert!(matches!(
            refine(&plan, &img, &t2i),
            Err(RefineError::MaskMismatch { .. })
        ));
        assert_eq!(t2i.calls(), 0);
    }

    #[test]
    fn refine_carries_seed_and_parent_and_extensions() {
        let cfg = RunConfig::default();
        let img = artifact(8, 8);
        let c = critique(vec![Issue {
            dimension: Dimension::Pose,
            severity: 3,
            region: None,
            directive: "make the leap more graceful".into(),
            target_text: None,
        }]);
        let signals = crate::translator::translate(&c, &img, &cfg);
        let plan = plan_refinement(&signals, &aug(), &img, &cfg).unwrap();
        let t2i = ScriptedT2iBackend::new();
        let (next, digest) = refine(&plan, &img, &t2i).unwrap();
        assert_eq!(next.iteration, 1);
        assert_eq!(next.seed, 99);
        assert_eq!(next.parent.as_deref(), Some("init"));
        let sent = &t2i.requests()[0];
        assert!(sent.extensions.pose.is_some());
        assert_eq!(sent.extensions.pose.as_ref().unwrap().keypoints.len(), 17);
        assert!(sent.init_image_b64.is_some());
        assert_eq!(digest, request_digest(sent));
    }
}
