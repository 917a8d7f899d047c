//! The visual critic: sends (raw prompt, augmented prompt, image) to a
//! multimodal backend and returns a validated critique.

use crate::backends::{encode_b64, ChatBackend, ChatMessage, ChatRequest, ContentPart};
use crate::ippa::{ParseError, PipelineError};
use crate::model::{
    canonical_json, AugmentedPrompt, Critique, ImageArtifact, Prompt, RunConfig, Validate,
    Violation,
};
use crate::structured::extract_first_json_object;

pub const CRITIC_TEMPLATE: &str = include_str!("../assets/critic_prompt.txt");
pub const CRITIC_TEMPLATE_VERSION: &str = "critic-v1";

/// Criticism is temperature-0: the same image gets the same critique.
pub const CRITIC_TEMPERATURE: f64 = 0.0;
const MAX_TOKENS: u32 = 2048;

/// Build the multimodal critique request. Fails before any network call if
/// the image bytes are not a valid PNG.
pub fn render_critic_request(
    p: &Prompt,
    aug: &AugmentedPrompt,
    img: &ImageArtifact,
    model: &str,
) -> Result<ChatRequest, PipelineError> {
    crate::pngio::probe_dimensions(&img.png).map_err(|e| {
        PipelineError::Invalid(crate::model::ModelError::Invalid(vec![Violation::new(
            "ImageArtifact.png",
            e.to_string(),
        )]))
    })?;
    let user_text = format!(
        "Original prompt (P_raw): {}\nAugmented prompt (P_aug): {}\nIteration: {}",
        serde_json::to_string(&p.text).unwrap(),
        canonical_json(aug),
        img.iteration,
    );
    Ok(ChatRequest {
        model: model.to_string(),
        messages: vec![
            ChatMessage::text("system", CRITIC_TEMPLATE),
            ChatMessage {
                role: "user".into(),
                content: vec![
                    ContentPart::Text { text: user_text },
                    ContentPart::Image { data_b64: encode_b64(&img.png) },
                ],
            },
        ],
        temperature: CRITIC_TEMPERATURE,
        max_tokens: MAX_TOKENS,
    })
}

fn parse_critique(text: &str) -> Result<Critique, ParseError> {
    let json = extract_first_json_object(text).ok_or(ParseError::Unparseable)?;
    let critique: Critique = serde_json::from_str(json)
        .map_err(|e| ParseError::Repairable(vec![Violation::new("Critique", e.to_string())]))?;
    let violations = critique.check();
    if violations.is_empty() {
        Ok(critique)
    } else {
        Err(ParseError::Repairable(violations))
    }
}

fn sort_issues(critique: &mut Critique) {
    critique
        .issues
        .sort_by_key(|i| (std::cmp::Reverse(i.severity), i.dimension.index()));
}

/// Obtain a validated critique of `img`. The repair-once policy matches
/// augmentation, but there is no fallback: a fabricated critique would
/// corrupt the loop, so an unusable response fails the iteration.
///
/// Returns the critique (issues sorted by severity desc, then canonical
/// dimension order) and the number of backend calls issued.
pub fn critique_image(
    p: &Prompt,
    aug: &AugmentedPrompt,
    img: &ImageArtifact,
    chat: &dyn ChatBackend,
    cfg: &RunConfig,
) -> Result<(Critique, u32), PipelineError> {
    let mut chat_req = render_critic_request(p, aug, img, &cfg.endpoints.chat_model)?;
    let first = chat.chat(&chat_req)?;
    let parsed = match parse_critique(&first.content) {
        Ok(mut critique) => {
            sort_issues(&mut critique);
            return Ok((critique, 1));
        }
        Err(err) => err,
    };
    let detail = match &parsed {
        ParseError::Unparseable => "no JSON object was found in your reply".to_string(),
        ParseError::Repairable(vs) => vs
            .iter()
            .map(|v| format!("- {v}"))
            .collect::<Vec<_>>()
            .join("\n"),
    };
    chat_req
        .messages
        .push(ChatMessage::text("assistant", first.content.clone()));
    chat_req.messages.push(ChatMessage::text(
        "user",
        format!(
            "Your previous reply was not a valid Critique document:\n{detail}\n\n\
             Reply again with exactly one corrected JSON object and nothing else."
        ),
    ));
    let second = chat.chat(&chat_req)?;
    match parse_critique(&second.content) {
        Ok(mut critique) => {
            sort_issues(&mut critique);
            Ok((critique, 2))
        }
        Err(err) => Err(PipelineError::CritiqueUnusable(err.to_string())),
    }
}

/// True iff the critique declares itself satisfied or no issue reaches the
/// configured severity threshold.
pub fn is_satisfied(c: &Critique, cfg: &RunConfig) -> bool {
    c.satisfied
        || !c
            .issues
            .iter()
            .any(|i| i.severity >= cfg.satisfaction_severity_threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::ScriptedChatBackend;
    use crate::model::{Dimension, Issue};

    fn tiny_png() -> Vec<u8> {
        crate::pngio::encode_rgb(1, 1, &[0, 0, 0], &[]).unwrap()
    }

    fn artifact() -> ImageArtifact {
        let png = tiny_png();
        ImageArtifact {
            id: crate::backends::sha256_hex(&png)[..16].to_string(),
            png,
            width: 1,
            height: 1,
            iteration: 0,
            seed: 7,
            parent: None,
        }
    }

    fn prompt() -> Prompt {
        Prompt::new("p1", "a vintage book cover titled 'The AI Era'")
    }

    fn aug() -> AugmentedPrompt {
        AugmentedPrompt::passthrough(&prompt())
    }

    #[test]
    fn request_embeds_all_nine_dimension_tokens_and_the_image() {
        let req = render_critic_request(&prompt(), &aug(), &artifact(), "m").unwrap();
        let system = req.messages[0].joined_text();
        for d in Dimension::ALL {
            assert!(system.contains(d.name()), "missing {d}");
        }
        assert!(matches!(req.messages[1].content[1], ContentPart::Image { .. }));
    }

    #[test]
    fn one_by_one_png_is_accepted() {
        assert!(render_critic_request(&prompt(), &aug(), &artifact(), "m").is_ok());
    }

    #[test]
    fn corrupted_png_fails_before_any_call() {
        let mut img = artifact();
        img.png = b"not a png".to_vec();
        assert!(render_critic_request(&prompt(), &aug(), &img, "m").is_err());
    }

    #[test]
    fn text_issue_critique_parses_with_target_text() {
        let body = r#"{
            "issues": [{"dimension": "Text", "severity": 2,
                        "directive": "Incorporate 'AI Era' text more clearly on the book cover",
                        "target_text": "AI Era"}],
            "overall_comment": "title illegible",
            "satisfied": false
        }"#;
        let chat = ScriptedChatBackend::sequence(vec![Ok(body.to_string())]);
        let (critique, calls) =
            critique_image(&prompt(), &aug(), &artifact(), &chat, &RunConfig::default()).unwrap();
        assert_eq!(calls, 1);
        assert_eq!(critique.issues.len(), 1);
        assert_eq!(critique.issues[0].dimension, Dimension::Text);
        assert_eq!(critique.issues[0].target_text.as_deref(), Some("AI Era"));
    }

    #[test]
    fn empty_satisfied_critique_parses() {
        let chat = ScriptedChatBackend::sequence(vec![Ok(
            r#"{"issues": [], "overall_comment": "", "satisfied": true}"#.to_string(),
        )]);
        let (critique, _) =
            critique_image(&prompt(), &aug(), &artifact(), &chat, &RunConfig::default()).unwrap();
        assert!(critique.satisfied);
        assert!(critique.issues.is_empty());
    }

    #[test]
    fn issues_are_sorted_by_severity_then_dimension() {
        let body = r#"{
            "issues": [
                {"dimension": "Color", "severity": 1, "directive": "warmer palette"},
                {"dimension": "Pose", "severity": 3, "directive": "fix the arm"},
                {"dimension": "Obj", "severity": 3, "directive": "add the second cat"}
            ],
            "overall_comment": "", "satisfied": false
        }"#;
        let chat = ScriptedChatBackend::sequence(vec![Ok(body.to_string())]);
        let (critique, _) =
            critique_image(&prompt(), &aug(), &artifact(), &chat, &RunConfig::default()).unwrap();
        let order: Vec<(u8, Dimension)> =
            critique.issues.iter().map(|i| (i.severity, i.dimension)).collect();
        assert_eq!(
            order,
            vec![(3, Dimension::Obj), (3, Dimension::Pose), (1, Dimension::Color)]
        );
    }

    #[test]
    fn malformed_twice_fails_the_iteration() {
        let chat = ScriptedChatBackend::sequence(vec![
            Ok("garbage".to_string()),
            Ok("more garbage".to_string()),
        ]);
        let result = critique_image(&prompt(), &aug(), &artifact(), &chat, &RunConfig::default());
        assert!(matches!(result, Err(PipelineError::CritiqueUnusable(_))));
        assert_eq!(chat.calls(), 2);
    }

    #[test]
    fn satisfaction_threshold_behaviour() {
        let cfg = RunConfig::default();
        let mk = |severity| Critique {
            issues: vec![Issue {
                dimension: Dimension::Light,
                severity,
                region: None,
                directive: "brighten".into(),
                target_text: None,
            }],
            overall_comment: String::new(),
            satisfied: false,
        };
        let empty = Critique { issues: vec![], overall_comment: String::new(), satisfied: false };
        assert!(is_satisfied(&empty, &cfg));
        assert!(is_satisfied(&mk(1), &cfg));
        assert!(!is_satisfied(&mk(2), &cfg));
    }

    #[test]
    fn is_satisfied_is_monotone_in_the_threshold() {
        let c = Critique {
            issues: vec![Issue {
                dimension: Dimension::FX,
                severity: 2,
                region: None,
                directive: "more glow".into(),
                target_text: None,
            }],
            overall_comment: String::new(),
            satisfied: false,
        };
        let mut prev = false;
        for threshold in 1..=3 {
            let cfg = RunConfig {
                satisfaction_severity_threshold: threshold,
                ..RunConfig::default()
            };
            let now = is_satisfied(&c, &cfg);
            assert!(!prev || now, "raising the threshold flipped true -> false");
            prev = now;
        }
    }
}
