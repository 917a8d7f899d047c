//! Prompt parsing and augmentation: one LVLM call that turns a raw prompt
//! into a structured augmented prompt, with one-shot repair and a
//! deterministic pass-through fallback.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, ChatBackend, ChatMessage, ChatRequest};
use crate::model::{
    Ablation, AugmentedPrompt, Emphasis, Entity, Prompt, Relation, RunConfig, Validate, Violation,
};
use crate::structured::extract_first_json_object;

pub const IPPA_TEMPLATE: &str = include_str!("../assets/ippa_prompt.txt");
pub const IPPA_TEMPLATE_VERSION: &str = "ippa-v1";
pub const MAX_IPPA_CALLS: u32 = 2;

/// Planning is temperature-0 so augmentation is reproducible.
pub const PLANNING_TEMPERATURE: f64 = 0.0;
const MAX_TOKENS: u32 = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IppaRequest {
    pub system_instruction: String,
    pub user_payload: String,
    pub response_contract: String,
    pub template_version: String,
}

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("no JSON object found in response")]
    Unparseable,
    #[error("schema violation: {0:?}")]
    Repairable(Vec<Violation>),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("backend failure: {0}")]
    Backend(#[from] BackendError),
    #[error("invalid input: {0}")]
    Invalid(#[from] crate::model::ModelError),
    #[error("critic response unusable after repair: {0}")]
    CritiqueUnusable(String),
}

/// The document the LVLM emits; `source` is attached locally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedPromptDoc {
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

impl AugmentedPromptDoc {
    pub fn into_augmented(self, source: &Prompt) -> AugmentedPrompt {
        AugmentedPrompt {
            source: source.clone(),
            narrative: self.narrative,
            entities: self.entities,
            relations: self.relations,
            style: self.style,
            emphases: self.emphases,
            stages: self.stages,
        }
    }
}

/// Deterministic template instantiation for a raw prompt.
pub fn render_ippa_request(p: &Prompt) -> Result<IppaRequest, crate::model::ModelError> {
    p.ensure_valid()?;
    Ok(IppaRequest {
        system_instruction: IPPA_TEMPLATE.to_string(),
        user_payload: format!(
            "Raw prompt (id {}):\n{}",
            serde_json::to_string(&p.id).unwrap(),
            serde_json::to_string(&p.text).unwrap()
        ),
        response_contract: "AugmentedPrompt".to_string(),
        template_version: IPPA_TEMPLATE_VERSION.to_string(),
    })
}

pub fn to_chat_request(req: &IppaRequest, model: &str) -> ChatRequest {
    ChatRequest {
        model: model.to_string(),
        messages: vec![
            ChatMessage::text("system", req.system_instruction.clone()),
            ChatMessage::text("user", req.user_payload.clone()),
        ],
        temperature: PLANNING_TEMPERATURE,
        max_tokens: MAX_TOKENS,
    }
}

/// Extract and validate the first JSON object of an LVLM response.
pub fn parse_ippa_response(text: &str, p: &Prompt) -> Result<AugmentedPrompt, ParseError> {
    let json = extract_first_json_object(text).ok_or(ParseError::Unparseable)?;
    let doc: AugmentedPromptDoc = serde_json::from_str(json).map_err(|e| {
        ParseError::Repairable(vec![Violation::new("AugmentedPrompt", e.to_string())])
    })?;
    let aug = doc.into_augmented(p);
    let violations = aug.check();
    if violations.is_empty() {
        Ok(aug)
    } else {
        Err(ParseError::Repairable(violations))
    }
}

fn repair_message(previous: &str, err: &ParseError) -> String {
    let detail = match err {
        ParseError::Unparseable => "no JSON object was found in your reply".to_string(),
        ParseError::Repairable(vs) => vs
            .iter()
            .map(|v| format!("- {v}"))
            .collect::<Vec<_>>()
            .join("\n"),
    };
    format!(
        "Your previous reply was not a valid AugmentedPrompt document:\n{detail}\n\n\
         Previous reply:\n{previous}\n\n\
         Reply again with exactly one corrected JSON object and nothing else."
    )
}

/// Run augmentation against the chat backend. At most one repair re-prompt is
/// issued; if that also fails the raw prompt passes through unchanged. Under
/// the no_ippa ablation no backend call is made at all.
///
/// Returns the augmented prompt and the number of backend calls issued.
pub fn augment_prompt(
    p: &Prompt,
    chat: &dyn ChatBackend,
    cfg: &RunConfig,
) -> Result<(AugmentedPrompt, u32), PipelineError> {
    p.ensure_valid()?;
    if cfg.ablation == Ablation::NoIppa {
        return Ok((AugmentedPrompt::passthrough(p), 0));
    }
    let request = render_ippa_request(p)?;
    let mut chat_req = to_chat_request(&request, &cfg.endpoints.chat_model);
    let first = chat.chat(&chat_req)?;
    match parse_ippa_response(&first.content, p) {
        Ok(aug) => Ok((aug, 1)),
        Err(err) => {
            chat_req
                .messages
                .push(ChatMessage::text("assistant", first.content.clone()));
            chat_req
                .messages
                .push(ChatMessage::text("user", repair_message(&first.content, &err)));
            let second = chat.chat(&chat_req)?;
            match parse_ippa_response(&second.content, p) {
                Ok(aug) => Ok((aug, 2)),
                Err(_) => Ok((AugmentedPrompt::passthrough(p), 2)),
            }
        }
    }
}
