//! Calibrated closed-loop simulator: a latent nine-dimension quality state
//! that the critic observes and refinement pulls toward an asymptote. The
//! state travels inside the generated PNG's text chunk so the pipeline stays
//! image-in/image-out.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::{
    decode_b64, encode_b64, BackendError, ChatBackend, ChatRequest, ChatResponse, ContentPart,
    T2IRequest, T2IResponse, T2iBackend,
};
use crate::ippa::AugmentedPromptDoc;
use crate::model::{
    canonical_json, Ablation, Critique, Dimension, DimensionScores, Emphasis, Entity, Issue,
    ModelError, SimConfig, Violation,
};
use crate::pngio;

/// Starting latent quality with augmented prompts, canonical dimension order.
pub const DEFAULT_PROFILE: [f64; 9] = [2.85, 3.20, 3.60, 3.35, 2.85, 2.05, 3.25, 2.15, 2.40];

/// Where refinement converges per dimension.
pub const QUALITY_ASYMPTOTE: [f64; 9] = [2.95, 3.32, 3.70, 3.45, 2.91, 2.60, 3.55, 2.58, 2.62];

/// How much augmentation lifts each dimension's starting point; subtracted
/// from the default profile under the no_ippa ablation.
pub const IPPA_PROFILE_GAP: [f64; 9] = [0.15, 0.17, 0.15, 0.15, 0.11, 0.20, 0.15, 0.13, 0.12];

const STATE_CHUNK_KEY: &str = "lumigen-sim-state";

pub fn profile_for(ablation: Ablation) -> [f64; 9] {
    match ablation {
        Ablation::NoIppa => {
            let mut p = DEFAULT_PROFILE;
            for (v, gap) in p.iter_mut().zip(IPPA_PROFILE_GAP) {
                *v -= gap;
            }
            p
        }
        _ => DEFAULT_PROFILE,
    }
}

/// Latent simulator state. `seed` and `step` identify the noise stream, so a
/// state decoded from an image continues deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub q: [f64; 9],
    pub seed: u64,
    pub step: u64,
}

fn clamp(v: f64) -> f64 {
    v.clamp(0.0, 5.0)
}

/// Counter-based noise stream: each (seed, purpose, a, b) tuple opens an
/// independent, reproducible generator.
fn stream(seed: u64, purpose: &str, a: u64, b: u64) -> rand_chacha::ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(purpose.as_bytes());
    hasher.update(a.to_le_bytes());
    hasher.update(b.to_le_bytes());
    let digest = hasher.finalize();
    rand_chacha::ChaCha8Rng::from_seed(digest.into())
}

fn normal_draws(seed: u64, purpose: &str, a: u64, b: u64, sigma: f64) -> [f64; 9] {
    let mut out = [0.0; 9];
    if sigma <= 0.0 {
        return out;
    }
    let mut rng = stream(seed, purpose, a, b);
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    for v in &mut out {
        *v = normal.sample(&mut rng);
    }
    out
}

/// Initialize latent quality around a profile.
pub fn sim_init(profile: &[f64; 9], seed: u64, sigma: f64) -> Result<SimState, ModelError> {
    if !profile.iter().all(|v| (0.0..=5.0).contains(v)) {
        return Err(ModelError::Invalid(vec![Violation::new(
            "SimState.profile",
            "values must lie in [0, 5]",
        )]));
    }
    let noise = normal_draws(seed, "init", 0, 0, sigma);
    let mut q = [0.0; 9];
    for i in 0..9 {
        q[i] = clamp(profile[i] + noise[i]);
    }
    Ok(SimState { q, seed, step: 0 })
}

const CRITIC_PHRASES: [&str; 9] = [
    "Render the described objects faithfully and completely",
    "Make the background coherent with the scene",
    "Match the requested color palette",
    "Add richer, more physical surface texture",
    "Correct the lighting to match the described atmosphere",
    "Incorporate the requested text more clearly and legibly",
    "Rebalance the composition so elements are logically arranged",
    "Adjust human pose to be more relaxed and natural",
    "Strengthen the requested visual effects",
];

/// Observe the state and emit issues for every dimension seen below `tau`.
/// Severity: 3 below tau-1, 2 below tau-0.5, else 1.
pub fn sim_critic(state: &SimState, tau: f64, sigma: f64) -> Critique {
    let noise = normal_draws(state.seed, "critic", state.step, 0, sigma);
    let mut issues = Vec::new();
    for (i, d) in Dimension::ALL.iter().enumerate() {
        let observed = state.q[i] + noise[i];
        if observed < tau {
            let severity = if observed < tau - 1.0 {
                3
            } else if observed < tau - 0.5 {
                2
            } else {
                1
            };
            issues.push(Issue {
                dimension: *d,
                severity,
                region: None,
                directive: CRITIC_PHRASES[i].to_string(),
                target_text: None,
            });
        }
    }
    issues.sort_by_key(|i| (std::cmp::Reverse(i.severity), i.dimension.index()));
    let satisfied = !issues.iter().any(|i| i.severity >= 2);
    Critique {
        issues,
        overall_comment: format!("simulated critique at step {}", state.step),
        satisfied,
    }
}

/// Advance the state one refinement: targeted dimensions approach the
/// asymptote geometrically at rate `alpha`, untargeted dimensions receive a
/// 5% spillover of the same pull, all dimensions take additive noise.
pub fn sim_step(state: &SimState, targeted: &[Dimension], alpha: f64, sigma: f64) -> SimState {
    let noise = normal_draws(state.seed, "step", state.step, 0, sigma);
    let mut q = [0.0; 9];
    for (i, d) in Dimension::ALL.iter().enumerate() {
        let rate = if targeted.contains(d) { alpha } else { 0.05 * alpha };
        let pulled = state.q[i] + rate * (QUALITY_ASYMPTOTE[i] - state.q[i]);
        q[i] = clamp(pulled + noise[i]);
    }
    SimState { q, seed: state.seed, step: state.step + 1 }
}

/// Noisy observation of the latent quality; `nonce` distinguishes repeated
/// observations of the same state.
pub fn sim_observe(state: &SimState, nonce: u64, sigma: f64) -> DimensionScores {
    let noise = normal_draws(state.seed, "observe", state.step, nonce, sigma);
    let mut values = [0.0; 9];
    for i in 0..9 {
        values[i] = clamp(state.q[i] + noise[i]);
    }
    DimensionScores::from_array(values)
}

// ---------------------------------------------------------------------------
// State-in-image transport
// ---------------------------------------------------------------------------

/// Render a PNG whose pixels sketch the latent quality and whose text chunk
/// carries the exact state.
pub fn encode_state_png(state: &SimState, width: u32, height: u32) -> Result<Vec<u8>, BackendError> {
    let mut pixels = vec![0u8; (width * height * 3) as usize];
    for j in 0..height {
        for i in 0..width {
            // Nine vertical bands, brightness proportional to quality.
            let band = (i * 9 / width.max(1)).min(8) as usize;
            let level = (state.q[band] / 5.0 * 255.0) as u8;
            let idx = ((j * width + i) * 3) as usize;
            pixels[idx] = level;
            pixels[idx + 1] = 255 - level;
            pixels[idx + 2] = (state.step * 40 % 256) as u8;
        }
    }
    pngio::encode_rgb(width, height, &pixels, &[(STATE_CHUNK_KEY.to_string(), canonical_json(state))])
        .map_err(|e| BackendError::Other(e.to_string()))
}

pub fn decode_state_png(bytes: &[u8]) -> Result<SimState, BackendError> {
    let decoded = pngio::decode(bytes).map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
    let chunk = decoded
        .text_chunks
        .iter()
        .find(|(k, _)| k == STATE_CHUNK_KEY)
        .ok_or_else(|| BackendError::MalformedResponse("image carries no simulator state".into()))?;
    serde_json::from_str(&chunk.1).map_err(|e| BackendError::MalformedResponse(e.to_string()))
}

// ---------------------------------------------------------------------------
// Simulator backends
// ---------------------------------------------------------------------------

/// Chat backend that answers augmentation requests deterministically and
/// critique/judge requests from the state embedded in the request image.
pub struct SimChatBackend {
    pub sim: SimConfig,
}

impl SimChatBackend {
    fn augmentation_response(&self, req: &ChatRequest) -> Result<String, BackendError> {
        // The user payload quotes the raw prompt as a JSON string literal.
        let payload = req.messages.last().map(|m| m.joined_text()).unwrap_or_default();
        let raw = payload
            .lines()
            .last()
            .and_then(|line| serde_json::from_str::<String>(line.trim()).ok())
            .ok_or_else(|| BackendError::Other("augmentation payload missing prompt".into()))?;
        let doc = AugmentedPromptDoc {
            narrative: format!(
                "{raw}, depicted in rich detail with a coherent background, faithful colors, \
                 physical textures, atmospheric lighting, and a balanced composition"
            ),
            entities: vec![Entity { name: raw.clone(), attributes: vec!["detailed".into()] }],
            relations: Vec::new(),
            style: vec!["high detail".into()],
            emphases: vec![
                Emphasis { dimension: Dimension::Text, directive: "render any text legibly".into() },
                Emphasis { dimension: Dimension::Pose, directive: "keep poses natural".into() },
            ],
            stages: Vec::new(),
        };
        Ok(canonical_json(&doc))
    }

    fn image_state(req: &ChatRequest) -> Result<SimState, BackendError> {
        for msg in &req.messages {
            for part in &msg.content {
                if let ContentPart::Image { data_b64 } = part {
                    return decode_state_png(&decode_b64(data_b64)?);
                }
            }
        }
        Err(BackendError::Other("request carries no image".into()))
    }
}

impl ChatBackend for SimChatBackend {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let system = req.messages.first().map(|m| m.joined_text()).unwrap_or_default();
        if system.contains("AugmentedPrompt document schema") {
            return Ok(ChatResponse::of(self.augmentation_response(req)?));
        }
        if system.contains("Critique schema") {
            let state = Self::image_state(req)?;
            let critique = sim_critic(&state, self.sim.tau, self.sim.sigma);
            return Ok(ChatResponse::of(canonical_json(&critique)));
        }
        if system.contains("nine dimensions on a 0-5 scale") {
            let state = Self::image_state(req)?;
            let scores = sim_observe(&state, 1, self.sim.sigma);
            return Ok(ChatResponse::of(format!(
                "{{\"scores\": {}}}",
                canonical_json(&scores.scores)
            )));
        }
        Err(BackendError::Other("unrecognized chat request template".into()))
    }
}

/// T2I backend that spawns and advances the latent state.
pub struct SimT2iBackend {
    pub sim: SimConfig,
    pub profile: [f64; 9],
}

impl T2iBackend for SimT2iBackend {
    fn t2i(&self, req: &T2IRequest) -> Result<T2IResponse, BackendError> {
        let state = match req.mode {
            crate::backends::T2IMode::Txt2Img => sim_init(&self.profile, req.seed, self.sim.sigma)
                .map_err(|e| BackendError::Other(e.to_string()))?,
            _ => {
                let init = req
                    .init_image_b64
                    .as_ref()
                    .ok_or_else(|| BackendError::Other("refinement without init image".into()))?;
                let prev = decode_state_png(&decode_b64(init)?)?;
                sim_step(&prev, &req.extensions.targeted_dimensions, self.sim.alpha, self.sim.sigma)
            }
        };
        let png = encode_state_png(&state, req.width, req.height)?;
        Ok(T2IResponse { image_b64: encode_b64(&png), seed: req.seed })
    }
}

/// Scores artifacts by decoding their embedded state and observing it.
pub struct SimScorer {
    pub sim: SimConfig,
}

impl crate::orchestrator::Scorer for SimScorer {
    fn score(&self, img: &crate::model::ImageArtifact) -> Option<DimensionScores> {
        let state = decode_state_png(&img.png).ok()?;
        Some(sim_observe(&state, 0, self.sim.sigma))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless() -> SimConfig {
        SimConfig { sigma: 0.0, ..SimConfig::default() }
    }

    #[test]
    fn default_profile_with_zero_noise_matches_the_initial_row() {
        let state = sim_init(&DEFAULT_PROFILE, 7, 0.0).unwrap();
        assert_eq!(state.q, DEFAULT_PROFILE);
    }

    #[test]
    fn no_ippa_profile_subtracts_the_gap() {
        let p = profile_for(Ablation::NoIppa);
        assert!((p[0] - 2.70).abs() < 1e-12);
        assert!((p[5] - 1.85).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_profile_is_rejected() {
        let mut p = DEFAULT_PROFILE;
        p[3] = 6.0;
        assert!(sim_init(&p, 0, 0.0).is_err());
    }

    #[test]
    fn critic_severities_follow_the_thresholds() {
        let mut state = sim_init(&DEFAULT_PROFILE, 0, 0.0).unwrap();
        let critique = sim_critic(&state, 3.0, 0.0);
        let text = critique.issues.iter().find(|i| i.dimension == Dimension::Text).unwrap();
        assert_eq!(text.severity, 2); // 2.05 < 2.5 but not < 2.0
        let pose = critique.issues.iter().find(|i| i.dimension == Dimension::Pose).unwrap();
        assert_eq!(pose.severity, 2); // 2.15 < 2.5
        assert!(!critique.satisfied);

        state.q = [5.0; 9];
        let critique = sim_critic(&state, 3.0, 0.0);
        assert!(critique.issues.is_empty());
        assert!(critique.satisfied);
    }

    #[test]
    fn step_matches_the_calibrated_first_refinement_jump() {
        let state = sim_init(&DEFAULT_PROFILE, 0, 0.0).unwrap();
        let next = sim_step(&state, &[Dimension::Text], 0.55, 0.0);
        let text = next.q[Dimension::Text.index()];
        assert!((text - 2.3525).abs() < 1e-12, "got {text}");
    }

    #[test]
    fn asymptote_is_a_fixed_point() {
        let state = SimState { q: QUALITY_ASYMPTOTE, seed: 0, step: 0 };
        let next = sim_step(&state, &Dimension::ALL, 0.55, 0.0);
        for i in 0..9 {
            assert!((next.q[i] - QUALITY_ASYMPTOTE[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn three_targeted_steps_approach_the_third_refinement_value() {
        let mut state = sim_init(&DEFAULT_PROFILE, 0, 0.0).unwrap();
        for _ in 0..3 {
            state = sim_step(&state, &[Dimension::Text], 0.55, 0.0);
        }
        let text = state.q[Dimension::Text.index()];
        assert!((text - 2.50).abs() <= 0.10, "got {text}");
    }

    #[test]
    fn step_is_a_contraction_toward_the_asymptote() {
        let state = sim_init(&DEFAULT_PROFILE, 3, 0.0).unwrap();
        let next = sim_step(&state, &Dimension::ALL, 0.55, 0.0);
        for i in 0..9 {
            let before = (state.q[i] - QUALITY_ASYMPTOTE[i]).abs();
            let after = (next.q[i] - QUALITY_ASYMPTOTE[i]).abs();
            assert!(after <= 0.45 * before + 1e-12);
        }
    }

    #[test]
    fn observation_is_deterministic_and_unbiased() {
        let state = sim_init(&DEFAULT_PROFILE, 11, 0.05).unwrap();
        let a = sim_observe(&state, 0, 0.05);
        let b = sim_observe(&state, 0, 0.05);
        assert_eq!(a, b);
        let exact = sim_observe(&state, 0, 0.0);
        assert_eq!(exact.as_array().unwrap(), state.q);

        // Mean over 1000 observations stays within 0.01 of the latent state.
        let mut sums = [0.0; 9];
        for nonce in 0..1000 {
            let obs = sim_observe(&state, nonce, 0.05).as_array().unwrap();
            for i in 0..9 {
                sums[i] += obs[i];
            }
        }
        for i in 0..9 {
            assert!((sums[i] / 1000.0 - state.q[i]).abs() < 0.01);
        }
    }

    #[test]
    fn state_roundtrips_through_the_png_text_chunk() {
        let state = sim_init(&DEFAULT_PROFILE, 42, 0.05).unwrap();
        let png = encode_state_png(&state, 32, 32).unwrap();
        assert_eq!(decode_state_png(&png).unwrap(), state);
        assert_eq!(pngio::probe_dimensions(&png).unwrap(), (32, 32));
    }

    #[test]
    fn same_seed_gives_bit_identical_trajectories() {
        let run = |seed: u64| {
            let mut state = sim_init(&DEFAULT_PROFILE, seed, 0.05).unwrap();
            for _ in 0..5 {
                state = sim_step(&state, &[Dimension::Text, Dimension::Pose], 0.55, 0.05);
            }
            canonical_json(&state)
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn sim_chat_backend_serves_augmentation_and_critique() {
        let chat = SimChatBackend { sim: noiseless() };
        let req = crate::ippa::to_chat_request(
            &crate::ippa::render_ippa_request(&crate::model::Prompt::new("p", "a city night scene"))
                .unwrap(),
            "sim",
        );
        let resp = chat.chat(&req).unwrap();
        let aug = crate::ippa::parse_ippa_response(
            &resp.content,
            &crate::model::Prompt::new("p", "a city night scene"),
        )
        .unwrap();
        assert!(aug.narrative.starts_with("a city night scene"));

        let state = sim_init(&DEFAULT_PROFILE, 5, 0.0).unwrap();
        let png = encode_state_png(&state, 16, 16).unwrap();
        let img = crate::model::ImageArtifact {
            id: "x".into(),
            png,
            width: 16,
            height: 16,
            iteration: 0,
            seed: 5,
            parent: None,
        };
        let creq = crate::critic::render_critic_request(
            &crate::model::Prompt::new("p", "a city night scene"),
            &aug,
            &img,
            "sim",
        )
        .unwrap();
        let cresp = chat.chat(&creq).unwrap();
        let critique: Critique = serde_json::from_str(&cresp.content).unwrap();
        assert!(critique.issues.iter().any(|i| i.dimension == Dimension::Text));
    }
}
