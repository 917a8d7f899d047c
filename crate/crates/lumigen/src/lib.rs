//! LumiGen: a closed-loop refinement engine for text-to-image generation.
//!
//! A raw prompt is augmented into a structured plan, an initial image is
//! generated, and a multimodal critic then drives an iterative loop: critique
//! the current image, compile the critique into typed control signals, and
//! refine. Backends are pluggable (live HTTP, scripted mocks, or a calibrated
//! simulator) and every run is recorded for deterministic replay.

pub mod backends;
pub mod critic;
pub mod eval;
pub mod ippa;
pub mod model;
pub mod orchestrator;
pub mod pngio;
pub mod refine;
pub mod structured;
pub mod translator;
