//! Core of the MACI experiment platform: the template/study/experiment
//! model, deterministic study expansion, the orchestration state machine
//! with its event-log store, and the analysis engine.

pub mod analysis;
pub mod expand;
pub mod model;
pub mod orchestrator;
pub mod seed;

pub use expand::{
    estimate_duration, expand_study, instance_count, validate_study, validate_template,
    ValidationError, ValidationErrors,
};
pub use seed::derive_seed;
