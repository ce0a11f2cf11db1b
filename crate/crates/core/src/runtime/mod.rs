//! Serving side: versioned bundle storage, hybrid understanding and the
//! procedural dialogue subroutines.

mod bundle;
mod dialogue;
mod nlu;
mod store;

use thiserror::Error;

pub use bundle::{SkillModelBundle, BUNDLE_FORMAT_VERSION};
pub use dialogue::{
    dialogue_step, slot_prompt, step_budget, DialogueDirective, DialogueInput, DialoguePhase, DialogueState, MAX_FAILURES,
};
pub use nlu::{CascadeOrder, Diagnostics, NluConfig, NluPath, NluResult, SkillRuntime, DEFAULT_REJECTION_THRESHOLD};
pub use store::{route_invocation, valid_skill_id, Invocation, ModelStore, BUNDLE_FILE, LATEST_FILE};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("unknown skill {0:?}")]
    UnknownSkill(String),
    #[error("skill {skill:?} has no version {version}")]
    VersionNotFound { skill: String, version: u64 },
    #[error("invalid skill id {0:?}")]
    InvalidSkillId(String),
    #[error("bundle digest mismatch (truncated or corrupted file)")]
    DigestMismatch,
    #[error("bundle is missing a component: {0}")]
    MissingComponent(String),
    #[error("bundle format error: {0}")]
    Format(String),
    #[error(transparent)]
    Grammar(#[from] crate::grammar::GrammarError),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
