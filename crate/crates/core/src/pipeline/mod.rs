//! Workflow engine: activities wrap components, artifacts carry data between
//! them, recipes are captured as serializable DAGs and run by an executor.
//!
//! ```text
//! RecipeBuilder ──capture──▶ RecipeDag ──execute(Executor)──▶ RunReport
//!                                │
//!                                └── generate_cli ──▶ CommandSpec
//! ```

mod artifact;
mod cli;
mod execute;
mod recipe;

use thiserror::Error;

pub(crate) use artifact::write_atomic;
pub use artifact::{Artifact, ArtifactEnv, ArtifactUri, KvStore, MemStore, ARTIFACT_ROOT_ENV};
pub use cli::{generate_cli, CommandSpec, FlagSpec, FlagTarget, RESERVED_FLAGS};
pub use execute::{
    execute, ActivityRecord, ActivityStatus, CancelToken, ExecuteOptions, Executor, RetryPolicy, RunReport,
};
pub use recipe::{
    deserialize_dag, serialize_dag, ActivityContext, ActivityFn, ActivityRegistry, ActivitySpec, Node, NodeBuilder,
    ParamKind, ParamSpec, RecipeBuilder, RecipeDag, DAG_SCHEMA_VERSION,
};

/// Error type returned by activity bodies.
pub type ActivityError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid artifact URI {0:?}")]
    BadUri(String),
    #[error("artifact {0} does not exist")]
    MissingArtifact(String),
    #[error("artifact {0} was already written in this run")]
    AlreadyWritten(String),
    #[error("unknown parameter ${{{0}}}")]
    UnknownParam(String),
    #[error("missing value for parameter {0:?}")]
    MissingParam(String),
    #[error("parameter {name:?} expects {expected}, got {got}")]
    ParamType { name: String, expected: &'static str, got: String },
    #[error("unregistered activity {0:?}")]
    UnknownActivity(String),
    #[error("activity {activity:?} is already registered")]
    DuplicateActivity { activity: String },
    #[error("node {node:?}: {message}")]
    BadNode { node: String, message: String },
    #[error("duplicate node id {0:?}")]
    DuplicateNode(String),
    #[error("artifact {uri} has two producers: {first} and {second}")]
    MultipleProducers { uri: String, first: String, second: String },
    #[error("cycle detected through nodes {0:?}")]
    Cycle(Vec<String>),
    #[error("DAG schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u64, expected: u64 },
    #[error("malformed DAG: {0}")]
    Json(#[from] serde_json::Error),
    #[error("flag --{0} is reserved")]
    ReservedFlag(String),
    #[error("flag --{0} is generated twice")]
    DuplicateFlag(String),
    #[error("the {0} executor is not available in this build")]
    Unsupported(String),
    #[error("invalid executor {0:?} (expected local, parallel or parallel:N)")]
    BadExecutor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
