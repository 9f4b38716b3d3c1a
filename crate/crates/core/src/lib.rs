//! Schema-guided failure attribution for multi-agent trajectories.
//!
//! Failed runs with annotated decisive errors are distilled into reusable
//! error schemata, kept in an embedding-indexed cache, and retrieved as
//! references when diagnosing new failures. The same seeds drive an error
//! injection pipeline for building labelled corpora.

pub mod config;
pub mod embedding;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod extraction;
pub mod llm;
pub mod management;
pub mod model;
pub mod prompts;
pub mod recognition;
pub mod retry;
pub mod sections;
pub mod store;
pub mod synthesis;

pub use config::EngineConfig;
pub use embedding::{cosine, Embedder, EmbeddingVector, HashedEmbedder, RemoteEmbedder};
pub use engine::{Backends, Engine};
pub use error::{Error, Result};
pub use evaluation::{accuracy_at_k, evaluate_run, leakage_audit, EvalConfig, EvalMode, EvalRecord, EvalReport};
pub use llm::{ChatBackend, ChatMessage, ChatRequest, ChatResponse, FnBackend, OpenAiChat, ReplayBackend, ReplayMode};
pub use management::{apply_feedback, Feedback, FeedbackOutcome, ManagementConfig, ManagementState};
pub use model::{DiagnosisResult, ErrorAnnotation, Outcome, Step, StepBase, Trajectory, TrajectoryFormat};
pub use recognition::{recognize, RecognitionOptions};
pub use store::{CacheEntry, ErrorSchema, Hit, SchemaCache};
