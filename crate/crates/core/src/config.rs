//! Engine configuration: a flat TOML document with `${VAR}` interpolation.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::embedding::{DEFAULT_CONDENSE_CHARS, DEFAULT_HASHED_DIM};
use crate::error::{Error, Result};
use crate::evaluation::DEFAULT_K_LIST;
use crate::extraction::{GenerationOptions, DEFAULT_CLUSTER_THRESHOLD};
use crate::llm::DEFAULT_MAX_IN_FLIGHT;
use crate::management::ManagementConfig;
use crate::model::StepBase;
use crate::recognition::{RecognitionOptions, DEFAULT_PROMPT_CHARS};
use crate::synthesis::SynthesisOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatBackendKind {
    /// OpenAI-compatible `/chat/completions` endpoint.
    Openai,
    /// Answers only from `replay_tape`.
    Replay,
    /// Serves from `replay_tape`, forwarding misses to the endpoint and
    /// appending them.
    Record,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingBackendKind {
    Hashed,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub chat_backend: ChatBackendKind,
    pub chat_base_url: String,
    pub chat_api_key: Option<String>,
    /// Detector and schema generator.
    pub chat_model: String,
    /// Injection planner; defaults to `chat_model`.
    pub planner_model: Option<String>,
    /// Injection rewriter; defaults to `chat_model`.
    pub injector_model: Option<String>,
    pub replay_tape: Option<PathBuf>,
    pub max_in_flight: usize,

    pub embedding_backend: EmbeddingBackendKind,
    pub embedding_dim: usize,
    pub embedding_model: String,
    /// Defaults to `chat_base_url`.
    pub embedding_base_url: Option<String>,
    /// Defaults to `chat_api_key`.
    pub embedding_api_key: Option<String>,

    pub store_path: PathBuf,
    /// LRU bound on the cache; unbounded when absent.
    pub max_entries: Option<usize>,
    /// Step numbering used by Who&When inputs and detector answers.
    pub step_base: StepBase,

    pub k: usize,
    pub k_list: Vec<usize>,
    pub cluster_threshold: f64,
    pub delta: f64,
    pub theta_hot: u64,
    pub m_candidates: usize,
    pub replay_set_size: usize,

    pub condense_chars: usize,
    pub prompt_chars: usize,
    pub render_chars: usize,
    pub max_schema_chars: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let generation = GenerationOptions::default();
        let management = ManagementConfig::default();
        EngineConfig {
            chat_backend: ChatBackendKind::Openai,
            chat_base_url: "https://api.openai.com/v1".into(),
            chat_api_key: None,
            chat_model: "gpt-4o".into(),
            planner_model: None,
            injector_model: None,
            replay_tape: None,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            embedding_backend: EmbeddingBackendKind::Hashed,
            embedding_dim: DEFAULT_HASHED_DIM,
            embedding_model: "text-embedding-3-small".into(),
            embedding_base_url: None,
            embedding_api_key: None,
            store_path: PathBuf::from("errsight-store.jsonl"),
            max_entries: None,
            step_base: StepBase::ZeroBased,
            k: 5,
            k_list: DEFAULT_K_LIST.to_vec(),
            cluster_threshold: DEFAULT_CLUSTER_THRESHOLD,
            delta: management.delta,
            theta_hot: management.theta_hot,
            m_candidates: management.m_candidates,
            replay_set_size: management.replay_set_size,
            condense_chars: DEFAULT_CONDENSE_CHARS,
            prompt_chars: DEFAULT_PROMPT_CHARS,
            render_chars: generation.render_chars,
            max_schema_chars: generation.max_schema_chars,
        }
    }
}

fn env_ref() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}").unwrap())
}

/// Replaces `${VAR}` with the value of environment variable `VAR`.
pub fn interpolate_env(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String> {
    let mut missing = Vec::new();
    let out = env_ref().replace_all(text, |c: &regex::Captures| match lookup(&c[1]) {
        Some(v) => v,
        None => {
            missing.push(c[1].to_string());
            String::new()
        }
    });
    if missing.is_empty() {
        Ok(out.into_owned())
    } else {
        Err(Error::Config(format!("undefined environment variable(s): {}", missing.join(", "))))
    }
}

impl EngineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let text = interpolate_env(text, |k| std::env::var(k).ok())?;
        let cfg: EngineConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.cluster_threshold > 0.0 && self.cluster_threshold < 1.0) {
            return bad(format!("cluster_threshold must lie in (0, 1), got {}", self.cluster_threshold));
        }
        if self.k < 1 {
            return bad("k must be >= 1".into());
        }
        if self.k_list.is_empty() {
            return bad("k_list must not be empty".into());
        }
        if self.embedding_dim < 1 {
            return bad("embedding_dim must be >= 1".into());
        }
        if self.max_in_flight < 1 {
            return bad("max_in_flight must be >= 1".into());
        }
        if self.max_entries == Some(0) {
            return bad("max_entries must be >= 1 when set".into());
        }
        for (name, v) in [
            ("condense_chars", self.condense_chars),
            ("prompt_chars", self.prompt_chars),
            ("render_chars", self.render_chars),
            ("max_schema_chars", self.max_schema_chars),
        ] {
            if v == 0 {
                return bad(format!("{name} must be > 0"));
            }
        }
        if self.chat_backend != ChatBackendKind::Openai && self.replay_tape.is_none() {
            return bad("replay_tape is required for the replay and record backends".into());
        }
        self.management().check()
    }

    pub fn recognition(&self) -> RecognitionOptions {
        RecognitionOptions {
            condense_chars: self.condense_chars,
            prompt_chars: self.prompt_chars,
            answer_base: self.step_base,
        }
    }

    pub fn generation(&self) -> GenerationOptions {
        GenerationOptions {
            render_chars: self.render_chars,
            condense_chars: self.condense_chars,
            max_schema_chars: self.max_schema_chars,
        }
    }

    pub fn management(&self) -> ManagementConfig {
        ManagementConfig {
            delta: self.delta,
            theta_hot: self.theta_hot,
            m_candidates: self.m_candidates,
            replay_set_size: self.replay_set_size,
            generation: self.generation(),
            recognition: self.recognition(),
        }
    }

    pub fn synthesis(&self) -> SynthesisOptions {
        SynthesisOptions { condense_chars: self.condense_chars, render_chars: self.render_chars }
    }

    pub fn planner_model(&self) -> &str {
        self.planner_model.as_deref().unwrap_or(&self.chat_model)
    }

    pub fn injector_model(&self) -> &str {
        self.injector_model.as_deref().unwrap_or(&self.chat_model)
    }

    /// Path of the side file holding diagnosed trajectories, the annotated
    /// pool, retrieval associations and the feedback log.
    pub fn state_path(&self) -> PathBuf {
        let mut name = self.store_path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".state.json");
        self.store_path.with_file_name(name)
    }
}
