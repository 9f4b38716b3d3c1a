//! Long-lived engine: one schema cache, the management side state and the
//! configured backends, persisted next to each other on disk.

use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::config::{ChatBackendKind, EmbeddingBackendKind, EngineConfig};
use crate::embedding::{Embedder, HashedEmbedder, RemoteEmbedder};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_run, EvalConfig, EvalMode, EvalOutcome};
use crate::extraction::{extend_offline_cache, BuildReport};
use crate::llm::{ChatBackend, OpenAiChat, ReplayBackend, ReplayMode};
use crate::management::{apply_feedback, Feedback, FeedbackOutcome, ManagementState};
use crate::model::{DiagnosisResult, ErrorAnnotation, Trajectory};
use crate::recognition::{recognize_detailed, Recognition};
use crate::store::{CacheEntry, SchemaCache};
use crate::synthesis::{synthesize_dataset, Manifest};

/// Chat backends by role.
#[derive(Clone)]
pub struct Backends {
    pub detector: Arc<dyn ChatBackend>,
    pub planner: Arc<dyn ChatBackend>,
    pub injector: Arc<dyn ChatBackend>,
}

impl Backends {
    pub fn uniform(chat: Arc<dyn ChatBackend>) -> Self {
        Backends { detector: chat.clone(), planner: chat.clone(), injector: chat }
    }

    pub fn from_config(cfg: &EngineConfig) -> Result<Self> {
        let remote = |model: &str| -> Result<OpenAiChat> {
            Ok(OpenAiChat::new(&cfg.chat_base_url, cfg.chat_api_key.clone(), model)?
                .with_max_in_flight(cfg.max_in_flight))
        };
        match cfg.chat_backend {
            ChatBackendKind::Openai => Ok(Backends {
                detector: Arc::new(remote(&cfg.chat_model)?),
                planner: Arc::new(remote(cfg.planner_model())?),
                injector: Arc::new(remote(cfg.injector_model())?),
            }),
            kind => {
                let tape = cfg.replay_tape.as_ref().ok_or_else(|| Error::Config("replay_tape is not set".into()))?;
                let mode = match kind {
                    ChatBackendKind::Record => ReplayMode::Record(Arc::new(remote(&cfg.chat_model)?)),
                    _ => ReplayMode::Strict,
                };
                let base = ReplayBackend::open(tape, &cfg.chat_model, mode)?;
                Ok(Backends {
                    planner: Arc::new(base.with_model(cfg.planner_model())),
                    injector: Arc::new(base.with_model(cfg.injector_model())),
                    detector: Arc::new(base),
                })
            }
        }
    }
}

pub fn embedder_from_config(cfg: &EngineConfig) -> Result<Arc<dyn Embedder>> {
    Ok(match cfg.embedding_backend {
        EmbeddingBackendKind::Hashed => Arc::new(HashedEmbedder::new(cfg.embedding_dim)),
        EmbeddingBackendKind::Remote => Arc::new(RemoteEmbedder::new(
            cfg.embedding_base_url.as_deref().unwrap_or(&cfg.chat_base_url),
            cfg.embedding_api_key.clone().or_else(|| cfg.chat_api_key.clone()),
            &cfg.embedding_model,
            cfg.embedding_dim,
        )?),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub store_size: usize,
    pub store_hash: String,
    pub chat_model: String,
    pub embedding_backend: String,
    pub embedding_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaListing {
    pub id: String,
    pub source_trajectory_id: String,
    pub mistake_agent: String,
    pub mistake_step: usize,
    pub access_count: u64,
    pub last_hit: Option<DateTime<Utc>>,
    pub insert_seq: u64,
}

impl From<&CacheEntry> for SchemaListing {
    fn from(e: &CacheEntry) -> Self {
        SchemaListing {
            id: e.schema.id.clone(),
            source_trajectory_id: e.schema.source_trajectory_id.clone(),
            mistake_agent: e.schema.mistake_agent.clone(),
            mistake_step: e.schema.mistake_step,
            access_count: e.access_count,
            last_hit: e.last_hit,
            insert_seq: e.insert_seq,
        }
    }
}

pub struct Engine {
    cfg: EngineConfig,
    cache: SchemaCache,
    state: Mutex<ManagementState>,
    /// Serializes feedback-driven management.
    management: Mutex<()>,
    persist_lock: Mutex<()>,
    durable: bool,
    backends: Backends,
    embedder: Arc<dyn Embedder>,
}

impl Engine {
    /// Builds backends from `cfg` and restores the store and side state
    /// from `cfg.store_path` when present.
    pub fn open(cfg: EngineConfig) -> Result<Self> {
        let backends = Backends::from_config(&cfg)?;
        let embedder = embedder_from_config(&cfg)?;
        Self::open_with(cfg, backends, embedder)
    }

    /// As [`Engine::open`] with caller-provided backends.
    pub fn open_with(cfg: EngineConfig, backends: Backends, embedder: Arc<dyn Embedder>) -> Result<Self> {
        cfg.check()?;
        let cache = if cfg.store_path.exists() {
            SchemaCache::restore_expecting(&cfg.store_path, embedder.backend_tag(), embedder.dim())?
        } else {
            SchemaCache::new(embedder.backend_tag(), embedder.dim())
        }
        .with_max_entries(cfg.max_entries);
        let state_path = cfg.state_path();
        let state = if state_path.exists() {
            let text = std::fs::read_to_string(&state_path)?;
            serde_json::from_str(&text).map_err(|e| Error::Parse { offset: 0, message: e.to_string() })?
        } else {
            ManagementState::default()
        };
        Ok(Self::assemble(cfg, cache, state, backends, embedder, true))
    }

    /// Engine that never touches the filesystem.
    pub fn in_memory(cfg: EngineConfig, backends: Backends, embedder: Arc<dyn Embedder>) -> Result<Self> {
        cfg.check()?;
        let cache = SchemaCache::new(embedder.backend_tag(), embedder.dim()).with_max_entries(cfg.max_entries);
        Ok(Self::assemble(cfg, cache, ManagementState::default(), backends, embedder, false))
    }

    fn assemble(
        cfg: EngineConfig,
        cache: SchemaCache,
        state: ManagementState,
        backends: Backends,
        embedder: Arc<dyn Embedder>,
        durable: bool,
    ) -> Self {
        Engine {
            cfg,
            cache,
            state: Mutex::new(state),
            management: Mutex::new(()),
            persist_lock: Mutex::new(()),
            durable,
            backends,
            embedder,
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn cache(&self) -> &SchemaCache {
        &self.cache
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    pub fn state_snapshot(&self) -> ManagementState {
        self.state.lock().clone()
    }

    /// Writes the store and side state. A no-op for in-memory engines.
    pub fn persist(&self) -> Result<()> {
        if !self.durable {
            return Ok(());
        }
        let _guard = self.persist_lock.lock();
        if let Some(dir) = self.cfg.store_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        self.cache.persist(&self.cfg.store_path)?;
        let json = serde_json::to_string(&*self.state.lock()).map_err(|e| Error::Internal(e.to_string()))?;
        let path = self.cfg.state_path();
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, json)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn recognize(&self, t: &Trajectory) -> Result<DiagnosisResult> {
        self.recognize_detailed(t, self.cfg.k).map(|r| r.diagnosis)
    }

    /// Diagnoses `t`, remembers it for later feedback and persists.
    pub fn recognize_detailed(&self, t: &Trajectory, k: usize) -> Result<Recognition> {
        t.check()?;
        let r = recognize_detailed(
            t,
            Some(&self.cache),
            k,
            self.backends.detector.as_ref(),
            self.embedder.as_ref(),
            &self.cfg.recognition(),
        )?;
        self.state.lock().record_diagnosis(t, &r.diagnosis);
        self.persist()?;
        Ok(r)
    }

    pub fn feedback(&self, fb: Feedback) -> Result<FeedbackOutcome> {
        fb.check()?;
        let _serial = self.management.lock();
        let out = {
            let mut guard = self.state.lock();
            // Management runs on a copy so a failure leaves the recorded state untouched.
            let mut state = guard.clone();
            let out = apply_feedback(
                fb,
                &self.cache,
                &mut state,
                self.backends.detector.as_ref(),
                self.embedder.as_ref(),
                &self.cfg.management(),
            );
            if out.is_ok() {
                *guard = state;
            }
            out
        };
        self.persist()?;
        out
    }

    /// Adds annotated failures to the replay pool without building schemata.
    pub fn add_to_pool(&self, corpus: &[(Trajectory, ErrorAnnotation)]) -> Result<()> {
        let mut state = self.state.lock();
        for (t, a) in corpus {
            state.add_annotated(t.clone(), a.clone())?;
        }
        Ok(())
    }

    /// Offline extraction into this engine's cache. The corpus also joins
    /// the annotated pool used for re-distillation.
    pub fn extract(&self, corpus: &[(Trajectory, ErrorAnnotation)], threshold: Option<f64>) -> Result<BuildReport> {
        let _serial = self.management.lock();
        let report = extend_offline_cache(
            &self.cache,
            corpus,
            threshold.unwrap_or(self.cfg.cluster_threshold),
            self.backends.detector.as_ref(),
            self.embedder.as_ref(),
            &self.cfg.generation(),
        )?;
        self.add_to_pool(corpus)?;
        self.persist()?;
        info!(created = report.schemas_created, store = self.cache.len(), "extraction finished");
        Ok(report)
    }

    /// Batch evaluation against the current cache. Access counts move but
    /// nothing is persisted.
    pub fn evaluate(&self, corpus: &[(Trajectory, ErrorAnnotation)], mode: EvalMode, runs: usize) -> Result<EvalOutcome> {
        let cfg = EvalConfig {
            mode,
            k: self.cfg.k,
            k_list: self.cfg.k_list.clone(),
            runs,
            recognition: self.cfg.recognition(),
        };
        evaluate_run(corpus, Some(&self.cache), self.backends.detector.as_ref(), self.embedder.as_ref(), &cfg)
    }

    pub fn synthesize(
        &self,
        successes: &[Trajectory],
        seeds: &[(Trajectory, ErrorAnnotation)],
        out_dir: &Path,
    ) -> Result<Manifest> {
        synthesize_dataset(
            successes,
            seeds,
            self.backends.planner.as_ref(),
            self.backends.injector.as_ref(),
            self.embedder.as_ref(),
            out_dir,
            &self.cfg.synthesis(),
        )
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ok".into(),
            store_size: self.cache.len(),
            store_hash: self.cache.content_hash(),
            chat_model: self.backends.detector.model().to_string(),
            embedding_backend: self.embedder.backend_tag().to_string(),
            embedding_dim: self.embedder.dim(),
        }
    }

    pub fn schemas(&self) -> Vec<SchemaListing> {
        self.cache.entries().iter().map(SchemaListing::from).collect()
    }

    pub fn schema(&self, id: &str) -> Result<CacheEntry> {
        self.cache.get(id).ok_or_else(|| Error::NotFound(vec![id.to_string()]))
    }
}
