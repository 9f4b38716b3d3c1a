//! Cache maintenance driven by feedback: novelty-gated expansion with newly
//! confirmed failures and replay-scored re-distillation of hot schemata.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::embedding::{cosine, embed_trajectory, Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::extraction::{generate_schema, generate_schema_variant, GenerationOptions};
use crate::llm::ChatBackend;
use crate::model::{validate_annotation, DiagnosisResult, ErrorAnnotation, Trajectory};
use crate::recognition::{diagnose_with_references, RecognitionOptions};
use crate::store::{ErrorSchema, SchemaCache};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ManagementConfig {
    /// A confirmed failure whose best match is below this similarity is novel.
    pub delta: f64,
    /// Access count a schema must exceed before it is re-distilled.
    pub theta_hot: u64,
    /// Candidate schemata generated per re-distillation.
    pub m_candidates: usize,
    pub replay_set_size: usize,
    pub generation: GenerationOptions,
    pub recognition: RecognitionOptions,
}

impl ManagementConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.theta_hot < 1 {
            return Err(Error::Config("theta_hot must be >= 1".into()));
        }
        if self.m_candidates < 2 {
            return Err(Error::Config("m_candidates must be >= 2".into()));
        }
        if self.replay_set_size < 1 {
            return Err(Error::Config("replay_set_size must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for ManagementConfig {
    fn default() -> Self {
        ManagementConfig {
            delta: 0.8,
            theta_hot: 20,
            m_candidates: 3,
            replay_set_size: 16,
            generation: GenerationOptions::default(),
            recognition: RecognitionOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub trajectory_id: String,
    /// The diagnosis was wrong (or missing) and `ground_truth` is the
    /// confirmed decisive error.
    pub confirmed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<ErrorAnnotation>,
}

impl Feedback {
    pub fn check(&self) -> Result<()> {
        match (&self.ground_truth, self.confirmed) {
            (None, true) => Err(Error::invalid("confirmed feedback requires a ground_truth annotation")),
            (Some(a), _) if a.trajectory_id != self.trajectory_id => Err(Error::invalid(format!(
                "ground_truth is for {:?}, feedback is for {:?}",
                a.trajectory_id, self.trajectory_id
            ))),
            _ => Ok(()),
        }
    }
}

/// Everything besides the cache that management needs to remember.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManagementState {
    /// Diagnosed or pooled trajectories by id.
    pub trajectories: BTreeMap<String, Trajectory>,
    /// Confirmed decisive errors by trajectory id.
    pub annotations: BTreeMap<String, ErrorAnnotation>,
    /// Schema id to the trajectories whose diagnosis retrieved it.
    pub associations: BTreeMap<String, BTreeSet<String>>,
    pub feedback_log: Vec<Feedback>,
}

impl ManagementState {
    pub fn add_trajectory(&mut self, t: Trajectory) {
        self.trajectories.insert(t.id.clone(), t);
    }

    /// Adds an annotated trajectory to the replay pool.
    pub fn add_annotated(&mut self, t: Trajectory, a: ErrorAnnotation) -> Result<()> {
        validate_annotation(&t, &a).into_result()?;
        self.annotations.insert(t.id.clone(), a);
        self.add_trajectory(t);
        Ok(())
    }

    /// Remembers a diagnosed trajectory and which schemata it used.
    pub fn record_diagnosis(&mut self, t: &Trajectory, d: &DiagnosisResult) {
        self.trajectories.entry(t.id.clone()).or_insert_with(|| t.clone());
        for id in &d.schema_ids_used {
            self.associations.entry(id.clone()).or_default().insert(t.id.clone());
        }
    }

    fn annotated(&self, id: &str) -> Option<(&Trajectory, &ErrorAnnotation)> {
        Some((self.trajectories.get(id)?, self.annotations.get(id)?))
    }
}

/// Highest similarity between `query` and any cached schema, comparing
/// against both the schema text embedding and its source trajectory
/// embedding. `None` for an empty cache.
pub fn max_similarity(cache: &SchemaCache, query: &EmbeddingVector) -> Result<Option<(String, f64)>> {
    let mut best: Option<(String, f64)> = None;
    for e in cache.entries() {
        let mut s = cosine(query, &e.schema.embedding)?;
        if let Some(src) = &e.schema.source_embedding {
            s = s.max(cosine(query, src)?);
        }
        if best.as_ref().is_none_or(|(_, b)| s > *b) {
            best = Some((e.schema.id, s));
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ExpansionOutcome {
    Expanded {
        schema_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_similarity: Option<f64>,
    },
    Skipped {
        nearest_schema_id: String,
        max_similarity: f64,
    },
}

/// Expansion step for confirmed feedback on `t`.
pub fn consider_expansion(
    fb: &Feedback,
    t: &Trajectory,
    cache: &SchemaCache,
    llm: &dyn ChatBackend,
    embedder: &dyn Embedder,
    cfg: &ManagementConfig,
) -> Result<ExpansionOutcome> {
    fb.check()?;
    let a = match (&fb.ground_truth, fb.confirmed) {
        (Some(a), true) => a,
        _ => return Err(Error::invalid("expansion needs confirmed feedback with a ground truth")),
    };
    if fb.trajectory_id != t.id {
        return Err(Error::invalid(format!("feedback is for {:?}, trajectory is {:?}", fb.trajectory_id, t.id)));
    }
    validate_annotation(t, a).into_result()?;
    expand_if_novel(t, a, cache, llm, embedder, cfg)
}

/// Adds a schema for `t` when no cached schema is at least `delta`
/// similar to it.
pub fn expand_if_novel(
    t: &Trajectory,
    a: &ErrorAnnotation,
    cache: &SchemaCache,
    llm: &dyn ChatBackend,
    embedder: &dyn Embedder,
    cfg: &ManagementConfig,
) -> Result<ExpansionOutcome> {
    let query = embed_trajectory(embedder, t, cfg.generation.condense_chars)?;
    let nearest = max_similarity(cache, &query)?;
    if let Some((id, s)) = &nearest {
        if *s >= cfg.delta {
            return Ok(ExpansionOutcome::Skipped { nearest_schema_id: id.clone(), max_similarity: *s });
        }
    }
    let schema =
        generate_schema(t, a, llm, embedder, &cfg.generation).map_err(|e| Error::ExpansionFailed(Box::new(e)))?;
    let schema_id = cache.put(schema).map_err(|e| Error::ExpansionFailed(Box::new(e)))?;
    info!(trajectory = %t.id, %schema_id, "cache expanded");
    Ok(ExpansionOutcome::Expanded { schema_id, max_similarity: nearest.map(|(_, s)| s) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum DistillationOutcome {
    Skipped {
        access_count: u64,
    },
    SkippedNoReplayData,
    Kept {
        incumbent_score: f64,
        candidate_scores: Vec<(String, f64)>,
        replay_size: usize,
    },
    Replaced {
        old_id: String,
        new_id: String,
        incumbent_score: f64,
        candidate_scores: Vec<(String, f64)>,
        replay_size: usize,
    },
    Failed {
        reason: String,
    },
}

/// Exact-step accuracy of a detector that sees only `schema` as reference.
/// Unparseable or invalid answers count as misses.
pub fn replay_score(
    schema: &ErrorSchema,
    replay: &[(&Trajectory, &ErrorAnnotation)],
    llm: &dyn ChatBackend,
    embedder: &dyn Embedder,
    cfg: &ManagementConfig,
) -> Result<f64> {
    if replay.is_empty() {
        return Err(Error::invalid("replay set is empty"));
    }
    let mut hits = 0usize;
    for (t, a) in replay {
        let q = embed_trajectory(embedder, t, cfg.recognition.condense_chars)?;
        let sim = cosine(&q, &schema.embedding)?;
        match diagnose_with_references(t, &[(schema.clone(), sim)], llm, &cfg.recognition) {
            Ok((d, _)) if d.step == a.mistake_step => hits += 1,
            Ok(_) => {}
            Err(e @ (Error::BackendUnavailable { .. } | Error::ReplayMiss { .. })) => return Err(e),
            Err(e) => warn!(trajectory = %t.id, error = %e, "replay diagnosis counted as miss"),
        }
    }
    Ok(hits as f64 / replay.len() as f64)
}

/// Trajectories used to score a schema: annotated trajectories that
/// retrieved it, else the annotated pool members nearest to it. The
/// schema's own source is never included.
pub fn replay_set<'s>(
    schema: &ErrorSchema,
    state: &'s ManagementState,
    embedder: &dyn Embedder,
    cfg: &ManagementConfig,
) -> Result<Vec<(&'s Trajectory, &'s ErrorAnnotation)>> {
    let mut out: Vec<_> = state
        .associations
        .get(&schema.id)
        .into_iter()
        .flatten()
        .filter(|id| **id != schema.source_trajectory_id)
        .filter_map(|id| state.annotated(id))
        .take(cfg.replay_set_size)
        .collect();
    if out.is_empty() {
        let mut scored = Vec::new();
        for (id, a) in &state.annotations {
            if *id == schema.source_trajectory_id {
                continue;
            }
            let Some(t) = state.trajectories.get(id) else { continue };
            let q = embed_trajectory(embedder, t, cfg.recognition.condense_chars)?;
            scored.push((cosine(&q, &schema.embedding)?, t, a));
        }
        scored.sort_by(|x, y| y.0.total_cmp(&x.0).then_with(|| x.1.id.cmp(&y.1.id)));
        out = scored.into_iter().take(cfg.replay_set_size).map(|(_, t, a)| (t, a)).collect();
    }
    Ok(out)
}

/// Re-distills a hot schema: generates candidates from its source failure
/// and swaps in the best one if it strictly beats the incumbent on replay.
pub fn distill(
    schema_id: &str,
    cache: &SchemaCache,
    state: &mut ManagementState,
    llm: &dyn ChatBackend,
    embedder: &dyn Embedder,
    cfg: &ManagementConfig,
) -> Result<DistillationOutcome> {
    let entry = cache.get(schema_id).ok_or_else(|| Error::NotFound(vec![schema_id.to_string()]))?;
    if entry.access_count <= cfg.theta_hot {
        return Ok(DistillationOutcome::Skipped { access_count: entry.access_count });
    }
    let incumbent = entry.schema;
    let (src, ann) = state.annotated(&incumbent.source_trajectory_id).ok_or_else(|| {
        Error::DistillationFailed(format!("source trajectory {:?} is not in the annotated pool", incumbent.source_trajectory_id))
    })?;
    let replay = replay_set(&incumbent, state, embedder, cfg)?;
    if replay.is_empty() {
        return Ok(DistillationOutcome::SkippedNoReplayData);
    }

    let m = cfg.m_candidates.max(1);
    let mut candidates: Vec<ErrorSchema> = Vec::new();
    for i in 1..=m {
        let note = format!(
            "Candidate {i} of {m}: write an alternative schema for this error that differs in wording and emphasis from the other candidates."
        );
        match generate_schema_variant(src, ann, llm, embedder, &cfg.generation, Some(&note)) {
            Ok(s) if s.id != incumbent.id && !cache.contains(&s.id) && candidates.iter().all(|c| c.id != s.id) => {
                candidates.push(s)
            }
            Ok(_) => {}
            Err(e @ (Error::BackendUnavailable { .. } | Error::ReplayMiss { .. })) => return Err(e),
            Err(e) => warn!(schema = %incumbent.id, error = %e, "candidate generation failed"),
        }
    }
    if candidates.is_empty() {
        return Err(Error::DistillationFailed("no usable candidate schema".into()));
    }

    let incumbent_score = replay_score(&incumbent, &replay, llm, embedder, cfg)?;
    let mut candidate_scores = Vec::with_capacity(candidates.len());
    let mut best: Option<(f64, usize)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let s = replay_score(c, &replay, llm, embedder, cfg)?;
        candidate_scores.push((c.id.clone(), s));
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, i));
        }
    }
    let (best_score, best_idx) = best.expect("non-empty");
    let replay_size = replay.len();
    if best_score > incumbent_score {
        let new_id = cache.replace(&incumbent.id, candidates.swap_remove(best_idx))?;
        state.associations.remove(&incumbent.id);
        info!(old = %incumbent.id, new = %new_id, incumbent_score, best_score, "schema re-distilled");
        Ok(DistillationOutcome::Replaced { old_id: incumbent.id, new_id, incumbent_score, candidate_scores, replay_size })
    } else {
        Ok(DistillationOutcome::Kept { incumbent_score, candidate_scores, replay_size })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackOutcome {
    pub trajectory_id: String,
    pub confirmed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expansion: Option<ExpansionOutcome>,
    /// Hot schemata that were considered for re-distillation.
    #[serde(default)]
    pub distillations: BTreeMap<String, DistillationOutcome>,
}

/// Records feedback on a diagnosed trajectory. A confirmed ground truth
/// joins the annotated pool and may expand the cache; every hot schema is
/// then considered for re-distillation.
pub fn apply_feedback(
    fb: Feedback,
    cache: &SchemaCache,
    state: &mut ManagementState,
    llm: &dyn ChatBackend,
    embedder: &dyn Embedder,
    cfg: &ManagementConfig,
) -> Result<FeedbackOutcome> {
    fb.check()?;
    let t = state
        .trajectories
        .get(&fb.trajectory_id)
        .cloned()
        .ok_or_else(|| Error::NotFound(vec![fb.trajectory_id.clone()]))?;
    let gt = if fb.confirmed { fb.ground_truth.clone() } else { None };
    if let Some(a) = &gt {
        validate_annotation(&t, a).into_result()?;
    }
    state.feedback_log.push(fb.clone());

    let mut outcome = FeedbackOutcome {
        trajectory_id: fb.trajectory_id.clone(),
        confirmed: fb.confirmed,
        expansion: None,
        distillations: BTreeMap::new(),
    };
    if let Some(a) = gt {
        state.annotations.insert(t.id.clone(), a.clone());
        outcome.expansion = Some(expand_if_novel(&t, &a, cache, llm, embedder, cfg)?);
    }

    // TODO: add a cooldown so a kept hot schema is not re-scored on every feedback.
    let hot: Vec<String> = cache
        .entries()
        .into_iter()
        .filter(|e| e.access_count > cfg.theta_hot)
        .map(|e| e.schema.id)
        .collect();
    for id in hot {
        let result = distill(&id, cache, state, llm, embedder, cfg).unwrap_or_else(|e| {
            warn!(schema = %id, error = %e, "distillation failed");
            DistillationOutcome::Failed { reason: e.to_string() }
        });
        outcome.distillations.insert(id, result);
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{condense_for_embedding, HashedEmbedder};
    use crate::extraction::tests::WELL_FORMED;
    use crate::llm::FnBackend;
    use crate::model::Outcome;

    fn traj(id: &str, topic: &str) -> Trajectory {
        Trajectory::new(
            id,
            format!("question about {topic}"),
            Outcome::Failure,
            [
                ("Orchestrator", format!("plan for {topic}"), ""),
                ("WebSurfer", format!("searched {topic} pages"), "ok"),
                ("Orchestrator", format!("final answer on {topic}"), ""),
            ],
        )
        .unwrap()
    }

    fn ann(id: &str, step: usize) -> ErrorAnnotation {
        let agent = if step == 1 { "WebSurfer" } else { "Orchestrator" };
        ErrorAnnotation { trajectory_id: id.into(), mistake_agent: agent.into(), mistake_step: step, mistake_reason: "r".into() }
    }

    fn generator() -> FnBackend {
        FnBackend::text("gen", |prompt| {
            if prompt.contains("Candidate") {
                let tag = prompt.split("Candidate ").nth(1).unwrap_or("").chars().next().unwrap_or('x');
                WELL_FORMED.replace("Error Signatures:", &format!("Error Signatures:\nvariant {tag}"))
            } else if prompt.contains("REFERENCE EXAMPLE") || prompt.contains("Conversation log") {
                "Agent Name: Orchestrator\nStep Number: 0\nReason for Mistake: x".into()
            } else {
                WELL_FORMED.into()
            }
        })
    }

    #[test]
    fn feedback_check() {
        let fb = Feedback { trajectory_id: "t".into(), confirmed: true, ground_truth: None };
        assert!(matches!(fb.check(), Err(Error::InvalidInput(_))));
        let fb = Feedback { trajectory_id: "t".into(), confirmed: false, ground_truth: None };
        assert!(fb.check().is_ok());
    }

    #[test]
    fn expansion_into_empty_cache_then_redundant() {
        let e = HashedEmbedder::default();
        let cache = SchemaCache::new(e.backend_tag(), e.dim());
        let t = traj("t1", "volcanoes");
        let cfg = ManagementConfig::default();
        let out = expand_if_novel(&t, &ann("t1", 2), &cache, &generator(), &e, &cfg).unwrap();
        assert!(matches!(out, ExpansionOutcome::Expanded { max_similarity: None, .. }));
        let q = e.embed(&condense_for_embedding(&t, cfg.generation.condense_chars)).unwrap();
        let (_, s) = max_similarity(&cache, &q).unwrap().unwrap();
        assert!((s - 1.0).abs() < 1e-9);
        let out = expand_if_novel(&t, &ann("t1", 2), &cache, &generator(), &e, &cfg).unwrap();
        assert!(matches!(out, ExpansionOutcome::Skipped { .. }));
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn unknown_trajectory_feedback() {
        let e = HashedEmbedder::default();
        let cache = SchemaCache::new(e.backend_tag(), e.dim());
        let mut st = ManagementState::default();
        let fb = Feedback { trajectory_id: "nope".into(), confirmed: false, ground_truth: None };
        let r = apply_feedback(fb, &cache, &mut st, &generator(), &e, &ManagementConfig::default());
        assert!(matches!(r, Err(Error::NotFound(_))));
    }

    #[test]
    fn unconfirmed_feedback_only_logs() {
        let e = HashedEmbedder::default();
        let cache = SchemaCache::new(e.backend_tag(), e.dim());
        let mut st = ManagementState::default();
        st.add_trajectory(traj("t", "x"));
        let fb = Feedback { trajectory_id: "t".into(), confirmed: false, ground_truth: Some(ann("t", 0)) };
        let out = apply_feedback(fb, &cache, &mut st, &generator(), &e, &ManagementConfig::default()).unwrap();
        assert!(out.expansion.is_none());
        assert!(cache.is_empty());
        assert_eq!(st.feedback_log.len(), 1);
        assert!(st.annotations.is_empty());
    }

    fn hot_setup(detector_step: usize) -> (SchemaCache, ManagementState, String, FnBackend) {
        let e = HashedEmbedder::default();
        let cache = SchemaCache::new(e.backend_tag(), e.dim());
        let mut st = ManagementState::default();
        let src = traj("src", "rivers");
        st.add_annotated(src.clone(), ann("src", 2)).unwrap();
        let id = cache.put(generate_schema(&src, &ann("src", 2), &generator(), &e, &GenerationOptions::default()).unwrap()).unwrap();
        for i in 0..4 {
            let id_i = format!("r{i}");
            st.add_annotated(traj(&id_i, "rivers"), ann(&id_i, 1)).unwrap();
            st.associations.entry(id.clone()).or_default().insert(id_i);
        }
        for _ in 0..21 {
            cache.record_access(std::slice::from_ref(&id)).unwrap();
        }
        // Detector finds the true step (1) only with a "variant 2" reference.
        let det = FnBackend::text("gen", move |prompt| {
            if prompt.contains("Candidate") {
                let tag = prompt.split("Candidate ").nth(1).unwrap().chars().next().unwrap();
                WELL_FORMED.replace("Error Signatures:", &format!("Error Signatures:\nvariant {tag}"))
            } else if prompt.contains("Conversation log") {
                let step = if prompt.contains("variant 2") { 1 } else { detector_step };
                format!("Agent Name: X\nStep Number: {step}\nReason for Mistake: x")
            } else {
                WELL_FORMED.into()
            }
        });
        (cache, st, id, det)
    }

    #[test]
    fn distill_replaces_when_strictly_better() {
        let (cache, mut st, id, det) = hot_setup(0);
        let e = HashedEmbedder::default();
        let out = distill(&id, &cache, &mut st, &det, &e, &ManagementConfig::default()).unwrap();
        match out {
            DistillationOutcome::Replaced { old_id, new_id, incumbent_score, candidate_scores, replay_size } => {
                assert_eq!(old_id, id);
                assert_eq!((incumbent_score, replay_size), (0.0, 4));
                let scores: Vec<f64> = candidate_scores.iter().map(|c| c.1).collect();
                assert_eq!(scores, vec![0.0, 1.0, 0.0]);
                let fresh = cache.get(&new_id).unwrap();
                assert_eq!(fresh.access_count, 0);
                assert!(fresh.schema.signatures.contains("variant 2"));
            }
            other => panic!("{other:?}"),
        }
        assert!(!cache.contains(&id));
        assert_eq!(cache.len(), 1);
        assert!(!st.associations.contains_key(&id));
    }

    #[test]
    fn distill_keeps_on_tie() {
        let (cache, mut st, id, det) = hot_setup(1);
        let e = HashedEmbedder::default();
        let out = distill(&id, &cache, &mut st, &det, &e, &ManagementConfig::default()).unwrap();
        match out {
            DistillationOutcome::Kept { incumbent_score, candidate_scores, .. } => {
                assert_eq!(incumbent_score, 1.0);
                assert!(candidate_scores.iter().any(|c| c.1 == 1.0));
            }
            other => panic!("{other:?}"),
        }
        assert!(cache.contains(&id));
    }

    #[test]
    fn distill_requires_hot() {
        let (cache, mut st, id, det) = hot_setup(0);
        let cfg = ManagementConfig { theta_hot: 21, ..Default::default() };
        let out = distill(&id, &cache, &mut st, &det, &HashedEmbedder::default(), &cfg).unwrap();
        assert_eq!(out, DistillationOutcome::Skipped { access_count: 21 });
    }

    #[test]
    fn empty_replay_is_skipped() {
        let (cache, mut st, id, det) = hot_setup(0);
        st.associations.clear();
        st.annotations.retain(|k, _| k == "src");
        let out = distill(&id, &cache, &mut st, &det, &HashedEmbedder::default(), &ManagementConfig::default()).unwrap();
        assert_eq!(out, DistillationOutcome::SkippedNoReplayData);
    }

    #[test]
    fn feedback_sweeps_hot_entries() {
        let (cache, mut st, id, det) = hot_setup(1);
        st.add_trajectory(traj("new", "rivers"));
        let fb = Feedback { trajectory_id: "new".into(), confirmed: false, ground_truth: None };
        let out = apply_feedback(fb, &cache, &mut st, &det, &HashedEmbedder::default(), &ManagementConfig::default()).unwrap();
        assert_eq!(out.distillations.len(), 1);
        assert!(out.distillations.contains_key(&id));
    }

    #[test]
    fn config_ranges() {
        assert!(ManagementConfig::default().check().is_ok());
        assert!(ManagementConfig { delta: 1.0, ..Default::default() }.check().is_err());
        assert!(ManagementConfig { m_candidates: 1, ..Default::default() }.check().is_err());
        assert!(ManagementConfig { theta_hot: 0, ..Default::default() }.check().is_err());
    }
}
