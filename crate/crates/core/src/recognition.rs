//! Online schema-guided diagnosis.
//!
//! `recognize` runs: condense → embed → top-k retrieval (masking the target's
//! own schemata) → access accounting → prompt assembly → one detector call →
//! parse, with one format-reminder retry when the answer cannot be parsed.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::embedding::{embed_trajectory, Embedder, DEFAULT_CONDENSE_CHARS};
use crate::error::{Error, Result};
use crate::llm::{chat, ChatBackend, ChatMessage};
use crate::model::{render_trajectory_text, DiagnosisResult, Outcome, StepBase, Trajectory};
use crate::prompts::{DETECTION_FORMAT_REMINDER, DETECTION_OUTPUT, DETECTION_PREAMBLE, REFERENCE_GUIDANCE};
use crate::sections::{leading_integer, section, split_sections};
use crate::store::{ErrorSchema, SchemaCache};

pub const DEFAULT_PROMPT_CHARS: usize = 100_000;

/// Corpus families with their retrieval depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    /// Who&When algorithm-generated subset.
    AlgorithmGenerated,
    /// Who&When hand-crafted subset.
    HandCrafted,
    /// Corpora produced by the injection pipeline.
    Injected,
}

impl CorpusKind {
    pub fn default_k(self) -> usize {
        match self {
            CorpusKind::AlgorithmGenerated => 1,
            CorpusKind::HandCrafted => 10,
            CorpusKind::Injected => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceBlock {
    pub schema_id: String,
    pub source_trajectory_id: String,
    pub similarity: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionPrompt {
    pub system_preamble: String,
    pub reference_blocks: Vec<ReferenceBlock>,
    pub target_block: String,
    pub output_instructions: String,
}

impl DetectionPrompt {
    pub fn user_message(&self) -> String {
        let mut out = String::new();
        if !self.reference_blocks.is_empty() {
            out.push_str("Reference error schemata from past failures:\n\n");
            for b in &self.reference_blocks {
                out.push_str(&b.text);
                out.push_str("\n\n");
            }
        }
        out.push_str(&self.target_block);
        out.push_str("\n\n");
        out.push_str(&self.output_instructions);
        out
    }

    pub fn messages(&self) -> Vec<ChatMessage> {
        vec![ChatMessage::system(self.system_preamble.clone()), ChatMessage::user(self.user_message())]
    }

    pub fn char_len(&self) -> usize {
        self.system_preamble.chars().count() + self.user_message().chars().count()
    }

    pub fn schema_ids(&self) -> Vec<String> {
        self.reference_blocks.iter().map(|b| b.schema_id.clone()).collect()
    }
}

pub fn render_reference(n: usize, schema: &ErrorSchema, similarity: f64) -> String {
    format!(
        "=== REFERENCE EXAMPLE {n} (similarity {similarity:.4}) ===\n\
         Error Signatures:\n{}\n\n\
         Error Context Analysis:\n{}\n\n\
         Detection Heuristics:\n{}\n\n\
         Reference Agent Name: {}\n\
         Reference Step Number: {}\n\
         Reference Reason: {}\n\n\
         {REFERENCE_GUIDANCE}",
        schema.signatures.trim(),
        schema.context_analysis.trim(),
        schema.detection_heuristics.trim(),
        schema.mistake_agent,
        schema.mistake_step,
        schema.mistake_reason.trim(),
    )
}

fn target_block(t: &Trajectory, rendered: &str) -> String {
    format!("Task: {}\n\nConversation log of the failed run:\n{rendered}", t.question)
}

/// Builds the detection prompt for `t` with `schemata` as references.
///
/// References are ordered by descending similarity. When the prompt exceeds
/// `budget` characters the trajectory rendering shrinks first, down to a
/// quarter of the budget; after that the least similar references are
/// dropped one by one. The ground-truth answer is never included.
pub fn assemble_detection_prompt(t: &Trajectory, schemata: &[(ErrorSchema, f64)], budget: usize) -> DetectionPrompt {
    let mut ordered: Vec<&(ErrorSchema, f64)> = schemata.iter().collect();
    ordered.sort_by(|a, b| b.1.total_cmp(&a.1));

    let full = render_trajectory_text(t, usize::MAX);
    let full_len = full.chars().count();
    let min_target = (budget / 4).max(1);

    let mut keep = ordered.len();
    loop {
        let blocks: Vec<ReferenceBlock> = ordered[..keep]
            .iter()
            .enumerate()
            .map(|(i, (s, sim))| ReferenceBlock {
                schema_id: s.id.clone(),
                source_trajectory_id: s.source_trajectory_id.clone(),
                similarity: *sim,
                text: render_reference(i + 1, s, *sim),
            })
            .collect();
        let mut prompt = DetectionPrompt {
            system_preamble: DETECTION_PREAMBLE.to_string(),
            reference_blocks: blocks,
            target_block: target_block(t, ""),
            output_instructions: DETECTION_OUTPUT.to_string(),
        };
        let fixed = prompt.char_len();
        let available = budget.saturating_sub(fixed);
        if full_len <= available {
            prompt.target_block = target_block(t, &full);
            return prompt;
        }
        if keep == 0 || available >= min_target {
            prompt.target_block = target_block(t, &render_trajectory_text(t, available.max(1)));
            return prompt;
        }
        keep -= 1;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecognitionOptions {
    pub condense_chars: usize,
    pub prompt_chars: usize,
    /// Convention of step numbers in detector answers.
    pub answer_base: StepBase,
}

impl Default for RecognitionOptions {
    fn default() -> Self {
        RecognitionOptions {
            condense_chars: DEFAULT_CONDENSE_CHARS,
            prompt_chars: DEFAULT_PROMPT_CHARS,
            answer_base: StepBase::ZeroBased,
        }
    }
}

const DIAGNOSIS_LABELS: &[(&str, &[&str])] = &[
    ("agent", &["Agent Name", "Agent"]),
    ("step", &["Step Number", "Step"]),
    ("reason", &["Reason for Mistake", "Reason"]),
    ("confidence", &["Confidence"]),
];

fn step_mention() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bstep(?:\s+number)?\s*[:#]?\s*\**\s*(\d+)").unwrap())
}

fn any_integer() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+").unwrap())
}

fn agents_match(claimed: &str, actual: &str) -> bool {
    if claimed == actual || claimed.eq_ignore_ascii_case(actual) {
        return true;
    }
    let (c, a) = (claimed.to_lowercase(), actual.to_lowercase());
    !c.is_empty() && (c.contains(&a) || a.contains(&c))
}

/// Parses a detector answer against the trajectory it diagnoses.
///
/// The step comes from the `Step Number:` label, else from the first
/// "step N" mention, else from the first integer. The agent is taken from
/// the diagnosed step; a conflicting claim is kept in `claimed_agent`.
pub fn parse_diagnosis(raw: &str, t: &Trajectory, base: StepBase) -> Result<DiagnosisResult> {
    let secs = split_sections(raw, DIAGNOSIS_LABELS);
    let external = section(&secs, "step")
        .and_then(leading_integer)
        .or_else(|| step_mention().captures(raw).and_then(|c| c[1].parse().ok()))
        .or_else(|| any_integer().find(raw).and_then(|m| m.as_str().parse().ok()))
        .ok_or_else(|| Error::UnparseableDiagnosis { raw_output: raw.to_string() })?;
    let step = base
        .to_internal(external)
        .ok_or_else(|| Error::InvalidDiagnosis(format!("step {external} is not a valid 1-based index")))?;
    let actual = t.steps.get(step).ok_or_else(|| {
        Error::InvalidDiagnosis(format!("step {step} out of range for {} steps", t.steps.len()))
    })?;

    let claimed = section(&secs, "agent").map(|a| a.trim().trim_matches(['"', '\'', '*', '`']).to_string());
    let claimed_agent = claimed.filter(|c| !agents_match(c, &actual.agent));
    let confidence = section(&secs, "confidence")
        .and_then(|c| c.trim().trim_end_matches('%').parse::<f64>().ok())
        .filter(|c| (0.0..=1.0).contains(c));

    Ok(DiagnosisResult {
        trajectory_id: t.id.clone(),
        agent: actual.agent.clone(),
        step,
        reason: section(&secs, "reason").unwrap_or("").to_string(),
        confidence,
        schema_ids_used: Vec::new(),
        raw_model_output: raw.to_string(),
        claimed_agent,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recognition {
    pub diagnosis: DiagnosisResult,
    /// Schemata that made it into the prompt.
    pub references: Vec<ReferenceBlock>,
    /// Ids returned by retrieval, whose access counts were incremented.
    pub retrieved_ids: Vec<String>,
}

/// Diagnoses a failed trajectory. With `store = None` retrieval is skipped
/// entirely and the detector sees the zero-shot prompt.
pub fn recognize(
    t: &Trajectory,
    store: Option<&SchemaCache>,
    k: usize,
    llm: &dyn ChatBackend,
    embedder: &dyn Embedder,
    opts: &RecognitionOptions,
) -> Result<DiagnosisResult> {
    recognize_detailed(t, store, k, llm, embedder, opts).map(|r| r.diagnosis)
}

pub fn recognize_detailed(
    t: &Trajectory,
    store: Option<&SchemaCache>,
    k: usize,
    llm: &dyn ChatBackend,
    embedder: &dyn Embedder,
    opts: &RecognitionOptions,
) -> Result<Recognition> {
    if t.outcome != Outcome::Failure {
        return Err(Error::invalid(format!("trajectory {:?} did not fail; nothing to diagnose", t.id)));
    }
    let mut retrieved: Vec<(ErrorSchema, f64)> = Vec::new();
    if let Some(store) = store.filter(|s| k > 0 && !s.is_empty()) {
        let query = embed_trajectory(embedder, t, opts.condense_chars)?;
        let exclude: HashSet<String> = [t.id.clone()].into();
        let hits = store.search_top_k(&query, k, &exclude)?;
        let ids: Vec<String> = hits.iter().map(|h| h.entry.schema.id.clone()).collect();
        store.record_access(&ids)?;
        retrieved = hits.into_iter().map(|h| (h.entry.schema, h.similarity)).collect();
    }
    let retrieved_ids = retrieved.iter().map(|(s, _)| s.id.clone()).collect();
    let (diagnosis, prompt) = diagnose_with_references(t, &retrieved, llm, opts)?;
    Ok(Recognition { diagnosis, references: prompt.reference_blocks, retrieved_ids })
}

/// One detector call with the given references, retried once with a format
/// reminder when the answer cannot be parsed. Touches no cache state.
pub fn diagnose_with_references(
    t: &Trajectory,
    references: &[(ErrorSchema, f64)],
    llm: &dyn ChatBackend,
    opts: &RecognitionOptions,
) -> Result<(DiagnosisResult, DetectionPrompt)> {
    let prompt = assemble_detection_prompt(t, references, opts.prompt_chars);
    let mut messages = prompt.messages();
    let first = chat(llm, messages.clone())?.content;
    let mut diagnosis = match parse_diagnosis(&first, t, opts.answer_base) {
        Ok(d) => d,
        Err(Error::UnparseableDiagnosis { .. }) => {
            warn!(trajectory = %t.id, "detector answer unparseable, retrying once");
            messages.push(ChatMessage::assistant(first.clone()));
            messages.push(ChatMessage::user(DETECTION_FORMAT_REMINDER));
            let second = chat(llm, messages)?.content;
            match parse_diagnosis(&second, t, opts.answer_base) {
                Ok(d) => d,
                Err(Error::UnparseableDiagnosis { .. }) => {
                    return Err(Error::RecognitionFailed { first_output: first, retry_output: second })
                }
                Err(e) => return Err(e),
            }
        }
        Err(e) => return Err(e),
    };
    diagnosis.schema_ids_used = prompt.schema_ids();
    Ok((diagnosis, prompt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{EmbeddingVector, HashedEmbedder};
    use crate::llm::{ChatResponse, FnBackend};

    fn traj(id: &str, n: usize) -> Trajectory {
        Trajectory::new(
            id,
            "How many moons?",
            Outcome::Failure,
            (0..n).map(|i| (if i % 2 == 0 { "Orchestrator" } else { "WebSurfer" }, format!("step body {i}"), "")),
        )
        .unwrap()
        .with_ground_truth("SECRET-ANSWER-42")
    }

    fn schema(id: &str, source: &str, step: usize, words: &str) -> ErrorSchema {
        let e = HashedEmbedder::default();
        ErrorSchema {
            id: id.into(),
            signatures: format!("signature {words}"),
            context_analysis: format!("context {words}"),
            detection_heuristics: format!("heuristic {words}"),
            mistake_agent: "Orchestrator".into(),
            mistake_step: step,
            mistake_reason: format!("reason {words}"),
            source_trajectory_id: source.into(),
            embedding: e.embed(words).unwrap(),
            source_embedding: None,
            created_by: "test".into(),
        }
    }

    #[test]
    fn zero_schemata_prompt_has_no_references() {
        let t = traj("t", 3);
        let p = assemble_detection_prompt(&t, &[], 10_000);
        assert!(p.reference_blocks.is_empty());
        assert!(!p.user_message().contains("REFERENCE EXAMPLE"));
        assert!(!p.user_message().contains("SECRET-ANSWER-42"));
        assert!(p.user_message().contains("Step 2 — Orchestrator: step body 2"));
    }

    #[test]
    fn references_in_similarity_order() {
        let t = traj("t", 3);
        let s = vec![
            (schema("mid", "a", 1, "m"), 0.7),
            (schema("low", "b", 1, "l"), 0.5),
            (schema("high", "c", 1, "h"), 0.9),
        ];
        let p = assemble_detection_prompt(&t, &s, 100_000);
        assert_eq!(p.schema_ids(), vec!["high", "mid", "low"]);
        for b in &p.reference_blocks {
            assert!(b.text.contains("HOW TO USE THIS REFERENCE EXAMPLE"));
            assert!(b.text.contains("Your error may occur at any step number"));
        }
        let msg = p.user_message();
        assert!(msg.find("signature h").unwrap() < msg.find("signature m").unwrap());
    }

    #[test]
    fn budget_shrinks_trajectory_then_drops_least_similar() {
        let t = traj("t", 2_000);
        let big = |id: &str, sim: f64| (schema(id, id, 1, &format!("{id} {}", "filler ".repeat(300))), sim);
        let s = vec![big("s9", 0.9), big("s7", 0.7), big("s5", 0.5)];
        let all = assemble_detection_prompt(&t, &s, usize::MAX / 2);
        let full_target = all.target_block.chars().count();
        let fixed = all.char_len() - full_target + target_block(&t, "").chars().count();
        assert!(full_target > fixed);

        // Room for every reference and a trajectory above the quarter floor:
        // only the trajectory shrinks.
        let p = assemble_detection_prompt(&t, &s, fixed * 2);
        assert_eq!(p.reference_blocks.len(), 3);
        assert!(p.target_block.contains(crate::model::ELISION_MARKER));

        // Too tight for the floor: the least similar reference goes first.
        let p = assemble_detection_prompt(&t, &s, fixed + 100);
        assert!(p.reference_blocks.len() < 3);
        assert_eq!(p.reference_blocks[0].schema_id, "s9");
        assert!(!p.schema_ids().contains(&"s5".to_string()));
        assert!(p.reference_blocks.iter().all(|b| b.text.contains("HOW TO USE THIS REFERENCE EXAMPLE")));
    }

    #[test]
    fn parse_canonical_answer() {
        let t = traj("t", 5);
        let raw = "Agent Name: Orchestrator\nStep Number: 2\nReason for Mistake: premature final answer";
        let d = parse_diagnosis(raw, &t, StepBase::ZeroBased).unwrap();
        assert_eq!((d.agent.as_str(), d.step, d.reason.as_str()), ("Orchestrator", 2, "premature final answer"));
        assert!(d.claimed_agent.is_none());
    }

    #[test]
    fn parse_decorated_and_case_insensitive() {
        let t = traj("t", 5);
        let raw = "Here is my analysis.\n\n**agent name:** websurfer\n**STEP NUMBER:** 3\n**Reason for Mistake:** clicked the wrong link\nConfidence: 0.7";
        let d = parse_diagnosis(raw, &t, StepBase::ZeroBased).unwrap();
        assert_eq!(d.step, 3);
        assert_eq!(d.agent, "WebSurfer");
        assert_eq!(d.reason, "clicked the wrong link");
        assert_eq!(d.confidence, Some(0.7));
    }

    #[test]
    fn parse_agent_conflict_prefers_step() {
        let t = traj("t", 5);
        let d = parse_diagnosis("Agent Name: WebSurfer\nStep Number: 2\nReason for Mistake: x", &t, StepBase::ZeroBased).unwrap();
        assert_eq!(d.agent, "Orchestrator");
        assert_eq!(d.claimed_agent.as_deref(), Some("WebSurfer"));
        let d = parse_diagnosis("Agent Name: the Orchestrator agent\nStep Number: 2", &t, StepBase::ZeroBased).unwrap();
        assert!(d.claimed_agent.is_none());
    }

    #[test]
    fn parse_fallbacks_and_errors() {
        let t = traj("t", 5);
        let d = parse_diagnosis("I believe the mistake happened at step 4 when...", &t, StepBase::ZeroBased).unwrap();
        assert_eq!(d.step, 4);
        assert!(matches!(
            parse_diagnosis("The orchestrator made a mistake somewhere.", &t, StepBase::ZeroBased),
            Err(Error::UnparseableDiagnosis { .. })
        ));
        assert!(matches!(
            parse_diagnosis("Agent Name: Orchestrator\nStep Number: 12", &t, StepBase::ZeroBased),
            Err(Error::InvalidDiagnosis(_))
        ));
        let d = parse_diagnosis("Step Number: 3", &t, StepBase::OneBased).unwrap();
        assert_eq!(d.step, 2);
    }

    fn answering(step: usize) -> FnBackend {
        FnBackend::text("det", move |_| format!("Agent Name: X\nStep Number: {step}\nReason for Mistake: r"))
    }

    #[test]
    fn zero_shot_path() {
        let t = traj("t", 4);
        let store = SchemaCache::new("hashed-bow-v1", 256);
        let d = recognize(&t, Some(&store), 5, &answering(2), &HashedEmbedder::default(), &RecognitionOptions::default()).unwrap();
        assert_eq!(d.step, 2);
        assert!(d.schema_ids_used.is_empty());
    }

    #[test]
    fn own_schema_is_never_retrieved() {
        let t = traj("target", 4);
        let store = SchemaCache::new("hashed-bow-v1", 256);
        // The self-derived schema is the closest match by construction.
        let text = crate::embedding::condense_for_embedding(&t, DEFAULT_CONDENSE_CHARS);
        let mut own = schema("own", "target", 1, "x");
        own.embedding = HashedEmbedder::default().embed(&text).unwrap();
        store.put(own).unwrap();
        store.put(schema("other", "elsewhere", 1, "moons step body")).unwrap();
        let d = recognize(&t, Some(&store), 5, &answering(1), &HashedEmbedder::default(), &RecognitionOptions::default()).unwrap();
        assert_eq!(d.schema_ids_used, vec!["other"]);
        assert_eq!(store.get("other").unwrap().access_count, 1);
        assert_eq!(store.get("own").unwrap().access_count, 0);
    }

    #[test]
    fn unparseable_twice_fails_with_both_outputs() {
        let t = traj("t", 4);
        let llm = FnBackend::new("det", |req| {
            Ok(ChatResponse::stop(if req.messages.len() == 2 { "no idea" } else { "still no idea" }))
        });
        match recognize(&t, None, 1, &llm, &HashedEmbedder::default(), &RecognitionOptions::default()) {
            Err(Error::RecognitionFailed { first_output, retry_output }) => {
                assert_eq!(first_output, "no idea");
                assert_eq!(retry_output, "still no idea");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn retry_recovers() {
        let t = traj("t", 4);
        let llm = FnBackend::new("det", |req| {
            Ok(ChatResponse::stop(if req.messages.len() == 2 { "hmm" } else { "Step Number: 3" }))
        });
        let d = recognize(&t, None, 1, &llm, &HashedEmbedder::default(), &RecognitionOptions::default()).unwrap();
        assert_eq!(d.step, 3);
    }

    #[test]
    fn successful_trajectory_rejected() {
        let mut t = traj("t", 2);
        t.outcome = Outcome::Success;
        assert!(matches!(
            recognize(&t, None, 1, &answering(0), &HashedEmbedder::default(), &RecognitionOptions::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn default_k_per_corpus() {
        assert_eq!(CorpusKind::AlgorithmGenerated.default_k(), 1);
        assert_eq!(CorpusKind::HandCrafted.default_k(), 10);
        assert_eq!(CorpusKind::Injected.default_k(), 5);
        let _ = EmbeddingVector::new(vec![1.0], "x").unwrap();
    }
}
