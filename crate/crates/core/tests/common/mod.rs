#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use errsight_core::{EmbeddingVector, ErrorAnnotation, ErrorSchema, FnBackend, Outcome, Trajectory};
use regex::Regex;

pub const DETECTION_MARK: &str = "Conversation log of the failed run";

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

/// Set to rewrite frozen tapes and expected outputs from the scripted backends.
pub fn regenerate() -> bool {
    std::env::var_os("ERRSIGHT_REGENERATE_FIXTURES").is_some_and(|v| v == "1")
}

pub const AGENTS: [&str; 3] = ["Orchestrator", "WebSurfer", "Coder"];

/// Failed run about `topic` with `n` steps; agents rotate through [`AGENTS`].
pub fn failed(id: &str, topic: &str, n: usize) -> Trajectory {
    Trajectory::new(
        id,
        format!("Question {id} concerning topic_{topic}"),
        Outcome::Failure,
        (0..n).map(|i| {
            (
                AGENTS[i % AGENTS.len()],
                format!("{topic} {topic} reasoning step {i} about {topic} records"),
                format!("observation {i} {topic}"),
            )
        }),
    )
    .unwrap()
}

pub fn annotation(t: &Trajectory, step: usize) -> ErrorAnnotation {
    ErrorAnnotation {
        trajectory_id: t.id.clone(),
        mistake_agent: t.steps[step].agent.clone(),
        mistake_step: step,
        mistake_reason: format!("step {step} trusted an unchecked result"),
    }
}

/// Well-formed schema-generation answer whose signature section is `signature`.
pub fn schema_answer(signature: &str) -> String {
    format!(
        "1. Error Signatures:\n- {signature}\n\n\
         2. Error Context Analysis:\n- The acting agent relied on an intermediate result nobody verified.\n\n\
         3. Detection Heuristics:\n- Is the claim at this step supported by earlier observations?\n\n\
         Agent Name: Orchestrator\n\nStep Number: 0\n\nReason for Mistake: unverified claim"
    )
}

pub fn manual_schema(id: &str, source: &str, signatures: &str, agent: &str, step: usize, embedding: EmbeddingVector) -> ErrorSchema {
    ErrorSchema {
        id: id.into(),
        signatures: signatures.into(),
        context_analysis: "context".into(),
        detection_heuristics: "heuristics".into(),
        mistake_agent: agent.into(),
        mistake_step: step,
        mistake_reason: "planted".into(),
        source_trajectory_id: source.into(),
        embedding,
        source_embedding: None,
        created_by: "fixture".into(),
    }
}

fn topic_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"topic_([a-z]+)").unwrap())
}

fn ref_step_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"Reference Step Number: (\d+)").unwrap())
}

pub fn topic_of(text: &str) -> Option<String> {
    topic_re().captures(text).map(|c| c[1].to_string())
}

/// Detector answer: the step of the first reference that shares the target's
/// topic marker, else step 0.
pub fn topic_detector_answer(prompt: &str) -> String {
    let split = prompt.rfind("Task: ").unwrap_or(0);
    let (refs, target) = prompt.split_at(split);
    let topic = topic_of(target);
    let step = refs
        .split("=== REFERENCE EXAMPLE")
        .skip(1)
        .find(|block| topic.is_some() && topic_of(block) == topic)
        .and_then(|block| ref_step_re().captures(block))
        .map(|c| c[1].parse::<usize>().unwrap())
        .unwrap_or(0);
    format!("Agent Name: Orchestrator\nStep Number: {step}\nReason for Mistake: matched reference pattern")
}

/// Scripted stand-in for a live model: topic-aware schema writer and detector.
pub fn scripted_model(model: &str) -> FnBackend {
    FnBackend::text(model, |prompt| {
        if prompt.contains(DETECTION_MARK) {
            return topic_detector_answer(prompt);
        }
        let topic = topic_of(prompt).unwrap_or_else(|| "unknown".into());
        let variant = prompt
            .split("Candidate ")
            .nth(1)
            .and_then(|s| s.split_whitespace().next())
            .unwrap_or("0");
        schema_answer(&format!("topic_{topic} answers drift from the {topic} evidence (variant {variant})"))
    })
}

/// Plain cosine over raw values, independent of the library implementation.
pub fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}
