//! Error injection: pair each successful trajectory with its nearest
//! annotated failure, plan where and how to inject a similar error, then let
//! the injector model corrupt that step and rewrite the continuation.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::embedding::{cosine, embed_trajectory, Embedder, EmbeddingVector, DEFAULT_CONDENSE_CHARS};
use crate::error::{Error, Result};
use crate::llm::{chat, ChatBackend, ChatMessage};
use crate::model::{
    render_step, render_trajectory_text, validate_annotation, write_jsonl, ErrorAnnotation, Outcome, Step, Trajectory,
};
use crate::prompts::{fill, INJECTION_PLAN, INJECTION_REWRITE, PLAN_RANGE_REMINDER};
use crate::sections::{leading_integer, section, split_sections};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionPlan {
    pub target_trajectory_id: String,
    pub seed_trajectory_id: String,
    pub inject_at_step: usize,
    pub adaptation_notes: String,
}

impl InjectionPlan {
    pub fn check(&self, target: &Trajectory) -> Result<()> {
        if self.target_trajectory_id != target.id {
            return Err(Error::invalid(format!(
                "plan targets {:?}, got trajectory {:?}",
                self.target_trajectory_id, target.id
            )));
        }
        if self.inject_at_step >= target.len() {
            return Err(Error::invalid(format!(
                "inject_at_step {} out of range for {} steps",
                self.inject_at_step,
                target.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTrajectory {
    pub trajectory: Trajectory,
    pub annotation: ErrorAnnotation,
    pub plan: InjectionPlan,
    /// Model that wrote the corrupted continuation.
    pub provenance: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisOptions {
    pub condense_chars: usize,
    pub render_chars: usize,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions { condense_chars: DEFAULT_CONDENSE_CHARS, render_chars: 30_000 }
    }
}

/// Seed with the highest cosine similarity to `query`; ties go to the
/// smaller id.
pub fn nearest_seed(query: &EmbeddingVector, seeds: &[(String, EmbeddingVector)]) -> Result<(String, f64)> {
    let mut best: Option<(&str, f64)> = None;
    for (id, v) in seeds {
        let s = cosine(query, v)?;
        best = match best {
            Some((bid, bs)) if bs > s || (bs == s && bid <= id.as_str()) => Some((bid, bs)),
            _ => Some((id.as_str(), s)),
        };
    }
    best.map(|(id, s)| (id.to_string(), s)).ok_or_else(|| Error::invalid("seed corpus is empty"))
}

pub fn match_seed(
    success: &Trajectory,
    seeds: &[(Trajectory, ErrorAnnotation)],
    embedder: &dyn Embedder,
    opts: &SynthesisOptions,
) -> Result<(String, f64)> {
    if seeds.is_empty() {
        return Err(Error::invalid("seed corpus is empty"));
    }
    let query = embed_trajectory(embedder, success, opts.condense_chars)?;
    let embedded = seeds
        .iter()
        .map(|(t, _)| Ok((t.id.clone(), embed_trajectory(embedder, t, opts.condense_chars)?)))
        .collect::<Result<Vec<_>>>()?;
    nearest_seed(&query, &embedded)
}

const PLAN_LABELS: &[(&str, &[&str])] = &[("step", &["Injection Step"]), ("notes", &["Adaptation Notes"])];

fn step_mention() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bstep\s*[:#]?\s*(\d+)").unwrap())
}

fn any_integer() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+").unwrap())
}

fn parse_plan(raw: &str) -> (Option<usize>, String) {
    let secs = split_sections(raw, PLAN_LABELS);
    let step = section(&secs, "step")
        .and_then(leading_integer)
        .or_else(|| step_mention().captures(raw).and_then(|c| c[1].parse().ok()))
        .or_else(|| any_integer().find(raw).and_then(|m| m.as_str().parse().ok()));
    let notes = section(&secs, "notes").unwrap_or(raw.trim()).to_string();
    (step, notes)
}

pub fn plan_injection(
    success: &Trajectory,
    seed: &Trajectory,
    seed_annotation: &ErrorAnnotation,
    llm: &dyn ChatBackend,
    opts: &SynthesisOptions,
) -> Result<InjectionPlan> {
    if success.outcome != Outcome::Success {
        return Err(Error::invalid(format!("target {:?} is not a successful trajectory", success.id)));
    }
    validate_annotation(seed, seed_annotation).into_result()?;
    let last = (success.len() - 1).to_string();
    let prompt = fill(
        INJECTION_PLAN,
        &[
            ("target_text", &render_trajectory_text(success, opts.render_chars)),
            ("target_steps", &success.len().to_string()),
            ("last_step", &last),
            ("seed_text", &render_trajectory_text(seed, opts.render_chars)),
            ("seed_agent", &seed_annotation.mistake_agent),
            ("seed_step", &seed_annotation.mistake_step.to_string()),
            ("seed_reason", &seed_annotation.mistake_reason),
        ],
    );
    let mut messages = vec![ChatMessage::user(prompt)];
    let mut last_raw = String::new();
    for attempt in 0..2 {
        if attempt == 1 {
            messages.push(ChatMessage::assistant(last_raw.clone()));
            messages.push(ChatMessage::user(fill(PLAN_RANGE_REMINDER, &[("last_step", &last)])));
        }
        last_raw = chat(llm, messages.clone())?.content;
        if let (Some(step), notes) = parse_plan(&last_raw) {
            if step < success.len() {
                return Ok(InjectionPlan {
                    target_trajectory_id: success.id.clone(),
                    seed_trajectory_id: seed.id.clone(),
                    inject_at_step: step,
                    adaptation_notes: notes,
                });
            }
        }
        warn!(target = %success.id, attempt, "injection plan rejected");
    }
    Err(Error::PlanningFailed(format!(
        "no injection step in [0, {last}] after retry; last answer: {}",
        last_raw.chars().take(200).collect::<String>()
    )))
}

#[derive(Debug, Deserialize)]
struct RewriteStep {
    agent: String,
    content: String,
    #[serde(default)]
    result: String,
}

#[derive(Debug, Deserialize)]
struct Rewrite {
    error_description: String,
    steps: Vec<RewriteStep>,
}

fn parse_rewrite(raw: &str) -> std::result::Result<Rewrite, String> {
    let start = raw.find('{').ok_or("no JSON object in answer")?;
    let end = raw.rfind('}').ok_or("no JSON object in answer")?;
    if end < start {
        return Err("no JSON object in answer".into());
    }
    let r: Rewrite = serde_json::from_str(&raw[start..=end]).map_err(|e| e.to_string())?;
    if r.steps.is_empty() {
        return Err("rewrite has no steps".into());
    }
    if r.steps.iter().any(|s| s.agent.trim().is_empty()) {
        return Err("rewrite step without agent".into());
    }
    Ok(r)
}

/// Deterministic id of the synthetic trajectory derived from a plan.
pub fn synthetic_id(plan: &InjectionPlan) -> String {
    format!("{}~inj{}~{}", plan.target_trajectory_id, plan.inject_at_step, plan.seed_trajectory_id)
}

pub fn inject_error(success: &Trajectory, plan: &InjectionPlan, llm: &dyn ChatBackend) -> Result<SyntheticTrajectory> {
    plan.check(success)?;
    let at = plan.inject_at_step;
    let original = &success.steps[at];
    let prefix_text = if at == 0 {
        "(none, the error is injected at the first step)".to_string()
    } else {
        success.steps[..at].iter().map(render_step).collect::<Vec<_>>().join("\n")
    };
    let prompt = fill(
        INJECTION_REWRITE,
        &[
            ("question", &success.question),
            ("prefix_text", &prefix_text),
            ("step_index", &at.to_string()),
            ("step_agent", &original.agent),
            ("step_content", &original.content),
            ("notes", &plan.adaptation_notes),
            ("remaining", &(success.len() - at).to_string()),
        ],
    );
    let mut messages = vec![ChatMessage::user(prompt)];
    let first = chat(llm, messages.clone())?.content;
    let rewrite = match parse_rewrite(&first) {
        Ok(r) => r,
        Err(why) => {
            warn!(target = %success.id, %why, "injector answer rejected, retrying once");
            messages.push(ChatMessage::assistant(first));
            messages.push(ChatMessage::user(format!(
                "That answer could not be used ({why}). Reply with the JSON object only."
            )));
            let second = chat(llm, messages)?.content;
            parse_rewrite(&second).map_err(Error::InjectionFailed)?
        }
    };

    let mut steps: Vec<Step> = success.steps[..at].to_vec();
    for (i, s) in rewrite.steps.into_iter().enumerate() {
        // The corrupted step stays with the agent that originally acted there.
        let agent = if i == 0 { original.agent.clone() } else { s.agent };
        steps.push(Step { index: at + i, agent, content: s.content, result: s.result });
    }
    let trajectory = Trajectory {
        id: synthetic_id(plan),
        question: success.question.clone(),
        ground_truth_answer: success.ground_truth_answer.clone(),
        outcome: Outcome::Failure,
        steps,
    };
    trajectory.check()?;
    if trajectory.steps[..at] != success.steps[..at] {
        return Err(Error::Internal(format!("prefix of {:?} changed during injection", success.id)));
    }
    let annotation = ErrorAnnotation {
        trajectory_id: trajectory.id.clone(),
        mistake_agent: original.agent.clone(),
        mistake_step: at,
        mistake_reason: rewrite.error_description.trim().to_string(),
    };
    validate_annotation(&trajectory, &annotation)
        .into_result()
        .map_err(|e| Error::Internal(format!("synthetic annotation invalid: {e}")))?;
    Ok(SyntheticTrajectory { trajectory, annotation, plan: plan.clone(), provenance: llm.model().to_string() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub synthetic_id: String,
    pub success_id: String,
    pub seed_id: String,
    pub similarity: f64,
    pub inject_at_step: usize,
    pub mistake_agent: String,
    /// Whether the injected error changes the final answer; not checked.
    pub flipped: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub success_id: String,
    pub stage: String,
    pub error_kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub planner_model: String,
    pub injector_model: String,
    pub embedding_backend: String,
    pub items: Vec<ManifestItem>,
    pub skipped: Vec<SkipRecord>,
}

pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

fn skip(success_id: &str, stage: &str, e: &Error) -> SkipRecord {
    SkipRecord {
        success_id: success_id.to_string(),
        stage: stage.to_string(),
        error_kind: e.kind().to_string(),
        message: e.to_string(),
    }
}

/// Runs match → plan → inject for every success, in parallel, and returns
/// the results in input order.
pub fn synthesize(
    successes: &[Trajectory],
    seeds: &[(Trajectory, ErrorAnnotation)],
    planner: &dyn ChatBackend,
    injector: &dyn ChatBackend,
    embedder: &dyn Embedder,
    opts: &SynthesisOptions,
) -> Result<(Vec<SyntheticTrajectory>, Manifest)> {
    if successes.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("synthesis needs at least one success and one seed"));
    }
    for (t, a) in seeds {
        validate_annotation(t, a)
            .into_result()
            .map_err(|e| Error::SchemaViolation(format!("seed {:?}: {e}", t.id)))?;
    }
    let seed_vecs = seeds
        .par_iter()
        .map(|(t, _)| Ok((t.id.clone(), embed_trajectory(embedder, t, opts.condense_chars)?)))
        .collect::<Result<Vec<_>>>()?;

    let results: Vec<std::result::Result<(SyntheticTrajectory, ManifestItem), SkipRecord>> = successes
        .par_iter()
        .map(|s| {
            let (seed_id, similarity) = embed_trajectory(embedder, s, opts.condense_chars)
                .and_then(|q| nearest_seed(&q, &seed_vecs))
                .map_err(|e| skip(&s.id, "match", &e))?;
            let (seed, seed_ann) = seeds.iter().find(|(t, _)| t.id == seed_id).expect("matched seed exists");
            let plan = plan_injection(s, seed, seed_ann, planner, opts).map_err(|e| skip(&s.id, "plan", &e))?;
            let synth = inject_error(s, &plan, injector).map_err(|e| skip(&s.id, "inject", &e))?;
            let item = ManifestItem {
                synthetic_id: synth.trajectory.id.clone(),
                success_id: s.id.clone(),
                seed_id,
                similarity,
                inject_at_step: plan.inject_at_step,
                mistake_agent: synth.annotation.mistake_agent.clone(),
                flipped: "unknown".into(),
            };
            Ok((synth, item))
        })
        .collect();

    let mut out = Vec::new();
    let mut manifest = Manifest {
        planner_model: planner.model().to_string(),
        injector_model: injector.model().to_string(),
        embedding_backend: embedder.backend_tag().to_string(),
        items: Vec::new(),
        skipped: Vec::new(),
    };
    for r in results {
        match r {
            Ok((synth, item)) => {
                out.push(synth);
                manifest.items.push(item);
            }
            Err(rec) => {
                warn!(success = %rec.success_id, stage = %rec.stage, error = %rec.message, "synthesis item skipped");
                manifest.skipped.push(rec);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::SynthesisFailed);
    }
    Ok((out, manifest))
}

/// [`synthesize`] plus writing the corpus files into `out_dir`.
pub fn synthesize_dataset(
    successes: &[Trajectory],
    seeds: &[(Trajectory, ErrorAnnotation)],
    planner: &dyn ChatBackend,
    injector: &dyn ChatBackend,
    embedder: &dyn Embedder,
    out_dir: &Path,
    opts: &SynthesisOptions,
) -> Result<Manifest> {
    let (synth, manifest) = synthesize(successes, seeds, planner, injector, embedder, opts)?;
    fs::create_dir_all(out_dir)?;
    let trajectories: Vec<&Trajectory> = synth.iter().map(|s| &s.trajectory).collect();
    let annotations: Vec<&ErrorAnnotation> = synth.iter().map(|s| &s.annotation).collect();
    write_jsonl(&out_dir.join(TRAJECTORIES_FILE), &trajectories)?;
    write_jsonl(&out_dir.join(ANNOTATIONS_FILE), &annotations)?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Internal(e.to_string()))?;
    fs::write(out_dir.join(MANIFEST_FILE), json + "\n")?;
    info!(items = manifest.items.len(), skipped = manifest.skipped.len(), "synthetic corpus written");
    Ok(manifest)
}
