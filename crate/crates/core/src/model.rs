//! Trajectories, annotations and diagnosis results, plus their on-disk formats.
//!
//! Step indices are 0-based everywhere inside the engine. Dataset adapters
//! that use another convention declare it through [`StepBase`] and convert on
//! the way in and out.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub agent: String,
    pub content: String,
    #[serde(default)]
    pub result: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_answer: Option<String>,
    pub outcome: Outcome,
    pub steps: Vec<Step>,
}

impl Trajectory {
    /// Builds a trajectory from `(agent, content, result)` triples, assigning
    /// dense indices.
    pub fn new<I, A, C, R>(
        id: impl Into<String>,
        question: impl Into<String>,
        outcome: Outcome,
        steps: I,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = (A, C, R)>,
        A: Into<String>,
        C: Into<String>,
        R: Into<String>,
    {
        let steps: Vec<Step> = steps
            .into_iter()
            .enumerate()
            .map(|(index, (agent, content, result))| Step {
                index,
                agent: agent.into(),
                content: content.into(),
                result: result.into(),
            })
            .collect();
        let t = Trajectory {
            id: id.into(),
            question: question.into(),
            ground_truth_answer: None,
            outcome,
            steps,
        };
        t.check()?;
        Ok(t)
    }

    pub fn with_ground_truth(mut self, answer: impl Into<String>) -> Self {
        self.ground_truth_answer = Some(answer.into());
        self
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Checks the structural invariants: non-empty, dense indices, named agents.
    pub fn check(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::violation("field `id` must be non-empty"));
        }
        if self.steps.is_empty() {
            return Err(Error::violation("field `steps` must be non-empty"));
        }
        for (pos, step) in self.steps.iter().enumerate() {
            if step.index != pos {
                return Err(Error::violation(format!(
                    "step indices must be dense from 0; found {} at position {pos}",
                    step.index
                )));
            }
            if step.agent.is_empty() {
                return Err(Error::violation(format!("step {pos}: field `agent` must be non-empty")));
            }
        }
        Ok(())
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("trajectory serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorAnnotation {
    pub trajectory_id: String,
    pub mistake_agent: String,
    pub mistake_step: usize,
    pub mistake_reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisResult {
    pub trajectory_id: String,
    pub agent: String,
    pub step: usize,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default)]
    pub schema_ids_used: Vec<String>,
    pub raw_model_output: String,
    /// Agent named by the model when it disagreed with the agent of the
    /// diagnosed step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claimed_agent: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrajectoryFormat {
    CanonicalJson,
    WhoWhenJson,
}

/// Index convention used by an external dataset or model output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepBase {
    #[default]
    ZeroBased,
    OneBased,
}

impl StepBase {
    /// External index to internal 0-based index.
    pub fn to_internal(self, external: usize) -> Option<usize> {
        match self {
            StepBase::ZeroBased => Some(external),
            StepBase::OneBased => external.checked_sub(1),
        }
    }

    pub fn to_external(self, internal: usize) -> usize {
        match self {
            StepBase::ZeroBased => internal,
            StepBase::OneBased => internal + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTrajectory {
    pub trajectory: Trajectory,
    pub annotation: Option<ErrorAnnotation>,
}

pub fn parse_trajectory(raw: &[u8], format: TrajectoryFormat) -> Result<ParsedTrajectory> {
    parse_trajectory_with(raw, format, StepBase::ZeroBased)
}

/// Parses one trajectory. `base` only affects the Who&When adapter's
/// `mistake_step` field.
pub fn parse_trajectory_with(
    raw: &[u8],
    format: TrajectoryFormat,
    base: StepBase,
) -> Result<ParsedTrajectory> {
    let value: Value = serde_json::from_slice(raw).map_err(|e| json_error(raw, &e))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::violation("top-level value must be an object"))?;
    match format {
        TrajectoryFormat::CanonicalJson => Ok(ParsedTrajectory {
            trajectory: canonical_from_object(obj)?,
            annotation: None,
        }),
        TrajectoryFormat::WhoWhenJson => who_when_from_object(obj, base),
    }
}

fn json_error(raw: &[u8], e: &serde_json::Error) -> Error {
    // serde_json reports 1-based line/column; columns count bytes.
    let mut offset = 0usize;
    for (n, line) in raw.split(|b| *b == b'\n').enumerate() {
        if n + 1 == e.line() {
            offset += e.column().saturating_sub(1).min(line.len());
            break;
        }
        offset += line.len() + 1;
    }
    Error::Parse {
        offset: offset.min(raw.len()),
        message: e.to_string(),
    }
}

fn req_str<'a>(obj: &'a Map<String, Value>, field: &str, ctx: &str) -> Result<&'a str> {
    match obj.get(field) {
        None | Some(Value::Null) => Err(Error::violation(format!("{ctx}missing required field `{field}`"))),
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(Error::violation(format!("{ctx}field `{field}` must be a string"))),
    }
}

fn opt_str(obj: &Map<String, Value>, field: &str, ctx: &str) -> Result<Option<String>> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(Value::Number(n)) => Ok(Some(n.to_string())),
        Some(_) => Err(Error::violation(format!("{ctx}field `{field}` must be a string"))),
    }
}

fn canonical_from_object(obj: &Map<String, Value>) -> Result<Trajectory> {
    let id = req_str(obj, "id", "")?.to_string();
    let question = req_str(obj, "question", "")?.to_string();
    let ground_truth_answer = opt_str(obj, "ground_truth_answer", "")?;
    let outcome = match req_str(obj, "outcome", "")?.to_ascii_lowercase().as_str() {
        "success" => Outcome::Success,
        "failure" => Outcome::Failure,
        other => {
            return Err(Error::violation(format!(
                "field `outcome` must be \"success\" or \"failure\", got {other:?}"
            )))
        }
    };
    let steps = match obj.get("steps") {
        None | Some(Value::Null) => return Err(Error::violation("missing required field `steps`")),
        Some(Value::Array(a)) => a,
        Some(_) => return Err(Error::violation("field `steps` must be an array")),
    };

    let mut parsed = Vec::with_capacity(steps.len());
    for (pos, raw_step) in steps.iter().enumerate() {
        let ctx = format!("steps[{pos}]: ");
        let s = raw_step
            .as_object()
            .ok_or_else(|| Error::violation(format!("{ctx}step must be an object")))?;
        let index = match s.get("index") {
            None | Some(Value::Null) => None,
            Some(v) => Some(v.as_u64().ok_or_else(|| {
                Error::violation(format!("{ctx}field `index` must be a non-negative integer"))
            })? as usize),
        };
        parsed.push((
            index,
            Step {
                index: pos,
                agent: req_str(s, "agent", &ctx)?.to_string(),
                content: req_str(s, "content", &ctx)?.to_string(),
                result: opt_str(s, "result", &ctx)?.unwrap_or_default(),
            },
        ));
    }

    // Explicit indices may arrive out of order but must be a permutation of 0..n.
    if parsed.iter().any(|(i, _)| i.is_some()) {
        if parsed.iter().any(|(i, _)| i.is_none()) {
            return Err(Error::violation("either all steps carry `index` or none do"));
        }
        let mut seen = HashSet::new();
        for (i, _) in &parsed {
            let i = i.unwrap();
            if !seen.insert(i) {
                return Err(Error::violation(format!("duplicate step index {i}")));
            }
            if i >= parsed.len() {
                return Err(Error::violation(format!(
                    "step index {i} leaves a gap (trajectory has {} steps)",
                    parsed.len()
                )));
            }
        }
        parsed.sort_by_key(|(i, _)| i.unwrap());
        for (pos, (_, step)) in parsed.iter_mut().enumerate() {
            step.index = pos;
        }
    }

    let t = Trajectory {
        id,
        question,
        ground_truth_answer,
        outcome,
        steps: parsed.into_iter().map(|(_, s)| s).collect(),
    };
    t.check()?;
    Ok(t)
}

const WHO_WHEN_ID_KEYS: [&str; 4] = ["id", "question_ID", "q_id", "task_id"];

fn who_when_from_object(obj: &Map<String, Value>, base: StepBase) -> Result<ParsedTrajectory> {
    let id = WHO_WHEN_ID_KEYS
        .iter()
        .find_map(|k| opt_str(obj, k, "").ok().flatten())
        .ok_or_else(|| Error::violation("missing required field `id`"))?;
    let question = req_str(obj, "question", "")?.to_string();
    let ground_truth_answer = opt_str(obj, "ground_truth", "")?;
    let history = match obj.get("history") {
        Some(Value::Array(a)) => a,
        None | Some(Value::Null) => return Err(Error::violation("missing required field `history`")),
        Some(_) => return Err(Error::violation("field `history` must be an array")),
    };

    let mut steps = Vec::with_capacity(history.len());
    for (pos, entry) in history.iter().enumerate() {
        let ctx = format!("history[{pos}]: ");
        let e = entry
            .as_object()
            .ok_or_else(|| Error::violation(format!("{ctx}entry must be an object")))?;
        let agent = opt_str(e, "name", &ctx)?
            .filter(|n| !n.is_empty())
            .or(opt_str(e, "role", &ctx)?)
            .ok_or_else(|| Error::violation(format!("{ctx}missing required field `name`")))?;
        steps.push(Step {
            index: pos,
            agent,
            content: req_str(e, "content", &ctx)?.to_string(),
            result: String::new(),
        });
    }
    let trajectory = Trajectory {
        id: id.clone(),
        question,
        ground_truth_answer,
        outcome: Outcome::Failure,
        steps,
    };
    trajectory.check()?;

    let annotation = match opt_str(obj, "mistake_agent", "")? {
        None => None,
        Some(agent) => {
            let raw_step = match obj.get("mistake_step") {
                Some(Value::Number(n)) => n.as_u64().map(|v| v as usize),
                Some(Value::String(s)) => s.trim().parse::<usize>().ok(),
                None | Some(Value::Null) => {
                    return Err(Error::violation("missing required field `mistake_step`"))
                }
                _ => None,
            }
            .ok_or_else(|| Error::violation("field `mistake_step` must be a non-negative integer"))?;
            let mistake_step = base
                .to_internal(raw_step)
                .ok_or_else(|| Error::violation("field `mistake_step` is 0 under a 1-based adapter"))?;
            Some(ErrorAnnotation {
                trajectory_id: id,
                mistake_agent: agent,
                mistake_step,
                mistake_reason: opt_str(obj, "mistake_reason", "")?.unwrap_or_default(),
            })
        }
    };
    Ok(ParsedTrajectory { trajectory, annotation })
}

/// Exports a trajectory (and optional annotation) in the Who&When layout.
pub fn to_who_when_json(t: &Trajectory, a: Option<&ErrorAnnotation>, base: StepBase) -> Value {
    let history: Vec<Value> = t
        .steps
        .iter()
        .map(|s| serde_json::json!({ "name": s.agent, "role": s.agent, "content": s.content }))
        .collect();
    let mut obj = Map::new();
    obj.insert("id".into(), Value::String(t.id.clone()));
    obj.insert("question".into(), Value::String(t.question.clone()));
    if let Some(gt) = &t.ground_truth_answer {
        obj.insert("ground_truth".into(), Value::String(gt.clone()));
    }
    obj.insert("history".into(), Value::Array(history));
    if let Some(a) = a {
        obj.insert("mistake_agent".into(), Value::String(a.mistake_agent.clone()));
        obj.insert(
            "mistake_step".into(),
            Value::String(base.to_external(a.mistake_step).to_string()),
        );
        obj.insert("mistake_reason".into(), Value::String(a.mistake_reason.clone()));
    }
    Value::Object(obj)
}

/// Separator inserted between the head and tail windows of an elided rendering.
pub const ELISION_MARKER: &str = "\n[... steps elided ...]\n";

pub fn render_step(step: &Step) -> String {
    if step.result.is_empty() {
        format!("Step {} — {}: {}", step.index, step.agent, step.content)
    } else {
        format!(
            "Step {} — {}: {} [result: {}]",
            step.index, step.agent, step.content, step.result
        )
    }
}

fn char_len(s: &str) -> usize {
    s.chars().count()
}

pub(crate) fn clip_chars(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((byte, _)) => &s[..byte],
        None => s,
    }
}

fn clip_chars_tail(s: &str, n: usize) -> &str {
    let len = char_len(s);
    if len <= n {
        return s;
    }
    let (byte, _) = s.char_indices().nth(len - n).expect("in range");
    &s[byte..]
}

/// Renders a trajectory as one entry per step.
///
/// When the rendering exceeds `max_chars` characters, whole step entries are
/// kept from the head and the tail (half the budget each) around a single
/// [`ELISION_MARKER`]. An entry that alone overflows its half is clipped.
pub fn render_trajectory_text(t: &Trajectory, max_chars: usize) -> String {
    let entries: Vec<String> = t.steps.iter().map(render_step).collect();
    let full = entries.join("\n");
    if char_len(&full) <= max_chars {
        return full;
    }

    let head_budget = max_chars / 2;
    let tail_budget = max_chars - head_budget;

    let mut head_count = 0;
    let mut head_len = 0;
    for e in &entries {
        let add = char_len(e) + usize::from(head_count > 0);
        if head_len + add > head_budget {
            break;
        }
        head_len += add;
        head_count += 1;
    }
    let head = if head_count == 0 {
        clip_chars(&entries[0], head_budget).to_string()
    } else {
        entries[..head_count].join("\n")
    };

    let mut tail_start = entries.len();
    let mut tail_len = 0;
    while tail_start > head_count.max(1) {
        let add = char_len(&entries[tail_start - 1]) + usize::from(tail_start < entries.len());
        if tail_len + add > tail_budget {
            break;
        }
        tail_len += add;
        tail_start -= 1;
    }
    let tail = if tail_start == entries.len() {
        clip_chars_tail(entries.last().unwrap(), tail_budget).to_string()
    } else {
        entries[tail_start..].join("\n")
    };

    format!("{head}{ELISION_MARKER}{tail}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    TrajectoryMismatch { annotation: String, trajectory: String },
    StepOutOfRange { step: usize, steps: usize },
    AgentMismatch { annotated: String, actual: String },
    OutcomeNotFailure,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TrajectoryMismatch { annotation, trajectory } => write!(
                f,
                "annotation refers to trajectory {annotation:?}, not {trajectory:?}"
            ),
            Violation::StepOutOfRange { step, steps } => {
                write!(f, "step out of range: {step} (trajectory has {steps} steps)")
            }
            Violation::AgentMismatch { annotated, actual } => write!(
                f,
                "agent mismatch: annotated {annotated:?}, step executed by {actual:?}"
            ),
            Violation::OutcomeNotFailure => write!(f, "outcome not failure"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            let msgs: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
            Err(Error::SchemaViolation(msgs.join("; ")))
        }
    }
}

pub fn validate_annotation(t: &Trajectory, a: &ErrorAnnotation) -> ValidationReport {
    let mut violations = Vec::new();
    if a.trajectory_id != t.id {
        violations.push(Violation::TrajectoryMismatch {
            annotation: a.trajectory_id.clone(),
            trajectory: t.id.clone(),
        });
    }
    match t.steps.get(a.mistake_step) {
        None => violations.push(Violation::StepOutOfRange {
            step: a.mistake_step,
            steps: t.steps.len(),
        }),
        Some(step) if step.agent != a.mistake_agent => violations.push(Violation::AgentMismatch {
            annotated: a.mistake_agent.clone(),
            actual: step.agent.clone(),
        }),
        Some(_) => {}
    }
    if t.outcome != Outcome::Failure {
        violations.push(Violation::OutcomeNotFailure);
    }
    ValidationReport { violations }
}

/// Reads a JSONL corpus of trajectories. Blank lines are skipped; ids must be unique.
pub fn read_trajectories(path: &Path, format: TrajectoryFormat, base: StepBase) -> Result<Vec<ParsedTrajectory>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = parse_trajectory_with(line.as_bytes(), format, base).map_err(|e| match e {
            Error::Parse { message, .. } => Error::ParseLine { line: n + 1, message },
            Error::SchemaViolation(m) => Error::SchemaViolation(format!("line {}: {m}", n + 1)),
            other => other,
        })?;
        if !ids.insert(parsed.trajectory.id.clone()) {
            return Err(Error::violation(format!(
                "line {}: duplicate trajectory id {:?}",
                n + 1,
                parsed.trajectory.id
            )));
        }
        out.push(parsed);
    }
    Ok(out)
}

/// Reads a corpus from a directory of `*.json` files (one trajectory each,
/// sorted by file name), a single `.json` file, or a JSONL file.
pub fn load_corpus(path: &Path, format: TrajectoryFormat, base: StepBase) -> Result<Vec<ParsedTrajectory>> {
    let read_one = |p: &Path| -> Result<ParsedTrajectory> {
        let raw = std::fs::read(p)?;
        parse_trajectory_with(&raw, format, base).map_err(|e| match e {
            Error::SchemaViolation(m) => Error::SchemaViolation(format!("{}: {m}", p.display())),
            other => other,
        })
    };
    let out = if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        files.iter().map(|p| read_one(p)).collect::<Result<Vec<_>>>()?
    } else if path.extension().is_some_and(|x| x == "json") {
        vec![read_one(path)?]
    } else {
        return read_trajectories(path, format, base);
    };
    let mut ids = HashSet::new();
    for p in &out {
        if !ids.insert(p.trajectory.id.as_str()) {
            return Err(Error::violation(format!("duplicate trajectory id {:?}", p.trajectory.id)));
        }
    }
    Ok(out)
}

/// Pairs trajectories with annotations: from `annotations` when given,
/// else from the annotations embedded in the source records.
pub fn annotated_corpus(
    parsed: Vec<ParsedTrajectory>,
    annotations: Option<Vec<ErrorAnnotation>>,
) -> Result<Vec<(Trajectory, ErrorAnnotation)>> {
    match annotations {
        Some(list) => join_annotations(parsed.into_iter().map(|p| p.trajectory).collect(), list),
        None => {
            let mut out = Vec::with_capacity(parsed.len());
            for p in parsed {
                match p.annotation {
                    Some(a) => out.push((p.trajectory, a)),
                    None => {
                        return Err(Error::invalid(format!(
                            "trajectory {:?} has no annotation; pass an annotations file",
                            p.trajectory.id
                        )))
                    }
                }
            }
            Ok(out)
        }
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::ParseLine {
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::Internal(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Pairs each trajectory with its annotation by id. Trajectories without an
/// annotation are dropped; annotations without a trajectory are an error.
pub fn join_annotations(
    trajectories: Vec<Trajectory>,
    annotations: Vec<ErrorAnnotation>,
) -> Result<Vec<(Trajectory, ErrorAnnotation)>> {
    let mut by_id: std::collections::HashMap<String, Trajectory> =
        trajectories.into_iter().map(|t| (t.id.clone(), t)).collect();
    let mut out = Vec::with_capacity(annotations.len());
    for a in annotations {
        let t = by_id
            .remove(&a.trajectory_id)
            .ok_or_else(|| Error::NotFound(vec![a.trajectory_id.clone()]))?;
        out.push((t, a));
    }
    Ok(out)
}
