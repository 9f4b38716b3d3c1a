//! Offline schema extraction: cluster annotated failures, take each
//! cluster's medoid and distill one schema per cluster.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::{info, warn};

use crate::embedding::{cosine, embed_trajectory, Embedder, EmbeddingVector, DEFAULT_CONDENSE_CHARS};
use crate::error::{Error, Result};
use crate::llm::{chat, ChatBackend, ChatMessage};
use crate::model::{render_trajectory_text, validate_annotation, ErrorAnnotation, Trajectory};
use crate::prompts::{fill, SCHEMA_FORMAT_REMINDER, SCHEMA_GENERATION};
use crate::sections::{section, split_sections};
use crate::store::{retrieval_text, ErrorSchema, SchemaCache};

pub const DEFAULT_CLUSTER_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub member_ids: Vec<String>,
    pub medoid_id: String,
    pub centroid: EmbeddingVector,
}

/// Average-linkage agglomerative clustering under cosine similarity.
///
/// Clusters merge while the most similar pair has average similarity of at
/// least `threshold`. Ties merge the pair whose smallest member ids are
/// lexicographically smallest. Clusters come back ordered by their first
/// member in input order, members in input order.
pub fn cluster_trajectories(embeddings: &[(String, EmbeddingVector)], threshold: f64) -> Result<Vec<Cluster>> {
    if embeddings.is_empty() {
        return Err(Error::invalid("cannot cluster an empty set"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let n = embeddings.len();
    let mut sim = vec![vec![1.0f64; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s = cosine(&embeddings[i].1, &embeddings[j].1)?;
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }

    let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    let mut min_id: Vec<&str> = embeddings.iter().map(|(id, _)| id.as_str()).collect();

    loop {
        let mut best: Option<(usize, usize)> = None;
        for i in 0..n {
            if members[i].is_none() {
                continue;
            }
            for j in (i + 1)..n {
                if members[j].is_none() {
                    continue;
                }
                best = match best {
                    None => Some((i, j)),
                    Some((bi, bj)) => {
                        let order = sim[i][j].total_cmp(&sim[bi][bj]).then_with(|| {
                            pair_key(min_id[bi], min_id[bj]).cmp(&pair_key(min_id[i], min_id[j]))
                        });
                        if order == Ordering::Greater { Some((i, j)) } else { Some((bi, bj)) }
                    }
                };
            }
        }
        let Some((a, b)) = best else { break };
        if sim[a][b] < threshold {
            break;
        }
        let absorbed = members[b].take().expect("active");
        let (na, nb) = (members[a].as_ref().unwrap().len() as f64, absorbed.len() as f64);
        for x in 0..n {
            if x == a || members[x].is_none() {
                continue;
            }
            let merged = (na * sim[a][x] + nb * sim[b][x]) / (na + nb);
            sim[a][x] = merged;
            sim[x][a] = merged;
        }
        if min_id[b] < min_id[a] {
            min_id[a] = min_id[b];
        }
        let target = members[a].as_mut().unwrap();
        target.extend(absorbed);
        target.sort_unstable();
    }

    let mut groups: Vec<Vec<usize>> = members.into_iter().flatten().collect();
    groups.sort_by_key(|g| g[0]);
    groups
        .into_iter()
        .map(|g| {
            let pts: Vec<(String, EmbeddingVector)> = g.iter().map(|&i| embeddings[i].clone()).collect();
            Ok(Cluster {
                medoid_id: select_medoid(&pts)?,
                centroid: centroid(&pts)?,
                member_ids: pts.into_iter().map(|(id, _)| id).collect(),
            })
        })
        .collect()
}

fn pair_key<'a>(x: &'a str, y: &'a str) -> (&'a str, &'a str) {
    if x <= y { (x, y) } else { (y, x) }
}

fn centroid(points: &[(String, EmbeddingVector)]) -> Result<EmbeddingVector> {
    let first = &points[0].1;
    let mut acc = vec![0.0; first.dim()];
    for (_, v) in points {
        for (a, x) in acc.iter_mut().zip(v.values()) {
            *a += x;
        }
    }
    let n = points.len() as f64;
    EmbeddingVector::new(acc.into_iter().map(|a| a / n).collect(), first.backend_tag())
}

/// Member with the highest mean cosine similarity to the other members; ties
/// go to the lexicographically smallest id.
pub fn select_medoid(members: &[(String, EmbeddingVector)]) -> Result<String> {
    match members.len() {
        0 => return Err(Error::invalid("cannot pick a medoid of an empty cluster")),
        1 => return Ok(members[0].0.clone()),
        _ => {}
    }
    let mut best: Option<(f64, &str)> = None;
    for (i, (id, v)) in members.iter().enumerate() {
        let mut total = 0.0;
        for (j, (_, w)) in members.iter().enumerate() {
            if i != j {
                total += cosine(v, w)?;
            }
        }
        let mean = total / (members.len() - 1) as f64;
        best = match best {
            Some((m, bid)) if m > mean || (m == mean && bid <= id.as_str()) => Some((m, bid)),
            _ => Some((mean, id.as_str())),
        };
    }
    Ok(best.expect("non-empty").1.to_string())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationOptions {
    /// Character budget for the conversation history slot.
    pub render_chars: usize,
    /// Character budget when condensing the source trajectory for embedding.
    pub condense_chars: usize,
    /// Upper bound on the three analysis sections combined.
    pub max_schema_chars: usize,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        GenerationOptions {
            render_chars: 60_000,
            condense_chars: DEFAULT_CONDENSE_CHARS,
            max_schema_chars: 4_000,
        }
    }
}

/// Sections recovered from a schema-generation answer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedSchema {
    pub signatures: String,
    pub context_analysis: String,
    pub detection_heuristics: String,
    pub reason: Option<String>,
}

const SCHEMA_LABELS: &[(&str, &[&str])] = &[
    ("sig", &["Error Signatures", "Error Signature"]),
    ("ctx", &["Error Context Analysis", "Error Context"]),
    ("heur", &["Detection Heuristics", "Detection Heuristic"]),
    ("agent", &["Agent Name"]),
    ("step", &["Step Number"]),
    ("reason", &["Reason for Mistake"]),
];

/// Parses a generation answer; the error names the first missing section.
pub fn parse_schema_response(raw: &str, max_chars: usize) -> std::result::Result<ParsedSchema, String> {
    let secs = split_sections(raw, SCHEMA_LABELS);
    let get = |key: &str, name: &str| section(&secs, key).map(str::to_string).ok_or_else(|| format!("missing section {name:?}"));
    let parsed = ParsedSchema {
        signatures: get("sig", "Error Signatures")?,
        context_analysis: get("ctx", "Error Context Analysis")?,
        detection_heuristics: get("heur", "Detection Heuristics")?,
        reason: section(&secs, "reason").map(str::to_string),
    };
    let total = parsed.signatures.chars().count()
        + parsed.context_analysis.chars().count()
        + parsed.detection_heuristics.chars().count();
    if total > max_chars {
        return Err(format!("schema sections total {total} characters, limit is {max_chars}"));
    }
    Ok(parsed)
}

pub fn schema_id(source_trajectory_id: &str, text: &str) -> String {
    let mut h = Sha256::new();
    h.update(source_trajectory_id.as_bytes());
    h.update(b"\n");
    h.update(text.as_bytes());
    let hex: String = h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect();
    format!("schema-{hex}")
}

pub fn generation_prompt(t: &Trajectory, a: &ErrorAnnotation, opts: &GenerationOptions) -> String {
    let step = a.mistake_step.to_string();
    fill(
        SCHEMA_GENERATION,
        &[
            ("question", &t.question),
            ("ground_truth", t.ground_truth_answer.as_deref().unwrap_or("(not provided)")),
            ("mistake_agent", &a.mistake_agent),
            ("mistake_step", &step),
            ("mistake_reason", &a.mistake_reason),
            ("chat_content", &render_trajectory_text(t, opts.render_chars)),
        ],
    )
}

/// Distills one schema from an annotated failure.
pub fn generate_schema(
    t: &Trajectory,
    a: &ErrorAnnotation,
    llm: &dyn ChatBackend,
    embedder: &dyn Embedder,
    opts: &GenerationOptions,
) -> Result<ErrorSchema> {
    generate_schema_variant(t, a, llm, embedder, opts, None)
}

/// As [`generate_schema`]; `variant` appends an instruction to the prompt so
/// repeated generations for the same trajectory differ.
pub fn generate_schema_variant(
    t: &Trajectory,
    a: &ErrorAnnotation,
    llm: &dyn ChatBackend,
    embedder: &dyn Embedder,
    opts: &GenerationOptions,
    variant: Option<&str>,
) -> Result<ErrorSchema> {
    validate_annotation(t, a).into_result()?;
    let mut prompt = generation_prompt(t, a, opts);
    if let Some(v) = variant {
        prompt.push_str("\n\n");
        prompt.push_str(v);
    }
    let mut messages = vec![ChatMessage::user(prompt)];
    let first = chat(llm, messages.clone())?.content;
    let parsed = match parse_schema_response(&first, opts.max_schema_chars) {
        Ok(p) => p,
        Err(why) => {
            warn!(trajectory = %t.id, %why, "schema answer rejected, retrying once");
            messages.push(ChatMessage::assistant(first));
            let max = opts.max_schema_chars.to_string();
            messages.push(ChatMessage::user(fill(SCHEMA_FORMAT_REMINDER, &[("max_chars", &max)])));
            let second = chat(llm, messages)?.content;
            parse_schema_response(&second, opts.max_schema_chars)
                .map_err(|reason| Error::GenerationFailed { reason, raw_output: second.clone() })?
        }
    };

    let text = retrieval_text(&parsed.signatures, &parsed.context_analysis, &parsed.detection_heuristics);
    let schema = ErrorSchema {
        id: schema_id(&t.id, &text),
        embedding: embedder.embed(&text)?,
        source_embedding: Some(embed_trajectory(embedder, t, opts.condense_chars)?),
        signatures: parsed.signatures,
        context_analysis: parsed.context_analysis,
        detection_heuristics: parsed.detection_heuristics,
        mistake_agent: a.mistake_agent.clone(),
        mistake_step: a.mistake_step,
        mistake_reason: parsed.reason.unwrap_or_else(|| a.mistake_reason.clone()),
        source_trajectory_id: t.id.clone(),
        created_by: llm.model().to_string(),
    };
    schema.check()?;
    Ok(schema)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub member_ids: Vec<String>,
    pub medoid_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub threshold: f64,
    pub trajectories: usize,
    pub clusters: Vec<ClusterReport>,
    pub schemas_created: usize,
    pub clusters_skipped: usize,
}

/// Clusters the corpus, distills one schema per cluster from its medoid and
/// returns a fresh cache holding them.
pub fn build_offline_cache(
    corpus: &[(Trajectory, ErrorAnnotation)],
    threshold: f64,
    llm: &dyn ChatBackend,
    embedder: &dyn Embedder,
    opts: &GenerationOptions,
) -> Result<(SchemaCache, BuildReport)> {
    let cache = SchemaCache::new(embedder.backend_tag(), embedder.dim());
    let report = extend_offline_cache(&cache, corpus, threshold, llm, embedder, opts)?;
    Ok((cache, report))
}

/// As [`build_offline_cache`], inserting into an existing cache.
pub fn extend_offline_cache(
    cache: &SchemaCache,
    corpus: &[(Trajectory, ErrorAnnotation)],
    threshold: f64,
    llm: &dyn ChatBackend,
    embedder: &dyn Embedder,
    opts: &GenerationOptions,
) -> Result<BuildReport> {
    if corpus.is_empty() {
        return Err(Error::invalid("offline build needs at least one annotated trajectory"));
    }
    for (t, a) in corpus {
        validate_annotation(t, a)
            .into_result()
            .map_err(|e| Error::SchemaViolation(format!("trajectory {:?}: {e}", t.id)))?;
    }
    let embeddings = corpus
        .par_iter()
        .map(|(t, _)| Ok((t.id.clone(), embed_trajectory(embedder, t, opts.condense_chars)?)))
        .collect::<Result<Vec<_>>>()?;
    let clusters = cluster_trajectories(&embeddings, threshold)?;
    info!(clusters = clusters.len(), trajectories = corpus.len(), "clustered corpus");

    let by_id: HashMap<&str, &(Trajectory, ErrorAnnotation)> =
        corpus.iter().map(|pair| (pair.0.id.as_str(), pair)).collect();
    let generated: Vec<Result<ErrorSchema>> = clusters
        .par_iter()
        .map(|c| {
            let (t, a) = by_id[c.medoid_id.as_str()];
            generate_schema(t, a, llm, embedder, opts)
        })
        .collect();

    let mut reports = Vec::with_capacity(clusters.len());
    let mut created = 0;
    for (c, result) in clusters.into_iter().zip(generated) {
        let (schema_id, error) = match result.and_then(|s| cache.put(s)) {
            Ok(id) => {
                created += 1;
                (Some(id), None)
            }
            Err(e) => {
                warn!(medoid = %c.medoid_id, error = %e, "cluster skipped");
                (None, Some(format!("{}: {e}", e.kind())))
            }
        };
        reports.push(ClusterReport { member_ids: c.member_ids, medoid_id: c.medoid_id, schema_id, error });
    }
    if created == 0 {
        return Err(Error::BuildFailed);
    }
    Ok(BuildReport {
        threshold,
        trajectories: corpus.len(),
        clusters_skipped: reports.len() - created,
        clusters: reports,
        schemas_created: created,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::embedding::HashedEmbedder;
    use crate::llm::FnBackend;
    use crate::model::Outcome;

    fn v(vals: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(vals.to_vec(), "fixture").unwrap()
    }

    fn pts(items: &[(&str, &[f64])]) -> Vec<(String, EmbeddingVector)> {
        items.iter().map(|(id, vals)| (id.to_string(), v(vals))).collect()
    }

    #[test]
    fn singleton_cluster() {
        let c = cluster_trajectories(&pts(&[("only", &[1.0, 0.0])]), 0.8).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].medoid_id, "only");
        assert_eq!(c[0].member_ids, vec!["only"]);
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let p = pts(&[("a", &[0.3, 0.4]), ("b", &[0.3, 0.4]), ("c", &[0.6, 0.8])]);
        let c = cluster_trajectories(&p, 0.99).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].member_ids, vec!["a", "b", "c"]);
        assert_eq!(c[0].medoid_id, "a");
    }

    #[test]
    fn planted_two_groups() {
        // Group A near (1,0,0), group B near (0,1,0); ten points in total.
        let raw: Vec<(String, Vec<f64>)> = (0..10)
            .map(|i| {
                let eps = 0.02 * (i % 5) as f64;
                let vals = if i < 5 { vec![1.0, 0.1 - eps, eps] } else { vec![0.1 - eps, 1.0, eps] };
                (format!("p{i}"), vals)
            })
            .collect();
        let p: Vec<(String, EmbeddingVector)> = raw.iter().map(|(id, x)| (id.clone(), v(x))).collect();
        // Brute-force check of the planted similarity structure.
        for i in 0..10 {
            for j in 0..10 {
                let s = cosine(&p[i].1, &p[j].1).unwrap();
                if (i < 5) == (j < 5) {
                    assert!(s >= 0.99, "within {i},{j}: {s}");
                } else {
                    assert!(s <= 0.2, "across {i},{j}: {s}");
                }
            }
        }
        let c = cluster_trajectories(&p, 0.8).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].member_ids, vec!["p0", "p1", "p2", "p3", "p4"]);
        assert_eq!(c[1].member_ids, vec!["p5", "p6", "p7", "p8", "p9"]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(cluster_trajectories(&[], 0.8), Err(Error::InvalidInput(_))));
        let p = pts(&[("a", &[1.0])]);
        assert!(cluster_trajectories(&p, 1.0).is_err());
        assert!(cluster_trajectories(&p, 0.0).is_err());
    }

    #[test]
    fn medoid_of_collinear_arc() {
        // Unit vectors at 0°, 30°, 60°: sims cos30 between neighbours, cos60
        // across. Means: ends (cos30+cos60)/2 = 0.683, middle cos30 = 0.866.
        let p = pts(&[
            ("left", &[1.0, 0.0]),
            ("mid", &[(30f64).to_radians().cos(), (30f64).to_radians().sin()]),
            ("right", &[(60f64).to_radians().cos(), (60f64).to_radians().sin()]),
        ]);
        assert_eq!(select_medoid(&p).unwrap(), "mid");
    }

    #[test]
    fn medoid_ties_and_singletons() {
        assert_eq!(select_medoid(&pts(&[("z", &[1.0])])).unwrap(), "z");
        let p = pts(&[("b", &[1.0, 0.0]), ("a", &[0.0, 1.0])]);
        assert_eq!(select_medoid(&p).unwrap(), "a");
    }

    pub(crate) const WELL_FORMED: &str = "1. Error Signatures:\n- The orchestrator answers before verification.\n\n2. Error Context Analysis:\n- Follows a partial search result.\n\n3. Detection Heuristics:\n- Was the final answer checked against the source?\n\nAgent Name: Orchestrator\n\nStep Number: 5\n\nReason for Mistake: Premature final answer without verification.";

    fn fixture() -> (Trajectory, ErrorAnnotation) {
        let t = Trajectory::new(
            "t-gen",
            "Which year?",
            Outcome::Failure,
            [("Orchestrator", "plan", ""), ("WebSurfer", "search", "page"), ("Orchestrator", "think", ""), ("Orchestrator", "answer 1999", "")],
        )
        .unwrap()
        .with_ground_truth("2001");
        let a = ErrorAnnotation {
            trajectory_id: "t-gen".into(),
            mistake_agent: "Orchestrator".into(),
            mistake_step: 3,
            mistake_reason: "answered too early".into(),
        };
        (t, a)
    }

    #[test]
    fn generate_from_canned_answer() {
        let (t, a) = fixture();
        let llm = FnBackend::text("gen-model", |_| WELL_FORMED.to_string());
        let s = generate_schema(&t, &a, &llm, &HashedEmbedder::default(), &GenerationOptions::default()).unwrap();
        assert!(s.signatures.contains("answers before verification"));
        assert!(s.context_analysis.contains("partial search"));
        assert!(s.detection_heuristics.contains("checked against"));
        // The model's block says step 5; the annotation wins.
        assert_eq!(s.mistake_step, 3);
        assert_eq!(s.mistake_agent, "Orchestrator");
        assert_eq!(s.mistake_reason, "Premature final answer without verification.");
        assert_eq!(s.source_trajectory_id, "t-gen");
        assert_eq!(s.created_by, "gen-model");
        assert_eq!(s.embedding, HashedEmbedder::default().embed(&s.retrieval_text()).unwrap());
        assert!(s.source_embedding.is_some());
    }

    #[test]
    fn prompt_carries_slots() {
        let (t, a) = fixture();
        let p = generation_prompt(&t, &a, &GenerationOptions::default());
        assert!(p.contains("Question: Which year?"));
        assert!(p.contains("Ground Truth: 2001"));
        assert!(p.contains("Error Step: 3"));
        assert!(p.contains("Step 3 — Orchestrator: answer 1999"));
    }

    #[test]
    fn missing_section_retries_then_fails() {
        let (t, a) = fixture();
        let calls = std::sync::Arc::new(std::sync::atomic::AtomicUsize::new(0));
        let c = calls.clone();
        let llm = FnBackend::text("m", move |_| {
            c.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            "Error Signatures: x\nError Context Analysis: y\nAgent Name: A".to_string()
        });
        match generate_schema(&t, &a, &llm, &HashedEmbedder::default(), &GenerationOptions::default()) {
            Err(Error::GenerationFailed { reason, raw_output }) => {
                assert!(reason.contains("Detection Heuristics"));
                assert!(raw_output.contains("Error Signatures"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(calls.load(std::sync::atomic::Ordering::SeqCst), 2);
    }

    #[test]
    fn retry_can_recover() {
        let (t, a) = fixture();
        let llm = FnBackend::new("m", |req| {
            Ok(crate::llm::ChatResponse::stop(if req.messages.len() == 1 { "nonsense" } else { WELL_FORMED }))
        });
        assert!(generate_schema(&t, &a, &llm, &HashedEmbedder::default(), &GenerationOptions::default()).is_ok());
    }

    #[test]
    fn oversized_schema_is_rejected() {
        let long = format!("Error Signatures: {}\nError Context Analysis: c\nDetection Heuristics: h", "x".repeat(5000));
        assert!(parse_schema_response(&long, 4000).unwrap_err().contains("limit"));
    }
}
