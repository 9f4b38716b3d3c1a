//! Step-level evaluation: Acc@k scoring, batch runs in zero-shot and
//! schema-guided mode, leakage auditing and report emitters.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::llm::ChatBackend;
use crate::model::{validate_annotation, ErrorAnnotation, Trajectory};
use crate::recognition::{recognize_detailed, RecognitionOptions};
use crate::store::SchemaCache;

pub const DEFAULT_K_LIST: [usize; 4] = [0, 1, 3, 5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub trajectory_id: String,
    pub run: usize,
    pub predicted_step: Option<usize>,
    pub true_step: usize,
    pub predicted_agent: Option<String>,
    pub true_agent: String,
    pub parse_failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_kind: Option<String>,
}

impl EvalRecord {
    fn within(&self, k: usize) -> bool {
        self.predicted_step.is_some_and(|p| p.abs_diff(self.true_step) <= k)
    }
}

/// Fraction of records whose predicted step lies within `k` of the truth.
/// Records without a prediction count as misses.
pub fn accuracy_at_k(records: &[EvalRecord], k: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("no records to score"));
    }
    let hits = records.iter().filter(|r| r.within(k)).count();
    Ok(hits as f64 / records.len() as f64)
}

/// Exact agent-name agreement; records without a prediction count as misses.
pub fn agent_accuracy(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("no records to score"));
    }
    let hits = records.iter().filter(|r| r.predicted_agent.as_deref() == Some(r.true_agent.as_str())).count();
    Ok(hits as f64 / records.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    ZeroShot,
    SchemaGuided,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero_shot" | "zero-shot" => Ok(EvalMode::ZeroShot),
            "schema_guided" | "schema-guided" => Ok(EvalMode::SchemaGuided),
            other => Err(Error::invalid(format!("unknown mode {other:?}; expected zero_shot or schema_guided"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mode: EvalMode,
    /// Schemata retrieved per trajectory in schema-guided mode.
    pub k: usize,
    pub k_list: Vec<usize>,
    pub runs: usize,
    pub recognition: RecognitionOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: EvalMode::SchemaGuided,
            k: 5,
            k_list: DEFAULT_K_LIST.to_vec(),
            runs: 1,
            recognition: RecognitionOptions::default(),
        }
    }
}

/// Which schemata one recognize call put into its prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognizeLog {
    pub run: usize,
    pub trajectory_id: String,
    /// `(schema_id, source_trajectory_id)` pairs.
    pub schemas_used: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KAccuracy {
    pub k: usize,
    /// Mean over runs.
    pub accuracy: f64,
    pub per_run: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub trajectories: usize,
    pub runs: usize,
    pub records: usize,
    pub parse_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub mode: EvalMode,
    pub detector_model: String,
    pub embedding_backend: String,
    /// Retrieval depth; absent in zero-shot mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: Vec<KAccuracy>,
    pub agent_accuracy: f64,
    pub counts: EvalCounts,
    pub metadata: EvalMetadata,
}

impl EvalReport {
    pub fn acc(&self, k: usize) -> Option<f64> {
        self.accuracy.iter().find(|a| a.k == k).map(|a| a.accuracy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub records: Vec<EvalRecord>,
    pub logs: Vec<RecognizeLog>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Diagnoses every trajectory of `corpus` `runs` times and scores the
/// predictions. Recognition errors become failed records, never aborting.
pub fn evaluate_run(
    corpus: &[(Trajectory, ErrorAnnotation)],
    store: Option<&SchemaCache>,
    llm: &dyn ChatBackend,
    embedder: &dyn Embedder,
    cfg: &EvalConfig,
) -> Result<EvalOutcome> {
    if corpus.is_empty() {
        return Err(Error::invalid("evaluation corpus is empty"));
    }
    if cfg.runs == 0 {
        return Err(Error::invalid("runs must be >= 1"));
    }
    if cfg.k_list.is_empty() {
        return Err(Error::invalid("k_list must not be empty"));
    }
    for (t, a) in corpus {
        validate_annotation(t, a)
            .into_result()
            .map_err(|e| Error::SchemaViolation(format!("trajectory {:?}: {e}", t.id)))?;
    }
    let store = match cfg.mode {
        EvalMode::ZeroShot => None,
        EvalMode::SchemaGuided => {
            if cfg.k == 0 {
                return Err(Error::invalid("schema-guided evaluation needs k >= 1"));
            }
            Some(store.ok_or_else(|| Error::invalid("schema-guided evaluation needs a store"))?)
        }
    };

    let mut records = Vec::with_capacity(corpus.len() * cfg.runs);
    let mut logs = Vec::with_capacity(corpus.len() * cfg.runs);
    for run in 0..cfg.runs {
        let results: Vec<(EvalRecord, RecognizeLog)> = corpus
            .par_iter()
            .map(|(t, a)| {
                let mut rec = EvalRecord {
                    trajectory_id: t.id.clone(),
                    run,
                    predicted_step: None,
                    true_step: a.mistake_step,
                    predicted_agent: None,
                    true_agent: a.mistake_agent.clone(),
                    parse_failed: true,
                    error_kind: None,
                };
                let mut log = RecognizeLog { run, trajectory_id: t.id.clone(), schemas_used: Vec::new() };
                match recognize_detailed(t, store, cfg.k, llm, embedder, &cfg.recognition) {
                    Ok(r) => {
                        rec.predicted_step = Some(r.diagnosis.step);
                        rec.predicted_agent = Some(r.diagnosis.agent);
                        rec.parse_failed = false;
                        log.schemas_used =
                            r.references.into_iter().map(|b| (b.schema_id, b.source_trajectory_id)).collect();
                    }
                    Err(e) => {
                        warn!(trajectory = %t.id, run, error = %e, "recognition failed; scored as a miss");
                        rec.error_kind = Some(e.kind().to_string());
                    }
                }
                (rec, log)
            })
            .collect();
        for (r, l) in results {
            records.push(r);
            logs.push(l);
        }
    }

    let mut accuracy = Vec::with_capacity(cfg.k_list.len());
    for &k in &cfg.k_list {
        let per_run = (0..cfg.runs)
            .map(|run| {
                let rs: Vec<EvalRecord> = records.iter().filter(|r| r.run == run).cloned().collect();
                accuracy_at_k(&rs, k)
            })
            .collect::<Result<Vec<_>>>()?;
        accuracy.push(KAccuracy { k, accuracy: mean(&per_run), per_run });
    }
    let agent_per_run = (0..cfg.runs)
        .map(|run| {
            let rs: Vec<EvalRecord> = records.iter().filter(|r| r.run == run).cloned().collect();
            agent_accuracy(&rs)
        })
        .collect::<Result<Vec<_>>>()?;

    let report = EvalReport {
        accuracy,
        agent_accuracy: mean(&agent_per_run),
        counts: EvalCounts {
            trajectories: corpus.len(),
            runs: cfg.runs,
            records: records.len(),
            parse_failures: records.iter().filter(|r| r.parse_failed).count(),
        },
        metadata: EvalMetadata {
            mode: cfg.mode,
            detector_model: llm.model().to_string(),
            embedding_backend: embedder.backend_tag().to_string(),
            retrieval_k: store.map(|_| cfg.k),
            store_hash: store.map(SchemaCache::content_hash),
            store_size: store.map(SchemaCache::len),
        },
    };
    Ok(EvalOutcome { report, records, logs })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageFinding {
    pub run: usize,
    pub trajectory_id: String,
    pub schema_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AuditResult {
    pub checked: usize,
    pub findings: Vec<LeakageFinding>,
}

impl AuditResult {
    pub fn is_ok(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Flags every prompt that contained a schema distilled from the very
/// trajectory being diagnosed.
pub fn leakage_audit(logs: &[RecognizeLog]) -> AuditResult {
    let mut findings = Vec::new();
    for log in logs {
        for (schema_id, source) in &log.schemas_used {
            if *source == log.trajectory_id {
                findings.push(LeakageFinding {
                    run: log.run,
                    trajectory_id: log.trajectory_id.clone(),
                    schema_id: schema_id.clone(),
                });
            }
        }
    }
    AuditResult { checked: logs.len(), findings }
}

/// One row per labelled report, one Acc@k column per k of the first report,
/// then agent accuracy. Values are percentages with one decimal.
pub fn reports_to_csv(rows: &[(&str, &EvalReport)]) -> Result<String> {
    let ks: Vec<usize> = rows.first().map(|(_, r)| r.accuracy.iter().map(|a| a.k).collect()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["method".to_string()];
    header.extend(ks.iter().map(|k| format!("Acc@{k}")));
    header.push("Agent".into());
    w.write_record(&header).map_err(|e| Error::Internal(e.to_string()))?;
    for (label, report) in rows {
        let mut rec = vec![label.to_string()];
        for k in &ks {
            rec.push(report.acc(*k).map(|a| format!("{:.1}", a * 100.0)).unwrap_or_default());
        }
        rec.push(format!("{:.1}", report.agent_accuracy * 100.0));
        w.write_record(&rec).map_err(|e| Error::Internal(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
}

/// Per-trajectory correctness at k=0 across runs, for quick diffing of two
/// reports.
pub fn exact_hits(records: &[EvalRecord]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for r in records {
        *out.entry(r.trajectory_id.clone()).or_insert(0) += usize::from(r.within(0));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashedEmbedder;
    use crate::llm::FnBackend;
    use crate::model::Outcome;
    use proptest::prelude::*;

    fn rec(truth: usize, pred: Option<usize>) -> EvalRecord {
        EvalRecord {
            trajectory_id: format!("t{truth}-{pred:?}"),
            run: 0,
            predicted_step: pred,
            true_step: truth,
            predicted_agent: pred.map(|_| "A".into()),
            true_agent: "A".into(),
            parse_failed: pred.is_none(),
            error_kind: None,
        }
    }

    #[test]
    fn off_by_one() {
        let r = [rec(5, Some(6))];
        assert_eq!(accuracy_at_k(&r, 0).unwrap(), 0.0);
        assert_eq!(accuracy_at_k(&r, 1).unwrap(), 1.0);
    }

    #[test]
    fn empty_is_invalid() {
        assert!(matches!(accuracy_at_k(&[], 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn ten_record_fixture() {
        // Offsets 0,0,1,1,2,3,3,5,7 and one parse failure.
        let offs = [0usize, 0, 1, 1, 2, 3, 3, 5, 7];
        let mut rs: Vec<EvalRecord> = offs.iter().map(|&o| rec(10, Some(10 + o))).collect();
        rs.push(rec(10, None));
        // Expected counts by the definition: |offset| <= k.
        let expect = |k: usize| (offs.iter().filter(|&&o| o <= k).count()) as f64 / 10.0;
        for k in [0, 1, 3, 5] {
            assert_eq!(accuracy_at_k(&rs, k).unwrap(), expect(k));
        }
        assert_eq!(accuracy_at_k(&rs, 0).unwrap(), 0.2);
        assert_eq!(accuracy_at_k(&rs, 1).unwrap(), 0.4);
        assert_eq!(accuracy_at_k(&rs, 3).unwrap(), 0.7);
        assert_eq!(accuracy_at_k(&rs, 5).unwrap(), 0.8);
    }

    proptest! {
        #[test]
        fn monotone_in_k(pairs in prop::collection::vec((0usize..30, prop::option::of(0usize..30)), 1..50)) {
            let rs: Vec<EvalRecord> = pairs.iter().map(|&(t, p)| rec(t, p)).collect();
            let mut prev = 0.0;
            for k in 0..35 {
                let a = accuracy_at_k(&rs, k).unwrap();
                prop_assert!(a >= prev);
                prev = a;
            }
            let failures = rs.iter().filter(|r| r.parse_failed).count() as f64 / rs.len() as f64;
            prop_assert!((prev - (1.0 - failures)).abs() < 1e-12);
        }
    }

    #[test]
    fn audit_findings() {
        assert!(leakage_audit(&[]).is_ok());
        let clean = RecognizeLog { run: 0, trajectory_id: "a".into(), schemas_used: vec![("s1".into(), "b".into())] };
        assert!(leakage_audit(std::slice::from_ref(&clean)).is_ok());
        let dirty = RecognizeLog { run: 0, trajectory_id: "a".into(), schemas_used: vec![("s2".into(), "a".into())] };
        let res = leakage_audit(&[clean, dirty]);
        assert_eq!(res.findings.len(), 1);
        assert_eq!(res.findings[0].trajectory_id, "a");
        assert_eq!(res.findings[0].schema_id, "s2");
    }

    fn corpus() -> Vec<(Trajectory, ErrorAnnotation)> {
        (0..4)
            .map(|i| {
                let id = format!("t{i}");
                let t = Trajectory::new(&id, "q", Outcome::Failure, (0..5).map(|j| ("Agent", format!("{id} {j}"), "")))
                    .unwrap();
                let a = ErrorAnnotation { trajectory_id: id, mistake_agent: "Agent".into(), mistake_step: i, mistake_reason: "r".into() };
                (t, a)
            })
            .collect()
    }

    #[test]
    fn oracle_detector_scores_one_and_runs_agree() {
        let llm = FnBackend::text("oracle", |p| {
            let i: usize = p.split("Step 0 — Agent: t").nth(1).unwrap()[..1].parse().unwrap();
            format!("Agent Name: Agent\nStep Number: {i}")
        });
        let e = HashedEmbedder::default();
        let cfg = EvalConfig { mode: EvalMode::ZeroShot, runs: 3, ..Default::default() };
        let out = evaluate_run(&corpus(), None, &llm, &e, &cfg).unwrap();
        assert_eq!(out.report.acc(0), Some(1.0));
        assert_eq!(out.report.agent_accuracy, 1.0);
        assert_eq!(out.report.accuracy[0].per_run, vec![1.0, 1.0, 1.0]);
        assert_eq!(out.report.counts.records, 12);
        assert!(out.report.metadata.store_hash.is_none());
    }

    #[test]
    fn failures_are_misses() {
        let llm = FnBackend::text("mute", |_| "no".into());
        let cfg = EvalConfig { mode: EvalMode::ZeroShot, ..Default::default() };
        let out = evaluate_run(&corpus(), None, &llm, &HashedEmbedder::default(), &cfg).unwrap();
        assert_eq!(out.report.counts.parse_failures, 4);
        assert_eq!(out.report.acc(5), Some(0.0));
        assert!(out.records.iter().all(|r| r.error_kind.as_deref() == Some("RecognitionFailed")));
    }

    #[test]
    fn schema_guided_needs_store() {
        let llm = FnBackend::text("x", |_| "Step Number: 0".into());
        let r = evaluate_run(&corpus(), None, &llm, &HashedEmbedder::default(), &EvalConfig::default());
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn csv_layout() {
        let llm = FnBackend::text("x", |_| "Step Number: 0".into());
        let cfg = EvalConfig { mode: EvalMode::ZeroShot, ..Default::default() };
        let out = evaluate_run(&corpus(), None, &llm, &HashedEmbedder::default(), &cfg).unwrap();
        let csv = reports_to_csv(&[("zero-shot, x", &out.report)]).unwrap();
        assert_eq!(csv, "method,Acc@0,Acc@1,Acc@3,Acc@5,Agent\n\"zero-shot, x\",25.0,50.0,100.0,100.0,100.0\n");
    }
}
