use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use errsight_cli::http::router;
use errsight_core::config::ChatBackendKind;
use errsight_core::model::write_jsonl;
use errsight_core::{
    Backends, Engine, EngineConfig, ErrorAnnotation, EvalMode, FnBackend, HashedEmbedder, Outcome, ReplayBackend,
    ReplayMode, Trajectory,
};
use serde_json::Value;
use tower::ServiceExt;

const MODEL: &str = "scripted";

fn scripted() -> FnBackend {
    FnBackend::text(MODEL, |prompt| {
        if prompt.contains("Conversation log of the failed run") {
            "Agent Name: WebSurfer\nStep Number: 1\nReason for Mistake: trusted a stale page".into()
        } else {
            let topic = if prompt.contains("glacier") { "glacier" } else { "harbor" };
            format!(
                "Error Signatures:\n- {topic} figures copied without a check\n\nError Context Analysis:\n- a lookup step\n\n\
                 Detection Heuristics:\n- compare the figure with the page\n\nAgent Name: WebSurfer\nStep Number: 1\n\nReason for Mistake: x"
            )
        }
    })
}

fn traj(id: &str, topic: &str) -> Trajectory {
    Trajectory::new(
        id,
        format!("How many {topic} records for {id}?"),
        Outcome::Failure,
        [
            ("Orchestrator", format!("plan the {topic} lookup"), String::new()),
            ("WebSurfer", format!("open the {topic} page"), format!("{topic} table")),
            ("Orchestrator", format!("report the {topic} count"), String::new()),
        ],
    )
    .unwrap()
}

fn ann(id: &str) -> ErrorAnnotation {
    ErrorAnnotation { trajectory_id: id.into(), mistake_agent: "WebSurfer".into(), mistake_step: 1, mistake_reason: "stale page".into() }
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    corpus: Vec<(Trajectory, ErrorAnnotation)>,
    target: Trajectory,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn store(&self) -> PathBuf {
        self.path("store.jsonl")
    }

    fn replay_config(&self) -> EngineConfig {
        EngineConfig {
            chat_backend: ChatBackendKind::Replay,
            chat_model: MODEL.into(),
            replay_tape: Some(self.path("tape.jsonl")),
            store_path: self.store(),
            ..Default::default()
        }
    }

    fn cli(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_errsight"))
            .args(args)
            .args(["--backend", "replay", "--model", MODEL])
            .arg("--tape")
            .arg(self.path("tape.jsonl"))
            .arg("--store")
            .arg(self.store())
            .output()
            .unwrap()
    }
}

/// Writes a corpus and a target, and records every model call the tests make
/// onto a tape by running the same operations in-process.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let corpus: Vec<(Trajectory, ErrorAnnotation)> = ["h1", "h2", "h3"]
        .iter()
        .map(|id| (traj(id, "harbor"), ann(id)))
        .chain(["g1", "g2", "g3"].iter().map(|id| (traj(id, "glacier"), ann(id))))
        .collect();
    let target = traj("target", "volcano");
    let trajectories: Vec<&Trajectory> = corpus.iter().map(|(t, _)| t).collect();
    let annotations: Vec<&ErrorAnnotation> = corpus.iter().map(|(_, a)| a).collect();
    write_jsonl(&root.join("corpus.jsonl"), &trajectories).unwrap();
    write_jsonl(&root.join("annotations.jsonl"), &annotations).unwrap();
    std::fs::write(root.join("target.json"), serde_json::to_string(&target).unwrap()).unwrap();
    let fb = serde_json::json!({"trajectory_id": "target", "confirmed": true, "ground_truth": ann("target")});
    std::fs::write(root.join("feedback.json"), fb.to_string()).unwrap();

    let recorder =
        ReplayBackend::open(root.join("tape.jsonl"), MODEL, ReplayMode::Record(Arc::new(scripted()))).unwrap();
    let cfg = EngineConfig {
        chat_backend: ChatBackendKind::Record,
        chat_model: MODEL.into(),
        replay_tape: Some(root.join("tape.jsonl")),
        store_path: root.join("recording-store.jsonl"),
        ..Default::default()
    };
    let engine = Engine::open_with(cfg, Backends::uniform(Arc::new(recorder)), Arc::new(HashedEmbedder::default())).unwrap();
    engine.extract(&corpus, None).unwrap();
    engine.recognize(&target).unwrap();
    engine.feedback(serde_json::from_value(fb).unwrap()).unwrap();
    engine.evaluate(&corpus, EvalMode::ZeroShot, 1).unwrap();
    Fixture { _dir: dir, root, corpus, target }
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn extract(f: &Fixture) -> Value {
    let corpus = f.path("corpus.jsonl");
    let anns = f.path("annotations.jsonl");
    stdout_json(&f.cli(&["extract", "--corpus", corpus.to_str().unwrap(), "--annotations", anns.to_str().unwrap()]))
}

async fn call(app: axum::Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test(flavor = "multi_thread")]
async fn cli_and_http_agree_on_replay() {
    let f = fixture();
    let report = extract(&f);
    assert_eq!(report["schemas_created"], 2);
    assert_eq!(report["trajectories"], f.corpus.len());

    let target = f.path("target.json");
    let from_cli = stdout_json(&f.cli(&["recognize", "--trajectory", target.to_str().unwrap()]));
    assert_eq!(from_cli["step"], 1);
    assert_eq!(from_cli["agent"], "WebSurfer");
    assert_eq!(from_cli["schema_ids_used"].as_array().unwrap().len(), 2);

    let engine = Arc::new(Engine::open(f.replay_config()).unwrap());
    let (status, from_http) =
        call(router(engine.clone()), "POST", "/recognize", Some(serde_json::to_string(&f.target).unwrap())).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(from_http, from_cli);

    let (status, health) = call(router(engine.clone()), "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(health["status"], "ok");
    assert_eq!(health["store_size"], 2);

    let (status, list) = call(router(engine.clone()), "GET", "/schemas", None).await;
    assert_eq!(status, StatusCode::OK);
    let id = list[0]["id"].as_str().unwrap().to_string();
    assert_eq!(list[0]["access_count"], 2);
    let (status, entry) = call(router(engine.clone()), "GET", &format!("/schemas/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(entry["schema"]["id"], id);
    let (status, err) = call(router(engine), "GET", "/schemas/schema-nope", None).await;
    assert_eq!((status, err["error"].as_str()), (StatusCode::NOT_FOUND, Some("NotFound")));
}

#[tokio::test(flavor = "multi_thread")]
async fn http_rejects_bad_bodies() {
    let f = fixture();
    let engine = Arc::new(Engine::open(f.replay_config()).unwrap());

    let fb = r#"{"trajectory_id": "target", "confirmed": true}"#;
    let (status, err) = call(router(engine.clone()), "POST", "/feedback", Some(fb.into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["field"], "ground_truth");

    let bad = r#"{"id": "x", "question": "q", "outcome": "failure", "steps": [{"index": 0, "agent": 7, "content": "c"}]}"#;
    let (status, err) = call(router(engine.clone()), "POST", "/recognize", Some(bad.into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["field"], "steps[0].agent");

    let (status, _) = call(router(engine.clone()), "POST", "/recognize?k=0", Some(serde_json::to_string(&f.target).unwrap())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let unknown = r#"{"trajectory_id": "never-seen", "confirmed": false}"#;
    let (status, err) = call(router(engine), "POST", "/feedback", Some(unknown.into())).await;
    assert_eq!((status, err["error"].as_str()), (StatusCode::NOT_FOUND, Some("NotFound")));
}

#[test]
fn feedback_eval_and_store_commands() {
    let f = fixture();
    extract(&f);
    let target = f.path("target.json");
    stdout_json(&f.cli(&["recognize", "--trajectory", target.to_str().unwrap()]));

    // Recognition state is persisted, so feedback works from a new process.
    let fb = f.path("feedback.json");
    let out = stdout_json(&f.cli(&["feedback", "--feedback", fb.to_str().unwrap()]));
    assert_eq!(out["expansion"]["status"], "expanded");
    assert_eq!(out["expansion"]["max_similarity"].as_f64().map(|s| s < 0.8), Some(true));

    let info = stdout_json(&f.cli(&["store", "info"]));
    assert_eq!(info["size"], 3);
    let list = stdout_json(&f.cli(&["store", "list"]));
    let id = list[2]["id"].as_str().unwrap();
    assert_eq!(list[2]["source_trajectory_id"], "target");
    let shown = stdout_json(&f.cli(&["store", "show", id]));
    assert_eq!(shown["schema"]["mistake_step"], 1);

    let csv = f.path("report.csv");
    let records = f.path("records.jsonl");
    let corpus = f.path("corpus.jsonl");
    let anns = f.path("annotations.jsonl");
    let report = stdout_json(&f.cli(&[
        "eval",
        "--corpus",
        corpus.to_str().unwrap(),
        "--annotations",
        anns.to_str().unwrap(),
        "--mode",
        "zero-shot",
        "--csv-out",
        csv.to_str().unwrap(),
        "--records-out",
        records.to_str().unwrap(),
    ]));
    assert_eq!(report["accuracy"][0]["k"], 0);
    assert_eq!(report["accuracy"][0]["accuracy"], 1.0);
    assert_eq!(report["metadata"]["mode"], "zero_shot");
    let csv = std::fs::read_to_string(csv).unwrap();
    assert_eq!(csv, "method,Acc@0,Acc@1,Acc@3,Acc@5,Agent\nzero_shot,100.0,100.0,100.0,100.0,100.0\n");
    assert_eq!(std::fs::read_to_string(records).unwrap().lines().count(), 6);
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    let f = fixture();
    let out = f.cli(&["recognize"]);
    assert_eq!(exit_code(&out), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_errsight")).args(["eval", "--mode", "sometimes"]).output().unwrap();
    assert_eq!(exit_code(&out), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_errsight")).arg("--help").output().unwrap();
    assert_eq!(exit_code(&out), 0);
}

fn stderr_error(out: &Output) -> Value {
    serde_json::from_slice(out.stderr.split(|b| *b == b'\n').rfind(|l| !l.is_empty()).unwrap()).unwrap()
}

#[test]
fn domain_errors_exit_1_with_json() {
    let f = fixture();
    extract(&f);
    let target = f.path("target.json");
    let out = f.cli(&["recognize", "--trajectory", target.to_str().unwrap(), "--embedding-dim", "64"]);
    assert_eq!(exit_code(&out), 1);
    assert_eq!(stderr_error(&out)["error"], "IncompatibleStore");

    let missing = f.path("missing.json");
    let out = f.cli(&["recognize", "--trajectory", missing.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 1);
    assert_eq!(stderr_error(&out)["error"], "IoError");

    // A trajectory the tape has never seen.
    let other = f.path("other.json");
    std::fs::write(&other, serde_json::to_string(&traj("other", "desert")).unwrap()).unwrap();
    let out = f.cli(&["recognize", "--trajectory", other.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 1);
    assert_eq!(stderr_error(&out)["error"], "ReplayMiss");
}

#[test]
fn config_file_and_env_interpolation() {
    let f = fixture();
    let cfg = f.path("errsight.toml");
    std::fs::write(
        &cfg,
        format!(
            "chat_backend = \"replay\"\nchat_model = \"{MODEL}\"\nreplay_tape = \"{}\"\nstore_path = \"{}\"\nchat_api_key = \"${{ERRSIGHT_TEST_KEY}}\"\n",
            f.path("tape.jsonl").display(),
            f.store().display()
        ),
    )
    .unwrap();
    let run = |key: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_errsight"));
        cmd.args(["store", "info", "--config"]).arg(&cfg).env_remove("ERRSIGHT_TEST_KEY");
        if let Some(k) = key {
            cmd.env("ERRSIGHT_TEST_KEY", k);
        }
        cmd.output().unwrap()
    };
    let out = run(None);
    assert_eq!(exit_code(&out), 1);
    assert_eq!(stderr_error(&out)["error"], "ConfigError");

    extract(&f);
    let info = stdout_json(&run(Some("sk-x")));
    assert_eq!(info["size"], 2);
    assert_eq!(Path::new(info["path"].as_str().unwrap()), f.store());
}
