use errsight_py::errsight_module;
use pyo3::prelude::*;
use std::ffi::CString;

fn run(code: &str) -> PyResult<()> {
    Python::attach(|py| {
        let code = CString::new(code).unwrap();
        py.run(&code, None, None)
    })
}

#[test]
fn module_round_trip() {
    pyo3::append_to_inittab!(errsight_module);
    Python::initialize();
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store.jsonl");
    let script = format!(
        r#"
import errsight
v = errsight.embed("kelp kelp basalt", 32)
assert len(v) == 32 and abs(errsight.cosine(v, v) - 1.0) < 1e-12

def chat(req):
    assert req["model"] == "scripted"
    return "Agent Name: Coder\nStep Number: 0\nReason for Mistake: guessed"

e = errsight.Engine(config={{"chat_model": "scripted", "store_path": {store:?}}}, chat=chat)
t = {{"id": "t", "question": "q", "outcome": "failure",
      "steps": [{{"index": 0, "agent": "Coder", "content": "c", "result": ""}}]}}
d = e.recognize(t)
assert (d["agent"], d["step"], d["schema_ids_used"]) == ("Coder", 0, []), d
assert len(e) == 0 and e.config()["chat_model"] == "scripted"

for bad, kind in [(lambda: e.recognize(t, k=0), "InvalidInput"),
                  (lambda: e.feedback({{"trajectory_id": "t", "confirmed": True}}), "InvalidInput"),
                  (lambda: errsight.Engine(config={{"no_such_key": 1}}), "ConfigError")]:
    try:
        bad()
    except errsight.ErrsightError as err:
        assert err.args[0] == kind, err.args
    else:
        raise AssertionError(kind)
"#,
        store = store.to_str().unwrap()
    );
    run(&script).unwrap();
}
