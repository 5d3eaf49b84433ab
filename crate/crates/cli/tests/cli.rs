use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use scope_core::backends::scene::SceneParams;
use scope_core::config::ScopeConfig;
use scope_core::session::{mock_session_header, SessionLog};
use scope_server::AppState;

fn scope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scope")).args(args).output().expect("run scope")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).map(str::trim))
        .unwrap_or_else(|| panic!("no {key} in:\n{text}"))
}

const SCRIPT: &str = r#"{"frame": 0, "utterance": "segment the surgical instruments"}
{"frame": 1, "utterance": "the first one, label it suction"}
{"frame": 2, "utterance": "segment the tip of suction"}
{"frame": 3, "utterance": "the first one"}
"#;

fn synth(dir: &Path, seed: &str) {
    let o = scope(&["synth", "--out", dir.to_str().unwrap(), "--seed", seed, "--frames", "60"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_run_replay_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let frames = tmp.path().join("frames");
    synth(&frames, "5");
    assert!(frames.join("scene.json").exists());
    assert!(frames.join("frame_000059.pgm").exists());
    assert!(frames.join("gt/instrument-1/frame_000000.json").exists());

    let script = tmp.path().join("script.jsonl");
    std::fs::write(&script, SCRIPT).unwrap();
    let log = tmp.path().join("out.jsonl");
    let masks = tmp.path().join("masks");
    let o = scope(&[
        "run",
        "--frames",
        frames.to_str().unwrap(),
        "--script",
        script.to_str().unwrap(),
        "--backends",
        "mock",
        "--log",
        log.to_str().unwrap(),
        "--masks-out",
        masks.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(field(&text, "agent"), "Tracking");
    assert_eq!(field(&text, "event_hash"), SessionLog::read(&log).unwrap().event_hash());

    let o = scope(&["replay", "--log", log.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("replay matches"));

    let report = tmp.path().join("report.json");
    let o = scope(&[
        "eval",
        "--pred",
        masks.join("suction").to_str().unwrap(),
        "--gt",
        frames.join("gt/instrument-1").to_str().unwrap(),
        "--label",
        "Synthetic",
        "--method",
        "mock",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // tracking starts at the frame the candidates were computed on
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let row = &json["rows"][0];
    assert_eq!(row["label"], "Synthetic");
    let mdsc = row["mdsc"].as_f64().unwrap();
    assert_eq!(mdsc, 1.0);
    assert!(stdout(&o).contains("Comparison on Mask Propagation"));

    let txt = tmp.path().join("report.txt");
    let o = scope(&[
        "eval",
        "--task",
        "segmentation",
        "--pred",
        frames.join("gt/anatomy").to_str().unwrap(),
        "--gt",
        frames.join("gt/anatomy").to_str().unwrap(),
        "--out",
        txt.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&txt).unwrap();
    assert!(text.lines().any(|l| l.starts_with("anatomy scope ") && l.ends_with(" 1.00 0.00 - -")), "{text}");
}

#[test]
fn run_against_a_backend_server_matches_mocks() {
    let tmp = tempfile::tempdir().unwrap();
    let frames = tmp.path().join("frames");
    synth(&frames, "9");
    let script = tmp.path().join("script.jsonl");
    std::fs::write(&script, SCRIPT).unwrap();

    let params = SceneParams {
        frames: 60,
        ..SceneParams::default()
    };
    let (_, _, backends) = mock_session_header(9, params, ScopeConfig::default(), None, Vec::new()).unwrap();
    let addr = scope_server::spawn(
        "127.0.0.1:0".parse().unwrap(),
        AppState {
            backends: Some(backends),
            live: None,
        },
    )
    .unwrap();

    let run = |backends: &str, log: &str| {
        let o = scope(&[
            "run",
            "--frames",
            frames.to_str().unwrap(),
            "--script",
            script.to_str().unwrap(),
            "--backends",
            backends,
            "--log",
            tmp.path().join(log).to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        field(&stdout(&o), "event_hash").to_owned()
    };
    assert_eq!(run("mock", "a.jsonl"), run(&format!("http://{addr}"), "b.jsonl"));

    // a remote log cannot be replayed against mocks
    let o = scope(&["replay", "--log", tmp.path().join("b.jsonl").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let frames = tmp.path().join("frames");
    synth(&frames, "1");
    std::fs::remove_file(frames.join("scene.json")).unwrap();
    let script = tmp.path().join("script.jsonl");
    std::fs::write(&script, SCRIPT).unwrap();
    let o = scope(&[
        "run",
        "--frames",
        frames.to_str().unwrap(),
        "--script",
        script.to_str().unwrap(),
        "--log",
        tmp.path().join("x.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("scene.json"));

    std::fs::write(&script, "{\"frame\": 500, \"utterance\": \"hello\"}\n").unwrap();
    synth(&frames, "1");
    let o = scope(&[
        "run",
        "--frames",
        frames.to_str().unwrap(),
        "--script",
        script.to_str().unwrap(),
        "--log",
        tmp.path().join("x.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("frame 500"));

    let o = scope(&["eval", "--pred", "a", "--pred", "b", "--gt", "c"]);
    assert_eq!(o.status.code(), Some(2));
    let o = scope(&["say", "--server", "http://127.0.0.1:1"]);
    assert_eq!(o.status.code(), Some(2));
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn serve_say_and_watch() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_scope"))
        .args(["serve", "--port", "0", "--manual", "--frames", "30"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let _server = Server(child);
    let base = line.trim().strip_prefix("listening on ").expect("address line").to_owned();

    let o = scope(&["say", "--server", &base, "--id", "one", "segment", "the", "surgical", "instruments"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ack: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(ack, serde_json::json!({"type": "ack", "id": "one", "duplicate": false}));
    let o = scope(&["say", "--server", &base, "--id", "one", "--stop"]);
    let ack: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(ack["duplicate"], true);

    let control = scope_client::SessionControl::new(&base).unwrap();
    control.advance(2).unwrap();
    let o = scope(&["watch", "--server", &base, "--limit", "1"]);
    assert!(o.status.success());
    let first: serde_json::Value = serde_json::from_str(stdout(&o).lines().next().unwrap()).unwrap();
    assert_eq!(first["type"], "snapshot");
    assert_eq!(first["snapshot"]["frame"], 1);

    let o = scope(&["watch", "--server", &base, "--since", "0", "--limit", "2"]);
    let seqs: Vec<u64> = stdout(&o)
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["event"]["seq"].as_u64().unwrap())
        .collect();
    assert_eq!(seqs, vec![1, 2]);

    let health: serde_json::Value =
        serde_json::from_str(&scope_client::HttpBackend::new(&base, std::time::Duration::from_secs(2)).unwrap().health().unwrap().to_string())
            .unwrap();
    assert_eq!(health["status"], "ok");
}
