use std::io::Read;
use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use scope_client::{http_backends, HttpBackend};
use scope_core::backends::conformance::{covered_kinds, fixture_backends, load_fixtures, run_fixtures};
use scope_core::backends::{
    BackendError, BackendKind, DepthRequest, FrameRef, PropagateRequest, SegmentTextRequest,
};
use scope_server::AppState;
use serde_json::json;

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/protocol")
}

fn mock_server() -> (SocketAddr, scope_core::backends::Backends) {
    let (manifest, _) = load_fixtures(&fixture_dir()).unwrap();
    let (_, backends) = fixture_backends(&manifest).unwrap();
    let state = AppState {
        backends: Some(backends.clone()),
        live: None,
    };
    (scope_server::spawn("127.0.0.1:0".parse().unwrap(), state).unwrap(), backends)
}

/// Accepts connections and never answers.
fn stalled_stub() -> SocketAddr {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        let mut held = Vec::new();
        for stream in listener.incoming().flatten() {
            let mut s = stream.try_clone().unwrap();
            std::thread::spawn(move || {
                let mut buf = [0u8; 1024];
                while matches!(s.read(&mut buf), Ok(n) if n > 0) {}
            });
            held.push(stream);
        }
    });
    addr
}

#[test]
fn fixtures_pass_over_http() {
    let (addr, _) = mock_server();
    let (_, fixtures) = load_fixtures(&fixture_dir()).unwrap();
    assert_eq!(covered_kinds(&fixtures), BackendKind::ALL.to_vec());
    let client = HttpBackend::new(&format!("http://{addr}"), Duration::from_secs(5)).unwrap();
    let failures = run_fixtures(&fixtures, |f| client.call(f.kind(), f.request.payload.clone()));
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn typed_calls_match_in_process_mocks() {
    let (addr, local) = mock_server();
    let remote = http_backends(&format!("http://{addr}"), Duration::from_secs(5)).unwrap();
    let req = SegmentTextRequest {
        prompt: "surgical instruments".into(),
        frame: FrameRef::index(3),
    };
    assert_eq!(remote.segment_text.segment_text(&req).unwrap(), local.segment_text.segment_text(&req).unwrap());
    let d = DepthRequest { frame: FrameRef::index(1) };
    assert_eq!(remote.depth.depth(&d).unwrap(), local.depth.depth(&d).unwrap());
    let empty = scope_core::mask::Mask::empty(64, 48);
    let bad = PropagateRequest {
        initial: empty,
        from_frame: 0,
        to_frame: 500,
    };
    let remote_err = remote.propagate.propagate(&bad).unwrap_err();
    let local_err = local.propagate.propagate(&bad).unwrap_err();
    assert_eq!(remote_err.to_body(), local_err.to_body());
}

#[test]
fn stalled_server_times_out_within_budget() {
    let addr = stalled_stub();
    let timeout = Duration::from_millis(250);
    let client = HttpBackend::new(&format!("http://{addr}"), timeout).unwrap();
    for kind in BackendKind::ALL {
        let start = Instant::now();
        let err = client.call(kind, json!({"frame": {"index": 0}})).unwrap_err();
        let elapsed = start.elapsed();
        assert!(err.is_timeout(), "{kind}: {err:?}");
        assert!(matches!(err, BackendError::Timeout { kind: k, timeout_ms: 250 } if k == kind));
        assert!(elapsed >= timeout, "{kind}: {elapsed:?}");
        assert!(elapsed <= timeout + Duration::from_millis(100), "{kind}: {elapsed:?}");
    }
}

#[test]
fn closed_port_is_unavailable_not_timeout() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let client = HttpBackend::new(&format!("http://127.0.0.1:{port}"), Duration::from_secs(2)).unwrap();
    let err = client.call(BackendKind::Depth, json!({"frame": {"index": 0}})).unwrap_err();
    assert!(matches!(err, BackendError::Unavailable(_)), "{err:?}");
    assert!(err.retryable());
}

#[test]
fn server_rejects_malformed_envelopes() {
    let (addr, _) = mock_server();
    let http = reqwest::blocking::Client::new();
    let base = format!("http://{addr}");
    let r = http.post(format!("{base}/v1/depth")).json(&json!({"kind":"stt","version":"1","payload":{}})).send().unwrap();
    assert_eq!(r.status(), 400);
    let r = http.post(format!("{base}/v1/depth")).json(&json!({"kind":"depth","version":"9","payload":{"frame":{"index":0}}})).send().unwrap();
    assert_eq!(r.status(), 400);
    assert_eq!(r.json::<serde_json::Value>().unwrap()["code"], "version");
    let r = http.post(format!("{base}/v1/video")).json(&json!({})).send().unwrap();
    assert_eq!(r.status(), 404);
    let r = http.post(format!("{base}/v1/depth")).json(&json!({"kind":"depth","version":"1","payload":{"frame":{}}})).send().unwrap();
    assert_eq!(r.status(), 400);
    let body: serde_json::Value = r.json().unwrap();
    assert_eq!(body["retryable"], false);
    let health: serde_json::Value = http.get(format!("{base}/v1/healthz")).send().unwrap().json().unwrap();
    assert_eq!(health["status"], "ok");
    assert_eq!(health["kinds"].as_array().unwrap().len(), 6);
}
