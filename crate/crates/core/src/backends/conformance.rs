//! Golden request/response fixtures. Every implementation of the protocol,
//! in-process or over the network, is checked against the same files.
//!
//! A fixture directory holds `scene.json` (seed and scene parameters for the
//! mocks that produced the goldens) and, per case, `NAME.request.json` (a
//! request envelope) and `NAME.response.json` (a response envelope, or
//! `{"error": {...}}` for an expected failure).

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::mock::{encode_mock_audio, MockBackends, MockConfig};
use super::scene::{generate_synthetic_scene, SceneParams, SceneTruth};
use super::{
    dispatch, validate_request, validate_response, BackendKind, BackendResult, Backends, ChatRequest,
    DepthRequest, Envelope, ErrorBody, FrameRef, LlmRequest, PropagateRequest, SegmentPointRequest,
    SegmentTextRequest, SttRequest, PROTOCOL_VERSION,
};
use crate::mask::PixelPoint;
use crate::session::{SceneManifest, SCENE_MANIFEST};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Expected {
    Error { error: ErrorBody },
    Ok(Envelope<Value>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub name: String,
    pub request: Envelope<Value>,
    pub expected: Expected,
}

impl Fixture {
    pub fn kind(&self) -> BackendKind {
        self.request.kind
    }

    /// Checks one implementation's answer to this fixture's request.
    pub fn check(&self, got: BackendResult<Value>) -> Result<(), String> {
        let kind = self.kind();
        match (&self.expected, got) {
            (Expected::Ok(want), Ok(payload)) => {
                validate_response(kind, &payload).map_err(|e| format!("{}: {e}", self.name))?;
                if payload != want.payload {
                    return Err(format!("{}: response differs from golden", self.name));
                }
                Ok(())
            }
            (Expected::Error { error }, Err(e)) => {
                let body = e.to_body();
                if &body != error {
                    return Err(format!("{}: expected error {error:?}, got {body:?}", self.name));
                }
                Ok(())
            }
            (Expected::Ok(_), Err(e)) => Err(format!("{}: unexpected error {e}", self.name)),
            (Expected::Error { error }, Ok(_)) => Err(format!("{}: expected error {}, got a response", self.name, error.code)),
        }
    }
}

/// The small scene the goldens are generated from.
pub fn fixture_manifest() -> SceneManifest {
    SceneManifest {
        seed: 3,
        scene: SceneParams {
            width: 64,
            height: 48,
            frames: 12,
            contacts: Vec::new(),
            ..SceneParams::default()
        },
    }
}

pub fn fixture_backends(manifest: &SceneManifest) -> Result<(Arc<SceneTruth>, Backends), String> {
    let scene = Arc::new(generate_synthetic_scene(manifest.seed, &manifest.scene).map_err(|e| e.to_string())?);
    let mocks = MockBackends::new(scene.clone(), MockConfig::default());
    Ok((scene, Backends::uniform(Arc::new(mocks))))
}

fn envelope<T: Serialize>(kind: BackendKind, payload: T) -> Envelope<Value> {
    Envelope::new(kind, serde_json::to_value(payload).expect("request serializes"))
}

/// Named requests covering all six kinds plus their error paths.
pub fn fixture_requests(scene: &SceneTruth) -> Vec<(String, Envelope<Value>)> {
    use BackendKind::*;
    let inst = &scene.frames[2].instruments[0];
    let tip = inst.tip_point;
    let tip_px = PixelPoint {
        x: tip.x.round() as u32,
        y: tip.y.round() as u32,
    };
    let chat = |query: &str, module: &str| ChatRequest {
        query: query.into(),
        system_inputs: json!({"module": module, "frame": 2}),
        system_prompt: "fixture".into(),
        history: Vec::new(),
        repair: None,
    };
    let cases = vec![
        ("stt", envelope(Stt, SttRequest { audio_b64: encode_mock_audio("segment the surgical instruments") })),
        ("stt_bad_audio", envelope(Stt, SttRequest { audio_b64: "%%%".into() })),
        ("llm_chat_segment", envelope(Llm, LlmRequest::Chat(chat("segment the surgical instruments", "interactive_mode")))),
        ("llm_chat_select", envelope(Llm, LlmRequest::Chat(chat("the second one, label it forceps", "select_mask")))),
        ("llm_chat_unknown", envelope(Llm, LlmRequest::Chat(chat("how are you", "interactive_mode")))),
        ("llm_expand", envelope(Llm, LlmRequest::Expand { query: "surgical instruments".into(), count: 3 })),
        ("segment_text", envelope(SegmentText, SegmentTextRequest { prompt: "surgical instruments".into(), frame: FrameRef::index(2) })),
        ("segment_text_tip", envelope(SegmentText, SegmentTextRequest { prompt: "suction tip".into(), frame: FrameRef::index(2) })),
        ("segment_text_none", envelope(SegmentText, SegmentTextRequest { prompt: "weather".into(), frame: FrameRef::index(2) })),
        ("segment_text_bad_frame", envelope(SegmentText, SegmentTextRequest { prompt: "tools".into(), frame: FrameRef::index(99) })),
        ("segment_point", envelope(SegmentPoint, SegmentPointRequest { frame: FrameRef::index(2), point: tip_px, positive: true })),
        ("segment_point_background", envelope(SegmentPoint, SegmentPointRequest { frame: FrameRef::index(2), point: PixelPoint { x: 0, y: 0 }, positive: true })),
        ("propagate", envelope(Propagate, PropagateRequest { initial: inst.mask.clone(), from_frame: 2, to_frame: 6 })),
        ("propagate_range", envelope(Propagate, PropagateRequest { initial: inst.mask.clone(), from_frame: 2, to_frame: 40 })),
        ("depth", envelope(Depth, DepthRequest { frame: FrameRef::index(4) })),
    ];
    cases.into_iter().map(|(n, e)| (n.to_owned(), e)).collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

/// Regenerates the golden files in `dir` from the mocks.
pub fn bless(dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = fixture_manifest();
    let (scene, backends) = fixture_backends(&manifest).map_err(std::io::Error::other)?;
    write_json(&dir.join(SCENE_MANIFEST), &manifest)?;
    for (name, request) in fixture_requests(&scene) {
        let expected = match dispatch(&backends, request.kind, request.payload.clone()) {
            Ok(payload) => Expected::Ok(Envelope::new(request.kind, payload)),
            Err(e) => Expected::Error { error: e.to_body() },
        };
        write_json(&dir.join(format!("{name}.request.json")), &request)?;
        write_json(&dir.join(format!("{name}.response.json")), &expected)?;
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Reads every fixture in `dir`, sorted by name. Request envelopes are
/// schema-checked on the way in.
pub fn load_fixtures(dir: &Path) -> Result<(SceneManifest, Vec<Fixture>), String> {
    let manifest: SceneManifest = read_json(&dir.join(SCENE_MANIFEST))?;
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_suffix(".request.json").map(str::to_owned))
        .collect();
    names.sort();
    let mut fixtures = Vec::new();
    for name in names {
        let request: Envelope<Value> = read_json(&dir.join(format!("{name}.request.json")))?;
        if request.version != PROTOCOL_VERSION {
            return Err(format!("{name}: version {} != {PROTOCOL_VERSION}", request.version));
        }
        validate_request(request.kind, &request.payload).map_err(|e| format!("{name}: {e}"))?;
        let expected: Expected = read_json(&dir.join(format!("{name}.response.json")))?;
        if let Expected::Ok(env) = &expected {
            if env.kind != request.kind {
                return Err(format!("{name}: response kind {} != request kind {}", env.kind, request.kind));
            }
        }
        fixtures.push(Fixture { name, request, expected });
    }
    if fixtures.is_empty() {
        return Err(format!("no fixtures in {}", dir.display()));
    }
    Ok((manifest, fixtures))
}

/// Runs every fixture through `call` and collects failures.
pub fn run_fixtures(fixtures: &[Fixture], mut call: impl FnMut(&Fixture) -> BackendResult<Value>) -> Vec<String> {
    fixtures.iter().filter_map(|f| f.check(call(f)).err()).collect()
}

/// Kinds covered by at least one fixture.
pub fn covered_kinds(fixtures: &[Fixture]) -> Vec<BackendKind> {
    let mut kinds: Vec<_> = fixtures.iter().map(Fixture::kind).collect();
    kinds.sort();
    kinds.dedup();
    kinds
}

