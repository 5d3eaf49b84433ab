//! Session orchestration: scripted or live command intake, per-frame
//! tracking and cursor updates, the event log and its replay.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::{info, warn};

use crate::agent::{
    build_system_prompt, ordinal_utterance, step_transition, AgentContext, AgentEffect, AgentState, ModuleName,
    SegmentTarget, SystemPrompt, ToolName, TranscriptRow, WorkflowConfig,
};
use crate::backends::mock::{MockBackends, MockConfig};
use crate::backends::scene::{generate_synthetic_scene, SceneParams, SceneTruth};
use crate::backends::{
    BackendDescriptor, BackendError, BackendKind, Backends, DepthRequest, Endpoint, FrameRef, PropagateRequest,
    SegmentPointRequest, SttRequest,
};
use crate::candidates::ScoredCandidate;
use crate::config::ScopeConfig;
use crate::geometry::{
    principal_axis, tip_landmark, track_tip, GeometryError, LandmarkRecord, LandmarkSource, TipTrack,
};
use crate::mask::Mask;
use crate::virtual_cursor::{
    calibrate_band, cursor_position, make_anatomy_prompt, update_click_state, ClickDetectorState,
};

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("script error: {0}")]
    Script(String),
    #[error("event ({frame}, {seq}) does not follow ({last_frame}, {last_seq})")]
    Ordering {
        frame: usize,
        seq: u64,
        last_frame: usize,
        last_seq: u64,
    },
    #[error("frame source: {0}")]
    Frames(String),
    #[error("log: {0}")]
    Log(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SessionError>;

/// A command from the operator, spoken or typed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientCommand {
    Utterance(String),
    /// Base64 audio for the transcription backend.
    Audio(String),
    /// 1-based candidate position.
    Select(usize),
    Stop {},
}

impl ClientCommand {
    /// The utterance this command stands for.
    pub fn to_utterance(&self, backends: &Backends) -> std::result::Result<String, BackendError> {
        match self {
            ClientCommand::Utterance(text) => Ok(text.clone()),
            ClientCommand::Audio(b64) => Ok(backends.stt.transcribe(&SttRequest { audio_b64: b64.clone() })?.text),
            ClientCommand::Select(index) => Ok(ordinal_utterance(*index)),
            ClientCommand::Stop {} => Ok("stop".into()),
        }
    }
}

/// One script line: `{"frame": 12, "utterance": "..."}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub frame: usize,
    #[serde(flatten)]
    pub command: ClientCommand,
}

pub fn parse_script(text: &str) -> Result<Vec<ScriptEntry>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let entry: ScriptEntry =
            serde_json::from_str(line).map_err(|e| SessionError::Script(format!("line {}: {e}", i + 1)))?;
        entries.push(entry);
    }
    Ok(entries)
}

pub fn read_script(path: &Path) -> Result<Vec<ScriptEntry>> {
    parse_script(&std::fs::read_to_string(path)?)
}

pub fn validate_script(script: &[ScriptEntry], frame_count: usize) -> Result<()> {
    for (i, e) in script.iter().enumerate() {
        if e.frame >= frame_count {
            return Err(SessionError::Script(format!(
                "entry {} targets frame {} but the source has {frame_count} frames",
                i + 1,
                e.frame
            )));
        }
        if i > 0 && e.frame < script[i - 1].frame {
            return Err(SessionError::Script(format!("entry {} goes back in time", i + 1)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSource {
    pub count: usize,
    pub width: u32,
    pub height: u32,
    /// Per-frame file locators; empty for synthetic sources.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub uris: Vec<String>,
}

pub const SCENE_MANIFEST: &str = "scene.json";

/// `scene.json` next to the frames of a synthetic sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub seed: u64,
    pub scene: SceneParams,
}

impl FrameSource {
    pub fn synthetic(scene: &SceneTruth) -> Self {
        let (width, height) = scene.dims();
        Self {
            count: scene.frame_count(),
            width,
            height,
            uris: Vec::new(),
        }
    }

    /// Image files in `dir` sorted by name; dimensions from the first PGM.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
            .collect();
        files.sort();
        let first = files
            .first()
            .ok_or_else(|| SessionError::Frames(format!("no .pgm frames in {}", dir.display())))?;
        let (width, height) = pgm_dims(first)?;
        Ok(Self {
            count: files.len(),
            width,
            height,
            uris: files.iter().map(|p| p.display().to_string()).collect(),
        })
    }

    pub fn frame_ref(&self, index: usize) -> FrameRef {
        FrameRef {
            index,
            uri: self.uris.get(index).cloned(),
        }
    }

    pub fn area(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

fn pgm_dims(path: &Path) -> Result<(u32, u32)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut tokens = Vec::new();
    let mut line = String::new();
    while tokens.len() < 3 {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        let content = line.split('#').next().unwrap_or("");
        tokens.extend(content.split_whitespace().map(str::to_owned));
    }
    let bad = || SessionError::Frames(format!("{} is not a binary PGM", path.display()));
    if tokens.first().map(String::as_str) != Some("P5") || tokens.len() < 3 {
        return Err(bad());
    }
    let w = tokens[1].parse().map_err(|_| bad())?;
    let h = tokens[2].parse().map_err(|_| bad())?;
    Ok((w, h))
}

/// Renders a synthetic frame as an 8-bit grey image.
pub fn render_pgm(scene: &SceneTruth, index: usize) -> Vec<u8> {
    let (w, h) = scene.dims();
    let f = &scene.frames[index];
    let anatomy = f.anatomy.to_bitmap();
    let inst: Vec<_> = f.instruments.iter().map(|i| (i.mask.to_bitmap(), i.tip.to_bitmap())).collect();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let v = if let Some((_, tip)) = inst.iter().find(|(m, _)| m.get(x, y)) {
                if tip.get(x, y) {
                    250
                } else {
                    210
                }
            } else if anatomy.get(x, y) {
                130 + ((x * 7 + y * 3) % 11) as u8
            } else {
                35
            };
            out.push(v);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ObjectKind {
    Object,
    Tip { instrument_id: u64 },
    Anatomy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub object_id: u64,
    pub label: Option<String>,
    pub kind: ObjectKind,
    pub mask: Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TipState {
    pub object_id: u64,
    pub x: f64,
    pub y: f64,
    pub source: LandmarkSource,
    pub stale: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePayload {
    pub objects: Vec<ObjectState>,
    pub tip: Option<TipState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    /// 1-based position on the page.
    pub index: usize,
    pub score: f64,
    pub source_prompt: String,
    pub backend_id: String,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatesPagePayload {
    pub target: SegmentTarget,
    pub page_index: usize,
    pub page_count: usize,
    pub degraded: bool,
    pub failures: usize,
    pub candidates: Vec<CandidateView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSelectedPayload {
    pub object_id: u64,
    pub index: usize,
    /// Frame the selected mask was segmented on.
    pub source_frame: usize,
    pub kind: ObjectKind,
    pub score: f64,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelAssignedPayload {
    pub object_id: u64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TipLockedPayload {
    pub object_id: u64,
    pub instrument_id: u64,
    pub x: f64,
    pub y: f64,
    pub source: LandmarkSource,
    pub band_center: f64,
    pub band_halfwidth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CursorMovedPayload {
    pub x: u32,
    pub y: u32,
    pub clamped: bool,
    pub occupancy: Option<f64>,
    pub consecutive_hits: u32,
    pub armed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickPayload {
    pub x: u32,
    pub y: u32,
    pub occupancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnatomySegmentedPayload {
    pub object_id: u64,
    pub x: u32,
    pub y: u32,
    pub score: f64,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTextPayload {
    pub q: String,
    pub text: String,
    pub module_before: ModuleName,
    pub module_after: ModuleName,
    pub tool: Option<ToolName>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    Frame(FramePayload),
    CandidatesPage(CandidatesPagePayload),
    MaskSelected(MaskSelectedPayload),
    LabelAssigned(LabelAssignedPayload),
    TipLocked(TipLockedPayload),
    CursorMoved(CursorMovedPayload),
    Click(ClickPayload),
    AnatomySegmented(AnatomySegmentedPayload),
    AgentText(AgentTextPayload),
    Error(ErrorPayload),
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::Frame(_) => "frame",
            EventBody::CandidatesPage(_) => "candidates_page",
            EventBody::MaskSelected(_) => "mask_selected",
            EventBody::LabelAssigned(_) => "label_assigned",
            EventBody::TipLocked(_) => "tip_locked",
            EventBody::CursorMoved(_) => "cursor_moved",
            EventBody::Click(_) => "click",
            EventBody::AnatomySegmented(_) => "anatomy_segmented",
            EventBody::AgentText(_) => "agent_text",
            EventBody::Error(_) => "error",
        }
    }

    /// Frame and cursor updates may be dropped for slow subscribers.
    pub fn is_droppable(&self) -> bool {
        matches!(self, EventBody::Frame(_) | EventBody::CursorMoved(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    pub frame: usize,
    pub t_ms: u64,
    #[serde(flatten)]
    pub body: EventBody,
    /// Wall-clock time from command dispatch to this event; not hashed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<f64>,
}

impl SessionEvent {
    pub fn kind(&self) -> &'static str {
        self.body.kind()
    }

    fn canonical_json(&self) -> String {
        let stripped = SessionEvent {
            latency_ms: None,
            ..self.clone()
        };
        serde_json::to_string(&stripped).expect("event serializes")
    }
}

/// SHA-256 over the events' JSON, latency excluded.
pub fn event_sequence_hash(events: &[SessionEvent]) -> String {
    let mut h = Sha256::new();
    for e in events {
        h.update(e.canonical_json().as_bytes());
        h.update(b"\n");
    }
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format: u32,
    pub seed: u64,
    /// Synthetic scene behind mock backends.
    pub scene: Option<SceneParams>,
    pub frames: FrameSource,
    pub config: ScopeConfig,
    pub backends: Vec<BackendDescriptor>,
    pub script: Vec<ScriptEntry>,
}

impl LogHeader {
    /// Header for a session over a generated scene with in-process mocks.
    pub fn mock(seed: u64, scene: SceneParams, frames: FrameSource, config: ScopeConfig, script: Vec<ScriptEntry>) -> Self {
        Self {
            format: 1,
            seed,
            scene: Some(scene),
            frames,
            config,
            backends: BackendKind::ALL.iter().map(|&k| BackendDescriptor::mock(k)).collect(),
            script,
        }
    }

    pub fn uses_mocks(&self) -> bool {
        self.backends.iter().all(|b| b.endpoint == Endpoint::Mock)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderLine {
    header: LogHeader,
}

/// Append-only event record, optionally mirrored line by line to a file.
#[derive(Debug)]
pub struct SessionLog {
    pub header: LogHeader,
    events: Vec<SessionEvent>,
    writer: Option<BufWriter<File>>,
}

impl SessionLog {
    pub fn in_memory(header: LogHeader) -> Self {
        Self {
            header,
            events: Vec::new(),
            writer: None,
        }
    }

    /// Creates `path` and writes the header line.
    pub fn create(path: &Path, header: LogHeader) -> Result<Self> {
        let mut writer = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut writer, &HeaderLine { header: header.clone() })
            .map_err(|e| SessionError::Log(e.to_string()))?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        Ok(Self {
            header,
            events: Vec::new(),
            writer: Some(writer),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        let first = lines.next().ok_or_else(|| SessionError::Log("empty log".into()))??;
        let header: HeaderLine =
            serde_json::from_str(&first).map_err(|e| SessionError::Log(format!("header: {e}")))?;
        let mut log = Self::in_memory(header.header);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let event: SessionEvent =
                serde_json::from_str(&line).map_err(|e| SessionError::Log(format!("line {}: {e}", i + 2)))?;
            log.append_log_event(event)?;
        }
        Ok(log)
    }

    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Appends after checking `(frame, seq)` grows; the line is flushed
    /// before returning.
    pub fn append_log_event(&mut self, event: SessionEvent) -> Result<()> {
        if let Some(last) = self.events.last() {
            if (event.frame, event.seq) <= (last.frame, last.seq) {
                return Err(SessionError::Ordering {
                    frame: event.frame,
                    seq: event.seq,
                    last_frame: last.frame,
                    last_seq: last.seq,
                });
            }
        }
        if let Some(w) = &mut self.writer {
            serde_json::to_writer(&mut *w, &event).map_err(|e| SessionError::Log(e.to_string()))?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.events.push(event);
        Ok(())
    }

    pub fn event_hash(&self) -> String {
        event_sequence_hash(&self.events)
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        let mut s = SessionSnapshot::default();
        for e in &self.events {
            s.apply(e);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectView {
    pub object_id: u64,
    pub label: Option<String>,
    pub kind: ObjectKind,
    pub mask: Option<Mask>,
}

/// State visible to a console, rebuilt from events alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub last_seq: Option<u64>,
    pub frame: Option<usize>,
    pub module: ModuleName,
    pub page: Option<CandidatesPagePayload>,
    /// Sorted by id.
    pub objects: Vec<ObjectView>,
    pub tip: Option<TipState>,
    pub cursor: Option<CursorMovedPayload>,
    pub clicks: usize,
    pub errors: usize,
    pub last_text: Option<String>,
}

impl Default for SessionSnapshot {
    fn default() -> Self {
        Self {
            last_seq: None,
            frame: None,
            module: ModuleName::InteractiveMode,
            page: None,
            objects: Vec::new(),
            tip: None,
            cursor: None,
            clicks: 0,
            errors: 0,
            last_text: None,
        }
    }
}

impl SessionSnapshot {
    pub fn apply(&mut self, event: &SessionEvent) {
        self.last_seq = Some(event.seq);
        self.frame = Some(event.frame);
        match &event.body {
            EventBody::Frame(f) => {
                for o in &f.objects {
                    let view = self.object_entry(o.object_id, o.label.clone(), o.kind);
                    view.mask = Some(o.mask.clone());
                }
                self.tip = f.tip;
            }
            EventBody::CandidatesPage(p) => self.page = Some(p.clone()),
            EventBody::MaskSelected(m) => {
                self.page = None;
                let view = self.object_entry(m.object_id, None, m.kind);
                *view = ObjectView {
                    object_id: m.object_id,
                    label: None,
                    kind: m.kind,
                    mask: Some(m.mask.clone()),
                };
            }
            EventBody::LabelAssigned(l) => {
                if let Some(o) = self.objects.iter_mut().find(|o| o.object_id == l.object_id) {
                    o.label = Some(l.label.clone());
                }
            }
            EventBody::TipLocked(t) => {
                self.tip = Some(TipState {
                    object_id: t.object_id,
                    x: t.x,
                    y: t.y,
                    source: t.source,
                    stale: 0,
                })
            }
            EventBody::CursorMoved(c) => self.cursor = Some(c.clone()),
            EventBody::Click(_) => self.clicks += 1,
            EventBody::AnatomySegmented(a) => {
                let view = self.object_entry(a.object_id, Some("anatomy".into()), ObjectKind::Anatomy);
                view.mask = Some(a.mask.clone());
            }
            EventBody::AgentText(t) => {
                self.module = t.module_after;
                self.last_text = Some(t.text.clone());
                if t.module_after == ModuleName::InteractiveMode && t.tool == Some(ToolName::Stop) {
                    self.objects.clear();
                    self.tip = None;
                    self.cursor = None;
                    self.page = None;
                }
            }
            EventBody::Error(_) => self.errors += 1,
        }
    }

    fn object_entry(&mut self, object_id: u64, label: Option<String>, kind: ObjectKind) -> &mut ObjectView {
        let i = match self.objects.binary_search_by_key(&object_id, |o| o.object_id) {
            Ok(i) => i,
            Err(i) => {
                self.objects.insert(
                    i,
                    ObjectView {
                        object_id,
                        label,
                        kind,
                        mask: None,
                    },
                );
                i
            }
        };
        &mut self.objects[i]
    }

    pub fn state_hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("snapshot serializes")))
    }
}

/// An object the session tracks, with masks from its start frame on.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackedObject {
    pub id: u64,
    pub label: Option<String>,
    pub kind: ObjectKind,
    pub start: usize,
    pub masks: Vec<Mask>,
    pub active: bool,
}

impl TrackedObject {
    pub fn mask_at(&self, frame: usize) -> Option<&Mask> {
        frame.checked_sub(self.start).and_then(|i| self.masks.get(i))
    }

    /// `(frame, mask)` pairs for every tracked frame.
    pub fn sequence(&self) -> impl Iterator<Item = (usize, &Mask)> {
        self.masks.iter().enumerate().map(move |(i, m)| (self.start + i, m))
    }
}

#[derive(Debug, Clone)]
struct CursorTrack {
    tip_id: u64,
    instrument_id: u64,
    track: TipTrack,
    click: ClickDetectorState,
}

/// The per-session loop state. Feed it one frame at a time.
pub struct Session {
    config: ScopeConfig,
    backends: Backends,
    prompt: SystemPrompt,
    frames: FrameSource,
    agent: AgentState,
    objects: Vec<TrackedObject>,
    selection_objects: Vec<u64>,
    cursor: Option<CursorTrack>,
    next_frame: usize,
    next_seq: u64,
    next_object: u64,
    transcript: Vec<TranscriptRow>,
    landmarks: Vec<LandmarkRecord>,
}

impl Session {
    pub fn new(config: ScopeConfig, frames: FrameSource, backends: Backends) -> Result<Self> {
        config.validate().map_err(|e| SessionError::Config(e.to_string()))?;
        if frames.count == 0 {
            return Err(SessionError::Frames("frame source is empty".into()));
        }
        let prompt = build_system_prompt(&WorkflowConfig::default()).map_err(|e| SessionError::Config(e.to_string()))?;
        Ok(Self {
            agent: AgentState::new(config.candidates.page_size),
            config,
            backends,
            prompt,
            frames,
            objects: Vec::new(),
            selection_objects: Vec::new(),
            cursor: None,
            next_frame: 0,
            next_seq: 0,
            next_object: 1,
            transcript: Vec::new(),
            landmarks: Vec::new(),
        })
    }

    pub fn is_finished(&self) -> bool {
        self.next_frame >= self.frames.count
    }

    pub fn current_frame(&self) -> usize {
        self.next_frame
    }

    pub fn frames(&self) -> &FrameSource {
        &self.frames
    }

    pub fn agent(&self) -> &AgentState {
        &self.agent
    }

    pub fn objects(&self) -> &[TrackedObject] {
        &self.objects
    }

    pub fn transcript(&self) -> &[TranscriptRow] {
        &self.transcript
    }

    pub fn landmarks(&self) -> &[LandmarkRecord] {
        &self.landmarks
    }

    fn t_ms(&self, frame: usize) -> u64 {
        frame as u64 * self.config.session.frame_interval_ms
    }

    fn emit(&mut self, out: &mut Vec<SessionEvent>, frame: usize, body: EventBody, latency_ms: Option<f64>) {
        out.push(SessionEvent {
            seq: self.next_seq,
            frame,
            t_ms: self.t_ms(frame),
            body,
            latency_ms,
        });
        self.next_seq += 1;
    }

    fn error(&mut self, out: &mut Vec<SessionEvent>, frame: usize, code: &str, message: String) {
        warn!(frame, code, %message, "session error");
        self.emit(out, frame, EventBody::Error(ErrorPayload { code: code.into(), message }), None);
    }

    /// Runs the commands due at the current frame, then the frame's
    /// tracking and cursor update. Returns the events produced, in order.
    pub fn process_frame(&mut self, commands: &[ClientCommand]) -> Vec<SessionEvent> {
        let t = self.next_frame;
        assert!(t < self.frames.count, "session already finished");
        let mut out = Vec::new();
        for cmd in commands {
            self.handle_command(t, cmd, &mut out);
        }
        self.update_cursor(t, &mut out);
        let frame = FramePayload {
            objects: self
                .objects
                .iter()
                .filter(|o| o.active)
                .filter_map(|o| {
                    o.mask_at(t).map(|m| ObjectState {
                        object_id: o.id,
                        label: o.label.clone(),
                        kind: o.kind,
                        mask: m.clone(),
                    })
                })
                .collect(),
            tip: self.cursor.as_ref().map(|c| TipState {
                object_id: c.tip_id,
                x: c.track.landmark.point.x,
                y: c.track.landmark.point.y,
                source: c.track.landmark.source,
                stale: c.track.stale,
            }),
        };
        // the frame summary precedes this frame's cursor updates
        let base = self.next_seq - out.len() as u64;
        let insert_at = out
            .iter()
            .position(|e| matches!(e.body, EventBody::CursorMoved(_) | EventBody::Click(_) | EventBody::AnatomySegmented(_)))
            .unwrap_or(out.len());
        self.emit(&mut out, t, EventBody::Frame(frame), None);
        let frame_event = out.pop().expect("just pushed");
        out.insert(insert_at, frame_event);
        for (i, e) in out.iter_mut().enumerate() {
            e.seq = base + i as u64;
        }
        self.next_frame += 1;
        out
    }

    fn handle_command(&mut self, t: usize, cmd: &ClientCommand, out: &mut Vec<SessionEvent>) {
        let query = match cmd.to_utterance(&self.backends) {
            Ok(q) => q,
            Err(e) => return self.error(out, t, "stt", e.to_string()),
        };
        let frame_ref = self.frames.frame_ref(t);
        let ctx = AgentContext {
            llm: self.backends.llm.as_ref(),
            segmenter: self.backends.segment_text.as_ref(),
            prompt: &self.prompt,
            candidates: &self.config.candidates,
            settings: &self.config.agent,
            frame: frame_ref,
            frame_area: self.frames.area(),
        };
        let outcome = step_transition(&mut self.agent, &query, &ctx);
        self.transcript.push(outcome.transcript(self.t_ms(t)));
        info!(frame = t, q = %query, module = %outcome.module_after, "agent step");
        self.emit(
            out,
            t,
            EventBody::AgentText(AgentTextPayload {
                q: query,
                text: outcome.response.text_response.clone(),
                module_before: outcome.module_before,
                module_after: outcome.module_after,
                tool: outcome.executed,
            }),
            None,
        );
        for effect in outcome.effects {
            self.apply_effect(t, effect, outcome.elapsed_ms, out);
        }
    }

    fn apply_effect(&mut self, t: usize, effect: AgentEffect, elapsed_ms: f64, out: &mut Vec<SessionEvent>) {
        match effect {
            AgentEffect::CandidatesPage {
                target,
                page_index,
                page_count,
                degraded,
                candidates,
                failures,
            } => {
                let payload = CandidatesPagePayload {
                    target,
                    page_index,
                    page_count,
                    degraded,
                    failures,
                    candidates: candidates
                        .into_iter()
                        .enumerate()
                        .map(|(i, c)| CandidateView {
                            index: i + 1,
                            score: c.score,
                            source_prompt: c.source_prompt,
                            backend_id: c.backend_id,
                            mask: c.mask,
                        })
                        .collect(),
                };
                self.emit(out, t, EventBody::CandidatesPage(payload), Some(elapsed_ms));
                self.agent.settle();
            }
            AgentEffect::PagesExhausted => {}
            AgentEffect::MaskSelected {
                index,
                frame,
                candidate,
                target,
                label,
            } => self.select(t, frame, index, candidate, target, label, out),
            AgentEffect::LabelAssigned { selection, label } => {
                if let Some(&id) = self.selection_objects.get(selection).filter(|&&id| id != 0) {
                    if let Some(o) = self.objects.iter_mut().find(|o| o.id == id) {
                        o.label = Some(label.clone());
                    }
                    self.emit(out, t, EventBody::LabelAssigned(LabelAssignedPayload { object_id: id, label }), None);
                }
            }
            AgentEffect::Stopped => {
                for o in &mut self.objects {
                    o.active = false;
                }
                self.selection_objects.clear();
                self.cursor = None;
            }
            AgentEffect::ToolFailed(msg) => self.error(out, t, "tool_failed", msg),
            AgentEffect::PolicyViolation { tool } => {
                self.error(out, t, "policy_violation", format!("{tool} refused in {}", self.agent.module))
            }
            AgentEffect::LlmUnavailable(msg) => self.error(out, t, "llm_unavailable", msg),
        }
    }

    fn propagate(&mut self, t: usize, initial: &Mask, out: &mut Vec<SessionEvent>) -> Vec<Mask> {
        let mut masks = vec![initial.clone()];
        if t + 1 < self.frames.count {
            let req = PropagateRequest {
                initial: initial.clone(),
                from_frame: t,
                to_frame: self.frames.count - 1,
            };
            match self.backends.propagate.propagate(&req) {
                Ok(resp) => masks.extend(resp.masks),
                Err(e) => self.error(out, t, "propagate", e.to_string()),
            }
        }
        masks
    }

    fn add_object(&mut self, label: Option<String>, kind: ObjectKind, start: usize, masks: Vec<Mask>) -> u64 {
        let id = self.next_object;
        self.next_object += 1;
        self.objects.push(TrackedObject {
            id,
            label,
            kind,
            start,
            masks,
            active: true,
        });
        id
    }

    #[allow(clippy::too_many_arguments)]
    fn select(
        &mut self,
        t: usize,
        source_frame: usize,
        index: usize,
        candidate: ScoredCandidate,
        target: SegmentTarget,
        label: Option<String>,
        out: &mut Vec<SessionEvent>,
    ) {
        let kind = match &target {
            SegmentTarget::Object { .. } => ObjectKind::Object,
            SegmentTarget::Tip { of, .. } => {
                let instrument = self
                    .objects
                    .iter()
                    .rev()
                    .find(|o| o.active && o.kind == ObjectKind::Object && o.label.as_deref() == Some(of.as_str()));
                match instrument {
                    Some(o) => ObjectKind::Tip { instrument_id: o.id },
                    None => {
                        self.selection_objects.push(0);
                        return self.error(out, t, "no_instrument", format!("no tracked object labelled {of}"));
                    }
                }
            }
        };
        let masks = self.propagate(source_frame, &candidate.mask, out);
        let id = self.add_object(None, kind, source_frame, masks);
        self.selection_objects.push(id);
        self.emit(
            out,
            t,
            EventBody::MaskSelected(MaskSelectedPayload {
                object_id: id,
                index,
                source_frame,
                kind,
                score: candidate.score,
                mask: candidate.mask.clone(),
            }),
            None,
        );
        if let Some(label) = label {
            if let Some(o) = self.objects.iter_mut().find(|o| o.id == id) {
                o.label = Some(label.clone());
            }
            self.emit(out, t, EventBody::LabelAssigned(LabelAssignedPayload { object_id: id, label }), None);
        }
        if let ObjectKind::Tip { instrument_id } = kind {
            self.lock_tip(t, id, instrument_id, out);
        }
    }

    fn instrument_mask(&self, id: u64, t: usize) -> Option<Mask> {
        self.objects.iter().find(|o| o.id == id).and_then(|o| o.mask_at(t)).cloned()
    }

    fn depth_at(&mut self, t: usize, out: &mut Vec<SessionEvent>) -> Option<crate::virtual_cursor::DepthMap> {
        let req = DepthRequest {
            frame: self.frames.frame_ref(t),
        };
        match self.backends.depth.depth(&req).map(|r| r.to_map()) {
            Ok(Ok(map)) => Some(map),
            Ok(Err(e)) => {
                self.error(out, t, "depth", e.to_string());
                None
            }
            Err(e) => {
                self.error(out, t, "depth", e.to_string());
                None
            }
        }
    }

    fn lock_tip(&mut self, t: usize, tip_id: u64, instrument_id: u64, out: &mut Vec<SessionEvent>) {
        let (Some(instrument), Some(tip)) = (self.instrument_mask(instrument_id, t), self.instrument_mask(tip_id, t)) else {
            return self.error(out, t, "no_instrument", "instrument or tip mask missing at this frame".into());
        };
        let shaft = instrument.difference(&tip).expect("same dims");
        let landmark = match tip_landmark(&shaft, &tip, t) {
            Ok(l) => l,
            Err(e) => return self.error(out, t, "tip_landmark", format!("{e}; please select the tip again")),
        };
        let axis = match principal_axis(&instrument) {
            Ok(a) => a,
            Err(e) => return self.error(out, t, "principal_axis", e.to_string()),
        };
        let cfg = self.config.cursor.clone();
        let cursor = cursor_position(&landmark, &axis, cfg.offset_px, (self.frames.width, self.frames.height));
        let Some(depth) = self.depth_at(t, out) else { return };
        let band = match cfg.band_center {
            Some(c) => {
                let (lo, hi) = depth.range();
                Some((c, cfg.band_halfwidth_frac * f64::from(hi - lo)))
            }
            None => calibrate_band(&depth, cursor.point, cfg.radius_px, Some(&instrument), cfg.band_halfwidth_frac),
        };
        let Some((center, half)) = band else {
            return self.error(out, t, "calibration", "no surface pixels under the cursor".into());
        };
        self.emit(
            out,
            t,
            EventBody::TipLocked(TipLockedPayload {
                object_id: tip_id,
                instrument_id,
                x: landmark.point.x,
                y: landmark.point.y,
                source: landmark.source,
                band_center: center,
                band_halfwidth: half,
            }),
            None,
        );
        self.cursor = Some(CursorTrack {
            tip_id,
            instrument_id,
            track: TipTrack::new(landmark),
            click: ClickDetectorState::new(center, half, &cfg),
        });
    }

    fn update_cursor(&mut self, t: usize, out: &mut Vec<SessionEvent>) {
        let Some(mut cur) = self.cursor.clone() else { return };
        let Some(instrument) = self.instrument_mask(cur.instrument_id, t) else { return };
        let tip = self.instrument_mask(cur.tip_id, t);

        let located = tip
            .as_ref()
            .ok_or(GeometryError::Degenerate("no tip mask"))
            .and_then(|tip| {
                let shaft = instrument.difference(tip).expect("same dims");
                tip_landmark(&shaft, tip, t)
            });
        cur.track = match located {
            Ok(l) => TipTrack::new(l),
            Err(_) => {
                let shaft = match &tip {
                    Some(tip) => instrument.difference(tip).expect("same dims"),
                    None => instrument.clone(),
                };
                match track_tip(&shaft, t, &cur.track, self.config.tracking.stale_limit) {
                    Ok(track) => track,
                    Err(e) => {
                        self.cursor = None;
                        return self.error(out, t, "tracking_lost", e.to_string());
                    }
                }
            }
        };
        let label = self
            .objects
            .iter()
            .find(|o| o.id == cur.instrument_id)
            .and_then(|o| o.label.clone())
            .unwrap_or_else(|| cur.instrument_id.to_string());
        self.landmarks.push(LandmarkRecord {
            frame: t,
            instrument: label,
            x: cur.track.landmark.point.x,
            y: cur.track.landmark.point.y,
            source: cur.track.landmark.source,
            stale: cur.track.stale,
        });

        let Ok(axis) = principal_axis(&instrument) else {
            self.cursor = Some(cur);
            return;
        };
        let cfg = &self.config.cursor;
        let cursor = cursor_position(&cur.track.landmark, &axis, cfg.offset_px, (self.frames.width, self.frames.height));
        let radius = cfg.radius_px;
        let Some(depth) = self.depth_at(t, out) else {
            self.cursor = Some(cur);
            return;
        };
        let update = update_click_state(cur.click, &depth, cursor.point, radius, Some(&instrument));
        cur.click = update.state;
        self.cursor = Some(cur);
        self.emit(
            out,
            t,
            EventBody::CursorMoved(CursorMovedPayload {
                x: cursor.point.x,
                y: cursor.point.y,
                clamped: cursor.clamped,
                occupancy: update.occupancy,
                consecutive_hits: update.state.consecutive_hits,
                armed: update.state.armed,
            }),
            None,
        );
        if !update.fired {
            return;
        }
        self.emit(
            out,
            t,
            EventBody::Click(ClickPayload {
                x: cursor.point.x,
                y: cursor.point.y,
                occupancy: update.occupancy.unwrap_or(0.0),
            }),
            None,
        );
        let prompt = make_anatomy_prompt(cursor);
        let req = SegmentPointRequest {
            frame: self.frames.frame_ref(t),
            point: prompt.point,
            positive: prompt.positive,
        };
        match self.backends.segment_point.segment_point(&req) {
            Ok(resp) => match resp.mask {
                Some(mask) => {
                    let masks = self.propagate(t, &mask, out);
                    let id = self.add_object(Some("anatomy".into()), ObjectKind::Anatomy, t, masks);
                    self.emit(
                        out,
                        t,
                        EventBody::AnatomySegmented(AnatomySegmentedPayload {
                            object_id: id,
                            x: prompt.point.x,
                            y: prompt.point.y,
                            score: resp.score,
                            mask,
                        }),
                        None,
                    );
                }
                None => self.error(out, t, "no_anatomy", format!("nothing segmented at {}", prompt.point)),
            },
            Err(e) => self.error(out, t, "segment_point", e.to_string()),
        }
    }
}

/// Everything a finished scripted run produced.
#[derive(Debug)]
pub struct SessionOutput {
    pub log: SessionLog,
    pub transcript: Vec<TranscriptRow>,
    pub landmarks: Vec<LandmarkRecord>,
    pub objects: Vec<TrackedObject>,
    pub agent: AgentState,
}

impl SessionOutput {
    /// The active object with this label.
    pub fn object(&self, label: &str) -> Option<&TrackedObject> {
        self.objects.iter().find(|o| o.label.as_deref() == Some(label))
    }

    pub fn anatomy(&self) -> Option<&TrackedObject> {
        self.objects.iter().find(|o| o.kind == ObjectKind::Anatomy)
    }
}

/// Drives a session over every frame, feeding script commands at their frames.
pub fn run_scripted_session(header: LogHeader, backends: Backends, log_path: Option<&Path>) -> Result<SessionOutput> {
    validate_script(&header.script, header.frames.count)?;
    let mut session = Session::new(header.config.clone(), header.frames.clone(), backends)?;
    let script = header.script.clone();
    let mut log = match log_path {
        Some(p) => SessionLog::create(p, header)?,
        None => SessionLog::in_memory(header),
    };
    let mut next = 0;
    while !session.is_finished() {
        let t = session.current_frame();
        let end = script[next..].iter().position(|e| e.frame != t).map_or(script.len(), |p| next + p);
        let commands: Vec<ClientCommand> = script[next..end].iter().map(|e| e.command.clone()).collect();
        next = end;
        for event in session.process_frame(&commands) {
            log.append_log_event(event)?;
        }
    }
    Ok(SessionOutput {
        log,
        transcript: session.transcript,
        landmarks: session.landmarks,
        objects: session.objects,
        agent: session.agent,
    })
}

/// Scene and mock backends described by a header.
pub fn mock_backends(header: &LogHeader) -> Result<(Arc<SceneTruth>, Backends)> {
    let params = header
        .scene
        .as_ref()
        .ok_or_else(|| SessionError::Config("mock backends need scene parameters in the header".into()))?;
    let scene = Arc::new(generate_synthetic_scene(header.seed, params).map_err(|e| SessionError::Config(e.to_string()))?);
    let mocks = MockBackends::new(scene.clone(), header.config.mock.clone());
    Ok((scene, Backends::uniform(Arc::new(mocks))))
}

/// Builds a mock header plus backends from a seed and scene parameters.
pub fn mock_session_header(
    seed: u64,
    scene: SceneParams,
    config: ScopeConfig,
    mock: Option<MockConfig>,
    script: Vec<ScriptEntry>,
) -> Result<(LogHeader, Arc<SceneTruth>, Backends)> {
    let mut config = config;
    if let Some(m) = mock {
        config.mock = m;
    }
    let truth = generate_synthetic_scene(seed, &scene).map_err(|e| SessionError::Config(e.to_string()))?;
    let header = LogHeader::mock(seed, scene, FrameSource::synthetic(&truth), config, script);
    let (truth, backends) = mock_backends(&header)?;
    Ok((header, truth, backends))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub events: usize,
    pub logged_hash: String,
    pub replayed_hash: String,
    pub logged_state: String,
    pub replayed_state: String,
}

impl ReplayReport {
    pub fn matches(&self) -> bool {
        self.logged_hash == self.replayed_hash && self.logged_state == self.replayed_state
    }
}

/// Re-runs the logged session against mocks rebuilt from its header.
pub fn replay(log: &SessionLog) -> Result<ReplayReport> {
    if !log.header.uses_mocks() {
        return Err(SessionError::Config("replay needs a log recorded with mock backends".into()));
    }
    let (_, backends) = mock_backends(&log.header)?;
    let rerun = run_scripted_session(log.header.clone(), backends, None)?;
    Ok(ReplayReport {
        events: log.len(),
        logged_hash: log.event_hash(),
        replayed_hash: rerun.log.event_hash(),
        logged_state: log.snapshot().state_hash(),
        replayed_state: rerun.log.snapshot().state_hash(),
    })
}

/// A command sent to a live session. `id` makes resends idempotent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandEnvelope {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub command: ClientCommand,
}

/// Messages on the live event stream, server to client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    /// First message for a subscriber that did not ask to resume.
    Snapshot { snapshot: SessionSnapshot },
    Event { event: SessionEvent },
    /// Droppable events discarded for this subscriber since the last report.
    Dropped { count: u64, total: u64 },
    Ack { id: Option<String>, duplicate: bool },
    Error { message: String },
}

/// Reply to a manual-clock advance request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvanceReport {
    pub processed: usize,
    pub current_frame: usize,
    pub finished: bool,
}
