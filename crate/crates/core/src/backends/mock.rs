//! Scripted backends driven by a [`SceneTruth`].
//!
//! Segmenters return the true masks plus plausible distractors so ranking,
//! deduplication and paging have something to do. The language model is a
//! keyword table that emits the agent's JSON reply format.

use std::sync::Arc;

use base64::Engine;
use base64::engine::general_purpose::STANDARD as B64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::scene::{FrameTruth, SceneTruth};
use super::*;
use crate::candidates::ScoredCandidate;
use crate::mask::{iou, Mask, PixelPoint};

pub const MOCK_SEGMENTER_ID: &str = "mock-gsam";

const INSTRUMENT_WORDS: &[&str] = &[
    "instrument", "instruments", "tool", "tools", "forceps", "grasper", "tweezers", "suction", "cannula",
    "scissors", "probe", "drill", "needle", "hook", "retractor", "shaft",
];
const ANATOMY_WORDS: &[&str] = &[
    "anatomy", "tissue", "bone", "lens", "cornea", "iris", "dura", "nerve", "surface", "skull", "brain", "organ",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptClass {
    Instrument,
    Tip,
    Anatomy,
}

pub fn classify_prompt(prompt: &str) -> Option<PromptClass> {
    let lower = prompt.to_lowercase();
    let words: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect();
    if words.iter().any(|w| matches!(*w, "tip" | "tips" | "distal")) {
        Some(PromptClass::Tip)
    } else if words.iter().any(|w| INSTRUMENT_WORDS.contains(w)) {
        Some(PromptClass::Instrument)
    } else if words.iter().any(|w| ANATOMY_WORDS.contains(w)) {
        Some(PromptClass::Anatomy)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationMode {
    /// Every frame gets the true mask of the identified object.
    #[default]
    Oracle,
    /// The true mask eroded once more every ten frames.
    Drift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockNoise {
    /// Score given to the true mask.
    pub truth_score: f64,
    /// Additional background blobs per prompt.
    pub extra_blobs: usize,
    /// Add a full-frame candidate that the background penalty should sink.
    pub whole_frame: bool,
}

impl Default for MockNoise {
    fn default() -> Self {
        Self {
            truth_score: 0.9,
            extra_blobs: 0,
            whole_frame: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    pub noise: MockNoise,
    pub propagation: PropagationMode,
}

#[derive(Debug, Clone)]
pub struct MockBackends {
    scene: Arc<SceneTruth>,
    config: MockConfig,
    llm: MockLlm,
}

fn rejected(code: &str, message: String) -> BackendError {
    BackendError::Rejected(ErrorBody {
        code: code.into(),
        message,
        retryable: false,
    })
}

fn fnv1a(text: &str) -> u64 {
    text.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// First half of the mask's pixels in row-major order.
fn half_mask(mask: &Mask) -> Mask {
    let keep = mask.area() / 2;
    let mut bm = crate::mask::Bitmap::new(mask.width(), mask.height());
    for p in mask.foreground_points().take(keep.max(1)) {
        bm.set(p.x, p.y, true);
    }
    Mask::from_bitmap(&bm)
}

impl MockBackends {
    pub fn new(scene: Arc<SceneTruth>, config: MockConfig) -> Self {
        Self {
            scene,
            config,
            llm: MockLlm,
        }
    }

    pub fn scene(&self) -> &SceneTruth {
        &self.scene
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    fn frame(&self, frame: &FrameRef) -> BackendResult<&FrameTruth> {
        self.scene
            .frame(frame.index)
            .ok_or_else(|| rejected("frame_out_of_range", format!("frame {} not in scene", frame.index)))
    }

    /// Disjoint discs placed away from every object: `extra` chosen per
    /// scene, then one chosen by prompt.
    fn blobs(&self, truth: &FrameTruth, prompt: &str, extra: usize) -> Vec<Mask> {
        let (w, h) = self.scene.dims();
        let occupied = truth
            .instruments
            .iter()
            .try_fold(truth.anatomy.dilate().dilate(), |acc, i| acc.union(&i.mask.dilate().dilate()))
            .expect("same dims");
        let mut cells: Vec<(u32, u32)> = (0..h / 16)
            .flat_map(|cy| (0..w / 16).map(move |cx| (cx * 16 + 8, cy * 16 + 8)))
            .filter(|&(x, y)| {
                // disc of radius 4 must be clear
                (0..=8).all(|dy| (0..=8).all(|dx| !occupied.contains(PixelPoint::new(x + dx - 4, y + dy - 4))))
            })
            .collect();
        cells.shuffle(&mut ChaCha8Rng::seed_from_u64(self.scene.seed));
        let extra = extra.min(cells.len());
        let (shared, rest) = cells.split_at_mut(extra);
        rest.shuffle(&mut ChaCha8Rng::seed_from_u64(self.scene.seed ^ fnv1a(prompt)));
        let disc = |(cx, cy): (u32, u32)| {
            Mask::from_fn(w, h, |x, y| {
                let (dx, dy) = (f64::from(x) - f64::from(cx), f64::from(y) - f64::from(cy));
                dx.hypot(dy) <= 4.0
            })
        };
        rest.first().copied().into_iter().chain(shared.iter().copied()).map(disc).collect()
    }

    /// Truth, a loose version, and a partial one.
    fn family(&self, truth_mask: &Mask) -> Vec<(Mask, f64)> {
        vec![
            (truth_mask.clone(), self.config.noise.truth_score.clamp(0.0, 1.0)),
            (truth_mask.dilate().dilate(), 0.7),
            (half_mask(truth_mask), 0.6),
        ]
    }
}

impl TextSegmenter for MockBackends {
    fn segment_text(&self, req: &SegmentTextRequest) -> BackendResult<SegmentTextResponse> {
        let truth = self.frame(&req.frame)?;
        let Some(class) = classify_prompt(&req.prompt) else {
            return Ok(SegmentTextResponse { candidates: Vec::new() });
        };
        let targets: Vec<&Mask> = match class {
            PromptClass::Instrument => truth.instruments.iter().map(|i| &i.mask).collect(),
            PromptClass::Tip => truth.instruments.iter().map(|i| &i.tip).collect(),
            PromptClass::Anatomy => vec![&truth.anatomy],
        };
        let mut scored: Vec<(Mask, f64)> = targets.into_iter().flat_map(|m| self.family(m)).collect();
        let noise = &self.config.noise;
        for (k, blob) in self.blobs(truth, &req.prompt, noise.extra_blobs).into_iter().enumerate() {
            // extra blobs outrank the truth when it is demoted
            let score = if k == 0 { 0.5 } else { 0.95 - 0.01 * k as f64 };
            scored.push((blob, score));
        }
        if noise.whole_frame {
            let (w, h) = self.scene.dims();
            scored.push((Mask::from_fn(w, h, |_, _| true), 0.99));
        }
        let candidates = scored
            .into_iter()
            .map(|(mask, score)| ScoredCandidate {
                mask,
                score,
                source_prompt: req.prompt.clone(),
                backend_id: MOCK_SEGMENTER_ID.into(),
            })
            .collect();
        Ok(SegmentTextResponse { candidates })
    }
}

impl PointSegmenter for MockBackends {
    fn segment_point(&self, req: &SegmentPointRequest) -> BackendResult<SegmentPointResponse> {
        let truth = self.frame(&req.frame)?;
        if let Some(inst) = truth.instruments.iter().find(|i| i.mask.contains(req.point)) {
            return Ok(SegmentPointResponse {
                mask: Some(inst.mask.clone()),
                score: 0.9,
            });
        }
        if truth.anatomy.contains(req.point) {
            return Ok(SegmentPointResponse {
                mask: Some(truth.anatomy.clone()),
                score: 0.95,
            });
        }
        Ok(SegmentPointResponse { mask: None, score: 0.0 })
    }
}

#[derive(Clone, Copy)]
enum Part {
    Whole(usize),
    Shaft(usize),
    Tip(usize),
    Anatomy,
}

impl MockBackends {
    fn part_mask(&self, frame: usize, part: Part) -> &Mask {
        let f = &self.scene.frames[frame];
        match part {
            Part::Whole(i) => &f.instruments[i].mask,
            Part::Shaft(i) => &f.instruments[i].shaft,
            Part::Tip(i) => &f.instruments[i].tip,
            Part::Anatomy => &f.anatomy,
        }
    }

    fn identify(&self, mask: &Mask, frame: usize) -> Option<Part> {
        let n = self.scene.params.instruments;
        let parts = (0..n)
            .flat_map(|i| [Part::Whole(i), Part::Shaft(i), Part::Tip(i)])
            .chain(std::iter::once(Part::Anatomy));
        parts
            .map(|p| (p, iou(mask, self.part_mask(frame, p)).unwrap_or(0.0)))
            .filter(|&(_, s)| s >= 0.5)
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(p, _)| p)
    }
}

impl Propagator for MockBackends {
    fn propagate(&self, req: &PropagateRequest) -> BackendResult<PropagateResponse> {
        let n = self.scene.frame_count();
        if req.from_frame >= req.to_frame || req.to_frame >= n {
            return Err(rejected(
                "range",
                format!("cannot propagate {}..={} over {n} frames", req.from_frame, req.to_frame),
            ));
        }
        if req.initial.dims() != self.scene.dims() {
            return Err(rejected("dimension", format!("initial mask is {:?}", req.initial.dims())));
        }
        let part = self.identify(&req.initial, req.from_frame);
        let masks = (req.from_frame + 1..=req.to_frame)
            .map(|t| {
                let base = match part {
                    Some(p) => self.part_mask(t, p).clone(),
                    None => req.initial.clone(),
                };
                match self.config.propagation {
                    PropagationMode::Oracle => base,
                    PropagationMode::Drift => (0..(t - req.from_frame) / 10).fold(base, |m, _| m.erode()),
                }
            })
            .collect();
        Ok(PropagateResponse { masks })
    }
}

impl DepthEstimator for MockBackends {
    fn depth(&self, req: &DepthRequest) -> BackendResult<DepthResponse> {
        Ok(DepthResponse::from_map(&self.frame(&req.frame)?.depth))
    }
}

impl Transcriber for MockBackends {
    fn transcribe(&self, req: &SttRequest) -> BackendResult<SttResponse> {
        let bytes = B64
            .decode(&req.audio_b64)
            .map_err(|e| rejected("bad_audio", format!("audio is not base64: {e}")))?;
        let text = String::from_utf8(bytes).map_err(|_| rejected("bad_audio", "mock audio must be UTF-8 text".into()))?;
        Ok(SttResponse { text: text.trim().to_owned() })
    }
}

impl LanguageModel for MockBackends {
    fn complete(&self, req: &LlmRequest) -> BackendResult<LlmResponse> {
        self.llm.complete(req)
    }
}

/// Mock audio: the utterance itself, base64 encoded.
pub fn encode_mock_audio(utterance: &str) -> String {
    B64.encode(utterance.as_bytes())
}

/// Keyword-driven stand-in for the chat model.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockLlm;

/// Broad class of a user utterance as the mock reads it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UtteranceClass {
    Reject,
    Segment,
    Select,
    Track,
    Stop,
    Greeting,
    Unknown,
}

/// One representative utterance per class.
pub const EXAMPLE_UTTERANCES: &[(UtteranceClass, &str)] = &[
    (UtteranceClass::Segment, "segment the surgical instruments"),
    (UtteranceClass::Segment, "segment the tip of suction"),
    (UtteranceClass::Select, "the first one"),
    (UtteranceClass::Select, "the second one, label it forceps"),
    (UtteranceClass::Reject, "none of these"),
    (UtteranceClass::Track, "track it as suction"),
    (UtteranceClass::Stop, "stop tracking"),
    (UtteranceClass::Greeting, "hello"),
    (UtteranceClass::Unknown, "what is the weather like"),
];

const ORDINALS: &[(&str, usize)] = &[
    ("first", 1),
    ("1st", 1),
    ("second", 2),
    ("2nd", 2),
    ("third", 3),
    ("3rd", 3),
    ("fourth", 4),
    ("4th", 4),
    ("fifth", 5),
    ("5th", 5),
    ("sixth", 6),
    ("6th", 6),
];

pub const ORDINAL_WORDS: [&str; 6] = ["first", "second", "third", "fourth", "fifth", "sixth"];

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|w| !w.is_empty())
        .map(str::to_owned)
        .collect()
}

fn strip_articles(mut rest: &[String]) -> &[String] {
    while let Some(first) = rest.first() {
        if ["the", "a", "an", "all", "of"].contains(&first.as_str()) && rest.len() > 1 {
            rest = &rest[1..];
        } else {
            break;
        }
    }
    rest
}

fn label_after(w: &[String]) -> Option<String> {
    let pos = w.windows(2).position(|p| {
        matches!(p[0].as_str(), "label" | "call" | "name" | "track") && matches!(p[1].as_str(), "it" | "this" | "that" | "as")
    })?;
    let mut rest = &w[pos + 2..];
    if rest.first().is_some_and(|s| s == "as") {
        rest = &rest[1..];
    }
    let rest = strip_articles(rest);
    (!rest.is_empty()).then(|| rest.join(" "))
}

fn ordinal(w: &[String]) -> Option<usize> {
    if let Some(i) = w.iter().position(|s| matches!(s.as_str(), "number" | "option" | "candidate" | "mask")) {
        if let Some(n) = w.get(i + 1).and_then(|s| s.parse::<usize>().ok()) {
            return Some(n);
        }
    }
    w.iter().find_map(|s| ORDINALS.iter().find(|(k, _)| k == s).map(|&(_, n)| n))
}

fn has_phrase(w: &[String], phrase: &str) -> bool {
    let p: Vec<&str> = phrase.split(' ').collect();
    w.windows(p.len()).any(|win| win.iter().zip(&p).all(|(a, b)| a == b))
}

impl MockLlm {
    pub fn classify(utterance: &str) -> UtteranceClass {
        Self::interpret(utterance).0
    }

    fn interpret(utterance: &str) -> (UtteranceClass, serde_json::Value) {
        let w = words(utterance);
        let reject = ["none of these", "none of them", "not these", "next page", "show more", "show me more", "other options"];
        if reject.iter().any(|p| has_phrase(&w, p)) || w == ["no"] || w == ["next"] {
            return (
                UtteranceClass::Reject,
                json!({"action": {"tool": "next_page", "args": {}}, "text_response": "Here are more candidates."}),
            );
        }
        let stop = ["stop", "end session", "that's all", "thats all", "finish"];
        if stop.iter().any(|p| has_phrase(&w, p)) {
            return (
                UtteranceClass::Stop,
                json!({"action": {"tool": "stop", "args": {}}, "text_response": "Stopped tracking."}),
            );
        }
        if let Some(i) = w.iter().position(|s| matches!(s.as_str(), "segment" | "find" | "outline" | "highlight" | "detect")) {
            let rest = strip_articles(&w[i + 1..]);
            if !rest.is_empty() {
                let query = rest.join(" ");
                return (
                    UtteranceClass::Segment,
                    json!({"action": {"tool": "segment", "args": {"query": query}}, "text_response": format!("Segmenting {query}.")}),
                );
            }
        }
        let label = label_after(&w);
        if let Some(index) = ordinal(&w) {
            let mut args = json!({ "index": index });
            let mut text = format!("Selected candidate {index}.");
            if let Some(l) = &label {
                args["label"] = json!(l);
                text = format!("Selected candidate {index} as {l}.");
            }
            return (UtteranceClass::Select, json!({"action": {"tool": "select", "args": args}, "text_response": text}));
        }
        if let Some(l) = label.or_else(|| w.first().filter(|s| *s == "track").map(|_| "instrument".to_owned())) {
            return (
                UtteranceClass::Track,
                json!({"action": {"tool": "track", "args": {"label": l}}, "text_response": format!("Tracking {l}.")}),
            );
        }
        let greetings = ["hello", "hi", "hey", "morning", "afternoon", "evening"];
        if w.iter().any(|s| greetings.contains(&s.as_str())) {
            return (
                UtteranceClass::Greeting,
                json!({"text_response": "Hello. Tell me what to segment."}),
            );
        }
        (
            UtteranceClass::Unknown,
            json!({"text_response": "Sorry, I did not catch that. Ask me to segment something, pick a candidate by number, or say none of these."}),
        )
    }

    fn expansions(query: &str) -> Vec<String> {
        let w = words(query);
        let q = w.join(" ");
        let owned = |xs: &[&str]| xs.iter().map(|s| (*s).to_owned()).collect();
        if let Some(rest) = q.strip_prefix("tip of ") {
            let rest = rest.strip_prefix("the ").unwrap_or(rest);
            return vec![format!("{rest} tip"), format!("tip of the {rest}"), format!("distal {rest} tip")];
        }
        match q.as_str() {
            "surgical instruments" | "surgical instrument" => owned(&["surgical tools", "gray instruments", "metal instruments"]),
            "instruments" | "instrument" | "tools" => owned(&["surgical instruments", "surgical tools", "gray instruments"]),
            "forceps" => owned(&["grasper", "tweezers"]),
            "suction" => owned(&["suction tube", "suction cannula"]),
            "anatomy" | "tissue" => owned(&["tissue surface", "anatomy surface"]),
            _ => Vec::new(),
        }
    }
}

impl LanguageModel for MockLlm {
    fn complete(&self, req: &LlmRequest) -> BackendResult<LlmResponse> {
        match req {
            LlmRequest::Chat(chat) => Ok(LlmResponse::Chat {
                text: Self::interpret(&chat.query).1.to_string(),
            }),
            LlmRequest::Expand { query, count } => {
                let mut alternatives = Self::expansions(query);
                alternatives.truncate(*count);
                Ok(LlmResponse::Expand { alternatives })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::scene::{generate_synthetic_scene, SceneParams};

    fn mock(config: MockConfig) -> MockBackends {
        let scene = generate_synthetic_scene(2, &SceneParams::default()).unwrap();
        MockBackends::new(Arc::new(scene), config)
    }

    #[test]
    fn classifies_prompts() {
        assert_eq!(classify_prompt("surgical tools"), Some(PromptClass::Instrument));
        assert_eq!(classify_prompt("tip of the suction"), Some(PromptClass::Tip));
        assert_eq!(classify_prompt("bone surface"), Some(PromptClass::Anatomy));
        assert_eq!(classify_prompt("the sky"), None);
    }

    #[test]
    fn segment_text_includes_truth() {
        let m = mock(MockConfig::default());
        let req = SegmentTextRequest {
            prompt: "surgical instruments".into(),
            frame: FrameRef::index(0),
        };
        let resp = m.segment_text(&req).unwrap();
        let truth = &m.scene().frames[0].instruments[0].mask;
        assert!(resp.candidates.iter().any(|c| &c.mask == truth && c.score == 0.9));
        assert!(resp.candidates.iter().all(|c| c.validate().is_ok()));
        // blobs stay off the objects
        let blob = resp.candidates.iter().find(|c| c.score == 0.5).unwrap();
        assert_eq!(blob.mask.intersection_area(truth).unwrap(), 0);
    }

    #[test]
    fn segment_point_hits_anatomy() {
        let m = mock(MockConfig::default());
        let f = &m.scene().frames[0];
        let inside = f.anatomy.foreground_points().find(|p| !f.instruments[0].mask.contains(*p)).unwrap();
        let r = m
            .segment_point(&SegmentPointRequest {
                frame: FrameRef::index(0),
                point: inside,
                positive: true,
            })
            .unwrap();
        assert_eq!(r.mask.as_ref(), Some(&f.anatomy));
        let r = m
            .segment_point(&SegmentPointRequest {
                frame: FrameRef::index(0),
                point: PixelPoint::new(0, 0),
                positive: true,
            })
            .unwrap();
        assert!(r.mask.is_none());
    }

    #[test]
    fn propagation_modes() {
        let m = mock(MockConfig::default());
        let init = m.scene().frames[3].instruments[0].tip.clone();
        let r = m
            .propagate(&PropagateRequest {
                initial: init,
                from_frame: 3,
                to_frame: 40,
            })
            .unwrap();
        assert_eq!(r.masks.len(), 37);
        assert_eq!(r.masks[36], m.scene().frames[40].instruments[0].tip);

        let d = mock(MockConfig { propagation: PropagationMode::Drift, ..MockConfig::default() });
        let init = d.scene().frames[0].anatomy.clone();
        let r = d
            .propagate(&PropagateRequest {
                initial: init.clone(),
                from_frame: 0,
                to_frame: 25,
            })
            .unwrap();
        assert_eq!(r.masks[8], init);
        assert_eq!(r.masks[9], init.erode());
        assert_eq!(r.masks[24], init.erode().erode());

        let bad = m.propagate(&PropagateRequest {
            initial: init,
            from_frame: 5,
            to_frame: 500,
        });
        assert!(matches!(bad, Err(BackendError::Rejected(_))));
    }

    #[test]
    fn stt_round_trip() {
        let m = mock(MockConfig::default());
        let r = m.transcribe(&SttRequest { audio_b64: encode_mock_audio("segment the tip") }).unwrap();
        assert_eq!(r.text, "segment the tip");
    }

    #[test]
    fn llm_patterns() {
        for (class, utterance) in EXAMPLE_UTTERANCES {
            assert_eq!(MockLlm::classify(utterance), *class, "{utterance}");
        }
        let reply: serde_json::Value =
            serde_json::from_str(&MockLlm.chat(chat("the third one, label it suction")).unwrap()).unwrap();
        assert_eq!(reply["action"]["args"], json!({"index": 3, "label": "suction"}));
        let reply: serde_json::Value = serde_json::from_str(&MockLlm.chat(chat("Segment the tip of suction.")).unwrap()).unwrap();
        assert_eq!(reply["action"]["args"]["query"], "tip of suction");
    }

    #[test]
    fn llm_expansions() {
        assert_eq!(MockLlm.expand("surgical instruments", 2).unwrap(), ["surgical tools", "gray instruments"]);
        assert_eq!(MockLlm.expand("tip of suction", 3).unwrap()[0], "suction tip");
        assert!(MockLlm.expand("sky", 3).unwrap().is_empty());
    }

    fn chat(query: &str) -> ChatRequest {
        ChatRequest {
            query: query.into(),
            system_inputs: json!({}),
            system_prompt: String::new(),
            history: Vec::new(),
            repair: None,
        }
    }
}
