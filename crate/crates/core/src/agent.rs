//! Speech agent: a four-module workflow machine around a chat model.
//!
//! Each step sends the utterance, a textual summary of the session, the
//! system prompt and recent history to the language model, validates the
//! structured reply against the current module, runs the tool and moves the
//! workflow along its fixed edges.

use std::collections::BTreeSet;
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{debug, warn};

use crate::backends::{BackendError, ChatRequest, ChatTurn, FrameRef, LanguageModel, TextSegmenter};
use crate::candidates::{
    collect_candidates, expand_query, next_page, rank_and_dedup, CandidateConfig, CandidatePageState, PageAdvance,
    ScoredCandidate,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModuleName {
    InteractiveMode,
    Segmentation,
    SelectMask,
    Tracking,
}

impl ModuleName {
    pub const ALL: [ModuleName; 4] = [
        ModuleName::InteractiveMode,
        ModuleName::Segmentation,
        ModuleName::SelectMask,
        ModuleName::Tracking,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleName::InteractiveMode => "InteractiveMode",
            ModuleName::Segmentation => "Segmentation",
            ModuleName::SelectMask => "SelectMask",
            ModuleName::Tracking => "Tracking",
        }
    }
}

impl fmt::Display for ModuleName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolName {
    Segment,
    Select,
    NextPage,
    Track,
    Stop,
}

impl ToolName {
    pub const ALL: [ToolName; 5] = [ToolName::Segment, ToolName::Select, ToolName::NextPage, ToolName::Track, ToolName::Stop];

    pub fn as_str(self) -> &'static str {
        match self {
            ToolName::Segment => "segment",
            ToolName::Select => "select",
            ToolName::NextPage => "next_page",
            ToolName::Track => "track",
            ToolName::Stop => "stop",
        }
    }

    pub fn parse(name: &str) -> Option<ToolName> {
        Self::ALL.into_iter().find(|t| t.as_str() == name)
    }
}

impl fmt::Display for ToolName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentArgs {
    pub query: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectArgs {
    /// 1-based position on the displayed page.
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackArgs {
    pub label: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoArgs {}

/// A validated tool invocation: `{"tool": name, "args": {...}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "tool", content = "args", rename_all = "snake_case", deny_unknown_fields)]
pub enum ToolCall {
    Segment(SegmentArgs),
    Select(SelectArgs),
    NextPage(NoArgs),
    Track(TrackArgs),
    Stop(NoArgs),
}

impl ToolCall {
    pub fn name(&self) -> ToolName {
        match self {
            ToolCall::Segment(_) => ToolName::Segment,
            ToolCall::Select(_) => ToolName::Select,
            ToolCall::NextPage(_) => ToolName::NextPage,
            ToolCall::Track(_) => ToolName::Track,
            ToolCall::Stop(_) => ToolName::Stop,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<ToolCall>,
    pub text_response: String,
}

impl AgentResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            action: None,
            text_response: text.into(),
        }
    }

    pub fn to_wire(&self) -> String {
        serde_json::to_string(self).expect("response serializes")
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("malformed agent reply: {0}")]
    Parse(String),
    #[error("tool {tool} is not allowed in {module}")]
    PolicyViolation { tool: ToolName, module: ModuleName },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub user: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowModule {
    pub name: ModuleName,
    pub module_prompt: String,
    pub entry_criteria: String,
    pub exit_criteria: String,
    pub allowed_tools: Vec<String>,
    pub examples: Vec<Example>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolDescriptor {
    pub name: String,
    pub description: String,
    /// Argument names mapped to type names.
    pub args: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowConfig {
    pub description: String,
    pub modules: Vec<WorkflowModule>,
    pub tools: Vec<ToolDescriptor>,
    pub examples: Vec<Example>,
    pub rules: Vec<String>,
}

fn ex(user: &str, response: Value) -> Example {
    Example {
        user: user.into(),
        response: response.to_string(),
    }
}

fn module(name: ModuleName, prompt: &str, entry: &str, exit: &str, tools: &[ToolName], examples: Vec<Example>) -> WorkflowModule {
    WorkflowModule {
        name,
        module_prompt: prompt.into(),
        entry_criteria: entry.into(),
        exit_criteria: exit.into(),
        allowed_tools: tools.iter().map(|t| t.as_str().to_owned()).collect(),
        examples,
    }
}

fn tool(name: ToolName, description: &str, args: &[(&str, &str)]) -> ToolDescriptor {
    ToolDescriptor {
        name: name.as_str().into(),
        description: description.into(),
        args: args.iter().map(|(a, t)| ((*a).into(), (*t).into())).collect(),
    }
}

impl Default for WorkflowConfig {
    fn default() -> Self {
        use ModuleName::*;
        use ToolName as T;
        let modules = vec![
            module(
                InteractiveMode,
                "Greet the operator, answer questions and wait for a segmentation request.",
                "session start, or the operator stopped tracking",
                "a segment call was issued",
                &[T::Segment],
                vec![
                    ex("hello", json!({"text_response": "Hello. Tell me what to segment."})),
                    ex(
                        "segment the surgical instruments",
                        json!({"action": {"tool": "segment", "args": {"query": "surgical instruments"}}, "text_response": "Segmenting surgical instruments."}),
                    ),
                ],
            ),
            module(
                Segmentation,
                "Candidate masks are being produced for the current query.",
                "a segment call was issued",
                "a page of candidates is on display",
                &[T::Segment],
                vec![],
            ),
            module(
                SelectMask,
                "Up to six numbered candidates are displayed. Map the operator's choice to an index, or advance the page when none fit.",
                "a page of candidates is on display",
                "a candidate was selected, or a new query was issued",
                &[T::Select, T::NextPage, T::Segment],
                vec![
                    ex(
                        "the third one, label it suction",
                        json!({"action": {"tool": "select", "args": {"index": 3, "label": "suction"}}, "text_response": "Selected candidate 3 as suction."}),
                    ),
                    ex("none of these", json!({"action": {"tool": "next_page", "args": {}}, "text_response": "Here are more candidates."})),
                ],
            ),
            module(
                Tracking,
                "Selected objects are tracked over time. The operator may label them, ask for the tip of an instrument, or stop.",
                "a candidate was selected",
                "stop was called, or a new query was issued",
                &[T::Segment, T::Track, T::Stop],
                vec![
                    ex(
                        "segment the tip of suction",
                        json!({"action": {"tool": "segment", "args": {"query": "tip of suction"}}, "text_response": "Segmenting tip of suction."}),
                    ),
                    ex("stop tracking", json!({"action": {"tool": "stop", "args": {}}, "text_response": "Stopped tracking."})),
                ],
            ),
        ];
        let tools = vec![
            tool(T::Segment, "Produce candidate masks for a text query on the current frame.", &[("query", "string")]),
            tool(T::Select, "Accept candidate `index` (1-based) from the displayed page, optionally naming it.", &[("index", "integer"), ("label", "string, optional")]),
            tool(T::NextPage, "Show the next page of candidates.", &[]),
            tool(T::Track, "Assign a label to the most recently selected object and keep tracking it.", &[("label", "string")]),
            tool(T::Stop, "Stop tracking and return to interactive mode.", &[]),
        ];
        WorkflowConfig {
            description: "You are a surgical perception assistant. You turn spoken commands into calls to segmentation, tracking and depth tools, and reply briefly.".into(),
            modules,
            tools,
            examples: vec![
                ex("how are you", json!({"text_response": "Ready. Tell me what to segment."})),
                ex("the first one", json!({"action": {"tool": "select", "args": {"index": 1}}, "text_response": "Selected candidate 1."})),
            ],
            rules: vec![
                "Reply with exactly one JSON object and nothing else.".into(),
                "The object has a required string field \"text_response\" and an optional field \"action\" of the form {\"tool\": name, \"args\": object}.".into(),
                "Only call tools allowed in the current module.".into(),
                "Candidate indices are 1-based positions on the displayed page.".into(),
                "Keep text responses to one short sentence.".into(),
            ],
        }
    }
}

/// The serialized prompt `{M, T, E, R}` plus the module table it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SystemPrompt {
    pub modules: Vec<WorkflowModule>,
    pub tools: Vec<ToolDescriptor>,
    pub in_context_examples: Vec<Example>,
    pub rules: Vec<String>,
    #[serde(skip)]
    text: String,
    #[serde(skip)]
    allowed: Vec<(ModuleName, BTreeSet<ToolName>)>,
}

impl SystemPrompt {
    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn allowed_tools(&self, module: ModuleName) -> &BTreeSet<ToolName> {
        &self
            .allowed
            .iter()
            .find(|(m, _)| *m == module)
            .expect("every module present after validation")
            .1
    }

    pub fn module(&self, name: ModuleName) -> &WorkflowModule {
        self.modules.iter().find(|m| m.name == name).expect("validated")
    }
}

pub fn build_system_prompt(config: &WorkflowConfig) -> Result<SystemPrompt, AgentError> {
    let names: Vec<ModuleName> = config.modules.iter().map(|m| m.name).collect();
    if names != ModuleName::ALL {
        return Err(AgentError::Config(format!(
            "modules must be {:?} in that order, got {names:?}",
            ModuleName::ALL
        )));
    }
    let mut registered = BTreeSet::new();
    for t in &config.tools {
        let name = ToolName::parse(&t.name).ok_or_else(|| AgentError::Config(format!("unknown tool descriptor {}", t.name)))?;
        if !registered.insert(name) {
            return Err(AgentError::Config(format!("tool {} registered twice", t.name)));
        }
    }
    let mut allowed = Vec::new();
    for m in &config.modules {
        let mut set = BTreeSet::new();
        for t in &m.allowed_tools {
            match ToolName::parse(t).filter(|n| registered.contains(n)) {
                Some(n) => {
                    set.insert(n);
                }
                None => return Err(AgentError::Config(format!("module {} references unregistered tool {t}", m.name))),
            }
        }
        allowed.push((m.name, set));
    }

    let mut text = String::new();
    text.push_str("# System\n");
    text.push_str(&config.description);
    text.push_str("\n\n# Modules\n");
    for m in &config.modules {
        text.push_str(&format!(
            "## {}\n{}\nentry: {}\nexit: {}\nallowed tools: {}\n",
            m.name,
            m.module_prompt,
            m.entry_criteria,
            m.exit_criteria,
            m.allowed_tools.join(", ")
        ));
        for e in &m.examples {
            text.push_str(&format!("user: {}\nassistant: {}\n", e.user, e.response));
        }
    }
    text.push_str("\n# Tools\n");
    for t in &config.tools {
        let args: Vec<String> = t.args.iter().map(|(a, ty)| format!("{a}: {ty}")).collect();
        text.push_str(&format!("- {}({}): {}\n", t.name, args.join(", "), t.description));
    }
    text.push_str("\n# Examples\n");
    for e in &config.examples {
        text.push_str(&format!("user: {}\nassistant: {}\n", e.user, e.response));
    }
    text.push_str("\n# Rules\n");
    for r in &config.rules {
        text.push_str(&format!("- {r}\n"));
    }

    Ok(SystemPrompt {
        modules: config.modules.clone(),
        tools: config.tools.clone(),
        in_context_examples: config.examples.clone(),
        rules: config.rules.clone(),
        text,
        allowed,
    })
}

/// Parses a raw reply and checks it against the module's allowed tools.
pub fn parse_agent_response(raw: &str, module: ModuleName, prompt: &SystemPrompt) -> Result<AgentResponse, AgentError> {
    let trimmed = raw.trim();
    let value: Value = serde_json::from_str(trimmed).map_err(|e| AgentError::Parse(e.to_string()))?;
    // Name the tool before full decoding so unknown names read clearly.
    if let Some(name) = value.pointer("/action/tool").and_then(Value::as_str) {
        if ToolName::parse(name).is_none() {
            return Err(AgentError::Parse(format!("unknown tool {name:?}")));
        }
    }
    let response: AgentResponse = serde_json::from_value(value).map_err(|e| AgentError::Parse(e.to_string()))?;
    if let Some(action) = &response.action {
        validate_args(action)?;
        if !prompt.allowed_tools(module).contains(&action.name()) {
            return Err(AgentError::PolicyViolation {
                tool: action.name(),
                module,
            });
        }
    }
    Ok(response)
}

fn validate_args(action: &ToolCall) -> Result<(), AgentError> {
    let bad = |m: &str| Err(AgentError::Parse(m.into()));
    match action {
        ToolCall::Segment(a) if a.query.trim().is_empty() => bad("segment query is empty"),
        ToolCall::Select(a) if a.index == 0 => bad("select index is 1-based"),
        ToolCall::Track(a) if a.label.trim().is_empty() => bad("track label is empty"),
        _ => Ok(()),
    }
}

/// What a segmentation query is for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmentTarget {
    Object { query: String },
    /// Tip of the object carrying this label.
    Tip { of: String, query: String },
}

impl SegmentTarget {
    pub fn from_query(query: &str) -> Self {
        let q = query.trim().to_lowercase();
        let words: Vec<&str> = q.split_whitespace().collect();
        let of = match words.as_slice() {
            ["tip", "of", "the", rest @ ..] | ["tip", "of", rest @ ..] if !rest.is_empty() => Some(rest.join(" ")),
            [rest @ .., "tip"] if !rest.is_empty() => Some(rest.join(" ")),
            _ => None,
        };
        match of {
            Some(of) => SegmentTarget::Tip { of, query: q },
            None => SegmentTarget::Object { query: q },
        }
    }

    pub fn query(&self) -> &str {
        match self {
            SegmentTarget::Object { query } | SegmentTarget::Tip { query, .. } => query,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSettings {
    /// Exchanges sent verbatim; older ones are summarized in one line.
    pub history_limit: usize,
}

impl Default for AgentSettings {
    fn default() -> Self {
        Self { history_limit: 20 }
    }
}

/// A selected object as the agent knows it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub target: SegmentTarget,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub module: ModuleName,
    pub history: Vec<ChatTurn>,
    pub page: CandidatePageState,
    /// Page shown to the operator and not yet acted on.
    pub page_displayed: bool,
    pub target: Option<SegmentTarget>,
    /// Frame the current candidates were computed on.
    pub page_frame: usize,
    pub selections: Vec<Selection>,
}

impl AgentState {
    pub fn new(page_size: usize) -> Self {
        Self {
            module: ModuleName::InteractiveMode,
            history: Vec::new(),
            page: CandidatePageState::empty(page_size),
            page_displayed: false,
            target: None,
            page_frame: 0,
            selections: Vec::new(),
        }
    }

    /// Segmentation with a page on display becomes SelectMask.
    pub fn settle(&mut self) {
        if self.module == ModuleName::Segmentation && self.page_displayed && !self.page.page().is_empty() {
            self.module = ModuleName::SelectMask;
        }
    }

    pub fn labels(&self) -> Vec<String> {
        self.selections.iter().filter_map(|s| s.label.clone()).collect()
    }

    /// Textual system inputs for the current step.
    pub fn system_inputs(&self, frame: usize) -> Value {
        json!({
            "module": self.module.as_str(),
            "frame": frame,
            "candidates_on_page": self.page.page().len(),
            "page_index": self.page.page_index,
            "page_count": self.page.page_count(),
            "labels": self.labels(),
            "target": self.target.as_ref().map(SegmentTarget::query),
        })
    }

    /// Recent history, with older exchanges folded into one summary turn.
    pub fn history_window(&self, limit: usize) -> Vec<ChatTurn> {
        if self.history.len() <= limit {
            return self.history.clone();
        }
        let cut = self.history.len() - limit;
        let older = &self.history[..cut];
        let queries: Vec<&str> = older.iter().rev().take(3).map(|t| t.q.as_str()).collect();
        let mut out = vec![ChatTurn {
            q: "(summary)".into(),
            response: format!("{cut} earlier exchanges omitted; most recent of them: {}", queries.join(" | ")),
        }];
        out.extend_from_slice(&self.history[cut..]);
        out
    }
}

/// Backends and per-step inputs the agent needs.
pub struct AgentContext<'a> {
    pub llm: &'a dyn LanguageModel,
    pub segmenter: &'a dyn TextSegmenter,
    pub prompt: &'a SystemPrompt,
    pub candidates: &'a CandidateConfig,
    pub settings: &'a AgentSettings,
    pub frame: FrameRef,
    pub frame_area: usize,
}

/// Side effects for the session to act on.
#[derive(Debug, Clone, PartialEq)]
pub enum AgentEffect {
    CandidatesPage {
        target: SegmentTarget,
        page_index: usize,
        page_count: usize,
        degraded: bool,
        candidates: Vec<ScoredCandidate>,
        failures: usize,
    },
    PagesExhausted,
    MaskSelected {
        index: usize,
        /// Frame the candidate mask belongs to.
        frame: usize,
        candidate: ScoredCandidate,
        target: SegmentTarget,
        label: Option<String>,
    },
    LabelAssigned {
        /// Position in `AgentState::selections`.
        selection: usize,
        label: String,
    },
    Stopped,
    ToolFailed(String),
    PolicyViolation { tool: ToolName },
    LlmUnavailable(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRow {
    pub q: String,
    pub response: String,
    pub module_before: ModuleName,
    pub module_after: ModuleName,
    pub t_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub query: String,
    /// The response as acted on: the action is absent when it was refused.
    pub response: AgentResponse,
    /// Tool that actually ran.
    pub executed: Option<ToolName>,
    pub module_before: ModuleName,
    pub module_after: ModuleName,
    pub effects: Vec<AgentEffect>,
    pub elapsed_ms: f64,
}

impl StepOutcome {
    pub fn transcript(&self, t_ms: u64) -> TranscriptRow {
        TranscriptRow {
            q: self.query.clone(),
            response: self.response.to_wire(),
            module_before: self.module_before,
            module_after: self.module_after,
            t_ms,
        }
    }
}

pub const APOLOGY: &str = "Sorry, I could not process that. Please say it again.";
pub const LLM_DEGRADED: &str = "The language service is not responding. Please repeat the command shortly.";
const REPAIR: &str = "Your previous reply was not a valid JSON object of the form {\"action\"?: {\"tool\", \"args\"}, \"text_response\"}. Reply again with only that object.";

fn ask(llm: &dyn LanguageModel, req: ChatRequest) -> Result<String, BackendError> {
    match llm.chat(req.clone()) {
        Err(e) if e.is_timeout() => {
            warn!(error = %e, "language model timed out, retrying once");
            llm.chat(req)
        }
        other => other,
    }
}

/// One exchange: query the model, validate, execute, transition.
pub fn step_transition(state: &mut AgentState, query: &str, ctx: &AgentContext<'_>) -> StepOutcome {
    let start = Instant::now();
    state.settle();
    let module_before = state.module;
    let mut effects = Vec::new();

    let request = ChatRequest {
        query: query.to_owned(),
        system_inputs: state.system_inputs(ctx.frame.index),
        system_prompt: ctx.prompt.text().to_owned(),
        history: state.history_window(ctx.settings.history_limit),
        repair: None,
    };

    let parsed: Result<AgentResponse, AgentError> = match ask(ctx.llm, request.clone()) {
        Err(e) => Err(e.into()),
        Ok(raw) => match parse_agent_response(&raw, module_before, ctx.prompt) {
            Err(AgentError::Parse(why)) => {
                debug!(%why, "unparseable reply, asking for a repair");
                let repair = ChatRequest {
                    repair: Some(format!("{REPAIR} Problem: {why}")),
                    ..request
                };
                match ask(ctx.llm, repair) {
                    Err(e) => Err(e.into()),
                    Ok(raw) => parse_agent_response(&raw, module_before, ctx.prompt),
                }
            }
            other => other,
        },
    };

    let (response, executed) = match parsed {
        Ok(response) => match response.action.clone() {
            None => (response, None),
            Some(call) => {
                let name = call.name();
                match execute(state, call, ctx, &mut effects) {
                    Ok(()) => (response, Some(name)),
                    Err(message) => {
                        effects.push(AgentEffect::ToolFailed(message.clone()));
                        (
                            AgentResponse {
                                action: response.action,
                                text_response: message,
                            },
                            None,
                        )
                    }
                }
            }
        },
        Err(AgentError::PolicyViolation { tool, module }) => {
            warn!(%tool, %module, "refused tool call outside the module's allowed set");
            effects.push(AgentEffect::PolicyViolation { tool });
            (AgentResponse::text(format!("I can't do {tool} right now.")), None)
        }
        Err(AgentError::Backend(e)) => {
            effects.push(AgentEffect::LlmUnavailable(e.to_string()));
            (AgentResponse::text(LLM_DEGRADED), None)
        }
        Err(e) => {
            warn!(error = %e, "agent reply unusable after repair");
            (AgentResponse::text(APOLOGY), None)
        }
    };

    state.history.push(ChatTurn {
        q: query.to_owned(),
        response: response.to_wire(),
    });
    StepOutcome {
        query: query.to_owned(),
        response,
        executed,
        module_before,
        module_after: state.module,
        effects,
        elapsed_ms: start.elapsed().as_secs_f64() * 1000.0,
    }
}

fn execute(state: &mut AgentState, call: ToolCall, ctx: &AgentContext<'_>, effects: &mut Vec<AgentEffect>) -> Result<(), String> {
    match call {
        ToolCall::Segment(SegmentArgs { query }) => {
            let target = SegmentTarget::from_query(&query);
            if let SegmentTarget::Tip { of, .. } = &target {
                if !state.selections.iter().any(|s| s.label.as_deref() == Some(of.as_str())) {
                    return Err(format!("No tracked object is labelled {of}. Select and label it first."));
                }
            }
            let expanded = expand_query(target.query(), ctx.llm, ctx.candidates.expansion_count).map_err(|e| e.to_string())?;
            let collection =
                collect_candidates(&expanded.prompts, &ctx.frame, ctx.segmenter).map_err(|e| format!("Segmentation failed: {e}"))?;
            let page = rank_and_dedup(collection.candidates, ctx.candidates, ctx.frame_area);
            if page.all_candidates.is_empty() {
                return Err(format!("No candidates found for {}. Try another description.", target.query()));
            }
            effects.push(AgentEffect::CandidatesPage {
                target: target.clone(),
                page_index: page.page_index,
                page_count: page.page_count(),
                degraded: expanded.degraded,
                candidates: page.page().to_vec(),
                failures: collection.failures.len(),
            });
            state.page = page;
            state.page_displayed = true;
            state.target = Some(target);
            state.page_frame = ctx.frame.index;
            state.module = ModuleName::Segmentation;
            Ok(())
        }
        ToolCall::Select(SelectArgs { index, label }) => {
            let candidate = state
                .page
                .select(index)
                .cloned()
                .ok_or_else(|| format!("There is no candidate {index} on this page."))?;
            let target = state.target.clone().ok_or("Nothing has been segmented yet.")?;
            let label = match (&target, label) {
                (_, Some(l)) => Some(l),
                (SegmentTarget::Tip { of, .. }, None) => Some(format!("{of} tip")),
                (_, None) => None,
            };
            effects.push(AgentEffect::MaskSelected {
                index,
                frame: state.page_frame,
                candidate,
                target: target.clone(),
                label: label.clone(),
            });
            state.selections.push(Selection { target, label });
            state.page = CandidatePageState::empty(state.page.page_size);
            state.page_displayed = false;
            state.target = None;
            state.module = ModuleName::Tracking;
            Ok(())
        }
        ToolCall::NextPage(_) => {
            match next_page(&state.page) {
                PageAdvance::Page(page) => {
                    effects.push(AgentEffect::CandidatesPage {
                        target: state.target.clone().expect("page implies a target"),
                        page_index: page.page_index,
                        page_count: page.page_count(),
                        degraded: false,
                        candidates: page.page().to_vec(),
                        failures: 0,
                    });
                    state.page = page;
                }
                PageAdvance::Exhausted => {
                    effects.push(AgentEffect::PagesExhausted);
                    state.page = CandidatePageState::empty(state.page.page_size);
                    state.page_displayed = false;
                    state.module = ModuleName::Segmentation;
                }
            }
            Ok(())
        }
        ToolCall::Track(TrackArgs { label }) => {
            let selection = state.selections.len().checked_sub(1).ok_or("Nothing is selected to track.")?;
            state.selections[selection].label = Some(label.clone());
            effects.push(AgentEffect::LabelAssigned { selection, label });
            state.module = ModuleName::Tracking;
            Ok(())
        }
        ToolCall::Stop(_) => {
            effects.push(AgentEffect::Stopped);
            state.selections.clear();
            state.page = CandidatePageState::empty(state.page.page_size);
            state.page_displayed = false;
            state.target = None;
            state.module = ModuleName::InteractiveMode;
            Ok(())
        }
    }
}

/// Operator-facing phrase for selecting a candidate by position.
pub fn ordinal_utterance(index: usize) -> String {
    const WORDS: [&str; 6] = ["first", "second", "third", "fourth", "fifth", "sixth"];
    match WORDS.get(index.wrapping_sub(1)) {
        Some(w) => format!("the {w} one"),
        None => format!("number {index}"),
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::{Arc, Mutex};

    use super::*;
    use crate::backends::mock::{MockBackends, MockConfig, MockLlm};
    use crate::backends::scene::{generate_synthetic_scene, SceneParams};
    use crate::backends::{LlmRequest, LlmResponse};

    fn mock() -> MockBackends {
        let scene = generate_synthetic_scene(4, &SceneParams::default()).unwrap();
        MockBackends::new(Arc::new(scene), MockConfig::default())
    }

    fn ctx<'a>(llm: &'a dyn LanguageModel, seg: &'a dyn TextSegmenter, prompt: &'a SystemPrompt) -> AgentContext<'a> {
        static CANDIDATES: std::sync::OnceLock<CandidateConfig> = std::sync::OnceLock::new();
        static SETTINGS: std::sync::OnceLock<AgentSettings> = std::sync::OnceLock::new();
        AgentContext {
            llm,
            segmenter: seg,
            prompt,
            candidates: CANDIDATES.get_or_init(CandidateConfig::default),
            settings: SETTINGS.get_or_init(AgentSettings::default),
            frame: FrameRef::index(0),
            frame_area: 160 * 120,
        }
    }

    #[test]
    fn prompt_lists_modules_in_order() {
        let p = build_system_prompt(&WorkflowConfig::default()).unwrap();
        let pos: Vec<usize> = ModuleName::ALL.iter().map(|m| p.text().find(&format!("## {m}")).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(p.text().contains("JSON"));
        let again = build_system_prompt(&WorkflowConfig::default()).unwrap();
        assert_eq!(p.text(), again.text());
    }

    #[test]
    fn prompt_config_errors() {
        let mut c = WorkflowConfig::default();
        c.modules.pop();
        assert!(matches!(build_system_prompt(&c), Err(AgentError::Config(_))));
        let mut c = WorkflowConfig::default();
        c.modules[0].allowed_tools.push("teleport".into());
        assert!(matches!(build_system_prompt(&c), Err(AgentError::Config(_))));
        let mut c = WorkflowConfig::default();
        c.tools.retain(|t| t.name != "stop");
        assert!(matches!(build_system_prompt(&c), Err(AgentError::Config(_))));
    }

    #[test]
    fn parses_wire_format() {
        let p = build_system_prompt(&WorkflowConfig::default()).unwrap();
        let raw = r#"{"action":{"tool":"segment","args":{"query":"surgical instruments"}},"text_response":"Segmenting now."}"#;
        let r = parse_agent_response(raw, ModuleName::Segmentation, &p).unwrap();
        assert_eq!(r.action, Some(ToolCall::Segment(SegmentArgs { query: "surgical instruments".into() })));
        assert_eq!(r.to_wire(), raw);

        let r = parse_agent_response(r#"{"text_response":"hi"}"#, ModuleName::Tracking, &p).unwrap();
        assert!(r.action.is_none());

        let raw = r#"{"action":{"tool":"track","args":{"label":"x"}},"text_response":""}"#;
        assert!(matches!(
            parse_agent_response(raw, ModuleName::InteractiveMode, &p),
            Err(AgentError::PolicyViolation { tool: ToolName::Track, .. })
        ));
        for bad in [
            "not json",
            r#"{"text_response":"x","extra":1}"#,
            r#"{"action":{"tool":"fly","args":{}},"text_response":""}"#,
            r#"{"action":{"tool":"select","args":{"index":"two"}},"text_response":""}"#,
            r#"{"action":{"tool":"select","args":{"index":0}},"text_response":""}"#,
            r#"{"action":{"tool":"stop","args":{"now":true}},"text_response":""}"#,
            r#"{"action":{"tool":"stop","args":{}}}"#,
        ] {
            assert!(matches!(parse_agent_response(bad, ModuleName::Tracking, &p), Err(AgentError::Parse(_))), "{bad}");
        }
    }

    #[test]
    fn tip_targets() {
        assert_eq!(
            SegmentTarget::from_query("tip of the Suction"),
            SegmentTarget::Tip { of: "suction".into(), query: "tip of the suction".into() }
        );
        assert_eq!(SegmentTarget::from_query("forceps tip"), SegmentTarget::Tip { of: "forceps".into(), query: "forceps tip".into() });
        assert!(matches!(SegmentTarget::from_query("tip"), SegmentTarget::Object { .. }));
    }

    #[test]
    fn happy_path_reaches_tracking() {
        let m = mock();
        let p = build_system_prompt(&WorkflowConfig::default()).unwrap();
        let c = ctx(&m, &m, &p);
        let mut s = AgentState::new(6);
        let script = [
            ("hello", ModuleName::InteractiveMode),
            ("segment the surgical instruments", ModuleName::Segmentation),
            ("the first one, label it suction", ModuleName::Tracking),
            ("segment the tip of suction", ModuleName::Segmentation),
            ("the first one", ModuleName::Tracking),
        ];
        for (q, want) in script {
            let o = step_transition(&mut s, q, &c);
            assert_eq!(o.module_after, want, "{q}: {:?}", o.response);
        }
        assert_eq!(s.history.len(), 5);
        assert_eq!(s.selections[1].label.as_deref(), Some("suction tip"));
    }

    #[test]
    fn select_and_reject() {
        let m = mock();
        let p = build_system_prompt(&WorkflowConfig::default()).unwrap();
        let c = ctx(&m, &m, &p);
        let mut s = AgentState::new(6);
        step_transition(&mut s, "segment the surgical instruments", &c);
        let o = step_transition(&mut s, "none of these", &c);
        assert_eq!(o.module_before, ModuleName::SelectMask);
        assert_eq!(o.executed, Some(ToolName::NextPage));
        // a single page: advancing exhausts it and asks for a new query
        assert_eq!(o.effects, vec![AgentEffect::PagesExhausted]);
        assert_eq!(o.module_after, ModuleName::Segmentation);

        step_transition(&mut s, "segment the surgical instruments", &c);
        let o = step_transition(&mut s, "the third one, label it suction", &c);
        assert_eq!(o.response.action, Some(ToolCall::Select(SelectArgs { index: 3, label: Some("suction".into()) })));
        assert_eq!(o.module_after, ModuleName::Tracking);

        let o = step_transition(&mut s, "segment the tip of forceps", &c);
        assert!(matches!(o.effects[..], [AgentEffect::ToolFailed(_)]));
        assert_eq!(o.module_after, ModuleName::Tracking);
    }

    #[test]
    fn refuses_disallowed_tools() {
        let m = mock();
        let p = build_system_prompt(&WorkflowConfig::default()).unwrap();
        let c = ctx(&m, &m, &p);
        let mut s = AgentState::new(6);
        let o = step_transition(&mut s, "stop", &c);
        assert_eq!(o.executed, None);
        assert_eq!(o.effects, vec![AgentEffect::PolicyViolation { tool: ToolName::Stop }]);
        assert_eq!(o.module_after, ModuleName::InteractiveMode);
        assert_eq!(s.history.len(), 1);
    }

    /// Replies from a fixed queue; counts calls.
    struct Scripted {
        replies: Mutex<Vec<Result<String, BackendError>>>,
        calls: AtomicUsize,
        repairs: AtomicUsize,
    }

    impl Scripted {
        fn new(mut replies: Vec<Result<String, BackendError>>) -> Self {
            replies.reverse();
            Self {
                replies: Mutex::new(replies),
                calls: AtomicUsize::new(0),
                repairs: AtomicUsize::new(0),
            }
        }
    }

    impl LanguageModel for Scripted {
        fn complete(&self, req: &LlmRequest) -> Result<LlmResponse, BackendError> {
            match req {
                LlmRequest::Chat(c) => {
                    self.calls.fetch_add(1, Ordering::SeqCst);
                    if c.repair.is_some() {
                        self.repairs.fetch_add(1, Ordering::SeqCst);
                    }
                    let r = self.replies.lock().unwrap().pop().expect("scripted reply");
                    r.map(|text| LlmResponse::Chat { text })
                }
                LlmRequest::Expand { .. } => Ok(LlmResponse::Expand { alternatives: vec![] }),
            }
        }
    }

    fn timeout() -> BackendError {
        BackendError::Timeout {
            kind: crate::backends::BackendKind::Llm,
            timeout_ms: 10,
        }
    }

    #[test]
    fn repairs_once_then_apologizes() {
        let m = mock();
        let p = build_system_prompt(&WorkflowConfig::default()).unwrap();
        let llm = Scripted::new(vec![Ok("oops".into()), Ok(r#"{"text_response":"fixed"}"#.into())]);
        let c = ctx(&llm, &m, &p);
        let mut s = AgentState::new(6);
        let o = step_transition(&mut s, "hello", &c);
        assert_eq!(o.response.text_response, "fixed");
        assert_eq!(llm.repairs.load(Ordering::SeqCst), 1);

        let llm = Scripted::new(vec![Ok("oops".into()), Ok("still bad".into())]);
        let c = ctx(&llm, &m, &p);
        let o = step_transition(&mut s, "hello", &c);
        assert_eq!(o.response.text_response, APOLOGY);
        assert_eq!(llm.calls.load(Ordering::SeqCst), 2);
        assert_eq!(s.history.len(), 2);
    }

    #[test]
    fn timeout_retries_once_then_degrades() {
        let m = mock();
        let p = build_system_prompt(&WorkflowConfig::default()).unwrap();
        let llm = Scripted::new(vec![Err(timeout()), Ok(r#"{"text_response":"ok"}"#.into())]);
        let c = ctx(&llm, &m, &p);
        let mut s = AgentState::new(6);
        assert_eq!(step_transition(&mut s, "hello", &c).response.text_response, "ok");

        let llm = Scripted::new(vec![Err(timeout()), Err(timeout())]);
        let c = ctx(&llm, &m, &p);
        let o = step_transition(&mut s, "segment the tools", &c);
        assert_eq!(o.response.text_response, LLM_DEGRADED);
        assert_eq!(o.module_after, ModuleName::InteractiveMode);
        assert_eq!(llm.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn history_window_summarizes() {
        let mut s = AgentState::new(6);
        for i in 0..25 {
            s.history.push(ChatTurn { q: format!("q{i}"), response: String::new() });
        }
        let w = s.history_window(20);
        assert_eq!(w.len(), 21);
        assert!(w[0].response.starts_with("5 earlier exchanges"));
        assert_eq!(w[1].q, "q5");
        assert_eq!(s.history_window(30).len(), 25);
    }

    #[test]
    fn ordinals_round_trip_through_mock() {
        for i in 1..=8 {
            let reply = MockLlm.chat(ChatRequest {
                query: ordinal_utterance(i),
                system_inputs: json!({}),
                system_prompt: String::new(),
                history: vec![],
                repair: None,
            });
            let v: Value = serde_json::from_str(&reply.unwrap()).unwrap();
            assert_eq!(v["action"]["args"]["index"], json!(i));
        }
    }
}
