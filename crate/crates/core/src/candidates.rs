//! Candidate masks: query expansion, collection, ranking, deduplication and
//! display paging.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::backends::{BackendError, FrameRef, LanguageModel, SegmentTextRequest, TextSegmenter};
use crate::mask::{iou, Mask};

#[derive(Debug, thiserror::Error)]
pub enum CandidateError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("no prompts to run")]
    NoPrompts,
    #[error("every prompt failed; last error: {0}")]
    BackendUnavailable(BackendError),
    #[error("invalid candidate: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredCandidate {
    pub mask: Mask,
    pub score: f64,
    pub source_prompt: String,
    pub backend_id: String,
}

impl ScoredCandidate {
    pub fn new(mask: Mask, score: f64, source_prompt: impl Into<String>, backend_id: impl Into<String>) -> Result<Self, CandidateError> {
        let c = Self {
            mask,
            score,
            source_prompt: source_prompt.into(),
            backend_id: backend_id.into(),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CandidateError> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(CandidateError::Invalid(format!("score {} outside [0, 1]", self.score)));
        }
        if self.mask.is_empty() {
            return Err(CandidateError::Invalid("mask is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CandidateConfig {
    /// Two masks overlap when their IoU exceeds this.
    pub overlap_threshold: f64,
    pub page_size: usize,
    pub expansion_count: usize,
    /// Masks covering more than this fraction of the frame are penalised.
    pub background_area_fraction: f64,
    pub background_penalty: f64,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        Self {
            overlap_threshold: 0.10,
            page_size: 6,
            expansion_count: 3,
            background_area_fraction: 0.8,
            background_penalty: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpandedQuery {
    /// Original query first, then distinct alternatives.
    pub prompts: Vec<String>,
    /// The language model failed and only the original query is used.
    pub degraded: bool,
}

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

pub fn expand_query(query: &str, llm: &dyn LanguageModel, count: usize) -> Result<ExpandedQuery, CandidateError> {
    let original = normalize(query);
    if original.is_empty() {
        return Err(CandidateError::EmptyQuery);
    }
    let mut prompts = vec![original.clone()];
    let degraded = match llm.expand(&original, count) {
        Ok(alternatives) => {
            for alt in alternatives.iter().map(|a| normalize(a)) {
                if prompts.len() > count {
                    break;
                }
                if !alt.is_empty() && !prompts.contains(&alt) {
                    prompts.push(alt);
                }
            }
            false
        }
        Err(e) => {
            warn!(error = %e, "query expansion failed, using the original query only");
            true
        }
    };
    Ok(ExpandedQuery { prompts, degraded })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptFailure {
    pub prompt: String,
    pub error: BackendError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateCollection {
    pub candidates: Vec<ScoredCandidate>,
    pub failures: Vec<PromptFailure>,
}

/// Runs every prompt against the segmenter concurrently and concatenates the
/// results in prompt order. Failing prompts are recorded and skipped.
pub fn collect_candidates(
    prompts: &[String],
    frame: &FrameRef,
    seg: &dyn TextSegmenter,
) -> Result<CandidateCollection, CandidateError> {
    if prompts.is_empty() {
        return Err(CandidateError::NoPrompts);
    }
    let results: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = prompts
            .iter()
            .map(|prompt| {
                scope.spawn(move || {
                    seg.segment_text(&SegmentTextRequest {
                        prompt: prompt.clone(),
                        frame: frame.clone(),
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("segmenter thread panicked"))
            .collect()
    });

    let mut out = CandidateCollection {
        candidates: Vec::new(),
        failures: Vec::new(),
    };
    for (prompt, result) in prompts.iter().zip(results) {
        match result {
            Ok(resp) => {
                for mut c in resp.candidates {
                    if let Err(e) = c.validate() {
                        warn!(%prompt, error = %e, "dropping invalid candidate");
                        continue;
                    }
                    c.source_prompt = prompt.clone();
                    out.candidates.push(c);
                }
            }
            Err(error) => {
                warn!(%prompt, %error, "prompt failed");
                out.failures.push(PromptFailure {
                    prompt: prompt.clone(),
                    error,
                });
            }
        }
    }
    if out.failures.len() == prompts.len() {
        let last = out.failures.pop().expect("non-empty").error;
        return Err(CandidateError::BackendUnavailable(last));
    }
    Ok(out)
}

/// Ranked, deduplicated candidates shown a page at a time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePageState {
    pub all_candidates: Vec<ScoredCandidate>,
    pub page_size: usize,
    pub page_index: usize,
}

impl CandidatePageState {
    pub fn empty(page_size: usize) -> Self {
        Self {
            all_candidates: Vec::new(),
            page_size: page_size.max(1),
            page_index: 0,
        }
    }

    pub fn page(&self) -> &[ScoredCandidate] {
        let start = (self.page_index * self.page_size).min(self.all_candidates.len());
        let end = (start + self.page_size).min(self.all_candidates.len());
        &self.all_candidates[start..end]
    }

    pub fn page_count(&self) -> usize {
        self.all_candidates.len().div_ceil(self.page_size)
    }

    /// 1-based position on the current page.
    pub fn select(&self, ordinal: usize) -> Option<&ScoredCandidate> {
        ordinal.checked_sub(1).and_then(|i| self.page().get(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PageAdvance {
    Page(CandidatePageState),
    /// No further pages; the operator should refine the query.
    Exhausted,
}

/// Score after the large-mask penalty.
pub fn adjusted_score(candidate: &ScoredCandidate, config: &CandidateConfig, frame_area: usize) -> f64 {
    let covers = candidate.mask.area() as f64 > config.background_area_fraction * frame_area as f64;
    if covers {
        candidate.score * config.background_penalty
    } else {
        candidate.score
    }
}

/// Greedy selection in ranked order: a candidate is kept iff its IoU with
/// every kept candidate is at most the overlap threshold.
///
/// Rank is adjusted score descending, then area descending, then input order.
pub fn rank_and_dedup(candidates: Vec<ScoredCandidate>, config: &CandidateConfig, frame_area: usize) -> CandidatePageState {
    let mut ranked: Vec<(f64, usize, ScoredCandidate)> = candidates
        .into_iter()
        .map(|c| (adjusted_score(&c, config, frame_area), c.mask.area(), c))
        .collect();
    // stable sort keeps input order among full ties
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(b.1.cmp(&a.1)));

    let mut kept: Vec<ScoredCandidate> = Vec::new();
    for (_, _, c) in ranked {
        let clear = kept
            .iter()
            .all(|k| iou(&k.mask, &c.mask).is_ok_and(|v| v <= config.overlap_threshold));
        if clear {
            kept.push(c);
        }
    }
    CandidatePageState {
        all_candidates: kept,
        page_size: config.page_size.max(1),
        page_index: 0,
    }
}

pub fn next_page(state: &CandidatePageState) -> PageAdvance {
    let next = state.page_index + 1;
    if next * state.page_size >= state.all_candidates.len() {
        return PageAdvance::Exhausted;
    }
    PageAdvance::Page(CandidatePageState {
        page_index: next,
        ..state.clone()
    })
}
