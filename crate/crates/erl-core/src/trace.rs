//! Tagged reasoning-trace grammar: parsing, validation, canonical
//! serialization, retrieval-token mask spans, and reward anchors.
//!
//! A trace body is free prose interleaved with five lowercase tags:
//! `<search>`, `<information>`, `<observation>`, `<sub_answer>`,
//! `<answer>`. Round 1 is search-only; every later round runs
//! observation -> sub_answer -> (search -> information | answer).
//! Prose between tags is preserved verbatim and carries no anchors.
//!
//! All public offsets are character offsets into the canonical text
//! returned by [`Trace::serialize`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::Document;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Search,
    Information,
    Observation,
    SubAnswer,
    Answer,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; 5] = [
        SegmentKind::Search,
        SegmentKind::Information,
        SegmentKind::Observation,
        SegmentKind::SubAnswer,
        SegmentKind::Answer,
    ];

    pub fn tag_name(self) -> &'static str {
        match self {
            SegmentKind::Search => "search",
            SegmentKind::Information => "information",
            SegmentKind::Observation => "observation",
            SegmentKind::SubAnswer => "sub_answer",
            SegmentKind::Answer => "answer",
        }
    }

    pub fn open_tag(self) -> String {
        format!("<{}>", self.tag_name())
    }

    pub fn close_tag(self) -> String {
        format!("</{}>", self.tag_name())
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("unclosed <{tag}> at char {pos}")]
    UnclosedTag { tag: &'static str, pos: usize },
    #[error("nested <{inner}> inside <{outer}> at char {pos}")]
    NestedTag {
        outer: &'static str,
        inner: &'static str,
        pos: usize,
    },
    #[error("content after final answer at char {pos}")]
    ContentAfterAnswer { pos: usize },
    #[error("<{tag}> out of order at char {pos}: {rule}")]
    OutOfOrder {
        tag: &'static str,
        pos: usize,
        rule: &'static str,
    },
    #[error("round {round} has an observation but no sub_answer")]
    DanglingObservation { round: usize },
}

/// A character range in the canonical trace text. `maskable` is true only
/// for the interior of information segments (retrieved tokens).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub maskable: bool,
}

/// One tagged segment: verbatim content, its interior span, and the anchor
/// (offset of the last character of the closing tag).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub content: String,
    pub span: Span,
    pub anchor: usize,
}

/// One reasoning round. Round 1 carries only query/evidence; later rounds
/// open with observation and sub_answer. A final round before the answer
/// may have no query.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Round {
    pub observation: Option<Segment>,
    pub sub_answer: Option<Segment>,
    pub query: Option<Segment>,
    pub evidence: Option<Segment>,
    /// Documents extracted from the evidence block.
    pub evidence_docs: Vec<Document>,
}

/// Wire record for trace files (JSON Lines).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub question: String,
    pub raw_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SegBound {
    round: usize,
    kind: SegmentKind,
    close_end_byte: usize,
}

/// A parsed, validated reasoning trace.
///
/// The canonical body text is the source of truth; all structure is
/// re-derived deterministically on parse, so equality of `(question, body)`
/// implies structural equality.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    question: String,
    body: String,
    rounds: Vec<Round>,
    final_answer: Option<Segment>,
    bounds: Vec<SegBound>,
}

impl Trace {
    /// An empty trace: question only.
    pub fn new(question: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            body: String::new(),
            rounds: Vec::new(),
            final_answer: None,
            bounds: Vec::new(),
        }
    }

    /// Parse a body of tagged text against the round grammar.
    pub fn parse(question: impl Into<String>, body: &str) -> Result<Self, TraceError> {
        Self::parse_internal(question.into(), body, false)
    }

    fn parse_internal(
        question: String,
        body: &str,
        allow_dangling_observation: bool,
    ) -> Result<Self, TraceError> {
        let parsed = Parser::new(&question, body).run(allow_dangling_observation)?;
        Ok(Self {
            question,
            body: body.to_string(),
            rounds: parsed.rounds,
            final_answer: parsed.final_answer,
            bounds: parsed.bounds,
        })
    }

    /// Reparse a record read from a trace file.
    pub fn from_record(record: &TraceRecord) -> Result<Self, TraceError> {
        Self::parse(record.question.clone(), &record.raw_text)
    }

    pub fn to_record(&self) -> TraceRecord {
        TraceRecord {
            question: self.question.clone(),
            raw_text: self.body.clone(),
        }
    }

    /// Canonical text: question, a newline separator, then the body.
    /// Degenerate cases collapse to whichever side is nonempty.
    pub fn serialize(&self) -> String {
        match (self.question.is_empty(), self.body.is_empty()) {
            (true, _) => self.body.clone(),
            (_, true) => self.question.clone(),
            _ => format!("{}\n{}", self.question, self.body),
        }
    }

    pub fn question(&self) -> &str {
        &self.question
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn rounds(&self) -> &[Round] {
        &self.rounds
    }

    pub fn final_answer(&self) -> Option<&str> {
        self.final_answer.as_ref().map(|s| s.content.as_str())
    }

    pub fn segment_count(&self) -> usize {
        self.bounds.len()
    }

    pub fn last_segment_kind(&self) -> Option<SegmentKind> {
        self.bounds.last().map(|b| b.kind)
    }

    /// The most recently parsed segment and its 1-based round.
    pub fn last_segment(&self) -> Option<(usize, &Segment)> {
        let bound = self.bounds.last()?;
        if bound.kind == SegmentKind::Answer {
            return self.final_answer.as_ref().map(|s| (bound.round, s));
        }
        let round = &self.rounds[bound.round - 1];
        let seg = match bound.kind {
            SegmentKind::Search => round.query.as_ref(),
            SegmentKind::Information => round.evidence.as_ref(),
            SegmentKind::Observation => round.observation.as_ref(),
            SegmentKind::SubAnswer => round.sub_answer.as_ref(),
            SegmentKind::Answer => unreachable!(),
        };
        seg.map(|s| (bound.round, s))
    }

    /// Append a generated chunk and revalidate the whole body.
    pub fn append(&self, chunk: &str) -> Result<Self, TraceError> {
        let mut body = self.body.clone();
        body.push_str(chunk);
        Self::parse(self.question.clone(), &body)
    }

    /// Append mid-generation: a trailing observation without its
    /// sub-answer yet is tolerated, everything else stays validated.
    pub(crate) fn append_partial(&self, chunk: &str) -> Result<Self, TraceError> {
        let mut body = self.body.clone();
        body.push_str(chunk);
        Self::parse_internal(self.question.clone(), &body, true)
    }

    /// Spans covering the interior of every nonempty information segment,
    /// sorted and disjoint, flagged maskable.
    pub fn mask_spans(&self) -> Vec<Span> {
        self.rounds
            .iter()
            .filter_map(|r| r.evidence.as_ref())
            .map(|seg| seg.span)
            .filter(|s| s.start < s.end)
            .collect()
    }

    /// Anchor offsets per (1-based round, kind) for Search, Observation,
    /// SubAnswer, and Answer segments. The answer is keyed by the round
    /// count at termination.
    pub fn anchor_positions(&self) -> BTreeMap<(usize, SegmentKind), usize> {
        let mut map = BTreeMap::new();
        for (i, round) in self.rounds.iter().enumerate() {
            let idx = i + 1;
            if let Some(seg) = &round.observation {
                map.insert((idx, SegmentKind::Observation), seg.anchor);
            }
            if let Some(seg) = &round.sub_answer {
                map.insert((idx, SegmentKind::SubAnswer), seg.anchor);
            }
            if let Some(seg) = &round.query {
                map.insert((idx, SegmentKind::Search), seg.anchor);
            }
        }
        if let Some(seg) = &self.final_answer {
            map.insert((self.rounds.len(), SegmentKind::Answer), seg.anchor);
        }
        map
    }

    /// Truncate the body right after the closing tag of the given segment.
    /// Prose that followed it (part of the next generation chunk) is
    /// dropped. None when the segment is missing or the cut would leave an
    /// observation without its sub-answer.
    pub fn truncated_after(&self, round: usize, kind: SegmentKind) -> Option<Self> {
        let bound = self
            .bounds
            .iter()
            .find(|b| b.round == round && b.kind == kind)?;
        let body = &self.body[..bound.close_end_byte];
        Self::parse(self.question.clone(), body).ok()
    }

    /// Drop every round: back to the question-only trace.
    pub fn truncated_to_question(&self) -> Self {
        Self::new(self.question.clone())
    }
}

impl Serialize for Trace {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_record().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Trace {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let record = TraceRecord::deserialize(deserializer)?;
        Trace::from_record(&record).map_err(serde::de::Error::custom)
    }
}

/// Render retrieved documents as the canonical information-block content.
/// `<` in titles and texts is replaced so the block cannot close early.
pub fn format_information_block(docs: &[Document]) -> String {
    docs.iter()
        .enumerate()
        .map(|(i, d)| {
            format!(
                "Doc {}<## Title: \"{}\" ##> {}",
                i + 1,
                d.title.replace('<', "\u{27e8}"),
                d.text.replace('<', "\u{27e8}")
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Extract per-document boundaries from an information block. Blocks
/// without the `Doc N<## Title: ... ##>` marker are one document; blank
/// blocks carry none.
pub fn parse_information_docs(content: &str) -> Vec<Document> {
    let markers = find_doc_markers(content);
    if markers.is_empty() {
        let trimmed = content.trim();
        if trimmed.is_empty() {
            return Vec::new();
        }
        return vec![Document::from_text("", trimmed)];
    }
    let mut docs = Vec::with_capacity(markers.len());
    for (i, m) in markers.iter().enumerate() {
        let text_end = markers.get(i + 1).map_or(content.len(), |n| n.start);
        let text = content[m.text_start..text_end].trim();
        docs.push(Document::from_text(m.title.clone(), text));
    }
    docs
}

struct DocMarker {
    start: usize,
    text_start: usize,
    title: String,
}

fn find_doc_markers(content: &str) -> Vec<DocMarker> {
    const TITLE_OPEN: &str = "<## Title:";
    const TITLE_CLOSE: &str = "##>";
    let mut markers = Vec::new();
    let mut from = 0;
    while let Some(rel) = content[from..].find(TITLE_OPEN) {
        let open_at = from + rel;
        from = open_at + TITLE_OPEN.len();
        // the marker starts at the preceding "Doc <digits>"
        let head = &content[..open_at];
        let digits_start = head.trim_end_matches(|c: char| c.is_ascii_digit()).len();
        if digits_start == head.len() || !head[..digits_start].ends_with("Doc ") {
            continue;
        }
        let start = digits_start - "Doc ".len();
        let Some(close_rel) = content[from..].find(TITLE_CLOSE) else {
            continue;
        };
        let close_at = from + close_rel;
        let title = content[from..close_at].trim().trim_matches('"').to_string();
        markers.push(DocMarker {
            start,
            text_start: close_at + TITLE_CLOSE.len(),
            title,
        });
        from = close_at + TITLE_CLOSE.len();
    }
    markers
}

/// Grammar state over the stream of segment kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
enum St {
    Start,
    AfterSearch,
    AfterInformation,
    AfterObservation,
    AfterSubAnswer,
    Done,
}

struct Parsed {
    rounds: Vec<Round>,
    final_answer: Option<Segment>,
    bounds: Vec<SegBound>,
}

struct Parser<'a> {
    body: &'a str,
    /// canonical char offset of body byte 0
    prefix_chars: usize,
}

impl<'a> Parser<'a> {
    fn new(question: &str, body: &'a str) -> Self {
        let prefix_chars = if question.is_empty() || body.is_empty() {
            // serialize() emits no separator in these cases
            if question.is_empty() {
                0
            } else {
                question.chars().count()
            }
        } else {
            question.chars().count() + 1
        };
        Self { body, prefix_chars }
    }

    /// Canonical char offset for a body byte offset (always a char boundary).
    fn char_at(&self, byte: usize) -> usize {
        self.prefix_chars + self.body[..byte].chars().count()
    }

    fn find_next_open(&self, from: usize) -> Option<(usize, SegmentKind)> {
        SegmentKind::ALL
            .iter()
            .filter_map(|&k| {
                self.body[from..]
                    .find(&k.open_tag())
                    .map(|i| (from + i, k))
            })
            .min_by_key(|&(at, _)| at)
    }

    fn run(self, allow_dangling_observation: bool) -> Result<Parsed, TraceError> {
        let mut rounds: Vec<Round> = Vec::new();
        let mut final_answer = None;
        let mut bounds = Vec::new();
        let mut state = St::Start;
        let mut pos = 0;

        while let Some((open_at, kind)) = self.find_next_open(pos) {
            let open_tag = kind.open_tag();
            let close_tag = kind.close_tag();
            let content_start = open_at + open_tag.len();
            let close_at = match self.body[content_start..].find(&close_tag) {
                Some(rel) => content_start + rel,
                None => {
                    return Err(TraceError::UnclosedTag {
                        tag: kind.tag_name(),
                        pos: self.char_at(open_at),
                    })
                }
            };
            if let Some((inner_at, inner)) = self.find_next_open(content_start) {
                if inner_at < close_at {
                    return Err(TraceError::NestedTag {
                        outer: kind.tag_name(),
                        inner: inner.tag_name(),
                        pos: self.char_at(inner_at),
                    });
                }
            }
            let close_end = close_at + close_tag.len();
            let segment = Segment {
                kind,
                content: self.body[content_start..close_at].to_string(),
                span: Span {
                    start: self.char_at(content_start),
                    end: self.char_at(close_at),
                    maskable: kind == SegmentKind::Information,
                },
                anchor: self.char_at(close_end) - 1,
            };
            let err_pos = self.char_at(open_at);
            state = self.step(state, segment, err_pos, &mut rounds, &mut final_answer)?;
            bounds.push(SegBound {
                round: rounds.len(),
                kind,
                close_end_byte: close_end,
            });
            pos = close_end;
        }

        if state == St::AfterObservation && !allow_dangling_observation {
            return Err(TraceError::DanglingObservation {
                round: rounds.len(),
            });
        }
        Ok(Parsed {
            rounds,
            final_answer,
            bounds,
        })
    }

    fn step(
        &self,
        state: St,
        segment: Segment,
        pos: usize,
        rounds: &mut Vec<Round>,
        final_answer: &mut Option<Segment>,
    ) -> Result<St, TraceError> {
        use SegmentKind::*;
        let kind = segment.kind;
        if state == St::Done {
            return Err(TraceError::ContentAfterAnswer { pos });
        }
        let ordered = |rule| {
            Err(TraceError::OutOfOrder {
                tag: kind.tag_name(),
                pos,
                rule,
            })
        };
        match (state, kind) {
            (St::Start, Search) => {
                rounds.push(Round {
                    query: Some(segment),
                    ..Round::default()
                });
                Ok(St::AfterSearch)
            }
            (St::Start, Answer) => {
                *final_answer = Some(segment);
                Ok(St::Done)
            }
            (St::Start, _) => ordered("the first round opens with <search>"),
            (St::AfterSearch, Information) => {
                let round = rounds.last_mut().expect("search opened a round");
                round.evidence_docs = parse_information_docs(&segment.content);
                round.evidence = Some(segment);
                Ok(St::AfterInformation)
            }
            (St::AfterSearch, _) => ordered("<search> must be followed by <information>"),
            (St::AfterInformation, Observation) => {
                rounds.push(Round {
                    observation: Some(segment),
                    ..Round::default()
                });
                Ok(St::AfterObservation)
            }
            (St::AfterInformation, Answer) => {
                *final_answer = Some(segment);
                Ok(St::Done)
            }
            (St::AfterInformation, _) => {
                ordered("a round after evidence opens with <observation> or ends with <answer>")
            }
            (St::AfterObservation, SubAnswer) => {
                let round = rounds.last_mut().expect("observation opened a round");
                round.sub_answer = Some(segment);
                Ok(St::AfterSubAnswer)
            }
            (St::AfterObservation, _) => {
                ordered("<observation> must be followed by <sub_answer>")
            }
            (St::AfterSubAnswer, Search) => {
                let round = rounds.last_mut().expect("in a round");
                round.query = Some(segment);
                Ok(St::AfterSearch)
            }
            (St::AfterSubAnswer, Answer) => {
                *final_answer = Some(segment);
                Ok(St::Done)
            }
            (St::AfterSubAnswer, _) => {
                ordered("<sub_answer> must be followed by <search> or <answer>")
            }
            (St::Done, _) => unreachable!("handled above"),
        }
    }
}

/// Fluent construction of canonical bodies, validated on build.
#[derive(Debug, Clone)]
pub struct TraceBuilder {
    question: String,
    body: String,
}

impl TraceBuilder {
    pub fn new(question: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            body: String::new(),
        }
    }

    pub fn prose(mut self, text: &str) -> Self {
        self.body.push_str(text);
        self
    }

    pub fn segment(mut self, kind: SegmentKind, content: &str) -> Self {
        self.body.push_str(&kind.open_tag());
        self.body.push_str(content);
        self.body.push_str(&kind.close_tag());
        self
    }

    pub fn build(self) -> Result<Trace, TraceError> {
        Trace::parse(self.question, &self.body)
    }
}
