//! Turn grammar: parsing a raw generation into tagged segments.
//!
//! A turn is `IS? (query | answer)`. Tags match by exact, case-sensitive
//! string comparison and do not nest. Text outside recognised elements is
//! ignored for control flow but kept in [`ParsedTurn::raw`].

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Tag, TagPreset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    NoAction,
    MismatchedTags,
    MultipleActions,
}

impl InvalidReason {
    pub fn code(self) -> &'static str {
        match self {
            Self::NoAction => "no_action",
            Self::MismatchedTags => "mismatched_tags",
            Self::MultipleActions => "multiple_actions",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Action {
    Query(String),
    Answer(String),
    Invalid(InvalidReason),
}

impl Action {
    pub fn is_valid(&self) -> bool {
        !matches!(self, Action::Invalid(_))
    }
}

/// Byte ranges of one complete element inside the raw text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSpan {
    pub tag: Tag,
    pub open: Range<usize>,
    pub inner: Range<usize>,
    pub close: Range<usize>,
}

impl TagSpan {
    /// The inner range with surrounding whitespace removed.
    pub fn trimmed_inner(&self, raw: &str) -> Range<usize> {
        let inner = &raw[self.inner.clone()];
        let lead = inner.len() - inner.trim_start().len();
        let trail = inner.len() - inner.trim_end().len();
        if lead == inner.len() {
            return self.inner.start..self.inner.start;
        }
        self.inner.start + lead..self.inner.end - trail
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedTurn {
    pub is_segment: Option<String>,
    pub action: Action,
    pub raw: String,
    /// Complete elements in order of appearance.
    pub spans: Vec<TagSpan>,
    /// Index into `spans` of the element supplying `is_segment`.
    pub is_span: Option<usize>,
    /// Index into `spans` of the action element, for valid turns.
    pub action_span: Option<usize>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TagParseError {
    #[error("cannot render an invalid turn ({0})")]
    InvalidTurn(&'static str),
    #[error("segment text contains the tag string `{0}`")]
    ContentContainsTag(String),
}

const ELEMENTS: [Tag; 3] = [Tag::Is, Tag::Query, Tag::Answer];

enum Event {
    Open(Tag),
    Close(Tag),
}

fn match_tag(rest: &str, preset: &TagPreset) -> Option<(Event, usize)> {
    let mut best: Option<(Event, usize)> = None;
    for tag in ELEMENTS {
        for (s, ev) in [
            (preset.open(tag), Event::Open(tag)),
            (preset.close(tag), Event::Close(tag)),
        ] {
            if rest.starts_with(s) && best.as_ref().is_none_or(|(_, len)| *len < s.len()) {
                best = Some((ev, s.len()));
            }
        }
    }
    best
}

/// Scans `raw` for complete elements. Returns the elements and whether the
/// scan hit a nesting/termination error.
fn scan(raw: &str, preset: &TagPreset) -> (Vec<TagSpan>, bool) {
    let mut spans = Vec::new();
    let mut open: Option<(Tag, Range<usize>)> = None;
    let mut pos = 0;
    while pos < raw.len() {
        let rest = &raw[pos..];
        if rest.starts_with('<') {
            if let Some((event, len)) = match_tag(rest, preset) {
                let range = pos..pos + len;
                match (event, open.take()) {
                    (Event::Open(tag), None) => open = Some((tag, range)),
                    (Event::Close(tag), Some((open_tag, open_range))) if tag == open_tag => {
                        spans.push(TagSpan {
                            tag,
                            inner: open_range.end..range.start,
                            open: open_range,
                            close: range,
                        });
                    }
                    _ => return (spans, true),
                }
                pos += len;
                continue;
            }
        }
        pos += rest.chars().next().map_or(1, char::len_utf8);
    }
    (spans, open.is_some())
}

/// Parses one turn's generation. Total: malformed input yields
/// [`Action::Invalid`] rather than an error.
pub fn parse_turn(raw: &str, preset: &TagPreset) -> ParsedTurn {
    let (spans, mismatched) = scan(raw, preset);
    let actions: Vec<usize> = spans
        .iter()
        .enumerate()
        .filter(|(_, s)| s.tag != Tag::Is)
        .map(|(i, _)| i)
        .collect();
    let first_action = actions.first().copied();
    let is_span = spans
        .iter()
        .enumerate()
        .find(|(i, s)| s.tag == Tag::Is && first_action.is_none_or(|a| *i < a))
        .map(|(i, _)| i);
    let text_of = |i: usize| raw[spans[i].trimmed_inner(raw)].to_owned();

    let (action, action_span) = if mismatched {
        (Action::Invalid(InvalidReason::MismatchedTags), None)
    } else if actions.len() > 1 {
        (Action::Invalid(InvalidReason::MultipleActions), None)
    } else if let Some(i) = first_action {
        let text = text_of(i);
        let action = if spans[i].tag == Tag::Query {
            Action::Query(text)
        } else {
            Action::Answer(text)
        };
        (action, Some(i))
    } else {
        (Action::Invalid(InvalidReason::NoAction), None)
    };

    ParsedTurn {
        is_segment: is_span.map(text_of),
        action,
        raw: raw.to_owned(),
        spans,
        is_span,
        action_span,
    }
}

/// Splits an answer on `;`, trimming each part. Empty parts are kept.
pub fn split_answers(answer_text: &str) -> Vec<String> {
    answer_text.split(';').map(|s| s.trim().to_owned()).collect()
}

fn check_content(text: &str, preset: &TagPreset) -> Result<(), TagParseError> {
    for s in preset.strings() {
        if text.contains(s) {
            return Err(TagParseError::ContentContainsTag(s.to_owned()));
        }
    }
    Ok(())
}

/// Writes an element, `open ++ text ++ close`.
pub fn render_element(out: &mut String, preset: &TagPreset, tag: Tag, text: &str) {
    out.push_str(preset.open(tag));
    out.push_str(text);
    out.push_str(preset.close(tag));
}

/// Canonical serialization of a valid turn: `<IS>..</IS>` (when present)
/// followed by the action element.
pub fn render_turn(parsed: &ParsedTurn, preset: &TagPreset) -> Result<String, TagParseError> {
    let (tag, text) = match &parsed.action {
        Action::Query(q) => (Tag::Query, q),
        Action::Answer(a) => (Tag::Answer, a),
        Action::Invalid(reason) => return Err(TagParseError::InvalidTurn(reason.code())),
    };
    let mut out = String::new();
    if let Some(is) = &parsed.is_segment {
        check_content(is, preset)?;
        render_element(&mut out, preset, Tag::Is, is);
    }
    check_content(text, preset)?;
    render_element(&mut out, preset, tag, text);
    Ok(out)
}
