//! Stitching a trajectory into one token sequence with per-token visibility.
//!
//! Token `k` of turn `t` attends to the tokens of the context the policy saw
//! at turn `t` plus the earlier tokens of turn `t` itself. Head tokens attend
//! causally to the preceding head tokens. In consolidate mode the context of
//! turn `t + 1` is the head plus the retained elements of turn `t`, so older
//! turns drop out of view even though they stay in the sequence.

mod export;

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ContextMode, Tag, TagPreset};
use crate::rollout::{parse_generation, TrajectoryRecord};
use crate::tagparse::{render_element, Action, ParsedTurn};
use crate::tokenizer::{TokenCounter, TokenizerError};

pub use export::{export, import, read_export, write_export, MaskExport, MaskFormat, FORMAT_VERSION, MAGIC};

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("integrity error in turn {turn} at token {token}: {message}")]
    Integrity {
        turn: usize,
        token: usize,
        message: String,
    },
    #[error("trajectory has no turns")]
    Empty,
    #[error("token index {k} out of range for {n} tokens")]
    OutOfRange { k: usize, n: usize },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt mask file: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum Segment {
    Head = 0,
    Is = 1,
    Query = 2,
    Answer = 3,
    Info = 4,
    Hint = 5,
    Glue = 6,
}

impl Segment {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Self::Head,
            1 => Self::Is,
            2 => Self::Query,
            3 => Self::Answer,
            4 => Self::Info,
            5 => Self::Hint,
            6 => Self::Glue,
            _ => return None,
        })
    }

    /// Whether tokens of this kind are emitted by the policy.
    pub fn is_generated(self) -> bool {
        matches!(self, Self::Is | Self::Query | Self::Answer | Self::Glue)
    }

    fn of_tag(tag: Tag) -> Self {
        match tag {
            Tag::Is => Self::Is,
            Tag::Query => Self::Query,
            Tag::Answer => Self::Answer,
            Tag::Info => Self::Info,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StitchedTrajectory {
    pub counter_id: String,
    pub tokens: Vec<u32>,
    pub segments: Vec<Segment>,
    /// 0 for the head, `t + 1` for tokens of zero-based turn `t`.
    pub turn_of: Vec<u16>,
    pub generated: Vec<bool>,
    /// Index of each token within the context it was produced in.
    pub positions: Vec<u32>,
    /// `contexts[t]`: ascending token indices of the context seen at turn `t`.
    pub contexts: Vec<Vec<u32>>,
}

impl StitchedTrajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn context_of(&self, k: usize) -> &[u32] {
        match self.turn_of[k] {
            0 => &[],
            t => &self.contexts[t as usize - 1],
        }
    }

    /// First token index of `k`'s turn.
    fn turn_start(&self, k: usize) -> usize {
        let t = self.turn_of[k];
        self.turn_of[..k].iter().rposition(|&x| x != t).map_or(0, |i| i + 1)
    }
}

/// Attention rows as packed bits: bit `j` of row `k` is set when token `k`
/// attends to token `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask2D {
    n: usize,
    words_per_row: usize,
    bits: Vec<u64>,
}

impl Mask2D {
    pub fn new(n: usize) -> Self {
        let words_per_row = n.div_ceil(64);
        Self {
            n,
            words_per_row,
            bits: vec![0; n * words_per_row],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn row_words(&self, k: usize) -> &[u64] {
        &self.bits[k * self.words_per_row..(k + 1) * self.words_per_row]
    }

    pub(crate) fn row_words_mut(&mut self, k: usize) -> &mut [u64] {
        &mut self.bits[k * self.words_per_row..(k + 1) * self.words_per_row]
    }

    pub fn get(&self, k: usize, j: usize) -> bool {
        self.row_words(k)[j / 64] >> (j % 64) & 1 == 1
    }

    pub fn set(&mut self, k: usize, j: usize) {
        self.row_words_mut(k)[j / 64] |= 1 << (j % 64);
    }

    /// Ascending indices visible from row `k`.
    pub fn row(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        self.row_words(k).iter().enumerate().flat_map(|(w, &word)| {
            let mut word = word;
            std::iter::from_fn(move || {
                if word == 0 {
                    return None;
                }
                let bit = word.trailing_zeros() as usize;
                word &= word - 1;
                Some(w * 64 + bit)
            })
        })
    }

    pub fn row_count(&self, k: usize) -> usize {
        self.row_words(k).iter().map(|w| w.count_ones() as usize).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask1D {
    pub loss: Vec<bool>,
}

impl Mask1D {
    pub fn count(&self) -> usize {
        self.loss.iter().filter(|&&b| b).count()
    }
}

struct Builder<'a> {
    counter: &'a dyn TokenCounter,
    st: StitchedTrajectory,
    turn: u16,
    turn_start: usize,
    context_len: usize,
}

impl Builder<'_> {
    fn push(&mut self, text: &str, segment: Segment) -> Range<usize> {
        let start = self.st.len();
        for id in self.counter.encode(text) {
            let offset = self.st.len() - self.turn_start;
            self.st.tokens.push(id);
            self.st.segments.push(segment);
            self.st.turn_of.push(self.turn);
            self.st.generated.push(segment.is_generated());
            self.st.positions.push((self.context_len + offset) as u32);
        }
        start..self.st.len()
    }

    fn begin_turn(&mut self, turn: u16, context_len: usize) {
        self.turn = turn;
        self.turn_start = self.st.len();
        self.context_len = context_len;
    }
}

/// Token ranges of one element of a generation.
#[derive(Clone)]
struct ElementTokens {
    open: Range<usize>,
    core: Range<usize>,
    close: Range<usize>,
}

impl ElementTokens {
    fn indices(&self) -> impl Iterator<Item = u32> + '_ {
        self.open
            .clone()
            .chain(self.core.clone())
            .chain(self.close.clone())
            .map(|i| i as u32)
    }
}

/// Encodes a generation so that each element's open tag, trimmed content and
/// close tag are separate token runs. Returns the runs per span.
fn push_generation(b: &mut Builder<'_>, parsed: &ParsedTurn) -> Vec<ElementTokens> {
    let raw = parsed.raw.as_str();
    let mut cursor = 0;
    let mut elements = Vec::with_capacity(parsed.spans.len());
    for span in &parsed.spans {
        b.push(&raw[cursor..span.open.start], Segment::Glue);
        let seg = Segment::of_tag(span.tag);
        let core = span.trimmed_inner(raw);
        let open = b.push(&raw[span.open.clone()], seg);
        b.push(&raw[span.inner.start..core.start], seg);
        let core_tokens = b.push(&raw[core.clone()], seg);
        b.push(&raw[core.end..span.inner.end], seg);
        let close = b.push(&raw[span.close.clone()], seg);
        elements.push(ElementTokens {
            open,
            core: core_tokens,
            close,
        });
        cursor = span.close.end;
    }
    b.push(&raw[cursor..], Segment::Glue);
    elements
}

fn first_mismatch(st: &StitchedTrajectory, ids: &[u32], expected: &str, counter: &dyn TokenCounter) -> usize {
    let mut rest = expected;
    for &i in ids {
        let piece = counter.decode(&[st.tokens[i as usize]]).unwrap_or_default();
        match rest.strip_prefix(piece.as_str()) {
            Some(r) => rest = r,
            None => return i as usize,
        }
    }
    ids.last().map_or(0, |&i| i as usize)
}

/// Stitches a trajectory into a single token sequence, replaying every
/// recorded context to make sure the visibility structure reproduces it.
pub fn stitch(trajectory: &TrajectoryRecord, counter: &dyn TokenCounter) -> Result<StitchedTrajectory, MaskError> {
    if trajectory.turns.is_empty() {
        return Err(MaskError::Empty);
    }
    let preset: TagPreset = trajectory.config.preset();
    let mode = trajectory.config.mode;
    let mut b = Builder {
        counter,
        st: StitchedTrajectory {
            counter_id: counter.id().to_owned(),
            tokens: Vec::new(),
            segments: Vec::new(),
            turn_of: Vec::new(),
            generated: Vec::new(),
            positions: Vec::new(),
            contexts: Vec::new(),
        },
        turn: 0,
        turn_start: 0,
        context_len: 0,
    };
    let head = b.push(&trajectory.task.rendered_prompt, Segment::Head);
    let mut context: Vec<u32> = head.clone().map(|i| i as u32).collect();
    let last = trajectory.turns.len() - 1;

    for (ti, turn) in trajectory.turns.iter().enumerate() {
        let turn_no = ti + 1;
        let integrity = |token: usize, message: String| MaskError::Integrity {
            turn: turn_no,
            token,
            message,
        };
        if turn.index != ti {
            return Err(integrity(b.st.len(), format!("turn recorded with index {}", turn.index)));
        }
        let ids: Vec<u32> = context.iter().map(|&i| b.st.tokens[i as usize]).collect();
        let replay = counter.decode(&ids)?;
        if replay != turn.context_snapshot {
            let token = first_mismatch(&b.st, &context, &turn.context_snapshot, counter);
            return Err(integrity(token, "context snapshot does not match replayed context".into()));
        }
        let reparsed = parse_generation(&turn.generation, &preset);
        if reparsed != turn.parsed {
            return Err(integrity(b.st.len(), "recorded parse does not match generation".into()));
        }
        let turn_tag = u16::try_from(turn_no).map_err(|_| integrity(b.st.len(), "too many turns".into()))?;
        b.begin_turn(turn_tag, context.len());
        b.st.contexts.push(context.clone());
        let elements = push_generation(&mut b, &turn.parsed);

        let info_tokens = match &turn.info {
            Some(info) => {
                let observation = turn.observation.as_ref().map(|o| o.text.as_str()).unwrap_or("");
                let start = b.st.len();
                b.push(&preset.info_open, Segment::Info);
                match &turn.hint {
                    Some(hint) if *info == format!("{hint} {observation}") => {
                        b.push(hint, Segment::Hint);
                        b.push(" ", Segment::Hint);
                        b.push(observation, Segment::Info);
                    }
                    None if info == observation => {
                        b.push(info, Segment::Info);
                    }
                    _ => return Err(integrity(start, "info does not match hint and observation".into())),
                }
                b.push(&preset.info_close, Segment::Info);
                start..b.st.len()
            }
            None => b.st.len()..b.st.len(),
        };

        let continues = matches!(turn.parsed.action, Action::Query(_)) && turn.info.is_some();
        if ti < last && !continues {
            return Err(integrity(b.st.len(), "turn after a terminal turn".into()));
        }
        context = match mode {
            ContextMode::FullAppend => (0..b.st.len() as u32).collect(),
            ContextMode::Consolidate => {
                let mut next: Vec<u32> = head.clone().map(|i| i as u32).collect();
                if let Some(i) = turn.parsed.is_span {
                    next.extend(elements[i].indices());
                }
                if let Some(i) = turn.parsed.action_span {
                    next.extend(elements[i].indices());
                }
                next.extend(info_tokens.map(|i| i as u32));
                next
            }
        };
    }
    Ok(b.st)
}

/// Indices token `k` attends to, ascending.
pub fn visible_tokens(st: &StitchedTrajectory, k: usize) -> Result<Vec<usize>, MaskError> {
    if k >= st.len() {
        return Err(MaskError::OutOfRange { k, n: st.len() });
    }
    let mut out: Vec<usize> = st.context_of(k).iter().map(|&i| i as usize).collect();
    out.extend(st.turn_start(k)..k);
    Ok(out)
}

pub fn build_masks(st: &StitchedTrajectory) -> (Mask2D, Mask1D) {
    let n = st.len();
    let mut mask = Mask2D::new(n);
    let mut k = 0;
    while k < n {
        let start = k;
        let t = st.turn_of[k];
        let mut base = vec![0u64; mask.words_per_row];
        for &j in st.context_of(k) {
            base[j as usize / 64] |= 1 << (j % 64);
        }
        while k < n && st.turn_of[k] == t {
            if k > start {
                let j = k - 1;
                base[j / 64] |= 1 << (j % 64);
            }
            mask.row_words_mut(k).copy_from_slice(&base);
            k += 1;
        }
    }
    let loss = Mask1D {
        loss: st.generated.clone(),
    };
    (mask, loss)
}

/// Checks every mask row against the recorded rollout: decoding the tokens
/// row `k` selects must give exactly the text token `k` was conditioned on.
pub fn verify(
    trajectory: &TrajectoryRecord,
    st: &StitchedTrajectory,
    mask: &Mask2D,
    counter: &dyn TokenCounter,
) -> Result<(), MaskError> {
    let preset = trajectory.config.preset();
    let n = st.len();
    if mask.n() != n {
        return Err(MaskError::Integrity {
            turn: 0,
            token: 0,
            message: format!("mask covers {} tokens, sequence has {n}", mask.n()),
        });
    }
    let texts: Vec<String> = st
        .tokens
        .iter()
        .map(|&id| counter.decode(&[id]))
        .collect::<Result<_, _>>()?;

    let mut k = 0;
    let mut offset_in_turn = 0;
    let mut current_turn = u16::MAX;
    let mut expected_turn = String::new();
    let mut prefix_len = 0;
    while k < n {
        let t = st.turn_of[k];
        if t != current_turn {
            current_turn = t;
            offset_in_turn = 0;
            if t == 0 {
                prefix_len = 0;
                expected_turn = trajectory.task.rendered_prompt.clone();
            } else {
                let turn = &trajectory.turns[t as usize - 1];
                prefix_len = turn.context_snapshot.len();
                expected_turn = turn.context_snapshot.clone();
                expected_turn.push_str(&turn.generation.text);
                if let Some(info) = &turn.info {
                    render_element(&mut expected_turn, &preset, Tag::Info, info);
                }
            }
        }
        let expected = &expected_turn[..(prefix_len + offset_in_turn).min(expected_turn.len())];
        let mut pos = 0;
        let mut ok = true;
        for j in mask.row(k) {
            let piece = &texts[j];
            if j >= k || !expected[pos..].starts_with(piece.as_str()) {
                ok = false;
                break;
            }
            pos += piece.len();
        }
        if !ok || pos != expected.len() {
            return Err(MaskError::Integrity {
                turn: t as usize,
                token: k,
                message: "visible tokens do not reproduce the rollout context".into(),
            });
        }
        offset_in_turn += texts[k].len();
        k += 1;
    }
    Ok(())
}
