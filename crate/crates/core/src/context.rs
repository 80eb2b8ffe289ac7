//! Working-context evolution.
//!
//! In [`ContextMode::Consolidate`] the context is the immutable head plus the
//! most recent `(IS, query, info)` tuple; every older tuple is pruned. In
//! [`ContextMode::FullAppend`] every turn is appended verbatim.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ContextMode, Tag, TagPreset};
use crate::tagparse::{render_element, Action, ParsedTurn};
use crate::task::CompositeTask;
use crate::tokenizer::TokenCounter;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContextError {
    #[error("cannot advance over an invalid turn")]
    InvalidAction,
    #[error("query turn advanced without environment feedback")]
    MissingInfo,
    #[error("answer turn advanced with environment feedback")]
    UnexpectedInfo,
}

/// The tuple carried over from the previous turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetainedTurn {
    pub is_segment: Option<String>,
    pub query: String,
    pub info: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextState {
    template: String,
    questions: String,
    retained: Option<RetainedTurn>,
    turn_index: usize,
    mode: ContextMode,
    history: Vec<String>,
    preset: TagPreset,
}

/// `[HINT: YOU HAVE {turns_left} TURNS LEFT]`
pub fn hint_text(turns_left: usize) -> String {
    format!("[HINT: YOU HAVE {turns_left} TURNS LEFT]")
}

/// Prefixes environment feedback with the remaining-turn banner.
pub fn inject_hint(info: &str, turns_left: usize) -> String {
    format!("{} {info}", hint_text(turns_left))
}

/// Serializes an info element, `info_open ++ info ++ info_close`.
pub fn render_info(preset: &TagPreset, info: &str) -> String {
    let mut out = String::new();
    render_element(&mut out, preset, Tag::Info, info);
    out
}

impl ContextState {
    pub fn new(
        template: impl Into<String>,
        questions: impl Into<String>,
        mode: ContextMode,
        preset: TagPreset,
    ) -> Self {
        Self {
            template: template.into(),
            questions: questions.into(),
            retained: None,
            turn_index: 0,
            mode,
            history: Vec::new(),
            preset,
        }
    }

    pub fn for_task(task: &CompositeTask, mode: ContextMode, preset: TagPreset) -> Self {
        Self::new(task.template(), task.question_block(), mode, preset)
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn retained(&self) -> Option<&RetainedTurn> {
        self.retained.as_ref()
    }

    pub fn turn_index(&self) -> usize {
        self.turn_index
    }

    pub fn mode(&self) -> ContextMode {
        self.mode
    }

    pub fn history(&self) -> &[String] {
        &self.history
    }

    pub fn preset(&self) -> &TagPreset {
        &self.preset
    }

    /// The exact text handed to the policy for the next generation.
    pub fn render(&self) -> String {
        let mut out = String::with_capacity(self.template.len() + self.questions.len());
        out.push_str(&self.template);
        out.push_str(&self.questions);
        match self.mode {
            ContextMode::Consolidate => {
                if let Some(r) = &self.retained {
                    if let Some(is) = &r.is_segment {
                        render_element(&mut out, &self.preset, Tag::Is, is);
                    }
                    render_element(&mut out, &self.preset, Tag::Query, &r.query);
                    render_element(&mut out, &self.preset, Tag::Info, &r.info);
                }
            }
            ContextMode::FullAppend => self.history.iter().for_each(|h| out.push_str(h)),
        }
        out
    }

    /// Moves past one completed turn. `info` must be present exactly for
    /// query turns.
    pub fn advance(&self, parsed: &ParsedTurn, info: Option<&str>) -> Result<Self, ContextError> {
        match (&parsed.action, info) {
            (Action::Invalid(_), _) => return Err(ContextError::InvalidAction),
            (Action::Query(_), None) => return Err(ContextError::MissingInfo),
            (Action::Answer(_), Some(_)) => return Err(ContextError::UnexpectedInfo),
            _ => {}
        }
        let mut next = self.clone();
        next.turn_index += 1;
        match self.mode {
            ContextMode::Consolidate => {
                if let (Action::Query(q), Some(info)) = (&parsed.action, info) {
                    next.retained = Some(RetainedTurn {
                        is_segment: parsed.is_segment.clone(),
                        query: q.clone(),
                        info: info.to_owned(),
                    });
                }
            }
            ContextMode::FullAppend => {
                let mut turn = parsed.raw.clone();
                if let Some(info) = info {
                    turn.push_str(&render_info(&self.preset, info));
                }
                next.history.push(turn);
            }
        }
        Ok(next)
    }

    /// Tokens in the rendered context, excluding the instruction template.
    pub fn token_len(&self, counter: &dyn TokenCounter) -> usize {
        counter.count(&self.render()) - counter.count(&self.template)
    }
}

/// Free-function form of [`ContextState::render`].
pub fn render_context(state: &ContextState) -> String {
    state.render()
}

/// Free-function form of [`ContextState::token_len`].
pub fn context_token_len(state: &ContextState, counter: &dyn TokenCounter) -> usize {
    state.token_len(counter)
}
