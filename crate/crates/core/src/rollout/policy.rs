use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::pieces;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("policy transport failure: {0}")]
    Transport(String),
    #[error("malformed policy response: {0}")]
    Response(String),
    #[error("{0}")]
    Config(String),
}

/// Why a generation stopped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason", content = "marker")]
pub enum Finish {
    StopMarker(String),
    Eos,
    Length,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub finish: Finish,
    /// Seconds, as measured by the rollout harness.
    pub latency: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<TokenUsage>,
}

impl Generation {
    pub fn new(text: impl Into<String>, finish: Finish) -> Self {
        Self {
            text: text.into(),
            finish,
            latency: 0.0,
            usage: None,
        }
    }
}

/// Everything a backend needs for one turn.
#[derive(Debug, Clone, Copy)]
pub struct GenerationRequest<'a> {
    pub task_id: &'a str,
    pub turn: usize,
    pub context: &'a str,
    pub stop_markers: &'a [String],
    pub max_tokens: usize,
    pub seed: u64,
}

/// A text generator. Generation must halt at the first emitted stop marker
/// (marker included), at end of sequence, or at the token budget.
pub trait PolicyBackend: Send + Sync {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<Generation, PolicyError>;

    /// Whether `generate` may be called from several threads at once.
    fn concurrent(&self) -> bool {
        true
    }
}

/// Cuts `text` just after the earliest stop marker it contains.
pub fn truncate_at_stop(text: &str, stop_markers: &[String]) -> Option<(usize, String)> {
    stop_markers
        .iter()
        .filter(|m| !m.is_empty())
        .filter_map(|m| text.find(m.as_str()).map(|pos| (pos + m.len(), m)))
        .min_by_key(|(end, m)| (*end - m.len(), std::cmp::Reverse(m.len())))
        .map(|(end, m)| (end, m.clone()))
}

/// Applies stop markers and a token budget to a complete candidate text, the
/// way a decoder emitting it token by token would.
pub fn finish_text(text: &str, stop_markers: &[String], max_tokens: usize) -> (String, Finish) {
    let (candidate, finish) = match truncate_at_stop(text, stop_markers) {
        Some((end, marker)) => (&text[..end], Finish::StopMarker(marker)),
        None => (text, Finish::Eos),
    };
    let mut end = 0;
    for (n, piece) in pieces(candidate).enumerate() {
        if n == max_tokens {
            return (candidate[..end].to_owned(), Finish::Length);
        }
        end += piece.len();
    }
    (candidate.to_owned(), finish)
}

/// Plays canned generations: turn `t` of task `id` gets `script[t]`, and
/// the last entry repeats once the script runs out.
#[derive(Debug, Clone, Default)]
pub struct ScriptedPolicy {
    default: Vec<String>,
    per_task: HashMap<String, Vec<String>>,
    latency: Option<Duration>,
}

impl ScriptedPolicy {
    pub fn new(default: Vec<String>) -> Self {
        Self {
            default,
            ..Self::default()
        }
    }

    pub fn with_task(mut self, task_id: impl Into<String>, script: Vec<String>) -> Self {
        self.per_task.insert(task_id.into(), script);
        self
    }

    /// Sleeps this long inside every call, to stand in for model latency.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = Some(latency);
        self
    }

    /// Parses either a JSON array of generations (shared by every task) or
    /// `{"default": [...], "tasks": {"<id>": [...]}}`.
    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum File {
            Shared(Vec<String>),
            Keyed {
                #[serde(default)]
                default: Vec<String>,
                #[serde(default)]
                tasks: HashMap<String, Vec<String>>,
            },
        }
        let file: File =
            serde_json::from_str(text).map_err(|e| PolicyError::Config(format!("scripted policy: {e}")))?;
        Ok(match file {
            File::Shared(default) => Self::new(default),
            File::Keyed { default, tasks } => Self {
                default,
                per_task: tasks,
                latency: None,
            },
        })
    }
}

impl PolicyBackend for ScriptedPolicy {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<Generation, PolicyError> {
        if let Some(latency) = self.latency {
            std::thread::sleep(latency);
        }
        let script = self.per_task.get(request.task_id).unwrap_or(&self.default);
        let text = match script.get(request.turn).or(script.last()) {
            Some(t) => t.as_str(),
            None => "",
        };
        let (text, finish) = finish_text(text, request.stop_markers, request.max_tokens);
        Ok(Generation::new(text, finish))
    }
}

/// A policy computed from the request, e.g. one that reads its context.
pub struct FnPolicy<F> {
    f: F,
}

impl<F> FnPolicy<F>
where
    F: Fn(&GenerationRequest<'_>) -> String + Send + Sync,
{
    pub fn new(f: F) -> Self {
        Self { f }
    }
}

impl<F> PolicyBackend for FnPolicy<F>
where
    F: Fn(&GenerationRequest<'_>) -> String + Send + Sync,
{
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<Generation, PolicyError> {
        let text = (self.f)(request);
        let (text, finish) = finish_text(&text, request.stop_markers, request.max_tokens);
        Ok(Generation::new(text, finish))
    }
}
