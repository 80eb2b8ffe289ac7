//! Rollout configuration, tag vocabularies and the config file loader.
//!
//! Two file formats are accepted. The flat format is UTF-8 `key = value`
//! lines; blank lines and lines starting with `#` are ignored. A file whose
//! name ends in `.toml` is read as TOML with the same keys at top level.
//!
//! | key                         | default       |
//! |-----------------------------|---------------|
//! | `max_turns`                 | 6             |
//! | `tag_preset`                | `prompt_style`|
//! | `retrieval_k`               | 3             |
//! | `mode`                      | `consolidate` |
//! | `hint_enabled`              | `true`        |
//! | `max_tokens_per_generation` | 1024          |
//! | `seed`                      | 0             |
//! | `temperature`               | 0.01          |
//! | `endpoint`                  | unset         |
//! | `model`                     | unset         |
//! | `api_key_env`               | `MEM1_API_KEY`|

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("config key `{key}`: {message}")]
    Key { key: String, message: String },
    #[error("invalid config: {0}")]
    Validation(String),
}

/// The four tagged element kinds a turn can contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Is,
    Query,
    Answer,
    Info,
}

impl Tag {
    pub const ALL: [Tag; 4] = [Tag::Is, Tag::Query, Tag::Answer, Tag::Info];
}

/// A concrete tag vocabulary: open/close strings for each element.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagPreset {
    pub is_open: String,
    pub is_close: String,
    pub query_open: String,
    pub query_close: String,
    pub answer_open: String,
    pub answer_close: String,
    pub info_open: String,
    pub info_close: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TagPresetKind {
    /// `<IS>`, `<query>`, `<answer>`, `<info>`.
    PaperBody,
    /// `<think>`, `<search>`, `<answer>`, `<information>`.
    #[default]
    PromptStyle,
}

impl TagPresetKind {
    pub fn preset(self) -> TagPreset {
        match self {
            TagPresetKind::PaperBody => TagPreset::from_names("IS", "query", "answer", "info"),
            TagPresetKind::PromptStyle => {
                TagPreset::from_names("think", "search", "answer", "information")
            }
        }
    }
}

impl FromStr for TagPresetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "paper_body" | "paper-body" => Ok(Self::PaperBody),
            "prompt_style" | "prompt-style" => Ok(Self::PromptStyle),
            other => Err(format!("unknown tag preset `{other}`")),
        }
    }
}

impl TagPreset {
    fn from_names(is: &str, query: &str, answer: &str, info: &str) -> Self {
        let open = |n: &str| format!("<{n}>");
        let close = |n: &str| format!("</{n}>");
        Self {
            is_open: open(is),
            is_close: close(is),
            query_open: open(query),
            query_close: close(query),
            answer_open: open(answer),
            answer_close: close(answer),
            info_open: open(info),
            info_close: close(info),
        }
    }

    /// Builds a custom preset from element names, e.g. `("state", "q", "a", "obs")`.
    pub fn custom(is: &str, query: &str, answer: &str, info: &str) -> Result<Self, ConfigError> {
        let preset = Self::from_names(is, query, answer, info);
        preset.validate()?;
        Ok(preset)
    }

    pub fn open(&self, tag: Tag) -> &str {
        match tag {
            Tag::Is => &self.is_open,
            Tag::Query => &self.query_open,
            Tag::Answer => &self.answer_open,
            Tag::Info => &self.info_open,
        }
    }

    pub fn close(&self, tag: Tag) -> &str {
        match tag {
            Tag::Is => &self.is_close,
            Tag::Query => &self.query_close,
            Tag::Answer => &self.answer_close,
            Tag::Info => &self.info_close,
        }
    }

    /// All eight tag strings, opens then closes, in [`Tag::ALL`] order.
    pub fn strings(&self) -> [&str; 8] {
        [
            &self.is_open,
            &self.query_open,
            &self.answer_open,
            &self.info_open,
            &self.is_close,
            &self.query_close,
            &self.answer_close,
            &self.info_close,
        ]
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let strings = self.strings();
        for (i, s) in strings.iter().enumerate() {
            if s.is_empty() {
                return Err(ConfigError::Validation("empty tag string".into()));
            }
            if strings[..i].contains(s) {
                return Err(ConfigError::Validation(format!("duplicate tag string `{s}`")));
            }
        }
        for tag in Tag::ALL {
            let open = self.open(tag);
            let close = self.close(tag);
            let well_formed = open.len() > 2
                && open.starts_with('<')
                && open.ends_with('>')
                && !open.starts_with("</")
                && close.strip_prefix("</") == Some(&open[1..]);
            if !well_formed {
                return Err(ConfigError::Validation(format!(
                    "malformed tag pair `{open}` / `{close}`"
                )));
            }
        }
        Ok(())
    }
}

/// Rewrites every tag string of `from` into the matching tag string of `to`.
///
/// Replacement is a single left-to-right pass, so it never re-matches text it
/// has already produced.
pub fn rename_tags(text: &str, from: &TagPreset, to: &TagPreset) -> String {
    let src = from.strings();
    let dst = to.strings();
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    'outer: while !rest.is_empty() {
        if rest.starts_with('<') {
            // Longest match first so `<information>` never loses to a shorter prefix.
            let mut best: Option<usize> = None;
            for (i, s) in src.iter().enumerate() {
                if rest.starts_with(s) && best.is_none_or(|b| src[b].len() < s.len()) {
                    best = Some(i);
                }
            }
            if let Some(i) = best {
                out.push_str(dst[i]);
                rest = &rest[src[i].len()..];
                continue 'outer;
            }
        }
        let c = rest.chars().next().expect("non-empty");
        out.push(c);
        rest = &rest[c.len_utf8()..];
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// Keep only the latest turn tuple next to the prompt.
    #[default]
    Consolidate,
    /// Append every turn to the context, never pruning.
    FullAppend,
}

impl FromStr for ContextMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "consolidate" => Ok(Self::Consolidate),
            "full_append" | "full-append" => Ok(Self::FullAppend),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

impl fmt::Display for ContextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Consolidate => "consolidate",
            Self::FullAppend => "full_append",
        })
    }
}

/// Turn budget used for a task with `objectives` sub-questions: 6 turns up to
/// four objectives, 20 beyond that.
pub fn default_turn_budget(objectives: usize) -> usize {
    if objectives <= 4 {
        6
    } else {
        20
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub max_turns: usize,
    pub tag_preset: TagPresetKind,
    pub retrieval_k: usize,
    pub mode: ContextMode,
    pub hint_enabled: bool,
    pub max_tokens_per_generation: usize,
    pub seed: u64,
    pub temperature: f64,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key_env: String,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            max_turns: 6,
            tag_preset: TagPresetKind::default(),
            retrieval_k: 3,
            mode: ContextMode::default(),
            hint_enabled: true,
            max_tokens_per_generation: 1024,
            seed: 0,
            temperature: 0.01,
            endpoint: None,
            model: None,
            api_key_env: "MEM1_API_KEY".into(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Key {
        key: key.to_owned(),
        message: format!("cannot parse `{value}`: {e}"),
    })
}

impl RolloutConfig {
    pub fn preset(&self) -> TagPreset {
        self.tag_preset.preset()
    }

    /// Stop markers for a turn. The last allowed turn cannot stop on a query.
    pub fn stop_markers(&self, final_turn: bool) -> Vec<String> {
        let preset = self.preset();
        if final_turn {
            vec![preset.answer_close]
        } else {
            vec![preset.query_close, preset.answer_close]
        }
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key {
            "max_turns" => self.max_turns = parse_value(key, value)?,
            "tag_preset" => self.tag_preset = parse_value(key, value)?,
            "retrieval_k" => self.retrieval_k = parse_value(key, value)?,
            "mode" => self.mode = parse_value(key, value)?,
            "hint_enabled" => self.hint_enabled = parse_value(key, value)?,
            "max_tokens_per_generation" => self.max_tokens_per_generation = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "temperature" => self.temperature = parse_value(key, value)?,
            "endpoint" => self.endpoint = Some(value.to_owned()),
            "model" => self.model = Some(value.to_owned()),
            "api_key_env" => self.api_key_env = value.to_owned(),
            _ => {
                return Err(ConfigError::Key {
                    key: key.to_owned(),
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_turns < 1 {
            return Err(ConfigError::Validation("max_turns must be at least 1".into()));
        }
        if self.retrieval_k < 1 {
            return Err(ConfigError::Validation("retrieval_k must be at least 1".into()));
        }
        if self.max_tokens_per_generation < 1 {
            return Err(ConfigError::Validation(
                "max_tokens_per_generation must be at least 1".into(),
            ));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(ConfigError::Validation("temperature must be finite and >= 0".into()));
        }
        self.preset().validate()
    }

    /// Parses the flat `key = value` format.
    pub fn from_flat_str(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            config.set(key.trim(), value)?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Parses the TOML variant; values may be strings, integers, floats or booleans.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax {
            line: e
                .span()
                .map(|s| text[..s.start].lines().count().max(1))
                .unwrap_or(0),
            message: e.message().to_owned(),
        })?;
        let mut config = Self::default();
        for (key, value) in &table {
            let value = match value {
                toml::Value::String(s) => s.clone(),
                toml::Value::Integer(i) => i.to_string(),
                toml::Value::Float(f) => f.to_string(),
                toml::Value::Boolean(b) => b.to_string(),
                _ => {
                    return Err(ConfigError::Key {
                        key: key.clone(),
                        message: "expected a scalar value".into(),
                    })
                }
            };
            config.set(key, &value)?;
        }
        config.validate()?;
        Ok(config)
    }
}

/// Loads a configuration file, applying defaults and validating the result.
pub fn load_config(path: &Path) -> Result<RolloutConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if path.extension().is_some_and(|e| e == "toml") {
        RolloutConfig::from_toml_str(&text)
    } else {
        RolloutConfig::from_flat_str(&text)
    }
}
