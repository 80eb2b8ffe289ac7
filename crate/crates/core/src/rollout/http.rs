//! Completions-style HTTP policy backend (vLLM / OpenAI-compatible).

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::policy::{
    truncate_at_stop, Finish, Generation, GenerationRequest, PolicyBackend, PolicyError, TokenUsage,
};
use crate::config::RolloutConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ApiStyle {
    /// `POST /v1/completions` with a `prompt` string.
    #[default]
    Completions,
    /// `POST /v1/chat/completions` with a single user message.
    Chat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpPolicyConfig {
    pub endpoint: String,
    pub model: Option<String>,
    pub api_key: Option<String>,
    pub temperature: f64,
    pub style: ApiStyle,
    pub timeout_secs: u64,
}

impl HttpPolicyConfig {
    /// Endpoint, model and temperature from the rollout config; the API key
    /// from the environment variable it names.
    pub fn from_rollout(config: &RolloutConfig, endpoint: &str) -> Self {
        let style = if endpoint.trim_end_matches('/').ends_with("chat/completions") {
            ApiStyle::Chat
        } else {
            ApiStyle::Completions
        };
        Self {
            endpoint: endpoint.to_owned(),
            model: config.model.clone(),
            api_key: std::env::var(&config.api_key_env).ok(),
            temperature: config.temperature,
            style,
            timeout_secs: 120,
        }
    }
}

pub struct HttpPolicy {
    config: HttpPolicyConfig,
    agent: ureq::Agent,
}

impl HttpPolicy {
    pub fn new(config: HttpPolicyConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Self { config, agent }
    }

    pub fn request_body(&self, request: &GenerationRequest<'_>) -> Value {
        let mut body = json!({
            "stop": request.stop_markers,
            "max_tokens": request.max_tokens,
            "temperature": self.config.temperature,
            "seed": request.seed,
            "include_stop_str_in_output": true,
        });
        match self.config.style {
            ApiStyle::Completions => body["prompt"] = json!(request.context),
            ApiStyle::Chat => {
                body["messages"] = json!([{ "role": "user", "content": request.context }])
            }
        }
        if let Some(model) = &self.config.model {
            body["model"] = json!(model);
        }
        body
    }
}

/// Maps a completions or chat response onto a [`Generation`].
///
/// Servers that strip the matched stop string get it re-appended from
/// `stop_reason` so the marker is always part of the text.
pub fn parse_response(response: &Value, stop_markers: &[String]) -> Result<Generation, PolicyError> {
    let choice = response
        .pointer("/choices/0")
        .ok_or_else(|| PolicyError::Response("no choices".into()))?;
    let mut text = choice
        .get("text")
        .or_else(|| choice.pointer("/message/content"))
        .and_then(Value::as_str)
        .ok_or_else(|| PolicyError::Response("choice has no text".into()))?
        .to_owned();
    let reason = choice.get("finish_reason").and_then(Value::as_str);
    let finish = match truncate_at_stop(&text, stop_markers) {
        Some((end, marker)) => {
            text.truncate(end);
            Finish::StopMarker(marker)
        }
        None => match (reason, choice.get("stop_reason").and_then(Value::as_str)) {
            (Some("stop"), Some(marker)) if stop_markers.iter().any(|m| m == marker) => {
                text.push_str(marker);
                Finish::StopMarker(marker.to_owned())
            }
            (Some("length"), _) => Finish::Length,
            _ => Finish::Eos,
        },
    };
    let usage = response.get("usage").map(|u| TokenUsage {
        prompt_tokens: u.get("prompt_tokens").and_then(Value::as_u64).unwrap_or(0) as usize,
        completion_tokens: u.get("completion_tokens").and_then(Value::as_u64).unwrap_or(0) as usize,
    });
    Ok(Generation {
        text,
        finish,
        latency: 0.0,
        usage,
    })
}

impl PolicyBackend for HttpPolicy {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<Generation, PolicyError> {
        let mut call = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.config.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = call
            .send_json(self.request_body(request))
            .map_err(|e| PolicyError::Transport(e.to_string()))?;
        let value: Value = response
            .body_mut()
            .read_json()
            .map_err(|e| PolicyError::Response(e.to_string()))?;
        parse_response(&value, request.stop_markers)
    }
}
