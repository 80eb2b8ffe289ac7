//! Generic JSON web-search client.
//!
//! The request is `POST <url>` with a JSON body `{<query_field>: query,
//! <count_field>: top_n}` and the API key in `<api_key_header>`. Hits are
//! read from the array at `results_pointer` (a JSON pointer); title, snippet
//! and URL field names are configurable per provider.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{EnvError, Environment, EnvironmentProvider, Observation};
use crate::task::CompositeTask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchProviderConfig {
    pub url: String,
    pub api_key_env: Option<String>,
    pub api_key_header: String,
    pub query_field: String,
    pub count_field: Option<String>,
    pub results_pointer: String,
    pub title_field: String,
    pub snippet_field: String,
    pub url_field: String,
    pub top_n: usize,
    pub timeout_secs: u64,
}

impl Default for SearchProviderConfig {
    fn default() -> Self {
        Self {
            url: "https://google.serper.dev/search".into(),
            api_key_env: Some("SEARCH_API_KEY".into()),
            api_key_header: "X-API-KEY".into(),
            query_field: "q".into(),
            count_field: Some("num".into()),
            results_pointer: "/organic".into(),
            title_field: "title".into(),
            snippet_field: "snippet".into(),
            url_field: "link".into(),
            top_n: 10,
            timeout_secs: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub title: String,
    pub snippet: String,
    pub url: String,
}

impl SearchProviderConfig {
    /// Extracts at most `top_n` hits from a provider response.
    pub fn map_results(&self, response: &Value) -> Result<Vec<SearchHit>, EnvError> {
        let items = response
            .pointer(&self.results_pointer)
            .and_then(Value::as_array)
            .ok_or_else(|| {
                EnvError::Transport(format!("response has no array at `{}`", self.results_pointer))
            })?;
        let field = |item: &Value, name: &str| {
            item.get(name)
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_owned()
        };
        Ok(items
            .iter()
            .take(self.top_n)
            .map(|item| SearchHit {
                title: field(item, &self.title_field),
                snippet: field(item, &self.snippet_field),
                url: field(item, &self.url_field),
            })
            .collect())
    }
}

pub fn render_hits(hits: &[SearchHit]) -> String {
    hits.iter()
        .enumerate()
        .map(|(i, h)| format!("Doc {} (Title: {}) {} (URL: {})", i + 1, h.title, h.snippet, h.url))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Clone)]
pub struct SearchClient {
    config: SearchProviderConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl SearchClient {
    /// Reads the API key from the configured environment variable, if any.
    pub fn new(config: SearchProviderConfig) -> Self {
        let api_key = config
            .api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok());
        Self::with_key(config, api_key)
    }

    pub fn with_key(config: SearchProviderConfig, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Self {
            config,
            api_key,
            agent,
        }
    }

    pub fn search(&self, query: &str) -> Result<Vec<SearchHit>, EnvError> {
        let mut body = json!({ self.config.query_field.clone(): query });
        if let Some(count) = &self.config.count_field {
            body[count] = json!(self.config.top_n);
        }
        let mut request = self.agent.post(&self.config.url);
        if let Some(key) = &self.api_key {
            request = request.header(self.config.api_key_header.as_str(), key.as_str());
        }
        let mut response = request
            .send_json(&body)
            .map_err(|e| EnvError::Transport(e.to_string()))?;
        let value: Value = response
            .body_mut()
            .read_json()
            .map_err(|e| EnvError::Transport(e.to_string()))?;
        self.config.map_results(&value)
    }
}

impl Environment for SearchClient {
    fn respond(&mut self, query: &str) -> Result<Observation, EnvError> {
        Ok(Observation::text(render_hits(&self.search(query)?)))
    }
}

/// Shares one connection pool across episodes.
pub struct SearchProvider {
    client: SearchClient,
}

impl SearchProvider {
    pub fn new(client: SearchClient) -> Self {
        Self { client }
    }
}

impl EnvironmentProvider for SearchProvider {
    fn open(&self, _task: &CompositeTask) -> Result<Box<dyn Environment>, EnvError> {
        Ok(Box::new(self.client.clone()))
    }
}
