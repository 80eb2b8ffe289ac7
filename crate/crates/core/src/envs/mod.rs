//! Environments the agent queries: a lexical retriever over a local corpus,
//! a small deterministic shop, canned scripts for tests, and an HTTP search
//! client.

mod corpus;
mod scripted;
mod search;
mod shop;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::task::CompositeTask;

pub use corpus::{
    doc_terms, render_passages, retrieve, Corpus, CorpusEnv, CorpusProvider, Document, Index,
    Passage,
};
pub use scripted::{scripted_env, ScriptedEnv, ScriptedProvider};
pub use search::{render_hits, SearchClient, SearchHit, SearchProvider, SearchProviderConfig};
pub use shop::{
    load_catalog, shop_step, Page, DEFAULT_ACTION_BUDGET, RESULTS_PER_PAGE, Panel, Product, ShopEnv, ShopGoal, ShopProvider, ShopState,
};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("scripted environment needs at least one observation")]
    EmptyScript,
    #[error("environment transport failure: {0}")]
    Transport(String),
    #[error("{0}")]
    Task(String),
}

/// Feedback for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub text: String,
    pub reward: Option<f64>,
    pub done: bool,
}

impl Observation {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            reward: None,
            done: false,
        }
    }
}

/// One episode's view of an environment.
pub trait Environment: Send {
    fn respond(&mut self, query: &str) -> Result<Observation, EnvError>;
}

/// Opens a fresh per-episode [`Environment`] for each task.
pub trait EnvironmentProvider: Send + Sync {
    fn open(&self, task: &CompositeTask) -> Result<Box<dyn Environment>, EnvError>;

    /// Whether episodes from this provider may call out concurrently.
    fn concurrent(&self) -> bool {
        true
    }
}

pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(
    path: &std::path::Path,
) -> Result<Vec<T>, EnvError> {
    let text = std::fs::read_to_string(path).map_err(|source| EnvError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(line).map_err(|e| EnvError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}
