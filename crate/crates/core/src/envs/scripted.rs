use std::collections::HashMap;

use super::{EnvError, Environment, EnvironmentProvider, Observation};
use crate::task::CompositeTask;

/// Replays canned observations in order, repeating the last one forever.
#[derive(Debug, Clone)]
pub struct ScriptedEnv {
    script: Vec<Observation>,
    cursor: usize,
}

impl ScriptedEnv {
    pub fn new(script: Vec<Observation>) -> Result<Self, EnvError> {
        if script.is_empty() {
            return Err(EnvError::EmptyScript);
        }
        Ok(Self { script, cursor: 0 })
    }
}

/// Builds a [`ScriptedEnv`] from plain observation texts.
pub fn scripted_env<S: Into<String>>(
    script: impl IntoIterator<Item = S>,
) -> Result<ScriptedEnv, EnvError> {
    ScriptedEnv::new(script.into_iter().map(Observation::text).collect())
}

impl Environment for ScriptedEnv {
    fn respond(&mut self, _query: &str) -> Result<Observation, EnvError> {
        let i = self.cursor.min(self.script.len() - 1);
        self.cursor += 1;
        Ok(self.script[i].clone())
    }
}

/// Hands every task a fresh cursor over its script; tasks without a
/// dedicated script get the default one.
#[derive(Debug, Clone, Default)]
pub struct ScriptedProvider {
    default: Vec<String>,
    per_task: HashMap<String, Vec<String>>,
}

impl ScriptedProvider {
    pub fn new(default: Vec<String>) -> Self {
        Self {
            default,
            per_task: HashMap::new(),
        }
    }

    pub fn with_task(mut self, task_id: impl Into<String>, script: Vec<String>) -> Self {
        self.per_task.insert(task_id.into(), script);
        self
    }

    /// Parses either a JSON array of strings (shared script) or an object
    /// `{"default": [...], "tasks": {"<id>": [...]}}`.
    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        #[derive(serde::Deserialize)]
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
        let parsed: File = serde_json::from_str(text).map_err(|e| EnvError::Parse {
            path: "<scripted env>".into(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Ok(match parsed {
            File::Shared(default) => Self::new(default),
            File::Keyed { default, tasks } => Self {
                default,
                per_task: tasks,
            },
        })
    }
}

impl EnvironmentProvider for ScriptedProvider {
    fn open(&self, task: &CompositeTask) -> Result<Box<dyn Environment>, EnvError> {
        let script = self.per_task.get(&task.id).unwrap_or(&self.default);
        Ok(Box::new(scripted_env(script.iter().cloned())?))
    }
}
