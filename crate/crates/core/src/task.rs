//! Tasks and composite (multi-objective) tasks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaskError {
    #[error("task `{0}` has no gold answers")]
    NoGold(String),
    #[error("task `{0}` has an empty answer-variant list")]
    EmptyVariants(String),
    #[error("composite has {objectives} objectives but {sub_tasks} sub-tasks")]
    Arity { objectives: usize, sub_tasks: usize },
    #[error("prompt template length {0} is not a char boundary of the rendered prompt")]
    TemplateBoundary(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    #[default]
    RetrievalQa,
    WebSearchQa,
    Shop,
}

/// One question with its acceptable answers. `gold_answers` holds one list of
/// surface-form variants per sub-question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub question: String,
    pub gold_answers: Vec<Vec<String>>,
    #[serde(default)]
    pub env_kind: EnvKind,
}

impl Task {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        gold_answers: Vec<Vec<String>>,
        env_kind: EnvKind,
    ) -> Result<Self, TaskError> {
        let task = Self {
            id: id.into(),
            question: question.into(),
            gold_answers,
            env_kind,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.gold_answers.is_empty() {
            return Err(TaskError::NoGold(self.id.clone()));
        }
        if self.gold_answers.iter().any(Vec::is_empty) {
            return Err(TaskError::EmptyVariants(self.id.clone()));
        }
        Ok(())
    }
}

/// Several tasks rendered into a single prompt.
///
/// `rendered_prompt[..template_len]` is the instruction template; the rest is
/// the question block. Token metrics exclude the template portion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositeTask {
    pub id: String,
    pub sub_tasks: Vec<Task>,
    pub rendered_prompt: String,
    pub objective_count: usize,
    pub template_len: usize,
}

impl CompositeTask {
    pub fn new(
        id: impl Into<String>,
        sub_tasks: Vec<Task>,
        rendered_prompt: String,
        template_len: usize,
    ) -> Result<Self, TaskError> {
        let composite = Self {
            id: id.into(),
            objective_count: sub_tasks.len(),
            sub_tasks,
            rendered_prompt,
            template_len,
        };
        composite.validate()?;
        Ok(composite)
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.objective_count != self.sub_tasks.len() || self.objective_count == 0 {
            return Err(TaskError::Arity {
                objectives: self.objective_count,
                sub_tasks: self.sub_tasks.len(),
            });
        }
        if !self.rendered_prompt.is_char_boundary(self.template_len) {
            return Err(TaskError::TemplateBoundary(self.template_len));
        }
        self.sub_tasks.iter().try_for_each(Task::validate)
    }

    pub fn template(&self) -> &str {
        &self.rendered_prompt[..self.template_len]
    }

    pub fn question_block(&self) -> &str {
        &self.rendered_prompt[self.template_len..]
    }

    pub fn env_kind(&self) -> EnvKind {
        self.sub_tasks.first().map(|t| t.env_kind).unwrap_or_default()
    }

    pub fn sub_ids(&self) -> Vec<String> {
        self.sub_tasks.iter().map(|t| t.id.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gold_must_be_non_empty() {
        assert_eq!(
            Task::new("a", "q", vec![], EnvKind::RetrievalQa),
            Err(TaskError::NoGold("a".into()))
        );
        assert_eq!(
            Task::new("a", "q", vec![vec![]], EnvKind::RetrievalQa),
            Err(TaskError::EmptyVariants("a".into()))
        );
    }

    #[test]
    fn composite_splits_template_and_questions() {
        let t = Task::new("a", "q", vec![vec!["x".into()]], EnvKind::RetrievalQa).unwrap();
        let c = CompositeTask::new("c", vec![t], "Question: q".into(), 10).unwrap();
        assert_eq!(c.template(), "Question: ");
        assert_eq!(c.question_block(), "q");
        assert!(CompositeTask::new("c", vec![], "x".into(), 0).is_err());
    }
}
