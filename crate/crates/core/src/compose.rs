//! Dataset loading, multi-objective composition and prompt rendering.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{rename_tags, TagPreset, TagPresetKind};
use crate::task::{CompositeTask, EnvKind, Task, TaskError};

#[derive(Debug, Error)]
pub enum ComposeError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("objective count must be at least 1")]
    ZeroObjectives,
    #[error("need at least {needed} tasks, found {found}")]
    TooFewTasks { needed: usize, found: usize },
    #[error("shop tasks compose one objective per prompt")]
    ShopArity,
    #[error("sub-tasks mix environment kinds")]
    MixedEnvKinds,
    #[error(transparent)]
    Task(#[from] TaskError),
}

const MULTI_QA: &str = "You will answer multiple complex questions using iterative reasoning, summarization, and web search.

At each step, you will see the questions, a cumulative summary of relevant information, the current search query, and search results (except in the first step, where only the questions are provided). Your task is to:

1. Perform reasoning and update a cumulative, concise summary within <think> ... </think>. This acts as persistent memory and must include all essential information from previous <think> and <information> tags.

2. Then choose one of the following actions:
- If any question remains unanswered, issue a single query for one question inside <search> ... </search>. The query should consist of keywords or a short phrase. Only search one question at a time.
- If all questions are answered, provide the final answers\u{2014}separated by semicolons\u{2014}within <answer> answer1; answer2; ... </answer>. The answers must be concise, contain only essential words, and avoid any explanations.

Important:
- Always follow this structure after <information> or the initial questions: <think> ... </think><search> ... </search> or <think> ... </think><answer> ... </answer>.
- Do not search multiple queries or questions simultaneously.

Answer the following questions:";

const SINGLE_QA: &str = "You will answer a complex question through iterative reasoning, summarization, and web searches.

At each step, you can see the question, previous summary in <think> ... </think>, search query in <search> ... </search>, and the returned information in <information> ... </information> (except the first step where you will be given only the question). Then, you should:

1. Conduct reasoning, and then update a concise, cumulative summary with essential information inside <think> </think>. This is your persistent memory and should include all important information from previous <think> </think> and <information> </information> (i.e. information and answers already found for questions).

2. Then choose one:
- Issue a query (i.e., key words / phrases for search) inside <search> </search> (you may search repeatedly until the answer is clear). This query will be used to conduct search and return the results in <information> results </information>
- Provide the final concise answer (no explanations) if no additional information is needed inside <answer> </answer>. The answer should be concise and only contain the words necessary to answer the question.

After <information> </information> (or question at the beginning), you should always follow the order: <think> ... </think><search> ... </search> or <think> ... </think><answer> ... </answer>.

Question: ";

// Shop actions travel inside the query element so the rollout routes them to
// the environment.
const SHOP: &str = "You are browsing an online shop. Your goal is to find a product that matches the given description. You will interact with the site step-by-step. Each step gives you a <state>...</state> representing the current webpage. You must decide what action to take next until you identify the correct product.

Available actions (shown in the <state> tag) depend on the page:
- On the search page: search[<keywords>]
- On search result pages: click[<item url>] to view a product, or click[next >] to go to the next results page
- On product pages: click[description], click[features], click[color], click[size], click[buy now]
- To return to search: click[back to search]

Example goal: \"Find a gingko light and 20x20 pillow cover that is hand painted.\"
Example first action: <think> ... </think><search>search[gingko light 20x20 pillow cover hand painted]</search>
Only respond with valid actions formatted as: search[...], click[...], etc.

After you navigate and find the product that best fits the user goal, you should click[buy now] to buy the product at the product page when the buy now button is available.

Product Description: ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    #[default]
    Qa,
    Shop,
}

/// A prompt family bound to a tag vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    pub preset: TagPreset,
}

impl PromptTemplate {
    pub fn new(kind: TemplateKind, preset: TagPreset) -> Self {
        Self { kind, preset }
    }

    /// Renders the prompt for `questions`. Returns the prompt and the byte
    /// length of its instruction portion.
    pub fn render(&self, questions: &[&str]) -> (String, usize) {
        let base = match (self.kind, questions.len()) {
            (TemplateKind::Shop, _) => SHOP,
            (TemplateKind::Qa, 1) => SINGLE_QA,
            (TemplateKind::Qa, _) => MULTI_QA,
        };
        let mut prompt = rename_tags(base, &TagPresetKind::PromptStyle.preset(), &self.preset);
        let template_len = prompt.len();
        if questions.len() == 1 {
            prompt.push_str(questions[0]);
        } else {
            for (i, q) in questions.iter().enumerate() {
                prompt.push_str(&format!("\n{}. {q}", i + 1));
            }
        }
        (prompt, template_len)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum GoldField {
    Variants(Vec<String>),
    PerQuestion(Vec<Vec<String>>),
}

#[derive(Deserialize)]
struct DatasetLine {
    id: String,
    question: String,
    golden_answers: GoldField,
    #[serde(default)]
    env_kind: EnvKind,
}

/// Parses dataset JSONL text. `golden_answers` is either a list of variant
/// lists (one per sub-question) or a flat list of strings, read as the
/// variants of a single answer.
pub fn parse_dataset(text: &str) -> Result<Vec<Task>, ComposeError> {
    let mut tasks = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| ComposeError::Line {
            line: line_no,
            message,
        };
        let parsed: DatasetLine = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let gold = match parsed.golden_answers {
            GoldField::Variants(v) => vec![v],
            GoldField::PerQuestion(v) => v,
        };
        let task = Task::new(parsed.id, parsed.question, gold, parsed.env_kind)
            .map_err(|e| err(e.to_string()))?;
        if !ids.insert(task.id.clone()) {
            return Err(err(format!("duplicate id `{}`", task.id)));
        }
        tasks.push(task);
    }
    Ok(tasks)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Task>, ComposeError> {
    let text = std::fs::read_to_string(path).map_err(|source| ComposeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text)
}

/// Shuffles `tasks` with `seed`, groups them `n` at a time (dropping the
/// remainder) and renders each group into one prompt.
pub fn compose(
    tasks: &[Task],
    n: usize,
    template: &PromptTemplate,
    seed: u64,
) -> Result<Vec<CompositeTask>, ComposeError> {
    if n == 0 {
        return Err(ComposeError::ZeroObjectives);
    }
    if tasks.len() < n {
        return Err(ComposeError::TooFewTasks {
            needed: n,
            found: tasks.len(),
        });
    }
    if template.kind == TemplateKind::Shop && n != 1 {
        return Err(ComposeError::ShopArity);
    }
    let mut order: Vec<&Task> = tasks.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks_exact(n)
        .enumerate()
        .map(|(i, group)| {
            let kind = group[0].env_kind;
            if group.iter().any(|t| t.env_kind != kind) {
                return Err(ComposeError::MixedEnvKinds);
            }
            let questions: Vec<&str> = group.iter().map(|t| t.question.as_str()).collect();
            let (prompt, template_len) = template.render(&questions);
            let id = if n == 1 {
                group[0].id.clone()
            } else {
                format!("c{i:05}")
            };
            let sub_tasks = group.iter().map(|t| (*t).clone()).collect();
            Ok(CompositeTask::new(id, sub_tasks, prompt, template_len)?)
        })
        .collect()
}

/// Gold answers of every sub-task, in sub-question order.
pub fn gold_of(composite: &CompositeTask) -> Vec<Vec<String>> {
    composite
        .sub_tasks
        .iter()
        .flat_map(|t| t.gold_answers.iter().cloned())
        .collect()
}

/// One line of a composite dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositeRecord {
    pub id: String,
    pub objective_count: usize,
    pub prompt: String,
    pub sub_ids: Vec<String>,
    pub gold: Vec<Vec<String>>,
    pub template_len: usize,
    pub sub_tasks: Vec<Task>,
}

impl From<&CompositeTask> for CompositeRecord {
    fn from(c: &CompositeTask) -> Self {
        Self {
            id: c.id.clone(),
            objective_count: c.objective_count,
            prompt: c.rendered_prompt.clone(),
            sub_ids: c.sub_ids(),
            gold: gold_of(c),
            template_len: c.template_len,
            sub_tasks: c.sub_tasks.clone(),
        }
    }
}

impl CompositeRecord {
    pub fn into_task(self) -> Result<CompositeTask, String> {
        let composite = CompositeTask::new(self.id, self.sub_tasks, self.prompt, self.template_len)
            .map_err(|e| e.to_string())?;
        if composite.objective_count != self.objective_count
            || composite.sub_ids() != self.sub_ids
            || gold_of(&composite) != self.gold
        {
            return Err(format!("record `{}` is internally inconsistent", composite.id));
        }
        Ok(composite)
    }
}

pub fn write_composites(path: &Path, composites: &[CompositeTask]) -> Result<(), ComposeError> {
    let io_err = |source| ComposeError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    for c in composites {
        let line = serde_json::to_string(&CompositeRecord::from(c)).expect("composite serializes");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn read_composites(path: &Path) -> Result<Vec<CompositeTask>, ComposeError> {
    let text = std::fs::read_to_string(path).map_err(|source| ComposeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| ComposeError::Line {
            line: i + 1,
            message,
        };
        let record: CompositeRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        out.push(record.into_task().map_err(err)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tasks(n: usize) -> Vec<Task> {
        (0..n)
            .map(|i| {
                Task::new(
                    format!("q{i}"),
                    format!("Question number {i} about topic {i}?"),
                    vec![vec![format!("ans{i}")]],
                    EnvKind::RetrievalQa,
                )
                .unwrap()
            })
            .collect()
    }

    fn qa() -> PromptTemplate {
        PromptTemplate::new(TemplateKind::Qa, TagPresetKind::PromptStyle.preset())
    }

    #[test]
    fn promotion_rule() {
        let t = parse_dataset(r#"{"id":"q1","question":"Where?","golden_answers":["Paris"]}"#).unwrap();
        assert_eq!(t[0].gold_answers, vec![vec!["Paris".to_string()]]);
        let t = parse_dataset(r#"{"id":"q1","question":"Where?","golden_answers":[["a","b"],["c"]]}"#).unwrap();
        assert_eq!(t[0].gold_answers.len(), 2);
    }

    #[test]
    fn malformed_line_is_named() {
        let text = "{\"id\":\"a\",\"question\":\"x\",\"golden_answers\":[\"1\"]}\n\
                    {\"id\":\"b\",\"question\":\"y\",\"golden_answers\":[\"2\"]}\n\
                    {\"id\":\"c\",\"question\":";
        match parse_dataset(text) {
            Err(ComposeError::Line { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let dup = "{\"id\":\"a\",\"question\":\"x\",\"golden_answers\":[\"1\"]}\n\
                   {\"id\":\"a\",\"question\":\"y\",\"golden_answers\":[\"2\"]}";
        assert!(matches!(parse_dataset(dup), Err(ComposeError::Line { line: 2, .. })));
        let empty_gold = r#"{"id":"a","question":"x","golden_answers":[]}"#;
        assert!(parse_dataset(empty_gold).is_err());
        assert!(parse_dataset("").unwrap().is_empty());
    }

    #[test]
    fn pairs() {
        let out = compose(&tasks(4), 2, &qa(), 1).unwrap();
        assert_eq!(out.len(), 2);
        for c in &out {
            assert_eq!(c.objective_count, 2);
            for t in &c.sub_tasks {
                assert!(c.rendered_prompt.contains(&t.question));
            }
            assert!(c.template().ends_with("Answer the following questions:"));
            assert!(c.question_block().starts_with("\n1. "));
        }
    }

    #[test]
    fn single_objective_template() {
        let out = compose(&tasks(3), 1, &qa(), 1).unwrap();
        for c in &out {
            assert!(c.rendered_prompt.ends_with(&format!("Question: {}", c.sub_tasks[0].question)));
            assert_eq!(c.question_block(), c.sub_tasks[0].question);
        }
    }

    #[test]
    fn seeded_determinism() {
        let a = compose(&tasks(5), 2, &qa(), 7).unwrap();
        let b = compose(&tasks(5), 2, &qa(), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn arity_errors() {
        assert!(matches!(compose(&tasks(3), 0, &qa(), 0), Err(ComposeError::ZeroObjectives)));
        assert!(matches!(compose(&tasks(3), 4, &qa(), 0), Err(ComposeError::TooFewTasks { .. })));
        let shop = PromptTemplate::new(TemplateKind::Shop, TagPresetKind::PaperBody.preset());
        assert!(matches!(compose(&tasks(3), 2, &shop, 0), Err(ComposeError::ShopArity)));
    }

    #[test]
    fn template_follows_preset() {
        let is_style = PromptTemplate::new(TemplateKind::Qa, TagPresetKind::PaperBody.preset());
        let (prompt, _) = is_style.render(&["x"]);
        assert!(prompt.contains("<IS> ... </IS><query> ... </query>"));
        assert!(!prompt.contains("<think>"));
        let (shop, len) =
            PromptTemplate::new(TemplateKind::Shop, TagPresetKind::PaperBody.preset()).render(&["a lamp"]);
        assert!(shop[..len].ends_with("Product Description: "));
        assert!(shop.contains("<query>search[gingko"));
    }

    #[test]
    fn gold_concatenation() {
        let out = compose(&tasks(2), 2, &qa(), 0).unwrap();
        let gold = gold_of(&out[0]);
        let expected: Vec<_> = out[0].sub_tasks.iter().map(|t| t.gold_answers[0].clone()).collect();
        assert_eq!(gold, expected);
        let sixteen = compose(&tasks(32), 16, &qa(), 0).unwrap();
        assert_eq!(gold_of(&sixteen[0]).len(), 16);
        let single = compose(&tasks(1), 1, &qa(), 0).unwrap();
        assert_eq!(gold_of(&single[0]), tasks(1)[0].gold_answers);
    }

    #[test]
    fn exchange_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let out = compose(&tasks(6), 3, &qa(), 2).unwrap();
        write_composites(&path, &out).unwrap();
        assert_eq!(read_composites(&path).unwrap(), out);
        let line = std::fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        for key in ["id", "objective_count", "prompt", "sub_ids", "gold"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    proptest! {
        #[test]
        fn composition_is_a_partition(count in 1usize..40, n in 1usize..8, seed in any::<u64>()) {
            prop_assume!(n <= count);
            let input = tasks(count);
            let out = compose(&input, n, &qa(), seed).unwrap();
            prop_assert_eq!(out.len(), count / n);
            let mut seen = HashSet::new();
            for c in &out {
                let mut last = 0;
                for t in &c.sub_tasks {
                    prop_assert!(seen.insert(t.id.clone()));
                    prop_assert_eq!(c.rendered_prompt.matches(&t.question).count(), 1);
                    let at = c.rendered_prompt.find(&t.question).unwrap();
                    prop_assert!(at >= last);
                    last = at;
                }
            }
            prop_assert!(count - seen.len() < n);
        }
    }
}
