//! A small deterministic web-shop simulator.
//!
//! Actions follow the `search[<keywords>]` / `click[<target>]` grammar.
//! Buying on a product page ends the episode with reward
//! `100 * matched / required`, where the price ceiling (when the goal has
//! one) counts as one required attribute. Every valid action spends one unit
//! of the action budget; running out ends the episode with reward 0.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::corpus::doc_terms;
use super::{read_jsonl, EnvError, Environment, EnvironmentProvider, Observation};
use crate::task::CompositeTask;

pub const RESULTS_PER_PAGE: usize = 5;
pub const DEFAULT_ACTION_BUDGET: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Product {
    pub id: String,
    pub title: String,
    pub attributes: Vec<String>,
    pub price: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShopGoal {
    pub text: String,
    pub required_attributes: Vec<String>,
    pub max_price: Option<f64>,
}

impl ShopGoal {
    /// Goal text is the task question; the required attributes are the
    /// variants of the first gold answer; a price ceiling is read from
    /// phrases like "price lower than 30.00 dollars" or "under $30".
    pub fn from_task(task: &CompositeTask) -> Result<Self, EnvError> {
        let sub = task
            .sub_tasks
            .first()
            .ok_or_else(|| EnvError::Task("shop task without sub-task".into()))?;
        Ok(Self {
            text: sub.question.clone(),
            required_attributes: sub.gold_answers.first().cloned().unwrap_or_default(),
            max_price: parse_price_ceiling(&sub.question),
        })
    }
}

fn parse_price_ceiling(text: &str) -> Option<f64> {
    let lower = text.to_lowercase();
    for marker in ["lower than", "under", "less than", "below"] {
        if let Some(pos) = lower.find(marker) {
            let rest = lower[pos + marker.len()..].trim_start().trim_start_matches('$');
            let number: String = rest
                .chars()
                .take_while(|c| c.is_ascii_digit() || *c == '.')
                .collect();
            if let Ok(v) = number.trim_end_matches('.').parse::<f64>() {
                return Some(v);
            }
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Panel {
    Overview,
    Description,
    Features,
    Color,
    Size,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Page {
    Search,
    Results { query: String, page_no: usize },
    Product { id: String, panel: Panel, query: String, page_no: usize },
    Done,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShopState {
    pub catalog: Arc<Vec<Product>>,
    pub page: Page,
    pub goal: ShopGoal,
    pub budget_actions: usize,
}

impl ShopState {
    pub fn new(catalog: Arc<Vec<Product>>, goal: ShopGoal, budget_actions: usize) -> Self {
        Self {
            catalog,
            page: Page::Search,
            goal,
            budget_actions,
        }
    }

    fn product(&self, id: &str) -> Option<&Product> {
        self.catalog.iter().find(|p| p.id == id)
    }

    /// Catalog matches for `query`, most keyword overlap first, ties by id.
    pub fn search(&self, query: &str) -> Vec<&Product> {
        let keywords: Vec<String> = doc_terms(query).collect();
        let mut hits: Vec<(usize, &Product)> = self
            .catalog
            .iter()
            .filter_map(|p| {
                let text = format!("{} {}", p.title, p.attributes.join(" "));
                let terms: Vec<String> = doc_terms(&text).collect();
                let overlap = keywords.iter().filter(|k| terms.contains(k)).count();
                (overlap > 0).then_some((overlap, p))
            })
            .collect();
        hits.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
        hits.into_iter().map(|(_, p)| p).collect()
    }

    fn results_page(&self, query: &str, page_no: usize) -> Vec<&Product> {
        self.search(query)
            .into_iter()
            .skip(page_no * RESULTS_PER_PAGE)
            .take(RESULTS_PER_PAGE)
            .collect()
    }

    fn page_count(&self, query: &str) -> usize {
        self.search(query).len().div_ceil(RESULTS_PER_PAGE)
    }

    /// Reward for buying `product`, in `[0, 100]`.
    pub fn score(&self, product: &Product) -> f64 {
        let mut total = self.goal.required_attributes.len();
        let mut matched = self
            .goal
            .required_attributes
            .iter()
            .filter(|a| {
                product
                    .attributes
                    .iter()
                    .any(|p| p.eq_ignore_ascii_case(a.trim()))
            })
            .count();
        if let Some(max) = self.goal.max_price {
            total += 1;
            if product.price <= max {
                matched += 1;
            }
        }
        if total == 0 {
            100.0
        } else {
            100.0 * matched as f64 / total as f64
        }
    }

    /// Text of the current page, wrapped in `<state>` tags.
    pub fn render(&self) -> String {
        let body = match &self.page {
            Page::Search => "Search page. Available actions: search[<keywords>]".to_string(),
            Page::Results { query, page_no } => {
                let items: Vec<String> = self
                    .results_page(query, *page_no)
                    .iter()
                    .map(|p| format!("[{}] {} ${:.2}", p.id, p.title, p.price))
                    .collect();
                let pages = self.page_count(query).max(1);
                let mut actions = vec!["click[<item id>]".to_string()];
                if *page_no + 1 < pages {
                    actions.push("click[next >]".into());
                }
                if *page_no > 0 {
                    actions.push("click[< prev]".into());
                }
                actions.push("click[back to search]".into());
                format!(
                    "Results for \"{query}\" (page {} of {pages}): {}. Available actions: {}",
                    page_no + 1,
                    if items.is_empty() { "no results".to_string() } else { items.join("; ") },
                    actions.join(", ")
                )
            }
            Page::Product { id, panel, .. } => {
                let p = self.product(id).expect("product page for catalog item");
                let detail = match panel {
                    Panel::Overview => format!("{} ${:.2}", p.title, p.price),
                    Panel::Description => format!("Description: {}", p.title),
                    Panel::Features => format!("Features: {}", p.attributes.join(", ")),
                    Panel::Color | Panel::Size => {
                        let key = if *panel == Panel::Color { "color" } else { "size" };
                        let opts: Vec<&str> = p
                            .attributes
                            .iter()
                            .filter(|a| a.to_lowercase().contains(key))
                            .map(String::as_str)
                            .collect();
                        format!("Options ({key}): {}", if opts.is_empty() { "none".into() } else { opts.join(", ") })
                    }
                };
                format!(
                    "Product [{id}] {detail}. Available actions: click[description], click[features], click[color], click[size], click[buy now], click[< prev], click[back to search]"
                )
            }
            Page::Done => "Episode finished.".to_string(),
        };
        format!("<state>{body}</state>")
    }
}

enum ShopAction<'a> {
    Search(&'a str),
    Click(&'a str),
}

fn parse_action(action: &str) -> Option<ShopAction<'_>> {
    let action = action.trim();
    let inner = |prefix: &str| {
        action
            .strip_prefix(prefix)
            .and_then(|r| r.strip_suffix(']'))
            .map(str::trim)
    };
    if let Some(kw) = inner("search[") {
        return (!kw.is_empty()).then_some(ShopAction::Search(kw));
    }
    inner("click[").map(ShopAction::Click)
}

fn invalid(state: &ShopState) -> (Observation, ShopState) {
    (
        Observation {
            text: format!("invalid action {}", state.render()),
            reward: None,
            done: state.page == Page::Done,
        },
        state.clone(),
    )
}

/// One deterministic transition. Malformed or unavailable actions leave the
/// state untouched and report `invalid action`.
pub fn shop_step(state: &ShopState, action: &str) -> (Observation, ShopState) {
    let Some(parsed) = parse_action(action) else {
        return invalid(state);
    };
    let next_page = match (&state.page, parsed) {
        (Page::Done, _) => None,
        (Page::Search, ShopAction::Search(kw)) => Some(Page::Results {
            query: kw.to_owned(),
            page_no: 0,
        }),
        (Page::Results { .. } | Page::Product { .. }, ShopAction::Click("back to search")) => {
            Some(Page::Search)
        }
        (Page::Results { query, page_no }, ShopAction::Click(target)) => match target {
            "next >" if page_no + 1 < state.page_count(query) => Some(Page::Results {
                query: query.clone(),
                page_no: page_no + 1,
            }),
            "< prev" if *page_no > 0 => Some(Page::Results {
                query: query.clone(),
                page_no: page_no - 1,
            }),
            id => state
                .results_page(query, *page_no)
                .iter()
                .find(|p| p.id == id)
                .map(|p| Page::Product {
                    id: p.id.clone(),
                    panel: Panel::Overview,
                    query: query.clone(),
                    page_no: *page_no,
                }),
        },
        (Page::Product { id, query, page_no, .. }, ShopAction::Click(target)) => {
            let panel = |panel| Page::Product {
                id: id.clone(),
                panel,
                query: query.clone(),
                page_no: *page_no,
            };
            match target {
                "description" => Some(panel(Panel::Description)),
                "features" => Some(panel(Panel::Features)),
                "color" => Some(panel(Panel::Color)),
                "size" => Some(panel(Panel::Size)),
                "< prev" => Some(Page::Results {
                    query: query.clone(),
                    page_no: *page_no,
                }),
                "buy now" => {
                    let product = state.product(id).expect("product page for catalog item");
                    let reward = state.score(product);
                    let mut next = state.clone();
                    next.page = Page::Done;
                    next.budget_actions = next.budget_actions.saturating_sub(1);
                    return (
                        Observation {
                            text: format!("Purchased [{id}]. Reward: {reward:.1}"),
                            reward: Some(reward),
                            done: true,
                        },
                        next,
                    );
                }
                _ => None,
            }
        }
        _ => None,
    };
    let Some(page) = next_page else {
        return invalid(state);
    };
    let mut next = state.clone();
    next.page = page;
    next.budget_actions = next.budget_actions.saturating_sub(1);
    if next.budget_actions == 0 {
        next.page = Page::Done;
        return (
            Observation {
                text: "Action budget exhausted without a purchase.".into(),
                reward: Some(0.0),
                done: true,
            },
            next,
        );
    }
    (Observation::text(next.render()), next)
}

/// Reads a JSONL catalog of `{id, title, attributes, price}` records.
pub fn load_catalog(path: &Path) -> Result<Vec<Product>, EnvError> {
    let products: Vec<Product> = read_jsonl(path)?;
    let mut ids = std::collections::HashSet::new();
    for p in &products {
        if !ids.insert(p.id.as_str()) {
            return Err(EnvError::DuplicateId(p.id.clone()));
        }
    }
    Ok(products)
}

pub struct ShopEnv {
    state: ShopState,
}

impl ShopEnv {
    pub fn new(state: ShopState) -> Self {
        Self { state }
    }

    pub fn state(&self) -> &ShopState {
        &self.state
    }
}

impl Environment for ShopEnv {
    fn respond(&mut self, query: &str) -> Result<Observation, EnvError> {
        let (obs, next) = shop_step(&self.state, query);
        self.state = next;
        Ok(obs)
    }
}

pub struct ShopProvider {
    catalog: Arc<Vec<Product>>,
    budget: usize,
}

impl ShopProvider {
    pub fn new(catalog: Arc<Vec<Product>>, budget: usize) -> Self {
        Self { catalog, budget }
    }
}

impl EnvironmentProvider for ShopProvider {
    fn open(&self, task: &CompositeTask) -> Result<Box<dyn Environment>, EnvError> {
        let goal = ShopGoal::from_task(task)?;
        Ok(Box::new(ShopEnv::new(ShopState::new(
            self.catalog.clone(),
            goal,
            self.budget,
        ))))
    }
}
