//! In-memory TF-IDF retrieval.
//!
//! Term weight is `ln(1 + tf) * ln(N / df)`; documents are ranked by cosine
//! similarity to the query vector, ties broken by ascending `doc_id`. Terms
//! are the lowercased alphanumeric pieces of the built-in tokenizer. All sums
//! run in lexicographic term order so scores are bit-reproducible.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{read_jsonl, EnvError, Environment, EnvironmentProvider, Observation};
use crate::task::CompositeTask;
use crate::tokenizer::pieces;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub body: String,
}

/// Lowercased alphanumeric terms of `text`.
pub fn doc_terms(text: &str) -> impl Iterator<Item = String> + '_ {
    pieces(text)
        .filter(|p| p.chars().next().is_some_and(char::is_alphanumeric))
        .map(str::to_lowercase)
}

fn term_counts(text: &str) -> BTreeMap<String, u32> {
    let mut counts = BTreeMap::new();
    for term in doc_terms(text) {
        *counts.entry(term).or_insert(0) += 1;
    }
    counts
}

fn searchable_text(doc: &Document) -> String {
    format!("{} {}", doc.title, doc.body)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    /// term -> (document position, term frequency), positions ascending.
    postings: BTreeMap<String, Vec<(usize, u32)>>,
    norms: Vec<f64>,
}

impl Index {
    fn build(docs: &[Document]) -> Self {
        let n = docs.len() as f64;
        let counts: Vec<_> = docs.iter().map(|d| term_counts(&searchable_text(d))).collect();
        let mut postings: BTreeMap<String, Vec<(usize, u32)>> = BTreeMap::new();
        for (d, c) in counts.iter().enumerate() {
            for (term, &tf) in c {
                postings.entry(term.clone()).or_default().push((d, tf));
            }
        }
        let norms = counts
            .iter()
            .map(|c| {
                c.iter()
                    .map(|(term, &tf)| {
                        let idf = (n / postings[term].len() as f64).ln();
                        let w = (tf as f64).ln_1p() * idf;
                        w * w
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        Self { postings, norms }
    }

    pub fn term_count(&self) -> usize {
        self.postings.len()
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    docs: Vec<Document>,
    index: Index,
}

impl Corpus {
    pub fn new(docs: Vec<Document>) -> Result<Self, EnvError> {
        let mut seen = HashSet::new();
        for d in &docs {
            if !seen.insert(d.doc_id.as_str()) {
                return Err(EnvError::DuplicateId(d.doc_id.clone()));
            }
        }
        let index = Index::build(&docs);
        Ok(Self { docs, index })
    }

    /// Reads a JSONL file of `{doc_id, title, body}` records.
    pub fn load_jsonl(path: &Path) -> Result<Self, EnvError> {
        Self::new(read_jsonl(path)?)
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn index(&self) -> &Index {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// True when the stored index equals one rebuilt from the documents.
    pub fn index_consistent(&self) -> bool {
        Index::build(&self.docs) == self.index
    }

    /// Cosine TF-IDF score of every document, in document order.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let n = self.docs.len() as f64;
        let mut dots = vec![0.0f64; self.docs.len()];
        let mut qnorm_sq = 0.0f64;
        for (term, tfq) in term_counts(query) {
            let Some(postings) = self.index.postings.get(&term) else {
                continue;
            };
            let idf = (n / postings.len() as f64).ln();
            let wq = (tfq as f64).ln_1p() * idf;
            qnorm_sq += wq * wq;
            for &(d, tf) in postings {
                dots[d] += wq * ((tf as f64).ln_1p() * idf);
            }
        }
        let qnorm = qnorm_sq.sqrt();
        dots.iter()
            .zip(&self.index.norms)
            .map(|(&dot, &dnorm)| {
                if qnorm > 0.0 && dnorm > 0.0 {
                    dot / (qnorm * dnorm)
                } else {
                    0.0
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    pub score: f64,
}

/// Top-`k` documents for `query`. `k` is clamped to the corpus size; an
/// empty corpus yields no passages.
pub fn retrieve(corpus: &Corpus, query: &str, k: usize) -> Vec<Passage> {
    let scores = corpus.scores(query);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| corpus.docs[a].doc_id.cmp(&corpus.docs[b].doc_id))
    });
    order
        .into_iter()
        .take(k)
        .map(|i| {
            let d = &corpus.docs[i];
            Passage {
                doc_id: d.doc_id.clone(),
                title: d.title.clone(),
                body: d.body.clone(),
                score: scores[i],
            }
        })
        .collect()
}

/// `Doc 1 (Title: ...) body` blocks, one per line.
pub fn render_passages(passages: &[Passage]) -> String {
    passages
        .iter()
        .enumerate()
        .map(|(i, p)| format!("Doc {} (Title: {}) {}", i + 1, p.title, p.body))
        .collect::<Vec<_>>()
        .join("\n")
}

pub struct CorpusEnv {
    corpus: Arc<Corpus>,
    k: usize,
}

impl CorpusEnv {
    pub fn new(corpus: Arc<Corpus>, k: usize) -> Self {
        Self { corpus, k }
    }
}

impl Environment for CorpusEnv {
    fn respond(&mut self, query: &str) -> Result<Observation, EnvError> {
        Ok(Observation::text(render_passages(&retrieve(
            &self.corpus,
            query,
            self.k,
        ))))
    }
}

pub struct CorpusProvider {
    corpus: Arc<Corpus>,
    k: usize,
}

impl CorpusProvider {
    pub fn new(corpus: Arc<Corpus>, k: usize) -> Self {
        Self { corpus, k }
    }
}

impl EnvironmentProvider for CorpusProvider {
    fn open(&self, _task: &CompositeTask) -> Result<Box<dyn Environment>, EnvError> {
        Ok(Box::new(CorpusEnv::new(self.corpus.clone(), self.k)))
    }
}
