use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mem1_core::compose::{compose, PromptTemplate, TemplateKind};
use mem1_core::config::{default_turn_budget, ContextMode, RolloutConfig, TagPresetKind};
use mem1_core::envs::{retrieve, Corpus, CorpusEnv, Document};
use mem1_core::masks::{build_masks, stitch, write_export, MaskExport, MaskFormat};
use mem1_core::rollout::{run_rollout, FnPolicy, GenerationRequest, PolicyBackend};
use mem1_core::task::{CompositeTask, EnvKind, Task};
use mem1_core::tokenizer::{BuiltinTokenizer, TokenCounter};
use mem1_core::TrajectoryRecord;

const WORDS: [&str; 16] = [
    "river", "stone", "castle", "founded", "northern", "empire", "harbor", "village", "merchant",
    "treaty", "bridge", "valley", "archive", "market", "council", "garden",
];

fn text(seed: usize, n: usize) -> String {
    (0..n)
        .map(|i| WORDS[(seed * 31 + i * 7 + i / 3) % WORDS.len()])
        .collect::<Vec<_>>()
        .join(" ")
}

fn corpus(docs: usize) -> Arc<Corpus> {
    let docs = (0..docs)
        .map(|d| Document {
            doc_id: format!("d{d:04}"),
            title: format!("Entry topic{}", d % 64),
            body: format!("topic{} {}", d % 64, text(d, 120)),
        })
        .collect();
    Arc::new(Corpus::new(docs).unwrap())
}

fn composite(n: usize) -> CompositeTask {
    let tasks: Vec<Task> = (0..n)
        .map(|i| {
            Task::new(format!("q{i}"), format!("Who founded topic{i}?"), vec![vec![format!("founder{i}")]], EnvKind::RetrievalQa)
                .unwrap()
        })
        .collect();
    let template = PromptTemplate::new(TemplateKind::Qa, TagPresetKind::PromptStyle.preset());
    compose(&tasks, n, &template, 0).unwrap().remove(0)
}

fn policy(n: usize) -> impl PolicyBackend {
    FnPolicy::new(move |req: &GenerationRequest<'_>| {
        let state = text(req.turn, 24);
        if req.turn < n {
            format!("<think>{state}</think>\n<search>topic{} founder</search>", req.turn)
        } else {
            let answers: Vec<String> = (0..n).map(|i| format!("founder{i}")).collect();
            format!("<think>{state}</think>\n<answer>{}</answer>", answers.join("; "))
        }
    })
}

fn trajectory(n: usize, mode: ContextMode, corpus: &Arc<Corpus>) -> TrajectoryRecord {
    let config = RolloutConfig {
        max_turns: default_turn_budget(n),
        mode,
        ..RolloutConfig::default()
    };
    let mut env = CorpusEnv::new(corpus.clone(), config.retrieval_k);
    run_rollout(&composite(n), &policy(n), &mut env, &config).unwrap()
}

fn tokenize(c: &mut Criterion) {
    let tok = BuiltinTokenizer::new();
    let input = text(1, 2000);
    c.bench_function("tokenize/encode_2000_words", |b| b.iter(|| tok.encode(black_box(&input))));
    let ids = tok.encode(&input);
    c.bench_function("tokenize/decode_2000_words", |b| b.iter(|| tok.decode(black_box(&ids)).unwrap()));
}

fn retrieval(c: &mut Criterion) {
    let mut group = c.benchmark_group("retrieve_top3");
    for docs in [256, 2048] {
        let corpus = corpus(docs);
        group.bench_with_input(BenchmarkId::from_parameter(docs), &corpus, |b, corpus| {
            b.iter(|| retrieve(corpus, black_box("topic7 founder castle"), 3))
        });
    }
    group.finish();
}

fn rollout(c: &mut Criterion) {
    let corpus = corpus(256);
    let mut group = c.benchmark_group("rollout");
    for n in [1, 4, 8] {
        for mode in [ContextMode::Consolidate, ContextMode::FullAppend] {
            group.bench_function(BenchmarkId::new(mode.to_string(), n), |b| {
                b.iter(|| trajectory(n, mode, &corpus))
            });
        }
    }
    group.finish();
}

fn masks(c: &mut Criterion) {
    let corpus = corpus(256);
    let tok = BuiltinTokenizer::new();
    let mut group = c.benchmark_group("masks");
    for n in [2, 8] {
        let record = trajectory(n, ContextMode::Consolidate, &corpus);
        group.bench_function(BenchmarkId::new("stitch", n), |b| b.iter(|| stitch(&record, &tok).unwrap()));
        let st = stitch(&record, &tok).unwrap();
        group.bench_function(BenchmarkId::new("build", n), |b| b.iter(|| build_masks(black_box(&st))));
        let (mask, loss) = build_masks(&st);
        let data = MaskExport::new(&st, &mask, &loss);
        for format in [MaskFormat::DenseBitpack, MaskFormat::IndexList] {
            group.bench_function(BenchmarkId::new(format!("export_{format:?}"), n), |b| {
                b.iter(|| write_export(&data, format).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, tokenize, retrieval, rollout, masks);
criterion_main!(benches);
