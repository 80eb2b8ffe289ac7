use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn mem1(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mem1")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_lines(path: &Path, lines: &[Value]) {
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    fs::write(path, text).unwrap();
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let qa: Vec<Value> = (0..7)
            .map(|i| json!({"id": format!("q{i}"), "question": format!("Who built tower {i}?"), "golden_answers": [format!("builder {i}")]}))
            .collect();
        write_lines(&dir.path().join("qa.jsonl"), &qa);
        let docs: Vec<Value> = (0..10)
            .map(|i| json!({"doc_id": format!("d{i}"), "title": format!("Tower {i}"), "body": format!("Tower {i} was built by builder {i} long ago.")}))
            .collect();
        write_lines(&dir.path().join("corpus.jsonl"), &docs);
        // The same script regardless of context, so modes differ only in what
        // the policy was shown.
        let policy = json!([
            "<think>start</think><search>tower</search>",
            "<think>found one</think><search>builder</search>",
            "<think>done</think><answer>builder 1; builder 2</answer>"
        ]);
        fs::write(dir.path().join("policy.json"), policy.to_string()).unwrap();
        fs::write(dir.path().join("env.json"), json!(["doc one", "doc two"]).to_string()).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn compose(&self, n: &str, out: &str) -> Output {
        mem1(&["compose", "--in", p(&self.path("qa.jsonl")), "--n", n, "--seed", "7", "--out", p(&self.path(out))])
    }

    fn rollout(&self, dataset: &str, out: &str, extra: &[&str]) -> Output {
        let policy = format!("scripted:{}", p(&self.path("policy.json")));
        let env = format!("scripted:{}", p(&self.path("env.json")));
        let mut args = vec![
            "rollout",
            "--dataset",
            p_owned(&self.path(dataset)),
            "--out",
            p_owned(&self.path(out)),
            "--policy",
            &policy,
            "--env",
            &env,
        ];
        args.extend_from_slice(extra);
        mem1(&args)
    }
}

fn p_owned(path: &Path) -> &'static str {
    Box::leak(path.to_str().unwrap().to_owned().into_boxed_str())
}

fn archive_files(dir: &Path) -> Vec<(String, Value)> {
    let mut out = Vec::new();
    let mut names: Vec<_> = fs::read_dir(dir.join("trajectories")).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    for path in names {
        let mut v: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        v["wall_time"] = json!(0.0);
        for turn in v["turns"].as_array_mut().unwrap() {
            turn["latency"] = json!(0.0);
            turn["generation"]["latency"] = json!(0.0);
        }
        out.push((path.file_name().unwrap().to_string_lossy().into_owned(), v));
    }
    out
}

#[test]
fn compose_writes_floor_of_n() {
    let fx = Fixture::new();
    let out = fx.compose("2", "qa2.jsonl");
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("seed=7"));
    let text = fs::read_to_string(fx.path("qa2.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 3);
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["objective_count"], 2);
    assert_eq!(first["gold"].as_array().unwrap().len(), 2);
}

#[test]
fn compose_errors() {
    let fx = Fixture::new();
    assert_eq!(code(&fx.compose("0", "x.jsonl")), 1);
    assert_eq!(code(&fx.compose("16", "x.jsonl")), 2);
    assert_eq!(code(&mem1(&["compose", "--n", "2"])), 1);
    assert_eq!(code(&mem1(&["frobnicate"])), 1);
    assert_eq!(code(&mem1(&["--help"])), 0);
}

#[test]
fn rollout_is_deterministic_and_modes_differ_in_snapshots_only() {
    let fx = Fixture::new();
    assert_eq!(code(&fx.compose("2", "qa2.jsonl")), 0);
    for (out, extra) in [("a", &[][..]), ("b", &["--concurrency", "3"][..]), ("c", &["--mode", "full-append"][..])] {
        let o = fx.rollout("qa2.jsonl", out, extra);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = archive_files(&fx.path("a"));
    assert_eq!(a.len(), 3);
    assert_eq!(a, archive_files(&fx.path("b")));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(fx.path("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["succeeded"], 3);
    assert_eq!(manifest["config"]["max_turns"], 6);

    let c = archive_files(&fx.path("c"));
    for ((_, x), (_, y)) in a.iter().zip(&c) {
        let (mut x, mut y) = (x.clone(), y.clone());
        for v in [&mut x, &mut y] {
            v["config"]["mode"] = json!(null);
            for turn in v["turns"].as_array_mut().unwrap() {
                turn["context_snapshot"] = json!(null);
            }
        }
        assert_eq!(x, y);
    }
    assert!(a.iter().zip(&c).any(|((_, x), (_, y))| x["turns"] != y["turns"]));
}

#[test]
fn rollout_input_errors() {
    let fx = Fixture::new();
    assert_eq!(code(&fx.compose("2", "qa2.jsonl")), 0);
    let o = mem1(&[
        "rollout",
        "--dataset",
        p(&fx.path("qa2.jsonl")),
        "--out",
        p(&fx.path("x")),
        "--policy",
        &format!("scripted:{}", p(&fx.path("policy.json"))),
        "--env",
        &format!("corpus:{}", p(&fx.path("missing.jsonl"))),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.jsonl"));
    let o = fx.rollout("qa2.jsonl", "y", &["--mode", "sideways"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn corpus_rollout_and_scoring() {
    let fx = Fixture::new();
    assert_eq!(code(&fx.compose("2", "qa2.jsonl")), 0);
    let o = mem1(&[
        "rollout",
        "--dataset",
        p(&fx.path("qa2.jsonl")),
        "--out",
        p(&fx.path("arch")),
        "--policy",
        &format!("scripted:{}", p(&fx.path("policy.json"))),
        "--env",
        &format!("corpus:{}", p(&fx.path("corpus.jsonl"))),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = mem1(&["score", "--archive", p(&fx.path("arch")), "--out", p(&fx.path("report")), "--plot-data"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(fx.path("report/report.csv")).unwrap();
    // header, 3 trajectories, mean and std
    assert_eq!(csv.lines().count(), 6);
    let report: Value = serde_json::from_str(&fs::read_to_string(fx.path("report/report.json")).unwrap()).unwrap();
    assert_eq!(report["aggregate"]["count"], 3);
    assert!(fs::read_to_string(fx.path("report/scaling.csv")).unwrap().contains("consolidate,2,3"));

    // A corrupt file is skipped and counted.
    fs::write(fx.path("arch/trajectories/zz-broken.json"), "{not json").unwrap();
    let o = mem1(&["score", "--archive", p(&fx.path("arch")), "--out", p(&fx.path("report2"))]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("skipping"));
    let report: Value = serde_json::from_str(&fs::read_to_string(fx.path("report2/report.json")).unwrap()).unwrap();
    assert_eq!(report["aggregate"]["skipped"], 1);
}

#[test]
fn empty_archive_scores_with_warning() {
    let fx = Fixture::new();
    fs::create_dir_all(fx.path("empty")).unwrap();
    let o = mem1(&["score", "--archive", p(&fx.path("empty")), "--out", p(&fx.path("r"))]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    assert_eq!(fs::read_to_string(fx.path("r/report.csv")).unwrap().lines().count(), 3);
    assert_eq!(code(&mem1(&["score", "--archive", p(&fx.path("nope")), "--out", p(&fx.path("r"))])), 2);
}

#[test]
fn export_masks_verify_and_tamper() {
    let fx = Fixture::new();
    assert_eq!(code(&fx.compose("2", "qa2.jsonl")), 0);
    assert_eq!(code(&fx.rollout("qa2.jsonl", "arch", &[])), 0);
    for format in ["dense_bitpack", "index_list"] {
        let out = fx.path(format);
        let o = mem1(&["export-masks", "--archive", p(&fx.path("arch")), "--out", p(&out), "--format", format, "--verify"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let masks: Vec<_> = fs::read_dir(&out)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "mask"))
            .collect();
        assert_eq!(masks.len(), 3);
        assert!(out.join("vocab.json").exists());
    }

    let path = fs::read_dir(fx.path("arch/trajectories")).unwrap().next().unwrap().unwrap().path();
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let snap = v["turns"][1]["context_snapshot"].as_str().unwrap().replace("doc one", "doc 1");
    v["turns"][1]["context_snapshot"] = json!(snap);
    fs::write(&path, v.to_string()).unwrap();
    let o = mem1(&["export-masks", "--archive", p(&fx.path("arch")), "--out", p(&fx.path("t")), "--verify"]);
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains(path.file_name().unwrap().to_str().unwrap()) && err.contains("token"), "{err}");
}

#[test]
fn shop_tasks_end_to_end() {
    let fx = Fixture::new();
    write_lines(
        &fx.path("shop.jsonl"),
        &[json!({"id": "s1", "question": "a red wool blanket under 40 dollars", "golden_answers": ["red", "wool"], "env_kind": "shop"})],
    );
    write_lines(
        &fx.path("catalog.jsonl"),
        &[
            json!({"id": "B01", "title": "Wool blanket", "attributes": ["red", "wool"], "price": 35.0}),
            json!({"id": "B02", "title": "Cotton blanket", "attributes": ["blue", "cotton"], "price": 20.0}),
        ],
    );
    let policy = json!([
        "<think>look</think><search>search[red wool blanket]</search>",
        "<think>first hit</think><search>click[B01]</search>",
        "<think>buy</think><search>click[buy now]</search>"
    ]);
    fs::write(fx.path("shop_policy.json"), policy.to_string()).unwrap();
    let o = mem1(&["compose", "--in", p(&fx.path("shop.jsonl")), "--n", "1", "--out", p(&fx.path("shop_c.jsonl"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(fx.path("shop_c.jsonl")).unwrap().contains("Product Description: "));
    let o = mem1(&[
        "rollout",
        "--dataset",
        p(&fx.path("shop_c.jsonl")),
        "--out",
        p(&fx.path("shop_arch")),
        "--policy",
        &format!("scripted:{}", p(&fx.path("shop_policy.json"))),
        "--env",
        &format!("shop:{}", p(&fx.path("catalog.jsonl"))),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = mem1(&["score", "--archive", p(&fx.path("shop_arch")), "--out", p(&fx.path("shop_r"))]);
    assert_eq!(code(&o), 0);
    let report: Value = serde_json::from_str(&fs::read_to_string(fx.path("shop_r/report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"][0]["reward"], 100.0);
}
