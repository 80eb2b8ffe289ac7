//! `mem1`: compose datasets, run rollouts, score archives and export masks.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 integrity error.

mod archive;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use mem1_core::compose::{compose, load_dataset, read_composites, write_composites, PromptTemplate, TemplateKind};
use mem1_core::config::{default_turn_budget, load_config, ContextMode, RolloutConfig, TagPresetKind};
use mem1_core::envs::{
    load_catalog, Corpus, CorpusProvider, EnvironmentProvider, ScriptedProvider, SearchClient, SearchProvider,
    SearchProviderConfig, ShopProvider, DEFAULT_ACTION_BUDGET,
};
use mem1_core::masks::{build_masks, export, stitch, verify, MaskError, MaskFormat};
use mem1_core::metrics::{aggregate, scaling_series, score, write_csv, write_scaling_csv, RewardMode, ScoreFile, ScoreOptions};
use mem1_core::rollout::{run_batch, HttpPolicy, HttpPolicyConfig, PolicyBackend, ScriptedPolicy};
use mem1_core::task::EnvKind;
use mem1_core::tokenizer::{BuiltinTokenizer, TokenCounter};

use archive::{read_archive, write_archive};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Integrity(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Integrity(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Data(m) | Self::Integrity(m) => m,
        }
    }
}

pub fn data<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Data(format!("{context}: {e}"))
}

#[derive(Parser)]
#[command(name = "mem1", version, about = "Constant-memory multi-turn agent rollouts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Group single-question tasks into multi-objective prompts.
    Compose {
        #[arg(long = "in")]
        input: PathBuf,
        /// Objectives per composite.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// `qa` or `shop`; inferred from the tasks when omitted.
        #[arg(long)]
        template: Option<String>,
        #[arg(long, default_value = "prompt_style")]
        tag_preset: TagPresetKind,
    },
    /// Run every composite through a policy and environment.
    Rollout {
        #[arg(long)]
        dataset: PathBuf,
        /// Archive directory to create.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// `consolidate` or `full-append`.
        #[arg(long)]
        mode: Option<ContextMode>,
        /// `scripted:<file>` or `http:<url>`.
        #[arg(long)]
        policy: String,
        /// `corpus:<file>`, `shop:<file>`, `scripted:<file>` or `search:<file>`.
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 1)]
        concurrency: usize,
        /// Defaults to 6 turns for up to 4 objectives and 20 beyond, unless a
        /// config file is given.
        #[arg(long)]
        max_turns: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Extra `key=value` config assignments.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Compute metrics over one or more archives.
    Score {
        #[arg(long = "archive", required = true)]
        archives: Vec<PathBuf>,
        /// Directory for report.json and report.csv.
        #[arg(long)]
        out: PathBuf,
        /// Also write scaling.csv, one row per (mode, objective count).
        #[arg(long)]
        plot_data: bool,
        #[arg(long, default_value = "outcome_only")]
        reward_mode: RewardMode,
        /// Use the exact arithmetic-series dependency length.
        #[arg(long)]
        exact_dependency: bool,
    },
    /// Export attention and loss masks for every trajectory in an archive.
    ExportMasks {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "dense_bitpack")]
        format: MaskFormat,
        /// Check every mask row against the recorded contexts before writing.
        #[arg(long)]
        verify: bool,
    },
}

fn cmd_compose(
    input: &Path,
    n: usize,
    seed: u64,
    out: &Path,
    template: Option<&str>,
    preset: TagPresetKind,
) -> Result<(), CliError> {
    let tasks = load_dataset(input).map_err(data(input.display()))?;
    let kind = match template {
        Some("qa") => TemplateKind::Qa,
        Some("shop") => TemplateKind::Shop,
        Some(other) => return Err(CliError::Usage(format!("unknown template `{other}`"))),
        None if !tasks.is_empty() && tasks.iter().all(|t| t.env_kind == EnvKind::Shop) => TemplateKind::Shop,
        None => TemplateKind::Qa,
    };
    let composites =
        compose(&tasks, n, &PromptTemplate::new(kind, preset.preset()), seed).map_err(data("compose"))?;
    write_composites(out, &composites).map_err(data(out.display()))?;
    println!("wrote {} composites (n={n}, seed={seed}) to {}", composites.len(), out.display());
    Ok(())
}

fn split_spec(spec: &str) -> Result<(&str, &str), CliError> {
    spec.split_once(':')
        .filter(|(_, v)| !v.is_empty())
        .ok_or_else(|| CliError::Usage(format!("expected <kind>:<value>, got `{spec}`")))
}

fn read_text(path: &str) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(data(path))
}

fn open_policy(spec: &str, config: &RolloutConfig) -> Result<Box<dyn PolicyBackend>, CliError> {
    match split_spec(spec)? {
        ("scripted", file) => Ok(Box::new(ScriptedPolicy::from_json(&read_text(file)?).map_err(data(file))?)),
        ("http", url) => Ok(Box::new(HttpPolicy::new(HttpPolicyConfig::from_rollout(config, url)))),
        (kind, _) => Err(CliError::Usage(format!("unknown policy kind `{kind}`"))),
    }
}

fn open_env(spec: &str, config: &RolloutConfig) -> Result<Box<dyn EnvironmentProvider>, CliError> {
    match split_spec(spec)? {
        ("corpus", file) => {
            let corpus = Corpus::load_jsonl(Path::new(file)).map_err(data(file))?;
            Ok(Box::new(CorpusProvider::new(Arc::new(corpus), config.retrieval_k)))
        }
        ("shop", file) => {
            let catalog = load_catalog(Path::new(file)).map_err(data(file))?;
            Ok(Box::new(ShopProvider::new(Arc::new(catalog), DEFAULT_ACTION_BUDGET)))
        }
        ("scripted", file) => Ok(Box::new(ScriptedProvider::from_json(&read_text(file)?).map_err(data(file))?)),
        ("search", file) => {
            let cfg: SearchProviderConfig = serde_json::from_str(&read_text(file)?).map_err(data(file))?;
            Ok(Box::new(SearchProvider::new(SearchClient::new(cfg))))
        }
        (kind, _) => Err(CliError::Usage(format!("unknown environment kind `{kind}`"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_rollout(
    dataset: &Path,
    out: &Path,
    config_path: Option<&Path>,
    mode: Option<ContextMode>,
    policy: &str,
    env: &str,
    concurrency: usize,
    max_turns: Option<usize>,
    seed: Option<u64>,
    overrides: &[String],
) -> Result<(), CliError> {
    let composites = read_composites(dataset).map_err(data(dataset.display()))?;
    let mut config = match config_path {
        Some(p) => load_config(p).map_err(data(p.display()))?,
        None => RolloutConfig {
            max_turns: default_turn_budget(composites.iter().map(|c| c.objective_count).max().unwrap_or(1)),
            ..RolloutConfig::default()
        },
    };
    if let Some(mode) = mode {
        config.mode = mode;
    }
    if let Some(t) = max_turns {
        config.max_turns = t;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    for assignment in overrides {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected KEY=VALUE, got `{assignment}`")))?;
        config.set(k.trim(), v).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let policy = open_policy(policy, &config)?;
    let envs = open_env(env, &config)?;
    let results = run_batch(&composites, policy.as_ref(), envs.as_ref(), &config, concurrency);
    let manifest = write_archive(out, &config, &results)?;
    println!(
        "{} of {} rollouts succeeded; archive at {}",
        manifest.succeeded,
        composites.len(),
        out.display()
    );
    if !composites.is_empty() && manifest.succeeded == 0 {
        return Err(CliError::Data("every rollout failed".into()));
    }
    Ok(())
}

fn cmd_score(
    archives: &[PathBuf],
    out: &Path,
    plot_data: bool,
    reward_mode: RewardMode,
    exact_dependency: bool,
) -> Result<(), CliError> {
    let tok = BuiltinTokenizer::new();
    let options = ScoreOptions {
        reward_mode,
        exact_dependency,
    };
    let mut rows = Vec::new();
    let mut skipped = 0;
    for dir in archives {
        let archive = read_archive(dir)?;
        for (path, why) in &archive.unreadable {
            eprintln!("warning: skipping {}: {why}", path.display());
        }
        skipped += archive.unreadable.len();
        rows.extend(archive.trajectories.iter().map(|(_, t)| score(t, &tok, options)));
    }
    if rows.is_empty() {
        eprintln!("warning: no trajectories to score");
    }
    let agg = aggregate(&rows, skipped);
    std::fs::create_dir_all(out).map_err(data(out.display()))?;
    let json_path = out.join("report.json");
    let file = ScoreFile { rows, aggregate: agg };
    std::fs::write(&json_path, serde_json::to_string_pretty(&file).expect("report serializes"))
        .map_err(data(json_path.display()))?;
    let csv_path = out.join("report.csv");
    let csv_file = std::fs::File::create(&csv_path).map_err(data(csv_path.display()))?;
    write_csv(csv_file, &file.rows, &file.aggregate).map_err(data(csv_path.display()))?;
    if plot_data {
        let path = out.join("scaling.csv");
        let f = std::fs::File::create(&path).map_err(data(path.display()))?;
        write_scaling_csv(f, &scaling_series(&file.rows)).map_err(data(path.display()))?;
    }
    println!(
        "scored {} trajectories ({skipped} skipped); em mean {:.4}, peak tokens mean {:.1}",
        file.aggregate.count, file.aggregate.em.mean, file.aggregate.peak_tokens.mean
    );
    Ok(())
}

fn cmd_export_masks(archive_dir: &Path, out: &Path, format: MaskFormat, check: bool) -> Result<(), CliError> {
    let archive = read_archive(archive_dir)?;
    if let Some((path, why)) = archive.unreadable.first() {
        return Err(CliError::Data(format!("{}: {why}", path.display())));
    }
    std::fs::create_dir_all(out).map_err(data(out.display()))?;
    let tok = BuiltinTokenizer::new();
    let integrity = |path: &Path, e: MaskError| match e {
        e @ MaskError::Integrity { .. } => CliError::Integrity(format!("{}: {e}", path.display())),
        e => CliError::Data(format!("{}: {e}", path.display())),
    };
    for (path, trajectory) in &archive.trajectories {
        let st = stitch(trajectory, &tok).map_err(|e| integrity(path, e))?;
        let (mask, loss) = build_masks(&st);
        if check {
            verify(trajectory, &st, &mask, &tok).map_err(|e| integrity(path, e))?;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("trajectory");
        let target = out.join(format!("{stem}.mask"));
        export(&st, (&mask, &loss), &target, format).map_err(|e| integrity(&target, e))?;
    }
    let vocab_path = out.join("vocab.json");
    let vocab = serde_json::json!({ "counter_id": tok.id(), "pieces": tok.vocabulary() });
    std::fs::write(&vocab_path, serde_json::to_string(&vocab).expect("vocab serializes"))
        .map_err(data(vocab_path.display()))?;
    println!("exported {} mask files to {}", archive.trajectories.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Compose {
            input,
            n,
            seed,
            out,
            template,
            tag_preset,
        } => cmd_compose(&input, n as usize, seed, &out, template.as_deref(), tag_preset),
        Command::Rollout {
            dataset,
            out,
            config,
            mode,
            policy,
            env,
            concurrency,
            max_turns,
            seed,
            overrides,
        } => cmd_rollout(
            &dataset,
            &out,
            config.as_deref(),
            mode,
            &policy,
            &env,
            concurrency,
            max_turns,
            seed,
            &overrides,
        ),
        Command::Score {
            archives,
            out,
            plot_data,
            reward_mode,
            exact_dependency,
        } => cmd_score(&archives, &out, plot_data, reward_mode, exact_dependency),
        Command::ExportMasks {
            archive,
            out,
            format,
            verify,
        } => cmd_export_masks(&archive, &out, format, verify),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
