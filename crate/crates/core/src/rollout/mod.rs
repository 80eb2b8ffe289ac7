//! The rollout loop.
//!
//! Each turn the policy sees the current context and generates until a stop
//! marker. A query is sent to the environment and its (hint-prefixed)
//! feedback becomes the turn's info element; an answer ends the episode; a
//! malformed turn ends it as invalid. On the last allowed turn the query
//! close tag is not a stop marker, so the policy cannot search further.

mod http;
mod policy;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{RolloutConfig, TagPreset};
use crate::context::{hint_text, inject_hint, ContextError, ContextState};
use crate::envs::{EnvError, Environment, EnvironmentProvider, Observation};
use crate::tagparse::{parse_turn, Action, InvalidReason, ParsedTurn};
use crate::task::CompositeTask;

pub use http::{parse_response, ApiStyle, HttpPolicy, HttpPolicyConfig};
pub use policy::{
    finish_text, truncate_at_stop, Finish, FnPolicy, Generation, GenerationRequest, PolicyBackend,
    PolicyError, ScriptedPolicy, TokenUsage,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    /// Zero-based turn number.
    pub index: usize,
    /// Exact context handed to the policy.
    pub context_snapshot: String,
    pub generation: Generation,
    pub parsed: ParsedTurn,
    /// Raw environment feedback, before hint injection.
    pub observation: Option<Observation>,
    /// The hint banner prepended to the feedback, when enabled.
    pub hint: Option<String>,
    /// The info element's content: `hint ++ " " ++ observation`.
    pub info: Option<String>,
    pub valid: bool,
    /// Seconds spent in the policy call.
    pub latency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answered,
    TurnLimit,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub task: CompositeTask,
    pub turns: Vec<TurnRecord>,
    pub final_answer: Option<String>,
    pub terminated: Termination,
    pub config: RolloutConfig,
    /// Reward reported by the environment on its final observation, if any.
    pub env_reward: Option<f64>,
    /// Seconds for the whole episode.
    pub wall_time: f64,
}

impl TrajectoryRecord {
    /// A copy with every timing field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        let mut copy = self.clone();
        copy.wall_time = 0.0;
        for turn in &mut copy.turns {
            turn.latency = 0.0;
            turn.generation.latency = 0.0;
        }
        copy
    }
}

#[derive(Debug, Error)]
pub enum RolloutErrorKind {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Context(#[from] ContextError),
}

/// A failed rollout, with whatever was recorded before the failure.
#[derive(Debug, Error)]
#[error("rollout of `{}` failed at turn {}: {kind}", partial.task.id, partial.turns.len())]
pub struct RolloutError {
    pub kind: RolloutErrorKind,
    pub partial: Box<TrajectoryRecord>,
}

/// Parses a generation, treating a budget-truncated turn without a complete
/// action as `no_action`.
pub fn parse_generation(generation: &Generation, preset: &TagPreset) -> ParsedTurn {
    let mut parsed = parse_turn(&generation.text, preset);
    if generation.finish == Finish::Length && !parsed.action.is_valid() {
        parsed.action = Action::Invalid(InvalidReason::NoAction);
    }
    parsed
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Per-call seed, a function of the run seed, task id and turn only.
pub fn turn_seed(seed: u64, task_id: &str, turn: usize) -> u64 {
    let id_hash = task_id
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    splitmix64(seed ^ splitmix64(id_hash ^ splitmix64(turn as u64)))
}

/// Runs one episode.
pub fn run_rollout(
    task: &CompositeTask,
    policy: &dyn PolicyBackend,
    env: &mut dyn Environment,
    config: &RolloutConfig,
) -> Result<TrajectoryRecord, RolloutError> {
    let start = Instant::now();
    let preset = config.preset();
    let mut state = ContextState::for_task(task, config.mode, preset.clone());
    let mut record = TrajectoryRecord {
        task: task.clone(),
        turns: Vec::new(),
        final_answer: None,
        terminated: Termination::TurnLimit,
        config: config.clone(),
        env_reward: None,
        wall_time: 0.0,
    };
    let fail = |record: &mut TrajectoryRecord, kind: RolloutErrorKind| {
        record.wall_time = start.elapsed().as_secs_f64();
        RolloutError {
            kind,
            partial: Box::new(record.clone()),
        }
    };

    let turns = config.max_turns;
    for t in 0..turns {
        let snapshot = state.render();
        let stops = config.stop_markers(t + 1 == turns);
        let request = GenerationRequest {
            task_id: &task.id,
            turn: t,
            context: &snapshot,
            stop_markers: &stops,
            max_tokens: config.max_tokens_per_generation,
            seed: turn_seed(config.seed, &task.id, t),
        };
        let call = Instant::now();
        let mut generation = match policy.generate(&request) {
            Ok(g) => g,
            Err(e) => return Err(fail(&mut record, e.into())),
        };
        let latency = call.elapsed().as_secs_f64();
        generation.latency = latency;
        if let Some((end, marker)) = truncate_at_stop(&generation.text, &stops) {
            generation.text.truncate(end);
            generation.finish = Finish::StopMarker(marker);
        }
        let parsed = parse_generation(&generation, &preset);
        let mut turn = TurnRecord {
            index: t,
            context_snapshot: snapshot,
            generation,
            valid: parsed.action.is_valid(),
            parsed,
            observation: None,
            hint: None,
            info: None,
            latency,
        };
        match turn.parsed.action.clone() {
            Action::Query(query) => {
                let observation = match env.respond(&query) {
                    Ok(o) => o,
                    Err(e) => return Err(fail(&mut record, e.into())),
                };
                let turns_left = turns - (t + 1);
                let info = if config.hint_enabled {
                    turn.hint = Some(hint_text(turns_left));
                    inject_hint(&observation.text, turns_left)
                } else {
                    observation.text.clone()
                };
                state = match state.advance(&turn.parsed, Some(&info)) {
                    Ok(s) => s,
                    Err(e) => return Err(fail(&mut record, e.into())),
                };
                let done = observation.done;
                if observation.reward.is_some() {
                    record.env_reward = observation.reward;
                }
                turn.info = Some(info);
                turn.observation = Some(observation);
                record.turns.push(turn);
                if done {
                    record.final_answer = Some(query);
                    record.terminated = Termination::Answered;
                    break;
                }
            }
            Action::Answer(answer) => {
                record.turns.push(turn);
                record.final_answer = Some(answer);
                record.terminated = Termination::Answered;
                break;
            }
            Action::Invalid(_) => {
                record.turns.push(turn);
                record.terminated = Termination::Invalid;
                break;
            }
        }
    }
    record.wall_time = start.elapsed().as_secs_f64();
    Ok(record)
}

struct SerializedPolicy<'a> {
    inner: &'a dyn PolicyBackend,
    lock: Mutex<()>,
}

impl PolicyBackend for SerializedPolicy<'_> {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<Generation, PolicyError> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        self.inner.generate(request)
    }
}

struct SerializedEnv {
    inner: Box<dyn Environment>,
    lock: Arc<Mutex<()>>,
}

impl Environment for SerializedEnv {
    fn respond(&mut self, query: &str) -> Result<Observation, EnvError> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        self.inner.respond(query)
    }
}

/// Runs every task, up to `concurrency` at a time (values below 1 run
/// sequentially). Results come back in input order; one task failing does
/// not stop the others.
pub fn run_batch(
    tasks: &[CompositeTask],
    policy: &dyn PolicyBackend,
    envs: &dyn EnvironmentProvider,
    config: &RolloutConfig,
    concurrency: usize,
) -> Vec<Result<TrajectoryRecord, RolloutError>> {
    let serialized;
    let policy: &dyn PolicyBackend = if policy.concurrent() {
        policy
    } else {
        serialized = SerializedPolicy {
            inner: policy,
            lock: Mutex::new(()),
        };
        &serialized
    };
    let env_lock = (!envs.concurrent()).then(|| Arc::new(Mutex::new(())));

    let run_one = |task: &CompositeTask| -> Result<TrajectoryRecord, RolloutError> {
        let mut env = envs.open(task).map_err(|e| RolloutError {
            kind: e.into(),
            partial: Box::new(TrajectoryRecord {
                task: task.clone(),
                turns: Vec::new(),
                final_answer: None,
                terminated: Termination::TurnLimit,
                config: config.clone(),
                env_reward: None,
                wall_time: 0.0,
            }),
        })?;
        if let Some(lock) = &env_lock {
            env = Box::new(SerializedEnv {
                inner: env,
                lock: lock.clone(),
            });
        }
        run_rollout(task, policy, env.as_mut(), config)
    };

    let workers = concurrency.max(1).min(tasks.len());
    if workers <= 1 {
        return tasks.iter().map(run_one).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<TrajectoryRecord, RolloutError>>>> =
        Mutex::new((0..tasks.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(task) = tasks.get(i) else { break };
                let result = run_one(task);
                slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .map(|r| r.expect("every task slot filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TagPresetKind;
    use crate::envs::{scripted_env, ScriptedProvider};
    use crate::task::{EnvKind, Task};
    use std::time::Duration;

    fn task(id: &str) -> CompositeTask {
        let t = Task::new(id, "q?", vec![vec!["a".into()]], EnvKind::RetrievalQa).unwrap();
        CompositeTask::new(id, vec![t], "Question: q?".into(), 10).unwrap()
    }

    fn config() -> RolloutConfig {
        RolloutConfig {
            tag_preset: TagPresetKind::PaperBody,
            ..RolloutConfig::default()
        }
    }

    #[test]
    fn query_then_answer() {
        let policy = ScriptedPolicy::new(vec![
            "<IS>start</IS><query>find</query>".into(),
            "<IS>got it</IS><answer>a</answer>".into(),
        ]);
        let mut env = scripted_env(["doc"]).unwrap();
        let r = run_rollout(&task("t"), &policy, &mut env, &config()).unwrap();
        assert_eq!(r.turns.len(), 2);
        assert_eq!(r.terminated, Termination::Answered);
        assert_eq!(r.final_answer.as_deref(), Some("a"));
        assert_eq!(r.turns[0].info.as_deref(), Some("[HINT: YOU HAVE 5 TURNS LEFT] doc"));
        assert!(r.turns[1].info.is_none());
        assert_eq!(r.turns[0].context_snapshot, "Question: q?");
        assert_eq!(
            r.turns[1].context_snapshot,
            "Question: q?<IS>start</IS><query>find</query><info>[HINT: YOU HAVE 5 TURNS LEFT] doc</info>"
        );
    }

    #[test]
    fn malformed_output_is_invalid() {
        let policy = ScriptedPolicy::new(vec!["<answer>oops".into()]);
        let mut env = scripted_env(["doc"]).unwrap();
        let r = run_rollout(&task("t"), &policy, &mut env, &config()).unwrap();
        assert_eq!(r.turns.len(), 1);
        assert_eq!(r.terminated, Termination::Invalid);
        assert!(!r.turns[0].valid);
        assert!(r.final_answer.is_none());
    }

    #[test]
    fn always_querying_hits_turn_limit() {
        let policy = ScriptedPolicy::new(vec!["<IS>s</IS><query>q</query><answer>x</answer>".into()]);
        let mut env = scripted_env(["doc"]).unwrap();
        let cfg = config();
        let r = run_rollout(&task("t"), &policy, &mut env, &cfg).unwrap();
        // Final turn cannot stop on </query>, so it runs on into the answer.
        assert_eq!(r.turns.len(), 6);
        assert_eq!(r.terminated, Termination::Invalid);
        assert_eq!(r.turns[5].parsed.action, Action::Invalid(InvalidReason::MultipleActions));

        let policy = ScriptedPolicy::new(vec!["<IS>s</IS><query>q</query>".into()]);
        let r = run_rollout(&task("t"), &policy, &mut env, &cfg).unwrap();
        assert_eq!(r.turns.len(), 6);
        assert_eq!(r.terminated, Termination::TurnLimit);
        for turn in &r.turns[..5] {
            assert_eq!(turn.generation.finish, Finish::StopMarker("</query>".into()));
        }
        assert_eq!(r.turns[5].generation.finish, Finish::Eos);
        let hints: Vec<_> = r.turns.iter().map(|t| t.hint.clone().unwrap()).collect();
        assert_eq!(hints[0], "[HINT: YOU HAVE 5 TURNS LEFT]");
        assert_eq!(hints[4], "[HINT: YOU HAVE 1 TURNS LEFT]");
        assert_eq!(hints[5], "[HINT: YOU HAVE 0 TURNS LEFT]");
    }

    #[test]
    fn hint_can_be_disabled() {
        let policy = ScriptedPolicy::new(vec!["<query>q</query>".into(), "<answer>a</answer>".into()]);
        let mut env = scripted_env(["doc"]).unwrap();
        let cfg = RolloutConfig {
            hint_enabled: false,
            ..config()
        };
        let r = run_rollout(&task("t"), &policy, &mut env, &cfg).unwrap();
        assert_eq!(r.turns[0].info.as_deref(), Some("doc"));
        assert!(r.turns[0].hint.is_none());
    }

    #[test]
    fn budget_truncation_is_no_action() {
        let policy = ScriptedPolicy::new(vec!["<IS>a very long internal state</IS><query>q</query>".into()]);
        let mut env = scripted_env(["doc"]).unwrap();
        let cfg = RolloutConfig {
            max_tokens_per_generation: 4,
            ..config()
        };
        let r = run_rollout(&task("t"), &policy, &mut env, &cfg).unwrap();
        assert_eq!(r.turns[0].generation.finish, Finish::Length);
        assert_eq!(r.turns[0].parsed.action, Action::Invalid(InvalidReason::NoAction));
    }

    struct FailingEnv;
    impl Environment for FailingEnv {
        fn respond(&mut self, _: &str) -> Result<Observation, EnvError> {
            Err(EnvError::Transport("down".into()))
        }
    }

    #[test]
    fn transport_failure_carries_partial() {
        let policy = ScriptedPolicy::new(vec!["<query>q</query>".into()]);
        let err = run_rollout(&task("t"), &policy, &mut FailingEnv, &config()).unwrap_err();
        assert!(matches!(err.kind, RolloutErrorKind::Env(_)));
        assert_eq!(err.partial.task.id, "t");
    }

    #[test]
    fn batch_matches_sequential() {
        let tasks: Vec<_> = (0..4).map(|i| task(&format!("t{i}"))).collect();
        let policy = ScriptedPolicy::new(vec![
            "<IS>s</IS><query>q</query>".into(),
            "<IS>s2</IS><answer>a</answer>".into(),
        ])
        .with_task("t2", vec!["<answer>b</answer>".into()]);
        let envs = ScriptedProvider::new(vec!["d1".into(), "d2".into()]);
        let seq: Vec<_> = run_batch(&tasks, &policy, &envs, &config(), 1)
            .into_iter()
            .map(|r| r.unwrap().without_timing())
            .collect();
        let par: Vec<_> = run_batch(&tasks, &policy, &envs, &config(), 2)
            .into_iter()
            .map(|r| r.unwrap().without_timing())
            .collect();
        assert_eq!(seq, par);
        assert_eq!(seq[2].final_answer.as_deref(), Some("b"));
        assert!(run_batch(&[], &policy, &envs, &config(), 3).is_empty());
    }

    #[test]
    fn concurrency_cuts_wall_time() {
        let tasks: Vec<_> = (0..100).map(|i| task(&format!("t{i}"))).collect();
        let policy = ScriptedPolicy::new(vec!["<answer>a</answer>".into()])
            .with_latency(Duration::from_millis(50));
        let envs = ScriptedProvider::new(vec!["d".into()]);
        let start = Instant::now();
        let out = run_batch(&tasks, &policy, &envs, &config(), 10);
        let parallel = start.elapsed();
        assert_eq!(out.len(), 100);
        // Sequentially this is at least 100 * 50 ms.
        assert!(parallel < Duration::from_millis(5000), "{parallel:?}");
    }

    #[test]
    fn seeds_are_stable() {
        assert_eq!(turn_seed(1, "a", 0), turn_seed(1, "a", 0));
        assert_ne!(turn_seed(1, "a", 0), turn_seed(1, "a", 1));
        assert_ne!(turn_seed(1, "a", 0), turn_seed(1, "b", 0));
    }
}
