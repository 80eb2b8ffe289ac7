//! Multi-turn agent rollouts with constant-size working memory.
//!
//! The policy keeps only its latest internal state, query and feedback in
//! context; [`rollout::run_rollout`] drives an episode, [`masks`] rebuilds
//! the per-token visibility a trainer needs, and [`metrics`] scores results.

pub mod compose;
pub mod config;
pub mod context;
pub mod envs;
pub mod masks;
pub mod metrics;
pub mod rollout;
pub mod tagparse;
pub mod task;
pub mod tokenizer;

pub use compose::{compose, gold_of, load_dataset, PromptTemplate, TemplateKind};
pub use config::{ContextMode, RolloutConfig, Tag, TagPreset, TagPresetKind};
pub use context::ContextState;
pub use envs::{Environment, EnvironmentProvider, Observation};
pub use masks::{build_masks, stitch, visible_tokens, Mask1D, Mask2D, MaskFormat, Segment, StitchedTrajectory};
pub use metrics::{MetricReport, RewardMode};
pub use rollout::{run_batch, run_rollout, PolicyBackend, Termination, TrajectoryRecord, TurnRecord};
pub use tagparse::{parse_turn, Action, InvalidReason, ParsedTurn};
pub use task::{CompositeTask, EnvKind, Task};
pub use tokenizer::{BuiltinTokenizer, TokenCounter};
