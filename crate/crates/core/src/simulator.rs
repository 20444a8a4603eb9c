//! Conversation drivers for the Full and Sharded settings, and the batch
//! runner shared by every arm.

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arms::{Arm, ArmEnv};
use crate::backend::{ChatBackend, ChatRequest, ChatResponse, SamplingParams};
use crate::domain::{render_context, ChatMessage, Role, Setting, Split, TaskInstance, Trajectory, Turn};
use crate::error::{BackendError, ConfigError, RunError};
use crate::metrics::{RunReport, Verifier};

/// Everything the assistant side of a conversation needs.
#[derive(Clone)]
pub struct Session {
    pub assistant: Arc<dyn ChatBackend>,
    pub params: SamplingParams,
    /// Stored as a leading system turn when non-empty.
    pub system_prompt: String,
    pub max_turns: usize,
    /// Ablation only: reveal shards in a seed-determined random order.
    pub shuffle_shards: bool,
    pub verifier: Verifier,
}

impl Session {
    pub fn new(assistant: Arc<dyn ChatBackend>) -> Self {
        Self {
            assistant,
            params: SamplingParams::default(),
            system_prompt: String::new(),
            max_turns: 64,
            shuffle_shards: false,
            verifier: Verifier::with_stub(),
        }
    }

    pub(crate) fn start(&self, task: &TaskInstance, arm: &str, setting: Setting, seed: i64) -> Trajectory {
        let mut traj = Trajectory::new(task, arm, setting, seed);
        if !self.system_prompt.is_empty() {
            traj.push(Turn::new(Role::System, self.system_prompt.clone(), None));
        }
        traj
    }

    /// System message (if any) followed by `rest`.
    pub fn with_system(&self, rest: Vec<ChatMessage>) -> Vec<ChatMessage> {
        let mut msgs = Vec::with_capacity(rest.len() + 1);
        if !self.system_prompt.is_empty() {
            msgs.push(ChatMessage::system(self.system_prompt.clone()));
        }
        msgs.extend(rest);
        msgs
    }

    pub fn ask(&self, messages: Vec<ChatMessage>, seed: i64) -> Result<ChatResponse, BackendError> {
        call(self.assistant.as_ref(), messages, &self.params, seed)
    }

    pub(crate) fn check_budget(&self, task: &TaskInstance) -> Result<(), RunError> {
        if task.shards.len() > self.max_turns {
            return Err(RunError::TurnBudgetExceeded { shards: task.shards.len(), max_turns: self.max_turns });
        }
        Ok(())
    }

    /// Sets the final answer, score and token total.
    pub(crate) fn finish(&self, task: &TaskInstance, traj: &mut Trajectory) -> Result<(), RunError> {
        traj.final_answer = traj.last_assistant().map(|t| t.content.clone()).unwrap_or_default();
        traj.score = self.verifier.verify(&traj.final_answer, &task.verifier)?;
        traj.finalize_tokens();
        Ok(())
    }
}

pub(crate) fn call(
    backend: &dyn ChatBackend,
    messages: Vec<ChatMessage>,
    params: &SamplingParams,
    seed: i64,
) -> Result<ChatResponse, BackendError> {
    backend.complete(&ChatRequest::new(messages, params, Some(seed)))
}

/// Shard indices in reveal order: stored order, or a seeded permutation
/// when shuffling is enabled.
pub fn reveal_order(task: &TaskInstance, shuffle: bool, seed: i64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..task.shards.len()).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        order.shuffle(&mut rng);
    }
    order
}

/// Single turn carrying the complete instruction.
pub fn run_full(task: &TaskInstance, session: &Session, seed: i64) -> Result<Trajectory, RunError> {
    let mut traj = session.start(task, "full", Setting::Full, seed);
    traj.push(Turn::new(Role::User, task.full_instruction.clone(), None));
    let resp = session.ask(render_context(&traj)?, seed)?;
    traj.push(Turn::new(Role::Assistant, resp.content, Some(resp.usage)));
    session.finish(task, &mut traj)?;
    Ok(traj)
}

/// One shard per user turn, sent verbatim by a user who never confirms or
/// corrects. The assistant sees the whole accumulated context each turn and
/// only its reply to the last shard is scored.
pub fn run_sharded(task: &TaskInstance, session: &Session, seed: i64) -> Result<Trajectory, RunError> {
    session.check_budget(task)?;
    let mut traj = session.start(task, "sharded", Setting::Sharded, seed);
    for idx in reveal_order(task, session.shuffle_shards, seed) {
        traj.push(Turn::new(Role::User, task.shards[idx].text.clone(), None));
        traj.shard_order.push(idx);
        let resp = session.ask(render_context(&traj)?, seed)?;
        traj.push(Turn::new(Role::Assistant, resp.content, Some(resp.usage)));
    }
    session.finish(task, &mut traj)?;
    Ok(traj)
}

/// Batch-level settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub n_runs: usize,
    pub seeds: Vec<i64>,
    pub split: Split,
    pub jobs: usize,
}

impl RunConfig {
    /// `n_runs` runs with seeds `0..n_runs` on the test split.
    pub fn new(n_runs: usize) -> Self {
        Self { n_runs, seeds: (0..n_runs as i64).collect(), split: Split::Test, jobs: 1 }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_runs == 0 {
            return Err(ConfigError::ZeroRuns);
        }
        if self.seeds.len() != self.n_runs {
            return Err(ConfigError::SeedCount { expected: self.n_runs, got: self.seeds.len() });
        }
        let mut seen = HashSet::new();
        for s in &self.seeds {
            if !seen.insert(*s) {
                return Err(ConfigError::DuplicateSeeds(*s));
            }
        }
        Ok(())
    }
}

/// Result of a batch: the score matrix plus every trajectory, ordered by
/// (task, run).
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub report: RunReport,
    pub trajectories: Vec<Trajectory>,
}

impl BatchOutput {
    /// Trajectories as JSON lines.
    pub fn trajectories_jsonl(&self) -> String {
        trajectories_to_jsonl(&self.trajectories)
    }
}

pub fn trajectories_to_jsonl(trajectories: &[Trajectory]) -> String {
    let mut out = String::new();
    for t in trajectories {
        out.push_str(&serde_json::to_string(t).expect("trajectory serializes"));
        out.push('\n');
    }
    out
}

pub fn trajectories_from_jsonl(text: &str) -> Result<Vec<Trajectory>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// Runs `arm` over every (task, run) cell. Cells are independent and may run
/// on `cfg.jobs` worker threads; results are addressed by cell key so the
/// output does not depend on completion order. A failing cell scores 0 and
/// carries its error; only configuration problems abort the batch.
pub fn run_batch(
    tasks: &[TaskInstance],
    arm: &dyn Arm,
    cfg: &RunConfig,
    env: &ArmEnv,
) -> Result<BatchOutput, ConfigError> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(ConfigError::EmptyBatch);
    }
    if let Some(t) = tasks.iter().find(|t| t.split != cfg.split) {
        return Err(ConfigError::Split(format!(
            "task {} is in split {} but the batch runs on {}",
            t.id, t.split, cfg.split
        )));
    }
    if !arm.allowed_on(cfg.split) {
        return Err(ConfigError::Split(format!(
            "arm {} must not be evaluated on the {} split",
            arm.name(),
            cfg.split
        )));
    }
    if arm.setting().is_multi_turn() {
        if let Some(t) = tasks.iter().find(|t| t.shards.len() > env.session.max_turns) {
            return Err(ConfigError::TurnBudget {
                task: t.id.clone(),
                shards: t.shards.len(),
                max_turns: env.session.max_turns,
            });
        }
    }
    arm.check_env(env)?;

    let cells: Vec<(usize, usize)> = (0..tasks.len())
        .flat_map(|ti| (0..cfg.n_runs).map(move |ri| (ti, ri)))
        .collect();
    let run_cell = |&(ti, ri): &(usize, usize)| {
        let task = &tasks[ti];
        let seed = cfg.seeds[ri];
        arm.run(task, env, seed).unwrap_or_else(|e| {
            log::warn!("{} {} seed {seed}: {e}", arm.name(), task.id);
            Trajectory::failed(task, arm.name(), arm.setting(), seed, e.to_string())
        })
    };
    let trajectories: Vec<Trajectory> = if cfg.jobs <= 1 {
        cells.iter().map(run_cell).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| ConfigError::Invalid(format!("thread pool: {e}")))?;
        pool.install(|| cells.par_iter().map(run_cell).collect())
    };

    let report = RunReport::from_trajectories(arm.name(), cfg.split, &cfg.seeds, &trajectories)
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(BatchOutput { report, trajectories })
}
