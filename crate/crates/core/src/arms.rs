//! Experimental arms behind a common trait, registered by name.
//!
//! | name       | setting       | driver                                   |
//! |------------|---------------|------------------------------------------|
//! | `full`     | Full          | [`simulator::run_full`]                  |
//! | `sharded`  | Sharded       | [`simulator::run_sharded`]               |
//! | `mediated` | Mediated      | [`mediator::run_mediated`]               |
//! | `sum`      | SumBaseline   | [`baselines::run_sum`]                   |
//! | `mem`      | MemBaseline   | [`baselines::run_mem`]                   |
//! | `icl`      | IclBaseline   | [`baselines::run_icl`]                   |

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::baselines;
use crate::domain::{Setting, Split, TaskInstance, Trajectory};
use crate::error::{ConfigError, RunError};
use crate::mediator::{self, MediatorSetup};
use crate::refiner::{ContrastivePair, ExperienceSet};
use crate::simulator::{self, Session};

/// Shared, read-only inputs for a batch.
#[derive(Clone)]
pub struct ArmEnv {
    pub session: Session,
    /// Mediator for `mediated`/`icl`; also serves as the summarizer (`sum`)
    /// and fact extractor (`mem`).
    pub mediator: Option<MediatorSetup>,
    pub experiences: ExperienceSet,
    pub pairs: Vec<ContrastivePair>,
    /// Facts retrieved per turn by the memory arm.
    pub mem_k: usize,
}

impl ArmEnv {
    pub fn new(session: Session) -> Self {
        Self {
            session,
            mediator: None,
            experiences: ExperienceSet::empty("default"),
            pairs: Vec::new(),
            mem_k: 3,
        }
    }

    pub fn with_mediator(mut self, mediator: MediatorSetup) -> Self {
        self.mediator = Some(mediator);
        self
    }

    pub fn with_experiences(mut self, experiences: ExperienceSet) -> Self {
        self.experiences = experiences;
        self
    }

    pub fn with_pairs(mut self, pairs: Vec<ContrastivePair>) -> Self {
        self.pairs = pairs;
        self
    }

    pub(crate) fn mediator(&self, arm: &str) -> Result<&MediatorSetup, RunError> {
        self.mediator
            .as_ref()
            .ok_or_else(|| RunError::MissingResource(arm.to_string(), "a mediator backend"))
    }
}

/// One way of conducting a conversation over a task.
pub trait Arm: Send + Sync {
    fn name(&self) -> &'static str;

    fn setting(&self) -> Setting;

    /// Whether the arm may run on tasks of `split`. History-collection arms
    /// run on both splits; everything else is evaluation-only.
    fn allowed_on(&self, split: Split) -> bool {
        split == Split::Test
    }

    /// Batch-level precondition on the environment.
    fn check_env(&self, _env: &ArmEnv) -> Result<(), ConfigError> {
        Ok(())
    }

    fn run(&self, task: &TaskInstance, env: &ArmEnv, seed: i64) -> Result<Trajectory, RunError>;
}

fn need_mediator(name: &str, env: &ArmEnv) -> Result<(), ConfigError> {
    match env.mediator {
        Some(_) => Ok(()),
        None => Err(ConfigError::Invalid(format!("arm {name} needs a mediator backend"))),
    }
}

struct FullArm;
impl Arm for FullArm {
    fn name(&self) -> &'static str {
        "full"
    }
    fn setting(&self) -> Setting {
        Setting::Full
    }
    fn allowed_on(&self, _: Split) -> bool {
        true
    }
    fn run(&self, task: &TaskInstance, env: &ArmEnv, seed: i64) -> Result<Trajectory, RunError> {
        simulator::run_full(task, &env.session, seed)
    }
}

struct ShardedArm;
impl Arm for ShardedArm {
    fn name(&self) -> &'static str {
        "sharded"
    }
    fn setting(&self) -> Setting {
        Setting::Sharded
    }
    fn allowed_on(&self, _: Split) -> bool {
        true
    }
    fn run(&self, task: &TaskInstance, env: &ArmEnv, seed: i64) -> Result<Trajectory, RunError> {
        simulator::run_sharded(task, &env.session, seed)
    }
}

struct MediatedArm;
impl Arm for MediatedArm {
    fn name(&self) -> &'static str {
        "mediated"
    }
    fn setting(&self) -> Setting {
        Setting::Mediated
    }
    fn check_env(&self, env: &ArmEnv) -> Result<(), ConfigError> {
        need_mediator(self.name(), env)
    }
    fn run(&self, task: &TaskInstance, env: &ArmEnv, seed: i64) -> Result<Trajectory, RunError> {
        mediator::run_mediated(task, &env.session, env.mediator(self.name())?, &env.experiences, seed)
    }
}

struct SumArm;
impl Arm for SumArm {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn setting(&self) -> Setting {
        Setting::SumBaseline
    }
    fn check_env(&self, env: &ArmEnv) -> Result<(), ConfigError> {
        need_mediator(self.name(), env)
    }
    fn run(&self, task: &TaskInstance, env: &ArmEnv, seed: i64) -> Result<Trajectory, RunError> {
        baselines::run_sum(task, &env.session, env.mediator(self.name())?, seed)
    }
}

struct MemArm;
impl Arm for MemArm {
    fn name(&self) -> &'static str {
        "mem"
    }
    fn setting(&self) -> Setting {
        Setting::MemBaseline
    }
    fn check_env(&self, env: &ArmEnv) -> Result<(), ConfigError> {
        if env.mem_k == 0 {
            return Err(ConfigError::Invalid("memory arm needs k >= 1".into()));
        }
        need_mediator(self.name(), env)
    }
    fn run(&self, task: &TaskInstance, env: &ArmEnv, seed: i64) -> Result<Trajectory, RunError> {
        baselines::run_mem(task, &env.session, env.mediator(self.name())?, seed, env.mem_k)
    }
}

struct IclArm;
impl Arm for IclArm {
    fn name(&self) -> &'static str {
        "icl"
    }
    fn setting(&self) -> Setting {
        Setting::IclBaseline
    }
    fn check_env(&self, env: &ArmEnv) -> Result<(), ConfigError> {
        need_mediator(self.name(), env)
    }
    fn run(&self, task: &TaskInstance, env: &ArmEnv, seed: i64) -> Result<Trajectory, RunError> {
        baselines::run_icl(task, &env.session, env.mediator(self.name())?, &env.pairs, seed)
    }
}

/// Arms by name.
#[derive(Clone)]
pub struct ArmRegistry {
    arms: BTreeMap<&'static str, Arc<dyn Arm>>,
}

impl Default for ArmRegistry {
    fn default() -> Self {
        Self::with_builtin()
    }
}

impl ArmRegistry {
    pub fn empty() -> Self {
        Self { arms: BTreeMap::new() }
    }

    pub fn with_builtin() -> Self {
        let mut reg = Self::empty();
        reg.register(Arc::new(FullArm));
        reg.register(Arc::new(ShardedArm));
        reg.register(Arc::new(MediatedArm));
        reg.register(Arc::new(SumArm));
        reg.register(Arc::new(MemArm));
        reg.register(Arc::new(IclArm));
        reg
    }

    pub fn register(&mut self, arm: Arc<dyn Arm>) {
        self.arms.insert(arm.name(), arm);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.arms.keys().copied()
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Arm>, ConfigError> {
        self.arms.get(name).cloned().ok_or_else(|| ConfigError::Unknown {
            kind: "arm",
            name: name.to_string(),
            known: self.names().collect::<Vec<_>>().join(", "),
        })
    }
}
