//! Shared data model: tasks, shards, turns, trajectories and verifier specs,
//! plus task-file validation.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{DomainError, TaskFileError};

/// The four binary-correctness task domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Code,
    Database,
    Actions,
    Math,
}

impl Domain {
    pub const ALL: [Domain; 4] = [Domain::Code, Domain::Database, Domain::Actions, Domain::Math];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Code => "code",
            Domain::Database => "database",
            Domain::Actions => "actions",
            Domain::Math => "math",
        }
    }

    /// Column title used in Table-style reports.
    pub fn title(self) -> &'static str {
        match self {
            Domain::Code => "Code",
            Domain::Database => "Database",
            Domain::Actions => "Actions",
            Domain::Math => "Math",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Test,
    Fewshot,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Test => "test",
            Split::Fewshot => "fewshot",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shard {
    pub index: usize,
    pub text: String,
}

/// Expected value of a verifier: either a literal string or a number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Expected {
    Number(f64),
    Text(String),
}

impl Expected {
    pub fn as_text(&self) -> String {
        match self {
            Expected::Number(n) => format_number(*n),
            Expected::Text(s) => s.clone(),
        }
    }
}

fn format_number(n: f64) -> String {
    if n.fract() == 0.0 && n.abs() < 1e15 {
        format!("{}", n as i64)
    } else {
        format!("{n}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Normalized answer must contain the normalized expected string.
    #[default]
    Contains,
    /// Normalized answer must equal the normalized expected string.
    Equals,
}

/// How a final answer is scored. Carried inline in the task file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VerifierSpec {
    ExactMatch {
        expected: Expected,
        #[serde(default)]
        mode: MatchMode,
    },
    NumericTolerance {
        expected: f64,
        tolerance: f64,
    },
    KeywordSet {
        keywords: Vec<String>,
    },
    ExternalStub {
        expected: Expected,
    },
}

impl VerifierSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            VerifierSpec::ExactMatch { .. } => "exact_match",
            VerifierSpec::NumericTolerance { .. } => "numeric_tolerance",
            VerifierSpec::KeywordSet { .. } => "keyword_set",
            VerifierSpec::ExternalStub { .. } => "external_stub",
        }
    }

    /// Checks the structural invariants serde cannot express.
    pub fn validate(&self) -> Result<(), String> {
        match self {
            VerifierSpec::NumericTolerance { expected, tolerance } => {
                if !expected.is_finite() {
                    return Err("expected must be a finite number".into());
                }
                if !(tolerance.is_finite() && *tolerance >= 0.0) {
                    return Err("tolerance must be a non-negative number".into());
                }
            }
            VerifierSpec::KeywordSet { keywords } => {
                if keywords.is_empty() {
                    return Err("keywords must be non-empty".into());
                }
                if keywords.iter().any(|k| k.trim().is_empty()) {
                    return Err("keywords must not be blank".into());
                }
            }
            VerifierSpec::ExactMatch { .. } | VerifierSpec::ExternalStub { .. } => {}
        }
        Ok(())
    }
}

/// One benchmark problem.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub id: String,
    pub domain: Domain,
    pub full_instruction: String,
    pub shards: Vec<Shard>,
    pub verifier: VerifierSpec,
    pub split: Split,
}

impl TaskInstance {
    pub fn shard_texts(&self) -> impl Iterator<Item = &str> {
        self.shards.iter().map(|s| s.text.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl TokenUsage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

impl std::ops::Add for TokenUsage {
    type Output = TokenUsage;
    fn add(self, rhs: TokenUsage) -> TokenUsage {
        TokenUsage {
            prompt_tokens: self.prompt_tokens + rhs.prompt_tokens,
            completion_tokens: self.completion_tokens + rhs.completion_tokens,
        }
    }
}

impl std::ops::AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: TokenUsage) {
        *self = *self + rhs;
    }
}

/// A (role, content) pair as sent to a chat backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self { role, content: content.into() }
    }
    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }
}

/// One turn of a conversation.
///
/// On user turns of the mediated and baseline arms, `token_usage` carries the
/// cost of the auxiliary call (mediator, summarizer, fact extractor) made on
/// behalf of that turn, so that a trajectory's token total is always the sum
/// over its turns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_usage: Option<TokenUsage>,
}

impl Turn {
    pub fn new(role: Role, content: impl Into<String>, token_usage: Option<TokenUsage>) -> Self {
        Self { role, content: content.into(), token_usage }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    Full,
    Sharded,
    Mediated,
    SumBaseline,
    MemBaseline,
    IclBaseline,
}

impl Setting {
    /// Settings whose user turns are one shard each.
    pub fn is_multi_turn(self) -> bool {
        !matches!(self, Setting::Full)
    }
}

/// What an intermediate layer (mediator, summarizer, memory) handed to the
/// assistant for one user turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Explication {
    /// 0-based index of the user turn this record belongs to.
    pub user_turn: usize,
    /// The text the assistant received as its user message (or the system
    /// note, for the memory arm).
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

/// A complete conversation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub domain: Domain,
    pub split: Split,
    pub arm: String,
    pub setting: Setting,
    pub seed: i64,
    pub turns: Vec<Turn>,
    /// Shard indices in the order they were revealed.
    #[serde(default)]
    pub shard_order: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub explications: Vec<Explication>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub mediator_fallback: bool,
    pub final_answer: String,
    pub score: f64,
    pub total_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Trajectory {
    pub fn new(task: &TaskInstance, arm: &str, setting: Setting, seed: i64) -> Self {
        Self {
            task_id: task.id.clone(),
            domain: task.domain,
            split: task.split,
            arm: arm.to_string(),
            setting,
            seed,
            turns: Vec::new(),
            shard_order: Vec::new(),
            explications: Vec::new(),
            mediator_fallback: false,
            final_answer: String::new(),
            score: 0.0,
            total_tokens: 0,
            error: None,
        }
    }

    /// A placeholder for a cell whose conversation could not be completed.
    pub fn failed(task: &TaskInstance, arm: &str, setting: Setting, seed: i64, error: String) -> Self {
        let mut traj = Self::new(task, arm, setting, seed);
        traj.error = Some(error);
        traj
    }

    pub fn push(&mut self, turn: Turn) {
        self.turns.push(turn);
    }

    pub fn user_turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(|t| t.role == Role::User)
    }

    pub fn last_assistant(&self) -> Option<&Turn> {
        self.turns.iter().rev().find(|t| t.role == Role::Assistant)
    }

    /// Sum of per-turn usage.
    pub fn turn_token_sum(&self) -> u64 {
        self.turns
            .iter()
            .filter_map(|t| t.token_usage)
            .map(|u| u.total())
            .sum()
    }

    /// Recomputes `total_tokens` from the turns.
    pub fn finalize_tokens(&mut self) {
        self.total_tokens = self.turn_token_sum();
    }

    /// True when shards were revealed in stored order.
    pub fn shard_order_monotone(&self) -> bool {
        self.shard_order.windows(2).all(|w| w[0] < w[1])
    }

    /// Checks the setting-specific structural invariants of a completed
    /// (non-errored) trajectory.
    pub fn check_invariants(&self, shard_count: usize) -> Result<(), String> {
        render_context(self).map_err(|e| e.to_string())?;
        let users = self.user_turns().count();
        match self.setting {
            Setting::Full => {
                if users != 1 {
                    return Err(format!("full trajectory has {users} user turns"));
                }
            }
            _ => {
                if users != shard_count {
                    return Err(format!("{users} user turns for {shard_count} shards"));
                }
            }
        }
        if self.total_tokens != self.turn_token_sum() {
            return Err(format!(
                "total_tokens {} != turn sum {}",
                self.total_tokens,
                self.turn_token_sum()
            ));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(format!("score {} outside [0,1]", self.score));
        }
        Ok(())
    }
}

/// Renders a trajectory's turns into backend messages, checking that roles
/// alternate user/assistant after any leading system turns.
pub fn render_context(traj: &Trajectory) -> Result<Vec<ChatMessage>, DomainError> {
    render_turns(&traj.turns)
}

pub fn render_turns(turns: &[Turn]) -> Result<Vec<ChatMessage>, DomainError> {
    let mut expected = Role::User;
    let mut in_preamble = true;
    for (i, turn) in turns.iter().enumerate() {
        if in_preamble && turn.role == Role::System {
            continue;
        }
        in_preamble = false;
        if turn.role != expected {
            return Err(DomainError::AlternationViolation {
                index: i,
                expected,
                found: turn.role,
            });
        }
        expected = match expected {
            Role::User => Role::Assistant,
            _ => Role::User,
        };
    }
    Ok(turns
        .iter()
        .map(|t| ChatMessage::new(t.role, t.content.clone()))
        .collect())
}

/// Plain-text transcript of a message list, one `[role] content` block per
/// message. This is the form in which contexts are embedded into the
/// prompts of mediator, summarizer and refiner calls.
pub fn render_transcript(messages: &[ChatMessage]) -> String {
    messages
        .iter()
        .map(|m| format!("[{}] {}", m.role, m.content))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Inverse of [`render_transcript`]: splits a transcript into messages.
/// Lines that do not start with a role tag continue the previous message.
pub fn parse_transcript(text: &str) -> Vec<ChatMessage> {
    let mut out: Vec<ChatMessage> = Vec::new();
    for line in text.split('\n') {
        let tagged = [Role::System, Role::User, Role::Assistant]
            .into_iter()
            .find_map(|role| {
                let tag = format!("[{role}] ");
                line.strip_prefix(&tag).map(|rest| (role, rest))
            });
        match (tagged, out.last_mut()) {
            (Some((role, rest)), _) => out.push(ChatMessage::new(role, rest)),
            (None, Some(last)) => {
                last.content.push('\n');
                last.content.push_str(line);
            }
            (None, None) => {}
        }
    }
    out
}

// --- task files -----------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTaskFile {
    tasks: Vec<RawTask>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    id: String,
    domain: Domain,
    full_instruction: String,
    shards: Vec<String>,
    verifier: VerifierSpec,
    split: Split,
}

/// Parses and validates a task file.
pub fn validate_task_file(raw: &[u8]) -> Result<Vec<TaskInstance>, TaskFileError> {
    let de = &mut serde_json::Deserializer::from_slice(raw);
    let file: RawTaskFile = serde_path_to_error::deserialize(de).map_err(|e| TaskFileError::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;

    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(file.tasks.len());
    for (ti, task) in file.tasks.into_iter().enumerate() {
        if task.id.trim().is_empty() {
            return Err(TaskFileError::Schema {
                path: format!("tasks[{ti}].id"),
                message: "id must be non-empty".into(),
            });
        }
        if !seen.insert(task.id.clone()) {
            return Err(TaskFileError::DuplicateId(task.id));
        }
        if task.shards.is_empty() {
            return Err(TaskFileError::EmptyShards(task.id));
        }
        for (si, shard) in task.shards.iter().enumerate() {
            if shard.trim().is_empty() {
                return Err(TaskFileError::Schema {
                    path: format!("tasks[{ti}].shards[{si}]"),
                    message: "shard text must contain a non-whitespace character".into(),
                });
            }
        }
        if task.full_instruction.trim().is_empty() {
            return Err(TaskFileError::Schema {
                path: format!("tasks[{ti}].full_instruction"),
                message: "full_instruction must be non-empty".into(),
            });
        }
        task.verifier.validate().map_err(|message| TaskFileError::Schema {
            path: format!("tasks[{ti}].verifier"),
            message,
        })?;
        out.push(TaskInstance {
            id: task.id,
            domain: task.domain,
            full_instruction: task.full_instruction,
            shards: task
                .shards
                .into_iter()
                .enumerate()
                .map(|(index, text)| Shard { index, text })
                .collect(),
            verifier: task.verifier,
            split: task.split,
        });
    }
    Ok(out)
}

/// Serializes tasks back into the task-file format.
pub fn write_task_file(tasks: &[TaskInstance]) -> String {
    let file = RawTaskFile {
        tasks: tasks
            .iter()
            .map(|t| RawTask {
                id: t.id.clone(),
                domain: t.domain,
                full_instruction: t.full_instruction.clone(),
                shards: t.shards.iter().map(|s| s.text.clone()).collect(),
                verifier: t.verifier.clone(),
                split: t.split,
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("task file serializes")
}
