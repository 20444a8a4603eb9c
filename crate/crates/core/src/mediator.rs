//! The mediator: rewrites the accumulated, ambiguous context plus the user's
//! distilled experiences into one explicit instruction, which the assistant
//! then answers with no conversational history.

use std::path::Path;
use std::sync::Arc;

use crate::backend::{ChatBackend, SamplingParams};
use crate::domain::{
    render_transcript, render_turns, ChatMessage, Explication, Role, Setting, TaskInstance, TokenUsage,
    Trajectory, Turn,
};
use crate::error::{MediatorError, RunError};
use crate::refiner::{ContrastivePair, ExperienceSet};
use crate::simulator::{call, reveal_order, Session};

pub const EXPERIENCES_SLOT: &str = "{{experiences}}";
pub const CONTEXT_SLOT: &str = "{{context}}";

/// The shipped default mediator prompt.
pub const DEFAULT_TEMPLATE: &str = include_str!("../templates/mediator.txt");

/// Mediator prompt template.
///
/// The file is UTF-8 text with an optional `[system]` section and a `[user]`
/// section, each on its own line. `{{experiences}}` must appear in the system
/// part and `{{context}}` in the user part. Without a `[user]` header the
/// whole file is the system part and the user message is the context alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MediatorTemplate {
    system: String,
    user: String,
}

impl Default for MediatorTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("default template is valid")
    }
}

impl MediatorTemplate {
    pub fn parse(text: &str) -> Result<Self, MediatorError> {
        let mut system = Vec::new();
        let mut user: Option<Vec<&str>> = None;
        for line in text.lines() {
            match line.trim_end() {
                "[system]" if user.is_none() => {}
                "[user]" if user.is_none() => user = Some(Vec::new()),
                _ => match user.as_mut() {
                    Some(u) => u.push(line),
                    None => system.push(line),
                },
            }
        }
        let system = system.join("\n").trim().to_string();
        let user = user.map_or_else(|| CONTEXT_SLOT.to_string(), |u| u.join("\n").trim().to_string());
        if !system.contains(EXPERIENCES_SLOT) {
            return Err(MediatorError::Template(format!("system part lacks {EXPERIENCES_SLOT}")));
        }
        if !user.contains(CONTEXT_SLOT) {
            return Err(MediatorError::Template(format!("user part lacks {CONTEXT_SLOT}")));
        }
        if system.contains(CONTEXT_SLOT) || user.contains(EXPERIENCES_SLOT) {
            return Err(MediatorError::Template("placeholder in the wrong section".into()));
        }
        Ok(Self { system, user })
    }

    pub fn load(path: &Path) -> Result<Self, MediatorError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MediatorError::Template(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// `(system, user)` message texts.
    pub fn render(&self, knowledge_block: &str, context: &str) -> (String, String) {
        (
            self.system.replace(EXPERIENCES_SLOT, knowledge_block),
            self.user.replace(CONTEXT_SLOT, context),
        )
    }
}

/// What the mediator is conditioned on.
#[derive(Debug, Clone, Copy)]
pub enum Knowledge<'a> {
    /// Distilled guidelines, one bullet each, in id order.
    Experiences(&'a ExperienceSet),
    /// Raw contrastive pairs, rendered in full (the ICL baseline).
    Pairs(&'a [ContrastivePair]),
}

impl Knowledge<'_> {
    pub fn block(&self) -> String {
        match self {
            Knowledge::Experiences(set) => {
                let mut items: Vec<_> = set.experiences.iter().collect();
                items.sort_by(|a, b| a.id.cmp(&b.id));
                items.iter().map(|e| format!("- {}", e.guideline)).collect::<Vec<_>>().join("\n")
            }
            Knowledge::Pairs(pairs) => pairs
                .iter()
                .enumerate()
                .map(|(i, p)| p.render(i + 1))
                .collect::<Vec<_>>()
                .join("\n\n"),
        }
    }

    pub fn ids(&self) -> Vec<String> {
        match self {
            Knowledge::Experiences(set) => {
                let mut ids: Vec<String> = set.experiences.iter().map(|e| e.id.clone()).collect();
                ids.sort();
                ids
            }
            Knowledge::Pairs(pairs) => pairs.iter().map(|p| p.id()).collect(),
        }
    }
}

/// Mediator backend plus prompt and mode.
#[derive(Clone)]
pub struct MediatorSetup {
    pub backend: Arc<dyn ChatBackend>,
    pub params: SamplingParams,
    pub template: MediatorTemplate,
    /// Ablation: explicate only before the final shard. Earlier turns are
    /// answered from the current user turn alone.
    pub final_only: bool,
}

impl MediatorSetup {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            backend,
            params: SamplingParams::default(),
            template: MediatorTemplate::default(),
            final_only: false,
        }
    }
}

/// A reconstructed, self-contained instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExplicatedInstruction {
    pub text: String,
    /// Non-system turns in the context it was derived from.
    pub source_turn_count: usize,
    pub experiences_used: Vec<String>,
    pub mediator_tokens: TokenUsage,
    /// The mediator returned nothing usable; `text` is the raw context.
    pub fallback: bool,
}

/// The two messages of a mediator call for `context`.
pub fn mediator_messages(context: &[Turn], knowledge: &Knowledge<'_>, template: &MediatorTemplate) -> Vec<ChatMessage> {
    let (system, user) = template.render(&knowledge.block(), &render_raw_context(context));
    vec![ChatMessage::system(system), ChatMessage::user(user)]
}

/// Transcript of the non-system turns.
pub fn render_raw_context(context: &[Turn]) -> String {
    let msgs: Vec<ChatMessage> = context
        .iter()
        .filter(|t| t.role != Role::System)
        .map(|t| ChatMessage::new(t.role, t.content.clone()))
        .collect();
    render_transcript(&msgs)
}

/// One mediator call over the conversation so far.
pub fn explicate(
    context: &[Turn],
    knowledge: &Knowledge<'_>,
    setup: &MediatorSetup,
    seed: i64,
) -> Result<ExplicatedInstruction, MediatorError> {
    if !context.iter().any(|t| t.role == Role::User) {
        return Err(MediatorError::NoUserTurn);
    }
    let messages = mediator_messages(context, knowledge, &setup.template);
    let resp = call(setup.backend.as_ref(), messages, &setup.params, seed)?;
    let (text, fallback) = if resp.content.trim().is_empty() {
        (render_raw_context(context), true)
    } else {
        (resp.content, false)
    };
    Ok(ExplicatedInstruction {
        text,
        source_turn_count: context.iter().filter(|t| t.role != Role::System).count(),
        experiences_used: knowledge.ids(),
        mediator_tokens: resp.usage,
        fallback,
    })
}

/// Sharded user behaviour, but every assistant call receives only the
/// current explicated instruction.
pub fn run_mediated(
    task: &TaskInstance,
    session: &Session,
    setup: &MediatorSetup,
    experiences: &ExperienceSet,
    seed: i64,
) -> Result<Trajectory, RunError> {
    run_explicated(task, session, setup, Knowledge::Experiences(experiences), "mediated", Setting::Mediated, seed)
}

pub(crate) fn run_explicated(
    task: &TaskInstance,
    session: &Session,
    setup: &MediatorSetup,
    knowledge: Knowledge<'_>,
    arm: &str,
    setting: Setting,
    seed: i64,
) -> Result<Trajectory, RunError> {
    session.check_budget(task)?;
    let mut traj = session.start(task, arm, setting, seed);
    let order = reveal_order(task, session.shuffle_shards, seed);
    let last = order.len() - 1;
    for (k, idx) in order.into_iter().enumerate() {
        let shard = task.shards[idx].text.clone();
        traj.shard_order.push(idx);
        let user_turn = traj.user_turns().count();
        let (input, usage) = if setup.final_only && k < last {
            traj.push(Turn::new(Role::User, shard.clone(), None));
            (shard, None)
        } else {
            traj.push(Turn::new(Role::User, shard, None));
            let u = explicate(&traj.turns, &knowledge, setup, seed)?;
            traj.mediator_fallback |= u.fallback;
            traj.explications.push(Explication {
                user_turn,
                text: u.text.clone(),
                sources: u.experiences_used,
                fallback: u.fallback,
            });
            (u.text, Some(u.mediator_tokens))
        };
        traj.turns.last_mut().expect("user turn").token_usage = usage;
        let resp = session.ask(session.with_system(vec![ChatMessage::user(input)]), seed)?;
        traj.push(Turn::new(Role::Assistant, resp.content, Some(resp.usage)));
    }
    render_turns(&traj.turns)?;
    session.finish(task, &mut traj)?;
    Ok(traj)
}
