//! Comparison arms: context summarization, fact memory with lexical
//! retrieval, and a mediator prompted with raw contrastive pairs.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::backend::count_tokens;
use crate::domain::{render_turns, ChatMessage, Explication, Role, Setting, TaskInstance, Trajectory, Turn};
use crate::error::{MetricsError, RunError};
use crate::mediator::{mediator_messages, render_raw_context, run_explicated, Knowledge, MediatorSetup, MediatorTemplate};
use crate::metrics::RunReport;
use crate::refiner::ContrastivePair;
use crate::simulator::{call, reveal_order, Session};

pub const SUMMARIZER_PROMPT: &str = "Summarize the conversation below between a user and an assistant. \
Keep everything the user has asked for so far. Reply with the summary only.";

pub const EXTRACTOR_PROMPT: &str = "Extract the facts stated in the user's message below. \
Reply with one fact per line, each line starting with \"- \".";

/// Heading of the system note carrying retrieved facts.
pub const MEMORY_NOTE_HEADER: &str = "Facts remembered from earlier in this conversation:";

/// Summarized-context arm: before each assistant call the conversation so
/// far is replaced by one summary, which the assistant answers.
pub fn run_sum(task: &TaskInstance, session: &Session, summarizer: &MediatorSetup, seed: i64) -> Result<Trajectory, RunError> {
    session.check_budget(task)?;
    let mut traj = session.start(task, "sum", Setting::SumBaseline, seed);
    for idx in reveal_order(task, session.shuffle_shards, seed) {
        let user_turn = traj.user_turns().count();
        traj.shard_order.push(idx);
        traj.push(Turn::new(Role::User, task.shards[idx].text.clone(), None));
        let raw = render_raw_context(&traj.turns);
        let messages = vec![ChatMessage::system(SUMMARIZER_PROMPT), ChatMessage::user(raw.clone())];
        let resp = call(summarizer.backend.as_ref(), messages, &summarizer.params, seed)?;
        let fallback = resp.content.trim().is_empty();
        let summary = if fallback { raw } else { resp.content };
        traj.turns.last_mut().expect("user turn").token_usage = Some(resp.usage);
        traj.mediator_fallback |= fallback;
        traj.explications.push(Explication { user_turn, text: summary.clone(), sources: Vec::new(), fallback });
        let answer = session.ask(session.with_system(vec![ChatMessage::user(summary)]), seed)?;
        traj.push(Turn::new(Role::Assistant, answer.content, Some(answer.usage)));
    }
    render_turns(&traj.turns)?;
    session.finish(task, &mut traj)?;
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryFact {
    pub id: usize,
    pub text: String,
    /// Index of the turn the fact was extracted from.
    pub source_turn: usize,
    /// Sorted, space-joined retrieval tokens.
    pub embedding_key: String,
}

fn overlap_tokens(text: &str) -> BTreeSet<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Per-conversation fact store.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    facts: Vec<MemoryFact>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn facts(&self) -> &[MemoryFact] {
        &self.facts
    }

    pub fn add(&mut self, text: &str, source_turn: usize) -> Option<usize> {
        let text = text.trim();
        if text.is_empty() {
            return None;
        }
        let id = self.facts.len();
        let key = overlap_tokens(text).into_iter().collect::<Vec<_>>().join(" ");
        self.facts.push(MemoryFact { id, text: text.to_string(), source_turn, embedding_key: key });
        Some(id)
    }

    /// Size of the intersection of the lowercased token sets.
    pub fn score(fact: &MemoryFact, query: &BTreeSet<String>) -> usize {
        fact.embedding_key.split(' ').filter(|t| !t.is_empty() && query.contains(*t)).count()
    }

    /// Top `k` facts by overlap with `query`; ties go to the lower id.
    pub fn retrieve(&self, query: &str, k: usize) -> Vec<&MemoryFact> {
        let q = overlap_tokens(query);
        let mut ranked: Vec<(usize, &MemoryFact)> = self.facts.iter().map(|f| (Self::score(f, &q), f)).collect();
        ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.id.cmp(&b.1.id)));
        ranked.into_iter().take(k).map(|(_, f)| f).collect()
    }
}

/// Fact lines of an extractor reply, bullets stripped.
pub fn parse_facts(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| {
            let l = l.trim();
            l.strip_prefix("- ").or_else(|| l.strip_prefix("* ")).unwrap_or(l).trim().to_string()
        })
        .filter(|l| !l.is_empty() && l != "-")
        .collect()
}

pub fn memory_note(facts: &[&MemoryFact]) -> String {
    let mut note = MEMORY_NOTE_HEADER.to_string();
    for f in facts {
        note.push_str("\n- ");
        note.push_str(&f.text);
    }
    note
}

/// Memory arm: facts extracted from every user turn, the top `k` by overlap
/// with the current turn prepended as a system note; the assistant otherwise
/// sees only the current turn.
pub fn run_mem(
    task: &TaskInstance,
    session: &Session,
    extractor: &MediatorSetup,
    seed: i64,
    k: usize,
) -> Result<Trajectory, RunError> {
    session.check_budget(task)?;
    let mut traj = session.start(task, "mem", Setting::MemBaseline, seed);
    let mut store = MemoryStore::new();
    for idx in reveal_order(task, session.shuffle_shards, seed) {
        let user_turn = traj.user_turns().count();
        let shard = task.shards[idx].text.clone();
        traj.shard_order.push(idx);
        let turn_index = traj.turns.len();
        traj.push(Turn::new(Role::User, shard.clone(), None));
        let messages = vec![ChatMessage::system(EXTRACTOR_PROMPT), ChatMessage::user(shard.clone())];
        let resp = call(extractor.backend.as_ref(), messages, &extractor.params, seed)?;
        traj.turns.last_mut().expect("user turn").token_usage = Some(resp.usage);
        for fact in parse_facts(&resp.content) {
            store.add(&fact, turn_index);
        }
        let hits = store.retrieve(&shard, k);
        let mut messages = Vec::new();
        if !hits.is_empty() {
            let note = memory_note(&hits);
            traj.explications.push(Explication {
                user_turn,
                text: note.clone(),
                sources: hits.iter().map(|f| format!("fact-{}", f.id)).collect(),
                fallback: false,
            });
            messages.push(ChatMessage::system(note));
        }
        messages.push(ChatMessage::user(shard));
        let answer = session.ask(session.with_system(messages), seed)?;
        traj.push(Turn::new(Role::Assistant, answer.content, Some(answer.usage)));
    }
    render_turns(&traj.turns)?;
    session.finish(task, &mut traj)?;
    Ok(traj)
}

/// Mediated conversation whose mediator prompt carries raw contrastive pairs
/// instead of distilled experiences.
pub fn run_icl(
    task: &TaskInstance,
    session: &Session,
    mediator: &MediatorSetup,
    pairs: &[ContrastivePair],
    seed: i64,
) -> Result<Trajectory, RunError> {
    run_explicated(task, session, mediator, Knowledge::Pairs(pairs), "icl", Setting::IclBaseline, seed)
}

/// Σ tokens(a) / Σ tokens(b) over identical (task, seed) cells.
pub fn token_ratio(a: &RunReport, b: &RunReport) -> Result<f64, MetricsError> {
    if a.cells() != b.cells() {
        return Err(MetricsError::CellMismatch(format!(
            "{} covers {} cells, {} covers {}",
            a.arm,
            a.cells().len(),
            b.arm,
            b.cells().len()
        )));
    }
    let denom = b.total_tokens();
    if denom == 0 {
        return Err(MetricsError::DivisionByZero("token total of the reference report"));
    }
    Ok(a.total_tokens() as f64 / denom as f64)
}

/// Token count of the mediator system prompt built from `knowledge`.
pub fn mediator_prompt_tokens(knowledge: &Knowledge<'_>, template: &MediatorTemplate) -> u64 {
    let probe = [Turn::new(Role::User, "", None)];
    count_tokens(&mediator_messages(&probe, knowledge, template)[0].content)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{EchoSource, Matcher, Scope, ScriptResponse, ScriptRule, ScriptedBackend};
    use crate::domain::{Domain, Shard, Split, VerifierSpec};
    use crate::refiner::{Experience, ExperienceSet};
    use crate::simulator::run_sharded;
    use std::sync::Arc;

    fn task() -> TaskInstance {
        TaskInstance {
            id: "math-tri".into(),
            domain: Domain::Math,
            full_instruction: "Find the perimeter of a 3-4-5 triangle".into(),
            shards: vec![
                Shard { index: 0, text: "Find the perimeter of a triangle.".into() },
                Shard { index: 1, text: "Its sides are 3, 4, and 5.".into() },
            ],
            verifier: VerifierSpec::NumericTolerance { expected: 12.0, tolerance: 1e-9 },
            split: Split::Test,
        }
    }

    fn scripted(rules: Vec<ScriptRule>) -> Arc<ScriptedBackend> {
        Arc::new(ScriptedBackend::new("s", rules).unwrap())
    }

    fn lock_in() -> Arc<ScriptedBackend> {
        scripted(vec![
            ScriptRule::text(
                Matcher::ContainsAll(vec!["perimeter".into(), "3".into(), "4".into(), "5".into()]),
                "The perimeter is 12.",
            )
            .scope(Scope::FirstUser),
            ScriptRule::text(Matcher::Always, "30"),
        ])
    }

    fn echo(source: EchoSource) -> MediatorSetup {
        MediatorSetup::new(scripted(vec![ScriptRule::new(Matcher::Always, ScriptResponse::Echo(source))]))
    }

    #[test]
    fn lossy_summary_fails() {
        let summarizer = MediatorSetup::new(scripted(vec![ScriptRule::text(
            Matcher::Always,
            "The user wants the perimeter of a triangle.",
        )]));
        let t = run_sum(&task(), &Session::new(lock_in()), &summarizer, 0).unwrap();
        assert_eq!(t.score, 0.0);
        t.check_invariants(2).unwrap();
    }

    #[test]
    fn identity_summary_carries_whole_context() {
        let t = run_sum(&task(), &Session::new(lock_in()), &echo(EchoSource::TranscriptUsers), 0).unwrap();
        assert_eq!(t.score, 1.0);
        assert_eq!(t.explications[1].text, "Find the perimeter of a triangle. Its sides are 3, 4, and 5.");
    }

    #[test]
    fn summary_tokens_additive() {
        let t = run_sum(&task(), &Session::new(lock_in()), &echo(EchoSource::TranscriptUsers), 0).unwrap();
        assert!(t.user_turns().all(|u| u.token_usage.is_some_and(|x| x.total() > 0)));
        assert_eq!(t.total_tokens, t.turn_token_sum());
    }

    #[test]
    fn retrieval_tie_breaks_by_id() {
        let mut store = MemoryStore::new();
        store.add("user wants a Python-style script", 0);
        store.add("sides are 3,4,5", 2);
        let hits = store.retrieve("compute it now", 1);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].id, 0);
        let hits = store.retrieve("what are the sides", 1);
        assert_eq!(hits[0].id, 1);
    }

    #[test]
    fn retrieval_larger_k_returns_all_stably() {
        let mut store = MemoryStore::new();
        for f in ["a b", "c d", "e f"] {
            store.add(f, 0);
        }
        let ids: Vec<usize> = store.retrieve("d", 10).iter().map(|f| f.id).collect();
        assert_eq!(ids, [1, 0, 2]);
        assert!(MemoryStore::new().retrieve("anything", 3).is_empty());
    }

    #[test]
    fn empty_store_sends_current_turn_only() {
        struct Spy(std::sync::Mutex<Vec<usize>>);
        impl crate::backend::ChatBackend for Spy {
            fn id(&self) -> &str {
                "spy"
            }
            fn complete(
                &self,
                req: &crate::backend::ChatRequest,
            ) -> Result<crate::backend::ChatResponse, crate::error::BackendError> {
                self.0.lock().unwrap().push(req.messages.len());
                Ok(crate::backend::ChatResponse {
                    content: "ok".into(),
                    usage: Default::default(),
                    backend_id: "spy".into(),
                })
            }
        }
        let spy = Arc::new(Spy(Default::default()));
        let extractor = MediatorSetup::new(scripted(vec![ScriptRule::text(Matcher::Always, "")]));
        let t = run_mem(&task(), &Session::new(spy.clone()), &extractor, 0, 3).unwrap();
        assert_eq!(*spy.0.lock().unwrap(), [1, 1]);
        assert!(t.explications.is_empty());
    }

    #[test]
    fn memory_retrieves_facts_not_intent() {
        let extractor = echo(EchoSource::LastUser);
        let t = run_mem(&task(), &Session::new(lock_in()), &extractor, 0, 2).unwrap();
        // Facts reach the assistant only as a system note; the lock-in
        // assistant keys on its first user message and stays wrong.
        assert_eq!(t.score, 0.0);
        assert_eq!(t.explications.len(), 2);
        assert!(t.explications[1].text.starts_with(MEMORY_NOTE_HEADER));
        t.check_invariants(2).unwrap();
    }

    #[test]
    fn parse_fact_lines() {
        assert_eq!(parse_facts("- a\n\n* b\nc\n-"), ["a", "b", "c"]);
    }

    fn pair() -> ContrastivePair {
        let mut tk = task();
        tk.split = Split::Fewshot;
        ContrastivePair {
            task_id: tk.id.clone(),
            domain: Some(tk.domain),
            d_minus: run_sharded(&tk, &Session::new(lock_in()), 0).unwrap(),
            d_plus: tk.full_instruction.clone(),
            d_minus_seed: 0,
        }
    }

    #[test]
    fn icl_matches_mediated_score() {
        let session = Session::new(lock_in());
        let m = echo(EchoSource::TranscriptUsers);
        let icl = run_icl(&task(), &session, &m, &[pair()], 0).unwrap();
        let med = crate::mediator::run_mediated(&task(), &session, &m, &ExperienceSet::empty("u"), 0).unwrap();
        assert_eq!(icl.score, med.score);
        assert_eq!(icl.setting, Setting::IclBaseline);
        assert_eq!(icl.explications[0].sources, ["math-tri"]);
    }

    #[test]
    fn zero_pairs_is_cold_start() {
        let t = MediatorTemplate::default();
        let empty = ExperienceSet::empty("u");
        assert_eq!(
            mediator_messages(&[Turn::new(Role::User, "x", None)], &Knowledge::Pairs(&[]), &t),
            mediator_messages(&[Turn::new(Role::User, "x", None)], &Knowledge::Experiences(&empty), &t),
        );
    }

    #[test]
    fn raw_pairs_cost_more_prompt_tokens() {
        let pairs = [pair()];
        let mut set = ExperienceSet::empty("u");
        set.experiences.push(Experience {
            id: "exp-0000".into(),
            guideline: "Treat later messages as additions to the first request.".into(),
            source_pair_ids: vec!["math-tri".into()],
            domain: None,
        });
        let t = MediatorTemplate::default();
        assert!(
            mediator_prompt_tokens(&Knowledge::Pairs(&pairs), &t)
                > mediator_prompt_tokens(&Knowledge::Experiences(&set), &t)
        );
    }

    fn tokens_report(arm: &str, totals: &[u64]) -> RunReport {
        let mut r = RunReport::new(arm, Split::Test, (0..totals.len() as i64).collect());
        r.scores.insert("t".into(), vec![1.0; totals.len()]);
        r.token_totals.insert("t".into(), totals.to_vec());
        r.domain_of.insert("t".into(), Domain::Math);
        r
    }

    #[test]
    fn token_ratio_examples() {
        let a = tokens_report("icl", &[200, 160]);
        let b = tokens_report("mediated", &[50, 50]);
        assert!((token_ratio(&a, &b).unwrap() - 3.6).abs() < 1e-12);
        assert_eq!(token_ratio(&a, &a).unwrap(), 1.0);
        let zero = tokens_report("z", &[0, 0]);
        assert!(matches!(token_ratio(&a, &zero), Err(MetricsError::DivisionByZero(_))));
        let other = tokens_report("m", &[1, 1, 1]);
        assert!(matches!(token_ratio(&a, &other), Err(MetricsError::CellMismatch(_))));
    }
}
