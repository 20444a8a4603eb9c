//! Contrastive pair mining and experience distillation.
//!
//! A pair couples one failed multi-turn trajectory of a task (D⁻) with the
//! fully specified instruction that succeeded on the same task (D⁺). The
//! refiner backend turns each pair into short, task-agnostic guidelines
//! about how the user expresses intent; those guidelines form the user's
//! experience set, which the mediator reads as part of its system prompt.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{ChatBackend, SamplingParams};
use crate::domain::{ChatMessage, Domain, Role, Setting, Split, Trajectory};
use crate::error::{RefinerError, StoreError};
use crate::mediator::render_raw_context;
use crate::metrics::RunReport;
use crate::simulator::call;

/// Default success threshold on [0,1] scores.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Length of the shared token run that counts as copying a held-out
/// instruction into a guideline.
pub const LEAK_NGRAM: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub task_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<Domain>,
    pub d_minus: Trajectory,
    pub d_plus: String,
    pub d_minus_seed: i64,
}

impl ContrastivePair {
    pub fn id(&self) -> String {
        self.task_id.clone()
    }

    /// Text form used in refiner and ICL prompts.
    pub fn render(&self, number: usize) -> String {
        format!(
            "Example {number}\nConversation that failed:\n{}\nInstruction that succeeded:\n{}",
            render_raw_context(&self.d_minus.turns),
            self.d_plus
        )
    }
}

/// `pairs.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairFile {
    pub threshold: f64,
    pub pairs: Vec<ContrastivePair>,
}

impl PairFile {
    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        write(path, &(serde_json::to_string_pretty(self).expect("pairs serialize") + "\n"))
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        serde_json::from_str(&read(path)?).map_err(|e| StoreError::Schema(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Experience {
    pub id: String,
    pub guideline: String,
    pub source_pair_ids: Vec<String>,
    #[serde(default)]
    pub domain: Option<Domain>,
}

/// A user's experience knowledge base.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperienceSet {
    #[serde(default = "default_user")]
    pub user_id: String,
    pub experiences: Vec<Experience>,
    #[serde(default)]
    pub created_from: Vec<String>,
}

fn default_user() -> String {
    "default".into()
}

impl ExperienceSet {
    pub fn empty(user_id: impl Into<String>) -> Self {
        Self { user_id: user_id.into(), experiences: Vec::new(), created_from: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.experiences.is_empty()
    }

    pub fn len(&self) -> usize {
        self.experiences.len()
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        let mut ids = HashSet::new();
        for e in &self.experiences {
            if e.id.is_empty() {
                return Err(StoreError::Schema("experience with empty id".into()));
            }
            if !ids.insert(e.id.as_str()) {
                return Err(StoreError::Schema(format!("duplicate experience id {:?}", e.id)));
            }
            if e.guideline.trim().is_empty() {
                return Err(StoreError::Schema(format!("experience {:?} has an empty guideline", e.id)));
            }
        }
        Ok(())
    }

    /// Keeps experiences tagged with `domain` (or untagged).
    pub fn filter_domain(&self, domain: Domain) -> Self {
        Self {
            experiences: self
                .experiences
                .iter()
                .filter(|e| e.domain.is_none_or(|d| d == domain))
                .cloned()
                .collect(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("experience set serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        self.validate()?;
        write(path, &self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        Self::from_json(&read(path)?)
    }

    pub fn from_json(text: &str) -> Result<Self, StoreError> {
        let set: Self = serde_json::from_str(text).map_err(|e| StoreError::Schema(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }
}

fn read(path: &Path) -> Result<String, StoreError> {
    std::fs::read_to_string(path).map_err(|source| StoreError::Io { path: path.display().to_string(), source })
}

fn write(path: &Path, text: &str) -> Result<(), StoreError> {
    std::fs::write(path, text).map_err(|source| StoreError::Io { path: path.display().to_string(), source })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Selects tasks that succeed in the Full setting (mean ≥ `threshold`) but
/// fail when sharded (mean < `threshold`), and pairs one failed sharded
/// trajectory of each (lowest score, then lowest seed) with the task's full
/// instruction. Returns pairs sorted by task id.
pub fn mine_pairs(
    full: &RunReport,
    sharded: &RunReport,
    trajectories: &[Trajectory],
    threshold: f64,
) -> Result<Vec<ContrastivePair>, RefinerError> {
    for (name, r) in [("full", full), ("sharded", sharded)] {
        if r.split != Split::Fewshot {
            return Err(RefinerError::SplitMismatch(format!(
                "{name} report {:?} is on the {} split; pairs may only be mined from fewshot runs",
                r.arm, r.split
            )));
        }
    }
    if let Some(t) = trajectories.iter().find(|t| t.split != Split::Fewshot) {
        return Err(RefinerError::SplitMismatch(format!(
            "trajectory for {} (seed {}) is on the {} split",
            t.task_id, t.seed, t.split
        )));
    }
    let full_ids: Vec<&String> = full.scores.keys().collect();
    let sharded_ids: Vec<&String> = sharded.scores.keys().collect();
    if full_ids != sharded_ids {
        return Err(RefinerError::TaskMismatch(format!(
            "full covers {} tasks, sharded covers {}",
            full_ids.len(),
            sharded_ids.len()
        )));
    }

    let index: HashMap<(&str, Setting, i64), &Trajectory> = trajectories
        .iter()
        .map(|t| ((t.task_id.as_str(), t.setting, t.seed), t))
        .collect();
    let lookup = |task: &str, setting: Setting, seed: i64| {
        index.get(&(task, setting, seed)).copied().ok_or_else(|| {
            RefinerError::TaskMismatch(format!("no {setting:?} trajectory for {task} seed {seed}"))
        })
    };

    let mut pairs = Vec::new();
    for task in full_ids {
        let f = &full.scores[task];
        let s = &sharded.scores[task];
        if !(mean(f) >= threshold && mean(s) < threshold) {
            continue;
        }
        let errored = sharded.errors.get(task);
        let d_minus_seed = s
            .iter()
            .zip(&sharded.seeds)
            .enumerate()
            .filter(|(j, (score, _))| **score < threshold && errored.is_none_or(|e| !e.contains_key(j)))
            .map(|(_, (score, seed))| (*score, *seed))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, seed)| seed);
        let Some(d_minus_seed) = d_minus_seed else {
            continue;
        };
        let plus_seed = f
            .iter()
            .zip(&full.seeds)
            .filter(|(score, _)| **score >= threshold)
            .max_by(|a, b| a.0.total_cmp(b.0).then(b.1.cmp(a.1)))
            .map(|(_, seed)| *seed)
            .expect("mean >= threshold implies a passing run");
        let d_plus = lookup(task, Setting::Full, plus_seed)?
            .user_turns()
            .next()
            .map(|t| t.content.clone())
            .ok_or_else(|| RefinerError::TaskMismatch(format!("full trajectory for {task} has no user turn")))?;
        pairs.push(ContrastivePair {
            task_id: task.clone(),
            domain: full.domain_of.get(task).copied(),
            d_minus: lookup(task, Setting::Sharded, d_minus_seed)?.clone(),
            d_plus,
            d_minus_seed,
        });
    }
    Ok(pairs)
}

pub const REFINER_SYSTEM_PROMPT: &str = "You study conversations between one particular user and an AI assistant. \
You are shown a conversation in which the assistant failed the user, and the single instruction that later made the same assistant succeed. \
Work out what the assistant misread about the way this user communicates. \
Write general guidelines that would help someone interpret this user's future requests correctly. \
Do not restate the task, its data or its answer. \
Reply with one guideline per line, each line starting with \"- \".";

/// Guideline lines of a refiner reply: lines starting with `- ` or `* `.
pub fn parse_guidelines(text: &str) -> Vec<String> {
    text.lines()
        .filter_map(|l| {
            let l = l.trim();
            l.strip_prefix("- ").or_else(|| l.strip_prefix("* "))
        })
        .map(|g| g.trim().to_string())
        .filter(|g| !g.is_empty())
        .collect()
}

fn leak_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// True when `guideline` contains a run of `min(15, len)` consecutive tokens
/// of any held-out instruction (case- and edge-punctuation-insensitive).
pub fn leaks(guideline: &str, held_out: &[String]) -> bool {
    let g = leak_tokens(guideline);
    held_out.iter().any(|instr| {
        let t = leak_tokens(instr);
        let n = t.len().min(LEAK_NGRAM);
        if n == 0 || g.len() < n {
            return false;
        }
        let grams: HashSet<&[String]> = t.windows(n).collect();
        g.windows(n).any(|w| grams.contains(w))
    })
}

#[derive(Debug, Clone)]
pub struct DistillOptions {
    pub user_id: String,
    pub max_experiences: usize,
    /// Full instructions the guidelines must not copy.
    pub held_out: Vec<String>,
    /// Drop guidelines identical to an earlier one.
    pub dedup: bool,
    pub created_from: Vec<String>,
    pub params: SamplingParams,
}

impl DistillOptions {
    pub fn new(user_id: impl Into<String>, max_experiences: usize) -> Self {
        Self {
            user_id: user_id.into(),
            max_experiences,
            held_out: Vec::new(),
            dedup: false,
            created_from: Vec::new(),
            params: SamplingParams::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub set: ExperienceSet,
    pub warnings: Vec<String>,
}

/// One refiner call per pair; guidelines are collected in pair-id order and
/// truncated at `max_experiences`.
pub fn distill(
    pairs: &[ContrastivePair],
    refiner: &Arc<dyn ChatBackend>,
    opts: &DistillOptions,
) -> Result<DistillOutcome, RefinerError> {
    if pairs.is_empty() {
        return Err(RefinerError::NoPairs);
    }
    if opts.max_experiences == 0 {
        return Err(RefinerError::ZeroBudget);
    }
    let mut ordered: Vec<&ContrastivePair> = pairs.iter().collect();
    ordered.sort_by_key(|p| p.id());

    let replies: Vec<Result<String, RefinerError>> = ordered
        .par_iter()
        .map(|p| {
            let messages = vec![
                ChatMessage::system(REFINER_SYSTEM_PROMPT),
                ChatMessage::user(format!(
                    "Conversation that failed:\n{}\n\nInstruction that succeeded:\n{}",
                    render_raw_context(&p.d_minus.turns),
                    p.d_plus
                )),
            ];
            Ok(call(refiner.as_ref(), messages, &opts.params, p.d_minus_seed)?.content)
        })
        .collect();

    let mut warnings = Vec::new();
    let mut seen = HashSet::new();
    let mut experiences = Vec::new();
    'pairs: for (pair, reply) in ordered.iter().zip(replies) {
        let guidelines = parse_guidelines(&reply?);
        if guidelines.is_empty() {
            let w = format!("pair {}: refiner output has no guideline lines; skipped", pair.id());
            log::warn!("{w}");
            warnings.push(w);
            continue;
        }
        for g in guidelines {
            if experiences.len() == opts.max_experiences {
                break 'pairs;
            }
            if leaks(&g, &opts.held_out) {
                let w = format!("pair {}: dropped guideline copying a held-out instruction", pair.id());
                log::warn!("{w}");
                warnings.push(w);
                continue;
            }
            if opts.dedup && !seen.insert(g.clone()) {
                continue;
            }
            experiences.push(Experience {
                id: format!("exp-{:04}", experiences.len()),
                guideline: g,
                source_pair_ids: vec![pair.id()],
                domain: pair.domain,
            });
        }
    }
    Ok(DistillOutcome {
        set: ExperienceSet {
            user_id: opts.user_id.clone(),
            experiences,
            created_from: opts.created_from.clone(),
        },
        warnings,
    })
}

/// Per-task mean scores, handy for inspecting mining inputs.
pub fn task_means(report: &RunReport) -> BTreeMap<String, f64> {
    report.scores.iter().map(|(k, v)| (k.clone(), mean(v))).collect()
}

/// Turns of `traj` excluding system turns, as messages.
pub fn conversation(traj: &Trajectory) -> Vec<ChatMessage> {
    traj.turns
        .iter()
        .filter(|t| t.role != Role::System)
        .map(|t| ChatMessage::new(t.role, t.content.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Matcher, ScriptRule, ScriptedBackend};
    use crate::domain::{Turn, TaskInstance, Shard, VerifierSpec};

    fn task(id: &str) -> TaskInstance {
        TaskInstance {
            id: id.into(),
            domain: Domain::Math,
            full_instruction: format!("Solve problem {id} completely"),
            shards: vec![Shard { index: 0, text: format!("Solve {id}") }],
            verifier: VerifierSpec::NumericTolerance { expected: 1.0, tolerance: 0.0 },
            split: Split::Fewshot,
        }
    }

    fn traj(t: &TaskInstance, setting: Setting, seed: i64, score: f64) -> Trajectory {
        let arm = if setting == Setting::Full { "full" } else { "sharded" };
        let mut tr = Trajectory::new(t, arm, setting, seed);
        let user = if setting == Setting::Full { t.full_instruction.clone() } else { t.shards[0].text.clone() };
        tr.push(Turn::new(Role::User, user, None));
        tr.push(Turn::new(Role::Assistant, format!("answer {seed}"), None));
        tr.score = score;
        tr
    }

    /// Reports and trajectories for tasks with the given score rows.
    fn fixture(rows: &[(&str, [f64; 5], [f64; 5])]) -> (RunReport, RunReport, Vec<Trajectory>) {
        let mut trajs = Vec::new();
        for (id, f, s) in rows {
            let t = task(id);
            for seed in 0..5 {
                trajs.push(traj(&t, Setting::Full, seed, f[seed as usize]));
                trajs.push(traj(&t, Setting::Sharded, seed, s[seed as usize]));
            }
        }
        let seeds: Vec<i64> = (0..5).collect();
        let pick = |setting| trajs.iter().filter(|t| t.setting == setting).cloned().collect::<Vec<_>>();
        let full = RunReport::from_trajectories("full", Split::Fewshot, &seeds, &pick(Setting::Full)).unwrap();
        let sharded = RunReport::from_trajectories("sharded", Split::Fewshot, &seeds, &pick(Setting::Sharded)).unwrap();
        (full, sharded, trajs)
    }

    #[test]
    fn selection_rule_examples() {
        let (full, sharded, trajs) = fixture(&[
            ("T", [1.0; 5], [0.0, 0.0, 1.0, 0.0, 0.0]),
            ("U", [0.0; 5], [0.0; 5]),
            ("V", [1.0; 5], [1.0; 5]),
        ]);
        let pairs = mine_pairs(&full, &sharded, &trajs, 0.5).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].task_id, "T");
        assert_eq!(pairs[0].d_minus_seed, 0);
        assert_eq!(pairs[0].d_minus.seed, 0);
        assert_eq!(pairs[0].d_minus.setting, Setting::Sharded);
        assert_eq!(pairs[0].d_plus, "Solve problem T completely");
    }

    #[test]
    fn test_split_reports_rejected() {
        let (mut full, sharded, trajs) = fixture(&[("T", [1.0; 5], [0.0; 5])]);
        full.split = Split::Test;
        assert!(matches!(mine_pairs(&full, &sharded, &trajs, 0.5), Err(RefinerError::SplitMismatch(_))));
    }

    #[test]
    fn mismatched_task_sets_rejected() {
        let (full, _, trajs) = fixture(&[("T", [1.0; 5], [0.0; 5]), ("W", [1.0; 5], [0.0; 5])]);
        let (_, sharded, _) = fixture(&[("T", [1.0; 5], [0.0; 5])]);
        assert!(matches!(mine_pairs(&full, &sharded, &trajs, 0.5), Err(RefinerError::TaskMismatch(_))));
    }

    fn pair(id: &str) -> ContrastivePair {
        let t = task(id);
        ContrastivePair {
            task_id: id.into(),
            domain: Some(Domain::Math),
            d_minus: traj(&t, Setting::Sharded, 0, 0.0),
            d_plus: t.full_instruction.clone(),
            d_minus_seed: 0,
        }
    }

    fn refiner(reply: &str) -> Arc<dyn ChatBackend> {
        Arc::new(ScriptedBackend::new("refiner", vec![ScriptRule::text(Matcher::Always, reply)]).unwrap())
    }

    #[test]
    fn distills_example_guideline() {
        let g = "If the user has not explicitly approved the previous solution, he is not satisfied with it.";
        let out = distill(&[pair("a")], &refiner(&format!("- {g}")), &DistillOptions::new("u1", 10)).unwrap();
        assert_eq!(out.set.len(), 1);
        assert_eq!(out.set.experiences[0].guideline, g);
        assert_eq!(out.set.experiences[0].source_pair_ids, ["a"]);
        assert_eq!(out.set.user_id, "u1");
    }

    #[test]
    fn truncates_in_pair_order() {
        let out = distill(
            &[pair("c"), pair("a"), pair("b")],
            &refiner("- keep numbers exact"),
            &DistillOptions::new("u", 2),
        )
        .unwrap();
        let sources: Vec<&str> = out.set.experiences.iter().map(|e| e.source_pair_ids[0].as_str()).collect();
        assert_eq!(sources, ["a", "b"]);
        assert_eq!(out.set.experiences[1].id, "exp-0001");
    }

    #[test]
    fn leaked_guideline_dropped() {
        let p = pair("a");
        let mut opts = DistillOptions::new("u", 5);
        opts.held_out = vec![p.d_plus.clone()];
        let out = distill(&[p.clone()], &refiner(&format!("- {}", p.d_plus)), &opts).unwrap();
        assert!(out.set.is_empty());
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn unparseable_output_skips_pair() {
        let out = distill(&[pair("a")], &refiner("I have no idea."), &DistillOptions::new("u", 5)).unwrap();
        assert!(out.set.is_empty());
        assert!(out.warnings[0].contains("no guideline lines"));
    }

    #[test]
    fn dedup_is_optional() {
        let pairs = [pair("a"), pair("b")];
        let r = refiner("- same advice");
        assert_eq!(distill(&pairs, &r, &DistillOptions::new("u", 5)).unwrap().set.len(), 2);
        let mut opts = DistillOptions::new("u", 5);
        opts.dedup = true;
        assert_eq!(distill(&pairs, &r, &opts).unwrap().set.len(), 1);
    }

    #[test]
    fn distill_preconditions() {
        assert!(matches!(distill(&[], &refiner("- x"), &DistillOptions::new("u", 1)), Err(RefinerError::NoPairs)));
        assert!(matches!(
            distill(&[pair("a")], &refiner("- x"), &DistillOptions::new("u", 0)),
            Err(RefinerError::ZeroBudget)
        ));
    }

    #[test]
    fn leak_detection_uses_fifteen_gram_window() {
        let long: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
        let instr = long.join(" ");
        let fourteen = long[2..16].join(" ");
        let fifteen = long[2..17].join(" ");
        assert!(!leaks(&format!("note {fourteen} end"), std::slice::from_ref(&instr)));
        assert!(leaks(&format!("note {fifteen} end"), std::slice::from_ref(&instr)));
        let short = "Find the perimeter of a 3-4-5 triangle".to_string();
        assert!(leaks("find the perimeter of a 3-4-5 triangle.", std::slice::from_ref(&short)));
        assert!(!leaks("find the perimeter", &[short]));
    }

    #[test]
    fn parse_guideline_lines() {
        assert_eq!(
            parse_guidelines("Here you go:\n- one\n  * two\n-\n- \nthree"),
            ["one", "two"]
        );
    }

    #[test]
    fn store_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.json");
        let out = distill(&[pair("a"), pair("b")], &refiner("- x\n- y"), &DistillOptions::new("u", 3)).unwrap();
        out.set.save(&path).unwrap();
        assert_eq!(ExperienceSet::load(&path).unwrap(), out.set);

        let dup = r#"{"user_id": "u", "experiences": [
            {"id": "e1", "guideline": "a", "source_pair_ids": []},
            {"id": "e1", "guideline": "b", "source_pair_ids": []}], "created_from": []}"#;
        assert!(matches!(ExperienceSet::from_json(dup), Err(StoreError::Schema(_))));
        let cold = ExperienceSet::from_json(r#"{"experiences": []}"#).unwrap();
        assert!(cold.is_empty());
        assert!(matches!(
            ExperienceSet::load(&dir.path().join("missing.json")),
            Err(StoreError::Io { .. })
        ));
    }

    #[test]
    fn domain_filter_keeps_untagged() {
        let mut set = ExperienceSet::empty("u");
        for (id, d) in [("a", Some(Domain::Math)), ("b", Some(Domain::Code)), ("c", None)] {
            set.experiences.push(Experience { id: id.into(), guideline: id.into(), source_pair_ids: vec![], domain: d });
        }
        let ids: Vec<String> = set.filter_domain(Domain::Math).experiences.into_iter().map(|e| e.id).collect();
        assert_eq!(ids, ["a", "c"]);
    }
}
