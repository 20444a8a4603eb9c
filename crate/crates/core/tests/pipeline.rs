use std::path::{Path, PathBuf};
use std::sync::Arc;

use lich_core::arms::{ArmEnv, ArmRegistry};
use lich_core::backend::{BackendRegistry, ChatBackend, ReplayBackend};
use lich_core::domain::{validate_task_file, Split, TaskInstance};
use lich_core::mediator::MediatorSetup;
use lich_core::metrics::aggregate;
use lich_core::refiner::{distill, mine_pairs, DistillOptions, ExperienceSet, PairFile};
use lich_core::simulator::{run_batch, trajectories_from_jsonl, BatchOutput, RunConfig, Session};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn scripted(name: &str) -> Arc<dyn ChatBackend> {
    let spec = format!("scripted:{}", fixture(&format!("scripts/{name}.json")).display());
    BackendRegistry::with_builtin().build(&spec).unwrap()
}

fn tasks(split: Split) -> Vec<TaskInstance> {
    let raw = std::fs::read(fixture("toy_suite.json")).unwrap();
    validate_task_file(&raw).unwrap().into_iter().filter(|t| t.split == split).collect()
}

fn run(arm: &str, split: Split, env: &ArmEnv, jobs: usize) -> BatchOutput {
    let mut cfg = RunConfig::new(5);
    cfg.split = split;
    cfg.jobs = jobs;
    let arm = ArmRegistry::with_builtin().get(arm).unwrap();
    run_batch(&tasks(split), arm.as_ref(), &cfg, env).unwrap()
}

fn mediated_env(assistant: Arc<dyn ChatBackend>, mediator: Arc<dyn ChatBackend>) -> ArmEnv {
    let exp = ExperienceSet::load(&fixture("experiences.json")).unwrap();
    ArmEnv::new(Session::new(assistant)).with_mediator(MediatorSetup::new(mediator)).with_experiences(exp)
}

#[test]
fn mining_and_distilling_reproduce_the_bundled_stores() {
    let env = ArmEnv::new(Session::new(scripted("lock_in_assistant")));
    let full = run("full", Split::Fewshot, &env, 1);
    let sharded = run("sharded", Split::Fewshot, &env, 1);
    let all: Vec<_> = full.trajectories.iter().chain(&sharded.trajectories).cloned().collect();
    let pairs = mine_pairs(&full.report, &sharded.report, &all, 0.5).unwrap();
    let bundled = PairFile::load(&fixture("pairs.json")).unwrap();
    assert_eq!(pairs, bundled.pairs);
    assert_eq!(pairs.len(), 5);

    let mut opts = DistillOptions::new("default", 20);
    opts.dedup = true;
    opts.held_out = tasks(Split::Test).into_iter().map(|t| t.full_instruction).collect();
    let out = distill(&pairs, &scripted("refiner"), &opts).unwrap();
    let stored = ExperienceSet::load(&fixture("experiences.json")).unwrap();
    assert_eq!(out.set.experiences, stored.experiences);
}

#[test]
fn mediated_batch_matches_bundled_outputs_at_any_job_count() {
    let env = mediated_env(scripted("lock_in_assistant"), scripted("concat_mediator"));
    let serial = run("mediated", Split::Test, &env, 1);
    let parallel = run("mediated", Split::Test, &env, 4);
    assert_eq!(serial.trajectories_jsonl(), parallel.trajectories_jsonl());
    assert_eq!(serial.report, parallel.report);

    let bundled = std::fs::read_to_string(fixture("replay/trajectories.jsonl")).unwrap();
    assert_eq!(serial.trajectories_jsonl(), bundled);
    let agg = aggregate(&serial.report).unwrap();
    assert_eq!((agg.macro_p_bar, agg.macro_r), (100.0, 100.0));
}

#[test]
fn bundled_cassette_serves_every_role() {
    let tape: Arc<dyn ChatBackend> = Arc::new(ReplayBackend::load(&fixture("cassette.json")).unwrap());
    let out = run("mediated", Split::Test, &mediated_env(tape.clone(), tape), 2);
    let bundled = std::fs::read_to_string(fixture("replay/trajectories.jsonl")).unwrap();
    assert_eq!(out.trajectories, trajectories_from_jsonl(&bundled).unwrap());
}

#[test]
fn lock_in_assistant_separates_full_from_sharded() {
    let env = ArmEnv::new(Session::new(scripted("lock_in_assistant")));
    let full = aggregate(&run("full", Split::Test, &env, 1).report).unwrap();
    let sharded = aggregate(&run("sharded", Split::Test, &env, 1).report).unwrap();
    assert_eq!(full.macro_p_bar, 100.0);
    assert_eq!(sharded.macro_p_bar, 0.0);
    assert_eq!(sharded.per_domain.len(), 4);
}
