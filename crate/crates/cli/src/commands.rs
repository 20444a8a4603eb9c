use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use lich_core::arms::{ArmEnv, ArmRegistry};
use lich_core::domain::{Setting, Split, Trajectory};
use lich_core::metrics::{plot_csv, Aggregate, DegradationPoint, ReportDocument, RunReport};
use lich_core::refiner::{distill, mine_pairs, DistillOptions, ExperienceSet, PairFile, DEFAULT_THRESHOLD};
use lich_core::simulator::{run_batch, trajectories_from_jsonl, RunConfig, Session};

use crate::error::{read_input, write_output, CliError, CliResult};
use crate::setup::{
    load_report, load_tasks, mediator_setup, parse_seeds, parse_split, write_report, BackendArgs, Backends,
};
use crate::table;

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub task_file: PathBuf,
    /// One of full, sharded, mediated, sum, mem, icl.
    #[arg(long)]
    pub arm: String,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    /// Runs per task [default: 5, or the number of --seeds].
    #[arg(long)]
    pub runs: Option<usize>,
    /// Comma-separated seeds [default: 0..runs].
    #[arg(long, value_parser = parse_seeds)]
    pub seeds: Option<Vec<i64>>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Trajectories as JSON lines.
    #[arg(long)]
    pub traj_out: Option<PathBuf>,
    /// Report JSON; a `.csv` summary is written next to it.
    #[arg(long)]
    pub report_out: Option<PathBuf>,
    /// Experience store for the mediated arm.
    #[arg(long)]
    pub experiences: Option<PathBuf>,
    /// Contrastive pairs for the icl arm.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub mediator_prompt: Option<PathBuf>,
    /// Reveal shards in a seeded random order (ablation).
    #[arg(long)]
    pub shuffle_shards: bool,
    /// Only explicate before the last shard (ablation).
    #[arg(long)]
    pub explicate_final_only: bool,
    #[arg(long, default_value = "")]
    pub system_prompt: String,
    #[arg(long, default_value_t = 64)]
    pub max_turns: usize,
    /// Facts retrieved per turn by the mem arm.
    #[arg(long, default_value_t = 3)]
    pub mem_k: usize,
    #[command(flatten)]
    pub backends: BackendArgs,
}

fn run_config(args: &RunArgs) -> CliResult<RunConfig> {
    let seeds = match (&args.seeds, args.runs) {
        (Some(s), _) => s.clone(),
        (None, Some(n)) => (0..n as i64).collect(),
        (None, None) => (0..5).collect(),
    };
    let cfg = RunConfig { n_runs: args.runs.unwrap_or(seeds.len()), seeds, split: args.split, jobs: args.jobs.max(1) };
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(args: RunArgs) -> CliResult<()> {
    let arms = ArmRegistry::with_builtin();
    let arm = arms.get(&args.arm)?;
    if !arm.allowed_on(args.split) {
        return Err(CliError::Config(format!(
            "arm {} must not be evaluated on the {} split",
            arm.name(),
            args.split
        )));
    }
    let cfg = run_config(&args)?;
    let tasks: Vec<_> = load_tasks(&args.task_file)?.into_iter().filter(|t| t.split == args.split).collect();
    if tasks.is_empty() {
        return Err(CliError::Config(format!("{} has no {} tasks", args.task_file.display(), args.split)));
    }

    let backends = Backends::new(&args.backends)?;
    let params = args.backends.params()?;
    let mut session = Session::new(backends.require("assistant", args.backends.assistant.as_deref())?);
    session.params = params.clone();
    session.system_prompt = args.system_prompt.clone();
    session.max_turns = args.max_turns;
    session.shuffle_shards = args.shuffle_shards;
    let mut env = ArmEnv::new(session);
    env.mem_k = args.mem_k;
    if !matches!(arm.setting(), Setting::Full | Setting::Sharded) {
        let backend = backends.require("mediator", args.backends.mediator.as_deref())?;
        env = env.with_mediator(mediator_setup(
            backend,
            params,
            args.mediator_prompt.as_deref(),
            args.explicate_final_only,
        )?);
    }
    match &args.experiences {
        Some(p) => env = env.with_experiences(ExperienceSet::from_json(&read_input(p)?)?),
        None if arm.setting() == Setting::Mediated => {
            eprintln!("warning: no experience store given; the mediator runs cold-start with no experiences");
        }
        None => {}
    }
    match &args.pairs {
        Some(p) => env = env.with_pairs(serde_json::from_str::<PairFile>(&read_input(p)?)
            .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?
            .pairs),
        None if arm.setting() == Setting::IclBaseline => {
            eprintln!("warning: no pairs given; the icl mediator runs cold-start with no examples");
        }
        None => {}
    }

    let out = run_batch(&tasks, arm.as_ref(), &cfg, &env)?;
    backends.finish()?;
    if let Some(p) = &args.traj_out {
        write_output(p, &out.trajectories_jsonl())?;
    }
    let doc = ReportDocument::new(out.report)?;
    if let Some(p) = &args.report_out {
        write_report(p, &doc)?;
    }
    print!("{}", table::render(std::slice::from_ref(&doc.aggregate), None));

    let failed = out.trajectories.iter().filter(|t| t.error.is_some()).count();
    if failed > 0 {
        eprintln!("warning: {failed} of {} cells failed and were scored 0", out.trajectories.len());
        if failed == out.trajectories.len() {
            let first = out.trajectories[0].error.clone().unwrap_or_default();
            return Err(CliError::Backend(format!("every cell failed; first error: {first}")));
        }
    }
    Ok(())
}

fn load_trajectories(paths: &[PathBuf]) -> CliResult<Vec<Trajectory>> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(
            trajectories_from_jsonl(&read_input(p)?).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?,
        );
    }
    Ok(all)
}

fn need_matrix(loaded: crate::setup::LoadedReport, path: &std::path::Path) -> CliResult<RunReport> {
    loaded
        .report
        .ok_or_else(|| CliError::Data(format!("{} has no score matrix", path.display())))
}

#[derive(Debug, Args)]
pub struct MineArgs {
    /// Report of the full arm on the fewshot split.
    #[arg(long)]
    pub full: PathBuf,
    /// Report of the sharded arm on the fewshot split.
    #[arg(long)]
    pub sharded: PathBuf,
    /// Trajectory files of both runs.
    #[arg(long, required = true, num_args = 1..)]
    pub trajectories: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn mine(args: MineArgs) -> CliResult<()> {
    let full = need_matrix(load_report(&args.full)?, &args.full)?;
    let sharded = need_matrix(load_report(&args.sharded)?, &args.sharded)?;
    let trajectories = load_trajectories(&args.trajectories)?;
    let pairs = mine_pairs(&full, &sharded, &trajectories, args.threshold)?;
    if pairs.is_empty() {
        eprintln!("warning: no task passed in full but failed when sharded; no pairs written");
    }
    let file = PairFile { threshold: args.threshold, pairs };
    file.save(&args.out)?;
    println!("{} contrastive pairs written to {}", file.pairs.len(), args.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, value_name = "SPEC")]
    pub refiner: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub max_experiences: usize,
    #[arg(long, default_value = "default")]
    pub user_id: String,
    /// Drop guidelines identical to an earlier one.
    #[arg(long)]
    pub dedup: bool,
    /// Task file whose test-split instructions guidelines must not copy.
    #[arg(long)]
    pub held_out: Option<PathBuf>,
    #[command(flatten)]
    pub backends: BackendArgs,
}

pub fn refine(args: RefineArgs) -> CliResult<()> {
    let file: PairFile = serde_json::from_str(&read_input(&args.pairs)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.pairs.display())))?;
    if let Some(p) = file.pairs.iter().find(|p| p.d_minus.split != Split::Fewshot) {
        return Err(CliError::Config(format!(
            "pair {} comes from the {} split; experiences may only be distilled from fewshot history",
            p.task_id, p.d_minus.split
        )));
    }
    let backends = Backends::new(&args.backends)?;
    let refiner = backends.require("refiner", args.refiner.as_deref())?;
    let mut opts = DistillOptions::new(args.user_id.clone(), args.max_experiences);
    opts.dedup = args.dedup;
    opts.params = args.backends.params()?;
    opts.created_from = vec![args.pairs.display().to_string()];
    if let Some(p) = &args.held_out {
        opts.held_out = load_tasks(p)?
            .into_iter()
            .filter(|t| t.split == Split::Test)
            .map(|t| t.full_instruction)
            .collect();
    }
    let outcome = distill(&file.pairs, &refiner, &opts)?;
    backends.finish()?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    outcome.set.save(&args.out)?;
    println!("{} experiences written to {}", outcome.set.len(), args.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub trajectories: Vec<PathBuf>,
    /// Report JSON (single-arm input only); a `.csv` is written next to it.
    #[arg(long)]
    pub report_out: Option<PathBuf>,
}

pub fn eval(args: EvalArgs) -> CliResult<()> {
    let trajectories = load_trajectories(&args.trajectories)?;
    if trajectories.is_empty() {
        return Err(CliError::Data("no trajectories".into()));
    }
    if let Some(t) = trajectories.iter().find(|t| t.split != Split::Test) {
        return Err(CliError::Config(format!(
            "trajectory for {} is from the {} split; only test-split runs are evaluated",
            t.task_id, t.split
        )));
    }
    let mut by_arm: BTreeMap<String, Vec<Trajectory>> = BTreeMap::new();
    for t in trajectories {
        by_arm.entry(t.arm.clone()).or_default().push(t);
    }
    if args.report_out.is_some() && by_arm.len() != 1 {
        return Err(CliError::Config(format!(
            "--report-out needs trajectories of one arm, got {}",
            by_arm.len()
        )));
    }
    let mut aggs = Vec::new();
    for (arm, trajs) in &by_arm {
        let mut seeds: Vec<i64> = Vec::new();
        for t in trajs {
            if !seeds.contains(&t.seed) {
                seeds.push(t.seed);
            }
        }
        let doc = ReportDocument::new(RunReport::from_trajectories(arm, Split::Test, &seeds, trajs)?)?;
        if let Some(p) = &args.report_out {
            write_report(p, &doc)?;
        }
        aggs.push(doc.aggregate);
    }
    print!("{}", table::render(&aggs, None));
    Ok(())
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report files (report JSON, bare score matrix, or aggregate).
    #[arg(long = "report", required = true, num_args = 1..)]
    pub reports: Vec<PathBuf>,
    /// Baseline row of the gain line.
    #[arg(long, default_value = "sharded")]
    pub gain_from: String,
    /// Improved row of the gain line.
    #[arg(long, default_value = "mediated")]
    pub gain_to: String,
    /// Write reference-vs-arm degradation pairs as CSV.
    #[arg(long, value_name = "PATH")]
    pub emit_plot_data: Option<PathBuf>,
    /// Reference arm for the plot data.
    #[arg(long, default_value = "full")]
    pub reference: String,
}

pub fn report(args: ReportArgs) -> CliResult<()> {
    let mut rows: Vec<(Aggregate, u64)> = Vec::new();
    for p in &args.reports {
        let loaded = load_report(p)?;
        if let Some(r) = &loaded.report {
            if r.split != Split::Test {
                return Err(CliError::Config(format!(
                    "{} is a {} report; only test-split results are reported",
                    p.display(),
                    r.split
                )));
            }
        }
        let tokens = loaded.report.as_ref().map_or(0, |r| r.total_tokens());
        rows.push((loaded.aggregate, tokens));
    }
    let find = |arm: &str| rows.iter().find(|(a, _)| a.arm == arm);
    let gain = find(&args.gain_from).zip(find(&args.gain_to)).map(|(a, b)| (&a.0, &b.0));
    let aggs: Vec<Aggregate> = rows.iter().map(|(a, _)| a.clone()).collect();
    print!("{}", table::render(&aggs, gain));

    if let Some(path) = &args.emit_plot_data {
        let (reference, ref_tokens) = find(&args.reference)
            .ok_or_else(|| CliError::Config(format!("plot data needs a {:?} report", args.reference)))?;
        let mut points = Vec::new();
        for (agg, tokens) in rows.iter().filter(|(a, _)| a.arm != args.reference) {
            points.push(DegradationPoint {
                reference: reference.arm.clone(),
                degraded: agg.arm.clone(),
                reference_p_bar: reference.macro_p_bar,
                degraded_p_bar: agg.macro_p_bar,
                relative_degradation: lich_core::metrics::relative_degradation(reference, agg)?,
                reference_tokens: *ref_tokens,
                degraded_tokens: *tokens,
            });
        }
        write_output(path, &plot_csv(&points))?;
    }
    Ok(())
}

