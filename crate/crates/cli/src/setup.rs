//! Flag groups and the wiring from flags to backends, sessions and stores.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::Args;
use lich_core::backend::{
    BackendRegistry, Cassette, ChatBackend, RecordingBackend, ReplayBackend, SamplingParams, SharedCassette,
};
use lich_core::domain::{validate_task_file, Split, TaskInstance};
use lich_core::mediator::{MediatorSetup, MediatorTemplate};
use lich_core::metrics::{Aggregate, ReportDocument, RunReport};

use crate::error::{read_input, write_output, CliError, CliResult};

pub fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "test" => Ok(Split::Test),
        "fewshot" => Ok(Split::Fewshot),
        other => Err(format!("unknown split {other:?} (expected test or fewshot)")),
    }
}

pub fn parse_seeds(s: &str) -> Result<Vec<i64>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<i64>().map_err(|e| format!("bad seed {p:?}: {e}")))
        .collect()
}

/// Backend selection shared by every subcommand that talks to a model.
#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    /// Assistant backend, e.g. `scripted:PATH`, `replay:PATH`, `http:MODEL`.
    #[arg(long, value_name = "SPEC")]
    pub assistant: Option<String>,
    /// Mediator backend (also the summarizer and fact extractor of the
    /// baseline arms).
    #[arg(long, value_name = "SPEC")]
    pub mediator: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 1024)]
    pub max_tokens: u32,
    /// Model tag recorded in requests (and sent when an http backend has no
    /// model of its own).
    #[arg(long, default_value = "default")]
    pub model_tag: String,
    /// Record every exchange into this cassette (appending if it exists).
    #[arg(long, value_name = "CASSETTE", conflicts_with = "replay")]
    pub record: Option<PathBuf>,
    /// Serve every backend role from this cassette.
    #[arg(long, value_name = "CASSETTE")]
    pub replay: Option<PathBuf>,
}

impl BackendArgs {
    pub fn params(&self) -> CliResult<SamplingParams> {
        if !(self.temperature >= 0.0) {
            return Err(CliError::Config(format!("temperature {} must be non-negative", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(CliError::Config("max-tokens must be positive".into()));
        }
        Ok(SamplingParams {
            temperature: self.temperature,
            max_output_tokens: self.max_tokens,
            model_tag: self.model_tag.clone(),
        })
    }
}

/// Builds backends for the roles of one invocation, honouring record and
/// replay.
pub struct Backends {
    registry: BackendRegistry,
    replay: Option<Arc<dyn ChatBackend>>,
    record: Option<(PathBuf, SharedCassette)>,
}

impl Backends {
    pub fn new(args: &BackendArgs) -> CliResult<Self> {
        let replay = match &args.replay {
            Some(p) => {
                if !p.exists() {
                    return Err(CliError::Config(format!("cassette {} does not exist", p.display())));
                }
                Some(Arc::new(ReplayBackend::load(p)?) as Arc<dyn ChatBackend>)
            }
            None => None,
        };
        let record = match &args.record {
            Some(p) => {
                let tape = if p.exists() { Cassette::load(p)? } else { Cassette::default() };
                Some((p.clone(), SharedCassette::from_cassette(tape)))
            }
            None => None,
        };
        Ok(Self { registry: BackendRegistry::with_builtin(), replay, record })
    }

    /// The backend for `role`, or `None` when neither a spec nor a cassette
    /// is available.
    pub fn build(&self, spec: Option<&str>) -> CliResult<Option<Arc<dyn ChatBackend>>> {
        if let Some(r) = &self.replay {
            return Ok(Some(r.clone()));
        }
        let Some(spec) = spec else { return Ok(None) };
        let backend = self.registry.build(spec)?;
        Ok(Some(match &self.record {
            Some((_, tape)) => Arc::new(RecordingBackend::new(backend, tape.clone())),
            None => backend,
        }))
    }

    pub fn require(&self, role: &str, spec: Option<&str>) -> CliResult<Arc<dyn ChatBackend>> {
        self.build(spec)?
            .ok_or_else(|| CliError::Config(format!("no {role} backend given (use --{role} SPEC or --replay)")))
    }

    /// Writes the recorded cassette, if recording.
    pub fn finish(&self) -> CliResult<()> {
        if let Some((path, tape)) = &self.record {
            write_output(path, &tape.snapshot().to_json())?;
            log::info!("recorded {} exchanges to {}", tape.snapshot().len(), path.display());
        }
        Ok(())
    }
}

pub fn load_tasks(path: &Path) -> CliResult<Vec<TaskInstance>> {
    Ok(validate_task_file(read_input(path)?.as_bytes())?)
}

pub fn mediator_setup(
    backend: Arc<dyn ChatBackend>,
    params: SamplingParams,
    template: Option<&Path>,
    final_only: bool,
) -> CliResult<MediatorSetup> {
    let mut setup = MediatorSetup::new(backend);
    setup.params = params;
    setup.final_only = final_only;
    if let Some(p) = template {
        setup.template = MediatorTemplate::parse(&read_input(p)?)?;
    }
    Ok(setup)
}

/// Accepted report file shapes.
#[derive(serde::Deserialize)]
#[serde(untagged)]
enum ReportFile {
    Document(ReportDocument),
    Report(RunReport),
    Aggregate(Aggregate),
}

/// A loaded report: the score matrix when the file has one, and its
/// aggregate (always recomputed from the finest data present).
pub struct LoadedReport {
    pub report: Option<RunReport>,
    pub aggregate: Aggregate,
}

pub fn load_report(path: &Path) -> CliResult<LoadedReport> {
    let text = read_input(path)?;
    let file: ReportFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{} is not a report: {e}", path.display())))?;
    match file {
        ReportFile::Document(ReportDocument { report, .. }) | ReportFile::Report(report) => {
            let aggregate = lich_core::metrics::aggregate(&report)?;
            Ok(LoadedReport { report: Some(report), aggregate })
        }
        ReportFile::Aggregate(mut agg) => {
            let p: Vec<f64> = agg.per_domain.values().map(|s| s.p_bar).collect();
            let r: Vec<f64> = agg.per_domain.values().map(|s| s.r).collect();
            agg.macro_p_bar = lich_core::metrics::macro_average(&p)?;
            agg.macro_r = lich_core::metrics::macro_average(&r)?;
            Ok(LoadedReport { report: None, aggregate: agg })
        }
    }
}

/// Writes `report.json` and its `.csv` sibling.
pub fn write_report(path: &Path, doc: &ReportDocument) -> CliResult<()> {
    write_output(path, &doc.to_json())?;
    write_output(&path.with_extension("csv"), &lich_core::metrics::report_csv(&doc.aggregate))
}
