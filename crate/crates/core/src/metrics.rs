//! Answer verification, performance (P̄) and reliability (R) aggregates,
//! relative degradation, and report emission.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::domain::{Domain, Expected, MatchMode, Split, Trajectory, VerifierSpec};
use crate::error::{MetricsError, VerifyError};

/// Header of `report.csv`.
pub const CSV_HEADER: &str = "arm,domain,p_bar,r";

/// Note attached to every report: numeric answers are accepted if any decimal
/// literal in the answer matches.
pub const NUMERIC_EXTRACTION_NOTE: &str =
    "numeric_tolerance scores accept any decimal literal in the final answer";

/// Pluggable grader for `external_stub` verifiers (e.g. sandboxed execution).
pub trait ExternalVerifier: Send + Sync {
    fn score(&self, answer: &str, expected: &Expected) -> f64;
}

/// Placeholder grader: normalized containment of the expected text.
#[derive(Debug, Default, Clone, Copy)]
pub struct StubExternalVerifier;

impl ExternalVerifier for StubExternalVerifier {
    fn score(&self, answer: &str, expected: &Expected) -> f64 {
        binary(normalize(answer).contains(&normalize(&expected.as_text())))
    }
}

/// Verifier with an optional external grader.
#[derive(Clone, Default)]
pub struct Verifier {
    external: Option<Arc<dyn ExternalVerifier>>,
}

impl Verifier {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_external(external: Arc<dyn ExternalVerifier>) -> Self {
        Self { external: Some(external) }
    }

    /// Verifier whose `external_stub` kind uses [`StubExternalVerifier`].
    pub fn with_stub() -> Self {
        Self::with_external(Arc::new(StubExternalVerifier))
    }

    pub fn verify(&self, answer: &str, spec: &VerifierSpec) -> Result<f64, VerifyError> {
        match spec {
            VerifierSpec::ExactMatch { expected, mode } => {
                let a = normalize(answer);
                let e = normalize(&expected.as_text());
                Ok(binary(match mode {
                    MatchMode::Equals => a == e,
                    MatchMode::Contains => a.contains(&e),
                }))
            }
            VerifierSpec::NumericTolerance { expected, tolerance } => Ok(binary(
                extract_numbers(answer)
                    .into_iter()
                    .any(|x| (x - expected).abs() <= *tolerance),
            )),
            VerifierSpec::KeywordSet { keywords } => {
                let a = normalize(answer);
                Ok(binary(keywords.iter().all(|k| a.contains(&normalize(k)))))
            }
            VerifierSpec::ExternalStub { expected } => {
                let ext = self
                    .external
                    .as_ref()
                    .ok_or_else(|| VerifyError::UnsupportedVerifier(spec.kind().into()))?;
                let s = ext.score(answer, expected);
                if s == 0.0 || s == 1.0 {
                    Ok(s)
                } else {
                    Err(VerifyError::NonBinary(s))
                }
            }
        }
    }
}

/// Scores `answer` without an external grader.
pub fn verify(answer: &str, spec: &VerifierSpec) -> Result<f64, VerifyError> {
    Verifier::new().verify(answer, spec)
}

fn binary(ok: bool) -> f64 {
    if ok {
        1.0
    } else {
        0.0
    }
}

/// Lowercase, collapse whitespace, strip surrounding punctuation.
fn normalize(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
        .trim_matches(|c: char| c.is_ascii_punctuation() && c != '-' && c != '(' && c != ')')
        .to_string()
}

/// All decimal literals in `text`. A leading `-` counts as a sign only when it
/// does not follow an alphanumeric character (so `3-4-5` yields 3, 4, 5).
pub fn extract_numbers(text: &str) -> Vec<f64> {
    static NUM: OnceLock<Regex> = OnceLock::new();
    let re = NUM.get_or_init(|| Regex::new(r"\d+(?:\.\d+)?(?:[eE][-+]?\d+)?").expect("regex"));
    let bytes = text.as_bytes();
    re.find_iter(text)
        .filter_map(|m| {
            let start = m.start();
            let negative = start >= 1
                && bytes[start - 1] == b'-'
                && (start < 2 || !(bytes[start - 2] as char).is_ascii_alphanumeric());
            let v: f64 = m.as_str().parse().ok()?;
            Some(if negative { -v } else { v })
        })
        .collect()
}

/// `1 - (max - min)` over one instance's run scores.
pub fn instance_reliability(run_scores: &[f64]) -> Result<f64, MetricsError> {
    if run_scores.is_empty() {
        return Err(MetricsError::EmptyScores);
    }
    let max = run_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = run_scores.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(1.0 - (max - min))
}

/// Instance × run score matrix for one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub arm: String,
    pub split: Split,
    pub seeds: Vec<i64>,
    pub scores: BTreeMap<String, Vec<f64>>,
    pub token_totals: BTreeMap<String, Vec<u64>>,
    pub domain_of: BTreeMap<String, Domain>,
    /// Per-cell failure annotations, keyed by task id then run index.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub errors: BTreeMap<String, BTreeMap<usize, String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl RunReport {
    pub fn new(arm: impl Into<String>, split: Split, seeds: Vec<i64>) -> Self {
        Self {
            arm: arm.into(),
            split,
            seeds,
            scores: BTreeMap::new(),
            token_totals: BTreeMap::new(),
            domain_of: BTreeMap::new(),
            errors: BTreeMap::new(),
            notes: vec![NUMERIC_EXTRACTION_NOTE.to_string()],
        }
    }

    pub fn n_runs(&self) -> usize {
        self.seeds.len()
    }

    /// Builds a report from trajectories: one row per task, one column per
    /// seed (in the given seed order).
    pub fn from_trajectories(
        arm: &str,
        split: Split,
        seeds: &[i64],
        trajectories: &[Trajectory],
    ) -> Result<Self, MetricsError> {
        let col: BTreeMap<i64, usize> = seeds.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        if col.len() != seeds.len() {
            return Err(MetricsError::InvalidReport("duplicate seeds".into()));
        }
        let mut report = Self::new(arm, split, seeds.to_vec());
        let mut filled: BTreeMap<String, Vec<bool>> = BTreeMap::new();
        for t in trajectories {
            let j = *col.get(&t.seed).ok_or_else(|| {
                MetricsError::InvalidReport(format!("trajectory {} has unknown seed {}", t.task_id, t.seed))
            })?;
            let n = seeds.len();
            let row = report.scores.entry(t.task_id.clone()).or_insert_with(|| vec![0.0; n]);
            row[j] = t.score;
            report.token_totals.entry(t.task_id.clone()).or_insert_with(|| vec![0; n])[j] = t.total_tokens;
            report.domain_of.insert(t.task_id.clone(), t.domain);
            let seen = filled.entry(t.task_id.clone()).or_insert_with(|| vec![false; n]);
            if seen[j] {
                return Err(MetricsError::InvalidReport(format!(
                    "duplicate trajectory for ({}, seed {})",
                    t.task_id, t.seed
                )));
            }
            seen[j] = true;
            if let Some(e) = &t.error {
                report.errors.entry(t.task_id.clone()).or_default().insert(j, e.clone());
            }
        }
        if let Some((task, _)) = filled.iter().find(|(_, v)| v.iter().any(|f| !f)) {
            return Err(MetricsError::InvalidReport(format!("task {task} is missing runs")));
        }
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let n = self.n_runs();
        for (task, row) in &self.scores {
            if row.len() != n {
                return Err(MetricsError::InvalidReport(format!(
                    "task {task} has {} scores, expected {n}",
                    row.len()
                )));
            }
            if let Some(s) = row.iter().find(|s| !(0.0..=1.0).contains(*s)) {
                return Err(MetricsError::InvalidReport(format!("task {task} has score {s} outside [0,1]")));
            }
            if !self.domain_of.contains_key(task) {
                return Err(MetricsError::InvalidReport(format!("task {task} has no domain")));
            }
            match self.token_totals.get(task) {
                Some(t) if t.len() == n => {}
                _ => {
                    return Err(MetricsError::InvalidReport(format!(
                        "task {task} has a malformed token row"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn total_tokens(&self) -> u64 {
        self.token_totals.values().flatten().sum()
    }

    /// The (task, seed) cells this report covers.
    pub fn cells(&self) -> BTreeSet<(String, i64)> {
        self.scores
            .keys()
            .flat_map(|t| self.seeds.iter().map(move |s| (t.clone(), *s)))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub p_bar: f64,
    pub r: f64,
    #[serde(default)]
    pub instances: usize,
}

/// Per-domain and macro P̄ / R on the percent scale (unrounded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub arm: String,
    pub per_domain: BTreeMap<Domain, DomainStats>,
    #[serde(default)]
    pub macro_p_bar: f64,
    #[serde(default)]
    pub macro_r: f64,
}

impl Aggregate {
    pub fn domain(&self, d: Domain) -> Option<&DomainStats> {
        self.per_domain.get(&d)
    }
}

/// Unweighted mean.
pub fn macro_average(values: &[f64]) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyDomain);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Rounds half away from zero at one decimal for presentation. Values within
/// 1e-9 of a half step are treated as on it, so `53.575` prints `53.6`.
pub fn round_1(x: f64) -> f64 {
    let scaled = x * 10.0;
    let nudged = scaled + scaled.signum() * 1e-9;
    nudged.round() / 10.0
}

pub fn format_1(x: f64) -> String {
    format!("{:.1}", round_1(x))
}

/// Per-domain P̄ (mean over instances and runs) and R (mean instance
/// reliability), ×100, plus their unweighted mean over the domains present.
pub fn aggregate(report: &RunReport) -> Result<Aggregate, MetricsError> {
    report.validate()?;
    let mut by_domain: BTreeMap<Domain, Vec<&Vec<f64>>> = BTreeMap::new();
    for (task, row) in &report.scores {
        by_domain.entry(report.domain_of[task]).or_default().push(row);
    }
    if by_domain.is_empty() || report.n_runs() == 0 {
        return Err(MetricsError::EmptyDomain);
    }
    let mut per_domain = BTreeMap::new();
    for (domain, rows) in by_domain {
        let cells: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let p_bar = 100.0 * cells.iter().sum::<f64>() / cells.len() as f64;
        let rel = rows
            .iter()
            .map(|r| instance_reliability(r))
            .collect::<Result<Vec<_>, _>>()?;
        let r = 100.0 * rel.iter().sum::<f64>() / rel.len() as f64;
        per_domain.insert(domain, DomainStats { p_bar, r, instances: rows.len() });
    }
    let p: Vec<f64> = per_domain.values().map(|s| s.p_bar).collect();
    let r: Vec<f64> = per_domain.values().map(|s| s.r).collect();
    Ok(Aggregate {
        arm: report.arm.clone(),
        macro_p_bar: macro_average(&p)?,
        macro_r: macro_average(&r)?,
        per_domain,
    })
}

/// `(full - degraded) / full` on macro P̄.
pub fn relative_degradation(full: &Aggregate, degraded: &Aggregate) -> Result<f64, MetricsError> {
    relative_degradation_of(full.macro_p_bar, degraded.macro_p_bar)
}

pub fn relative_degradation_of(full_p_bar: f64, degraded_p_bar: f64) -> Result<f64, MetricsError> {
    if full_p_bar == 0.0 {
        return Err(MetricsError::DivisionByZero("full P̄ is zero"));
    }
    Ok((full_p_bar - degraded_p_bar) / full_p_bar)
}

/// `report.csv`: one row per domain plus an `average` row.
pub fn report_csv(agg: &Aggregate) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (d, s) in &agg.per_domain {
        out.push_str(&format!("{},{},{},{}\n", agg.arm, d, format_1(s.p_bar), format_1(s.r)));
    }
    out.push_str(&format!(
        "{},average,{},{}\n",
        agg.arm,
        format_1(agg.macro_p_bar),
        format_1(agg.macro_r)
    ));
    out
}

/// Full `report.json` document: the raw matrix plus its aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub report: RunReport,
    pub aggregate: Aggregate,
}

impl ReportDocument {
    pub fn new(report: RunReport) -> Result<Self, MetricsError> {
        let aggregate = aggregate(&report)?;
        Ok(Self { report, aggregate })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// One row of plot data: a reference arm against a degraded arm.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationPoint {
    pub reference: String,
    pub degraded: String,
    pub reference_p_bar: f64,
    pub degraded_p_bar: f64,
    pub relative_degradation: f64,
    pub reference_tokens: u64,
    pub degraded_tokens: u64,
}

pub const PLOT_HEADER: &str =
    "reference,degraded,reference_p_bar,degraded_p_bar,relative_degradation,reference_tokens,degraded_tokens";

pub fn plot_csv(points: &[DegradationPoint]) -> String {
    let mut out = String::from(PLOT_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{:.6},{},{}\n",
            p.reference,
            p.degraded,
            p.reference_p_bar,
            p.degraded_p_bar,
            p.relative_degradation,
            p.reference_tokens,
            p.degraded_tokens
        ));
    }
    out
}
