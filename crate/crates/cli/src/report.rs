//! Report assembly and the files written for a run.

use std::io::Write;
use std::path::{Path, PathBuf};

use qnet_core::repeater::SimReport;
use serde::Serialize;

use crate::config::{Format, ResolvedConfig, RunConfig};
use crate::CliError;

pub const TOOL: &str = env!("CARGO_PKG_NAME");
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// The JSON summary. A pure function of the resolved config; wall-clock
/// timing lives in [`Timing`] so reruns compare byte for byte.
#[derive(Debug, Serialize)]
pub struct Report<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub config_hash: String,
    pub config: RunConfig,
    pub summary: &'a SimReport,
}

impl<'a> Report<'a> {
    pub fn new(config: &ResolvedConfig, summary: &'a SimReport) -> Self {
        Report {
            tool: TOOL,
            version: VERSION,
            config_hash: config.hash(),
            config: config.echo(),
            summary,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Serialize)]
pub struct Timing {
    pub config_hash: String,
    pub wall_clock_seconds: f64,
    pub workers: usize,
}

#[derive(Serialize)]
struct TrialRow<'a> {
    repetition: u64,
    link: &'a str,
    time: f64,
    outcome: qnet_core::channel::Click,
    cumulative_trials: u64,
}

#[derive(Serialize)]
struct EventRow<'a> {
    repetition: u64,
    time: f64,
    node: &'a str,
    kind: qnet_core::repeater::EventKind,
    detail: &'a str,
}

#[derive(Serialize)]
struct MetricRow<'a> {
    metric: &'a str,
    mean: f64,
    std: f64,
    min: f64,
    max: f64,
    count: u64,
}

#[derive(Serialize)]
struct LinkRow<'a> {
    link: &'a str,
    herald_probability: f64,
    expected_trials: f64,
    latency: f64,
    heralds: u64,
    total_trials: u64,
    mean_trials: f64,
    trials_std: f64,
    empirical_herald_probability: f64,
    herald_rate: f64,
}

#[derive(Serialize)]
struct StageRow<'a> {
    node: &'a str,
    analytic_success_probability: f64,
    mean_success_probability: f64,
    attempts: u64,
    successes: u64,
}

fn csv_error(e: csv::Error) -> CliError {
    CliError::Runtime(format!("writing CSV: {e}"))
}

fn write_rows<W: Write, T: Serialize>(out: W, rows: impl IntoIterator<Item = T>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush().map_err(|e| CliError::Runtime(format!("writing CSV: {e}")))
}

pub fn write_trials<W: Write>(out: W, report: &SimReport) -> Result<(), CliError> {
    write_rows(
        out,
        report.trials.iter().map(|t| TrialRow {
            repetition: t.repetition,
            link: &t.link,
            time: t.time,
            outcome: t.outcome,
            cumulative_trials: t.cumulative_trials,
        }),
    )
}

pub fn write_events<W: Write>(out: W, report: &SimReport) -> Result<(), CliError> {
    write_rows(
        out,
        report.events.iter().map(|e| EventRow {
            repetition: e.repetition,
            time: e.time,
            node: &e.node,
            kind: e.kind,
            detail: &e.detail,
        }),
    )
}

pub fn write_metrics<W: Write>(out: W, report: &SimReport) -> Result<(), CliError> {
    write_rows(
        out,
        report.metrics.iter().map(|(name, m)| MetricRow {
            metric: name,
            mean: m.mean,
            std: m.std,
            min: m.min,
            max: m.max,
            count: m.count,
        }),
    )
}

pub fn write_links<W: Write>(out: W, report: &SimReport) -> Result<(), CliError> {
    write_rows(
        out,
        report.links.iter().map(|l| LinkRow {
            link: &l.id,
            herald_probability: l.herald_probability,
            expected_trials: l.expected_trials,
            latency: l.latency,
            heralds: l.heralds,
            total_trials: l.total_trials,
            mean_trials: l.mean_trials,
            trials_std: l.trials_std,
            empirical_herald_probability: l.empirical_herald_probability,
            herald_rate: l.herald_rate,
        }),
    )
}

pub fn write_stages<W: Write>(out: W, report: &SimReport) -> Result<(), CliError> {
    write_rows(
        out,
        report.stages.iter().map(|s| StageRow {
            node: &s.node,
            analytic_success_probability: s.analytic_success_probability,
            mean_success_probability: s.mean_success_probability,
            attempts: s.attempts,
            successes: s.successes,
        }),
    )
}

fn create(dir: &Path, name: &str) -> Result<std::fs::File, CliError> {
    let path = dir.join(name);
    std::fs::File::create(&path).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// Writes `summary.json` and `timing.json`, plus the CSV tables when the
/// format is CSV. Returns the paths written.
pub fn write_outputs(
    dir: &Path,
    config: &ResolvedConfig,
    report: &SimReport,
    timing: &Timing,
) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    let mut written = Vec::new();
    let mut file = |name: &str| -> Result<std::fs::File, CliError> {
        written.push(dir.join(name));
        create(dir, name)
    };
    file("summary.json")?
        .write_all(Report::new(config, report).to_json().as_bytes())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let t = serde_json::to_string_pretty(timing).expect("timing serializes") + "\n";
    file("timing.json")?
        .write_all(t.as_bytes())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    if config.format() == Format::Csv {
        write_metrics(file("metrics.csv")?, report)?;
        write_links(file("links.csv")?, report)?;
        write_events(file("events.csv")?, report)?;
        if config.protocol.record_trials {
            write_trials(file("trials.csv")?, report)?;
        }
        if !report.stages.is_empty() {
            write_stages(file("stages.csv")?, report)?;
        }
    }
    Ok(written)
}
