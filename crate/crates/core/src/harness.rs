//! Experiment runner: presets, seeded trials, JSON-lines logs, metrics and
//! the ablation table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{
    validate_trace, Controller, ControllerParams, ErrorKind, PipelineState, Stages, TraceViolation,
};
use crate::perception::{EstimatorParams, NeedleSpec};
use crate::simworld::{
    Event, EventKind, FailureModel, PerceptionNoise, SimWorld, TimingModel, WorldConfig, WorldParams, WoundSpec,
};

/// Mixed into trial seeds so the controller and world streams differ.
const CONTROLLER_SEED_SALT: u64 = 0xC0A7_1A55_D1CE_5EED;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    SensingOnly,
    ThreadHandling,
    Stitch,
    StitchHuman,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::SensingOnly,
        Preset::ThreadHandling,
        Preset::Stitch,
        Preset::StitchHuman,
    ];

    pub fn stages(self) -> Stages {
        match self {
            Preset::SensingOnly => Stages {
                sweep: false,
                cinch: false,
                pose_correction: false,
            },
            Preset::ThreadHandling => Stages {
                sweep: true,
                cinch: true,
                pose_correction: false,
            },
            Preset::Stitch | Preset::StitchHuman => Stages::ALL,
        }
    }

    pub fn human(self) -> bool {
        self == Preset::StitchHuman
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::SensingOnly => "sensing_only",
            Preset::ThreadHandling => "thread_handling",
            Preset::Stitch => "stitch",
            Preset::StitchHuman => "stitch_human",
        }
    }

    /// Row label in the ablation table.
    pub fn label(self) -> &'static str {
        match self {
            Preset::SensingOnly => "Sensing Only",
            Preset::ThreadHandling => "Thread Handling",
            Preset::Stitch => "STITCH",
            Preset::StitchHuman => "STITCH + Human",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            format!("unknown preset {s:?}; expected one of sensing_only, thread_handling, stitch, stitch_human")
        })
    }
}

/// Everything one experiment needs. Missing tables and keys take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub n_trials: usize,
    pub base_seed: u64,
    pub controller: ControllerParams,
    pub failure: FailureModel,
    pub timing: TimingModel,
    pub noise: PerceptionNoise,
    pub ransac: EstimatorParams,
    pub needle: NeedleSpec,
    pub wound: WoundSpec,
    pub world: WorldParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Stitch,
            n_trials: 15,
            base_seed: 0,
            controller: ControllerParams::default(),
            failure: FailureModel::default(),
            timing: TimingModel::default(),
            noise: PerceptionNoise::default(),
            ransac: EstimatorParams::default(),
            needle: NeedleSpec::default(),
            wound: WoundSpec::default(),
            world: WorldParams::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(field: &str, message: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        message: message.to_string(),
    }
}

impl ExperimentConfig {
    /// Noise-free observations and no injected failures.
    pub fn ideal(preset: Preset) -> Self {
        Self {
            preset,
            noise: PerceptionNoise::none(),
            failure: FailureModel::none(),
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_trials < 1 {
            return Err(invalid("n_trials", "must be >= 1"));
        }
        self.controller.validate().map_err(|m| invalid("controller", m))?;
        self.failure.validate().map_err(|m| invalid("failure", m))?;
        self.timing.validate().map_err(|m| invalid("timing", m))?;
        self.noise.validate().map_err(|m| invalid("noise", m))?;
        self.ransac.plane.validate().map_err(|e| invalid("ransac.plane", e))?;
        self.ransac.circle.validate().map_err(|e| invalid("ransac.circle", e))?;
        self.needle.validate().map_err(|e| invalid("needle", e))?;
        self.wound.validate().map_err(|m| invalid("wound", m))?;
        self.world.validate().map_err(|m| invalid("world", m))?;
        Ok(())
    }

    /// Interventions available to each trial: only the human preset gets any.
    pub fn intervention_budget(&self) -> u32 {
        if self.preset.human() {
            self.failure.intervention_budget
        } else {
            0
        }
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            needle: self.needle,
            wound: self.wound.clone(),
            noise: self.noise,
            ransac: self.ransac,
            failure: FailureModel {
                intervention_budget: self.intervention_budget(),
                ..self.failure
            },
            timing: self.timing,
            world: self.world,
        }
    }

    pub fn trial_seed(&self, trial_id: usize) -> u64 {
        self.base_seed.wrapping_add(trial_id as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    WoundClosed,
    Failed(ErrorKind),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialLog {
    pub trial_id: usize,
    pub seed: u64,
    pub preset: Preset,
    pub intervention_budget: u32,
    pub n_target_sutures: usize,
    pub status: TrialStatus,
    pub sutures_completed: usize,
    pub events: Vec<Event>,
}

impl TrialLog {
    /// Simulated seconds from start to the last event.
    pub fn elapsed(&self) -> f64 {
        self.events.last().map_or(0.0, |e| e.t)
    }

    pub fn interventions(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Intervention { .. }))
            .count()
    }

    /// Checks the trace against the controller contracts and the terminal status.
    pub fn validate(&self, params: &ControllerParams) -> Result<(), TraceViolation> {
        validate_trace(
            &self.events,
            params,
            &self.preset.stages(),
            self.preset.human(),
            self.intervention_budget,
        )?;
        let last_state = self.events.iter().rev().find_map(|e| match e.kind {
            EventKind::Transition { to, .. } => Some(to),
            _ => None,
        });
        let expected = match self.status {
            TrialStatus::WoundClosed => PipelineState::Done,
            TrialStatus::Failed(k) => PipelineState::Failed(k),
        };
        if last_state != Some(expected) {
            return Err(TraceViolation {
                index: self.events.len(),
                message: format!("status {:?} but last transition reached {last_state:?}", self.status),
            });
        }
        Ok(())
    }
}

/// Runs one trial: sutures 1..=n until closure or an unrecoverable error.
pub fn run_trial(config: &ExperimentConfig, trial_id: usize) -> TrialLog {
    let seed = config.trial_seed(trial_id);
    let mut world = SimWorld::new(config.world_config(), seed);
    let mut controller = Controller::new(
        config.controller,
        config.preset.stages(),
        config.preset.human(),
        seed ^ CONTROLLER_SEED_SALT,
    );
    let n = config.wound.n_target_sutures;
    let mut status = TrialStatus::WoundClosed;
    let mut completed = 0;
    for i in 1..=n {
        match controller.run_suture(&mut world, i).error {
            Some(kind) => {
                status = TrialStatus::Failed(kind);
                break;
            }
            None => completed += 1,
        }
    }
    TrialLog {
        trial_id,
        seed,
        preset: config.preset,
        intervention_budget: config.intervention_budget(),
        n_target_sutures: n,
        status,
        sutures_completed: completed,
        events: world.into_events(),
    }
}

/// Runs every trial; output order follows trial id.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<TrialLog>, ConfigError> {
    config.validate()?;
    Ok((0..config.n_trials)
        .into_par_iter()
        .map(|k| run_trial(config, k))
        .collect())
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

const LOG_FORMAT: &str = "suture-log";
const LOG_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LogRecord {
    Header {
        format: String,
        version: u32,
        n_trials: usize,
    },
    Trial {
        trial_id: usize,
        seed: u64,
        preset: Preset,
        intervention_budget: u32,
        n_target_sutures: usize,
        status: TrialStatus,
        sutures_completed: usize,
        n_events: usize,
    },
    Event(Event),
}

/// One header line, then per trial a summary line followed by its events.
pub fn write_logs_to<W: Write>(logs: &[TrialLog], out: W) -> std::io::Result<()> {
    let mut out = BufWriter::new(out);
    let line = |r: &LogRecord, out: &mut BufWriter<W>| -> std::io::Result<()> {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")
    };
    line(
        &LogRecord::Header {
            format: LOG_FORMAT.into(),
            version: LOG_VERSION,
            n_trials: logs.len(),
        },
        &mut out,
    )?;
    for log in logs {
        line(
            &LogRecord::Trial {
                trial_id: log.trial_id,
                seed: log.seed,
                preset: log.preset,
                intervention_budget: log.intervention_budget,
                n_target_sutures: log.n_target_sutures,
                status: log.status,
                sutures_completed: log.sutures_completed,
                n_events: log.events.len(),
            },
            &mut out,
        )?;
        for e in &log.events {
            line(&LogRecord::Event(e.clone()), &mut out)?;
        }
    }
    out.flush()
}

pub fn write_logs(logs: &[TrialLog], path: &Path) -> Result<(), LogError> {
    write_logs_to(logs, std::fs::File::create(path)?)?;
    Ok(())
}

pub fn read_logs_from<R: BufRead>(input: R) -> Result<Vec<TrialLog>, LogError> {
    let parse_err = |line: usize, message: String| LogError::Parse { line, message };
    let mut logs: Vec<TrialLog> = Vec::new();
    let mut expected_trials = None;
    let mut pending = 0usize;
    let mut line_no = 0;
    for raw in input.lines() {
        let raw = raw?;
        line_no += 1;
        let record: LogRecord = serde_json::from_str(&raw).map_err(|e| parse_err(line_no, e.to_string()))?;
        match (record, expected_trials) {
            (
                LogRecord::Header {
                    format,
                    version,
                    n_trials,
                },
                None,
            ) => {
                if format != LOG_FORMAT || version != LOG_VERSION {
                    return Err(parse_err(
                        line_no,
                        format!("unsupported log format {format} v{version}"),
                    ));
                }
                expected_trials = Some(n_trials);
            }
            (_, None) => return Err(parse_err(line_no, "expected header record".into())),
            (LogRecord::Header { .. }, Some(_)) => return Err(parse_err(line_no, "duplicate header record".into())),
            (
                LogRecord::Trial {
                    trial_id,
                    seed,
                    preset,
                    intervention_budget,
                    n_target_sutures,
                    status,
                    sutures_completed,
                    n_events,
                },
                Some(_),
            ) => {
                if pending > 0 {
                    return Err(parse_err(
                        line_no,
                        format!("trial record while {pending} events are missing"),
                    ));
                }
                pending = n_events;
                logs.push(TrialLog {
                    trial_id,
                    seed,
                    preset,
                    intervention_budget,
                    n_target_sutures,
                    status,
                    sutures_completed,
                    events: Vec::with_capacity(n_events),
                });
            }
            (LogRecord::Event(e), Some(_)) => {
                if pending == 0 {
                    return Err(parse_err(line_no, "event outside any trial".into()));
                }
                pending -= 1;
                logs.last_mut().expect("pending implies a trial").events.push(e);
            }
        }
    }
    let Some(n_trials) = expected_trials else {
        return Err(parse_err(line_no + 1, "missing header record".into()));
    };
    if pending > 0 {
        return Err(parse_err(
            line_no + 1,
            format!("log truncated: {pending} events missing"),
        ));
    }
    if logs.len() != n_trials {
        return Err(parse_err(
            line_no + 1,
            format!(
                "log truncated: header announces {n_trials} trials, found {}",
                logs.len()
            ),
        ));
    }
    Ok(logs)
}

pub fn read_logs(path: &Path) -> Result<Vec<TrialLog>, LogError> {
    read_logs_from(BufReader::new(std::fs::File::open(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_trials: usize,
    pub mean_sutures_to_failure: f64,
    /// Percent.
    pub single_suture_success_rate: f64,
    pub three_throw_success_rate: f64,
    pub full_wound_success_rate: f64,
    /// Seconds per successful throw; absent when nothing succeeded.
    pub mean_time_per_suture: Option<f64>,
    pub error_counts: BTreeMap<ErrorKind, usize>,
    /// Absent unless human mode was on and at least one intervention happened.
    pub mean_sutures_to_intervention: Option<f64>,
    /// `histogram[k]` = trials that completed exactly `k` throws.
    pub histogram: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no trial logs")]
    Empty,
}

pub fn compute_metrics(logs: &[TrialLog]) -> Result<MetricsReport, MetricsError> {
    if logs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = logs.len() as f64;
    let max_sutures = logs
        .iter()
        .map(|l| l.n_target_sutures.max(l.sutures_completed))
        .max()
        .unwrap_or(0);
    let mut histogram = vec![0; max_sutures + 1];
    let mut attempts = 0usize;
    let mut successes = 0usize;
    let mut elapsed = 0.0;
    let mut error_counts: BTreeMap<ErrorKind, usize> = ErrorKind::ALL.iter().map(|k| (*k, 0)).collect();
    let mut between_interventions = Vec::new();
    for log in logs {
        histogram[log.sutures_completed] += 1;
        elapsed += log.elapsed();
        let mut since_intervention = 0usize;
        for e in &log.events {
            match e.kind {
                EventKind::Transition {
                    from: None | Some(PipelineState::Failed(_)),
                    to: PipelineState::Insertion,
                } => attempts += 1,
                EventKind::Transition {
                    to: PipelineState::Done,
                    ..
                } => {
                    successes += 1;
                    since_intervention += 1;
                }
                EventKind::Error { kind, .. } => *error_counts.entry(kind).or_insert(0) += 1,
                EventKind::Intervention { .. } => {
                    between_interventions.push(since_intervention);
                    since_intervention = 0;
                }
                _ => {}
            }
        }
    }
    let percent = |count: usize, total: f64| if total > 0.0 { 100.0 * count as f64 / total } else { 0.0 };
    let human = logs.iter().any(|l| l.intervention_budget > 0);
    Ok(MetricsReport {
        n_trials: logs.len(),
        mean_sutures_to_failure: logs.iter().map(|l| l.sutures_completed as f64).sum::<f64>() / n,
        single_suture_success_rate: percent(successes, attempts as f64),
        three_throw_success_rate: percent(logs.iter().filter(|l| l.sutures_completed >= 3).count(), n),
        full_wound_success_rate: percent(logs.iter().filter(|l| l.status == TrialStatus::WoundClosed).count(), n),
        mean_time_per_suture: (successes > 0).then(|| elapsed / successes as f64),
        error_counts,
        mean_sutures_to_intervention: (human && !between_interventions.is_empty())
            .then(|| between_interventions.iter().sum::<usize>() as f64 / between_interventions.len() as f64),
        histogram,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Table,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(format!("unknown report format {s:?}; expected table or csv")),
        }
    }
}

const ABSENT: &str = "–";

pub fn format_mean(v: f64) -> String {
    format!("{v:.2}")
}

pub fn format_percent(v: f64) -> String {
    format!("{v:.1}%")
}

pub fn format_seconds(v: Option<f64>) -> String {
    v.map_or(ABSENT.to_string(), |s| format!("{s:.1} sec"))
}

fn cells(m: &MetricsReport) -> Vec<String> {
    let mut row = vec![
        format_mean(m.mean_sutures_to_failure),
        format_percent(m.single_suture_success_rate),
        format_percent(m.three_throw_success_rate),
        format_percent(m.full_wound_success_rate),
        format_seconds(m.mean_time_per_suture),
    ];
    row.extend(
        ErrorKind::ALL
            .iter()
            .map(|k| m.error_counts.get(k).copied().unwrap_or(0).to_string()),
    );
    row.push(m.mean_sutures_to_intervention.map_or(ABSENT.to_string(), format_mean));
    row
}

const HEADERS: [&str; 10] = [
    "Mean Sutures to Failure",
    "Single-Suture Success Rate",
    "Three Throw Success Rate",
    "Full Wound Success Rate",
    "Mean Time per Suture",
    "I",
    "E",
    "H",
    "T",
    "Mean Sutures to Intervention",
];

const CSV_HEADERS: [&str; 11] = [
    "method",
    "mean_sutures_to_failure",
    "single_suture_success_rate",
    "three_throw_success_rate",
    "full_wound_success_rate",
    "mean_time_per_suture",
    "errors_i",
    "errors_e",
    "errors_h",
    "errors_t",
    "mean_sutures_to_intervention",
];

/// Renders one row per `(label, metrics)` pair in the ablation-table column order.
pub fn report_render(rows: &[(String, MetricsReport)], format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(&CSV_HEADERS.join(","));
            out.push('\n');
            for (label, m) in rows {
                let mut fields = vec![csv_field(label)];
                fields.extend(cells(m).iter().map(|c| csv_field(c)));
                out.push_str(&fields.join(","));
                out.push('\n');
            }
        }
        ReportFormat::Table => {
            let mut header = vec!["Method".to_string()];
            header.extend(HEADERS.iter().map(|h| h.to_string()));
            let body: Vec<Vec<String>> = rows
                .iter()
                .map(|(label, m)| std::iter::once(label.clone()).chain(cells(m)).collect())
                .collect();
            let widths: Vec<usize> = (0..header.len())
                .map(|c| {
                    std::iter::once(&header)
                        .chain(&body)
                        .map(|r| r[c].chars().count())
                        .max()
                        .unwrap_or(0)
                })
                .collect();
            let render = |r: &Vec<String>, out: &mut String| {
                let line: Vec<String> = r
                    .iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(c, (cell, w))| {
                        let pad = w - cell.chars().count();
                        if c == 0 {
                            format!("{cell}{}", " ".repeat(pad))
                        } else {
                            format!("{}{cell}", " ".repeat(pad))
                        }
                    })
                    .collect();
                let _ = writeln!(out, "{}", line.join(" | ").trim_end());
            };
            render(&header, &mut out);
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            let _ = writeln!(out, "{}", rule.join("-+-"));
            for r in &body {
                render(r, &mut out);
            }
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Sutures-to-failure histogram as CSV: `method,sutures,trials`.
pub fn histogram_csv(rows: &[(String, MetricsReport)]) -> String {
    let mut out = String::from("method,sutures,trials\n");
    for (label, m) in rows {
        for (k, count) in m.histogram.iter().enumerate() {
            let _ = writeln!(out, "{},{k},{count}", csv_field(label));
        }
    }
    out
}

/// Splits logs by preset, in preset order, and labels each group.
pub fn metrics_by_preset(logs: &[TrialLog]) -> Result<Vec<(String, MetricsReport)>, MetricsError> {
    let mut groups: BTreeMap<Preset, Vec<TrialLog>> = BTreeMap::new();
    for log in logs {
        groups.entry(log.preset).or_default().push(log.clone());
    }
    groups
        .into_iter()
        .map(|(p, g)| compute_metrics(&g).map(|m| (p.label().to_string(), m)))
        .collect()
}
