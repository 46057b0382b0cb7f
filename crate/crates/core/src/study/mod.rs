//! Blinded pairwise preference study: bundle construction, preference log,
//! and de-anonymized reporting.

pub mod server;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum StudyError {
    #[error("system outputs disagree on unit ids: only in system 1: {only1:?}; only in system 2: {only2:?}")]
    IdMismatch { only1: Vec<String>, only2: Vec<String> },
    #[error("duplicate unit id {0}")]
    DuplicateUnit(String),
    #[error("unit {0} has no input summary or ground truth in either output file")]
    MissingContext(String),
    #[error("unknown comparison {0}")]
    UnknownComparison(String),
    #[error("invalid dimension {0:?}")]
    InvalidDimension(String),
    #[error("invalid choice {0:?}")]
    InvalidChoice(String),
    #[error("invalid annotator id")]
    InvalidAnnotator,
    #[error("{path} line {line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StudyError + '_ {
    move |source| StudyError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    ClarityCoherence,
    CoverageRelevance,
    CorrectnessSoundness,
}

impl Dimension {
    pub const ALL: [Dimension; 3] = [
        Dimension::ClarityCoherence,
        Dimension::CoverageRelevance,
        Dimension::CorrectnessSoundness,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::ClarityCoherence => "clarity_coherence",
            Dimension::CoverageRelevance => "coverage_relevance",
            Dimension::CorrectnessSoundness => "correctness_soundness",
        }
    }

    pub fn parse(s: &str) -> Result<Self, StudyError> {
        Dimension::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| StudyError::InvalidDimension(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
    #[serde(rename = "tie")]
    Tie,
}

impl Choice {
    pub fn parse(s: &str, ties_enabled: bool) -> Result<Self, StudyError> {
        match s {
            "A" => Ok(Choice::A),
            "B" => Ok(Choice::B),
            "tie" if ties_enabled => Ok(Choice::Tie),
            _ => Err(StudyError::InvalidChoice(s.to_string())),
        }
    }
}

/// One system's output for a comparison unit. `unit_id` defaults to
/// `{case_id}::{disease_id}`; `verdict` is accepted for `prediction`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemOutput {
    #[serde(default)]
    pub unit_id: Option<String>,
    #[serde(default)]
    pub case_id: Option<String>,
    #[serde(default)]
    pub disease_id: Option<String>,
    #[serde(default)]
    pub input_summary: Option<String>,
    #[serde(default)]
    pub ground_truth: Option<u8>,
    #[serde(alias = "verdict")]
    pub prediction: serde_json::Value,
    #[serde(default)]
    pub trace: String,
}

impl SystemOutput {
    pub fn id(&self) -> Option<String> {
        self.unit_id.clone().or_else(|| match (&self.case_id, &self.disease_id) {
            (Some(c), Some(d)) => Some(format!("{c}::{d}")),
            _ => None,
        })
    }
}

pub fn read_system_outputs(path: &Path) -> Result<Vec<SystemOutput>, StudyError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| StudyError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let o: SystemOutput = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if o.id().is_none() {
            return Err(malformed("needs unit_id or case_id + disease_id".into()));
        }
        out.push(o);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideOutput {
    pub prediction: String,
    pub trace: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

/// Server-side record; `system1_side` must never reach a client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonCase {
    pub comparison_id: String,
    pub unit_id: String,
    pub input_summary: String,
    pub ground_truth: u8,
    pub side_a: SideOutput,
    pub side_b: SideOutput,
    pub system1_side: Side,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub seed: u64,
    pub systems: [String; 2],
    pub ties_enabled: bool,
    pub comparisons: Vec<ComparisonCase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    /// Units sampled for the study; `None` keeps all.
    pub sample_size: Option<usize>,
    pub ties_enabled: bool,
    pub system_names: [String; 2],
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            sample_size: Some(115),
            ties_enabled: false,
            system_names: ["system1".into(), "system2".into()],
        }
    }
}

fn prediction_text(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn index(outputs: Vec<SystemOutput>) -> Result<BTreeMap<String, SystemOutput>, StudyError> {
    let mut map = BTreeMap::new();
    for o in outputs {
        let id = o.id().expect("validated on read");
        if map.insert(id.clone(), o).is_some() {
            return Err(StudyError::DuplicateUnit(id));
        }
    }
    Ok(map)
}

/// Pair the two systems' outputs per unit, sample, and flip a seeded coin per
/// comparison to decide which system appears as side A.
pub fn build_study(
    system1: Vec<SystemOutput>,
    system2: Vec<SystemOutput>,
    seed: u64,
    config: &StudyConfig,
) -> Result<Study, StudyError> {
    let s1 = index(system1)?;
    let s2 = index(system2)?;
    let only1: Vec<String> = s1.keys().filter(|k| !s2.contains_key(*k)).cloned().collect();
    let only2: Vec<String> = s2.keys().filter(|k| !s1.contains_key(*k)).cloned().collect();
    if !only1.is_empty() || !only2.is_empty() {
        return Err(StudyError::IdMismatch { only1, only2 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<&String> = s1.keys().collect();
    if let Some(k) = config.sample_size.filter(|&k| k < ids.len()) {
        ids.shuffle(&mut rng);
        ids.truncate(k);
        ids.sort();
    }
    let width = ids.len().to_string().len().max(4);
    let mut comparisons = Vec::with_capacity(ids.len());
    for (i, id) in ids.into_iter().enumerate() {
        let (a, b) = (&s1[id], &s2[id]);
        let summary = a.input_summary.clone().or_else(|| b.input_summary.clone());
        let truth = a.ground_truth.or(b.ground_truth);
        let (Some(input_summary), Some(ground_truth)) = (summary, truth) else {
            return Err(StudyError::MissingContext(id.clone()));
        };
        let out1 = SideOutput {
            prediction: prediction_text(&a.prediction),
            trace: a.trace.clone(),
        };
        let out2 = SideOutput {
            prediction: prediction_text(&b.prediction),
            trace: b.trace.clone(),
        };
        let system1_side = if rng.random_bool(0.5) { Side::A } else { Side::B };
        let (side_a, side_b) = match system1_side {
            Side::A => (out1, out2),
            Side::B => (out2, out1),
        };
        comparisons.push(ComparisonCase {
            comparison_id: format!("c{:0width$}", i + 1),
            unit_id: id.clone(),
            input_summary,
            ground_truth,
            side_a,
            side_b,
            system1_side,
        });
    }
    Ok(Study {
        seed,
        systems: config.system_names.clone(),
        ties_enabled: config.ties_enabled,
        comparisons,
    })
}

pub fn write_study(path: &Path, study: &Study) -> Result<(), StudyError> {
    let mut body = serde_json::to_string_pretty(study).expect("study serializes");
    body.push('\n');
    std::fs::write(path, body).map_err(io_err(path))
}

pub fn read_study(path: &Path) -> Result<Study, StudyError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| StudyError::Malformed {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub comparison_id: String,
    pub annotator_id: String,
    pub dimension: Dimension,
    pub choice: Choice,
    pub timestamp: u64,
}

/// What a client sees of a comparison. No assignment or system name fields.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientPayload {
    pub comparison_id: String,
    pub input_summary: String,
    pub ground_truth: u8,
    pub side_a: SideOutput,
    pub side_b: SideOutput,
    pub dimensions: Vec<&'static str>,
    pub ties_enabled: bool,
    pub progress: Progress,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Progress {
    pub completed: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum NextCase {
    Case(Box<ClientPayload>),
    Done { done: bool, progress: Progress },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DimensionStats {
    /// Decided (non-tie) judgments.
    pub annotated: usize,
    pub ties: usize,
    pub wins: BTreeMap<String, usize>,
    /// wins / annotated; `None` when nothing is annotated.
    pub rate: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportView {
    pub dimensions: BTreeMap<String, DimensionStats>,
    pub judgments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub systems: [String; 2],
    pub comparisons: usize,
    pub pooled: ReportView,
    pub per_annotator: BTreeMap<String, ReportView>,
}

type Key = (String, String, Dimension);

/// Latest choice per (comparison, annotator, dimension).
#[derive(Debug, Default, Clone)]
pub struct Ledger {
    latest: HashMap<Key, Choice>,
}

impl Ledger {
    pub fn apply(&mut self, r: &PreferenceRecord) {
        self.latest
            .insert((r.comparison_id.clone(), r.annotator_id.clone(), r.dimension), r.choice);
    }

    pub fn len(&self) -> usize {
        self.latest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latest.is_empty()
    }

    fn dims_done(&self, comparison_id: &str, annotator: &str) -> usize {
        Dimension::ALL
            .iter()
            .filter(|d| {
                self.latest
                    .contains_key(&(comparison_id.to_string(), annotator.to_string(), **d))
            })
            .count()
    }
}

fn view<'a>(study: &Study, rows: impl Iterator<Item = (&'a Key, &'a Choice)>) -> ReportView {
    let sides: HashMap<&str, Side> = study
        .comparisons
        .iter()
        .map(|c| (c.comparison_id.as_str(), c.system1_side))
        .collect();
    let mut out = ReportView::default();
    for d in Dimension::ALL {
        let mut stats = DimensionStats::default();
        for s in &study.systems {
            stats.wins.insert(s.clone(), 0);
        }
        out.dimensions.insert(d.as_str().to_string(), stats);
    }
    for ((cid, _, dim), choice) in rows {
        let Some(side1) = sides.get(cid.as_str()) else { continue };
        out.judgments += 1;
        let stats = out.dimensions.get_mut(dim.as_str()).expect("all dimensions present");
        let winner = match (choice, side1) {
            (Choice::Tie, _) => {
                stats.ties += 1;
                continue;
            }
            (Choice::A, Side::A) | (Choice::B, Side::B) => &study.systems[0],
            _ => &study.systems[1],
        };
        stats.annotated += 1;
        *stats.wins.get_mut(winner).expect("system present") += 1;
    }
    for stats in out.dimensions.values_mut() {
        let total = stats.annotated;
        stats.rate = stats
            .wins
            .iter()
            .map(|(s, w)| (s.clone(), (total > 0).then(|| *w as f64 / total as f64)))
            .collect();
    }
    out
}

/// Pooled and per-annotator win counts and rates, de-anonymized.
pub fn report(study: &Study, ledger: &Ledger) -> StudyReport {
    let annotators: BTreeSet<&str> = ledger.latest.keys().map(|k| k.1.as_str()).collect();
    StudyReport {
        systems: study.systems.clone(),
        comparisons: study.comparisons.len(),
        pooled: view(study, ledger.latest.iter()),
        per_annotator: annotators
            .into_iter()
            .map(|a| (a.to_string(), view(study, ledger.latest.iter().filter(|(k, _)| k.1 == a))))
            .collect(),
    }
}

pub fn replay(path: &Path) -> Result<Vec<PreferenceRecord>, StudyError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => out.push(r),
            // A torn final line from a crash is skipped, anything else is an error.
            Err(e) if e.is_eof() => log::warn!("{} line {}: truncated record skipped", path.display(), i + 1),
            Err(e) => {
                return Err(StudyError::Malformed {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Incoming preference before validation.
#[derive(Debug, Clone, Deserialize)]
pub struct Submission {
    pub comparison_id: String,
    pub annotator_id: String,
    pub dimension: String,
    pub choice: String,
}

struct Inner {
    ledger: Ledger,
    log: File,
}

/// Loaded study plus the append-only preference log.
pub struct StudyStore {
    study: Study,
    by_id: HashMap<String, usize>,
    log_path: PathBuf,
    inner: Mutex<Inner>,
}

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

impl StudyStore {
    /// Open the log at `log_path`, replaying existing records. Records for
    /// comparisons not in the study are skipped with a warning.
    pub fn open(study: Study, log_path: &Path) -> Result<Self, StudyError> {
        let by_id: HashMap<String, usize> = study
            .comparisons
            .iter()
            .enumerate()
            .map(|(i, c)| (c.comparison_id.clone(), i))
            .collect();
        let mut ledger = Ledger::default();
        for r in replay(log_path)? {
            if by_id.contains_key(&r.comparison_id) {
                ledger.apply(&r);
            } else {
                log::warn!("preference for unknown comparison {} ignored", r.comparison_id);
            }
        }
        if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(log_path)
            .map_err(io_err(log_path))?;
        Ok(StudyStore {
            study,
            by_id,
            log_path: log_path.to_path_buf(),
            inner: Mutex::new(Inner { ledger, log }),
        })
    }

    pub fn study(&self) -> &Study {
        &self.study
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    fn progress(&self, ledger: &Ledger, annotator: &str) -> Progress {
        Progress {
            completed: self
                .study
                .comparisons
                .iter()
                .filter(|c| ledger.dims_done(&c.comparison_id, annotator) == Dimension::ALL.len())
                .count(),
            total: self.study.comparisons.len(),
        }
    }

    /// Lowest-id comparison this annotator has not judged on every dimension.
    pub fn next_case(&self, annotator: &str) -> Result<NextCase, StudyError> {
        validate_annotator(annotator)?;
        let inner = self.inner.lock().expect("study lock");
        let progress = self.progress(&inner.ledger, annotator);
        let next = self
            .study
            .comparisons
            .iter()
            .find(|c| inner.ledger.dims_done(&c.comparison_id, annotator) < Dimension::ALL.len());
        Ok(match next {
            None => NextCase::Done { done: true, progress },
            Some(c) => NextCase::Case(Box::new(ClientPayload {
                comparison_id: c.comparison_id.clone(),
                input_summary: c.input_summary.clone(),
                ground_truth: c.ground_truth,
                side_a: c.side_a.clone(),
                side_b: c.side_b.clone(),
                dimensions: Dimension::ALL.iter().map(|d| d.as_str()).collect(),
                ties_enabled: self.study.ties_enabled,
                progress,
            })),
        })
    }

    /// Validate and append one preference; the log line is written and synced
    /// before the in-memory ledger changes.
    pub fn record(&self, s: &Submission) -> Result<PreferenceRecord, StudyError> {
        validate_annotator(&s.annotator_id)?;
        if !self.by_id.contains_key(&s.comparison_id) {
            return Err(StudyError::UnknownComparison(s.comparison_id.clone()));
        }
        let record = PreferenceRecord {
            comparison_id: s.comparison_id.clone(),
            annotator_id: s.annotator_id.clone(),
            dimension: Dimension::parse(&s.dimension)?,
            choice: Choice::parse(&s.choice, self.study.ties_enabled)?,
            timestamp: now_ms(),
        };
        let mut line = serde_json::to_string(&record).expect("record serializes");
        line.push('\n');
        let mut inner = self.inner.lock().expect("study lock");
        let io = io_err(&self.log_path);
        inner
            .log
            .write_all(line.as_bytes())
            .and_then(|_| inner.log.flush())
            .and_then(|_| inner.log.sync_data())
            .map_err(io)?;
        inner.ledger.apply(&record);
        Ok(record)
    }

    pub fn report(&self) -> StudyReport {
        report(&self.study, &self.inner.lock().expect("study lock").ledger)
    }

    pub fn export(&self) -> Result<Vec<u8>, StudyError> {
        let _guard = self.inner.lock().expect("study lock");
        std::fs::read(&self.log_path).map_err(io_err(&self.log_path))
    }

    pub fn sync(&self) -> Result<(), StudyError> {
        let inner = self.inner.lock().expect("study lock");
        inner.log.sync_all().map_err(io_err(&self.log_path))
    }
}

fn validate_annotator(a: &str) -> Result<(), StudyError> {
    if a.trim().is_empty() || a.len() > 128 || a.chars().any(char::is_control) {
        return Err(StudyError::InvalidAnnotator);
    }
    Ok(())
}
