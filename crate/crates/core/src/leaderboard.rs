//! Scoring database, leaderboard rebuild and on-disk outputs.
//!
//! The database is an append-only JSON-lines file, one [`ExperimentRecord`]
//! per line. Leaderboards are recomputed from it on demand, using the latest
//! record of each method within a phase.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! scoring_db.jsonl
//! <phase>/leaderboard.json
//! <phase>/rank_history.json
//! <phase>/<method>_<YYYYMMDD>_<HHMMSS>[_n]/result.json
//! <phase>/<method>_<YYYYMMDD>_<HHMMSS>[_n]/<task>/folds.csv
//! <phase>/<method>_<YYYYMMDD>_<HHMMSS>[_n]/<task>/fold_<kkk>/{loss_curve.csv,predictions.csv,confusion.json}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::TaskKind;
use crate::metrics::MetricWarning;
use crate::probe::FoldOutcome;
use crate::scoring::{self, RankingOptions, ScoringError, TaskQuality};

pub const DB_FILE: &str = "scoring_db.jsonl";
pub const LEADERBOARD_FILE: &str = "leaderboard.json";
pub const RANK_HISTORY_FILE: &str = "rank_history.json";
pub const RESULT_FILE: &str = "result.json";
const STAGING_PREFIX: &str = ".staging-";

#[derive(Debug, Error)]
pub enum LeaderboardError {
    #[error("record ({phase}, {method}, {timestamp}) already exists")]
    DuplicateRecord {
        phase: String,
        method: String,
        timestamp: DateTime<Utc>,
    },
    #[error("no records for phase `{0}`")]
    UnknownPhase(String),
    #[error("scoring database {path} line {line}: {reason}")]
    CorruptDatabase {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("leaderboard document invalid: {0}")]
    Schema(String),
    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

type Result<T> = std::result::Result<T, LeaderboardError>;

fn io_failure(path: &Path) -> impl FnOnce(std::io::Error) -> LeaderboardError + '_ {
    move |source| LeaderboardError::IoFailure {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub name: String,
    pub kind: TaskKind,
    /// Raw per-fold primary scores, in fold order.
    pub fold_scores: Vec<f64>,
    pub quality: TaskQuality,
    /// Fold means of every reported metric, keyed by metric name.
    pub metrics: BTreeMap<String, f64>,
    /// Number of folds that raised each warning.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub warnings: BTreeMap<MetricWarning, usize>,
}

impl TaskResult {
    /// Summarises fold outcomes for one task.
    pub fn from_folds(
        name: &str,
        kind: TaskKind,
        folds: &[FoldOutcome],
        epsilon: f64,
    ) -> Result<Self> {
        let fold_scores: Vec<f64> = folds.iter().map(|f| f.score.primary).collect();
        let quality = scoring::quality_score(name, &fold_scores, epsilon)?;
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let mut warnings = BTreeMap::new();
        for f in folds {
            let s = &f.score;
            let primary = sums.entry(kind.primary_metric().to_string()).or_default();
            primary.0 += s.primary;
            primary.1 += 1;
            for (k, v) in &s.secondary {
                let e = sums.entry(k.clone()).or_default();
                e.0 += v;
                e.1 += 1;
            }
            for w in &s.warnings {
                *warnings.entry(*w).or_insert(0) += 1;
            }
        }
        let metrics = sums
            .into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect();
        Ok(TaskResult {
            name: name.to_string(),
            kind,
            fold_scores,
            quality,
            metrics,
            warnings,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub phase: String,
    pub method: String,
    pub timestamp: DateTime<Utc>,
    pub epsilon: f64,
    pub config_fingerprint: String,
    pub submission_fingerprint: String,
    /// Sorted by task name.
    pub tasks: Vec<TaskResult>,
}

impl ExperimentRecord {
    pub fn q_per_task(&self) -> BTreeMap<String, f64> {
        self.tasks
            .iter()
            .map(|t| (t.name.clone(), t.quality.q))
            .collect()
    }

    pub fn mean_q(&self) -> f64 {
        let qs: Vec<TaskQuality> = self.tasks.iter().map(|t| t.quality.clone()).collect();
        scoring::mean_q(&qs)
    }

    /// Quality scores recomputed from the stored raw fold scores.
    pub fn recompute_quality(&self) -> Result<Vec<TaskQuality>> {
        self.tasks
            .iter()
            .map(|t| {
                Ok(scoring::quality_score(
                    &t.name,
                    &t.fold_scores,
                    self.epsilon,
                )?)
            })
            .collect()
    }

    fn key(&self) -> (&str, &str, DateTime<Utc>) {
        (&self.phase, &self.method, self.timestamp)
    }
}

/// Append-only store of experiment records, optionally backed by a file.
#[derive(Debug, Clone, Default)]
pub struct ScoringDatabase {
    path: Option<PathBuf>,
    records: Vec<ExperimentRecord>,
}

impl ScoringDatabase {
    pub fn in_memory() -> Self {
        ScoringDatabase::default()
    }

    /// Opens (or creates) a JSON-lines database. A final line without a
    /// trailing newline is a torn append from an interrupted writer; it is cut
    /// off before any new record is written.
    pub fn open(path: &Path) -> Result<Self> {
        let mut records = Vec::new();
        if path.exists() {
            let bytes = fs::read(path).map_err(io_failure(path))?;
            let complete = match bytes.iter().rposition(|&b| b == b'\n') {
                Some(i) => i + 1,
                None => 0,
            };
            if complete < bytes.len() {
                log::warn!(
                    "dropping {} bytes of torn record at end of {}",
                    bytes.len() - complete,
                    path.display()
                );
                let f = fs::OpenOptions::new()
                    .write(true)
                    .open(path)
                    .map_err(io_failure(path))?;
                f.set_len(complete as u64).map_err(io_failure(path))?;
                f.sync_all().map_err(io_failure(path))?;
            }
            for (i, line) in BufReader::new(&bytes[..complete]).lines().enumerate() {
                let line = line.map_err(io_failure(path))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec =
                    serde_json::from_str(&line).map_err(|e| LeaderboardError::CorruptDatabase {
                        path: path.display().to_string(),
                        line: i + 1,
                        reason: e.to_string(),
                    })?;
                records.push(rec);
            }
        }
        Ok(ScoringDatabase {
            path: Some(path.to_path_buf()),
            records,
        })
    }

    /// Copy of the records without the file backing.
    pub fn clone_in_memory(&self) -> Self {
        ScoringDatabase {
            path: None,
            records: self.records.clone(),
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn records(&self) -> &[ExperimentRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn phase_records<'a>(
        &'a self,
        phase: &'a str,
    ) -> impl Iterator<Item = &'a ExperimentRecord> + 'a {
        self.records.iter().filter(move |r| r.phase == phase)
    }

    /// Appends a record; `(phase, method, timestamp)` must be new.
    pub fn record_experiment(&mut self, rec: ExperimentRecord) -> Result<()> {
        if self.records.iter().any(|r| r.key() == rec.key()) {
            return Err(LeaderboardError::DuplicateRecord {
                phase: rec.phase,
                method: rec.method,
                timestamp: rec.timestamp,
            });
        }
        if let Some(path) = &self.path {
            let mut line = serde_json::to_vec(&rec).expect("record serialises");
            line.push(b'\n');
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(io_failure(dir))?;
            }
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(io_failure(path))?;
            f.write_all(&line).map_err(io_failure(path))?;
            f.sync_data().map_err(io_failure(path))?;
        }
        self.records.push(rec);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardTask {
    pub name: String,
    pub weight: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub method: String,
    pub timestamp: DateTime<Utc>,
    pub q_per_task: BTreeMap<String, f64>,
    pub mean_q: f64,
    pub weighted_score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaderboard {
    pub phase: String,
    /// Newest record timestamp in the phase, so the document depends only on
    /// database contents.
    pub generated_at: DateTime<Utc>,
    pub tasks: Vec<LeaderboardTask>,
    pub entries: Vec<LeaderboardEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ghost_weight: Option<f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

pub const UNIFORM_FALLBACK_WARNING: &str = "uniform_weights_fallback";

/// Latest record per method in `phase`, ordered by method name.
pub fn latest_per_method<'a>(
    db: &'a ScoringDatabase,
    phase: &'a str,
) -> BTreeMap<&'a str, &'a ExperimentRecord> {
    let mut latest: BTreeMap<&str, &ExperimentRecord> = BTreeMap::new();
    for rec in db.phase_records(phase) {
        latest
            .entry(rec.method.as_str())
            .and_modify(|cur| {
                if rec.timestamp > cur.timestamp {
                    *cur = rec;
                }
            })
            .or_insert(rec);
    }
    latest
}

fn leaderboard_from(
    phase: &str,
    selected: &BTreeMap<&str, &ExperimentRecord>,
    options: RankingOptions,
) -> Result<Leaderboard> {
    let experiments: BTreeMap<String, BTreeMap<String, f64>> = selected
        .iter()
        .map(|(m, r)| (m.to_string(), r.q_per_task()))
        .collect();
    let ranking = scoring::final_ranking(&experiments, options)?;
    let tasks = ranking
        .weights
        .weights
        .iter()
        .map(|(name, w)| LeaderboardTask {
            name: name.clone(),
            weight: *w,
            std: ranking.weights.stds[name],
        })
        .collect();
    let entries = ranking
        .entries
        .iter()
        .map(|e| LeaderboardEntry {
            method: e.experiment.clone(),
            timestamp: selected[e.experiment.as_str()].timestamp,
            q_per_task: e.q_per_task.clone(),
            mean_q: e.mean_q,
            weighted_score: e.weighted_score,
            rank: e.rank,
        })
        .collect();
    let mut warnings = Vec::new();
    if ranking.weights.uniform_fallback {
        warnings.push(UNIFORM_FALLBACK_WARNING.to_string());
    }
    let generated_at = selected
        .values()
        .map(|r| r.timestamp)
        .max()
        .expect("non-empty selection");
    Ok(Leaderboard {
        phase: phase.to_string(),
        generated_at,
        tasks,
        entries,
        ghost_weight: ranking.weights.ghost_weight,
        warnings,
    })
}

pub fn rebuild_leaderboard(
    db: &ScoringDatabase,
    phase: &str,
    options: RankingOptions,
) -> Result<Leaderboard> {
    let selected = latest_per_method(db, phase);
    if selected.is_empty() {
        return Err(LeaderboardError::UnknownPhase(phase.to_string()));
    }
    leaderboard_from(phase, &selected, options)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    /// Method whose record triggered this rebuild.
    pub after: String,
    pub ranks: BTreeMap<String, usize>,
}

/// Leaderboard ranks after each record of `phase`, replayed in append order.
pub fn rank_trajectory(
    db: &ScoringDatabase,
    phase: &str,
    options: RankingOptions,
) -> Result<Vec<TrajectoryPoint>> {
    let mut replay = ScoringDatabase::in_memory();
    let mut points = Vec::new();
    for rec in db.phase_records(phase) {
        replay.record_experiment(rec.clone())?;
        let lb = rebuild_leaderboard(&replay, phase, options)?;
        points.push(TrajectoryPoint {
            after: rec.method.clone(),
            ranks: lb
                .entries
                .iter()
                .map(|e| (e.method.clone(), e.rank))
                .collect(),
        });
    }
    if points.is_empty() {
        return Err(LeaderboardError::UnknownPhase(phase.to_string()));
    }
    Ok(points)
}

/// Structural check of a serialised leaderboard.
pub fn validate_leaderboard(doc: &serde_json::Value) -> Result<()> {
    use serde_json::Value;
    let fail = |m: String| Err(LeaderboardError::Schema(m));
    let obj = match doc.as_object() {
        Some(o) => o,
        None => return fail("top level must be an object".into()),
    };
    for key in ["phase", "generated_at", "tasks", "entries", "warnings"] {
        if !obj.contains_key(key) {
            return fail(format!("missing key `{key}`"));
        }
    }
    if !obj["phase"].is_string() || !obj["generated_at"].is_string() {
        return fail("`phase` and `generated_at` must be strings".into());
    }
    let lb: Leaderboard = match serde_json::from_value(doc.clone()) {
        Ok(lb) => lb,
        Err(e) => return fail(e.to_string()),
    };
    let Value::Array(entries) = &obj["entries"] else {
        return fail("`entries` must be an array".into());
    };
    for e in entries {
        for key in [
            "method",
            "timestamp",
            "q_per_task",
            "mean_q",
            "weighted_score",
            "rank",
        ] {
            if e.get(key).is_none() {
                return fail(format!("entry missing `{key}`"));
            }
        }
    }
    let total: f64 =
        lb.tasks.iter().map(|t| t.weight).sum::<f64>() + lb.ghost_weight.unwrap_or(0.0);
    if (total - 1.0).abs() > 1e-9 && !lb.warnings.iter().any(|w| w == UNIFORM_FALLBACK_WARNING) {
        return fail(format!("task weights sum to {total}"));
    }
    for pair in lb.entries.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let ordered = a.rank < b.rank
            || (a.rank == b.rank
                && (a.mean_q > b.mean_q || (a.mean_q == b.mean_q && a.method < b.method)));
        if !ordered {
            return fail(format!(
                "entries `{}` and `{}` out of order",
                a.method, b.method
            ));
        }
    }
    let task_names: Vec<&str> = lb.tasks.iter().map(|t| t.name.as_str()).collect();
    for e in &lb.entries {
        if e.q_per_task
            .keys()
            .map(String::as_str)
            .ne(task_names.iter().copied())
        {
            return fail(format!(
                "entry `{}` task set differs from `tasks`",
                e.method
            ));
        }
    }
    Ok(())
}

/// Writes `bytes` to a temporary file beside `path`, syncs, and renames it
/// over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(io_failure(dir))?;
    let mut tmp = tempfile::Builder::new()
        .prefix(".tmp-")
        .tempfile_in(dir)
        .map_err(io_failure(dir))?;
    tmp.write_all(bytes).map_err(io_failure(path))?;
    tmp.as_file().sync_all().map_err(io_failure(path))?;
    tmp.persist(path).map_err(|e| LeaderboardError::IoFailure {
        path: path.display().to_string(),
        source: e.error,
    })?;
    Ok(())
}

fn pretty(value: &impl Serialize) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("document serialises");
    out.push(b'\n');
    out
}

/// Writes `leaderboard.json` for the board's phase and checks the written
/// file against the schema.
pub fn write_leaderboard(lb: &Leaderboard, output_dir: &Path) -> Result<PathBuf> {
    let path = output_dir.join(&lb.phase).join(LEADERBOARD_FILE);
    atomic_write(&path, &pretty(lb))?;
    let text = fs::read(&path).map_err(io_failure(&path))?;
    let doc: serde_json::Value =
        serde_json::from_slice(&text).map_err(|e| LeaderboardError::Schema(e.to_string()))?;
    validate_leaderboard(&doc)?;
    Ok(path)
}

pub fn write_rank_history(
    points: &[TrajectoryPoint],
    output_dir: &Path,
    phase: &str,
) -> Result<PathBuf> {
    let path = output_dir.join(phase).join(RANK_HISTORY_FILE);
    atomic_write(&path, &pretty(&points))?;
    Ok(path)
}

/// `result.json` body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub phase: String,
    pub method: String,
    pub timestamp: DateTime<Utc>,
    pub config_fingerprint: String,
    pub submission_fingerprint: String,
    pub epsilon: f64,
    pub mean_q: f64,
    pub q_per_task: BTreeMap<String, f64>,
    pub tasks: Vec<TaskResult>,
}

impl From<&ExperimentRecord> for ResultDocument {
    fn from(r: &ExperimentRecord) -> Self {
        ResultDocument {
            phase: r.phase.clone(),
            method: r.method.clone(),
            timestamp: r.timestamp,
            config_fingerprint: r.config_fingerprint.clone(),
            submission_fingerprint: r.submission_fingerprint.clone(),
            epsilon: r.epsilon,
            mean_q: r.mean_q(),
            q_per_task: r.q_per_task(),
            tasks: r.tasks.clone(),
        }
    }
}

/// Per-task fold outcomes, written as diagnostics.
#[derive(Debug, Clone)]
pub struct TaskDiagnostics {
    pub task: String,
    pub kind: TaskKind,
    pub folds: Vec<FoldOutcome>,
}

/// `<method>_<YYYYMMDD>_<HHMMSS>`
pub fn experiment_dir_name(method: &str, timestamp: DateTime<Utc>) -> String {
    format!("{method}_{}", timestamp.format("%Y%m%d_%H%M%S"))
}

/// An experiment directory being assembled under a hidden staging name. It
/// becomes visible only through [`StagedExperiment::commit`]; dropping it
/// uncommitted removes it.
#[derive(Debug)]
pub struct StagedExperiment {
    staging: PathBuf,
    target: PathBuf,
    committed: bool,
}

impl StagedExperiment {
    pub fn target(&self) -> &Path {
        &self.target
    }

    /// Renames the staging directory to its final name.
    pub fn commit(mut self) -> Result<PathBuf> {
        fs::rename(&self.staging, &self.target).map_err(io_failure(&self.target))?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for StagedExperiment {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

/// Picks a free directory name (`_2`, `_3`, ... on collision) and writes
/// `result.json` plus per-task diagnostics into a staging directory.
pub fn stage_experiment(
    record: &ExperimentRecord,
    diagnostics: &[TaskDiagnostics],
    output_dir: &Path,
) -> Result<StagedExperiment> {
    let phase_dir = output_dir.join(&record.phase);
    fs::create_dir_all(&phase_dir).map_err(io_failure(&phase_dir))?;
    let base = experiment_dir_name(&record.method, record.timestamp);
    let mut name = base.clone();
    let mut n = 1;
    while phase_dir.join(&name).exists() {
        n += 1;
        name = format!("{base}_{n}");
    }
    let staging = phase_dir.join(format!("{STAGING_PREFIX}{name}"));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io_failure(&staging))?;
    }
    fs::create_dir_all(&staging).map_err(io_failure(&staging))?;
    let staged = StagedExperiment {
        staging: staging.clone(),
        target: phase_dir.join(name),
        committed: false,
    };

    let result = ResultDocument::from(record);
    write_file(&staging.join(RESULT_FILE), &pretty(&result))?;
    for diag in diagnostics {
        write_task_diagnostics(&staging.join(&diag.task), diag)?;
    }
    Ok(staged)
}

/// Removes staging directories left behind by an interrupted run.
pub fn discard_stale_staging(output_dir: &Path) -> Result<usize> {
    let mut removed = 0;
    let Ok(phases) = fs::read_dir(output_dir) else {
        return Ok(0);
    };
    for phase in phases.flatten() {
        if !phase.path().is_dir() {
            continue;
        }
        for entry in fs::read_dir(phase.path())
            .map_err(io_failure(&phase.path()))?
            .flatten()
        {
            let name = entry.file_name();
            if name.to_string_lossy().starts_with(STAGING_PREFIX) {
                fs::remove_dir_all(entry.path()).map_err(io_failure(&entry.path()))?;
                removed += 1;
            }
        }
    }
    Ok(removed)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_failure(path))
}

fn write_task_diagnostics(dir: &Path, diag: &TaskDiagnostics) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_failure(dir))?;
    let mut summary = String::from("fold,primary");
    let metric_names: Vec<String> = diag
        .folds
        .first()
        .map(|f| f.score.secondary.keys().cloned().collect())
        .unwrap_or_default();
    for m in &metric_names {
        summary.push(',');
        summary.push_str(m);
    }
    summary.push('\n');
    for f in &diag.folds {
        let s = &f.score;
        summary.push_str(&format!("{},{}", s.fold_index, s.primary));
        for m in &metric_names {
            summary.push(',');
            if let Some(v) = s.secondary.get(m) {
                summary.push_str(&v.to_string());
            }
        }
        summary.push('\n');

        let fold_dir = dir.join(format!("fold_{:03}", s.fold_index));
        fs::create_dir_all(&fold_dir).map_err(io_failure(&fold_dir))?;
        let mut loss = String::from("epoch,loss\n");
        for (e, l) in s.loss_curve.iter().enumerate() {
            loss.push_str(&format!("{e},{l}\n"));
        }
        write_file(&fold_dir.join("loss_curve.csv"), loss.as_bytes())?;

        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "y_true", "y_pred"])
            .expect("in-memory csv");
        for p in &f.predictions {
            w.write_record([p.id.as_str(), &p.y_true.to_string(), &p.y_pred.to_string()])
                .expect("in-memory csv");
        }
        let bytes = w.into_inner().expect("in-memory csv");
        write_file(&fold_dir.join("predictions.csv"), &bytes)?;

        if let Some(cm) = &s.confusion {
            write_file(&fold_dir.join("confusion.json"), &pretty(cm))?;
        }
    }
    write_file(&dir.join("folds.csv"), summary.as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WrittenPaths {
    pub experiment_dir: PathBuf,
    pub result_json: PathBuf,
    pub leaderboard_json: PathBuf,
}

/// Writes the experiment directory and refreshes the phase leaderboard.
pub fn write_outputs(
    record: &ExperimentRecord,
    diagnostics: &[TaskDiagnostics],
    leaderboard: &Leaderboard,
    output_dir: &Path,
) -> Result<WrittenPaths> {
    let experiment_dir = stage_experiment(record, diagnostics, output_dir)?.commit()?;
    let leaderboard_json = write_leaderboard(leaderboard, output_dir)?;
    Ok(WrittenPaths {
        result_json: experiment_dir.join(RESULT_FILE),
        experiment_dir,
        leaderboard_json,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use chrono::TimeZone;

    pub(crate) fn record(
        phase: &str,
        method: &str,
        secs: i64,
        qs: &[(&str, Vec<f64>)],
    ) -> ExperimentRecord {
        let tasks = qs
            .iter()
            .map(|(name, folds)| TaskResult {
                name: name.to_string(),
                kind: TaskKind::Regression,
                fold_scores: folds.clone(),
                quality: scoring::quality_score(name, folds, 0.02).unwrap(),
                metrics: BTreeMap::new(),
                warnings: BTreeMap::new(),
            })
            .collect();
        ExperimentRecord {
            phase: phase.into(),
            method: method.into(),
            timestamp: Utc.timestamp_opt(1_750_000_000 + secs, 0).unwrap(),
            epsilon: 0.02,
            config_fingerprint: "cfg".into(),
            submission_fingerprint: method.into(),
            tasks,
        }
    }

    #[test]
    fn append_and_duplicate() {
        let mut db = ScoringDatabase::in_memory();
        db.record_experiment(record("dev", "a", 0, &[("t", vec![0.5])]))
            .unwrap();
        assert_eq!(db.len(), 1);
        assert!(matches!(
            db.record_experiment(record("dev", "a", 0, &[("t", vec![0.7])])),
            Err(LeaderboardError::DuplicateRecord { .. })
        ));
        db.record_experiment(record("test", "a", 0, &[("t", vec![0.7])]))
            .unwrap();
        let dev = rebuild_leaderboard(&db, "dev", RankingOptions::default()).unwrap();
        let test = rebuild_leaderboard(&db, "test", RankingOptions::default()).unwrap();
        assert_eq!(dev.entries.len(), 1);
        assert_eq!(test.entries[0].q_per_task["t"], 70.0);
        assert!(matches!(
            rebuild_leaderboard(&db, "final", RankingOptions::default()),
            Err(LeaderboardError::UnknownPhase(_))
        ));
    }

    #[test]
    fn singleton_board_uses_uniform_fallback() {
        let mut db = ScoringDatabase::in_memory();
        db.record_experiment(record("dev", "a", 0, &[("t", vec![0.5]), ("u", vec![0.2])]))
            .unwrap();
        let lb = rebuild_leaderboard(&db, "dev", RankingOptions::default()).unwrap();
        assert_eq!(lb.entries[0].rank, 1);
        assert_eq!(lb.warnings, vec![UNIFORM_FALLBACK_WARNING.to_string()]);
        validate_leaderboard(&serde_json::to_value(&lb).unwrap()).unwrap();
    }

    #[test]
    fn latest_record_per_method_wins() {
        let mut db = ScoringDatabase::in_memory();
        db.record_experiment(record("dev", "a", 10, &[("t", vec![0.9])]))
            .unwrap();
        db.record_experiment(record("dev", "a", 5, &[("t", vec![0.1])]))
            .unwrap();
        db.record_experiment(record("dev", "b", 7, &[("t", vec![0.5])]))
            .unwrap();
        let lb = rebuild_leaderboard(&db, "dev", RankingOptions::default()).unwrap();
        assert_eq!(lb.entries.len(), 2);
        assert_eq!(lb.entries[0].method, "a");
        assert_eq!(lb.entries[0].q_per_task["t"], 90.0);
        assert_eq!(
            lb.generated_at,
            Utc.timestamp_opt(1_750_000_010, 0).unwrap()
        );
    }

    #[test]
    fn stored_quality_is_recomputable() {
        let rec = record(
            "dev",
            "a",
            0,
            &[("t", vec![0.31, 0.52, 0.47]), ("u", vec![-0.2, 0.1])],
        );
        let again = rec.recompute_quality().unwrap();
        for (t, q) in rec.tasks.iter().zip(again) {
            assert_eq!(t.quality, q);
        }
    }

    #[test]
    fn file_database_roundtrip_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(DB_FILE);
        let mut db = ScoringDatabase::open(&path).unwrap();
        db.record_experiment(record("dev", "a", 0, &[("t", vec![0.5])]))
            .unwrap();
        db.record_experiment(record("dev", "b", 1, &[("t", vec![0.6])]))
            .unwrap();
        // simulate a crash halfway through a third append
        let mut f = fs::OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"phase\":\"dev\",\"meth").unwrap();
        drop(f);

        let mut reopened = ScoringDatabase::open(&path).unwrap();
        assert_eq!(reopened.records(), db.records());
        reopened
            .record_experiment(record("dev", "c", 2, &[("t", vec![0.7])]))
            .unwrap();
        assert_eq!(ScoringDatabase::open(&path).unwrap().len(), 3);
    }

    #[test]
    fn corrupt_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(DB_FILE);
        fs::write(&path, "not json\n").unwrap();
        assert!(matches!(
            ScoringDatabase::open(&path),
            Err(LeaderboardError::CorruptDatabase { line: 1, .. })
        ));
    }

    #[test]
    fn directory_naming_and_collisions() {
        let ts = Utc.with_ymd_and_hms(2025, 6, 1, 9, 30, 5).unwrap();
        assert_eq!(
            experiment_dir_name("mymodel", ts),
            "mymodel_20250601_093005"
        );

        let dir = tempfile::tempdir().unwrap();
        let mut rec = record("dev", "mymodel", 0, &[("t", vec![0.5, 0.6])]);
        rec.timestamp = ts;
        let mut db = ScoringDatabase::in_memory();
        db.record_experiment(rec.clone()).unwrap();
        let lb = rebuild_leaderboard(&db, "dev", RankingOptions::default()).unwrap();
        let first = write_outputs(&rec, &[], &lb, dir.path()).unwrap();
        let second = write_outputs(&rec, &[], &lb, dir.path()).unwrap();
        assert_eq!(
            first.experiment_dir,
            dir.path().join("dev/mymodel_20250601_093005")
        );
        assert_eq!(
            second.experiment_dir,
            dir.path().join("dev/mymodel_20250601_093005_2")
        );
        assert!(first.result_json.exists() && first.leaderboard_json.exists());
    }

    #[test]
    fn dropped_stage_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let rec = record("dev", "m", 0, &[("t", vec![0.5])]);
        let staged = stage_experiment(&rec, &[], dir.path()).unwrap();
        let target = staged.target().to_path_buf();
        drop(staged);
        assert!(!target.exists());
        assert_eq!(fs::read_dir(dir.path().join("dev")).unwrap().count(), 0);
    }

    #[test]
    fn schema_rejects_bad_documents() {
        let mut db = ScoringDatabase::in_memory();
        db.record_experiment(record("dev", "a", 0, &[("t", vec![0.9, 0.8])]))
            .unwrap();
        db.record_experiment(record("dev", "b", 1, &[("t", vec![0.2, 0.3])]))
            .unwrap();
        let lb = rebuild_leaderboard(&db, "dev", RankingOptions::default()).unwrap();
        let good = serde_json::to_value(&lb).unwrap();
        validate_leaderboard(&good).unwrap();

        let mut swapped = lb.clone();
        swapped.entries.reverse();
        assert!(validate_leaderboard(&serde_json::to_value(&swapped).unwrap()).is_err());

        let mut heavy = lb.clone();
        heavy.tasks[0].weight = 2.0;
        assert!(validate_leaderboard(&serde_json::to_value(&heavy).unwrap()).is_err());

        let mut missing = good.clone();
        missing.as_object_mut().unwrap().remove("tasks");
        assert!(validate_leaderboard(&missing).is_err());
    }

    #[test]
    fn trajectory_replays_append_order() {
        let mut db = ScoringDatabase::in_memory();
        db.record_experiment(record("dev", "a", 0, &[("t", vec![0.5])]))
            .unwrap();
        db.record_experiment(record("dev", "b", 1, &[("t", vec![0.9])]))
            .unwrap();
        let traj = rank_trajectory(&db, "dev", RankingOptions::default()).unwrap();
        assert_eq!(traj.len(), 2);
        assert_eq!(traj[0].ranks["a"], 1);
        assert_eq!(traj[1].ranks["a"], 2);
        assert_eq!(traj[1].ranks["b"], 1);
    }
}
