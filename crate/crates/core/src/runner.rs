//! One-shot evaluation and the polling challenge service.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicI64, Ordering};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::ingest::{self, EvalConfig};
use crate::leaderboard::{
    self, ExperimentRecord, Leaderboard, ScoringDatabase, TaskDiagnostics, TaskResult, DB_FILE,
};
use crate::probe;
use crate::scoring::RankingOptions;

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Starts at a fixed instant and advances by `step` on every read.
#[derive(Debug)]
pub struct SteppingClock {
    start: DateTime<Utc>,
    step_secs: i64,
    reads: AtomicI64,
}

impl SteppingClock {
    pub fn new(start: DateTime<Utc>, step_secs: i64) -> Self {
        SteppingClock {
            start,
            step_secs,
            reads: AtomicI64::new(0),
        }
    }

    pub fn fixed(at: DateTime<Utc>) -> Self {
        SteppingClock::new(at, 0)
    }
}

impl Clock for SteppingClock {
    fn now(&self) -> DateTime<Utc> {
        let n = self.reads.fetch_add(1, Ordering::SeqCst);
        self.start + chrono::Duration::seconds(n * self.step_secs)
    }
}

pub fn ranking_options(config: &EvalConfig) -> RankingOptions {
    RankingOptions {
        weighted: config.weighted_ranking,
        ghost: config.ghost_task,
        epsilon: config.epsilon,
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Thread pool for fold evaluation; `None` uses one thread per core.
pub fn worker_pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| Error::WorkerPool(e.to_string()))
}

/// Per-task results and diagnostics of one submission, before persistence.
#[derive(Debug, Clone)]
pub struct ScoredSubmission {
    pub tasks: Vec<TaskResult>,
    pub diagnostics: Vec<TaskDiagnostics>,
}

/// Parses inputs, prepares features and labels per `config`, and runs all
/// folds of every task on `pool`.
pub fn score_submission(
    submission: &Path,
    annotations: &Path,
    config: &EvalConfig,
    pool: &rayon::ThreadPool,
) -> Result<ScoredSubmission> {
    config.validate()?;
    let mut embeddings = ingest::parse_submission(submission, config.embedding_dim)?;
    let tasks = ingest::load_annotations(annotations, config.task_filter.as_deref())?;
    if config.standardize_embeddings {
        embeddings = probe::standardize(&embeddings);
    }

    let mut results = Vec::with_capacity(tasks.len());
    let mut diagnostics = Vec::with_capacity(tasks.len());
    for task in &tasks {
        let started = Instant::now();
        let task = if config.normalize_labels {
            probe::normalize_labels(task)
        } else {
            task.clone()
        };
        let features = probe::align(&embeddings, &task)?;
        let plan = probe::make_splits(task.ids(), config.k_folds, config.split_ratio, config.seed)?;
        let folds = pool.install(|| probe::evaluate_folds(&features, &task, &plan, config))?;
        let result = TaskResult::from_folds(&task.name, task.kind, &folds, config.epsilon)?;
        log::info!(
            "task {} ({}): q = {:.3} over {} folds in {:.2?}",
            task.name,
            task.kind,
            result.quality.q,
            folds.len(),
            started.elapsed()
        );
        results.push(result);
        diagnostics.push(TaskDiagnostics {
            task: task.name.clone(),
            kind: task.kind,
            folds,
        });
    }
    Ok(ScoredSubmission {
        tasks: results,
        diagnostics,
    })
}

#[derive(Debug, Clone)]
pub struct EvaluationRequest<'a> {
    pub submission: &'a Path,
    pub annotations: &'a Path,
    pub config: &'a EvalConfig,
    pub method: &'a str,
    pub phase: &'a str,
    pub output_dir: &'a Path,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub record: ExperimentRecord,
    pub experiment_dir: PathBuf,
    pub leaderboard: Leaderboard,
    pub leaderboard_path: PathBuf,
}

/// Full pipeline for one submission: score, stage outputs, append to the
/// scoring database in `output_dir`, publish the experiment directory, and
/// rewrite the phase leaderboard and rank history. On error nothing is
/// published and the database is unchanged.
pub fn evaluate_submission(
    req: &EvaluationRequest<'_>,
    pool: &rayon::ThreadPool,
    clock: &dyn Clock,
) -> Result<Evaluation> {
    let started = Instant::now();
    let scored = score_submission(req.submission, req.annotations, req.config, pool)?;
    let record = ExperimentRecord {
        phase: req.phase.to_string(),
        method: req.method.to_string(),
        timestamp: clock.now(),
        epsilon: req.config.epsilon,
        config_fingerprint: req.config.fingerprint(),
        submission_fingerprint: sha256_file(req.submission)?,
        tasks: scored.tasks,
    };
    let out = publish(
        record,
        &scored.diagnostics,
        req.output_dir,
        ranking_options(req.config),
    )?;
    log::info!(
        "{} / {}: mean Q {:.3}, rank {} ({:.2?})",
        req.phase,
        req.method,
        out.record.mean_q(),
        out.leaderboard
            .entries
            .iter()
            .find(|e| e.method == req.method)
            .map(|e| e.rank)
            .unwrap_or(0),
        started.elapsed()
    );
    Ok(out)
}

fn publish(
    record: ExperimentRecord,
    diagnostics: &[TaskDiagnostics],
    output_dir: &Path,
    options: RankingOptions,
) -> Result<Evaluation> {
    let staged = leaderboard::stage_experiment(&record, diagnostics, output_dir)?;
    let mut db = ScoringDatabase::open(&output_dir.join(DB_FILE))?;

    // Rank against a scratch copy first so a scoring error cannot leave a
    // record in the database.
    let mut trial = db.clone_in_memory();
    trial.record_experiment(record.clone())?;
    leaderboard::rebuild_leaderboard(&trial, &record.phase, options)?;

    db.record_experiment(record.clone())?;
    let experiment_dir = staged.commit()?;
    let lb = leaderboard::rebuild_leaderboard(&db, &record.phase, options)?;
    let leaderboard_path = leaderboard::write_leaderboard(&lb, output_dir)?;
    let trajectory = leaderboard::rank_trajectory(&db, &record.phase, options)?;
    leaderboard::write_rank_history(&trajectory, output_dir, &record.phase)?;
    Ok(Evaluation {
        record,
        experiment_dir,
        leaderboard: lb,
        leaderboard_path,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TicketStatus {
    Pending,
    Evaluating,
    Done,
    Failed(String),
}

impl fmt::Display for TicketStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TicketStatus::Pending => f.write_str("pending"),
            TicketStatus::Evaluating => f.write_str("evaluating"),
            TicketStatus::Done => f.write_str("done"),
            TicketStatus::Failed(r) => write!(f, "failed: {r}"),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("ticket for {source_path} cannot move from {from} to {to}")]
pub struct TicketError {
    pub source_path: String,
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionTicket {
    pub source: PathBuf,
    pub method: String,
    pub phase: String,
    pub discovered_at: DateTime<Utc>,
    status: TicketStatus,
}

impl SubmissionTicket {
    /// Method name is the file stem of the submission.
    pub fn new(source: PathBuf, phase: &str, discovered_at: DateTime<Utc>) -> Self {
        let method = source
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        SubmissionTicket {
            source,
            method,
            phase: phase.to_string(),
            discovered_at,
            status: TicketStatus::Pending,
        }
    }

    pub fn status(&self) -> &TicketStatus {
        &self.status
    }

    fn transition(&mut self, to: TicketStatus) -> std::result::Result<(), TicketError> {
        let ok = matches!(
            (&self.status, &to),
            (TicketStatus::Pending, TicketStatus::Evaluating)
                | (TicketStatus::Evaluating, TicketStatus::Done)
                | (TicketStatus::Evaluating, TicketStatus::Failed(_))
        );
        if !ok {
            return Err(TicketError {
                source_path: self.source.display().to_string(),
                from: self.status.to_string(),
                to: to.to_string(),
            });
        }
        self.status = to;
        Ok(())
    }

    pub fn start(&mut self) -> std::result::Result<(), TicketError> {
        self.transition(TicketStatus::Evaluating)
    }

    pub fn finish(&mut self) -> std::result::Result<(), TicketError> {
        self.transition(TicketStatus::Done)
    }

    pub fn fail(&mut self, reason: impl Into<String>) -> std::result::Result<(), TicketError> {
        self.transition(TicketStatus::Failed(reason.into()))
    }
}

/// Where queued submissions come from and where finished ones go.
pub trait SubmissionSource {
    /// Submissions not yet acknowledged, in processing order.
    fn pending(&mut self) -> Result<Vec<PathBuf>>;
    /// Records the terminal state of a ticket.
    fn acknowledge(&mut self, ticket: &SubmissionTicket) -> Result<()>;
}

/// Directory queue: `*.csv` files in `watch_dir` are pending; processed files
/// move to `done/` or `failed/` (with a `.reason.txt` beside failures).
#[derive(Debug, Clone)]
pub struct FsQueue {
    watch_dir: PathBuf,
}

impl FsQueue {
    pub const DONE: &'static str = "done";
    pub const FAILED: &'static str = "failed";

    pub fn new(watch_dir: impl Into<PathBuf>) -> Self {
        FsQueue {
            watch_dir: watch_dir.into(),
        }
    }

    fn move_into(&self, file: &Path, sub: &str) -> Result<PathBuf> {
        let dir = self.watch_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let name = file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut target = dir.join(&name);
        let mut n = 1;
        while target.exists() {
            n += 1;
            target = dir.join(format!("{name}.{n}"));
        }
        fs::rename(file, &target).map_err(|e| Error::io(file, e))?;
        Ok(target)
    }
}

impl SubmissionSource for FsQueue {
    fn pending(&mut self) -> Result<Vec<PathBuf>> {
        let mut files = Vec::new();
        for entry in fs::read_dir(&self.watch_dir).map_err(|e| Error::io(&self.watch_dir, e))? {
            let path = entry.map_err(|e| Error::io(&self.watch_dir, e))?.path();
            if path.is_file() && path.extension().and_then(|e| e.to_str()) == Some("csv") {
                files.push(path);
            }
        }
        files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
        Ok(files)
    }

    fn acknowledge(&mut self, ticket: &SubmissionTicket) -> Result<()> {
        match ticket.status() {
            TicketStatus::Done => {
                self.move_into(&ticket.source, Self::DONE)?;
            }
            TicketStatus::Failed(reason) => {
                let moved = self.move_into(&ticket.source, Self::FAILED)?;
                let note = moved.with_file_name(format!(
                    "{}.reason.txt",
                    moved.file_name().unwrap_or_default().to_string_lossy()
                ));
                fs::write(&note, format!("{reason}\n")).map_err(|e| Error::io(&note, e))?;
            }
            other => log::warn!("acknowledging non-terminal ticket ({other})"),
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub interval: Duration,
    pub annotations: PathBuf,
    pub config: EvalConfig,
    pub output_dir: PathBuf,
    pub phase: String,
}

pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_secs(60);

/// Single-writer service loop over a [`SubmissionSource`].
pub struct Service<S: SubmissionSource> {
    source: S,
    options: ServeOptions,
    clock: Box<dyn Clock>,
    pool: rayon::ThreadPool,
    history: Vec<SubmissionTicket>,
}

impl<S: SubmissionSource> Service<S> {
    pub fn new(
        source: S,
        options: ServeOptions,
        clock: Box<dyn Clock>,
        pool: rayon::ThreadPool,
    ) -> Result<Self> {
        let removed = leaderboard::discard_stale_staging(&options.output_dir)?;
        if removed > 0 {
            log::warn!("discarded {removed} half-written experiment directories");
        }
        Ok(Service {
            source,
            options,
            clock,
            pool,
            history: Vec::new(),
        })
    }

    /// Terminal tickets processed so far, in order.
    pub fn history(&self) -> &[SubmissionTicket] {
        &self.history
    }

    /// Evaluates every pending submission once, in order.
    pub fn poll_once(&mut self) -> Result<Vec<SubmissionTicket>> {
        let pending = self.source.pending()?;
        let mut processed = Vec::with_capacity(pending.len());
        for path in pending {
            let mut ticket = SubmissionTicket::new(path, &self.options.phase, self.clock.now());
            ticket.start()?;
            match self.process(&ticket) {
                Ok(()) => ticket.finish(),
                Err(e) => {
                    log::warn!("submission {} failed: {e}", ticket.source.display());
                    ticket.fail(e.to_string())
                }
            }?;
            self.source.acknowledge(&ticket)?;
            processed.push(ticket.clone());
            self.history.push(ticket);
        }
        Ok(processed)
    }

    fn process(&self, ticket: &SubmissionTicket) -> Result<()> {
        let opts = &self.options;
        // A restart after the database append but before the file was moved
        // would otherwise score the same bytes twice.
        let fingerprint = sha256_file(&ticket.source)?;
        let config_fp = opts.config.fingerprint();
        let db = ScoringDatabase::open(&opts.output_dir.join(DB_FILE))?;
        if db.phase_records(&opts.phase).any(|r| {
            r.method == ticket.method
                && r.submission_fingerprint == fingerprint
                && r.config_fingerprint == config_fp
        }) {
            log::info!("{} already scored; acknowledging", ticket.source.display());
            return Ok(());
        }
        let req = EvaluationRequest {
            submission: &ticket.source,
            annotations: &opts.annotations,
            config: &opts.config,
            method: &ticket.method,
            phase: &opts.phase,
            output_dir: &opts.output_dir,
        };
        evaluate_submission(&req, &self.pool, self.clock.as_ref()).map(|_| ())
    }

    /// Polls until `stop` is set or `max_polls` polls have run. Poll errors
    /// are logged and the loop continues.
    pub fn run(&mut self, stop: &AtomicBool, max_polls: Option<usize>) {
        let mut polls = 0usize;
        while !stop.load(Ordering::SeqCst) {
            if let Err(e) = self.poll_once() {
                log::error!("poll failed: {e}");
            }
            polls += 1;
            if max_polls.is_some_and(|m| polls >= m) {
                break;
            }
            let deadline = Instant::now() + self.options.interval;
            while Instant::now() < deadline && !stop.load(Ordering::SeqCst) {
                std::thread::sleep(Duration::from_millis(50).min(self.options.interval));
            }
        }
    }
}

/// Per-method rank after each accepted submission, replayed from the database.
pub fn rank_history(
    output_dir: &Path,
    phase: &str,
    options: RankingOptions,
) -> Result<Vec<BTreeMap<String, usize>>> {
    let db = ScoringDatabase::open(&output_dir.join(DB_FILE))?;
    Ok(leaderboard::rank_trajectory(&db, phase, options)?
        .into_iter()
        .map(|p| p.ranks)
        .collect())
}
