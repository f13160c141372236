use std::fs;
use std::path::Path;

use chrono::{TimeZone, Utc};
use probebench::leaderboard::{validate_leaderboard, ScoringDatabase, DB_FILE, RESULT_FILE};
use probebench::runner::{self, Evaluation, EvaluationRequest, SteppingClock};
use probebench::synth::{self, FixtureBundle, SynthSpec};
use probebench::{ingest, EvalConfig};

fn bundle(dir: &Path) -> (FixtureBundle, EvalConfig) {
    let spec = SynthSpec::linear(240, 12, 4, 0.05, 3);
    let b = synth::write_fixture_bundle(dir, &spec, 4).unwrap();
    let config = ingest::load_config(&b.config).unwrap();
    (b, config)
}

fn evaluate(
    b: &FixtureBundle,
    config: &EvalConfig,
    submission: &Path,
    method: &str,
    out: &Path,
    clock: &SteppingClock,
) -> probebench::Result<Evaluation> {
    let req = EvaluationRequest {
        submission,
        annotations: &b.annotations,
        config,
        method,
        phase: "final",
        output_dir: out,
    };
    runner::evaluate_submission(&req, &runner::worker_pool(Some(2)).unwrap(), clock)
}

#[test]
fn signal_submission_outranks_random_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let (b, config) = bundle(dir.path());
    let out = dir.path().join("out");
    let clock = SteppingClock::new(Utc.with_ymd_and_hms(2025, 5, 1, 0, 0, 0).unwrap(), 30);

    evaluate(&b, &config, &b.random_submission, "random", &out, &clock).unwrap();
    let eval = evaluate(&b, &config, &b.submission, "signal", &out, &clock).unwrap();

    let board = &eval.leaderboard;
    assert_eq!(board.entries.len(), 2);
    assert_eq!(board.entries[0].method, "signal");
    assert_eq!(board.entries[0].rank, 1);
    assert!(board.entries[0].mean_q > board.entries[1].mean_q);
    let sum: f64 = board.tasks.iter().map(|t| t.weight).sum();
    assert!((sum - 1.0).abs() <= 1e-12);

    let doc: serde_json::Value =
        serde_json::from_slice(&fs::read(&eval.leaderboard_path).unwrap()).unwrap();
    validate_leaderboard(&doc).unwrap();

    let result: serde_json::Value =
        serde_json::from_slice(&fs::read(eval.experiment_dir.join(RESULT_FILE)).unwrap()).unwrap();
    assert_eq!(result["method"], "signal");
    assert_eq!(result["tasks"].as_array().unwrap().len(), 3);
    assert!(eval
        .experiment_dir
        .join("linear")
        .join("folds.csv")
        .is_file());
    assert!(eval
        .experiment_dir
        .join("linear_cls")
        .join("fold_000")
        .join("confusion.json")
        .is_file());

    let db = ScoringDatabase::open(&out.join(DB_FILE)).unwrap();
    assert_eq!(db.len(), 2);
}

#[test]
fn resubmission_replaces_the_method_entry() {
    let dir = tempfile::tempdir().unwrap();
    let (b, config) = bundle(dir.path());
    let out = dir.path().join("out");
    let clock = SteppingClock::new(Utc.with_ymd_and_hms(2025, 5, 1, 0, 0, 0).unwrap(), 1);

    let first = evaluate(&b, &config, &b.random_submission, "team", &out, &clock).unwrap();
    let second = evaluate(&b, &config, &b.submission, "team", &out, &clock).unwrap();

    assert_ne!(first.experiment_dir, second.experiment_dir);
    assert!(first.experiment_dir.is_dir());
    assert_eq!(second.leaderboard.entries.len(), 1);
    assert_eq!(second.leaderboard.entries[0].mean_q, second.record.mean_q());
    assert_eq!(ScoringDatabase::open(&out.join(DB_FILE)).unwrap().len(), 2);
}

#[test]
fn same_method_and_timestamp_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (b, config) = bundle(dir.path());
    let out = dir.path().join("out");
    let clock = SteppingClock::fixed(Utc.with_ymd_and_hms(2025, 5, 1, 0, 0, 0).unwrap());

    evaluate(&b, &config, &b.submission, "team", &out, &clock).unwrap();
    let err = evaluate(&b, &config, &b.submission, "team", &out, &clock).unwrap_err();
    assert!(err.to_string().contains("team"), "{err}");
    assert_eq!(ScoringDatabase::open(&out.join(DB_FILE)).unwrap().len(), 1);
    let experiment_dirs = fs::read_dir(out.join("final"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .count();
    assert_eq!(experiment_dirs, 1);
}

#[test]
fn failed_submission_leaves_no_trace() {
    let dir = tempfile::tempdir().unwrap();
    let (b, config) = bundle(dir.path());
    let out = dir.path().join("out");
    let clock = SteppingClock::fixed(Utc.with_ymd_and_hms(2025, 5, 1, 0, 0, 0).unwrap());
    evaluate(&b, &config, &b.submission, "good", &out, &clock).unwrap();
    let board_before = fs::read(out.join("final").join("leaderboard.json")).unwrap();

    let narrow = dir.path().join("narrow.csv");
    fs::write(&narrow, "id,e0\nsample_000000,1.0\n").unwrap();
    assert!(evaluate(&b, &config, &narrow, "bad", &out, &clock).is_err());

    assert_eq!(ScoringDatabase::open(&out.join(DB_FILE)).unwrap().len(), 1);
    assert_eq!(
        fs::read(out.join("final").join("leaderboard.json")).unwrap(),
        board_before
    );
    let dirs: Vec<_> = fs::read_dir(out.join("final"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("bad"))
        .collect();
    assert!(dirs.is_empty());
}

#[test]
fn task_filter_restricts_scored_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let (b, mut config) = bundle(dir.path());
    config.task_filter = Some(vec!["linear".into()]);
    let out = dir.path().join("out");
    let clock = SteppingClock::fixed(Utc.with_ymd_and_hms(2025, 5, 1, 0, 0, 0).unwrap());
    let eval = evaluate(&b, &config, &b.submission, "only_linear", &out, &clock).unwrap();
    let names: Vec<_> = eval.record.tasks.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names, ["linear"]);
}
