use probebench::ingest::{parse_submission_from, parse_task_from, IngestError};
use probebench::{EmbeddingSet, Matrix, TaskDataset, TaskKind};
use proptest::prelude::*;

fn embedding_set() -> impl Strategy<Value = EmbeddingSet> {
    (1usize..6, 1usize..12).prop_flat_map(|(dim, n)| {
        prop::collection::vec(-1e6f64..1e6, dim * n).prop_map(move |data| {
            let ids = (0..n).map(|i| format!("row-{i}")).collect();
            EmbeddingSet::new(dim, ids, Matrix::from_vec(n, dim, data)).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn submissions_survive_a_csv_round_trip(set in embedding_set()) {
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let back = parse_submission_from(buf.as_slice(), set.dim(), "mem").unwrap();
        prop_assert_eq!(back, set);
    }

    #[test]
    fn regression_tasks_survive_a_csv_round_trip(labels in prop::collection::vec(-1e3f64..1e3, 1..30)) {
        let ids = (0..labels.len()).map(|i| format!("s{i}")).collect();
        let task = TaskDataset::new("depth", TaskKind::Regression, ids, labels).unwrap();
        let mut buf = Vec::new();
        task.write_csv(&mut buf).unwrap();
        let back = parse_task_from(buf.as_slice(), "depth".into(), TaskKind::Regression, "mem").unwrap();
        prop_assert_eq!(back, task);
    }

    #[test]
    fn wrong_width_is_always_rejected(set in embedding_set(), extra in 1usize..3) {
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let err = parse_submission_from(buf.as_slice(), set.dim() + extra, "mem").unwrap_err();
        let is_dim_mismatch = matches!(err, IngestError::DimensionMismatch { .. });
        prop_assert!(is_dim_mismatch);
    }
}

#[test]
fn classification_round_trip_keeps_binary_labels() {
    let ids = vec!["a".to_string(), "b".to_string(), "c".to_string()];
    let task =
        TaskDataset::new("cloud", TaskKind::Classification, ids, vec![0.0, 1.0, 1.0]).unwrap();
    let mut buf = Vec::new();
    task.write_csv(&mut buf).unwrap();
    let back = parse_task_from(
        buf.as_slice(),
        "cloud".into(),
        TaskKind::Classification,
        "mem",
    )
    .unwrap();
    assert_eq!(back, task);
}
