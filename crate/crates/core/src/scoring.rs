//! Quality score per task and rank-then-aggregate leaderboard ordering.
//!
//! Per task, the fold scores `s_k` are summarised as
//! `Q = 100 * eps * mean(s) / (std(s) + eps)` with population std. Across
//! experiments, each task is ranked by `Q` (best = 1, ties share the better
//! rank), tasks are weighted by the population std of `Q` across experiments,
//! and the weighted mean rank orders the final table (lower is better).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("no fold scores to summarise")]
    EmptyFolds,
    #[error("nothing to rank")]
    Empty,
    #[error("non-finite value for `{0}`")]
    NonFiniteValue(String),
    #[error("no rank for weighted task `{0}`")]
    MissingTaskRank(String),
    #[error("experiment `{experiment}` does not cover task set of the others")]
    TaskSetMismatch { experiment: String },
}

type Result<T> = std::result::Result<T, ScoringError>;

pub const DEFAULT_EPSILON: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskQuality {
    pub task: String,
    pub mean_s: f64,
    pub std_s: f64,
    pub q: f64,
    pub k_used: usize,
    /// `q < 0`: the probe does worse than predicting the label mean.
    pub unreliable: bool,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    // Summation rounding would otherwise leave a tiny spread on constant input.
    if let Some(&first) = values.first() {
        if values.iter().all(|&v| v == first) {
            return (first, 0.0);
        }
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `mean * (100 eps / (std + eps))`. Grouped so that `std = 0`, `std = eps`
/// and `std = 9 eps` reduce to exact multiples `100`, `50`, `10` of the mean.
pub fn quality_from_stats(mean: f64, std: f64, epsilon: f64) -> f64 {
    mean * (100.0 * epsilon / (std + epsilon))
}

pub fn quality_score(task: &str, fold_primaries: &[f64], epsilon: f64) -> Result<TaskQuality> {
    if fold_primaries.is_empty() {
        return Err(ScoringError::EmptyFolds);
    }
    let (mean_s, std_s) = mean_std(fold_primaries);
    let q = quality_from_stats(mean_s, std_s, epsilon);
    Ok(TaskQuality {
        task: task.to_string(),
        mean_s,
        std_s,
        q,
        k_used: fold_primaries.len(),
        unreliable: q < 0.0,
    })
}

/// Unweighted mean of `q` over tasks.
pub fn mean_q(qualities: &[TaskQuality]) -> f64 {
    qualities.iter().map(|t| t.q).sum::<f64>() / qualities.len() as f64
}

/// `rank(p) = 1 + #{p' : value(p') strictly better than value(p)}`; "better"
/// is larger when `descending`, smaller otherwise.
pub fn rank_values(
    values: &BTreeMap<String, f64>,
    descending: bool,
) -> Result<BTreeMap<String, usize>> {
    if values.is_empty() {
        return Err(ScoringError::Empty);
    }
    if let Some((name, _)) = values.iter().find(|(_, v)| !v.is_finite()) {
        return Err(ScoringError::NonFiniteValue(name.clone()));
    }
    let sign = if descending { -1.0 } else { 1.0 };
    let mut keyed: Vec<f64> = values.values().map(|v| sign * v).collect();
    keyed.sort_by(f64::total_cmp);
    Ok(values
        .iter()
        .map(|(name, v)| {
            let key = sign * v;
            // number of strictly smaller keys
            let better = keyed.partition_point(|k| *k < key);
            (name.clone(), better + 1)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    pub weights: BTreeMap<String, f64>,
    /// `delta_t`: std of `Q_t` across experiments.
    pub stds: BTreeMap<String, f64>,
    pub ghost_weight: Option<f64>,
    /// Every `delta_t` was zero and no ghost task was enabled, so weights fell
    /// back to `1/T`.
    pub uniform_fallback: bool,
}

impl TaskWeights {
    pub fn uniform<'a>(
        tasks: impl IntoIterator<Item = &'a String>,
        stds: BTreeMap<String, f64>,
    ) -> Self {
        let names: Vec<&String> = tasks.into_iter().collect();
        let w = 1.0 / names.len() as f64;
        TaskWeights {
            weights: names.into_iter().map(|t| (t.clone(), w)).collect(),
            stds,
            ghost_weight: None,
            uniform_fallback: false,
        }
    }

    pub fn total(&self) -> f64 {
        self.weights.values().sum::<f64>() + self.ghost_weight.unwrap_or(0.0)
    }
}

/// Task matrix: task -> experiment -> q.
pub type QMatrix = BTreeMap<String, BTreeMap<String, f64>>;

/// `w_t = delta_t / (sum(delta) + [ghost] eps)`. The ghost task has
/// `delta_0 = eps`, weight `eps / (sum(delta) + eps)` and rank 0.
pub fn task_weights(q_matrix: &QMatrix, ghost: bool, epsilon: f64) -> Result<TaskWeights> {
    if q_matrix.is_empty() {
        return Err(ScoringError::Empty);
    }
    let stds: BTreeMap<String, f64> = q_matrix
        .iter()
        .map(|(task, per_exp)| {
            let qs: Vec<f64> = per_exp.values().copied().collect();
            (task.clone(), mean_std(&qs).1)
        })
        .collect();
    let sum: f64 = stds.values().sum();
    if ghost {
        let denom = sum + epsilon;
        return Ok(TaskWeights {
            weights: stds.iter().map(|(t, d)| (t.clone(), d / denom)).collect(),
            ghost_weight: Some(epsilon / denom),
            stds,
            uniform_fallback: false,
        });
    }
    if sum == 0.0 {
        log::warn!("every task has zero spread across experiments; using uniform task weights");
        let mut w = TaskWeights::uniform(q_matrix.keys(), stds);
        w.uniform_fallback = true;
        return Ok(w);
    }
    Ok(TaskWeights {
        weights: stds.iter().map(|(t, d)| (t.clone(), d / sum)).collect(),
        stds,
        ghost_weight: None,
        uniform_fallback: false,
    })
}

/// `sum_t w_t R_t`; the ghost task contributes `w_0 * 0`.
pub fn weighted_rank_score(ranks: &BTreeMap<String, usize>, weights: &TaskWeights) -> Result<f64> {
    weights
        .weights
        .iter()
        .map(|(task, w)| {
            ranks
                .get(task)
                .map(|&r| w * r as f64)
                .ok_or_else(|| ScoringError::MissingTaskRank(task.clone()))
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingOptions {
    pub weighted: bool,
    pub ghost: bool,
    pub epsilon: f64,
}

impl Default for RankingOptions {
    fn default() -> Self {
        RankingOptions {
            weighted: true,
            ghost: false,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub experiment: String,
    pub q_per_task: BTreeMap<String, f64>,
    pub task_ranks: BTreeMap<String, usize>,
    pub mean_q: f64,
    pub weighted_score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub weights: TaskWeights,
    /// Sorted by rank, then mean Q (descending), then experiment name.
    pub entries: Vec<RankedEntry>,
}

/// Ranks experiments given their per-task `q`.
///
/// Weighted mode orders by the weighted mean rank (ascending). Unweighted
/// mode reports uniform weights and plain mean ranks, and orders by mean Q
/// (descending).
pub fn final_ranking(
    experiments: &BTreeMap<String, BTreeMap<String, f64>>,
    options: RankingOptions,
) -> Result<Ranking> {
    let (_, first) = experiments.iter().next().ok_or(ScoringError::Empty)?;
    let tasks: Vec<String> = first.keys().cloned().collect();
    if tasks.is_empty() {
        return Err(ScoringError::Empty);
    }
    for (name, qs) in experiments {
        if qs.len() != tasks.len() || !tasks.iter().all(|t| qs.contains_key(t)) {
            return Err(ScoringError::TaskSetMismatch {
                experiment: name.clone(),
            });
        }
    }

    let mut q_matrix: QMatrix = BTreeMap::new();
    for task in &tasks {
        let column = experiments
            .iter()
            .map(|(exp, qs)| (exp.clone(), qs[task]))
            .collect();
        q_matrix.insert(task.clone(), column);
    }
    let task_ranks: BTreeMap<String, BTreeMap<String, usize>> = q_matrix
        .iter()
        .map(|(task, column)| Ok((task.clone(), rank_values(column, true)?)))
        .collect::<Result<_>>()?;

    let weights = if options.weighted {
        task_weights(&q_matrix, options.ghost, options.epsilon)?
    } else {
        let stds = q_matrix
            .iter()
            .map(|(t, col)| {
                (
                    t.clone(),
                    mean_std(&col.values().copied().collect::<Vec<_>>()).1,
                )
            })
            .collect();
        TaskWeights::uniform(&tasks, stds)
    };

    let mut entries = Vec::with_capacity(experiments.len());
    for (exp, qs) in experiments {
        let ranks: BTreeMap<String, usize> = tasks
            .iter()
            .map(|t| (t.clone(), task_ranks[t][exp]))
            .collect();
        let weighted_score = weighted_rank_score(&ranks, &weights)?;
        let mean_q = qs.values().sum::<f64>() / qs.len() as f64;
        entries.push(RankedEntry {
            experiment: exp.clone(),
            q_per_task: qs.clone(),
            task_ranks: ranks,
            mean_q,
            weighted_score,
            rank: 0,
        });
    }

    let keys: BTreeMap<String, f64> = entries
        .iter()
        .map(|e| {
            let key = if options.weighted {
                e.weighted_score
            } else {
                e.mean_q
            };
            (e.experiment.clone(), key)
        })
        .collect();
    let final_ranks = rank_values(&keys, !options.weighted)?;
    for e in &mut entries {
        e.rank = final_ranks[&e.experiment];
    }
    entries.sort_by(|a, b| {
        a.rank
            .cmp(&b.rank)
            .then(b.mean_q.total_cmp(&a.mean_q))
            .then_with(|| a.experiment.cmp(&b.experiment))
    });
    Ok(Ranking { weights, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn quality_examples() {
        assert_eq!(quality_score("t", &[1.0; 5], 0.02).unwrap().q, 100.0);
        // mean 0.5, population std exactly 0.02
        let q = quality_score("t", &[0.48, 0.52], 0.02).unwrap();
        assert!((q.std_s - 0.02).abs() < 1e-15);
        assert!((q.q - 25.0).abs() < 1e-12);
        assert_eq!(quality_from_stats(0.5, 0.02, 0.02), 25.0);
        let neg = quality_score("t", &[-0.1; 3], 0.02).unwrap();
        assert!((neg.q + 10.0).abs() < 1e-12);
        assert!(neg.unreliable);
        // 100 * 0.02 * 1 / (0.18 + 0.02) = 10
        assert!((quality_from_stats(1.0, 0.18, 0.02) - 10.0).abs() < 1e-12);
        assert_eq!(quality_score("t", &[], 0.02), Err(ScoringError::EmptyFolds));
    }

    #[test]
    fn mean_q_examples() {
        let tq = |q| TaskQuality {
            task: "t".into(),
            mean_s: 0.0,
            std_s: 0.0,
            q,
            k_used: 1,
            unreliable: q < 0.0,
        };
        assert_eq!(mean_q(&[tq(10.0), tq(30.0)]), 20.0);
        assert_eq!(mean_q(&[tq(7.0)]), 7.0);
        assert_eq!(mean_q(&[tq(100.0), tq(-100.0)]), 0.0);
    }

    #[test]
    fn rank_examples() {
        let r = rank_values(
            &map(&[("A", 13.2), ("B", 5.0), ("C", 13.2), ("D", -3.6)]),
            true,
        )
        .unwrap();
        assert_eq!(
            r,
            [("A", 1), ("B", 3), ("C", 1), ("D", 4)]
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect()
        );
        let tied = rank_values(&map(&[("A", 2.0), ("B", 2.0), ("C", 2.0)]), true).unwrap();
        assert!(tied.values().all(|&r| r == 1));
        let asc = rank_values(&map(&[("A", 1.0), ("B", 2.0)]), false).unwrap();
        assert_eq!((asc["A"], asc["B"]), (1, 2));
        assert!(matches!(
            rank_values(&map(&[("A", f64::NAN)]), true),
            Err(ScoringError::NonFiniteValue(_))
        ));
    }

    fn qm(rows: &[(&str, &[(&str, f64)])]) -> QMatrix {
        rows.iter()
            .map(|(t, col)| (t.to_string(), map(col)))
            .collect()
    }

    #[test]
    fn weight_examples() {
        // population std of {a-d, a+d} is d
        let m = qm(&[
            ("t1", &[("x", 0.0), ("y", 2.0)]),
            ("t2", &[("x", 0.0), ("y", 6.0)]),
        ]);
        let w = task_weights(&m, false, 0.02).unwrap();
        assert_eq!(w.stds["t1"], 1.0);
        assert_eq!(w.stds["t2"], 3.0);
        assert_eq!(w.weights["t1"], 0.25);
        assert_eq!(w.weights["t2"], 0.75);

        let eq = qm(&[
            ("a", &[("x", 1.0), ("y", 3.0)]),
            ("b", &[("x", 5.0), ("y", 7.0)]),
        ]);
        let w = task_weights(&eq, false, 0.02).unwrap();
        assert_eq!(w.weights["a"], w.weights["b"]);

        // sum of deltas equals eps: 0.01 + 0.01
        let g = qm(&[
            ("a", &[("x", 0.0), ("y", 0.02)]),
            ("b", &[("x", 1.0), ("y", 1.02)]),
        ]);
        let w = task_weights(&g, true, 0.02).unwrap();
        assert!((w.ghost_weight.unwrap() - 0.5).abs() < 1e-12);
        assert!((w.weights["a"] - 0.25).abs() < 1e-12);
        assert!((w.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_zero_variance_falls_back_to_uniform() {
        let m = qm(&[
            ("a", &[("x", 3.0)]),
            ("b", &[("x", 4.0)]),
            ("c", &[("x", 1.0)]),
        ]);
        let w = task_weights(&m, false, 0.02).unwrap();
        assert!(w.uniform_fallback);
        assert!(w.weights.values().all(|&v| v == 1.0 / 3.0));
        let g = task_weights(&m, true, 0.02).unwrap();
        assert_eq!(g.ghost_weight, Some(1.0));
        assert!(!g.uniform_fallback);
    }

    #[test]
    fn weighted_score_examples() {
        let w = TaskWeights {
            weights: map(&[("a", 0.25), ("b", 0.75)]),
            stds: BTreeMap::new(),
            ghost_weight: None,
            uniform_fallback: false,
        };
        let ranks: BTreeMap<String, usize> = [("a".to_string(), 1), ("b".to_string(), 2)].into();
        assert_eq!(weighted_rank_score(&ranks, &w).unwrap(), 1.75);
        let missing: BTreeMap<String, usize> = [("a".to_string(), 1)].into();
        assert_eq!(
            weighted_rank_score(&missing, &w),
            Err(ScoringError::MissingTaskRank("b".into()))
        );

        let u = TaskWeights::uniform(
            &["a".to_string(), "b".to_string(), "c".to_string()],
            BTreeMap::new(),
        );
        let r: BTreeMap<String, usize> = [
            ("a".to_string(), 1),
            ("b".to_string(), 2),
            ("c".to_string(), 6),
        ]
        .into();
        assert!((weighted_rank_score(&r, &u).unwrap() - 3.0).abs() < 1e-12);

        let z = TaskWeights {
            weights: map(&[("a", 1.0), ("b", 0.0)]),
            ..w
        };
        let r2: BTreeMap<String, usize> = [("a".to_string(), 1), ("b".to_string(), 9)].into();
        assert_eq!(
            weighted_rank_score(&ranks, &z).unwrap(),
            weighted_rank_score(&r2, &z).unwrap()
        );
    }

    fn exps(rows: &[(&str, &[(&str, f64)])]) -> BTreeMap<String, BTreeMap<String, f64>> {
        rows.iter()
            .map(|(e, qs)| (e.to_string(), map(qs)))
            .collect()
    }

    #[test]
    fn final_ranking_basics() {
        let one =
            final_ranking(&exps(&[("solo", &[("a", 3.0)])]), RankingOptions::default()).unwrap();
        assert_eq!(one.entries[0].rank, 1);
        assert!(one.weights.uniform_fallback);

        let dom = exps(&[
            ("best", &[("a", 9.0), ("b", 9.0)]),
            ("mid", &[("a", 5.0), ("b", 1.0)]),
            ("low", &[("a", 1.0), ("b", 4.0)]),
        ]);
        let r = final_ranking(&dom, RankingOptions::default()).unwrap();
        assert_eq!(r.entries[0].experiment, "best");
        assert_eq!(r.entries[0].rank, 1);

        let bad = exps(&[("x", &[("a", 1.0)]), ("y", &[("b", 1.0)])]);
        assert!(matches!(
            final_ranking(&bad, RankingOptions::default()),
            Err(ScoringError::TaskSetMismatch { .. })
        ));
    }

    #[test]
    fn unweighted_mode_orders_by_mean_q() {
        let m = exps(&[
            ("x", &[("a", 10.0), ("b", 0.0)]),
            ("y", &[("a", 4.0), ("b", 7.0)]),
        ]);
        let r = final_ranking(
            &m,
            RankingOptions {
                weighted: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.entries[0].experiment, "y");
        assert_eq!(r.entries[0].weighted_score, 1.5);
        assert!(r.weights.weights.values().all(|&w| w == 0.5));
    }

    fn brute_rank(values: &BTreeMap<String, f64>, descending: bool) -> BTreeMap<String, usize> {
        let sign = if descending { -1.0 } else { 1.0 };
        values
            .iter()
            .map(|(p, s)| {
                (
                    p.clone(),
                    1 + values.values().filter(|v| sign * **v < sign * s).count(),
                )
            })
            .collect()
    }

    proptest! {
        #[test]
        fn rank_matches_pairwise_count(vals in proptest::collection::vec(-5i32..5, 1..20), desc in any::<bool>()) {
            let m: BTreeMap<String, f64> = vals.iter().enumerate().map(|(i, v)| (format!("e{i}"), f64::from(*v) / 2.0)).collect();
            prop_assert_eq!(rank_values(&m, desc).unwrap(), brute_rank(&m, desc));
        }

        #[test]
        fn rank_invariant_under_increasing_transform(vals in proptest::collection::vec(-50.0f64..50.0, 1..15)) {
            let m: BTreeMap<String, f64> = vals.iter().enumerate().map(|(i, v)| (format!("e{i}"), *v)).collect();
            let t: BTreeMap<String, f64> = m.iter().map(|(k, v)| (k.clone(), v.powi(3) + 2.0 * v)).collect();
            prop_assert_eq!(rank_values(&m, true).unwrap(), rank_values(&t, true).unwrap());
        }

        #[test]
        fn quality_bounded_and_monotone(s in proptest::collection::vec(0.0f64..=1.0, 1..30)) {
            let tq = quality_score("t", &s, 0.02).unwrap();
            prop_assert!(tq.q >= 0.0 && tq.q <= 100.0 * tq.mean_s + 1e-12);
            if tq.mean_s > 0.0 {
                prop_assert!(quality_from_stats(tq.mean_s, tq.std_s + 0.01, 0.02) < tq.q);
            }
        }

        #[test]
        fn weights_sum_to_one(cols in proptest::collection::vec(proptest::collection::vec(-20.0f64..80.0, 3), 1..6), ghost in any::<bool>()) {
            let m: QMatrix = cols.iter().enumerate().map(|(t, col)| {
                (format!("t{t}"), col.iter().enumerate().map(|(e, q)| (format!("e{e}"), *q)).collect())
            }).collect();
            let w = task_weights(&m, ghost, 0.02).unwrap();
            prop_assert!((w.total() - 1.0).abs() <= 1e-12);
        }
    }
}
