//! Benchmark engine for fixed-size embedding submissions.
//!
//! A submission is a table of `N`-dimensional vectors keyed by sample id. Each
//! hidden downstream task is scored by training `K` linear probes on random
//! train/test splits, summarising the per-split scores into a noise-penalised
//! quality score, and ranking experiments with task weights derived from how
//! much the experiments disagree on each task.
//!
//! Module map:
//!
//! | module | role |
//! |--------|------|
//! | [`ingest`] | submission / annotation / config parsing |
//! | [`probe`] | splits, standardisation, probe training, per-fold evaluation |
//! | [`metrics`] | R², MSE, MAE, confusion, F1, ROC-AUC |
//! | [`scoring`] | quality score, ranks, task weights, final ranking |
//! | [`leaderboard`] | scoring database, leaderboard rebuild, output files |
//! | [`runner`] | one-shot evaluation and the polling service |
//! | [`synth`] | synthetic fixtures and the least-squares oracle |

pub mod error;
pub mod ingest;
pub mod leaderboard;
pub mod matrix;
pub mod metrics;
pub mod probe;
pub mod rng;
pub mod runner;
pub mod scoring;
pub mod synth;

pub use error::{Error, Result};
pub use ingest::{EmbeddingSet, EvalConfig, ProbeKind, TaskDataset, TaskKind};
pub use matrix::Matrix;
