//! Synthetic submissions and tasks with known structure, and a closed-form
//! least-squares oracle to check probes against.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{EmbeddingSet, TaskDataset, TaskKind};
use crate::matrix::Matrix;
use crate::metrics;
use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

// Stream numbers within a generator seed.
const EMBEDDING_STREAM: u64 = 100;
const WEIGHT_STREAM: u64 = 101;
const NOISE_STREAM: u64 = 102;
const LABEL_STREAM: u64 = 103;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub dim: usize,
    /// Leading embedding coordinates that carry label signal.
    pub signal_dims: usize,
    pub noise_sigma: f64,
    pub kind: TaskKind,
    pub zero_fraction: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn linear(
        n_samples: usize,
        dim: usize,
        signal_dims: usize,
        noise_sigma: f64,
        seed: u64,
    ) -> Self {
        SynthSpec {
            n_samples,
            dim,
            signal_dims,
            noise_sigma,
            kind: TaskKind::Regression,
            zero_fraction: 0.0,
            seed,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.n_samples == 0 || self.dim == 0 {
            return bad("n_samples and dim must be positive");
        }
        if self.signal_dims > self.dim {
            return bad("signal_dims exceeds dim");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be a non-negative real");
        }
        if !(0.0..=1.0).contains(&self.zero_fraction) {
            return bad("zero_fraction must lie in [0, 1]");
        }
        Ok(())
    }
}

pub fn sample_id(i: usize) -> String {
    format!("sample_{i:06}")
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(sample_id).collect()
}

/// i.i.d. standard-normal entries.
pub fn gen_random_embeddings(n: usize, dim: usize, seed: u64) -> EmbeddingSet {
    let mut r = rng::stream(seed, EMBEDDING_STREAM);
    let data: Vec<f64> = (0..n * dim).map(|_| r.sample(StandardNormal)).collect();
    EmbeddingSet::new(dim, ids(n), Matrix::from_vec(n, dim, data))
        .expect("generated rows are valid")
}

fn min_max(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

/// Raw linear response `w . x[..signal_dims] + sigma * noise`, `w` unit norm.
fn linear_response(spec: &SynthSpec, emb: &EmbeddingSet) -> Vec<f64> {
    let mut wr = rng::stream(spec.seed, WEIGHT_STREAM);
    let mut w: Vec<f64> = (0..spec.signal_dims)
        .map(|_| wr.sample(StandardNormal))
        .collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        w.iter_mut().for_each(|v| *v /= norm);
    }
    let mut nr = rng::stream(spec.seed, NOISE_STREAM);
    emb.matrix()
        .iter_rows()
        .map(|x| {
            let signal: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            let noise: f64 = nr.sample(StandardNormal);
            signal + spec.noise_sigma * noise
        })
        .collect()
}

/// Regression task whose labels are an affine function of the first
/// `signal_dims` embedding coordinates plus Gaussian noise, scaled into `[0, 1]`.
pub fn gen_linear_task(spec: &SynthSpec) -> Result<(EmbeddingSet, TaskDataset), SynthError> {
    spec.validate()?;
    if spec.kind != TaskKind::Regression {
        return Err(SynthError::InvalidSpec(
            "gen_linear_task builds regression tasks".into(),
        ));
    }
    let emb = gen_random_embeddings(spec.n_samples, spec.dim, spec.seed);
    let mut y = linear_response(spec, &emb);
    min_max(&mut y);
    let task = TaskDataset::new("linear", TaskKind::Regression, ids(spec.n_samples), y)
        .expect("generated labels are valid");
    Ok((emb, task))
}

/// Binary task: 1 where the linear response exceeds its median.
pub fn gen_threshold_task(spec: &SynthSpec) -> Result<(EmbeddingSet, TaskDataset), SynthError> {
    spec.validate()?;
    let emb = gen_random_embeddings(spec.n_samples, spec.dim, spec.seed);
    let y = linear_response(spec, &emb);
    let mut sorted = y.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let labels = y.iter().map(|v| f64::from(u8::from(*v > median))).collect();
    let task = TaskDataset::new(
        "linear_cls",
        TaskKind::Classification,
        ids(spec.n_samples),
        labels,
    )
    .expect("generated labels are valid");
    Ok((emb, task))
}

/// `round(zero_fraction * n)` zero labels; the rest uniform in `(0, 1]`
/// (regression) or 1 (classification), in seeded random positions.
pub fn gen_majority_zero_task(
    n: usize,
    zero_fraction: f64,
    kind: TaskKind,
    seed: u64,
) -> Result<TaskDataset, SynthError> {
    if !(0.0..=1.0).contains(&zero_fraction) {
        return Err(SynthError::InvalidSpec(
            "zero_fraction must lie in [0, 1]".into(),
        ));
    }
    let zeros = (zero_fraction * n as f64).round() as usize;
    let mut r = rng::stream(seed, LABEL_STREAM);
    let mut labels: Vec<f64> = (0..n)
        .map(|i| {
            if i < zeros {
                0.0
            } else {
                match kind {
                    TaskKind::Regression => 1.0 - r.random::<f64>(),
                    TaskKind::Classification => 1.0,
                }
            }
        })
        .collect();
    rng::shuffle(&mut r, &mut labels);
    Ok(
        TaskDataset::new("majority_zero", kind, ids(n), labels)
            .expect("generated labels are valid"),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    /// Training R² of the fit.
    pub r_squared: f64,
}

impl OlsFit {
    pub fn predict(&self, features: &Matrix) -> Vec<f64> {
        features
            .iter_rows()
            .map(|x| {
                self.intercept
                    + self
                        .coefficients
                        .iter()
                        .zip(x)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect()
    }
}

/// Least squares with intercept. Solves the normal equations by Cholesky and
/// falls back to the SVD pseudo-inverse (minimum-norm solution) when the
/// system is rank deficient.
pub fn ols_oracle(features: &Matrix, labels: &[f64]) -> OlsFit {
    let (n, d) = (features.rows(), features.cols());
    let design = DMatrix::from_fn(
        n,
        d + 1,
        |r, c| if c == 0 { 1.0 } else { features.row(r)[c - 1] },
    );
    let y = DVector::from_column_slice(labels);
    let xtx = design.transpose() * &design;
    let xty = design.transpose() * &y;

    let beta = match (n > d).then(|| xtx.clone().cholesky()).flatten() {
        Some(ch) => ch.solve(&xty),
        None => design
            .clone()
            .svd(true, true)
            .solve(&y, 1e-12)
            .expect("SVD computed with both factors"),
    };
    let fit = OlsFit {
        intercept: beta[0],
        coefficients: beta.iter().skip(1).copied().collect(),
        r_squared: 0.0,
    };
    let pred = fit.predict(features);
    let r2 = metrics::r_squared(labels, &pred)
        .map(|m| m.value)
        .unwrap_or(f64::NAN);
    OlsFit {
        r_squared: r2,
        ..fit
    }
}

/// Paths written by [`write_fixture_bundle`].
#[derive(Debug, Clone)]
pub struct FixtureBundle {
    pub submission: PathBuf,
    pub random_submission: PathBuf,
    pub annotations: PathBuf,
    pub config: PathBuf,
}

/// Writes a ready-to-evaluate fixture: a signal-bearing submission, a random
/// baseline submission, three annotation files and a matching config.
pub fn write_fixture_bundle(
    dir: &Path,
    spec: &SynthSpec,
    k_folds: usize,
) -> std::io::Result<FixtureBundle> {
    let (emb, regr) = gen_linear_task(spec).map_err(std::io::Error::other)?;
    let (_, cls) = gen_threshold_task(spec).map_err(std::io::Error::other)?;
    let zero = gen_majority_zero_task(spec.n_samples, 0.9, TaskKind::Classification, spec.seed)
        .map_err(std::io::Error::other)?;
    let random = gen_random_embeddings(spec.n_samples, spec.dim, spec.seed.wrapping_add(1));

    let annotations = dir.join("annotations");
    fs::create_dir_all(&annotations)?;
    for task in [&regr, &cls, &zero] {
        task.save_into(&annotations)?;
    }
    let submission = dir.join("submission.csv");
    emb.save(&submission)?;
    let random_submission = dir.join("random_submission.csv");
    random.save(&random_submission)?;
    let config = dir.join("config.yaml");
    fs::write(
        &config,
        format!(
            "embedding_dim: {}\nbatch_size: 32\nepochs: 30\nlearning_rate: 0.05\nk_folds: {}\nseed: {}\n",
            spec.dim, k_folds, spec.seed
        ),
    )?;
    Ok(FixtureBundle {
        submission,
        random_submission,
        annotations,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_embeddings_shape_and_determinism() {
        let e = gen_random_embeddings(2, 3, 9);
        assert_eq!((e.len(), e.dim()), (2, 3));
        assert!(e.matrix().as_slice().iter().all(|v| v.is_finite()));
        assert_eq!(e, gen_random_embeddings(2, 3, 9));
        assert_ne!(e, gen_random_embeddings(2, 3, 10));
    }

    #[test]
    fn random_embeddings_have_zero_mean() {
        let e = gen_random_embeddings(1000, 100, 0);
        let m = metrics::mean(e.matrix().as_slice());
        assert!(m.abs() <= 0.02, "{m}");
    }

    #[test]
    fn majority_zero_counts() {
        let t = gen_majority_zero_task(100, 0.9, TaskKind::Classification, 4).unwrap();
        assert_eq!(t.labels().iter().filter(|&&y| y == 0.0).count(), 90);
        assert_eq!(t.labels().iter().filter(|&&y| y == 1.0).count(), 10);
        let all = gen_majority_zero_task(20, 1.0, TaskKind::Regression, 4).unwrap();
        assert!(all.labels().iter().all(|&y| y == 0.0));
        let r = gen_majority_zero_task(50, 0.5, TaskKind::Regression, 4).unwrap();
        assert!(r
            .labels()
            .iter()
            .filter(|&&y| y != 0.0)
            .all(|&y| y > 0.0 && y <= 1.0));
    }

    #[test]
    fn linear_task_is_deterministic_and_bounded() {
        let spec = SynthSpec::linear(50, 6, 3, 0.1, 2);
        let (e1, t1) = gen_linear_task(&spec).unwrap();
        let (e2, t2) = gen_linear_task(&spec).unwrap();
        assert_eq!((e1, t1.clone()), (e2, t2));
        assert!(t1.labels().iter().all(|y| (0.0..=1.0).contains(y)));
    }

    #[test]
    fn invalid_specs() {
        let mut spec = SynthSpec::linear(10, 3, 4, 0.0, 0);
        assert!(gen_linear_task(&spec).is_err());
        spec.signal_dims = 2;
        spec.kind = TaskKind::Classification;
        assert!(gen_linear_task(&spec).is_err());
        assert!(gen_majority_zero_task(10, 1.5, TaskKind::Regression, 0).is_err());
    }

    #[test]
    fn ols_exact_line() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [2.0]]);
        let fit = ols_oracle(&x, &[1.0, 4.0, 7.0]);
        assert!((fit.intercept - 1.0).abs() < 1e-12);
        assert!((fit.coefficients[0] - 3.0).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ols_constant_labels() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [2.0], [5.0]]);
        let fit = ols_oracle(&x, &[2.5; 4]);
        assert!(fit.coefficients[0].abs() < 1e-12);
        assert!((fit.intercept - 2.5).abs() < 1e-12);
    }

    #[test]
    fn ols_rank_deficient_uses_min_norm() {
        // duplicated column: min-norm splits the slope evenly
        let x = Matrix::from_rows(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]);
        let fit = ols_oracle(&x, &[0.0, 2.0, 4.0]);
        assert!((fit.coefficients[0] - fit.coefficients[1]).abs() < 1e-9);
        assert!((fit.r_squared - 1.0).abs() < 1e-9);
        // fewer samples than parameters
        let wide = Matrix::from_rows(&[[1.0, 2.0, 3.0], [0.5, -1.0, 2.0]]);
        let fit = ols_oracle(&wide, &[1.0, 0.0]);
        assert!((fit.r_squared - 1.0).abs() < 1e-9);
    }

    #[test]
    fn noiseless_linear_task_is_exactly_solvable() {
        let (e, t) = gen_linear_task(&SynthSpec::linear(200, 10, 4, 0.0, 1)).unwrap();
        let fit = ols_oracle(e.matrix(), t.labels());
        assert!((fit.r_squared - 1.0).abs() < 1e-10);
    }
}
