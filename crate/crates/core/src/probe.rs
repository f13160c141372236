//! Train/test splitting, input preparation, and probe training.
//!
//! Probes are trained with plain mini-batch gradient descent from a zero
//! initialisation: no momentum, no weight decay. Regression minimises mean
//! squared error on a single affine output; classification minimises softmax
//! cross-entropy over two logits. The one- and two-hidden-layer MLP probes put
//! ReLU layers of width `mlp_hidden` in front of the same heads.

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{EmbeddingSet, EvalConfig, ProbeKind, TaskDataset, TaskKind};
use crate::matrix::{axpy, dot, Matrix};
use crate::metrics::{self, FoldScore, MetricError};
use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum ProbeError {
    #[error(
        "cannot split {n} samples at ratio {ratio}: need at least one train and one test sample"
    )]
    TooFewSamples { n: usize, ratio: f64 },
    #[error("fold count must be positive")]
    NoFolds,
    #[error("training loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("feature width {found} does not match expected width {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("{features} feature rows but {labels} labels")]
    LabelCountMismatch { features: usize, labels: usize },
    #[error("task `{task}` references id `{id}` missing from the submission")]
    MissingId { task: String, id: String },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

type Result<T> = std::result::Result<T, ProbeError>;

/// One train/test partition, as indices into the id list the plan was built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub k: usize,
    pub ratio: f64,
    pub seed: u64,
    pub n: usize,
    pub folds: Vec<Fold>,
}

/// `round(ratio * n)`, halves rounded away from zero.
pub fn train_size(n: usize, ratio: f64) -> usize {
    (ratio * n as f64).round() as usize
}

/// Fold `k` shuffles `0..n` with split stream `k` of `seed` and cuts at
/// [`train_size`]. Both halves are returned in ascending index order.
pub fn make_splits(ids: &[String], k: usize, ratio: f64, seed: u64) -> Result<SplitPlan> {
    let n = ids.len();
    if k == 0 {
        return Err(ProbeError::NoFolds);
    }
    let n_train = train_size(n, ratio);
    if n < 2 || n_train < 1 || n_train >= n {
        return Err(ProbeError::TooFewSamples { n, ratio });
    }
    let folds = (0..k)
        .map(|fold| {
            let mut perm: Vec<usize> = (0..n).collect();
            rng::shuffle(&mut rng::stream(seed, fold as u64), &mut perm);
            let mut train = perm[..n_train].to_vec();
            let mut test = perm[n_train..].to_vec();
            train.sort_unstable();
            test.sort_unstable();
            Fold { train, test }
        })
        .collect();
    Ok(SplitPlan {
        k,
        ratio,
        seed,
        n,
        folds,
    })
}

/// Per-dimension z-scoring with statistics over every row of the set
/// (population standard deviation). Constant dimensions become exact zeros;
/// other zero-variance dimensions are only centred.
pub fn standardize(embeddings: &EmbeddingSet) -> EmbeddingSet {
    let m = embeddings.matrix();
    let (n, d) = (m.rows(), m.cols());
    if n == 0 {
        return embeddings.clone();
    }
    let mut mean = vec![0.0; d];
    for row in m.iter_rows() {
        axpy(1.0, row, &mut mean);
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    let mut var = vec![0.0; d];
    for row in m.iter_rows() {
        for ((v, x), mu) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - mu) * (x - mu);
        }
    }
    let first = m.row(0);
    let constant: Vec<bool> = (0..d)
        .map(|c| m.iter_rows().all(|row| row[c] == first[c]))
        .collect();
    let centre: Vec<f64> = (0..d)
        .map(|c| if constant[c] { first[c] } else { mean[c] })
        .collect();
    let scale: Vec<f64> = var
        .iter()
        .map(|v| {
            let sd = (v / n as f64).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();

    let mut out = Matrix::zeros(n, d);
    for r in 0..n {
        for (c, (o, x)) in out.row_mut(r).iter_mut().zip(m.row(r)).enumerate() {
            *o = (x - centre[c]) / scale[c];
        }
    }
    embeddings.with_values(out)
}

/// Min-max scales regression labels into `[0, 1]`. Classification labels
/// pass through; a constant regression task maps to all zeros.
pub fn normalize_labels(task: &TaskDataset) -> TaskDataset {
    if task.kind == TaskKind::Classification || task.is_empty() {
        return task.clone();
    }
    let labels = task.labels();
    let lo = labels.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let scaled = if span > 0.0 {
        labels.iter().map(|y| (y - lo) / span).collect()
    } else {
        vec![0.0; labels.len()]
    };
    task.with_labels(scaled)
}

/// Fully connected layer; `weights` is `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        DenseLayer {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// He-uniform weights, zero bias.
    fn random(inputs: usize, outputs: usize, rng: &mut impl RngCore) -> Self {
        let limit = (6.0 / inputs as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| {
                // 53-bit uniform in [0, 1)
                let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                (2.0 * u - 1.0) * limit
            })
            .collect();
        DenseLayer {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
        }
    }

    #[inline]
    fn row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.inputs..(o + 1) * self.inputs]
    }

    fn forward(&self, input: &[f64], out: &mut [f64]) {
        for (o, slot) in out.iter_mut().enumerate() {
            *slot = self.bias[o] + dot(self.row(o), input);
        }
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub kind: ProbeKind,
    pub task: TaskKind,
    pub layers: Vec<DenseLayer>,
}

impl ProbeModel {
    /// Zero-initialised linear head, or an MLP whose hidden layers are drawn
    /// from stream 1 of `fold_seed` and whose output layer is zero.
    pub fn init(
        kind: ProbeKind,
        task: TaskKind,
        input_dim: usize,
        hidden: usize,
        fold_seed: u64,
    ) -> Self {
        let outputs = match task {
            TaskKind::Regression => 1,
            TaskKind::Classification => 2,
        };
        let mut init_rng = rng::stream(fold_seed, 1);
        let hidden_layers = match kind {
            ProbeKind::Linear => 0,
            ProbeKind::Mlp1 => 1,
            ProbeKind::Mlp2 => 2,
        };
        let mut layers = Vec::with_capacity(hidden_layers + 1);
        let mut width = input_dim;
        for _ in 0..hidden_layers {
            layers.push(DenseLayer::random(width, hidden, &mut init_rng));
            width = hidden;
        }
        layers.push(DenseLayer::zeros(width, outputs));
        ProbeModel { kind, task, layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(DenseLayer::is_finite)
    }

    /// Output-layer values for one input; `acts` receives every layer's
    /// post-activation output (ReLU on hidden layers, raw on the last).
    fn forward_into(&self, x: &[f64], acts: &mut [Vec<f64>]) {
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (before, after) = acts.split_at_mut(l);
            let input = if l == 0 { x } else { &before[l - 1][..] };
            layer.forward(input, &mut after[0]);
            if l != last {
                after[0].iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
    }

    fn scratch(&self) -> Vec<Vec<f64>> {
        self.layers.iter().map(|l| vec![0.0; l.outputs]).collect()
    }

    /// Regression output, or the class-1 softmax probability.
    pub fn predict_one(&self, x: &[f64], acts: &mut [Vec<f64>]) -> f64 {
        self.forward_into(x, acts);
        let out = acts.last().expect("at least one layer");
        match self.task {
            TaskKind::Regression => out[0],
            TaskKind::Classification => softmax2(out[0], out[1]).1,
        }
    }
}

/// Class probabilities for two logits, computed from their difference so
/// they sum to one.
pub fn softmax2(z0: f64, z1: f64) -> (f64, f64) {
    let p1 = 1.0 / (1.0 + (z0 - z1).exp());
    (1.0 - p1, p1)
}

pub fn predict(model: &ProbeModel, features: &Matrix) -> Result<Vec<f64>> {
    if features.cols() != model.input_dim() {
        return Err(ProbeError::WidthMismatch {
            expected: model.input_dim(),
            found: features.cols(),
        });
    }
    let mut acts = model.scratch();
    Ok(features
        .iter_rows()
        .map(|x| model.predict_one(x, &mut acts))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedProbe {
    pub model: ProbeModel,
    /// Mean training loss per epoch, accumulated over the epoch's batches.
    pub loss_curve: Vec<f64>,
}

/// Trains on every row of `features`.
pub fn train_probe(
    features: &Matrix,
    labels: &[f64],
    kind: TaskKind,
    config: &EvalConfig,
    fold_seed: u64,
) -> Result<TrainedProbe> {
    let rows: Vec<usize> = (0..features.rows()).collect();
    train_on_rows(features, &rows, labels, kind, config, fold_seed)
}

/// Trains on the listed rows of `features`; `labels` is indexed like `features`.
pub(crate) fn train_on_rows(
    features: &Matrix,
    rows: &[usize],
    labels: &[f64],
    kind: TaskKind,
    config: &EvalConfig,
    fold_seed: u64,
) -> Result<TrainedProbe> {
    if features.rows() != labels.len() {
        return Err(ProbeError::LabelCountMismatch {
            features: features.rows(),
            labels: labels.len(),
        });
    }
    if features.cols() != config.embedding_dim {
        return Err(ProbeError::WidthMismatch {
            expected: config.embedding_dim,
            found: features.cols(),
        });
    }
    if rows.is_empty() {
        return Err(ProbeError::TooFewSamples {
            n: 0,
            ratio: config.split_ratio,
        });
    }

    let mut model = ProbeModel::init(
        config.probe_kind,
        kind,
        features.cols(),
        config.mlp_hidden,
        fold_seed,
    );
    let mut grads: Vec<DenseLayer> = model
        .layers
        .iter()
        .map(|l| DenseLayer::zeros(l.inputs, l.outputs))
        .collect();
    let mut acts = model.scratch();
    let mut deltas = model.scratch();
    let mut order = rows.to_vec();
    let mut batch_rng = rng::stream(fold_seed, 0);
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let depth = model.layers.len();

    for epoch in 0..config.epochs {
        rng::shuffle(&mut batch_rng, &mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            for g in grads.iter_mut() {
                g.weights.iter_mut().for_each(|v| *v = 0.0);
                g.bias.iter_mut().for_each(|v| *v = 0.0);
            }
            for &r in batch {
                let x = features.row(r);
                let y = labels[r];
                model.forward_into(x, &mut acts);
                let out = &acts[depth - 1];
                let top = &mut deltas[depth - 1];
                match kind {
                    TaskKind::Regression => {
                        let err = out[0] - y;
                        epoch_loss += err * err;
                        top[0] = 2.0 * err;
                    }
                    TaskKind::Classification => {
                        let (p0, p1) = softmax2(out[0], out[1]);
                        let target = usize::from(y == 1.0);
                        // -log p_y via log-sum-exp
                        let zmax = out[0].max(out[1]);
                        let lse = zmax + ((out[0] - zmax).exp() + (out[1] - zmax).exp()).ln();
                        epoch_loss += lse - out[target];
                        top[0] = p0 - f64::from(u8::from(target == 0));
                        top[1] = p1 - f64::from(u8::from(target == 1));
                    }
                }
                backward(&model, x, &acts, &mut deltas, &mut grads);
            }
            let step = config.learning_rate / batch.len() as f64;
            for (layer, g) in model.layers.iter_mut().zip(&grads) {
                axpy(-step, &g.weights, &mut layer.weights);
                axpy(-step, &g.bias, &mut layer.bias);
            }
        }
        let mean_loss = epoch_loss / rows.len() as f64;
        if !mean_loss.is_finite() {
            return Err(ProbeError::NonFiniteLoss { epoch });
        }
        loss_curve.push(mean_loss);
    }
    if !model.is_finite() {
        return Err(ProbeError::NonFiniteLoss {
            epoch: config.epochs,
        });
    }
    Ok(TrainedProbe { model, loss_curve })
}

/// Accumulates per-sample gradients. `deltas[last]` must hold dLoss/dOutput.
fn backward(
    model: &ProbeModel,
    x: &[f64],
    acts: &[Vec<f64>],
    deltas: &mut [Vec<f64>],
    grads: &mut [DenseLayer],
) {
    for l in (0..model.layers.len()).rev() {
        let layer = &model.layers[l];
        let input = if l == 0 { x } else { &acts[l - 1][..] };
        let (below, here) = deltas.split_at_mut(l);
        let delta = &here[0];
        let g = &mut grads[l];
        for (o, &d) in delta.iter().enumerate() {
            if d != 0.0 {
                axpy(
                    d,
                    input,
                    &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs],
                );
                g.bias[o] += d;
            }
        }
        if l > 0 {
            let prev = &mut below[l - 1];
            prev.iter_mut().for_each(|v| *v = 0.0);
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, layer.row(o), prev);
                }
            }
            // ReLU derivative on the previous layer's output
            for (p, a) in prev.iter_mut().zip(&acts[l - 1]) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub y_true: f64,
    pub y_pred: f64,
}

/// Score plus the raw test-set predictions of one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutcome {
    pub score: FoldScore,
    pub predictions: Vec<Prediction>,
}

/// Feature rows of `embeddings` in the order of `task`'s ids.
pub fn align(embeddings: &EmbeddingSet, task: &TaskDataset) -> Result<Matrix> {
    let dim = embeddings.dim();
    let mut data = Vec::with_capacity(task.len() * dim);
    for id in task.ids() {
        let row = embeddings.get(id).ok_or_else(|| ProbeError::MissingId {
            task: task.name.clone(),
            id: id.clone(),
        })?;
        data.extend_from_slice(row);
    }
    Ok(Matrix::from_vec(task.len(), dim, data))
}

/// Trains on `fold.train`, scores on `fold.test`. Fold indices refer to the
/// task's id order.
pub fn evaluate_fold(
    embeddings: &EmbeddingSet,
    task: &TaskDataset,
    fold: &Fold,
    fold_index: usize,
    config: &EvalConfig,
    fold_seed: u64,
) -> Result<FoldOutcome> {
    let features = align(embeddings, task)?;
    evaluate_aligned(&features, task, fold, fold_index, config, fold_seed)
}

pub(crate) fn evaluate_aligned(
    features: &Matrix,
    task: &TaskDataset,
    fold: &Fold,
    fold_index: usize,
    config: &EvalConfig,
    fold_seed: u64,
) -> Result<FoldOutcome> {
    let labels = task.labels();
    let trained = train_on_rows(features, &fold.train, labels, task.kind, config, fold_seed)?;
    let mut acts = trained.model.scratch();
    let y_true: Vec<f64> = fold.test.iter().map(|&i| labels[i]).collect();
    let y_pred: Vec<f64> = fold
        .test
        .iter()
        .map(|&i| trained.model.predict_one(features.row(i), &mut acts))
        .collect();
    let report = match task.kind {
        TaskKind::Regression => metrics::regression_report(&y_true, &y_pred)?,
        TaskKind::Classification => metrics::classification_report(&y_true, &y_pred)?,
    };
    let predictions = fold
        .test
        .iter()
        .zip(y_true.iter().zip(&y_pred))
        .map(|(&i, (&t, &p))| Prediction {
            id: task.ids()[i].clone(),
            y_true: t,
            y_pred: p,
        })
        .collect();
    Ok(FoldOutcome {
        score: FoldScore {
            task: task.name.clone(),
            fold_index,
            primary: report.primary,
            secondary: report.secondary,
            loss_curve: trained.loss_curve,
            confusion: report.confusion,
            warnings: report.warnings,
        },
        predictions,
    })
}

/// Runs every fold of `plan` on the current rayon pool. Results come back in
/// fold order; on failure the lowest-index error is returned.
pub fn evaluate_folds(
    features: &Matrix,
    task: &TaskDataset,
    plan: &SplitPlan,
    config: &EvalConfig,
) -> Result<Vec<FoldOutcome>> {
    let results: Vec<Result<FoldOutcome>> = plan
        .folds
        .par_iter()
        .enumerate()
        .map(|(k, fold)| {
            evaluate_aligned(
                features,
                task,
                fold,
                k,
                config,
                rng::fold_seed(plan.seed, k),
            )
        })
        .collect();
    results.into_iter().collect()
}
