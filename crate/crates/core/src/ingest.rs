//! Parsing of submissions, annotation directories and evaluation configs.
//!
//! Submission CSV: header `id,<c1>,...,<cN>` (names after `id` are ignored),
//! one row per sample. Annotation CSV: header `id,label`, file named
//! `<task>__regr.csv` or `<task>__cls.csv`. Config: flat YAML mapping with the
//! keys of [`EvalConfig`].

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::matrix::Matrix;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("expected {expected} embedding columns after `id`, found {found}{}", row_suffix(.row))]
    DimensionMismatch {
        expected: usize,
        found: usize,
        row: Option<String>,
    },
    #[error("non-finite value in row `{id}`")]
    NonFiniteValue { id: String },
    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),
    #[error("malformed CSV {path}: {reason}")]
    MalformedCsv { path: String, reason: String },
    #[error("annotation file `{0}` does not end in `__regr` or `__cls`")]
    UnknownTaskSuffix(String),
    #[error("classification task `{task}` has non-binary label {label} for id `{id}`")]
    NonBinaryLabel {
        task: String,
        id: String,
        label: f64,
    },
    #[error("no task CSV files in annotation directory {0}")]
    EmptyAnnotationDir(String),
    #[error("task filter names unknown task `{0}`")]
    FilterNameNotFound(String),
    #[error("task `{0}` is defined by more than one annotation file")]
    DuplicateTask(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid config value for `{key}`: {reason}")]
    InvalidValue { key: String, reason: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn row_suffix(row: &Option<String>) -> String {
    match row {
        Some(id) => format!(" (row `{id}`)"),
        None => String::new(),
    }
}

type Result<T> = std::result::Result<T, IngestError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Table of fixed-dimension embedding vectors keyed by opaque sample ids.
/// Rows keep the order in which they were read.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    ids: Vec<String>,
    values: Matrix,
    index: HashMap<String, usize>,
}

impl EmbeddingSet {
    /// Checks that ids are unique, every row has `dim` entries, and all
    /// entries are finite.
    pub fn new(dim: usize, ids: Vec<String>, values: Matrix) -> Result<Self> {
        if values.rows() != ids.len() || (values.rows() > 0 && values.cols() != dim) {
            return Err(IngestError::DimensionMismatch {
                expected: dim,
                found: values.cols(),
                row: None,
            });
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(IngestError::DuplicateId(id.clone()));
            }
            if values.row(i).iter().any(|v| !v.is_finite()) {
                return Err(IngestError::NonFiniteValue { id: id.clone() });
            }
        }
        Ok(EmbeddingSet {
            dim,
            ids,
            values,
            index,
        })
    }

    pub fn from_rows<I, S>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for (id, row) in rows {
            let id = id.into();
            if row.len() != dim {
                return Err(IngestError::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                    row: Some(id),
                });
            }
            ids.push(id);
            data.extend(row);
        }
        let n = ids.len();
        EmbeddingSet::new(dim, ids, Matrix::from_vec(n, dim, data))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrix(&self) -> &Matrix {
        &self.values
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.position(id).map(|i| self.values.row(i))
    }

    /// Same ids, new values. Used by transforms that keep the shape.
    pub(crate) fn with_values(&self, values: Matrix) -> Self {
        debug_assert_eq!(values.rows(), self.ids.len());
        EmbeddingSet {
            dim: self.dim,
            ids: self.ids.clone(),
            values,
            index: self.index.clone(),
        }
    }

    /// Serialises in the submission CSV format with columns `e0..e{dim-1}`.
    pub fn write_csv<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = Vec::with_capacity(self.dim + 1);
        header.push("id".to_string());
        header.extend((0..self.dim).map(|c| format!("e{c}")));
        w.write_record(&header).map_err(csv_to_io)?;
        let mut record = Vec::with_capacity(self.dim + 1);
        for (id, row) in self.ids.iter().zip(self.values.iter_rows()) {
            record.clear();
            record.push(id.clone());
            record.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&record).map_err(csv_to_io)?;
        }
        w.flush()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        self.write_csv(std::io::BufWriter::new(fs::File::create(path)?))
    }
}

fn csv_to_io(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Regression,
    Classification,
}

impl TaskKind {
    pub fn suffix(self) -> &'static str {
        match self {
            TaskKind::Regression => "__regr",
            TaskKind::Classification => "__cls",
        }
    }

    /// Name of the per-fold primary metric.
    pub fn primary_metric(self) -> &'static str {
        match self {
            TaskKind::Regression => "r2",
            TaskKind::Classification => "f1",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Regression => "regression",
            TaskKind::Classification => "classification",
        })
    }
}

/// Labels of one downstream task, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub name: String,
    pub kind: TaskKind,
    ids: Vec<String>,
    labels: Vec<f64>,
}

impl TaskDataset {
    pub fn new(
        name: impl Into<String>,
        kind: TaskKind,
        ids: Vec<String>,
        labels: Vec<f64>,
    ) -> Result<Self> {
        let name = name.into();
        assert_eq!(ids.len(), labels.len(), "ids and labels must align");
        let mut seen = BTreeSet::new();
        for (id, &label) in ids.iter().zip(&labels) {
            if !seen.insert(id.as_str()) {
                return Err(IngestError::DuplicateId(id.clone()));
            }
            if !label.is_finite() {
                return Err(IngestError::NonFiniteValue { id: id.clone() });
            }
            if kind == TaskKind::Classification && label != 0.0 && label != 1.0 {
                return Err(IngestError::NonBinaryLabel {
                    task: name,
                    id: id.clone(),
                    label,
                });
            }
        }
        Ok(TaskDataset {
            name,
            kind,
            ids,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.ids
            .iter()
            .map(String::as_str)
            .zip(self.labels.iter().copied())
    }

    pub(crate) fn with_labels(&self, labels: Vec<f64>) -> Self {
        TaskDataset {
            name: self.name.clone(),
            kind: self.kind,
            ids: self.ids.clone(),
            labels,
        }
    }

    /// File name this task is stored under, e.g. `crops__regr.csv`.
    pub fn file_name(&self) -> String {
        format!("{}{}.csv", self.name, self.kind.suffix())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["id", "label"]).map_err(csv_to_io)?;
        for (id, label) in self.iter() {
            w.write_record([id, &label.to_string()])
                .map_err(csv_to_io)?;
        }
        w.flush()
    }

    /// Writes `<dir>/<file_name()>` and returns the path.
    pub fn save_into(&self, dir: &Path) -> std::io::Result<PathBuf> {
        let path = dir.join(self.file_name());
        self.write_csv(std::io::BufWriter::new(fs::File::create(&path)?))?;
        Ok(path)
    }
}

/// Splits an annotation file stem into task name and kind.
pub fn task_identity(stem: &str) -> Result<(String, TaskKind)> {
    for kind in [TaskKind::Regression, TaskKind::Classification] {
        if let Some(name) = stem.strip_suffix(kind.suffix()) {
            if !name.is_empty() {
                return Ok((name.to_string(), kind));
            }
        }
    }
    Err(IngestError::UnknownTaskSuffix(stem.to_string()))
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader)
}

fn malformed(path: &str, reason: impl fmt::Display) -> IngestError {
    IngestError::MalformedCsv {
        path: path.to_string(),
        reason: reason.to_string(),
    }
}

pub fn parse_submission(path: &Path, expected_dim: usize) -> Result<EmbeddingSet> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    parse_submission_from(
        std::io::BufReader::new(file),
        expected_dim,
        &path.display().to_string(),
    )
}

/// Parses submission CSV text from any reader; `origin` is used in errors.
pub fn parse_submission_from<R: Read>(
    reader: R,
    expected_dim: usize,
    origin: &str,
) -> Result<EmbeddingSet> {
    let mut rdr = csv_reader(reader);
    let header = rdr.headers().map_err(|e| malformed(origin, e))?.clone();
    if header.get(0) != Some("id") {
        return Err(malformed(origin, "first header column must be `id`"));
    }
    if header.len() != expected_dim + 1 {
        return Err(IngestError::DimensionMismatch {
            expected: expected_dim,
            found: header.len().saturating_sub(1),
            row: None,
        });
    }

    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut seen = BTreeSet::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| malformed(origin, e))?;
        let id = record.get(0).unwrap_or_default().to_string();
        if id.is_empty() {
            return Err(malformed(
                origin,
                format!("empty id on data row {}", line + 1),
            ));
        }
        if record.len() != expected_dim + 1 {
            return Err(IngestError::DimensionMismatch {
                expected: expected_dim,
                found: record.len() - 1,
                row: Some(id),
            });
        }
        if !seen.insert(id.clone()) {
            return Err(IngestError::DuplicateId(id));
        }
        for cell in record.iter().skip(1) {
            let v: f64 = cell
                .parse()
                .map_err(|_| malformed(origin, format!("row `{id}`: `{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(IngestError::NonFiniteValue { id });
            }
            data.push(v);
        }
        ids.push(id);
    }
    if ids.is_empty() {
        return Err(malformed(origin, "no data rows"));
    }
    let n = ids.len();
    EmbeddingSet::new(expected_dim, ids, Matrix::from_vec(n, expected_dim, data))
}

pub fn parse_task(path: &Path) -> Result<TaskDataset> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| IngestError::UnknownTaskSuffix(path.display().to_string()))?;
    let (name, kind) = task_identity(stem)?;
    let file = fs::File::open(path).map_err(io_err(path))?;
    parse_task_from(
        std::io::BufReader::new(file),
        name,
        kind,
        &path.display().to_string(),
    )
}

pub fn parse_task_from<R: Read>(
    reader: R,
    name: String,
    kind: TaskKind,
    origin: &str,
) -> Result<TaskDataset> {
    let mut rdr = csv_reader(reader);
    let header = rdr.headers().map_err(|e| malformed(origin, e))?;
    if header.len() != 2 || header.get(0) != Some("id") || header.get(1) != Some("label") {
        return Err(malformed(origin, "header must be `id,label`"));
    }
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| malformed(origin, e))?;
        if record.len() != 2 {
            return Err(malformed(
                origin,
                format!("expected 2 fields, found {}", record.len()),
            ));
        }
        let id = record[0].to_string();
        let label: f64 = record[1].parse().map_err(|_| {
            malformed(
                origin,
                format!("row `{id}`: `{}` is not a number", &record[1]),
            )
        })?;
        ids.push(id);
        labels.push(label);
    }
    if ids.is_empty() {
        return Err(malformed(origin, "no data rows"));
    }
    TaskDataset::new(name, kind, ids, labels)
}

/// Loads every top-level `*.csv` in `dir` as a task, sorted by task name.
pub fn load_annotations(dir: &Path, filter: Option<&[String]>) -> Result<Vec<TaskDataset>> {
    let mut found: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if !path.is_file() || path.extension().and_then(|e| e.to_str()) != Some("csv") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        let (name, _) = task_identity(stem)?;
        if found.iter().any(|(n, _)| *n == name) {
            return Err(IngestError::DuplicateTask(name));
        }
        found.push((name, path));
    }
    if found.is_empty() {
        return Err(IngestError::EmptyAnnotationDir(dir.display().to_string()));
    }
    found.sort_by(|a, b| a.0.cmp(&b.0));

    if let Some(names) = filter {
        for wanted in names {
            if !found.iter().any(|(n, _)| n == wanted) {
                return Err(IngestError::FilterNameNotFound(wanted.clone()));
            }
        }
        found.retain(|(n, _)| names.contains(n));
    }
    found.iter().map(|(_, p)| parse_task(p)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    #[default]
    Linear,
    Mlp1,
    Mlp2,
}

/// Evaluation settings. Every key is optional in the YAML file; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub embedding_dim: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub k_folds: usize,
    pub standardize_embeddings: bool,
    pub normalize_labels: bool,
    /// `false` / absent means every task in the annotation directory.
    #[serde(deserialize_with = "task_filter_value")]
    pub task_filter: Option<Vec<String>>,
    pub seed: u64,
    pub epsilon: f64,
    pub split_ratio: f64,
    pub probe_kind: ProbeKind,
    pub mlp_hidden: usize,
    pub ghost_task: bool,
    pub weighted_ranking: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            embedding_dim: 1024,
            batch_size: 64,
            epochs: 20,
            learning_rate: 0.001,
            k_folds: 40,
            standardize_embeddings: true,
            normalize_labels: true,
            task_filter: None,
            seed: 0,
            epsilon: 0.02,
            split_ratio: 0.8,
            probe_kind: ProbeKind::Linear,
            mlp_hidden: 256,
            ghost_task: false,
            weighted_ranking: true,
        }
    }
}

fn task_filter_value<'de, D>(de: D) -> std::result::Result<Option<Vec<String>>, D::Error>
where
    D: Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Flag(bool),
        Names(Vec<String>),
    }
    match Option::<Raw>::deserialize(de)? {
        None | Some(Raw::Flag(false)) => Ok(None),
        Some(Raw::Flag(true)) => Err(serde::de::Error::custom(
            "`true` is not a task list; use `false` or a list of names",
        )),
        Some(Raw::Names(names)) => Ok(Some(names)),
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "embedding_dim",
    "batch_size",
    "epochs",
    "learning_rate",
    "k_folds",
    "standardize_embeddings",
    "normalize_labels",
    "task_filter",
    "seed",
    "epsilon",
    "split_ratio",
    "probe_kind",
    "mlp_hidden",
    "ghost_task",
    "weighted_ranking",
];

impl EvalConfig {
    pub fn from_yaml_str(text: &str) -> Result<Self> {
        let doc: serde_yaml::Value =
            serde_yaml::from_str(text).map_err(|e| IngestError::InvalidValue {
                key: "<document>".into(),
                reason: e.to_string(),
            })?;
        let map = match doc {
            serde_yaml::Value::Null => return Ok(EvalConfig::default()),
            serde_yaml::Value::Mapping(map) => map,
            _ => {
                return Err(IngestError::InvalidValue {
                    key: "<document>".into(),
                    reason: "config must be a key: value mapping".into(),
                })
            }
        };
        for key in map.keys() {
            let key = key.as_str().unwrap_or("<non-string key>");
            if !CONFIG_KEYS.contains(&key) {
                return Err(IngestError::UnknownKey(key.to_string()));
            }
        }
        // Deserialise key by key so a type error names its key.
        let mut cfg = EvalConfig::default();
        for (key, value) in map {
            let key = key.as_str().unwrap_or_default().to_string();
            let mut single = serde_yaml::Mapping::new();
            single.insert(serde_yaml::Value::String(key.clone()), value);
            let partial: PartialConfig = serde_yaml::from_value(serde_yaml::Value::Mapping(single))
                .map_err(|e| IngestError::InvalidValue {
                    key: key.clone(),
                    reason: e.to_string(),
                })?;
            partial.apply(&mut cfg);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |key: &str, reason: &str| {
            Err(IngestError::InvalidValue {
                key: key.into(),
                reason: reason.into(),
            })
        };
        for (key, v) in [
            ("embedding_dim", self.embedding_dim),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("k_folds", self.k_folds),
            ("mlp_hidden", self.mlp_hidden),
        ] {
            if v == 0 {
                return invalid(key, "must be a positive integer");
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return invalid("learning_rate", "must be a positive real");
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return invalid("epsilon", "must be a positive real");
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return invalid("split_ratio", "must lie strictly between 0 and 1");
        }
        if let Some(names) = &self.task_filter {
            if names.is_empty() {
                return invalid("task_filter", "empty list; use `false` for all tasks");
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the config.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("config serialises")
    }
}

/// One-key view of the config used to attribute type errors.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialConfig {
    embedding_dim: Option<usize>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    k_folds: Option<usize>,
    standardize_embeddings: Option<bool>,
    normalize_labels: Option<bool>,
    #[serde(default, deserialize_with = "task_filter_present")]
    task_filter: Option<Option<Vec<String>>>,
    seed: Option<u64>,
    epsilon: Option<f64>,
    split_ratio: Option<f64>,
    probe_kind: Option<ProbeKind>,
    mlp_hidden: Option<usize>,
    ghost_task: Option<bool>,
    weighted_ranking: Option<bool>,
}

fn task_filter_present<'de, D>(de: D) -> std::result::Result<Option<Option<Vec<String>>>, D::Error>
where
    D: Deserializer<'de>,
{
    task_filter_value(de).map(Some)
}

impl PartialConfig {
    fn apply(self, cfg: &mut EvalConfig) {
        macro_rules! set {
            ($($field:ident),*) => { $( if let Some(v) = self.$field { cfg.$field = v; } )* };
        }
        set!(
            embedding_dim,
            batch_size,
            epochs,
            learning_rate,
            k_folds,
            standardize_embeddings,
            normalize_labels,
            task_filter,
            seed,
            epsilon,
            split_ratio,
            probe_kind,
            mlp_hidden,
            ghost_task,
            weighted_ranking
        );
    }
}

pub fn load_config(path: &Path) -> Result<EvalConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    EvalConfig::from_yaml_str(&text)
}
