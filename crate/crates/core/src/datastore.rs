//! Line-delimited dataset files, pair files, and source mixing.
//!
//! Dataset record, one JSON object per line, fields in this order:
//! `user_query`, `positive_document`, `hard_negative_document`
//! (list of `{similarity_level, text}`, hardest first), `source`,
//! `task_category`, `task_description`.
//!
//! Pair record: `{"query": ..., "positive": ...}`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::curriculum::DEFAULT_NUM_LEVELS;
use crate::seeding::rng_for;
use crate::synth::parse::{negatives_field, string_field};
use crate::triplet::{similarity_levels, Source, TaskCategory, TaskSpec, TrainingTriplet, ValidationError, Violation};

#[derive(Debug, Error)]
pub enum DatastoreError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {error}", path.display())]
    Invalid {
        path: PathBuf,
        line: usize,
        error: ValidationError,
    },
    #[error("refusing to write an invalid triplet (item {index}): {error}")]
    InvalidTriplet { index: usize, error: ValidationError },
    #[error("config: {0}")]
    Config(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatastoreError + '_ {
    move |source| DatastoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedNegative {
    pub similarity_level: String,
    pub text: String,
}

/// On-disk form of a triplet.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub user_query: String,
    pub positive_document: String,
    pub hard_negative_document: Vec<TaggedNegative>,
    pub source: Source,
    pub task_category: TaskCategory,
    pub task_description: String,
}

impl From<&TrainingTriplet> for DatasetRecord {
    fn from(t: &TrainingTriplet) -> Self {
        Self {
            user_query: t.query.clone(),
            positive_document: t.positive.clone(),
            hard_negative_document: similarity_levels(t.negatives.len())
                .into_iter()
                .zip(&t.negatives)
                .map(|(level, text)| TaggedNegative {
                    similarity_level: level.into(),
                    text: text.clone(),
                })
                .collect(),
            source: t.source,
            task_category: t.task.category,
            task_description: t.task.description.clone(),
        }
    }
}

/// Per-violation counts from a lenient read.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadReport {
    pub lines: usize,
    pub accepted: usize,
    pub rejected: BTreeMap<String, usize>,
}

impl ReadReport {
    pub fn rejected_total(&self) -> usize {
        self.rejected.values().sum()
    }

    fn reject(&mut self, kind: Violation) {
        *self.rejected.entry(kind.name().to_string()).or_default() += 1;
    }
}

pub fn record_to_line(t: &TrainingTriplet) -> String {
    serde_json::to_string(&DatasetRecord::from(t)).expect("records always serialize")
}

fn enum_field<T: std::str::FromStr>(map: &Map<String, Value>, key: &str) -> Result<T, ValidationError> {
    let raw = string_field(map, key)?;
    raw.parse()
        .map_err(|_| ValidationError::new(Violation::UnknownValue, format!("{key} {raw:?} is not recognized")))
}

/// Parses and validates one dataset line.
pub fn parse_record(line: &str, num_levels: usize) -> Result<TrainingTriplet, ValidationError> {
    let map = match serde_json::from_str::<Value>(line) {
        Ok(Value::Object(map)) => map,
        Ok(_) => {
            return Err(ValidationError::new(
                Violation::MalformedJson,
                "line is not a JSON object",
            ))
        }
        Err(e) => return Err(ValidationError::new(Violation::MalformedJson, e.to_string())),
    };
    let query = string_field(&map, "user_query")?;
    let positive = string_field(&map, "positive_document")?;
    let negatives = negatives_field(&map, num_levels)?;
    let source = enum_field(&map, "source")?;
    let category = enum_field(&map, "task_category")?;
    // Older files may lack the description; fall back to the category label.
    let description = match map.get("task_description") {
        None => category_default_description(category),
        Some(_) => string_field(&map, "task_description")?,
    };
    let triplet = TrainingTriplet {
        query,
        positive,
        negatives,
        source,
        task: TaskSpec { category, description },
    };
    triplet.validate(num_levels)?;
    Ok(triplet)
}

fn category_default_description(c: TaskCategory) -> String {
    c.label().to_string()
}

/// Writes one record per line and returns the count. Nothing is written if
/// any triplet is invalid.
pub fn write_dataset(triplets: &[TrainingTriplet], path: &Path) -> Result<usize, DatastoreError> {
    for (index, t) in triplets.iter().enumerate() {
        t.validate(t.num_levels().max(1))
            .map_err(|error| DatastoreError::InvalidTriplet { index, error })?;
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for t in triplets {
        writeln!(w, "{}", record_to_line(t)).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(triplets.len())
}

fn read_lines<T>(
    path: &Path,
    strict: bool,
    mut parse: impl FnMut(&str) -> Result<T, ValidationError>,
) -> Result<(Vec<T>, ReadReport), DatastoreError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut report = ReadReport::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        match parse(&line) {
            Ok(v) => {
                report.accepted += 1;
                out.push(v);
            }
            Err(error) if strict => {
                return Err(DatastoreError::Invalid {
                    path: path.to_path_buf(),
                    line: i + 1,
                    error,
                })
            }
            Err(error) => report.reject(error.kind),
        }
    }
    Ok((out, report))
}

/// Reads a dataset with the default number of levels.
pub fn read_dataset(path: &Path, strict: bool) -> Result<(Vec<TrainingTriplet>, ReadReport), DatastoreError> {
    read_dataset_with_levels(path, strict, DEFAULT_NUM_LEVELS)
}

/// Strict reads stop at the first invalid line and name it; lenient reads
/// skip invalid lines and count them by violation.
pub fn read_dataset_with_levels(
    path: &Path,
    strict: bool,
    num_levels: usize,
) -> Result<(Vec<TrainingTriplet>, ReadReport), DatastoreError> {
    read_lines(path, strict, |line| parse_record(line, num_levels))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub query: String,
    pub positive: String,
}

pub fn parse_pair(line: &str) -> Result<(String, String), ValidationError> {
    let map = match serde_json::from_str::<Value>(line) {
        Ok(Value::Object(map)) => map,
        Ok(_) => {
            return Err(ValidationError::new(
                Violation::MalformedJson,
                "line is not a JSON object",
            ))
        }
        Err(e) => return Err(ValidationError::new(Violation::MalformedJson, e.to_string())),
    };
    let query = string_field(&map, "query")?;
    let positive = string_field(&map, "positive")?;
    if query.trim().is_empty() || positive.trim().is_empty() {
        return Err(ValidationError::new(
            Violation::EmptyText,
            "query and positive must be non-empty",
        ));
    }
    Ok((query, positive))
}

pub fn read_pairs(path: &Path, strict: bool) -> Result<(Vec<(String, String)>, ReadReport), DatastoreError> {
    read_lines(path, strict, parse_pair)
}

pub fn write_pairs(pairs: &[(String, String)], path: &Path) -> Result<usize, DatastoreError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for (query, positive) in pairs {
        let line = serde_json::to_string(&PairRecord {
            query: query.clone(),
            positive: positive.clone(),
        })
        .expect("pairs always serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(pairs.len())
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String, DatastoreError> {
    let mut file = File::open(path).map_err(io_err(path))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixInput {
    pub path: PathBuf,
    /// Sampling ratio: 1 keeps every record once, 0.5 keeps a seeded half,
    /// 2 repeats the source twice.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSpec {
    pub inputs: Vec<MixInput>,
    pub seed: u64,
    pub train_fraction: f64,
    pub eval_fraction: f64,
    #[serde(default = "default_levels")]
    pub num_levels: usize,
}

fn default_levels() -> usize {
    DEFAULT_NUM_LEVELS
}

const FRACTION_TOLERANCE: f64 = 1e-9;

fn check_split(train_fraction: f64, eval_fraction: f64) -> Result<(), DatastoreError> {
    let ok = (0.0..=1.0).contains(&train_fraction) && (0.0..=1.0).contains(&eval_fraction);
    if !ok || (train_fraction + eval_fraction - 1.0).abs() > FRACTION_TOLERANCE {
        return Err(DatastoreError::Config(format!(
            "split fractions must lie in [0, 1] and sum to 1, got ({train_fraction}, {eval_fraction})"
        )));
    }
    Ok(())
}

impl MixSpec {
    pub fn validate(&self) -> Result<(), DatastoreError> {
        if self.inputs.is_empty() {
            return Err(DatastoreError::Config("no mix inputs".into()));
        }
        for input in &self.inputs {
            if !(input.weight.is_finite() && input.weight > 0.0) {
                return Err(DatastoreError::Config(format!(
                    "weight for {} must be positive, got {}",
                    input.path.display(),
                    input.weight
                )));
            }
        }
        check_split(self.train_fraction, self.eval_fraction)
    }
}

/// Resamples each source by its weight, shuffles the union with a seeded
/// generator, and cuts it at `round(train_fraction · total)`.
pub fn mix_sets(
    sources: &[(Vec<TrainingTriplet>, f64)],
    seed: u64,
    train_fraction: f64,
    eval_fraction: f64,
) -> Result<(Vec<TrainingTriplet>, Vec<TrainingTriplet>), DatastoreError> {
    if sources.is_empty() {
        return Err(DatastoreError::Config("no mix inputs".into()));
    }
    check_split(train_fraction, eval_fraction)?;
    let mut pool = Vec::new();
    for (i, (records, weight)) in sources.iter().enumerate() {
        if !(weight.is_finite() && *weight > 0.0) {
            return Err(DatastoreError::Config(format!(
                "weight for input {i} must be positive, got {weight}"
            )));
        }
        let mut rng = rng_for(seed, &format!("mix/source/{i}"));
        let wanted = (weight * records.len() as f64).round() as usize;
        let whole = wanted / records.len().max(1);
        for _ in 0..whole {
            pool.extend(records.iter().cloned());
        }
        let rest = wanted - whole * records.len();
        let mut picks: Vec<usize> =
            rand::seq::index::sample(&mut rng, records.len(), rest.min(records.len())).into_vec();
        picks.sort_unstable();
        pool.extend(picks.into_iter().map(|j| records[j].clone()));
    }
    if pool.is_empty() {
        return Err(DatastoreError::Config("mix inputs are empty".into()));
    }
    pool.shuffle(&mut rng_for(seed, "mix/shuffle"));
    let cut = (train_fraction * pool.len() as f64).round() as usize;
    let eval = pool.split_off(cut.min(pool.len()));
    Ok((pool, eval))
}

/// Reads every input strictly, then mixes and splits.
pub fn mix_and_split(spec: &MixSpec) -> Result<(Vec<TrainingTriplet>, Vec<TrainingTriplet>), DatastoreError> {
    spec.validate()?;
    let mut sources = Vec::with_capacity(spec.inputs.len());
    for input in &spec.inputs {
        let (records, _) = read_dataset_with_levels(&input.path, true, spec.num_levels)?;
        sources.push((records, input.weight));
    }
    mix_sets(&sources, spec.seed, spec.train_fraction, spec.eval_fraction)
}
