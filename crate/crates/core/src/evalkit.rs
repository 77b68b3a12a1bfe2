//! Desk-scale evaluation: ranking metrics, rank correlation, per-level
//! similarity statistics, a pooling ablation harness and anchor-weight
//! inspection.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{render_token, Encoder, EncoderError};
use crate::objective::{cosine, ObjectiveError};
use crate::pooling::{ata_weights, pool, AtaDirection, PoolingConfig, PoolingError};
use crate::scalar::Scalar;
use crate::trainer::{query_text, train, InstructionMode, TrainConfig, TrainError};
use crate::triplet::TrainingTriplet;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation contract violation: {0}")]
    Contract(String),
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Pooling(#[from] PoolingError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Queries with one gold document each, over a shared corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTask {
    pub queries: Vec<String>,
    pub gold: Vec<usize>,
    pub corpus: Vec<String>,
}

impl RetrievalTask {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.queries.is_empty() || self.corpus.is_empty() {
            return Err(EvalError::Contract("retrieval task has no queries or no corpus".into()));
        }
        if self.queries.len() != self.gold.len() {
            return Err(EvalError::Contract("one gold id per query required".into()));
        }
        if let Some(g) = self.gold.iter().find(|&&g| g >= self.corpus.len()) {
            return Err(EvalError::Contract(format!(
                "gold id {g} outside corpus of {}",
                self.corpus.len()
            )));
        }
        Ok(())
    }
}

/// Model plus the settings that turn text into one vector.
#[derive(Clone, Copy)]
pub struct Embedder<'a, T> {
    pub model: &'a Encoder<T>,
    pub pooling: &'a PoolingConfig,
}

impl<T: Scalar> Embedder<'_, T> {
    pub fn embed(&self, text: &str) -> Result<Vec<T>, EvalError> {
        let out = self.model.encode_text(text)?;
        Ok(pool(&out, self.pooling)?.0)
    }

    pub fn embed_all(&self, texts: &[String]) -> Result<Vec<Vec<T>>, EvalError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// 1-based rank of each query's gold document by descending cosine. Ties
/// rank the lower corpus index first.
pub fn gold_ranks<T: Scalar>(queries: &[Vec<T>], corpus: &[Vec<T>], gold: &[usize]) -> Result<Vec<usize>, EvalError> {
    if queries.is_empty() || corpus.is_empty() || queries.len() != gold.len() {
        return Err(EvalError::Contract(
            "need queries, a corpus and one gold id per query".into(),
        ));
    }
    queries
        .iter()
        .zip(gold)
        .map(|(q, &g)| {
            let scores: Vec<T> = corpus.iter().map(|d| cosine(q, d)).collect::<Result<_, _>>()?;
            let target = *scores
                .get(g)
                .ok_or_else(|| EvalError::Contract(format!("gold id {g} outside corpus")))?;
            Ok(1 + scores
                .iter()
                .enumerate()
                .filter(|&(j, &s)| s > target || (s == target && j < g))
                .count())
        })
        .collect()
}

pub fn recall_from_ranks(ranks: &[usize], k: usize) -> Result<f64, EvalError> {
    if k == 0 || ranks.is_empty() {
        return Err(EvalError::Contract("recall needs k ≥ 1 and at least one query".into()));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Binary single-gold nDCG: the ideal DCG is 1, so each query scores
/// `1/log₂(rank+1)` inside the top `k` and 0 outside.
pub fn ndcg_from_ranks(ranks: &[usize], k: usize) -> Result<f64, EvalError> {
    if k == 0 || ranks.is_empty() {
        return Err(EvalError::Contract("nDCG needs k ≥ 1 and at least one query".into()));
    }
    let total: f64 = ranks
        .iter()
        .map(|&r| if r <= k { 1.0 / ((r + 1) as f64).log2() } else { 0.0 })
        .sum();
    Ok(total / ranks.len() as f64)
}

fn task_ranks<T: Scalar>(task: &RetrievalTask, embedder: &Embedder<T>) -> Result<Vec<usize>, EvalError> {
    task.validate()?;
    let q = embedder.embed_all(&task.queries)?;
    let d = embedder.embed_all(&task.corpus)?;
    gold_ranks(&q, &d, &task.gold)
}

pub fn recall_at_k<T: Scalar>(task: &RetrievalTask, embedder: &Embedder<T>, k: usize) -> Result<f64, EvalError> {
    recall_from_ranks(&task_ranks(task, embedder)?, k)
}

pub fn ndcg_at_k<T: Scalar>(task: &RetrievalTask, embedder: &Embedder<T>, k: usize) -> Result<f64, EvalError> {
    ndcg_from_ranks(&task_ranks(task, embedder)?, k)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman's ρ: Pearson correlation of average ranks. A constant argument
/// gives 0.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::Contract(format!(
            "lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(EvalError::Contract("spearman needs at least two points".into()));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(EvalError::Contract("spearman input contains NaN".into()));
    }
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelStat {
    pub level: usize,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GranularityReport {
    pub levels: Vec<LevelStat>,
}

impl GranularityReport {
    pub fn means(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.mean).collect()
    }

    pub fn is_strictly_decreasing(&self) -> bool {
        self.means().windows(2).all(|w| w[0] > w[1])
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("level\tmean_cosine\tstd\tcount\n");
        for l in &self.levels {
            s.push_str(&format!("{}\t{:.6}\t{:.6}\t{}\n", l.level, l.mean, l.std, l.count));
        }
        s
    }
}

/// Mean cosine between each query and its level-`k` negative, per level.
/// The standard deviation is the population one.
pub fn granularity_stats<T: Scalar>(
    data: &[TrainingTriplet],
    embedder: &Embedder<T>,
    instruction: InstructionMode,
) -> Result<GranularityReport, EvalError> {
    let Some(first) = data.first() else {
        return Err(EvalError::Contract("empty dataset".into()));
    };
    let levels = first.num_levels();
    if levels == 0 || data.iter().any(|t| t.num_levels() != levels) {
        return Err(EvalError::Contract(
            "every triplet needs the same non-zero number of negatives".into(),
        ));
    }
    let mut sims = vec![Vec::with_capacity(data.len()); levels];
    for t in data {
        let q = embedder.embed(&query_text(instruction, &t.task, &t.query))?;
        for (k, n) in t.negatives.iter().enumerate() {
            let e = embedder.embed(n)?;
            sims[k].push(cosine(&q, &e)?.to_f64().unwrap_or(f64::NAN));
        }
    }
    let levels = sims
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let n = s.len() as f64;
            let mean = s.iter().sum::<f64>() / n;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            LevelStat {
                level: k + 1,
                mean,
                std: var.sqrt(),
                count: s.len(),
            }
        })
        .collect();
    Ok(GranularityReport { levels })
}

/// Word-set Jaccard similarity.
pub fn word_jaccard(a: &str, b: &str) -> f64 {
    let a: HashSet<&str> = a.split_whitespace().collect();
    let b: HashSet<&str> = b.split_whitespace().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Held-out triplets turned into a retrieval task (queries against the
/// positives) and an STS proxy (positive vs each negative, labelled by word
/// overlap).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskBenchmark {
    pub retrieval: RetrievalTask,
    pub sts_pairs: Vec<(String, String)>,
    pub sts_labels: Vec<f64>,
}

impl DeskBenchmark {
    pub fn from_triplets(data: &[TrainingTriplet], instruction: InstructionMode) -> Result<Self, EvalError> {
        if data.is_empty() {
            return Err(EvalError::Contract("empty benchmark".into()));
        }
        let retrieval = RetrievalTask {
            queries: data
                .iter()
                .map(|t| query_text(instruction, &t.task, &t.query))
                .collect(),
            gold: (0..data.len()).collect(),
            corpus: data.iter().map(|t| t.positive.clone()).collect(),
        };
        let mut sts_pairs = Vec::new();
        let mut sts_labels = Vec::new();
        for t in data {
            for n in &t.negatives {
                sts_labels.push(word_jaccard(&t.positive, n));
                sts_pairs.push((t.positive.clone(), n.clone()));
            }
        }
        Ok(Self {
            retrieval,
            sts_pairs,
            sts_labels,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_at_1: f64,
    pub recall_at_10: f64,
    pub ndcg_at_10: f64,
    pub spearman: f64,
    pub granularity: Option<GranularityReport>,
}

impl EvalReport {
    pub fn to_tsv(&self) -> String {
        let mut s = format!(
            "metric\tvalue\nrecall@1\t{:.6}\nrecall@10\t{:.6}\nndcg@10\t{:.6}\nspearman\t{:.6}\n",
            self.recall_at_1, self.recall_at_10, self.ndcg_at_10, self.spearman
        );
        if let Some(g) = &self.granularity {
            s.push('\n');
            s.push_str(&g.to_tsv());
        }
        s
    }
}

pub fn evaluate<T: Scalar>(bench: &DeskBenchmark, embedder: &Embedder<T>) -> Result<EvalReport, EvalError> {
    let ranks = task_ranks(&bench.retrieval, embedder)?;
    let mut predicted = Vec::with_capacity(bench.sts_pairs.len());
    for (a, b) in &bench.sts_pairs {
        let (ea, eb) = (embedder.embed(a)?, embedder.embed(b)?);
        predicted.push(cosine(&ea, &eb)?.to_f64().unwrap_or(f64::NAN));
    }
    let spearman = if predicted.len() >= 2 {
        spearman(&predicted, &bench.sts_labels)?
    } else {
        0.0
    };
    Ok(EvalReport {
        recall_at_1: recall_from_ranks(&ranks, 1)?,
        recall_at_10: recall_from_ranks(&ranks, 10)?,
        ndcg_at_10: ndcg_from_ranks(&ranks, 10)?,
        spearman,
        granularity: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub pooling: String,
    pub recall_at_1: f64,
    pub ndcg_at_10: f64,
    pub spearman: f64,
    pub final_loss: f64,
}

pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut s = String::from("pooling\trecall@1\tndcg@10\tspearman\tfinal_loss\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            r.pooling, r.recall_at_1, r.ndcg_at_10, r.spearman, r.final_loss
        ));
    }
    s
}

fn pooling_label(p: &PoolingConfig) -> String {
    let mut s = p.method.name().to_string();
    if p.method == crate::pooling::PoolingMethod::Ata {
        if p.direction == AtaDirection::Literal {
            s.push_str("/literal");
        }
        if p.stop_gradient {
            s.push_str("/stopgrad");
        }
    }
    s
}

/// Trains one model per pooling config from identical seeds and data, then
/// evaluates each on the same benchmark.
pub fn pooling_ablation<T: Scalar>(
    configs: &[PoolingConfig],
    base: &TrainConfig,
    train_set: &[TrainingTriplet],
    bench: &DeskBenchmark,
) -> Result<Vec<AblationRow>, EvalError> {
    if configs.len() < 2 {
        return Err(EvalError::Config(format!(
            "ablation needs at least two pooling configs, got {}",
            configs.len()
        )));
    }
    configs
        .iter()
        .map(|p| {
            let cfg = TrainConfig {
                pooling: *p,
                ..base.clone()
            };
            let run = train::<T>(&cfg, train_set)?;
            let report = evaluate(
                bench,
                &Embedder {
                    model: &run.model,
                    pooling: p,
                },
            )?;
            Ok(AblationRow {
                pooling: pooling_label(p),
                recall_at_1: report.recall_at_1,
                ndcg_at_10: report.ndcg_at_10,
                spearman: report.spearman,
                final_loss: run.manifest.loss_log.last().map_or(f64::NAN, |e| e.loss),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenWeight {
    pub position: usize,
    pub token: String,
    pub raw: f64,
    pub normalized: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightReport {
    pub rows: Vec<TokenWeight>,
    /// Last-layer attention summed over heads, `[query][key]`.
    pub attention: Vec<Vec<f64>>,
}

impl WeightReport {
    pub fn to_tsv(&self, with_attention: bool) -> String {
        let mut s = String::from("position\ttoken\traw\tnormalized\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{:.9}\t{:.9}\n",
                r.position, r.token, r.raw, r.normalized
            ));
        }
        if with_attention {
            s.push_str("\nattention (rows: queries, columns: keys, summed over heads)\n");
            for row in &self.attention {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
                s.push_str(&cells.join("\t"));
                s.push('\n');
            }
        }
        s
    }

    /// Position carrying the largest normalized weight.
    pub fn argmax(&self) -> usize {
        self.rows
            .iter()
            .max_by(|a, b| a.normalized.total_cmp(&b.normalized))
            .map_or(0, |r| r.position)
    }
}

pub fn inspect_weights<T: Scalar>(
    model: &Encoder<T>,
    text: &str,
    direction: AtaDirection,
) -> Result<WeightReport, EvalError> {
    let tokens = model.tokenize(text);
    let out = model.encode(&tokens)?;
    let w = ata_weights(&out.attention, direction)?;
    let shape = out.attention.shape();
    let (h, k) = (shape[0], shape[1]);
    let data = out.attention.data();
    let mut attention = vec![vec![0.0; k]; k];
    for head in 0..h {
        for (i, row) in attention.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell += data[(head * k + i) * k + j].to_f64().unwrap_or(f64::NAN);
            }
        }
    }
    let rows = tokens
        .ids()
        .iter()
        .enumerate()
        .map(|(i, &id)| TokenWeight {
            position: i,
            token: render_token(id),
            raw: w.raw[i].to_f64().unwrap_or(f64::NAN),
            normalized: w.normalized[i].to_f64().unwrap_or(f64::NAN),
        })
        .collect();
    Ok(WeightReport { rows, attention })
}
