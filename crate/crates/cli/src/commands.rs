//! Subcommand implementations. Each writes its artifacts under the run's
//! output directory next to an echo of the resolved config.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hardneg::datastore::{file_digest, mix_sets, read_dataset_with_levels, read_pairs, write_dataset, ReadReport};
use hardneg::encoder::{load_checkpoint, save_checkpoint, Encoder};
use hardneg::evalkit::{
    ablation_tsv, evaluate, granularity_stats, inspect_weights, pooling_ablation, DeskBenchmark, Embedder,
};
use hardneg::pooling::{AtaDirection, PoolingConfig};
use hardneg::synth::{augment_pairs, run_synthesis, ChatBackend, HttpBackend, MockBackend, SynthReport};
use hardneg::trainer::{train_from, CheckpointRef, DatasetDigest, RunManifest, TrainError};
use hardneg::triplet::TrainingTriplet;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{BackendKind, EvalMode, RunConfig};
use crate::error::CliError;

pub const MANIFEST_FORMAT: u32 = 1;
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOSS_LOG_FILE: &str = "loss_log.tsv";

/// The run manifest: resolved config plus the trainer's record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CliManifest {
    pub format_version: u32,
    pub command: String,
    pub config: RunConfig,
    pub run: RunManifest,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

/// Creates the output directory and echoes the config into it.
fn prepare_output(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let out = cfg.out_dir();
    create_dir(&out)?;
    write_file(&out.join(RESOLVED_CONFIG), cfg.to_toml())?;
    Ok(out)
}

fn backend(cfg: &RunConfig) -> Box<dyn ChatBackend> {
    match cfg.backend.kind {
        BackendKind::Mock => Box::new(MockBackend::new(cfg.backend.seed)),
        BackendKind::Http => Box::new(HttpBackend::new(cfg.backend.endpoint.clone())),
    }
}

fn real_sleep(d: std::time::Duration) {
    std::thread::sleep(d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOutcome {
    pub dataset: PathBuf,
    pub records: usize,
    pub report: SynthReport,
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthOutcome> {
    cfg.synth.validate()?;
    let out = prepare_output(cfg)?;
    let backend = backend(cfg);
    let (triplets, report) = run_synthesis(&cfg.synth, backend.as_ref(), &real_sleep)?;
    write_file(&out.join("synth_report.json"), to_json(&report))?;
    if triplets.is_empty() {
        return Err(CliError::Validation(format!("no records accepted out of {}", report.requested)).into());
    }
    let dataset = out.join("synth.jsonl");
    let records = write_dataset(&triplets, &dataset)?;
    Ok(SynthOutcome {
        dataset,
        records,
        report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentOutcome {
    pub dataset: PathBuf,
    pub records: usize,
    /// Pair-file lines skipped while reading.
    pub read: ReadReport,
    pub report: SynthReport,
}

pub fn cmd_augment(cfg: &RunConfig, pairs: &Path, strict: bool) -> Result<AugmentOutcome> {
    cfg.synth.validate()?;
    let (pairs, read) = read_pairs(pairs, strict)?;
    let out = prepare_output(cfg)?;
    let backend = backend(cfg);
    let (triplets, report) = augment_pairs(&pairs, &cfg.synth, backend.as_ref(), &real_sleep)?;
    let outcome_report = serde_json::json!({ "read": read, "augment": report });
    write_file(&out.join("augment_report.json"), to_json(&outcome_report))?;
    if triplets.is_empty() {
        return Err(CliError::Validation(format!("no pairs augmented out of {}", read.lines)).into());
    }
    let dataset = out.join("augmented.jsonl");
    let records = write_dataset(&triplets, &dataset)?;
    Ok(AugmentOutcome {
        dataset,
        records,
        read,
        report,
    })
}

/// Train and eval splits plus a digest per input file.
struct Splits {
    train: Vec<TrainingTriplet>,
    eval: Vec<TrainingTriplet>,
    inputs: Vec<DatasetDigest>,
}

fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    if cfg.data.inputs.is_empty() {
        return Err(CliError::Config("data.inputs is empty: no dataset path configured".into()).into());
    }
    let spec = cfg.mix_spec();
    spec.validate()?;
    let mut sources = Vec::with_capacity(spec.inputs.len());
    let mut inputs = Vec::with_capacity(spec.inputs.len());
    for (input, written) in spec.inputs.iter().zip(&cfg.data.inputs) {
        let (records, _) = read_dataset_with_levels(&input.path, true, spec.num_levels)?;
        inputs.push(DatasetDigest {
            name: written.path.display().to_string(),
            records: records.len(),
            sha256: file_digest(&input.path)?,
        });
        sources.push((records, input.weight));
    }
    let (train, eval) = mix_sets(&sources, spec.seed, spec.train_fraction, spec.eval_fraction)?;
    Ok(Splits { train, eval, inputs })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub manifest_path: PathBuf,
    pub loss_log_path: PathBuf,
    pub checkpoint: PathBuf,
    pub manifest: CliManifest,
}

impl TrainOutcome {
    pub fn final_checkpoint(&self) -> &CheckpointRef {
        self.manifest
            .run
            .checkpoints
            .last()
            .expect("training records a final checkpoint")
    }
}

fn write_manifest(out: &Path, cfg: &RunConfig, run: RunManifest) -> Result<CliManifest, CliError> {
    let manifest = CliManifest {
        format_version: MANIFEST_FORMAT,
        command: "train".into(),
        config: cfg.clone(),
        run,
    };
    write_file(&out.join(MANIFEST_FILE), to_json(&manifest))?;
    write_file(&out.join(LOSS_LOG_FILE), manifest.run.loss_log_text())?;
    Ok(manifest)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
    cfg.train.schedule()?;
    let splits = load_splits(cfg)?;
    let out = prepare_output(cfg)?;
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let model: Encoder<f64> = Encoder::init(cfg.train.encoder.clone())?;
    let mut hook = |step: usize, model: &Encoder<f64>| -> Result<Option<CheckpointRef>, TrainError> {
        let rel = format!("checkpoints/step-{step:06}.ckpt");
        let bytes = save_checkpoint(model, &out.join(&rel)).map_err(|e| TrainError::Hook(e.to_string()))?;
        Ok(Some(CheckpointRef {
            path: rel,
            sha256: hex::encode(Sha256::digest(&bytes)),
        }))
    };
    let extra = |run: &mut RunManifest| {
        run.datasets.push(DatasetDigest {
            name: "eval".into(),
            records: splits.eval.len(),
            sha256: hardneg::trainer::dataset_digest(&splits.eval),
        });
        run.datasets.extend(splits.inputs.iter().cloned());
    };
    let run = match train_from(model, &cfg.train, &splits.train, &mut hook) {
        Ok(run) => run,
        Err(TrainError::NonFinite { step, mut manifest }) => {
            extra(&mut manifest);
            write_manifest(&out, cfg, (*manifest).clone())?;
            return Err(TrainError::NonFinite { step, manifest }).context("training aborted; partial manifest written");
        }
        Err(e) => return Err(e.into()),
    };
    let mut record = run.manifest;
    extra(&mut record);
    let manifest = write_manifest(&out, cfg, record)?;
    let checkpoint = out.join(&manifest.run.checkpoints.last().expect("final checkpoint").path);
    Ok(TrainOutcome {
        manifest_path: out.join(MANIFEST_FILE),
        loss_log_path: out.join(LOSS_LOG_FILE),
        checkpoint,
        manifest,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub mode: EvalMode,
    pub report_path: PathBuf,
    /// The tab-separated report as written.
    pub text: String,
    pub json: serde_json::Value,
}

fn eval_set(cfg: &RunConfig) -> Result<(Vec<TrainingTriplet>, Option<Vec<TrainingTriplet>>)> {
    if let Some(p) = &cfg.eval.dataset {
        let (records, _) = read_dataset_with_levels(&cfg.resolve(p), true, cfg.train.num_levels)?;
        return Ok((records, None));
    }
    let splits = load_splits(cfg)?;
    Ok((splits.eval, Some(splits.train)))
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, mode: Option<EvalMode>) -> Result<EvalOutcome> {
    let mode = mode.unwrap_or(cfg.eval.mode);
    let (eval, train) = eval_set(cfg)?;
    if eval.is_empty() {
        return Err(CliError::Config("evaluation set is empty; set eval.dataset or data.eval_fraction".into()).into());
    }
    let instruction = cfg.train.instruction;
    let (text, json) = match mode {
        EvalMode::Standard | EvalMode::Granularity => {
            let path = checkpoint.ok_or_else(|| CliError::Config(format!("{mode:?} evaluation needs --checkpoint")))?;
            let model: Encoder<f64> = load_checkpoint(path)?;
            let emb = Embedder {
                model: &model,
                pooling: &cfg.train.pooling,
            };
            let granularity = granularity_stats(&eval, &emb, instruction)?;
            if mode == EvalMode::Granularity {
                (granularity.to_tsv(), serde_json::to_value(&granularity)?)
            } else {
                let bench = DeskBenchmark::from_triplets(&eval, instruction)?;
                let mut report = evaluate(&bench, &emb)?;
                report.granularity = Some(granularity);
                (report.to_tsv(), serde_json::to_value(&report)?)
            }
        }
        EvalMode::Ablation => {
            let configs: Vec<PoolingConfig> = cfg
                .eval
                .poolings
                .iter()
                .map(|&method| PoolingConfig {
                    method,
                    ..cfg.train.pooling
                })
                .collect();
            let train = match train {
                Some(t) => t,
                None => load_splits(cfg)?.train,
            };
            let bench = DeskBenchmark::from_triplets(&eval, instruction)?;
            let rows = pooling_ablation::<f64>(&configs, &cfg.train, &train, &bench)?;
            (ablation_tsv(&rows), serde_json::to_value(&rows)?)
        }
    };
    let out = prepare_output(cfg)?;
    let name = match mode {
        EvalMode::Standard => "eval_standard",
        EvalMode::Granularity => "eval_granularity",
        EvalMode::Ablation => "eval_ablation",
    };
    let report_path = out.join(format!("{name}.tsv"));
    write_file(&report_path, &text)?;
    write_file(&out.join(format!("{name}.json")), to_json(&json))?;
    Ok(EvalOutcome {
        mode,
        report_path,
        text,
        json,
    })
}

pub fn cmd_inspect(checkpoint: &Path, text: &str, direction: AtaDirection, attention: bool) -> Result<String> {
    let model: Encoder<f64> = load_checkpoint(checkpoint)?;
    Ok(inspect_weights(&model, text, direction)?.to_tsv(attention))
}
