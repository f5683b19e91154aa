//! Run directories: training with persisted metrics, evaluation, mask dumps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use groundlab_core::harness::{self, Checkpoint, EpochMetrics, MetricsRecord, RunConfig, RunRecord, RunStatus};
use groundlab_core::models::Inference;
use groundlab_core::rationalizer::Rationale;
use groundlab_core::synthgen::{generate_dataset, DatasetBundle, Split};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::to_toml;
use crate::dataset::load_dataset;
use crate::error::{LabError, LabResult};
use crate::report::{MaskDumps, ReportInput};

/// Environment variable naming the root directory for run outputs.
pub const OUT_ENV: &str = "GROUNDLAB_OUT";
pub const DEFAULT_OUT: &str = "runs";

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RECORD_FILE: &str = "record.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.glc";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from)
}

pub fn default_run_name(config: &RunConfig) -> String {
    format!("{}-seed{}", config.method.name(), config.seed)
}

/// The dataset named by the config, or one generated from `config.data`.
pub fn resolve_dataset(config: &RunConfig) -> LabResult<DatasetBundle> {
    match &config.dataset {
        Some(path) => load_dataset(Path::new(path)),
        None => Ok(generate_dataset(&config.data)?),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> LabResult<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(LabError::file(path))
}

pub fn jsonl_line<T: Serialize>(value: &T) -> LabResult<String> {
    Ok(serde_json::to_string(value)? + "\n")
}

/// Trains into `dir`: `config.toml`, `metrics.jsonl` (one epoch per line, flushed
/// as training proceeds), `checkpoint.glc` and `record.json`.
pub fn train_to_dir(config: &RunConfig, data: &DatasetBundle, dir: &Path, progress: bool) -> LabResult<RunRecord> {
    std::fs::create_dir_all(dir).map_err(LabError::file(dir))?;
    std::fs::write(dir.join(CONFIG_FILE), to_toml(config)?).map_err(LabError::file(dir.join(CONFIG_FILE)))?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(LabError::file(&metrics_path))?);
    let mut write_err: Option<LabError> = None;
    let started = Instant::now();
    let outcome = harness::train(config, data, |epoch: &EpochMetrics| {
        if progress {
            eprintln!("{}", progress_line(epoch));
        }
        if write_err.is_none() {
            if let Err(e) = jsonl_line(epoch).and_then(|l| Ok(metrics.write_all(l.as_bytes()).and_then(|_| metrics.flush())?)) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let mut record = outcome.record;
    record.wall_clock_secs = Some(started.elapsed().as_secs_f64());
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&Checkpoint::of(&outcome.model), &ckpt_path)?;
    record.checkpoint = Some(CHECKPOINT_FILE.to_string());
    if record.status == RunStatus::Completed && !data.test_ood.is_empty() {
        let predictions = harness::predict_split(&outcome.model, data, Split::TestOod)?;
        write_json(&dir.join(masks_file(Split::TestOod)), &mask_dump(data, Split::TestOod, &predictions))?;
    }
    write_json(&dir.join(RECORD_FILE), &record)?;
    Ok(record)
}

fn progress_line(e: &EpochMetrics) -> String {
    let loss = e.train.losses.get("total").copied().unwrap_or(f64::NAN);
    match e.val.as_ref().and_then(|v| v.accuracy) {
        Some(acc) => format!("epoch {:>3}  loss {loss:.4}  val acc {acc:.4}", e.epoch),
        None => format!("epoch {:>3}  loss {loss:.4}", e.epoch),
    }
}

/// One line of a mask dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskDumpEntry {
    pub id: String,
    pub answer: usize,
    pub predicted: usize,
    pub truth_causal: Vec<usize>,
    pub predicted_causal: Option<Vec<usize>>,
    pub p_c: Option<Vec<f64>>,
    pub rationale: Option<Rationale>,
}

pub fn mask_dump(data: &DatasetBundle, split: Split, predictions: &[Inference]) -> Vec<MaskDumpEntry> {
    data.split(split)
        .iter()
        .zip(predictions)
        .map(|(s, p)| MaskDumpEntry {
            id: s.video.id.clone(),
            answer: s.question.answer,
            predicted: p.answer,
            truth_causal: s.video.causal_positions(),
            predicted_causal: p.causal_mask.as_ref().map(|m| (0..m.len()).filter(|&k| m[k]).collect()),
            p_c: p.p_c.clone(),
            rationale: p.rationale.clone(),
        })
        .collect()
}

/// Evaluates a checkpoint on `split`, optionally writing a mask dump.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    data: &DatasetBundle,
    split: Split,
    dump: Option<&Path>,
) -> LabResult<MetricsRecord> {
    let model = load_checkpoint(checkpoint)?.restore()?;
    let predictions = harness::predict_split(&model, data, split)?;
    if let Some(path) = dump {
        write_json(path, &mask_dump(data, split, &predictions))?;
    }
    Ok(harness::summarize(data, split, &predictions))
}

pub fn masks_file(split: Split) -> String {
    format!("masks_{}.json", split.name())
}

/// Reads `record.json` (and any mask dumps) from `dirs` and their immediate
/// subdirectories.
pub fn collect_runs(dirs: &[PathBuf]) -> LabResult<Vec<ReportInput>> {
    let mut found = Vec::new();
    for dir in dirs {
        let mut candidates = vec![dir.clone()];
        if dir.is_dir() {
            let mut subs: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(LabError::file(dir))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            subs.sort();
            candidates.extend(subs);
        }
        for c in candidates {
            let path = c.join(RECORD_FILE);
            if !path.is_file() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(LabError::file(&path))?;
            let record: RunRecord = serde_json::from_str(&text)?;
            let mut masks = MaskDumps::new();
            for split in Split::ALL {
                let mp = c.join(masks_file(split));
                if mp.is_file() {
                    let text = std::fs::read_to_string(&mp).map_err(LabError::file(&mp))?;
                    masks.insert(split.name().to_string(), serde_json::from_str(&text)?);
                }
            }
            let name = c.file_name().map_or_else(|| c.display().to_string(), |n| n.to_string_lossy().into_owned());
            found.push(ReportInput { name, record, masks });
        }
    }
    Ok(found)
}
