//! Report bundle: JSONL metrics, CSV summaries and SVG charts.

use std::collections::BTreeMap;
use std::path::Path;

use groundlab_core::harness::RunRecord;
use groundlab_core::metrics::mask_iou;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, LabResult};
use crate::run::{jsonl_line, MaskDumpEntry};
use crate::svg;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const FINAL_METRICS_FILE: &str = "metrics.jsonl";
pub const EPOCHS_FILE: &str = "epochs.jsonl";
pub const LOSS_PLOT: &str = "loss_curves.svg";
pub const SHIFT_PLOT: &str = "iid_vs_ood.svg";
pub const IOU_PLOT: &str = "grounding_iou.svg";

/// One final evaluation of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalRow {
    pub run: String,
    pub method: String,
    pub seed: u64,
    pub split: String,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub run: String,
    pub method: String,
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

/// Mean and population standard deviation per (method, split).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub split: String,
    pub runs: usize,
    pub accuracy_mean: Option<f64>,
    pub accuracy_std: Option<f64>,
    pub iou_mean: Option<f64>,
    pub iou_std: Option<f64>,
}

/// Per-instance IoU values from a run's mask dumps, keyed by split.
pub type MaskDumps = BTreeMap<String, Vec<MaskDumpEntry>>;

pub struct ReportInput {
    pub name: String,
    pub record: RunRecord,
    pub masks: MaskDumps,
}

pub fn final_rows(inputs: &[ReportInput]) -> Vec<FinalRow> {
    inputs
        .iter()
        .flat_map(|r| {
            r.record.final_metrics.iter().map(move |m| FinalRow {
                run: r.name.clone(),
                method: r.record.config.method.name().into(),
                seed: r.record.config.seed,
                split: m.split.clone(),
                accuracy: m.accuracy,
                precision: m.grounding.map(|g| g.precision),
                recall: m.grounding.map(|g| g.recall),
                iou: m.grounding.map(|g| g.iou),
            })
        })
        .collect()
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

pub fn summarize(rows: &[FinalRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String), Vec<&FinalRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.method.clone(), r.split.clone())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((method, split), rs)| {
            let acc: Vec<f64> = rs.iter().filter_map(|r| r.accuracy).collect();
            let iou: Vec<f64> = rs.iter().filter_map(|r| r.iou).collect();
            let (accuracy_mean, accuracy_std) = mean_std(&acc);
            let (iou_mean, iou_std) = mean_std(&iou);
            SummaryRow { method, split, runs: rs.len(), accuracy_mean, accuracy_std, iou_mean, iou_std }
        })
        .collect()
}

fn write_csv(path: &Path, rows: &[SummaryRow]) -> LabResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| LabError::format(e.to_string()))?;
    w.write_record(["method", "split", "runs", "accuracy_mean", "accuracy_std", "iou_mean", "iou_std"])
        .map_err(|e| LabError::format(e.to_string()))?;
    let f = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.split.clone(),
            r.runs.to_string(),
            f(r.accuracy_mean),
            f(r.accuracy_std),
            f(r.iou_mean),
            f(r.iou_std),
        ])
        .map_err(|e| LabError::format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> LabResult<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&jsonl_line(r)?);
    }
    std::fs::write(path, text).map_err(LabError::file(path))
}

/// Writes the full bundle into `out`. Inputs are ordered by run name so the
/// bundle depends only on the set of records.
pub fn write_report(inputs: &mut [ReportInput], out: &Path) -> LabResult<Vec<SummaryRow>> {
    std::fs::create_dir_all(out).map_err(LabError::file(out))?;
    inputs.sort_by(|a, b| a.name.cmp(&b.name));
    let finals = final_rows(inputs);
    write_jsonl(&out.join(FINAL_METRICS_FILE), &finals)?;
    let epochs: Vec<EpochRow> = inputs
        .iter()
        .flat_map(|r| {
            r.record.epochs.iter().map(move |e| EpochRow {
                run: r.name.clone(),
                method: r.record.config.method.name().into(),
                seed: r.record.config.seed,
                epoch: e.epoch,
                train_loss: e.train.losses.get("total").copied(),
                val_accuracy: e.val.as_ref().and_then(|v| v.accuracy),
            })
        })
        .collect();
    write_jsonl(&out.join(EPOCHS_FILE), &epochs)?;
    let summary = summarize(&finals);
    write_csv(&out.join(SUMMARY_FILE), &summary)?;

    let curves: Vec<(String, Vec<(f64, f64)>)> = inputs
        .iter()
        .map(|r| {
            let pts = r
                .record
                .epochs
                .iter()
                .filter_map(|e| e.train.losses.get("total").map(|&l| (e.epoch as f64, l)))
                .collect();
            (r.name.clone(), pts)
        })
        .collect();
    std::fs::write(out.join(LOSS_PLOT), svg::line_chart("Training loss", "epoch", "mean loss", &curves))?;

    let methods: Vec<String> = {
        let mut m: Vec<String> = summary.iter().map(|s| s.method.clone()).collect();
        m.dedup();
        m
    };
    let splits = ["test_iid", "test_ood"];
    let groups: Vec<(String, Vec<f64>)> = methods
        .iter()
        .map(|m| {
            let vals = splits
                .iter()
                .map(|sp| {
                    summary
                        .iter()
                        .find(|s| &s.method == m && s.split == *sp)
                        .and_then(|s| s.accuracy_mean)
                        .unwrap_or(f64::NAN)
                })
                .collect();
            (m.clone(), vals)
        })
        .collect();
    let split_names: Vec<String> = splits.iter().map(|s| s.to_string()).collect();
    std::fs::write(out.join(SHIFT_PLOT), svg::grouped_bars("IID vs OOD accuracy", "accuracy", &split_names, &groups))?;

    let mut per_method: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in inputs.iter() {
        let values = iou_values(r);
        if !values.is_empty() {
            per_method.entry(r.record.config.method.name().into()).or_default().extend(values);
        }
    }
    let hist: Vec<(String, Vec<f64>)> = per_method.into_iter().collect();
    std::fs::write(out.join(IOU_PLOT), svg::histogram("Grounding IoU (test_ood)", "IoU", &hist, 10))?;
    Ok(summary)
}

/// Per-instance OOD IoU from a mask dump, else the run's mean IoU.
fn iou_values(r: &ReportInput) -> Vec<f64> {
    if let Some(entries) = r.masks.get("test_ood") {
        return entries
            .iter()
            .filter_map(|e| {
                let pred = e.predicted_causal.as_ref()?;
                let k = r.record.data_config.clips;
                let to_mask = |idx: &[usize]| (0..k).map(|i| idx.contains(&i)).collect::<Vec<_>>();
                Some(mask_iou(&to_mask(pred), &to_mask(&e.truth_causal)))
            })
            .collect();
    }
    r.record.final_metrics.iter().filter(|m| m.split == "test_ood").filter_map(|m| m.grounding.map(|g| g.iou)).collect()
}
