//! Training loop, evaluation and run records.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::intervention::MemoryBank;
use crate::metrics::{accuracy, mean_mask_metrics, GroundingMetrics};
use crate::objectives::LossWeights;
use crate::models::{DataShape, Inference, LossParts, Method, Model, ModelConfig, StepContext};
use crate::optim::{Optimizer, OptimizerConfig, PlateauSchedule};
use crate::rng::{self, tag};
use crate::synthgen::{DatasetBundle, GenConfig, Split};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub method: Method,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs over which the auxiliary loss weights ramp linearly up from zero.
    pub warmup_epochs: usize,
    /// Dataset container to train on; `None` generates from `data`.
    pub dataset: Option<String>,
    pub data: GenConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::Igv,
            seed: 0,
            epochs: 30,
            batch_size: 64,
            warmup_epochs: 0,
            dataset: None,
            data: GenConfig::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        self.data.validate()?;
        self.model.validate(self.method)?;
        self.optimizer.validate()
    }

    /// Loss weights for epoch `e`; the auxiliary terms are scaled by `e / warmup_epochs` until it reaches one.
    pub fn weights(&self, epoch: usize) -> LossWeights {
        let w = self.model.weights;
        if epoch >= self.warmup_epochs {
            return w;
        }
        let f = epoch as f64 / self.warmup_epochs as f64;
        LossWeights { igv_lambda1: w.igv_lambda1 * f, igv_lambda2: w.igv_lambda2 * f, beta: w.beta * f }
    }

    /// Temperature for epoch `e`, linearly annealed when a final value is set.
    pub fn temperature(&self, epoch: usize) -> f64 {
        let t0 = self.model.temperature;
        match self.model.temperature_final {
            Some(t1) if self.epochs > 1 => t0 + (t1 - t0) * epoch as f64 / (self.epochs - 1) as f64,
            _ => t0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// `None` for post-training evaluations.
    pub epoch: Option<usize>,
    pub split: String,
    /// `None` on training records.
    pub accuracy: Option<f64>,
    pub grounding: Option<GroundingMetrics>,
    /// Mean per-instance training loss components.
    pub losses: BTreeMap<String, f64>,
    pub learning_rate: Option<f64>,
}

/// Training-split losses plus the validation evaluation of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train: MetricsRecord,
    pub val: Option<MetricsRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    /// Generator settings of the dataset actually used.
    pub data_config: GenConfig,
    pub epochs: Vec<EpochMetrics>,
    /// Val, test-iid and test-ood of the selected checkpoint.
    pub final_metrics: Vec<MetricsRecord>,
    pub best_epoch: Option<usize>,
    pub checkpoint: Option<String>,
    pub wall_clock_secs: Option<f64>,
    pub status: RunStatus,
    pub diagnostic: Option<String>,
}

impl RunRecord {
    pub fn final_metric(&self, split: Split) -> Option<&MetricsRecord> {
        self.final_metrics.iter().find(|m| m.split == split.name())
    }
}

/// Everything needed to rebuild a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub method: Method,
    pub model: ModelConfig,
    pub shape: DataShape,
    pub params: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn of(model: &Model) -> Self {
        Checkpoint { method: model.method, model: model.config.clone(), shape: model.shape, params: model.named_params() }
    }

    pub fn restore(&self) -> Result<Model> {
        Model::from_params(self.method, &self.model, self.shape, self.params.iter().map(|(n, m)| (n.as_str(), m.clone())))
    }
}

/// Result of [`train`]: the record plus the selected model.
pub struct TrainOutcome {
    pub record: RunRecord,
    pub model: Model,
}

/// Per-instance predictions for one split.
pub fn predict_split(model: &Model, data: &DatasetBundle, split: Split) -> Result<Vec<Inference>> {
    data.split(split).iter().map(|s| model.infer(s, data)).collect()
}

/// Accuracy and, when the method exposes a clip mask, grounding quality.
pub fn summarize(data: &DatasetBundle, split: Split, predictions: &[Inference]) -> MetricsRecord {
    let samples = data.split(split);
    let predicted: Vec<usize> = predictions.iter().map(|p| p.answer).collect();
    let truth: Vec<usize> = samples.iter().map(|s| s.question.answer).collect();
    let grounding = predictions.iter().all(|p| p.causal_mask.is_some()).then(|| {
        mean_mask_metrics(
            predictions
                .iter()
                .zip(samples)
                .map(|(p, s)| (p.causal_mask.as_deref().expect("checked"), s.video.causal_mask.as_slice())),
        )
    });
    MetricsRecord {
        epoch: None,
        split: split.name().into(),
        accuracy: Some(accuracy(&predicted, &truth)),
        grounding: if samples.is_empty() { None } else { grounding },
        losses: BTreeMap::new(),
        learning_rate: None,
    }
}

pub fn evaluate(model: &Model, data: &DatasetBundle, split: Split) -> Result<MetricsRecord> {
    let predictions = predict_split(model, data, split)?;
    Ok(summarize(data, split, &predictions))
}

/// Trains `config.method` on `data`, calling `observer` after every epoch.
///
/// A non-finite loss or gradient stops training and yields a record with
/// [`RunStatus::Diverged`]; configuration and data errors are returned as `Err`.
pub fn train(config: &RunConfig, data: &DatasetBundle, mut observer: impl FnMut(&EpochMetrics)) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Degenerate("training split is empty".into()));
    }
    let shape = DataShape::of(data);
    let mut model = Model::new(config.method, &config.model, shape, &mut rng::stream(config.seed, &[tag::INIT]))?;
    let mut optimizer = Optimizer::new(config.optimizer)?;
    let mut plateau = config.optimizer.plateau_patience.map(PlateauSchedule::new);
    let mut bank = MemoryBank::new(config.model.bank_capacity)?;

    let mut record = RunRecord {
        config: config.clone(),
        data_config: data.config.clone(),
        epochs: Vec::new(),
        final_metrics: Vec::new(),
        best_epoch: None,
        checkpoint: None,
        wall_clock_secs: None,
        status: RunStatus::Completed,
        diagnostic: None,
    };
    let mut best: Option<(f64, Vec<Matrix>)> = None;
    let has_val = !data.val.is_empty();

    'epochs: for epoch in 0..config.epochs {
        let temperature = config.temperature(epoch);
        model.config.weights = config.weights(epoch);
        let mut shuffle = rng::stream(config.seed, &[tag::SHUFFLE, epoch as u64]);
        let batches = Model::batches(data.train.len(), config.batch_size, &mut shuffle);
        let mut totals = LossParts::new();
        let mut total_loss = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let batch: Vec<_> = idx.iter().map(|&i| &data.train[i]).collect();
            let mut step_rng = rng::stream(config.seed, &[tag::STEP, epoch as u64, b as u64]);
            let (value, parts, mut grads) = {
                let mut tape = Tape::new(&model.store);
                let mut ctx = StepContext { bank: &mut bank, temperature, rng: &mut step_rng };
                let (sum, parts) = model.batch_loss(&mut tape, &batch, data, &mut ctx)?;
                let mean = tape.scale(sum, 1.0 / batch.len() as f64);
                let value = tape.scalar(mean);
                let grads = tape.backward(mean).params(&tape);
                (value, parts, grads)
            };
            if !value.is_finite() || !grads.is_finite() {
                record.status = RunStatus::Diverged;
                record.diagnostic = Some(format!("non-finite loss or gradient at epoch {epoch}, batch {b} (loss {value})"));
                break 'epochs;
            }
            optimizer.step(&mut model.store, &mut grads);
            total_loss += value * batch.len() as f64;
            for (k, v) in parts {
                *totals.entry(k).or_insert(0.0) += v;
            }
        }
        let n = data.train.len() as f64;
        let mut losses: BTreeMap<String, f64> = totals.into_iter().map(|(k, v)| (k, v / n)).collect();
        losses.insert("total".into(), total_loss / n);
        let train_record = MetricsRecord {
            epoch: Some(epoch),
            split: Split::Train.name().into(),
            accuracy: None,
            grounding: None,
            losses,
            learning_rate: Some(optimizer.learning_rate()),
        };
        let mut val_record = None;
        if has_val {
            let mut val = evaluate(&model, data, Split::Val)?;
            val.epoch = Some(epoch);
            val.learning_rate = Some(optimizer.learning_rate());
            let score = val.accuracy.unwrap_or(0.0);
            // Checkpoints are only taken once the full objective is active.
            if epoch >= config.warmup_epochs.min(config.epochs - 1) && best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, model.store.iter().map(|(_, m)| m.clone()).collect()));
                record.best_epoch = Some(epoch);
            }
            if let Some(p) = plateau.as_mut() {
                if p.observe(score) {
                    optimizer.halve();
                }
            }
            val_record = Some(val);
        }
        let summary = EpochMetrics { epoch, train: train_record, val: val_record };
        observer(&summary);
        record.epochs.push(summary);
    }

    model.config.weights = config.model.weights;
    if let Some((_, values)) = best {
        for (id, v) in model.store.ids().collect::<Vec<_>>().into_iter().zip(values) {
            *model.store.get_mut(id) = v;
        }
    } else if record.status == RunStatus::Completed {
        record.best_epoch = Some(config.epochs - 1);
    }
    if record.status == RunStatus::Completed {
        for split in [Split::Val, Split::TestIid, Split::TestOod] {
            if !data.split(split).is_empty() {
                record.final_metrics.push(evaluate(&model, data, split)?);
            }
        }
    }
    Ok(TrainOutcome { record, model })
}

/// Mean training loss per epoch, in epoch order.
pub fn training_losses(record: &RunRecord) -> Vec<f64> {
    record
        .epochs
        .iter()
        .filter_map(|m| m.train.losses.get("total").copied())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::generate_dataset;

    fn tiny(method: Method) -> (RunConfig, DatasetBundle) {
        let data = GenConfig {
            num_videos: 120,
            clips: 6,
            feature_dim: 8,
            question_len: 3,
            causal_span: (2, 3),
            objects_per_clip: if method == Method::Transtr { 3 } else { 0 },
            split_fractions: (0.5, 0.2, 0.15),
            ..Default::default()
        };
        let bundle = generate_dataset(&data).unwrap();
        let mut model = ModelConfig { hidden: 8, negatives: 2, topk_samples: 8, k_frames: 2, k_objects: 2, ..Default::default() };
        model.bank_capacity = 64;
        let config = RunConfig { method, seed: 3, epochs: 2, batch_size: 16, data, model, ..Default::default() };
        (config, bundle)
    }

    #[test]
    fn every_method_trains_and_reports_all_splits() {
        for method in Method::ALL {
            let (config, data) = tiny(method);
            let mut seen = 0;
            let out = train(&config, &data, |_| seen += 1).unwrap();
            assert_eq!(out.record.status, RunStatus::Completed, "{method:?}");
            assert_eq!(seen, 2);
            assert_eq!(out.record.final_metrics.len(), 3);
            for m in &out.record.final_metrics {
                assert!((0.0..=1.0).contains(&m.accuracy.unwrap()));
                let has_mask = method != Method::Erm;
                assert_eq!(m.grounding.is_some(), has_mask, "{method:?}");
                if let Some(g) = m.grounding {
                    assert!((0.0..=1.0).contains(&g.iou));
                }
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (config, data) = tiny(Method::Eigv);
        let a = train(&config, &data, |_| {}).unwrap().record;
        let b = train(&config, &data, |_| {}).unwrap().record;
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_restores_identical_predictions() {
        for method in [Method::Igv, Method::Eigv] {
            let (config, data) = tiny(method);
            let out = train(&config, &data, |_| {}).unwrap();
            let restored = Checkpoint::of(&out.model).restore().unwrap();
            for split in [Split::TestIid, Split::TestOod] {
                assert_eq!(evaluate(&out.model, &data, split).unwrap(), evaluate(&restored, &data, split).unwrap());
            }
        }
    }

    #[test]
    fn divergence_is_reported_not_raised() {
        let (mut config, data) = tiny(Method::Erm);
        config.optimizer.learning_rate = 1e300;
        config.optimizer.clip_norm = None;
        let out = train(&config, &data, |_| {}).unwrap();
        assert_eq!(out.record.status, RunStatus::Diverged);
        assert!(out.record.diagnostic.is_some());
        assert!(out.record.final_metrics.is_empty());
    }

    #[test]
    fn zero_weights_leave_only_the_causal_term() {
        let (mut config, data) = tiny(Method::Igv);
        config.model.weights.igv_lambda1 = 0.0;
        config.model.weights.igv_lambda2 = 0.0;
        let out = train(&config, &data, |_| {}).unwrap();
        let first = &out.record.epochs[0].train.losses;
        assert_eq!(first["environment"], 0.0);
        assert_eq!(first["consistency"], 0.0);
        assert!((first["total"] - first["causal"]).abs() < 1e-9);
    }

    #[test]
    fn annealed_temperature_hits_both_ends() {
        let mut c = RunConfig { epochs: 5, ..Default::default() };
        c.model.temperature_final = Some(0.2);
        assert_eq!(c.temperature(0), 1.0);
        assert!((c.temperature(4) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let (_, data) = tiny(Method::Erm);
        let preds: Vec<Inference> = data
            .test_iid
            .iter()
            .map(|s| Inference {
                answer: s.question.answer,
                probs: Vec::new(),
                causal_mask: Some(s.video.causal_mask.clone()),
                p_c: None,
                indicator: None,
                rationale: None,
            })
            .collect();
        let m = summarize(&data, Split::TestIid, &preds);
        assert_eq!(m.accuracy, Some(1.0));
        assert_eq!(m.grounding.unwrap().iou, 1.0);
    }
}
