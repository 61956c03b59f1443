//! Seeded AdamW training with best-validation checkpoint selection.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::metrics::{accuracy_rows, auc_macro_ovr_rows, Metrics};
use super::taps::{batch_taps, TapCache};
use crate::data::{Dataset, Flip};
use crate::digest::module_digest;
use crate::error::{invalid, Error, Result};
use crate::nn::{init, softmax_cross_entropy, AdamW, AdamWConfig};
use crate::tensor::{Matrix, Module, Scalar};
use crate::{Model, ModelSpec};

const EVAL_BATCH: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub seed: u64,
    /// Random horizontal/vertical flips of training images.
    pub augment_flips: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self { lr: 1e-4, weight_decay: 0.005, epochs: 30, batch_size: 32, eval_every: 1, seed: 0, augment_flips: true }
    }
}

impl HyperParams {
    /// 100 epochs, as used for the smaller fundus set.
    pub fn retina_preset() -> Self {
        Self { epochs: 100, ..Self::default() }
    }

    /// 400 epochs, as used for the dermoscopy set.
    pub fn isic_preset() -> Self {
        Self { epochs: 400, ..Self::default() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "retina-preset" => Ok(Self::retina_preset()),
            "isic-preset" => Ok(Self::isic_preset()),
            _ => Err(invalid!("unknown preset {name:?} (desk, retina-preset, isic-preset)")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        // lr = 0 stays legal: it is the frozen-parameter control run
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid!("weight_decay must be finite and non-negative"));
        }
        if self.batch_size < 2 {
            return Err(invalid!("batch_size must be at least 2 (batch-statistics BN), got {}", self.batch_size));
        }
        if self.eval_every == 0 {
            return Err(invalid!("eval_every must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train: Metrics,
    /// `None` on epochs skipped by `eval_every`.
    pub val: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub run_id: String,
    pub spec: ModelSpec,
    pub hyperparams: HyperParams,
    pub data_fraction: f64,
    pub data_seed: u64,
    pub dataset_digest: String,
    pub seed: u64,
    pub train_samples: usize,
    pub taps_alias: bool,
    /// Validation metrics of the untrained model.
    pub initial_val: Metrics,
    pub history: Vec<EpochMetrics>,
    pub model_selection: String,
    /// 0 means the untrained model was never beaten.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Test metrics of the selected checkpoint.
    pub final_test: Option<Metrics>,
    pub encoder_digest_before: String,
    pub encoder_digest_after: String,
    pub backbone_digest_before: String,
    pub backbone_digest_after: String,
    pub diverged: Option<String>,
}

impl ExperimentRecord {
    pub fn encoder_unchanged(&self) -> bool {
        self.encoder_digest_before == self.encoder_digest_after
    }

    pub fn test_accuracy(&self) -> f64 {
        self.final_test.map(|m| m.accuracy).unwrap_or(f64::NAN)
    }
}

pub fn hex(d: u64) -> String {
    format!("{d:016x}")
}

/// Index sets of one run.
#[derive(Clone, Copy)]
pub struct RunData<'a, T> {
    pub dataset: &'a Dataset,
    pub train: &'a [usize],
    pub val: &'a [usize],
    pub test: Option<&'a [usize]>,
    pub fraction: f64,
    pub taps: Option<&'a TapCache<T>>,
}

pub struct TrainOutcome {
    pub record: ExperimentRecord,
    pub best: Checkpoint,
}

/// A failed run together with whatever it recorded before failing.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct TrainFailure {
    pub error: Error,
    pub partial: Option<Box<ExperimentRecord>>,
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        Self { error, partial: None }
    }
}

#[derive(Serialize)]
struct StreamLine<'a> {
    run_id: &'a str,
    epoch: usize,
    split: &'a str,
    accuracy: f64,
    auc: f64,
    loss: f64,
}

fn emit(sink: &mut Option<&mut dyn Write>, run_id: &str, epoch: usize, split: &str, m: &Metrics) -> Result<()> {
    if let Some(w) = sink {
        let line = StreamLine { run_id, epoch, split, accuracy: m.accuracy, auc: m.auc_macro_ovr, loss: m.loss };
        serde_json::to_writer(&mut **w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn logit_rows<T: Scalar>(m: &Matrix<T>) -> Vec<Vec<f64>> {
    (0..m.rows).map(|r| m.row(r).iter().map(|v| v.f64()).collect()).collect()
}

fn mean_ce(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    let total: f64 = rows
        .iter()
        .zip(labels)
        .map(|(r, &l)| {
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln() - r[l]
        })
        .sum();
    total / labels.len() as f64
}

/// Metrics from stacked logits; AUC falls back to NaN when undefined.
pub fn summarize(rows: &[Vec<f64>], labels: &[usize]) -> Result<Metrics> {
    let accuracy = accuracy_rows(rows, labels)?;
    let auc_macro_ovr = match auc_macro_ovr_rows(rows, labels) {
        Ok(r) => r.value,
        Err(Error::UndefinedMetric(_)) => f64::NAN,
        Err(e) => return Err(e),
    };
    Ok(Metrics { accuracy, auc_macro_ovr, loss: mean_ce(rows, labels) })
}

/// Eval-mode logits for `indices`, in order.
pub fn predict<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    indices: &[usize],
    cache: Option<&TapCache<T>>,
) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let x = data.to_feature_map::<T>(chunk, None);
        let taps = batch_taps(cache, model, data, chunk, None, &x)?;
        rows.extend(logit_rows(&model.forward_eval_with_taps(&x, taps.as_ref())?));
    }
    Ok(rows)
}

pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset, indices: &[usize]) -> Result<Metrics> {
    evaluate_cached(model, data, indices, None)
}

pub fn evaluate_cached<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    indices: &[usize],
    cache: Option<&TapCache<T>>,
) -> Result<Metrics> {
    if indices.is_empty() {
        return Err(invalid!("cannot evaluate on an empty split"));
    }
    let labels: Vec<usize> = indices.iter().map(|&i| data.label(i)).collect();
    summarize(&predict(model, data, indices, cache)?, &labels)
}

/// Digest of the trainable tensors only (BN running statistics excluded).
pub fn trainable_params_digest<T: Scalar>(model: &Model<T>) -> u64 {
    let mut acc = 0u64;
    model.visit("", &mut |name, p| {
        if p.trainable {
            let mut h = crate::digest::Fnv1a::new();
            h.write(name.as_bytes());
            let mut b = Vec::new();
            for &v in &p.value {
                v.write_le(&mut b);
            }
            h.write(&b);
            acc = acc.wrapping_add(h.finish());
        }
    });
    acc
}

/// Trains `model` in place. On success the model holds the selected (best
/// validation accuracy, earliest on ties) weights.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &RunData<'_, T>,
    hp: &HyperParams,
    run_id: &str,
    mut sink: Option<&mut dyn Write>,
) -> std::result::Result<TrainOutcome, TrainFailure> {
    hp.validate()?;
    if data.train.len() < 2 || data.val.is_empty() {
        return Err(invalid!("need at least 2 training and 1 validation sample").into());
    }
    if data.dataset.num_classes() != model.num_classes() || data.dataset.image_size() != model.spec.backbone.input_size {
        return Err(invalid!("dataset geometry does not match the model").into());
    }
    model.encoder.verify_digest()?;
    let encoder_before = model.encoder_digest();
    let backbone_before = model.backbone_digest();
    let initial_val = evaluate_cached(model, data.dataset, data.val, data.taps)?;
    emit(&mut sink, run_id, 0, "val", &initial_val)?;

    let mut record = ExperimentRecord {
        run_id: run_id.to_string(),
        spec: model.spec.clone(),
        hyperparams: hp.clone(),
        data_fraction: data.fraction,
        data_seed: data.dataset.header().seed,
        dataset_digest: hex(data.dataset.digest()),
        seed: hp.seed,
        train_samples: data.train.len(),
        taps_alias: model.spec.encoder.taps_alias(),
        initial_val,
        history: Vec::new(),
        model_selection: "best_val_accuracy_earliest_on_ties".into(),
        best_epoch: 0,
        best_val_accuracy: initial_val.accuracy,
        final_test: None,
        encoder_digest_before: hex(encoder_before),
        encoder_digest_after: hex(encoder_before),
        backbone_digest_before: hex(backbone_before),
        backbone_digest_after: hex(backbone_before),
        diverged: None,
    };
    let mut best = Checkpoint::from_module(&*model);
    let mut opt = AdamW::new(AdamWConfig::new(hp.lr, hp.weight_decay));
    let mut order: Vec<usize> = data.train.to_vec();

    for epoch in 1..=hp.epochs {
        let mut rng = init::stream(hp.seed, &format!("epoch{epoch}"));
        order.copy_from_slice(data.train);
        order.shuffle(&mut rng);
        let mut rows = Vec::with_capacity(order.len());
        let mut labels = Vec::with_capacity(order.len());
        // a trailing batch of one would leave BN without batch statistics
        for batch in order.chunks(hp.batch_size).filter(|b| b.len() >= 2) {
            let flips: Option<Vec<Flip>> =
                hp.augment_flips.then(|| batch.iter().map(|_| Flip::from_bits(rng.gen(), rng.gen())).collect());
            let x = data.dataset.to_feature_map::<T>(batch, flips.as_deref());
            let y: Vec<usize> = batch.iter().map(|&i| data.dataset.label(i)).collect();
            let step = (|| -> Result<Matrix<T>> {
                let taps = batch_taps(data.taps, model, data.dataset, batch, flips.as_deref(), &x)?;
                let logits = model.forward_train_with_taps(&x, taps.as_ref())?;
                let (loss, d) = softmax_cross_entropy(&logits, &y)?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("non-finite training loss at epoch {epoch}")));
                }
                model.zero_grad();
                model.backward(&d)?;
                opt.step(&mut *model);
                Ok(logits)
            })();
            match step {
                Ok(logits) => rows.extend(logit_rows(&logits)),
                Err(Error::Numeric(msg)) => {
                    record.diverged = Some(msg.clone());
                    record.encoder_digest_after = hex(model.encoder_digest());
                    record.backbone_digest_after = hex(model.backbone_digest());
                    return Err(TrainFailure { error: Error::Numeric(msg), partial: Some(Box::new(record)) });
                }
                Err(e) => return Err(e.into()),
            }
            labels.extend(y);
        }
        let train_m = summarize(&rows, &labels)?;
        emit(&mut sink, run_id, epoch, "train", &train_m)?;
        let val = if epoch % hp.eval_every == 0 || epoch == hp.epochs {
            let m = evaluate_cached(model, data.dataset, data.val, data.taps)?;
            emit(&mut sink, run_id, epoch, "val", &m)?;
            if m.accuracy > record.best_val_accuracy {
                record.best_val_accuracy = m.accuracy;
                record.best_epoch = epoch;
                best = Checkpoint::from_module(&*model);
            }
            Some(m)
        } else {
            None
        };
        record.history.push(EpochMetrics { epoch, train: train_m, val });
    }

    record.encoder_digest_after = hex(model.encoder_digest());
    record.backbone_digest_after = hex(model.backbone_digest());
    model.encoder.verify_digest()?;
    best.load_into(&mut *model)?;
    if let Some(test) = data.test {
        let m = evaluate_cached(model, data.dataset, test, data.taps)?;
        emit(&mut sink, run_id, record.best_epoch, "test", &m)?;
        record.final_test = Some(m);
    }
    Ok(TrainOutcome { record, best })
}

/// Assembles `spec`, trains it on the stratified `fraction` of the training
/// split and evaluates the selected checkpoint on the test split.
pub fn run_experiment(
    spec: &ModelSpec,
    hp: &HyperParams,
    dataset: &Dataset,
    split: &crate::data::Split,
    fraction: f64,
    run_id: &str,
    taps: Option<&TapCache<f32>>,
    sink: Option<&mut dyn Write>,
) -> std::result::Result<(Model<f32>, TrainOutcome), TrainFailure> {
    let labels = dataset.labels();
    let train_idx =
        crate::data::stratified_fraction(&split.train, &labels, dataset.num_classes(), fraction, split.seed)?;
    let mut model = Model::<f32>::assemble(spec)?;
    let data = RunData { dataset, train: &train_idx, val: &split.val, test: Some(&split.test), fraction, taps };
    let out = train(&mut model, &data, hp, run_id, sink)?;
    Ok((model, out))
}

/// Module digest of the selected checkpoint loaded into a fresh model.
pub fn checkpoint_digest(spec: &ModelSpec, ck: &Checkpoint) -> Result<u64> {
    let mut m = Model::<f32>::assemble(spec)?;
    ck.load_into(&mut m)?;
    Ok(module_digest(&m))
}
