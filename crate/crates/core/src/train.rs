//! Objective, optimizer, metrics and the training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterBank;
use crate::data::{batch_iter, Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::NearlModel;
use crate::oca::max_abs_row_cosine;
use crate::tensor::{no_grad, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Validation is evaluated every `eval_every` epochs and after the last.
    pub eval_every: usize,
    /// Fail the run if an orthogonalized increment exceeds `ortho_tol`.
    pub check_orthogonality: bool,
    pub ortho_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            eval_every: 1,
            check_orthogonality: true,
            ortho_tol: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("epochs, batch_size and eval_every must be at least 1".into()));
        }
        // Zero is allowed: it turns a run into a repeated evaluation.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and adam_eps be positive".into()));
        }
        Ok(())
    }
}

/// Mean `−log softmax_gt(v·s/τ)` over a batch of unit image vectors `v`
/// (`batch × d`) against class vectors `s` (`classes × d`).
pub fn ce_loss(v: &Tensor, s: &Tensor, targets: &[usize], temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    v.matmul(&s.transpose()?)?.scale(1.0 / temperature).cross_entropy(targets)
}

#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

/// One bias-corrected Adam update of every parameter that holds a gradient
/// slot. Parameters are replaced, not mutated, so snapshots taken earlier
/// keep their values.
pub fn adam_step(params: Vec<(String, &mut Tensor)>, state: &mut AdamState, tc: &TrainConfig) -> Result<()> {
    let grads: Vec<Vec<f64>> = params
        .iter()
        .map(|(name, t)| {
            let g = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
            match g.iter().all(|v| v.is_finite()) {
                true => Ok(g),
                false => Err(Error::NonFiniteGradient { name: name.clone() }),
            }
        })
        .collect::<Result<_>>()?;
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - tc.beta1.powi(t), 1.0 - tc.beta2.powi(t));
    for ((name, param), g) in params.into_iter().zip(grads) {
        let (m, v) = state.moments.entry(name).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        let mut data = param.to_vec();
        for i in 0..data.len() {
            m[i] = tc.beta1 * m[i] + (1.0 - tc.beta1) * g[i];
            v[i] = tc.beta2 * v[i] + (1.0 - tc.beta2) * g[i] * g[i];
            data[i] -= tc.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + tc.adam_eps);
        }
        let shape = param.shape().to_vec();
        *param = Tensor::parameter(data, &shape)?;
    }
    Ok(())
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = *logits.shape().last().expect("tensor has dims");
    logits
        .data()
        .chunks(c)
        .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Accuracy and unweighted mean per-class F1. A class with no support and
/// no predictions scores F1 = 0.
pub fn classification_metrics(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<ClassificationMetrics> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= num_classes || y >= num_classes {
            return Err(Error::InvalidArgument(format!("class index out of range for {num_classes} classes")));
        }
        confusion[y][p] += 1;
    }
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let f1_sum: f64 = (0..num_classes)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let denom = (support + predicted) as f64;
            if denom == 0.0 { 0.0 } else { 2.0 * tp / denom }
        })
        .sum();
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / labels.len() as f64,
        macro_f1: f1_sum / num_classes as f64,
        confusion,
    })
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub loss: f64,
    pub metrics: ClassificationMetrics,
    pub predictions: Vec<usize>,
    /// Unit joint-space image vector per sample.
    pub image_features: Vec<Vec<f64>>,
}

const EVAL_CHUNK: usize = 64;

pub fn evaluate(model: &NearlModel, dataset: &Dataset, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    dataset.check_compatible(&model.config)?;
    no_grad(|| {
        let mut loss_sum = 0.0;
        let mut predictions = Vec::with_capacity(samples.len());
        let mut image_features = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EVAL_CHUNK) {
            let images = chunk.iter().map(|s| dataset.image(s)).collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
            let (logits, outs) = model.forward_batch(&images)?;
            loss_sum += logits.cross_entropy(&labels)?.item()? * chunk.len() as f64;
            predictions.extend(argmax_rows(&logits));
            image_features.extend(outs.iter().map(|o| o.joint.v.to_vec()));
        }
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        Ok(EvalReport {
            loss: loss_sum / samples.len() as f64,
            metrics: classification_metrics(&predictions, &labels, model.config.num_classes)?,
            predictions,
            image_features,
        })
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: SplitMetrics,
    pub val: Option<SplitMetrics>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Largest row cosine between an orthogonalized increment and its
    /// reference feature over every training step (0 when nothing was checked).
    pub max_ortho_cos: f64,
    pub ortho_checks: usize,
    pub steps: usize,
}

impl TrainReport {
    /// CSV with header `epoch,split,loss,acc,f1`, six decimals.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,acc,f1\n");
        for rec in &self.history {
            let mut row = |split: &str, m: &SplitMetrics| {
                let _ = writeln!(out, "{},{split},{:.6},{:.6},{:.6}", rec.epoch, m.loss, m.accuracy, m.macro_f1);
            };
            row("train", &rec.train);
            if let Some(v) = &rec.val {
                row("val", v);
            }
        }
        out
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.train.loss).collect()
    }
}

/// Rows whose reference feature is shorter than this are skipped by the
/// orthogonality monitor.
pub const ORTHO_MIN_NORM: f64 = 1e-6;

/// Trains the adapter bank in place and leaves the best-validation weights
/// installed. The backbone is never written.
pub fn train(model: &mut NearlModel, dataset: &Dataset, tc: &TrainConfig) -> Result<TrainReport> {
    tc.validate()?;
    dataset.check_compatible(&model.config)?;
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let trainable = !model.adapters.trainable_registry().is_empty();
    let monitor = tc.check_orthogonality && model.mode().orthogonalizes();
    let mut state = AdamState::default();
    let mut history = Vec::with_capacity(tc.epochs);
    let mut best: Option<(usize, f64, AdapterBank)> = None;
    let mut max_ortho_cos = 0.0f64;
    let mut ortho_checks = 0usize;
    let mut steps = 0usize;

    for epoch in 1..=tc.epochs {
        let mut loss_sum = 0.0;
        let mut predictions = Vec::with_capacity(dataset.train.len());
        let mut labels_seen = Vec::with_capacity(dataset.train.len());
        for (step, batch) in batch_iter(dataset.train.len(), tc.batch_size, tc.seed, epoch)?.into_iter().enumerate() {
            let samples: Vec<&Sample> = batch.iter().map(|&i| &dataset.train[i]).collect();
            let images = samples.iter().map(|s| dataset.image(s)).collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let (logits, outs) = model.forward_batch(&images)?;
            let loss = logits.cross_entropy(&labels)?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step: step + 1 });
            }
            if monitor {
                for inc in outs.iter().flat_map(|o| &o.increments) {
                    let cos = max_abs_row_cosine(&inc.delta, &inc.reference, ORTHO_MIN_NORM);
                    ortho_checks += 1;
                    max_ortho_cos = max_ortho_cos.max(cos);
                    if cos >= tc.ortho_tol {
                        return Err(Error::Orthogonality {
                            site: format!("{:?} layer {} (epoch {epoch}, step {})", inc.tower, inc.layer, step + 1),
                            cos,
                            tol: tc.ortho_tol,
                        });
                    }
                }
            }
            loss_sum += value * labels.len() as f64;
            predictions.extend(argmax_rows(&logits));
            labels_seen.extend(labels);
            drop(outs);
            if trainable {
                model.adapters.zero_grads();
                loss.backward()?;
                let params = model.adapters.named_tensors_mut().into_iter().filter(|(_, t)| t.requires_grad()).collect();
                adam_step(params, &mut state, tc)?;
            }
            steps += 1;
        }
        let m = classification_metrics(&predictions, &labels_seen, model.config.num_classes)?;
        let train_metrics = SplitMetrics { loss: loss_sum / labels_seen.len() as f64, accuracy: m.accuracy, macro_f1: m.macro_f1 };

        let val = if epoch % tc.eval_every == 0 || epoch == tc.epochs {
            let r = evaluate(model, dataset, &dataset.val)?;
            if best.as_ref().is_none_or(|(_, acc, _)| r.metrics.accuracy > *acc) {
                best = Some((epoch, r.metrics.accuracy, model.adapters.clone()));
            }
            Some(SplitMetrics { loss: r.loss, accuracy: r.metrics.accuracy, macro_f1: r.metrics.macro_f1 })
        } else {
            None
        };
        history.push(EpochRecord { epoch, train: train_metrics, val });
    }

    let (best_epoch, best_val_accuracy, bank) = best.expect("the final epoch always evaluates");
    model.adapters = bank;
    Ok(TrainReport { history, best_epoch, best_val_accuracy, max_ortho_cos, ortho_checks, steps })
}
