//! Mini-batch training with AdamW and the warmup/cosine schedule, plus
//! top-k evaluation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mode::Mode;
use crate::model::PsVit;
use crate::optim::{adamw_step, AdamWConfig, LrSchedule, OptimState};
use crate::params::Params;
use crate::tensor::Tensor;

pub const LABEL_SMOOTHING: f64 = 0.1;
pub const DEFAULT_BATCH: usize = 32;
pub const METRICS_HEADER: &str = "epoch,loss,accuracy,lr";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub optimizer: AdamWConfig,
    pub smoothing: f64,
    pub seed: u64,
    /// Stop after the first epoch whose train accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    /// Early stopping is not considered before this many epochs.
    pub min_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: DEFAULT_BATCH,
            base_lr: LrSchedule::DEFAULT_BASE_LR,
            warmup_epochs: LrSchedule::DEFAULT_WARMUP_EPOCHS,
            optimizer: AdamWConfig::default(),
            smoothing: LABEL_SMOOTHING,
            seed: 0,
            target_accuracy: None,
            min_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self, samples: usize) -> Result<LrSchedule> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        let warmup = self.warmup_epochs.min(self.epochs.saturating_sub(1));
        LrSchedule::new(self.base_lr, warmup, self.epochs, samples.div_ceil(self.batch_size))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Train-set accuracy measured in evaluation mode after the epoch.
    pub accuracy: f64,
    /// Rate used by the epoch's last step.
    pub lr: f64,
}

pub fn write_metrics_csv<W: Write>(metrics: &[EpochMetrics], mut out: W) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for m in metrics {
        writeln!(out, "{},{:.8},{:.6},{:.8e}", m.epoch, m.loss, m.accuracy, m.lr)?;
    }
    Ok(())
}

fn batch_images(ds: &Dataset, idx: &[usize]) -> (Vec<Tensor<f32>>, Vec<usize>) {
    (
        idx.iter().map(|&i| ds.images[i].clone()).collect(),
        idx.iter().map(|&i| ds.labels[i]).collect(),
    )
}

fn check_classes(model: &PsVit<f32>, ds: &Dataset) -> Result<()> {
    if ds.num_classes != model.config.num_classes {
        return Err(Error::Dataset(format!(
            "dataset has {} classes but the model head has {}",
            ds.num_classes, model.config.num_classes
        )));
    }
    Ok(())
}

/// Trains `model` in place. `on_epoch` sees each epoch's metrics and the
/// updated model (for checkpointing); returning an error aborts training.
pub fn train(
    model: &mut PsVit<f32>,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &PsVit<f32>) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    check_classes(model, ds)?;
    let schedule = cfg.schedule(ds.len())?;
    let mut state = OptimState::new(model, cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        let mut lr = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (images, labels) = batch_images(ds, idx);
            model.zero_grads();
            let pass = model.forward(&images, &mut Mode::Train(&mut rng))?;
            let (loss, dlogits) = pass.loss(&labels, cfg.smoothing)?;
            let loss = f64::from(loss);
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss {loss} at epoch {epoch}, batch {b}"),
                    index: b,
                });
            }
            model.backward(&pass, &dlogits)?;
            model.commit_stats(&pass);
            lr = schedule.lr_at(step);
            adamw_step(model, &mut state, lr)?;
            step += 1;
            loss_sum += loss;
            batches += 1;
        }
        let accuracy = evaluate(model, ds, cfg.batch_size)?.top1;
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / batches as f64,
            accuracy,
            lr,
        };
        on_epoch(&m, model)?;
        metrics.push(m);
        if epoch >= cfg.min_epochs && cfg.target_accuracy.is_some_and(|t| accuracy >= t) {
            break;
        }
    }
    Ok(metrics)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub top1: f64,
    pub top5: f64,
    pub loss: f64,
}

pub const EVAL_HEADER: &str = "samples,top1,top5,loss";

impl EvalReport {
    pub fn to_csv(&self) -> String {
        format!(
            "{EVAL_HEADER}\n{},{:.6},{:.6},{:.8}\n",
            self.samples, self.top1, self.top5, self.loss
        )
    }
}

/// Whether `label` is among the `k` largest logits (ties broken by index).
pub fn in_top_k(logits: &[f32], label: usize, k: usize) -> bool {
    let target = logits[label];
    let ahead = logits
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > target || (v == target && i < label))
        .count();
    ahead < k
}

/// Evaluation-mode top-1/top-5 accuracy and mean unsmoothed loss.
pub fn evaluate(model: &PsVit<f32>, ds: &Dataset, batch_size: usize) -> Result<EvalReport> {
    check_classes(model, ds)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let (mut top1, mut top5, mut loss) = (0usize, 0usize, 0.0f64);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, labels) = batch_images(ds, chunk);
        let pass = model.forward(&images, &mut Mode::Eval)?;
        loss += f64::from(pass.loss(&labels, 0.0)?.0) * chunk.len() as f64;
        for (logits, &y) in pass.logits.iter().zip(&labels) {
            top1 += usize::from(in_top_k(logits.data(), y, 1));
            top5 += usize::from(in_top_k(logits.data(), y, 5));
        }
    }
    let n = ds.len() as f64;
    Ok(EvalReport {
        samples: ds.len(),
        top1: top1 as f64 / n,
        top5: top5 as f64 / n,
        loss: loss / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::model::PsVitConfig;

    fn toy2() -> PsVitConfig {
        PsVitConfig {
            num_classes: 2,
            ..PsVitConfig::toy()
        }
    }

    #[test]
    fn top_k_containment() {
        let logits = [0.1, 0.5, 0.3, 0.9, 0.0, 0.2];
        assert!(in_top_k(&logits, 3, 1));
        assert!(!in_top_k(&logits, 1, 1));
        assert!(in_top_k(&logits, 1, 2));
        assert!(!in_top_k(&logits, 4, 5));
        assert!(in_top_k(&logits, 0, 5));
    }

    #[test]
    fn zero_lr_without_decay_leaves_parameters_unchanged() {
        let ds = synthetic_blobs(8, 16, 0).unwrap();
        let mut model = PsVit::<f32>::build(&toy2(), 0).unwrap();
        let before = model.param_store();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            base_lr: 0.0,
            optimizer: AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let m = train(&mut model, &ds, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(model.param_store(), before);
        assert_eq!(m[0].accuracy, m[1].accuracy);
    }

    #[test]
    fn class_mismatch_is_rejected() {
        let ds = synthetic_blobs(4, 16, 0).unwrap();
        let mut model = PsVit::<f32>::build(&PsVitConfig::toy(), 0).unwrap();
        let err = train(&mut model, &ds, &TrainConfig::default(), |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Dataset(_)));
    }

    #[test]
    fn metrics_csv_has_one_row_per_epoch() {
        let m = [EpochMetrics {
            epoch: 1,
            loss: 0.5,
            accuracy: 0.75,
            lr: 1e-3,
        }];
        let mut buf = Vec::new();
        write_metrics_csv(&m, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 2);
        assert!(s.starts_with(METRICS_HEADER));
    }
}
