//! Classifier training with categorical cross entropy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vmmc_core::loss::cross_entropy;

use crate::param::{Adam, AdamConfig, Module};
use crate::resnet::ClassifierNetwork;
use crate::tensor::Tensor;
use crate::NnError;

pub const CATEGORICAL_CROSS_ENTROPY: &str = "categorical_cross_entropy";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: String,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 32, epochs: 100, loss: CATEGORICAL_CROSS_ENTROPY.into(), optimizer: AdamConfig::default(), seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(NnError::Spec("batch size and epochs must be at least 1".into()));
        }
        if self.loss != CATEGORICAL_CROSS_ENTROPY {
            return Err(NnError::Spec(format!("unsupported loss {:?}", self.loss)));
        }
        Ok(())
    }
}

/// A preprocessed `C×S×S` image and its class index.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Vec<f32>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
}

impl TrainReport {
    pub fn best(&self) -> &EpochMetrics {
        &self.epochs[self.best_epoch - 1]
    }
}

fn batch_tensor(net: &ClassifierNetwork, images: &[&[f32]]) -> Result<Tensor, NnError> {
    let s = net.spec();
    Tensor::stack(images, [s.input_channels, s.input_size, s.input_size])
}

fn check_labels(net: &ClassifierNetwork, data: &[LabeledImage]) -> Result<(), NnError> {
    match data.iter().find(|d| d.label >= net.spec().classes) {
        Some(d) => Err(NnError::Spec(format!("label {} outside a {}-class head", d.label, net.spec().classes))),
        None => Ok(()),
    }
}

/// Mean loss, accuracy and predicted class per image, in inference mode.
pub fn evaluate(net: &ClassifierNetwork, data: &[LabeledImage], batch_size: usize) -> Result<(f64, f64, Vec<usize>), NnError> {
    if data.is_empty() {
        return Err(NnError::EmptyData("evaluation"));
    }
    check_labels(net, data)?;
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let x = batch_tensor(net, &chunk.iter().map(|d| d.pixels.as_slice()).collect::<Vec<_>>())?;
        let logits = net.logits(&x)?;
        for (row, d) in logits.data().chunks(net.spec().classes).zip(chunk) {
            let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            loss += cross_entropy(&row, d.label).0;
            preds.push(argmax(&row));
        }
    }
    let correct = preds.iter().zip(data).filter(|(p, d)| **p == d.label).count();
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64, preds))
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains in place and leaves the best-validation-accuracy weights in `net`.
///
/// `augment` is applied to a copy of every training image each time it is
/// drawn. Ties in validation accuracy keep the earlier epoch.
pub fn fit<A>(net: &mut ClassifierNetwork, train: &[LabeledImage], val: &[LabeledImage], cfg: &TrainConfig, mut augment: A) -> Result<TrainReport, NnError>
where
    A: FnMut(&mut [f32], &mut ChaCha8Rng),
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(NnError::EmptyData("training"));
    }
    if val.is_empty() {
        return Err(NnError::EmptyData("validation"));
    }
    check_labels(net, train)?;
    let classes = net.spec().classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.optimizer);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport { epochs: Vec::with_capacity(cfg.epochs), best_epoch: 0 };
    let mut best: Option<(f64, Vec<Vec<f32>>)> = None;
    net.zero_grad();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut images: Vec<Vec<f32>> = batch.iter().map(|&i| train[i].pixels.clone()).collect();
            for img in &mut images {
                augment(img, &mut rng);
            }
            let x = batch_tensor(net, &images.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
            let logits = net.forward(&x, true)?;
            let mut grad = Tensor::zeros(logits.shape());
            let scale = 1.0 / batch.len() as f64;
            for (k, &i) in batch.iter().enumerate() {
                let row: Vec<f64> = logits.item(k).iter().map(|&v| v as f64).collect();
                let (l, g) = cross_entropy(&row, train[i].label);
                if !l.is_finite() {
                    return Err(NnError::Numeric(format!("non-finite loss at epoch {epoch}")));
                }
                loss_sum += l;
                correct += usize::from(argmax(&row) == train[i].label);
                for (d, gv) in grad.item_mut(k).iter_mut().zip(g) {
                    *d = (gv * scale) as f32;
                }
            }
            debug_assert_eq!(grad.item_len(), classes);
            net.backward(&grad);
            opt.step(net);
        }
        let (val_loss, val_acc, _) = evaluate(net, val, cfg.batch_size)?;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_loss,
            val_acc,
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.4}, val loss {:.4} acc {:.4}",
            m.train_loss,
            m.train_acc,
            m.val_loss,
            m.val_acc
        );
        report.epochs.push(m);
        if best.as_ref().is_none_or(|(acc, _)| val_acc > *acc) {
            best = Some((val_acc, net.snapshot()));
            report.best_epoch = epoch;
        }
    }
    if let Some((_, weights)) = best {
        net.restore(&weights);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resnet::{build_network, ClassifierSpec, StagePlan};
    use rand::Rng;

    fn toy_spec(classes: usize) -> ClassifierSpec {
        ClassifierSpec {
            input_size: 8,
            input_channels: 3,
            stem_filters: 4,
            stages: vec![StagePlan { bottleneck: 4, output: 8 }],
            classes,
        }
    }

    /// Bright left half versus bright right half, with noise.
    fn separable(n: usize, seed: u64) -> Vec<LabeledImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let mut pixels = vec![0.0f32; 3 * 64];
                for c in 0..3 {
                    for y in 0..8 {
                        for x in 0..8 {
                            let on = (x < 4) == (label == 0);
                            pixels[c * 64 + y * 8 + x] = if on { 0.8 } else { 0.2 } + rng.random_range(-0.1..0.1);
                        }
                    }
                }
                LabeledImage { pixels, label }
            })
            .collect()
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let mut net = build_network(&toy_spec(2), 11).unwrap();
        let train = separable(40, 1);
        let val = separable(10, 2);
        let cfg = TrainConfig { batch_size: 8, epochs: 50, seed: 3, ..Default::default() };
        let report = fit(&mut net, &train, &val, &cfg, |_, _| {}).unwrap();
        let first_full = report.epochs.iter().find(|m| m.train_acc == 1.0).map(|m| m.epoch);
        assert!(first_full.is_some_and(|e| e <= 50), "{:?}", report.epochs.last());
    }

    #[test]
    fn single_image_partial_batch() {
        let mut net = build_network(&toy_spec(7), 0).unwrap();
        let data = vec![LabeledImage { pixels: vec![0.5; 192], label: 3 }];
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        let report = fit(&mut net, &data, &data, &cfg, |_, _| {}).unwrap();
        assert_eq!(report.epochs.len(), 1);
        assert_eq!(report.best_epoch, 1);
    }

    #[test]
    fn reference_config_is_accepted() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.batch_size, cfg.epochs, cfg.loss.as_str()), (32, 100, "categorical_cross_entropy"));
        cfg.validate().unwrap();
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn best_epoch_weights_are_restored() {
        let mut net = build_network(&toy_spec(2), 5).unwrap();
        let train = separable(16, 4);
        let val = separable(8, 5);
        let cfg = TrainConfig { batch_size: 4, epochs: 6, seed: 1, ..Default::default() };
        let report = fit(&mut net, &train, &val, &cfg, |_, _| {}).unwrap();
        let (_, acc, _) = evaluate(&net, &val, 8).unwrap();
        assert_eq!(acc, report.best().val_acc);
        assert!(report.epochs.iter().all(|m| m.val_acc <= report.best().val_acc));
    }

    #[test]
    fn labels_outside_the_head_are_rejected() {
        let mut net = build_network(&toy_spec(2), 0).unwrap();
        let data = vec![LabeledImage { pixels: vec![0.0; 192], label: 2 }];
        assert!(fit(&mut net, &data, &data, &TrainConfig::default(), |_, _| {}).is_err());
        assert!(fit(&mut net, &[], &data, &TrainConfig::default(), |_, _| {}).is_err());
    }

    #[test]
    fn augmentation_sees_every_drawn_image() {
        let mut net = build_network(&toy_spec(2), 0).unwrap();
        let data = separable(10, 0);
        let mut calls = 0;
        let cfg = TrainConfig { batch_size: 4, epochs: 2, ..Default::default() };
        fit(&mut net, &data, &data, &cfg, |_, _| calls += 1).unwrap();
        assert_eq!(calls, 20);
    }
}
