//! Source-domain supervised training with a soft Dice loss.

use ndarray::{s, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::{BnMode, SegModel};
use crate::error::{Error, Result};
use crate::metrics;
use crate::prob::argmax_batch;
use crate::scalar::Scalar;
use crate::seeding::rng_for;
use rand::seq::SliceRandom;

const SMOOTH: f64 = 1.0;

/// Soft Dice loss over all classes, averaged per image and class, with the
/// gradient w.r.t. the probability tensor. `labels` holds class indices.
pub fn dice_loss_and_grad<F: Scalar>(
    probs: &Array4<F>,
    labels: &Array3<u8>,
) -> Result<(f64, Array4<F>)> {
    let (b, c, h, w) = probs.dim();
    if labels.dim() != (b, h, w) {
        return Err(Error::shape(
            "label batch",
            format!("({b}, {h}, {w})"),
            format!("{:?}", labels.dim()),
        ));
    }
    if labels.iter().any(|&l| l as usize >= c) {
        return Err(Error::InvalidArgument(format!(
            "label id out of range for {c} classes"
        )));
    }
    let mut grad = Array4::<F>::zeros((b, c, h, w));
    let mut dice_sum = 0.0;
    let scale = -1.0 / (b * c) as f64;
    for i in 0..b {
        for k in 0..c {
            let p = probs.slice(s![i, k, .., ..]);
            let mut inter = 0.0;
            let mut p_sum = 0.0;
            let mut t_sum = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let pv = p[(y, x)].to_f64();
                    let tv = (labels[(i, y, x)] as usize == k) as u8 as f64;
                    inter += pv * tv;
                    p_sum += pv;
                    t_sum += tv;
                }
            }
            let num = 2.0 * inter + SMOOTH;
            let den = p_sum + t_sum + SMOOTH;
            dice_sum += num / den;
            // d dice / dp = (2 t den - num) / den^2
            let inv_den2 = 1.0 / (den * den);
            let mut g = grad.slice_mut(s![i, k, .., ..]);
            for y in 0..h {
                for x in 0..w {
                    let tv = (labels[(i, y, x)] as usize == k) as u8 as f64;
                    g[(y, x)] = F::from_f64(scale * (2.0 * tv * den - num) * inv_den2);
                }
            }
        }
    }
    Ok((1.0 - dice_sum / (b * c) as f64, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_dice: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainOutcome {
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub history: Vec<EpochStats>,
}

/// Mean foreground Dice of argmax predictions against label masks.
pub fn validation_dice<F: Scalar>(
    model: &SegModel<F>,
    images: &Array4<F>,
    labels: &Array3<u8>,
    batch_size: usize,
) -> Result<f64> {
    let n = images.dim().0;
    let c = model.arch().num_classes;
    let mut acc = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let batch = images.slice(s![start..end, .., .., ..]).to_owned();
        let probs = model.forward(&batch, BnMode::Running)?;
        let pred = argmax_batch(&probs);
        for i in 0..(end - start) {
            let pm = pred.index_axis(Axis(0), i);
            let gm = labels.index_axis(Axis(0), start + i);
            let mut per_img = 0.0;
            for k in 1..c {
                per_img += metrics::dice(pm, gm, k as u8)?;
            }
            acc += per_img / (c - 1) as f64;
        }
        start = end;
    }
    Ok(acc / n as f64)
}

/// Trains the model in place and leaves it at the weights (and running
/// statistics) of the epoch with the highest validation Dice.
pub fn pretrain<F: Scalar>(
    model: &mut SegModel<F>,
    train_images: &Array4<F>,
    train_labels: &Array3<u8>,
    val_images: &Array4<F>,
    val_labels: &Array3<u8>,
    config: &PretrainConfig,
) -> Result<PretrainOutcome> {
    let n = train_images.dim().0;
    if n == 0 || val_images.dim().0 == 0 {
        return Err(Error::InvalidArgument(
            "training and validation sets must be non-empty".into(),
        ));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::Config(
            "epochs and batch size must be positive".into(),
        ));
    }
    let mut adam = AdamState::new(model, AdamConfig::with_lr(config.learning_rate))?;
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64)> = None;
    let mut best_state = (model.parameters(), model.buffers());

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(config.seed, "pretrain-shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let bsz = chunk.len();
            let (_, ch, h, w) = train_images.dim();
            let mut batch = Array4::<F>::zeros((bsz, ch, h, w));
            let mut labels = Array3::<u8>::zeros((bsz, h, w));
            for (j, &idx) in chunk.iter().enumerate() {
                batch
                    .index_axis_mut(Axis(0), j)
                    .assign(&train_images.index_axis(Axis(0), idx));
                labels
                    .index_axis_mut(Axis(0), j)
                    .assign(&train_labels.index_axis(Axis(0), idx));
            }
            let fwd = model.forward_cached(&batch)?;
            model.update_running_stats(&fwd.cache);
            let (loss, dprobs) = dice_loss_and_grad(fwd.probs(), &labels)?;
            let grads = model.backward(&fwd.cache, &dprobs)?;
            adam.step(model, &grads)?;
            loss_sum += loss;
            batches += 1;
        }
        let val_dice = validation_dice(model, val_images, val_labels, config.batch_size)?;
        history.push(EpochStats {
            epoch,
            mean_loss: loss_sum / batches as f64,
            val_dice,
        });
        if best.map_or(true, |(_, d)| val_dice > d) {
            best = Some((epoch, val_dice));
            best_state = (model.parameters(), model.buffers());
        }
    }
    let (best_epoch, best_val_dice) = best.expect("at least one epoch ran");
    model.set_parameters(&best_state.0)?;
    model.set_buffers(&best_state.1)?;
    Ok(PretrainOutcome {
        best_epoch,
        best_val_dice,
        history,
    })
}
