//! Simplified reference methods sharing the adaptation engine's streams.
//!
//! Each method is a deliberately reduced variant ("-like") rather than a
//! faithful reimplementation: source inference, batch-statistic inference,
//! entropy minimization over the batch-norm affine parameters, and a
//! mean-teacher with a constant update rate.

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptationConfig, EmaMode, RunReport};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::losses::{mean_entropy, mean_entropy_grad};
use crate::metrics::evaluate_mask;
use crate::prob::{argmax_batch, split_batch};
use crate::scalar::Scalar;
use crate::segmodel::{AdamConfig, AdamState, BnMode, SegModel};

/// Reference method selector with its per-method knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineSpec {
    SourceOnly,
    PtbnLike,
    TentLike { learning_rate: f64 },
    FixedMt { alpha: f64 },
}

impl BaselineSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            BaselineSpec::SourceOnly | BaselineSpec::PtbnLike => Ok(()),
            BaselineSpec::TentLike { learning_rate } => {
                if !learning_rate.is_finite() || *learning_rate <= 0.0 {
                    return Err(Error::Config(
                        "tent_like learning rate must be positive".into(),
                    ));
                }
                Ok(())
            }
            BaselineSpec::FixedMt { alpha } => {
                if !(0.0..=1.0).contains(alpha) {
                    return Err(Error::Config("fixed_mt alpha must lie in [0, 1]".into()));
                }
                Ok(())
            }
        }
    }
}

/// Plain source-model inference with stored running statistics.
pub fn source_only_predict<F: Scalar>(
    model: &SegModel<F>,
    images: &Array4<F>,
) -> Result<Array3<u8>> {
    Ok(argmax_batch(&model.forward(images, BnMode::Running)?))
}

/// Inference that recomputes normalization statistics from the incoming
/// batch. No parameters change; the model must actually contain BN layers
/// for the swap to mean anything.
pub fn ptbn_like_adapt<F: Scalar>(
    model: &SegModel<F>,
    images: &Array4<F>,
) -> Result<Array3<u8>> {
    if !model.arch().batch_norm {
        return Err(Error::Config(
            "ptbn_like needs a model with batch normalization layers".into(),
        ));
    }
    Ok(argmax_batch(&model.forward(images, BnMode::Batch)?))
}

/// Carried state of an entropy-minimization run: only the BN affine
/// parameters receive gradient.
#[derive(Debug, Clone)]
pub struct TentState<F: Scalar> {
    pub model: SegModel<F>,
    pub optimizer: AdamState<F>,
    pub step: u64,
    /// Per-parameter flag, `parameters()` order: true for `.bn.gamma` and
    /// `.bn.beta` tensors.
    mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct TentStepResult {
    pub predictions: Array3<u8>,
    /// Batch-mean pixel entropy before the step, in bits.
    pub entropy: f64,
}

pub fn init_tent<F: Scalar>(source: &SegModel<F>, learning_rate: f64) -> Result<TentState<F>> {
    BaselineSpec::TentLike { learning_rate }.validate()?;
    if !source.arch().batch_norm {
        return Err(Error::Config(
            "tent_like needs a model with batch normalization layers".into(),
        ));
    }
    let model = source.clone();
    let mask: Vec<bool> = model
        .parameters()
        .items
        .iter()
        .map(|(name, _)| name.ends_with(".bn.gamma") || name.ends_with(".bn.beta"))
        .collect();
    let optimizer = AdamState::new(&model, AdamConfig::with_lr(learning_rate))?;
    Ok(TentState {
        model,
        optimizer,
        step: 0,
        mask,
    })
}

impl<F: Scalar> TentState<F> {
    /// One entropy-minimization step on the batch, then a fresh prediction
    /// with the updated parameters.
    pub fn adapt_batch(&mut self, images: &Array4<F>) -> Result<TentStepResult> {
        self.step += 1;
        let fwd = self.model.forward_cached(images)?;
        let (b, c, h, w) = fwd.probs().dim();
        let inv_b = F::from_f64(1.0 / b as f64);
        let mut dprobs = Array4::<F>::zeros((b, c, h, w));
        let mut entropy_sum = 0.0;
        for (i, m) in split_batch(fwd.probs()).iter().enumerate() {
            entropy_sum += mean_entropy(m).to_f64();
            dprobs
                .index_axis_mut(Axis(0), i)
                .assign(&mean_entropy_grad(m).mapv(|v| v * inv_b));
        }
        let mut grads = self.model.backward(&fwd.cache, &dprobs)?;
        for (tensor, keep) in grads.tensors.iter_mut().zip(self.mask.iter()) {
            if !keep {
                tensor.fill(F::zero());
            }
        }
        self.optimizer.step(&mut self.model, &grads)?;
        let predictions = argmax_batch(&self.model.forward(images, BnMode::Batch)?);
        Ok(TentStepResult {
            predictions,
            entropy: entropy_sum / b as f64,
        })
    }
}

/// Engine configuration for the constant-rate mean-teacher baseline: bank
/// disabled and the boundary term off, so the gradient reduces to the
/// teacher alignment term.
pub fn fixed_mt_config(alpha: f64, base: &AdaptationConfig) -> AdaptationConfig {
    AdaptationConfig {
        bank_capacity: 0,
        beta: 0.0,
        gamma: 1.0,
        ema_mode: EmaMode::Fixed,
        ema_alpha: alpha,
        ..base.clone()
    }
}

/// Shared stream loop for methods that only produce predictions.
fn run_predicting<F: Scalar>(
    num_classes: usize,
    stream: impl IntoIterator<Item = Result<Batch<F>>>,
    round: usize,
    mut predict: impl FnMut(&Batch<F>) -> Result<Array3<u8>>,
) -> RunReport {
    let mut report = RunReport {
        steps: Vec::new(),
        records: Vec::new(),
        complete: true,
        error: None,
    };
    for item in stream {
        let outcome = item.and_then(|batch| {
            let predictions = predict(&batch)?;
            let mut records = Vec::with_capacity(batch.ids.len());
            for i in 0..batch.ids.len() {
                records.push(evaluate_mask(
                    predictions.index_axis(Axis(0), i),
                    batch.masks.index_axis(Axis(0), i),
                    num_classes,
                    batch.spacings[i],
                    batch.ids[i].clone(),
                    batch.domains[i].clone(),
                    round,
                )?);
            }
            Ok(records)
        });
        match outcome {
            Ok(records) => report.records.extend(records),
            Err(e) => {
                report.complete = false;
                report.error = Some(e.to_string());
                return report;
            }
        }
    }
    report
}

pub fn run_source_only<F: Scalar>(
    model: &SegModel<F>,
    stream: impl IntoIterator<Item = Result<Batch<F>>>,
    round: usize,
) -> RunReport {
    run_predicting(model.arch().num_classes, stream, round, |b| {
        source_only_predict(model, &b.images)
    })
}

pub fn run_ptbn<F: Scalar>(
    model: &SegModel<F>,
    stream: impl IntoIterator<Item = Result<Batch<F>>>,
    round: usize,
) -> RunReport {
    run_predicting(model.arch().num_classes, stream, round, |b| {
        ptbn_like_adapt(model, &b.images)
    })
}

pub fn run_tent<F: Scalar>(
    state: &mut TentState<F>,
    stream: impl IntoIterator<Item = Result<Batch<F>>>,
    round: usize,
) -> RunReport {
    let num_classes = state.model.arch().num_classes;
    run_predicting(num_classes, stream, round, |b| {
        state.adapt_batch(&b.images).map(|r| r.predictions)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::init_adaptation;
    use crate::prob::ProbabilityMap;
    use crate::segmodel::testutil::tiny_arch;
    use crate::segmodel::softmax_backward;
    use ndarray::Array4;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64) -> SegModel<f64> {
        SegModel::new(tiny_arch(), seed).unwrap()
    }

    fn random_batch(seed: u64, b: usize) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn((b, 1, 8, 8), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn spec_validation() {
        assert!(BaselineSpec::SourceOnly.validate().is_ok());
        assert!(BaselineSpec::TentLike { learning_rate: 1e-3 }.validate().is_ok());
        assert!(BaselineSpec::TentLike { learning_rate: 0.0 }.validate().is_err());
        assert!(BaselineSpec::FixedMt { alpha: 0.99 }.validate().is_ok());
        assert!(BaselineSpec::FixedMt { alpha: 1.5 }.validate().is_err());
    }

    #[test]
    fn source_only_is_pure_and_deterministic() {
        let model = tiny_model(1);
        let before = model.parameters();
        let x = random_batch(2, 3);
        let a = source_only_predict(&model, &x).unwrap();
        let b = source_only_predict(&model, &x).unwrap();
        assert_eq!(a, b);
        assert_eq!(before, model.parameters());
    }

    #[test]
    fn ptbn_swaps_statistics_without_touching_parameters() {
        let model = tiny_model(3);
        let before = model.parameters();
        // Shifted inputs: batch statistics diverge from the stored ones, so
        // the two modes produce different probabilities.
        let x = random_batch(4, 3).mapv(|v| v * 0.5 + 0.4);
        ptbn_like_adapt(&model, &x).unwrap();
        assert_eq!(before, model.parameters());
        let p_run = model.forward(&x, BnMode::Running).unwrap();
        let p_batch = model.forward(&x, BnMode::Batch).unwrap();
        let diff = (&p_run - &p_batch).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
        assert!(diff > 1e-6, "batch statistics had no effect: {diff}");
    }

    #[test]
    fn ptbn_survives_zero_variance_batches() {
        let model = tiny_model(5);
        let one = random_batch(6, 1);
        let mut x = Array4::zeros((3, 1, 8, 8));
        for i in 0..3 {
            x.index_axis_mut(Axis(0), i).assign(&one.index_axis(Axis(0), 0));
        }
        let p = model.forward(&x, BnMode::Batch).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        ptbn_like_adapt(&model, &x).unwrap();
    }

    #[test]
    fn ptbn_rejects_bn_free_models() {
        let mut arch = tiny_arch();
        arch.batch_norm = false;
        let model = SegModel::<f64>::new(arch, 1).unwrap();
        assert!(ptbn_like_adapt(&model, &random_batch(7, 2)).is_err());
        assert!(init_tent(&model, 1e-3).is_err());
    }

    #[test]
    fn tent_touches_only_bn_affine_parameters() {
        let source = tiny_model(9);
        let mut state = init_tent(&source, 1e-3).unwrap();
        state.adapt_batch(&random_batch(10, 3)).unwrap();
        let before = source.parameters();
        let after = state.model.parameters();
        let mut bn_changed = false;
        for ((name, a), (_, b)) in before.items.iter().zip(after.items.iter()) {
            let is_bn = name.ends_with(".bn.gamma") || name.ends_with(".bn.beta");
            if is_bn {
                bn_changed |= a != b;
            } else {
                assert_eq!(a, b, "non-BN parameter {name} moved");
            }
        }
        assert!(bn_changed);
    }

    #[test]
    fn tent_descends_entropy_on_a_repeated_batch() {
        let mut successes = 0;
        for trial in 0..5u64 {
            let source = tiny_model(100 + trial);
            let mut state = init_tent(&source, 1e-3).unwrap();
            let x = random_batch(200 + trial, 4);
            let mut entropies = Vec::new();
            for _ in 0..4 {
                entropies.push(state.adapt_batch(&x).unwrap().entropy);
            }
            if entropies.last().unwrap() < entropies.first().unwrap() {
                successes += 1;
            }
        }
        assert!(successes >= 4, "entropy descended in only {successes}/5 trials");
    }

    #[test]
    fn one_hot_predictions_give_zero_entropy_gradient() {
        // Hard labels: entropy is at its minimum, and the softmax Jacobian
        // kills the remaining clamp artifacts exactly.
        let mut p = Array4::<f64>::zeros((1, 3, 2, 2));
        for (j, pix) in [(0usize, 0usize), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
            p[[0, j % 3, pix.0, pix.1]] = 1.0;
        }
        let map = ProbabilityMap::new(p.index_axis(Axis(0), 0).to_owned()).unwrap();
        let mut dprobs = Array4::<f64>::zeros((1, 3, 2, 2));
        dprobs
            .index_axis_mut(Axis(0), 0)
            .assign(&mean_entropy_grad(&map));
        let dlogits = softmax_backward(&p, &dprobs);
        assert!(dlogits.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fixed_mt_runs_the_engine_without_a_bank() {
        let base = AdaptationConfig {
            batch_size: 3,
            seed: 5,
            ..AdaptationConfig::default()
        };
        let config = fixed_mt_config(0.99, &base);
        assert_eq!(config.bank_capacity, 0);
        assert_eq!(config.beta, 0.0);
        assert_eq!(config.gamma, 1.0);
        assert_eq!(config.ema_mode, EmaMode::Fixed);

        let source = tiny_model(11);
        let mut state = init_adaptation(&source, config).unwrap();
        for seed in 0..2 {
            let r = state.adapt_batch(&random_batch(30 + seed, 3)).unwrap();
            assert!(r.far.iter().all(Option::is_none));
            assert!(r.bank_decisions.iter().all(|d| !d.inserted()));
            assert_eq!(r.ema_rate, Some(1.0 - 0.99));
            assert!(r.step_applied);
        }
    }

    #[test]
    fn predicting_runner_reports_stream_failures() {
        let model = tiny_model(13);
        let items: Vec<crate::error::Result<Batch<f64>>> =
            vec![Err(Error::InvalidArgument("boom".into()))];
        let report = run_source_only(&model, items, 0);
        assert!(!report.complete);
        assert!(report.error.unwrap().contains("boom"));
    }
}
