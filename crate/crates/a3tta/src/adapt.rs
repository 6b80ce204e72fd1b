//! Streaming test-time adaptation engine.
//!
//! The engine makes exactly one pass over a target stream: each arriving
//! batch gets scored, offered to the anchor bank, refined against it,
//! trained on for a single optimizer step, folded into the teacher, and
//! finally re-predicted with the updated student. The continual protocol
//! chains domains and rounds while carrying all state.

use std::time::Instant;

use ndarray::{Array3, Array4, ArrayView1, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{refine_pseudo_label, NORMALIZE_EPSILON};
use crate::anchorbank::{
    compute_ccd, entropy_filter_score, mc_dropout_scores, AnchorBank, InsertDecision,
};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::losses::{ema_rate_from_divergence, total_loss, LossBreakdown};
use crate::metrics::{evaluate_mask, MetricRecord};
use crate::prob::{argmax_batch, split_batch};
use crate::scalar::Scalar;
use crate::seeding::rng_for;
use crate::segmodel::{
    blend_parameters, loss_and_gradient, AdamConfig, AdamState, BnMode, GradientWeights, SegModel,
    StepOutcome,
};

/// How candidate images are scored before entering the bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    Ccd,
    Entropy,
    McDropout,
}

/// Teacher update schedule: divergence-driven or a constant rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaMode {
    Adaptive,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    pub bank_capacity: usize,
    pub beta: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Stabilizer in the anchor standardization denominator.
    pub epsilon: f64,
    pub filter_mode: FilterMode,
    /// Stochastic passes when `filter_mode = mc_dropout`.
    pub mc_passes: usize,
    pub ema_mode: EmaMode,
    /// Retention factor when `ema_mode = fixed`.
    pub ema_alpha: f64,
    /// Statistics the teacher normalizes with. Batch keeps its inference
    /// mode consistent with the student, so the divergence reflects the
    /// weight gap rather than the statistics gap.
    pub teacher_bn_mode: BnMode,
    /// Re-encode stored bank images with the current student each batch.
    pub refresh_bank_features: bool,
    /// Continual runs: restore source state before every domain.
    pub reset_between_domains: bool,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            bank_capacity: 40,
            beta: 5.0,
            gamma: 1.0,
            learning_rate: 1e-4,
            batch_size: 10,
            epsilon: NORMALIZE_EPSILON,
            filter_mode: FilterMode::Ccd,
            mc_passes: 8,
            ema_mode: EmaMode::Adaptive,
            ema_alpha: 0.99,
            teacher_bn_mode: BnMode::Batch,
            refresh_bank_features: false,
            reset_between_domains: false,
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("beta and gamma must be ≥ 0".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(Error::Config("ema_alpha must lie in [0, 1]".into()));
        }
        if self.filter_mode == FilterMode::McDropout && self.mc_passes < 2 {
            return Err(Error::Config(
                "mc_dropout filtering needs at least 2 passes".into(),
            ));
        }
        Ok(())
    }
}

/// Per-image refinement trace for the run log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FarTrace {
    pub lambda: f64,
    pub anchor_index: usize,
    pub anchor_score: f64,
}

/// Everything observable about one processed batch.
#[derive(Debug, Clone)]
pub struct BatchResult {
    /// 1-based batch counter.
    pub step: u64,
    /// Post-step student argmax labels, `[B, H, W]`.
    pub predictions: Array3<u8>,
    /// Per-image filter scores in batch order.
    pub scores: Vec<f64>,
    pub bank_decisions: Vec<InsertDecision>,
    /// `None` for an image means the bank was empty (no refinement).
    pub far: Vec<Option<FarTrace>>,
    pub losses: LossBreakdown,
    /// Blend weight applied to the teacher; `None` when the update was
    /// skipped because the loss was non-finite.
    pub ema_rate: Option<f64>,
    /// Bank redundancy snapshot; `None` below 2 entries.
    pub bri: Option<f64>,
    pub step_applied: bool,
    pub wall_ms: f64,
}

/// Carried state of one adaptation run.
#[derive(Debug, Clone)]
pub struct AdaptationState<F: Scalar> {
    pub config: AdaptationConfig,
    pub student: SegModel<F>,
    pub teacher: SegModel<F>,
    pub bank: AnchorBank<F>,
    pub optimizer: AdamState<F>,
    /// Batches processed so far.
    pub step: u64,
    /// Human-readable anomaly notes (non-finite losses and the like).
    pub incidents: Vec<String>,
    source: SegModel<F>,
    rng: ChaCha8Rng,
    /// Source images of current bank entries, by slot; kept only when
    /// feature refresh is enabled.
    bank_images: Vec<Array4<F>>,
}

/// Builds a run-ready state around a source-trained model: the teacher
/// starts as an exact copy, the bank empty, the optimizer fresh.
pub fn init_adaptation<F: Scalar>(
    source: &SegModel<F>,
    config: AdaptationConfig,
) -> Result<AdaptationState<F>> {
    config.validate()?;
    if config.filter_mode == FilterMode::McDropout && !source.has_dropout() {
        return Err(Error::Config(
            "mc_dropout filtering needs a checkpoint with a dropout rate".into(),
        ));
    }
    let student = source.clone();
    let optimizer = AdamState::new(&student, AdamConfig::with_lr(config.learning_rate))?;
    Ok(AdaptationState {
        student,
        teacher: source.clone(),
        bank: AnchorBank::new(config.bank_capacity),
        optimizer,
        step: 0,
        incidents: Vec::new(),
        source: source.clone(),
        rng: rng_for(config.seed, "adapt", 0),
        bank_images: Vec::new(),
        config,
    })
}

impl<F: Scalar> AdaptationState<F> {
    /// Puts weights, teacher, bank and optimizer back to the source state.
    /// The RNG and step counter keep advancing so logs stay monotonic.
    pub fn reset_to_source(&mut self) -> Result<()> {
        self.student = self.source.clone();
        self.teacher = self.source.clone();
        self.bank = AnchorBank::new(self.config.bank_capacity);
        self.bank_images.clear();
        self.optimizer =
            AdamState::new(&self.student, AdamConfig::with_lr(self.config.learning_rate))?;
        Ok(())
    }

    fn filter_scores(&mut self, probs: &Array4<F>, images: &Array4<F>) -> Result<Vec<f64>> {
        match self.config.filter_mode {
            FilterMode::Ccd => split_batch(probs)
                .iter()
                .map(|m| compute_ccd(m).map(|s| s.value))
                .collect(),
            FilterMode::Entropy => Ok(split_batch(probs)
                .iter()
                .map(entropy_filter_score)
                .collect()),
            FilterMode::McDropout => {
                mc_dropout_scores(&self.student, images, self.config.mc_passes, &mut self.rng)
            }
        }
    }

    /// Re-encodes every stored bank image with the current student and
    /// swaps the refreshed features into the bank.
    fn refresh_bank(&mut self) -> Result<()> {
        if self.bank_images.len() != self.bank.len() {
            return Err(Error::Incompatible(format!(
                "bank refresh bookkeeping out of sync: {} images for {} entries",
                self.bank_images.len(),
                self.bank.len()
            )));
        }
        if self.bank_images.is_empty() {
            return Ok(());
        }
        let (_, c, h, w) = self.bank_images[0].dim();
        let mut joint = Array4::<F>::zeros((self.bank_images.len(), c, h, w));
        for (i, img) in self.bank_images.iter().enumerate() {
            joint
                .index_axis_mut(Axis(0), i)
                .assign(&img.index_axis(Axis(0), 0));
        }
        let enc = self.student.encode(&joint, BnMode::Batch)?;
        for slot in 0..self.bank.len() {
            self.bank
                .replace_feature(slot, enc.bottleneck_flat(slot).to_owned())?;
        }
        Ok(())
    }

    fn record_bank_images(&mut self, decisions: &[InsertDecision], images: &Array4<F>) {
        for (i, d) in decisions.iter().enumerate() {
            let img = || {
                images
                    .index_axis(Axis(0), i)
                    .to_owned()
                    .insert_axis(Axis(0))
            };
            match d {
                InsertDecision::InsertedFill => self.bank_images.push(img()),
                InsertDecision::InsertedReplace { evicted_slot } => {
                    self.bank_images[*evicted_slot] = img();
                }
                InsertDecision::Rejected => {}
            }
        }
    }

    /// Processes one batch: score, bank update, refinement, one gradient
    /// step, teacher blend, and a fresh forward for the final predictions.
    /// A non-finite loss or gradient skips the step and the teacher update;
    /// the batch is then predicted with the pre-step student and the
    /// incident logged.
    pub fn adapt_batch(&mut self, images: &Array4<F>) -> Result<BatchResult> {
        let start = Instant::now();
        let b = images.dim().0;
        if b > self.config.batch_size {
            return Err(Error::InvalidArgument(format!(
                "batch of {b} exceeds configured batch size {}",
                self.config.batch_size
            )));
        }
        self.step += 1;

        if self.config.refresh_bank_features {
            self.refresh_bank()?;
        }

        // Corrupt input would launder to finite activations through the
        // ReLU floors, so the gate sits on the raw pixels: such a batch
        // touches neither the bank nor either network.
        let input_finite = images.iter().all(|v| (*v).to_f64().is_finite());
        let fwd = self.student.forward_cached(images)?;

        let (scores, bank_decisions, far, breakdown, grads) = if input_finite {
            let scores = self.filter_scores(fwd.probs(), images)?;
            let candidates: Vec<(ArrayView1<'_, F>, f64)> = (0..b)
                .map(|i| (fwd.encode.bottleneck_flat(i), scores[i]))
                .collect();
            let bank_decisions = self.bank.update(&candidates)?;
            if self.config.refresh_bank_features {
                self.record_bank_images(&bank_decisions, images);
            }

            let refinement =
                refine_pseudo_label(&self.student, &fwd.encode, &self.bank, self.config.epsilon)?;
            let (refined, far) = match refinement {
                Some(r) => {
                    let traces = r
                        .fusions
                        .iter()
                        .map(|f| {
                            Some(FarTrace {
                                lambda: f.lambda,
                                anchor_index: f.anchor_index,
                                anchor_score: f.anchor_score,
                            })
                        })
                        .collect();
                    (r.maps, traces)
                }
                // Empty bank: fall back to self-targets, which zeroes the
                // boundary term and turns the semantic term into confidence.
                None => (split_batch(fwd.probs()), vec![None; b]),
            };

            let teacher_probs = self
                .teacher
                .forward(images, self.config.teacher_bn_mode)?;
            let weights = GradientWeights {
                beta: self.config.beta,
                gamma: self.config.gamma,
            };
            let comp = loss_and_gradient(&self.student, &fwd, &refined, &teacher_probs, &weights)?;
            (scores, bank_decisions, far, comp.breakdown, Some(comp.grads))
        } else {
            self.incidents
                .push(format!("step {}: non-finite input, batch skipped", self.step));
            (
                vec![f64::NAN; b],
                vec![InsertDecision::Rejected; b],
                vec![None; b],
                total_loss(
                    f64::NAN,
                    f64::NAN,
                    f64::NAN,
                    self.config.beta,
                    self.config.gamma,
                ),
                None,
            )
        };

        let loss_finite = breakdown.total.is_finite();
        let mut step_applied = false;
        let mut ema_rate = None;
        if let Some(grads) = &grads {
            if loss_finite {
                match self.optimizer.step(&mut self.student, grads)? {
                    StepOutcome::Applied => step_applied = true,
                    StepOutcome::SkippedNonFinite => self.incidents.push(format!(
                        "step {}: non-finite gradient, optimizer step skipped",
                        self.step
                    )),
                }
            } else {
                self.incidents.push(format!(
                    "step {}: non-finite loss {:?}, batch predicted with pre-step weights",
                    self.step, breakdown
                ));
            }
        }
        // The teacher tracks the student only when the student actually
        // moved; a skipped step leaves both networks untouched.
        if step_applied {
            let rate = match self.config.ema_mode {
                EmaMode::Adaptive => ema_rate_from_divergence(breakdown.mt),
                EmaMode::Fixed => 1.0 - self.config.ema_alpha,
            };
            let blended = blend_parameters(
                &self.teacher.parameters(),
                &self.student.parameters(),
                F::from_f64(rate),
            )?;
            self.teacher.set_parameters(&blended)?;
            ema_rate = Some(rate);
        }

        let predictions = if step_applied {
            argmax_batch(&self.student.forward(images, BnMode::Batch)?)
        } else {
            argmax_batch(fwd.probs())
        };

        Ok(BatchResult {
            step: self.step,
            predictions,
            scores,
            bank_decisions,
            far,
            losses: breakdown,
            ema_rate,
            bri: self.bank.redundancy_index().ok(),
            step_applied,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// One completed (or aborted) pass over a stream.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub steps: Vec<BatchResult>,
    pub records: Vec<MetricRecord>,
    /// False when the stream or the engine failed mid-pass.
    pub complete: bool,
    pub error: Option<String>,
}

impl RunReport {
    fn empty() -> Self {
        Self {
            steps: Vec::new(),
            records: Vec::new(),
            complete: true,
            error: None,
        }
    }
}

/// Single pass over a batch stream. Metric records are computed from each
/// batch's final predictions against its reference masks. A failing stream
/// item aborts the pass and flags the report incomplete.
pub fn run_stream<F: Scalar>(
    state: &mut AdaptationState<F>,
    stream: impl IntoIterator<Item = Result<Batch<F>>>,
    round: usize,
) -> RunReport {
    let mut report = RunReport::empty();
    let num_classes = state.student.arch().num_classes;
    for item in stream {
        let batch = match item {
            Ok(b) => b,
            Err(e) => {
                report.complete = false;
                report.error = Some(e.to_string());
                return report;
            }
        };
        let result = match state.adapt_batch(&batch.images) {
            Ok(r) => r,
            Err(e) => {
                report.complete = false;
                report.error = Some(e.to_string());
                return report;
            }
        };
        for i in 0..batch.ids.len() {
            match evaluate_mask(
                result.predictions.index_axis(Axis(0), i),
                batch.masks.index_axis(Axis(0), i),
                num_classes,
                batch.spacings[i],
                batch.ids[i].clone(),
                batch.domains[i].clone(),
                round,
            ) {
                Ok(rec) => report.records.push(rec),
                Err(e) => {
                    report.complete = false;
                    report.error = Some(e.to_string());
                    return report;
                }
            }
        }
        report.steps.push(result);
    }
    report
}

/// One domain's slice of a continual run.
#[derive(Debug, Clone)]
pub struct ContinualCell {
    pub round: usize,
    pub domain: String,
    pub report: RunReport,
}

#[derive(Debug, Clone)]
pub struct ContinualReport {
    pub cells: Vec<ContinualCell>,
    pub complete: bool,
}

/// Repeats the ordered domain list for `rounds` passes, carrying weights,
/// teacher, bank and optimizer throughout (unless the config asks for a
/// reset before each domain). Stops early if any pass aborts.
pub fn run_continual<F: Scalar>(
    state: &mut AdaptationState<F>,
    domains: &[Dataset<F>],
    rounds: usize,
) -> Result<ContinualReport> {
    if rounds == 0 {
        return Err(Error::InvalidArgument("continual runs need rounds ≥ 1".into()));
    }
    if domains.is_empty() {
        return Err(Error::InvalidArgument(
            "continual runs need at least one domain".into(),
        ));
    }
    let mut cells = Vec::with_capacity(rounds * domains.len());
    for round in 0..rounds {
        for ds in domains {
            if state.config.reset_between_domains {
                state.reset_to_source()?;
            }
            let name = ds
                .domains()
                .first()
                .cloned()
                .unwrap_or_else(|| "empty".into());
            let batches = ds.batches(state.config.batch_size)?;
            let report = run_stream(state, batches.into_iter().map(Ok), round);
            let failed = !report.complete;
            cells.push(ContinualCell {
                round,
                domain: name,
                report,
            });
            if failed {
                return Ok(ContinualReport {
                    cells,
                    complete: false,
                });
            }
        }
    }
    Ok(ContinualReport {
        cells,
        complete: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;
    use crate::losses::teacher_divergence;
    use crate::segmodel::testutil::tiny_arch;
    use crate::segmodel::ParameterSet;
    use ndarray::{Array2, Array4};
    use rand::Rng;
    use rand::SeedableRng;

    fn tiny_model(seed: u64) -> SegModel<f64> {
        SegModel::new(tiny_arch(), seed).unwrap()
    }

    fn small_config() -> AdaptationConfig {
        AdaptationConfig {
            bank_capacity: 4,
            batch_size: 3,
            seed: 5,
            ..AdaptationConfig::default()
        }
    }

    fn random_batch(seed: u64, b: usize) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn((b, 1, 8, 8), || rng.gen_range(-1.0..1.0))
    }

    fn params_equal(a: &ParameterSet<f64>, b: &ParameterSet<f64>) -> bool {
        a.items
            .iter()
            .zip(b.items.iter())
            .all(|((_, x), (_, y))| x == y)
    }

    fn max_param_diff(a: &ParameterSet<f64>, b: &ParameterSet<f64>) -> f64 {
        a.items
            .iter()
            .zip(b.items.iter())
            .flat_map(|((_, x), (_, y))| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn init_copies_source_and_is_deterministic() {
        let source = tiny_model(1);
        let a = init_adaptation(&source, small_config()).unwrap();
        let b = init_adaptation(&source, small_config()).unwrap();
        assert!(params_equal(&a.student.parameters(), &source.parameters()));
        assert!(params_equal(&a.teacher.parameters(), &source.parameters()));
        assert!(a.bank.is_empty());
        assert_eq!(a.step, 0);
        assert!(params_equal(&a.student.parameters(), &b.student.parameters()));

        // Identical models: the teacher term equals the prediction's
        // normalized entropy.
        let x = random_batch(2, 2);
        let p = a.student.forward(&x, BnMode::Batch).unwrap();
        let maps = split_batch(&p);
        let d = teacher_divergence(&maps[0], &maps[0]).unwrap();
        let ent = crate::losses::mean_entropy(&maps[0]) / (3f64).log2();
        assert!((d - ent).abs() < 1e-12);
    }

    #[test]
    fn adapt_batch_is_deterministic() {
        let source = tiny_model(3);
        let mut a = init_adaptation(&source, small_config()).unwrap();
        let mut b = init_adaptation(&source, small_config()).unwrap();
        for seed in 0..3 {
            let batch = random_batch(40 + seed, 3);
            let ra = a.adapt_batch(&batch).unwrap();
            let rb = b.adapt_batch(&batch).unwrap();
            assert_eq!(ra.predictions, rb.predictions);
            assert_eq!(ra.scores, rb.scores);
            assert_eq!(ra.bank_decisions, rb.bank_decisions);
            assert_eq!(ra.losses.total, rb.losses.total);
            assert_eq!(ra.ema_rate, rb.ema_rate);
        }
        assert!(params_equal(&a.student.parameters(), &b.student.parameters()));
    }

    #[test]
    fn empty_bank_fallback_with_zero_weights_is_a_fixed_point() {
        let source = tiny_model(7);
        let config = AdaptationConfig {
            bank_capacity: 0,
            beta: 0.0,
            gamma: 0.0,
            batch_size: 2,
            ..AdaptationConfig::default()
        };
        let mut state = init_adaptation(&source, config).unwrap();
        let before = state.student.parameters();
        let result = state.adapt_batch(&random_batch(8, 2)).unwrap();
        assert!(result.far.iter().all(Option::is_none));
        assert!(result.bank_decisions.iter().all(|d| !d.inserted()));
        assert!(result.losses.be == 0.0);
        // Self cross-entropy through softmax is stationary; any residual
        // drift is floating-point dust through Adam's epsilon.
        assert!(max_param_diff(&before, &state.student.parameters()) < 1e-9);
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let source = tiny_model(9);
        let mut state = init_adaptation(&source, small_config()).unwrap();
        assert!(state.adapt_batch(&random_batch(10, 4)).is_err());
    }

    #[test]
    fn teacher_stays_between_old_teacher_and_student() {
        let source = tiny_model(11);
        let mut state = init_adaptation(&source, small_config()).unwrap();
        for seed in 0..2 {
            let teacher_before = state.teacher.parameters();
            state.adapt_batch(&random_batch(60 + seed, 3)).unwrap();
            let student = state.student.parameters();
            let teacher_after = state.teacher.parameters();
            for ((ta, (_, tb)), (_, s)) in teacher_after
                .items
                .iter()
                .map(|(_, t)| t)
                .zip(teacher_before.items.iter())
                .zip(student.items.iter())
            {
                for ((a, b), c) in ta.iter().zip(tb.iter()).zip(s.iter()) {
                    assert!(*a >= b.min(*c) - 1e-15 && *a <= b.max(*c) + 1e-15);
                }
            }
        }
    }

    #[test]
    fn fixed_ema_keeps_teacher_drift_bounded() {
        let source = tiny_model(13);
        let config = AdaptationConfig {
            ema_mode: EmaMode::Fixed,
            ema_alpha: 0.99,
            batch_size: 3,
            bank_capacity: 4,
            seed: 5,
            ..AdaptationConfig::default()
        };
        let mut state = init_adaptation(&source, config).unwrap();
        let teacher_before = state.teacher.parameters();
        let r = state.adapt_batch(&random_batch(14, 3)).unwrap();
        assert_eq!(r.ema_rate, Some(1.0 - 0.99));
        let student = state.student.parameters();
        let teacher_after = state.teacher.parameters();
        for i in 0..teacher_after.items.len() {
            for ((a, b), s) in teacher_after.items[i]
                .1
                .iter()
                .zip(teacher_before.items[i].1.iter())
                .zip(student.items[i].1.iter())
            {
                assert!((a - b).abs() <= 0.01 * (s - b).abs() + 1e-15);
            }
        }
    }

    #[test]
    fn bank_max_score_is_monotone_once_full() {
        let source = tiny_model(15);
        let config = AdaptationConfig {
            bank_capacity: 3,
            batch_size: 3,
            seed: 5,
            ..AdaptationConfig::default()
        };
        let mut state = init_adaptation(&source, config).unwrap();
        let mut last_max: Option<f64> = None;
        for seed in 0..6 {
            state.adapt_batch(&random_batch(80 + seed, 3)).unwrap();
            if state.bank.fill_complete() {
                let m = state.bank.max_score().unwrap();
                if let Some(prev) = last_max {
                    assert!(m <= prev + 1e-12, "max score rose from {prev} to {m}");
                }
                last_max = Some(m);
            }
        }
        assert!(last_max.is_some());
    }

    #[test]
    fn non_finite_batch_skips_step_and_logs_incident() {
        let source = tiny_model(17);
        let mut state = init_adaptation(&source, small_config()).unwrap();
        let before = state.student.parameters();
        let teacher_before = state.teacher.parameters();
        let bad = Array4::from_elem((2, 1, 8, 8), f64::NAN);
        let r = state.adapt_batch(&bad).unwrap();
        assert!(!r.step_applied);
        assert_eq!(r.ema_rate, None);
        assert!(!state.incidents.is_empty());
        assert!(r.bank_decisions.iter().all(|d| !d.inserted()));
        assert!(params_equal(&before, &state.student.parameters()));
        assert!(params_equal(&teacher_before, &state.teacher.parameters()));
    }

    #[test]
    fn refreshed_features_track_the_student() {
        let source = tiny_model(19);
        let config = AdaptationConfig {
            bank_capacity: 2,
            batch_size: 2,
            refresh_bank_features: true,
            seed: 5,
            ..AdaptationConfig::default()
        };
        let mut state = init_adaptation(&source, config).unwrap();
        state.adapt_batch(&random_batch(20, 2)).unwrap();
        assert!(!state.bank.is_empty());
        let feat_before: Vec<_> = state
            .bank
            .entries()
            .iter()
            .map(|e| e.feature.clone())
            .collect();
        // The student moved, so the refresh at the next batch rewrites
        // features in place.
        state.adapt_batch(&random_batch(21, 2)).unwrap();
        let changed = state
            .bank
            .entries()
            .iter()
            .zip(feat_before.iter())
            .take(feat_before.len().min(state.bank.len()))
            .any(|(e, f)| &e.feature != f);
        assert!(changed);
    }

    /// Hand-built 8×8 three-class dataset sized for the tiny architecture.
    fn tiny_dataset(name: &str, n: usize, seed: u64) -> Dataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|i| {
                let image = Array2::from_shape_simple_fn((8, 8), || rng.gen_range(-1.0..1.0));
                let shift = rng.gen_range(0..3u8);
                let mask =
                    Array2::from_shape_fn((8, 8), |(y, x)| ((y + x) as u8 + shift) % 3);
                Sample {
                    id: format!("{name}-{i:04}"),
                    domain: name.to_string(),
                    spacing: 1.0,
                    image,
                    mask,
                }
            })
            .collect();
        Dataset::new(samples, 3).unwrap()
    }

    #[test]
    fn run_stream_counts_steps_and_survives_empty_streams() {
        let source = tiny_model(23);
        let mut state = init_adaptation(&source, small_config()).unwrap();
        let empty = run_stream(&mut state, Vec::new(), 0);
        assert!(empty.complete);
        assert!(empty.steps.is_empty());
        assert!(params_equal(&state.student.parameters(), &source.parameters()));

        let ds = tiny_dataset("t", 7, 31);
        let batches = ds.batches(3).unwrap();
        let k = batches.len();
        let report = run_stream(&mut state, batches.into_iter().map(Ok), 0);
        assert!(report.complete);
        assert_eq!(report.steps.len(), k);
        assert_eq!(report.records.len(), 7);
        assert!(report.records.iter().all(|r| r.domain == "t"));
    }

    #[test]
    fn stream_error_aborts_with_partial_report() {
        let source = tiny_model(25);
        let mut state = init_adaptation(&source, small_config()).unwrap();
        let ds = tiny_dataset("t", 6, 33);
        let mut items: Vec<Result<Batch<f64>>> =
            ds.batches(3).unwrap().into_iter().map(Ok).collect();
        items.insert(1, Err(Error::InvalidArgument("simulated failure".into())));
        let report = run_stream(&mut state, items, 0);
        assert!(!report.complete);
        assert_eq!(report.steps.len(), 1);
        assert!(report.error.unwrap().contains("simulated failure"));
    }

    #[test]
    fn continual_layout_and_reset_flag() {
        let source = tiny_model(27);
        let d1 = tiny_dataset("d1", 4, 41);
        let d2 = tiny_dataset("d2", 4, 43);

        let mut carried = init_adaptation(&source, small_config()).unwrap();
        let rep = run_continual(&mut carried, &[d1.clone(), d2.clone()], 2).unwrap();
        assert!(rep.complete);
        assert_eq!(rep.cells.len(), 4);
        assert_eq!(rep.cells[0].domain, "d1");
        assert_eq!(rep.cells[3].round, 1);

        // With resets, every domain behaves like an independent run.
        let reset_config = AdaptationConfig {
            reset_between_domains: true,
            ..small_config()
        };
        let mut reset_state = init_adaptation(&source, reset_config).unwrap();
        let rep_reset = run_continual(&mut reset_state, &[d1.clone(), d2.clone()], 1).unwrap();

        let mut fresh = init_adaptation(&source, small_config()).unwrap();
        let alone = run_stream(&mut fresh, d2.batches(3).unwrap().into_iter().map(Ok), 0);
        let got: Vec<f64> = rep_reset.cells[1]
            .report
            .records
            .iter()
            .map(|r| r.dice[1])
            .collect();
        let want: Vec<f64> = alone.records.iter().map(|r| r.dice[1]).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn continual_rejects_degenerate_arguments() {
        let source = tiny_model(29);
        let mut state = init_adaptation(&source, small_config()).unwrap();
        assert!(run_continual(&mut state, &[], 1).is_err());
        let ds = tiny_dataset("d", 2, 47);
        assert!(run_continual(&mut state, &[ds], 0).is_err());
    }
}
