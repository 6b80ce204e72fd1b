//! Adam optimizer over a model's parameter set.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{Gradients, SegModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config("Adam eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Gradients contained NaN or Inf; parameters and moments untouched.
    SkippedNonFinite,
}

/// First/second moment state, matched to one model's parameter layout.
#[derive(Debug, Clone)]
pub struct AdamState<F: Scalar> {
    pub config: AdamConfig,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
    /// Applied step count (drives bias correction).
    pub t: u64,
    pub skipped_steps: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(model: &SegModel<F>, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let shapes: Vec<_> = model
            .parameters()
            .items
            .iter()
            .map(|(_, t)| t.raw_dim())
            .collect();
        Ok(Self {
            config,
            m: shapes.iter().map(|d| ArrayD::zeros(d.clone())).collect(),
            v: shapes.iter().map(|d| ArrayD::zeros(d.clone())).collect(),
            t: 0,
            skipped_steps: 0,
        })
    }

    /// One Adam update on the model's parameters. Non-finite gradients skip
    /// the step entirely (moments included) and bump `skipped_steps`.
    pub fn step(&mut self, model: &mut SegModel<F>, grads: &Gradients<F>) -> Result<StepOutcome> {
        if grads.tensors.len() != self.m.len() {
            return Err(Error::shape(
                "gradient tensor count",
                self.m.len(),
                grads.tensors.len(),
            ));
        }
        if !grads.is_finite() {
            self.skipped_steps += 1;
            log::warn!(
                "skipping optimizer step {}: non-finite gradient",
                self.t + 1
            );
            return Ok(StepOutcome::SkippedNonFinite);
        }
        self.t += 1;
        let b1 = F::from_f64(self.config.beta1);
        let b2 = F::from_f64(self.config.beta2);
        let eps = F::from_f64(self.config.eps);
        let corr1 = F::from_f64(1.0 - self.config.beta1.powi(self.t as i32));
        let corr2 = F::from_f64(1.0 - self.config.beta2.powi(self.t as i32));
        let lr = F::from_f64(self.config.learning_rate);

        let mut params = model.parameters();
        for (((m, v), g), (_, p)) in self
            .m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(grads.tensors.iter())
            .zip(params.items.iter_mut())
        {
            if m.shape() != g.shape() {
                return Err(Error::shape(
                    "gradient tensor",
                    format!("{:?}", m.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            ndarray::Zip::from(m).and(v).and(g).and(p).for_each(
                |m, v, &g, p| {
                    *m = b1 * *m + (F::one() - b1) * g;
                    *v = b2 * *v + (F::one() - b2) * g * g;
                    let m_hat = *m / corr1;
                    let v_hat = *v / corr2;
                    *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                },
            );
        }
        model.set_parameters(&params)?;
        Ok(StepOutcome::Applied)
    }

    /// Raw moment tensors, for checkpointing: `(m, v)` in parameter order.
    pub fn moments(&self) -> (&[ArrayD<F>], &[ArrayD<F>]) {
        (&self.m, &self.v)
    }

    /// Restores moments saved by [`AdamState::moments`].
    pub fn restore(
        model: &SegModel<F>,
        config: AdamConfig,
        m: Vec<ArrayD<F>>,
        v: Vec<ArrayD<F>>,
        t: u64,
        skipped_steps: u64,
    ) -> Result<Self> {
        let fresh = Self::new(model, config)?;
        if m.len() != fresh.m.len() || v.len() != fresh.v.len() {
            return Err(Error::Incompatible(
                "optimizer state does not match model parameter layout".into(),
            ));
        }
        for (a, b) in fresh.m.iter().zip(m.iter()) {
            if a.shape() != b.shape() {
                return Err(Error::Incompatible(
                    "optimizer moment shapes do not match model".into(),
                ));
            }
        }
        Ok(Self {
            config,
            m,
            v,
            t,
            skipped_steps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmodel::testutil::tiny_arch;

    fn zero_grads(model: &SegModel<f64>) -> Gradients<f64> {
        Gradients {
            tensors: model
                .parameters()
                .items
                .iter()
                .map(|(_, t)| ArrayD::zeros(t.raw_dim()))
                .collect(),
        }
    }

    #[test]
    fn zero_gradients_leave_parameters_bit_unchanged() {
        let mut model = SegModel::<f64>::new(tiny_arch(), 1).unwrap();
        let before = model.parameters();
        let mut adam = AdamState::new(&model, AdamConfig::default()).unwrap();
        let g = zero_grads(&model);
        for _ in 0..3 {
            assert_eq!(adam.step(&mut model, &g).unwrap(), StepOutcome::Applied);
        }
        assert_eq!(model.parameters(), before);
    }

    #[test]
    fn positive_gradient_decreases_parameter() {
        let mut model = SegModel::<f64>::new(tiny_arch(), 2).unwrap();
        let before = model.parameters().items[0].1.as_slice().unwrap()[0];
        let mut g = zero_grads(&model);
        g.tensors[0].as_slice_mut().unwrap()[0] = 0.5;
        let mut adam = AdamState::new(&model, AdamConfig::with_lr(1e-3)).unwrap();
        adam.step(&mut model, &g).unwrap();
        let after = model.parameters().items[0].1.as_slice().unwrap()[0];
        assert!(after < before);
        // First-step Adam magnitude is ≈ lr regardless of gradient scale.
        assert!((before - after - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn nan_gradient_skips_step_and_counts() {
        let mut model = SegModel::<f64>::new(tiny_arch(), 3).unwrap();
        let before = model.parameters();
        let mut g = zero_grads(&model);
        g.tensors[2].as_slice_mut().unwrap()[0] = f64::NAN;
        let mut adam = AdamState::new(&model, AdamConfig::default()).unwrap();
        assert_eq!(
            adam.step(&mut model, &g).unwrap(),
            StepOutcome::SkippedNonFinite
        );
        assert_eq!(model.parameters(), before);
        assert_eq!(adam.skipped_steps, 1);
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn identical_problems_take_identical_trajectories() {
        let mut m1 = SegModel::<f64>::new(tiny_arch(), 4).unwrap();
        let mut m2 = SegModel::<f64>::new(tiny_arch(), 4).unwrap();
        let mut a1 = AdamState::new(&m1, AdamConfig::default()).unwrap();
        let mut a2 = AdamState::new(&m2, AdamConfig::default()).unwrap();
        let mut g = zero_grads(&m1);
        for (i, t) in g.tensors.iter_mut().enumerate() {
            t.fill(0.01 * (i as f64 + 1.0));
        }
        for _ in 0..5 {
            a1.step(&mut m1, &g).unwrap();
            a2.step(&mut m2, &g).unwrap();
        }
        assert_eq!(m1.parameters(), m2.parameters());
    }

    #[test]
    fn config_validation() {
        assert!(AdamConfig::with_lr(0.0).validate().is_err());
        assert!(AdamConfig {
            beta1: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AdamConfig::default().validate().is_ok());
    }
}
