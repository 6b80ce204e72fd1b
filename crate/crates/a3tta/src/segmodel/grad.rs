//! Assembly of the adaptation loss gradient w.r.t. student parameters.
//!
//! The refined pseudo labels and teacher predictions are constants here
//! (stop-gradient); only the student's own probability output carries
//! gradient, which then flows back through softmax and the network.

use ndarray::{Array4, Axis};

use super::{BnMode, ForwardCache, Gradients, SegModel};
use crate::error::{Error, Result};
use crate::losses::{
    boundary_entropy_loss, boundary_entropy_loss_grad, semantic_loss, semantic_loss_grad,
    teacher_divergence, teacher_divergence_grad, total_loss, LossBreakdown,
};
use crate::prob::ProbabilityMap;
use crate::scalar::Scalar;

/// Loss term weights (β for boundary entropy, γ for the teacher term).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientWeights {
    pub beta: f64,
    pub gamma: f64,
}

/// Batch-mean losses plus the parameter gradient that produced them.
#[derive(Debug)]
pub struct LossComputation<F: Scalar> {
    pub grads: Gradients<F>,
    pub breakdown: LossBreakdown,
}

/// Computes losses and parameter gradients from an already-run student
/// forward. `refined` holds one stop-gradient target map per image;
/// `teacher_probs` is the teacher's output on the same batch.
pub fn loss_and_gradient<F: Scalar>(
    model: &SegModel<F>,
    fwd: &ForwardCache<F>,
    refined: &[ProbabilityMap<F>],
    teacher_probs: &Array4<F>,
    weights: &GradientWeights,
) -> Result<LossComputation<F>> {
    let probs = fwd.probs();
    let (b, c, h, w) = probs.dim();
    if refined.len() != b {
        return Err(Error::shape("refined target count", b, refined.len()));
    }
    if teacher_probs.dim() != probs.dim() {
        return Err(Error::shape(
            "teacher probability batch",
            format!("{:?}", probs.dim()),
            format!("{:?}", teacher_probs.dim()),
        ));
    }
    let inv_b = F::from_f64(1.0 / b as f64);
    let beta = F::from_f64(weights.beta);
    let gamma = F::from_f64(weights.gamma);

    let mut dprobs = Array4::<F>::zeros((b, c, h, w));
    let (mut sem_sum, mut be_sum, mut mt_sum) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..b {
        let p = ProbabilityMap::new_unchecked(probs.index_axis(Axis(0), i).to_owned());
        let p_hat = ProbabilityMap::new_unchecked(teacher_probs.index_axis(Axis(0), i).to_owned());
        let p_ref = &refined[i];

        sem_sum += semantic_loss(p_ref, &p)?.to_f64();
        be_sum += boundary_entropy_loss(p_ref, &p)?.to_f64();
        mt_sum += teacher_divergence(&p_hat, &p)?.to_f64();

        let mut g = semantic_loss_grad(p_ref, &p)?;
        if weights.beta != 0.0 {
            let gb = boundary_entropy_loss_grad(p_ref, &p)?;
            ndarray::Zip::from(&mut g).and(&gb).for_each(|a, &x| {
                *a = *a + beta * x;
            });
        }
        if weights.gamma != 0.0 {
            let gm = teacher_divergence_grad(&p_hat, &p)?;
            ndarray::Zip::from(&mut g).and(&gm).for_each(|a, &x| {
                *a = *a + gamma * x;
            });
        }
        dprobs
            .index_axis_mut(Axis(0), i)
            .assign(&g.mapv(|v| v * inv_b));
    }

    let grads = model.backward(&fwd.cache, &dprobs)?;
    let bf = b as f64;
    Ok(LossComputation {
        grads,
        breakdown: total_loss(
            sem_sum / bf,
            be_sum / bf,
            mt_sum / bf,
            weights.beta,
            weights.gamma,
        ),
    })
}

/// Convenience wrapper: runs the student (batch statistics) and teacher
/// forwards itself, then delegates to [`loss_and_gradient`].
pub fn gradient_of_loss<F: Scalar>(
    model: &SegModel<F>,
    teacher: &SegModel<F>,
    batch: &Array4<F>,
    refined: &[ProbabilityMap<F>],
    weights: &GradientWeights,
    teacher_mode: BnMode,
) -> Result<LossComputation<F>> {
    let fwd = model.forward_cached(batch)?;
    let teacher_probs = teacher.forward(batch, teacher_mode)?;
    loss_and_gradient(model, &fwd, refined, &teacher_probs, weights)
}
