//! Adaptation losses over probability maps, with analytic gradients.
//!
//! All logarithms are base 2 so the 1/log₂C normalization puts the
//! cross-entropy style terms on a [0, 1] scale. Probabilities are clamped to
//! [`CLAMP_MIN`, 1] inside every log; the clamp is not renormalized, and the
//! multiplier outside the log stays raw. Gradient functions mirror the
//! clamped values exactly so finite differences agree.
//!
//! Each loss is defined per image; batch handling (mean over images) belongs
//! to the caller.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::ProbabilityMap;
use crate::scalar::Scalar;

/// Lower clamp applied to probabilities before logs.
pub const CLAMP_MIN: f64 = 1e-7;

fn log2_clamped<F: Scalar>(p: F) -> F {
    let lo = F::from_f64(CLAMP_MIN);
    let hi = F::one();
    p.max(lo).min(hi).log2()
}

fn check_same_shape<F: Scalar>(
    a: &ProbabilityMap<F>,
    b: &ProbabilityMap<F>,
    what: &str,
) -> Result<()> {
    if a.view().dim() != b.view().dim() {
        return Err(Error::shape(
            what,
            format!("{:?}", a.view().dim()),
            format!("{:?}", b.view().dim()),
        ));
    }
    if a.num_classes() < 2 {
        return Err(Error::InvalidArgument(format!(
            "{what} needs at least 2 classes"
        )));
    }
    Ok(())
}

/// Per-pixel entropy map, base 2: `E_n = −Σ_c p log₂ p`.
pub fn pixel_entropy<F: Scalar>(p: &ProbabilityMap<F>) -> Array2<F> {
    let (c, h, w) = p.view().dim();
    let mut out = Array2::zeros((h, w));
    let v = p.view();
    for y in 0..h {
        for x in 0..w {
            let mut e = F::zero();
            for k in 0..c {
                let pv = v[(k, y, x)];
                e = e - pv * log2_clamped(pv);
            }
            out[(y, x)] = e;
        }
    }
    out
}

/// Mean over pixels of [`pixel_entropy`]. Drives the entropy filter score and
/// the entropy-minimization baseline.
pub fn mean_entropy<F: Scalar>(p: &ProbabilityMap<F>) -> F {
    let n = F::from_f64(p.num_pixels() as f64);
    pixel_entropy(p).iter().copied().sum::<F>() / n
}

/// d(mean entropy)/dp, same shape as `p`.
pub fn mean_entropy_grad<F: Scalar>(p: &ProbabilityMap<F>) -> Array3<F> {
    let n = F::from_f64(p.num_pixels() as f64);
    let mut g = Array3::zeros(p.view().dim());
    for (idx, &pv) in p.view().indexed_iter() {
        g[idx] = entropy_term_grad(pv) / n;
    }
    g
}

/// Derivative of `−p·log₂(clamp(p))` w.r.t. `p`.
///
/// Below the clamp the log is a constant, so the slope is `−log₂(CLAMP_MIN)`.
fn entropy_term_grad<F: Scalar>(p: F) -> F {
    let lo = F::from_f64(CLAMP_MIN);
    if p >= lo {
        -p.log2() - F::from_f64(std::f64::consts::LOG2_E)
    } else {
        -lo.log2()
    }
}

/// Cross-entropy of `pred` against a stop-gradient `target`, normalized to
/// the [0, 1] scale: `−1/(N·log₂C) Σ_{n,c} target·log₂ pred`.
pub fn semantic_loss<F: Scalar>(
    target: &ProbabilityMap<F>,
    pred: &ProbabilityMap<F>,
) -> Result<F> {
    check_same_shape(target, pred, "semantic_loss inputs")?;
    let norm = normalizer(pred);
    let mut acc = F::zero();
    for (t, p) in target.view().iter().zip(pred.view().iter()) {
        acc = acc - *t * log2_clamped(*p);
    }
    Ok(acc * norm)
}

/// dL_sem/dpred. Zero where the clamp is active (the clamped log is constant
/// there).
pub fn semantic_loss_grad<F: Scalar>(
    target: &ProbabilityMap<F>,
    pred: &ProbabilityMap<F>,
) -> Result<Array3<F>> {
    check_same_shape(target, pred, "semantic_loss inputs")?;
    let norm = normalizer(pred);
    let lo = F::from_f64(CLAMP_MIN);
    let inv_ln2 = F::from_f64(std::f64::consts::LOG2_E);
    let mut g = Array3::zeros(pred.view().dim());
    for (idx, p) in pred.view().indexed_iter() {
        let t = target.view()[idx];
        if *p >= lo {
            g[idx] = -t * inv_ln2 / *p * norm;
        }
    }
    Ok(g)
}

fn normalizer<F: Scalar>(p: &ProbabilityMap<F>) -> F {
    let n = p.num_pixels() as f64;
    let c = p.num_classes() as f64;
    F::from_f64(1.0 / (n * c.log2()))
}

/// Mean absolute difference of the per-pixel entropies of `pred` and the
/// stop-gradient `refined`: `(1/N) Σ_n |E(pred_n) − E(refined_n)|`.
pub fn boundary_entropy_loss<F: Scalar>(
    refined: &ProbabilityMap<F>,
    pred: &ProbabilityMap<F>,
) -> Result<F> {
    check_same_shape(refined, pred, "boundary_entropy_loss inputs")?;
    let e_pred = pixel_entropy(pred);
    let e_ref = pixel_entropy(refined);
    let n = F::from_f64(pred.num_pixels() as f64);
    let mut acc = F::zero();
    for (a, b) in e_pred.iter().zip(e_ref.iter()) {
        acc = acc + (*a - *b).abs();
    }
    Ok(acc / n)
}

/// dL_be/dpred, with `sign(0) = 0` at equal entropies.
pub fn boundary_entropy_loss_grad<F: Scalar>(
    refined: &ProbabilityMap<F>,
    pred: &ProbabilityMap<F>,
) -> Result<Array3<F>> {
    check_same_shape(refined, pred, "boundary_entropy_loss inputs")?;
    let e_pred = pixel_entropy(pred);
    let e_ref = pixel_entropy(refined);
    let n = F::from_f64(pred.num_pixels() as f64);
    let (c, h, w) = pred.view().dim();
    let mut g = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let d = e_pred[(y, x)] - e_ref[(y, x)];
            let s = if d > F::zero() {
                F::one()
            } else if d < F::zero() {
                -F::one()
            } else {
                F::zero()
            };
            if s != F::zero() {
                for k in 0..c {
                    g[(k, y, x)] = s * entropy_term_grad(pred.view()[(k, y, x)]) / n;
                }
            }
        }
    }
    Ok(g)
}

/// Divergence of the student from a stop-gradient teacher: identical formula
/// to [`semantic_loss`] with the teacher as target. Doubles as the raw
/// self-adaptive EMA rate before clamping.
pub fn teacher_divergence<F: Scalar>(
    teacher: &ProbabilityMap<F>,
    student: &ProbabilityMap<F>,
) -> Result<F> {
    semantic_loss(teacher, student)
}

pub fn teacher_divergence_grad<F: Scalar>(
    teacher: &ProbabilityMap<F>,
    student: &ProbabilityMap<F>,
) -> Result<Array3<F>> {
    semantic_loss_grad(teacher, student)
}

/// EMA rate from a divergence value: clamped to [0, 1]. NaN propagates so the
/// caller's incident handling can see it.
pub fn ema_rate_from_divergence(d: f64) -> f64 {
    d.min(1.0).max(0.0)
}

/// One step's loss values and weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sem: f64,
    pub be: f64,
    pub mt: f64,
    pub beta: f64,
    pub gamma: f64,
    pub total: f64,
}

/// Combines the three terms: `total = sem + beta·be + gamma·mt`.
pub fn total_loss(sem: f64, be: f64, mt: f64, beta: f64, gamma: f64) -> LossBreakdown {
    LossBreakdown {
        sem,
        be,
        mt,
        beta,
        gamma,
        total: sem + beta * be + gamma * mt,
    }
}
