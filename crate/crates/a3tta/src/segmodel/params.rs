//! Flat named views of learnable weights, and the teacher blend.

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Ordered, named learnable tensors of one model. Two sets from the same
/// architecture always agree in names, order, and shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<F: Scalar> {
    pub items: Vec<(String, ArrayD<F>)>,
}

impl<F: Scalar> ParameterSet<F> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.items.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|(n, _)| n.as_str())
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::shape("parameter count", self.len(), other.len()));
        }
        for ((na, ta), (nb, tb)) in self.items.iter().zip(other.items.iter()) {
            if na != nb {
                return Err(Error::Incompatible(format!(
                    "parameter name mismatch: {na} vs {nb}"
                )));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::shape(
                    format!("parameter {na}"),
                    format!("{:?}", ta.shape()),
                    format!("{:?}", tb.shape()),
                ));
            }
        }
        Ok(())
    }
}

/// Convex blend `(1−rate)·a + rate·b`, elementwise.
///
/// Endpoints return exact copies, and interior rates are computed as
/// `a + rate·(b−a)` clamped into the [min, max] envelope, so each result
/// scalar always lies between the two inputs even under rounding.
pub fn blend_parameters<F: Scalar>(
    a: &ParameterSet<F>,
    b: &ParameterSet<F>,
    rate: F,
) -> Result<ParameterSet<F>> {
    if !(F::zero()..=F::one()).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "blend rate {} outside [0, 1]",
            rate.to_f64()
        )));
    }
    a.check_compatible(b)?;
    if rate == F::zero() {
        return Ok(a.clone());
    }
    if rate == F::one() {
        return Ok(b.clone());
    }
    let items = a
        .items
        .iter()
        .zip(b.items.iter())
        .map(|((name, ta), (_, tb))| {
            let mut out = ta.clone();
            ndarray::Zip::from(&mut out).and(tb).for_each(|o, &vb| {
                let va = *o;
                let raw = va + rate * (vb - va);
                *o = raw.max(va.min(vb)).min(va.max(vb));
            });
            (name.clone(), out)
        })
        .collect();
    Ok(ParameterSet { items })
}

/// Parameter gradients in [`super::SegModel::parameters`] order.
#[derive(Debug, Clone)]
pub struct Gradients<F: Scalar> {
    pub tensors: Vec<ArrayD<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.iter().all(|v| (*v).to_f64().is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| (*v).to_f64().abs())
            .fold(0.0, f64::max)
    }

    /// Adds `other` scaled by `w` into `self`.
    pub fn add_scaled(&mut self, other: &Gradients<F>, w: F) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::shape(
                "gradient tensor count",
                self.tensors.len(),
                other.tensors.len(),
            ));
        }
        for (a, b) in self.tensors.iter_mut().zip(other.tensors.iter()) {
            ndarray::Zip::from(a).and(b).for_each(|x, &y| {
                *x = *x + w * y;
            });
        }
        Ok(())
    }

    pub fn zeros_like(template: &Gradients<F>) -> Gradients<F> {
        Gradients {
            tensors: template
                .tensors
                .iter()
                .map(|t| ArrayD::zeros(t.raw_dim()))
                .collect(),
        }
    }
}
