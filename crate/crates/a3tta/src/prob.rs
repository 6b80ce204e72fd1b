//! Per-pixel class probability maps.

use ndarray::{Array2, Array3, Array4, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Largest allowed deviation of a per-pixel channel sum from 1.
pub const SUM_TOLERANCE: f64 = 1e-6;

/// A dense per-pixel categorical distribution, stored `[C, H, W]`.
///
/// Entries are nonnegative and each pixel's channel sum is 1 within
/// [`SUM_TOLERANCE`]. Construction through [`ProbabilityMap::new`] validates
/// this; internal producers that guarantee it by construction (softmax,
/// one-hot) use the unchecked path.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap<F: Scalar>(Array3<F>);

impl<F: Scalar> ProbabilityMap<F> {
    pub fn new(values: Array3<F>) -> Result<Self> {
        let (c, _, _) = values.dim();
        if c == 0 {
            return Err(Error::InvalidArgument(
                "probability map needs at least one class channel".into(),
            ));
        }
        for (idx, v) in values.indexed_iter() {
            let v = (*v).to_f64();
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "probability map entry {idx:?} is {v}, want finite and >= 0"
                )));
            }
        }
        for (pos, pixel) in values.lanes(Axis(0)).into_iter().enumerate() {
            let sum: f64 = pixel.iter().map(|v| (*v).to_f64()).sum();
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::InvalidArgument(format!(
                    "pixel {pos} channel sum {sum} deviates from 1 by more than {SUM_TOLERANCE}"
                )));
            }
        }
        Ok(Self(values))
    }

    /// Wraps values the caller proved valid (softmax output, one-hot).
    pub(crate) fn new_unchecked(values: Array3<F>) -> Self {
        Self(values)
    }

    /// Uniform distribution over `c` classes at every pixel.
    pub fn uniform(c: usize, h: usize, w: usize) -> Self {
        Self(Array3::from_elem((c, h, w), F::from_f64(1.0 / c as f64)))
    }

    /// One-hot encoding of a label mask. Labels must be `< c`.
    pub fn from_labels(labels: &Array2<u8>, c: usize) -> Result<Self> {
        let (h, w) = labels.dim();
        let mut out = Array3::zeros((c, h, w));
        for ((y, x), &l) in labels.indexed_iter() {
            if usize::from(l) >= c {
                return Err(Error::InvalidArgument(format!(
                    "label {l} at ({y}, {x}) outside {c} classes"
                )));
            }
            out[(usize::from(l), y, x)] = F::one();
        }
        Ok(Self(out))
    }

    pub fn num_classes(&self) -> usize {
        self.0.dim().0
    }

    pub fn height(&self) -> usize {
        self.0.dim().1
    }

    pub fn width(&self) -> usize {
        self.0.dim().2
    }

    /// Number of pixels.
    pub fn num_pixels(&self) -> usize {
        self.height() * self.width()
    }

    pub fn view(&self) -> ArrayView3<'_, F> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array3<F> {
        self.0
    }

    /// Per-pixel argmax; ties resolve to the lowest class index.
    pub fn argmax_labels(&self) -> Array2<u8> {
        let (c, h, w) = self.0.dim();
        let mut out = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                for k in 1..c {
                    if self.0[(k, y, x)] > self.0[(best, y, x)] {
                        best = k;
                    }
                }
                out[(y, x)] = best as u8;
            }
        }
        out
    }
}

/// Splits a `[B, C, H, W]` probability batch into per-image maps.
///
/// The batch must come from a validated producer; per-image wrappers are
/// created unchecked.
pub fn split_batch<F: Scalar>(batch: &Array4<F>) -> Vec<ProbabilityMap<F>> {
    batch
        .axis_iter(Axis(0))
        .map(|img| ProbabilityMap::new_unchecked(img.to_owned()))
        .collect()
}

/// Per-pixel argmax over a probability batch, `[B, H, W]` labels out.
pub fn argmax_batch<F: Scalar>(batch: &Array4<F>) -> ndarray::Array3<u8> {
    let (b, c, h, w) = batch.dim();
    let mut out = ndarray::Array3::zeros((b, h, w));
    for i in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                for k in 1..c {
                    if batch[(i, k, y, x)] > batch[(i, best, y, x)] {
                        best = k;
                    }
                }
                out[(i, y, x)] = best as u8;
            }
        }
    }
    out
}
