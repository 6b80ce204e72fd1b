//! Network building blocks with explicit forward and backward passes.
//!
//! Convolutions run as im2col + GEMM per image so the heavy lifting lands in
//! `ndarray::dot`. Backward passes take the forward inputs or caches they
//! need as arguments; layers themselves hold only parameters.

use ndarray::{s, Array1, Array2, Array4, ArrayView3, Axis};
use rand::Rng;

use crate::scalar::Scalar;

/// Same-padding 2D convolution, square odd kernel (or 1×1).
#[derive(Debug, Clone)]
pub struct Conv2d<F: Scalar> {
    /// `[out_ch, in_ch, k, k]`
    pub weight: Array4<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Conv2d<F> {
    /// He-normal initialization; biases start at zero.
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, k: usize, rng: &mut R) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd for same padding");
        let std = (2.0 / (in_ch * k * k) as f64).sqrt();
        let weight = Array4::from_shape_simple_fn((out_ch, in_ch, k, k), || {
            F::standard_normal(rng) * F::from_f64(std)
        });
        Self {
            weight,
            bias: Array1::zeros(out_ch),
        }
    }

    fn k(&self) -> usize {
        self.weight.dim().2
    }

    fn pad(&self) -> usize {
        self.k() / 2
    }

    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let (b, ci, h, w) = x.dim();
        let co = self.weight.dim().0;
        let k = self.k();
        let wmat = self
            .weight
            .view()
            .into_shape_with_order((co, ci * k * k))
            .expect("weight is contiguous");
        let mut y = Array4::zeros((b, co, h, w));
        let mut cols = Array2::zeros((ci * k * k, h * w));
        for i in 0..b {
            let xi = x.index_axis(Axis(0), i);
            let mut yi = if k == 1 {
                let flat = xi.into_shape_with_order((ci, h * w)).expect("contiguous");
                wmat.dot(&flat)
            } else {
                im2col(&xi, k, self.pad(), &mut cols);
                wmat.dot(&cols)
            };
            for (c, mut row) in yi.axis_iter_mut(Axis(0)).enumerate() {
                row += self.bias[c];
            }
            y.index_axis_mut(Axis(0), i)
                .assign(&yi.into_shape_with_order((co, h, w)).expect("contiguous"));
        }
        y
    }

    /// Returns `(dx, dweight, dbias)` for upstream gradient `dy`.
    pub fn backward(&self, x: &Array4<F>, dy: &Array4<F>) -> (Array4<F>, Array4<F>, Array1<F>) {
        let (b, ci, h, w) = x.dim();
        let co = self.weight.dim().0;
        let k = self.k();
        let wmat = self
            .weight
            .view()
            .into_shape_with_order((co, ci * k * k))
            .expect("contiguous");
        let mut dwmat = Array2::<F>::zeros((co, ci * k * k));
        let mut db = Array1::<F>::zeros(co);
        let mut dx = Array4::<F>::zeros((b, ci, h, w));
        let mut cols = Array2::zeros((ci * k * k, h * w));
        for i in 0..b {
            let xi = x.index_axis(Axis(0), i);
            let dyi = dy
                .index_axis(Axis(0), i)
                .into_shape_with_order((co, h * w))
                .expect("contiguous");
            db += &dyi.sum_axis(Axis(1));
            let dcols = wmat.t().dot(&dyi);
            if k == 1 {
                let flat = xi.into_shape_with_order((ci, h * w)).expect("contiguous");
                dwmat += &dyi.dot(&flat.t());
                dx.index_axis_mut(Axis(0), i)
                    .assign(&dcols.into_shape_with_order((ci, h, w)).expect("contiguous"));
            } else {
                im2col(&xi, k, self.pad(), &mut cols);
                dwmat += &dyi.dot(&cols.t());
                col2im(&dcols, k, self.pad(), &mut dx.index_axis_mut(Axis(0), i));
            }
        }
        let dw = dwmat
            .into_shape_with_order((co, ci, k, k))
            .expect("contiguous");
        (dx, dw, db)
    }
}

/// Unrolls `src[c, y+ky−pad, x+kx−pad]` into `cols[(c·k+ky)·k+kx, y·w+x]`,
/// zero outside the image.
fn im2col<F: Scalar>(src: &ArrayView3<'_, F>, k: usize, pad: usize, cols: &mut Array2<F>) {
    let (ci, h, w) = src.dim();
    cols.fill(F::zero());
    for c in 0..ci {
        for ky in 0..k {
            let y0 = pad.saturating_sub(ky);
            let y1 = (h + pad).saturating_sub(ky).min(h);
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let x0 = pad.saturating_sub(kx);
                let x1 = (w + pad).saturating_sub(kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                let sx0 = x0 + kx - pad;
                for y in y0..y1 {
                    let sy = y + ky - pad;
                    cols.slice_mut(s![row, y * w + x0..y * w + x1])
                        .assign(&src.slice(s![c, sy, sx0..sx0 + (x1 - x0)]));
                }
            }
        }
    }
}

/// Scatter-add inverse of [`im2col`].
fn col2im<F: Scalar>(
    dcols: &Array2<F>,
    k: usize,
    pad: usize,
    dst: &mut ndarray::ArrayViewMut3<'_, F>,
) {
    let (ci, h, w) = dst.dim();
    for c in 0..ci {
        for ky in 0..k {
            let y0 = pad.saturating_sub(ky);
            let y1 = (h + pad).saturating_sub(ky).min(h);
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let x0 = pad.saturating_sub(kx);
                let x1 = (w + pad).saturating_sub(kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                let sx0 = x0 + kx - pad;
                for y in y0..y1 {
                    let sy = y + ky - pad;
                    let mut d = dst.slice_mut(s![c, sy, sx0..sx0 + (x1 - x0)]);
                    d += &dcols.slice(s![row, y * w + x0..y * w + x1]);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<F: Scalar> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub eps: F,
    pub momentum: F,
}

/// Per-channel statistics of one batch-mode forward, kept for backward and
/// for the explicit running-stat update.
#[derive(Debug, Clone)]
pub struct BnCache<F: Scalar> {
    pub xhat: Array4<F>,
    pub inv_std: Array1<F>,
    pub batch_mean: Array1<F>,
    /// Biased (divide-by-m) variance, as used for normalization.
    pub batch_var: Array1<F>,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: F::from_f64(eps),
            momentum: F::from_f64(momentum),
        }
    }

    /// Normalizes with this batch's own statistics. Does not touch the
    /// running estimates; see [`BatchNorm2d::apply_running_update`].
    pub fn forward_batch(&self, x: &Array4<F>) -> (Array4<F>, BnCache<F>) {
        let (b, c, h, w) = x.dim();
        let m = F::from_f64((b * h * w) as f64);
        let mut mean = Array1::<F>::zeros(c);
        let mut var = Array1::<F>::zeros(c);
        for ch in 0..c {
            let lane = x.slice(s![.., ch, .., ..]);
            let mu = lane.iter().copied().sum::<F>() / m;
            let v = lane.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / m;
            mean[ch] = mu;
            var[ch] = v;
        }
        let inv_std = var.mapv(|v| F::one() / (v + self.eps).sqrt());
        let mut xhat = x.clone();
        let mut y = Array4::zeros((b, c, h, w));
        for ch in 0..c {
            let mu = mean[ch];
            let is = inv_std[ch];
            let (g, be) = (self.gamma[ch], self.beta[ch]);
            let mut xh = xhat.slice_mut(s![.., ch, .., ..]);
            xh.mapv_inplace(|v| (v - mu) * is);
            y.slice_mut(s![.., ch, .., ..]).assign(&xh.mapv(|v| g * v + be));
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
            },
        )
    }

    /// Normalizes with the stored running statistics.
    pub fn forward_running(&self, x: &Array4<F>) -> Array4<F> {
        let (b, c, h, w) = x.dim();
        let mut y = Array4::zeros((b, c, h, w));
        for ch in 0..c {
            let is = F::one() / (self.running_var[ch] + self.eps).sqrt();
            let mu = self.running_mean[ch];
            let (g, be) = (self.gamma[ch], self.beta[ch]);
            y.slice_mut(s![.., ch, .., ..])
                .assign(&x.slice(s![.., ch, .., ..]).mapv(|v| g * (v - mu) * is + be));
        }
        y
    }

    /// Folds one batch's statistics into the running estimates with the
    /// configured momentum; the variance enters with the unbiased (m−1)
    /// correction.
    pub fn apply_running_update(&mut self, cache: &BnCache<F>) {
        let dims = cache.xhat.dim();
        let m = (dims.0 * dims.2 * dims.3) as f64;
        let correction = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        let corr = F::from_f64(correction);
        let mom = self.momentum;
        let keep = F::one() - mom;
        for ch in 0..self.running_mean.len() {
            self.running_mean[ch] = keep * self.running_mean[ch] + mom * cache.batch_mean[ch];
            self.running_var[ch] = keep * self.running_var[ch] + mom * cache.batch_var[ch] * corr;
        }
    }

    /// Returns `(dx, dgamma, dbeta)`.
    pub fn backward(&self, cache: &BnCache<F>, dy: &Array4<F>) -> (Array4<F>, Array1<F>, Array1<F>) {
        let (b, c, h, w) = dy.dim();
        let m = F::from_f64((b * h * w) as f64);
        let mut dgamma = Array1::<F>::zeros(c);
        let mut dbeta = Array1::<F>::zeros(c);
        let mut dx = Array4::<F>::zeros((b, c, h, w));
        for ch in 0..c {
            let dy_l = dy.slice(s![.., ch, .., ..]);
            let xh_l = cache.xhat.slice(s![.., ch, .., ..]);
            let g = self.gamma[ch];
            let is = cache.inv_std[ch];
            let sum_dy = dy_l.iter().copied().sum::<F>();
            let sum_dy_xh = dy_l.iter().zip(xh_l.iter()).map(|(&a, &b)| a * b).sum::<F>();
            dgamma[ch] = sum_dy_xh;
            dbeta[ch] = sum_dy;
            // dxhat = g·dy; dx = is/m·(m·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
            let mut dx_l = dx.slice_mut(s![.., ch, .., ..]);
            ndarray::Zip::from(&mut dx_l)
                .and(&dy_l)
                .and(&xh_l)
                .for_each(|d, &dyv, &xhv| {
                    *d = g * is / m * (m * dyv - sum_dy - xhv * sum_dy_xh);
                });
        }
        (dx, dgamma, dbeta)
    }
}

pub fn relu_forward<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    x.mapv(|v| v.max(F::zero()))
}

/// Backward through ReLU given its OUTPUT (the mask is `out > 0`).
pub fn relu_backward<F: Scalar>(out: &Array4<F>, dy: &Array4<F>) -> Array4<F> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(out).for_each(|d, &o| {
        if o <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

/// 2×2 max pooling, stride 2. Returns the pooled map and the in-window
/// argmax (0..4, row-major; ties take the first).
pub fn maxpool_forward<F: Scalar>(x: &Array4<F>) -> (Array4<F>, Array4<u8>) {
    let (b, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::zeros((b, c, oh, ow));
    let mut idx = Array4::zeros((b, c, oh, ow));
    for i in 0..b {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = x[(i, ch, 2 * oy, 2 * ox)];
                    let mut bi = 0u8;
                    for (j, (dy, dx)) in [(0, 1), (1, 0), (1, 1)].iter().enumerate() {
                        let v = x[(i, ch, 2 * oy + dy, 2 * ox + dx)];
                        if v > best {
                            best = v;
                            bi = (j + 1) as u8;
                        }
                    }
                    y[(i, ch, oy, ox)] = best;
                    idx[(i, ch, oy, ox)] = bi;
                }
            }
        }
    }
    (y, idx)
}

pub fn maxpool_backward<F: Scalar>(idx: &Array4<u8>, dy: &Array4<F>, h: usize, w: usize) -> Array4<F> {
    let (b, c, oh, ow) = dy.dim();
    let mut dx = Array4::zeros((b, c, h, w));
    for i in 0..b {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let j = idx[(i, ch, oy, ox)] as usize;
                    let (py, px) = (2 * oy + j / 2, 2 * ox + j % 2);
                    dx[(i, ch, py, px)] = dy[(i, ch, oy, ox)];
                }
            }
        }
    }
    dx
}

/// Nearest-neighbor 2× upsampling.
pub fn upsample_forward<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::zeros((b, c, 2 * h, 2 * w));
    for i in 0..b {
        for ch in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    let v = x[(i, ch, yy, xx)];
                    for dy in 0..2 {
                        for dx in 0..2 {
                            y[(i, ch, 2 * yy + dy, 2 * xx + dx)] = v;
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn upsample_backward<F: Scalar>(dy: &Array4<F>) -> Array4<F> {
    let (b, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::zeros((b, c, h, w));
    for i in 0..b {
        for ch in 0..c {
            for yy in 0..h2 {
                for xx in 0..w2 {
                    dx[(i, ch, yy / 2, xx / 2)] =
                        dx[(i, ch, yy / 2, xx / 2)] + dy[(i, ch, yy, xx)];
                }
            }
        }
    }
    dx
}

/// Inverted dropout; scales kept activations by 1/(1−rate). Rate 0 passes
/// the input through untouched.
pub fn dropout<F: Scalar, R: Rng + ?Sized>(x: &Array4<F>, rate: f64, rng: &mut R) -> Array4<F> {
    if rate == 0.0 {
        return x.clone();
    }
    let keep = F::from_f64(1.0 / (1.0 - rate));
    x.mapv(|v| {
        if rng.gen::<f64>() < rate {
            F::zero()
        } else {
            v * keep
        }
    })
}

/// Conv → optional BN → ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock<F: Scalar> {
    pub conv: Conv2d<F>,
    pub bn: Option<BatchNorm2d<F>>,
}

#[derive(Debug, Clone)]
pub struct ConvBlockCache<F: Scalar> {
    pub conv_in: Array4<F>,
    pub bn: Option<BnCache<F>>,
    /// Block output (post-ReLU); doubles as the ReLU mask.
    pub out: Array4<F>,
}

#[derive(Debug)]
pub struct ConvBlockGrads<F: Scalar> {
    pub dw: Array4<F>,
    pub db: Array1<F>,
    pub dgamma: Option<Array1<F>>,
    pub dbeta: Option<Array1<F>>,
}

impl<F: Scalar> ConvBlock<F> {
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        batch_norm: bool,
        bn_eps: f64,
        bn_momentum: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(in_ch, out_ch, 3, rng),
            bn: batch_norm.then(|| BatchNorm2d::new(out_ch, bn_eps, bn_momentum)),
        }
    }

    pub fn forward_batch(&self, x: &Array4<F>) -> (Array4<F>, ConvBlockCache<F>) {
        let pre = self.conv.forward(x);
        let (post, bn_cache) = match &self.bn {
            Some(bn) => {
                let (y, c) = bn.forward_batch(&pre);
                (y, Some(c))
            }
            None => (pre, None),
        };
        let out = relu_forward(&post);
        (
            out.clone(),
            ConvBlockCache {
                conv_in: x.clone(),
                bn: bn_cache,
                out,
            },
        )
    }

    pub fn forward_running(&self, x: &Array4<F>) -> Array4<F> {
        let pre = self.conv.forward(x);
        let post = match &self.bn {
            Some(bn) => bn.forward_running(&pre),
            None => pre,
        };
        relu_forward(&post)
    }

    pub fn backward(
        &self,
        cache: &ConvBlockCache<F>,
        dy: &Array4<F>,
    ) -> (Array4<F>, ConvBlockGrads<F>) {
        let d_post = relu_backward(&cache.out, dy);
        let (d_pre, dgamma, dbeta) = match (&self.bn, &cache.bn) {
            (Some(bn), Some(c)) => {
                let (dx, dg, db) = bn.backward(c, &d_post);
                (dx, Some(dg), Some(db))
            }
            _ => (d_post, None, None),
        };
        let (dx, dw, db) = self.conv.backward(&cache.conv_in, &d_pre);
        (
            dx,
            ConvBlockGrads {
                dw,
                db,
                dgamma,
                dbeta,
            },
        )
    }
}
