//! Encoder-decoder segmentation network with an exposed bottleneck.
//!
//! The model is deliberately small: a U-Net shape whose bottleneck can be
//! extracted, replaced, and decoded against the original skip connections.
//! Forward, backward, and the optimizer are hand-written over `ndarray`; the
//! whole stack is generic over [`Scalar`] so gradient checks can run the
//! identical code in `f64`.

mod adam;
mod checkpoint;
mod grad;
mod layers;
mod params;
mod pretrain;

pub use adam::{AdamConfig, AdamState, StepOutcome};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use grad::{gradient_of_loss, loss_and_gradient, GradientWeights};
pub use layers::{BatchNorm2d, Conv2d, ConvBlock};
pub use params::{blend_parameters, Gradients, ParameterSet};
pub use pretrain::{
    dice_loss_and_grad, pretrain, validation_dice, EpochStats, PretrainConfig, PretrainOutcome,
};

use layers::{
    dropout, maxpool_backward, maxpool_forward, upsample_backward, upsample_forward,
    ConvBlockCache, ConvBlockGrads,
};
use ndarray::{concatenate, s, Array4, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeding;

/// Which statistics batch-norm layers normalize with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Statistics of the batch being forwarded (training-style).
    Batch,
    /// Stored running statistics (inference-style).
    Running,
}

/// Architecture hyperparameters. The default is the 64×64 four-class layout
/// with a 32×8×8 bottleneck (D = 2048).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// One conv block per encoder level, shallow to deep.
    pub encoder_widths: Vec<usize>,
    pub bottleneck_channels: usize,
    /// One conv block per decoder level, deep to shallow.
    pub decoder_widths: Vec<usize>,
    /// Dropout rate at the bottleneck for stochastic forwards; `None`
    /// disables dropout entirely.
    pub dropout: Option<f64>,
    pub batch_norm: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 4,
            image_height: 64,
            image_width: 64,
            encoder_widths: vec![16, 24, 32],
            bottleneck_channels: 32,
            decoder_widths: vec![32, 16, 16],
            dropout: None,
            batch_norm: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ArchConfig {
    pub fn levels(&self) -> usize {
        self.encoder_widths.len()
    }

    /// `(channels, height, width)` of the bottleneck activation.
    pub fn bottleneck_shape(&self) -> (usize, usize, usize) {
        let f = 1 << self.levels();
        (
            self.bottleneck_channels,
            self.image_height / f,
            self.image_width / f,
        )
    }

    /// Flattened bottleneck length D.
    pub fn bottleneck_dim(&self) -> usize {
        let (c, h, w) = self.bottleneck_shape();
        c * h * w
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.is_empty() {
            return Err(Error::Config("need at least one encoder level".into()));
        }
        if self.encoder_widths.len() != self.decoder_widths.len() {
            return Err(Error::Config(format!(
                "encoder has {} levels but decoder has {}",
                self.encoder_widths.len(),
                self.decoder_widths.len()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.in_channels == 0
            || self.bottleneck_channels == 0
            || self.encoder_widths.iter().any(|&w| w == 0)
            || self.decoder_widths.iter().any(|&w| w == 0)
        {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let f = 1 << self.levels();
        if self.image_height % f != 0 || self.image_width % f != 0 || self.image_height < f || self.image_width < f
        {
            return Err(Error::Config(format!(
                "image size {}×{} must be a positive multiple of 2^levels = {f}",
                self.image_height, self.image_width
            )));
        }
        if let Some(r) = self.dropout {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("dropout rate {r} outside [0, 1)")));
            }
        }
        if self.bn_eps <= 0.0 || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(
                "bn_eps must be positive and bn_momentum in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Bottleneck plus skip tensors from one encoder pass.
#[derive(Debug, Clone)]
pub struct EncodeResult<F: Scalar> {
    /// `[B, C_f, h_f, w_f]`
    pub bottleneck: Array4<F>,
    /// Shallow to deep; one per decoder level.
    pub skips: Vec<Array4<F>>,
}

impl<F: Scalar> EncodeResult<F> {
    pub fn batch_size(&self) -> usize {
        self.bottleneck.dim().0
    }

    /// Flattened length-D view of image `i`'s bottleneck, channel-major.
    pub fn bottleneck_flat(&self, i: usize) -> ArrayView1<'_, F> {
        let (_, c, h, w) = self.bottleneck.dim();
        self.bottleneck
            .index_axis(Axis(0), i)
            .into_shape_with_order(c * h * w)
            .expect("bottleneck is contiguous")
    }
}

#[derive(Debug)]
pub struct EncoderCache<F: Scalar> {
    blocks: Vec<ConvBlockCache<F>>,
    pools: Vec<Array4<u8>>,
    bott: ConvBlockCache<F>,
}

#[derive(Debug)]
pub struct DecoderCache<F: Scalar> {
    blocks: Vec<ConvBlockCache<F>>,
    head_in: Array4<F>,
    pub probs: Array4<F>,
}

/// Everything a batch-mode forward needs to replay backward.
#[derive(Debug)]
pub struct FullCache<F: Scalar> {
    pub enc: EncoderCache<F>,
    pub dec: DecoderCache<F>,
}

/// Batch-mode forward outcome: predictions plus replayable state.
#[derive(Debug)]
pub struct ForwardCache<F: Scalar> {
    pub encode: EncodeResult<F>,
    pub cache: FullCache<F>,
}

impl<F: Scalar> ForwardCache<F> {
    pub fn probs(&self) -> &Array4<F> {
        &self.cache.dec.probs
    }
}

#[derive(Debug, Clone)]
pub struct SegModel<F: Scalar> {
    arch: ArchConfig,
    enc_blocks: Vec<ConvBlock<F>>,
    bott: ConvBlock<F>,
    /// Deep to shallow, matching `arch.decoder_widths`.
    dec_blocks: Vec<ConvBlock<F>>,
    head: Conv2d<F>,
}

impl<F: Scalar> SegModel<F> {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seeding::rng_for(seed, "model-init", 0);
        let bn = arch.batch_norm;
        let (eps, mom) = (arch.bn_eps, arch.bn_momentum);
        let mut enc_blocks = Vec::new();
        let mut in_ch = arch.in_channels;
        for &w in &arch.encoder_widths {
            enc_blocks.push(ConvBlock::new(in_ch, w, bn, eps, mom, &mut rng));
            in_ch = w;
        }
        let bott = ConvBlock::new(in_ch, arch.bottleneck_channels, bn, eps, mom, &mut rng);
        let mut dec_blocks = Vec::new();
        let mut up_ch = arch.bottleneck_channels;
        for (i, &w) in arch.decoder_widths.iter().enumerate() {
            let skip_ch = arch.encoder_widths[arch.levels() - 1 - i];
            dec_blocks.push(ConvBlock::new(up_ch + skip_ch, w, bn, eps, mom, &mut rng));
            up_ch = w;
        }
        let head = Conv2d::new(up_ch, arch.num_classes, 1, &mut rng);
        Ok(Self {
            arch,
            enc_blocks,
            bott,
            dec_blocks,
            head,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn has_dropout(&self) -> bool {
        self.arch.dropout.is_some()
    }

    fn check_input(&self, x: &Array4<F>) -> Result<()> {
        let (b, c, h, w) = x.dim();
        let expected = (
            self.arch.in_channels,
            self.arch.image_height,
            self.arch.image_width,
        );
        if b == 0 || (c, h, w) != expected {
            return Err(Error::shape(
                "input batch",
                format!("[B>0, {}, {}, {}]", expected.0, expected.1, expected.2),
                format!("[{b}, {c}, {h}, {w}]"),
            ));
        }
        Ok(())
    }

    /// Batch-statistics encoder pass with caches for backward.
    pub fn encode_cached(&self, x: &Array4<F>) -> Result<(EncodeResult<F>, EncoderCache<F>)> {
        self.check_input(x)?;
        let mut blocks = Vec::with_capacity(self.enc_blocks.len());
        let mut pools = Vec::with_capacity(self.enc_blocks.len());
        let mut skips = Vec::with_capacity(self.enc_blocks.len());
        let mut cur = x.clone();
        for block in &self.enc_blocks {
            let (s, cache) = block.forward_batch(&cur);
            let (p, idx) = maxpool_forward(&s);
            skips.push(s);
            blocks.push(cache);
            pools.push(idx);
            cur = p;
        }
        let (z, bott_cache) = self.bott.forward_batch(&cur);
        Ok((
            EncodeResult {
                bottleneck: z,
                skips,
            },
            EncoderCache {
                blocks,
                pools,
                bott: bott_cache,
            },
        ))
    }

    pub fn encode(&self, x: &Array4<F>, mode: BnMode) -> Result<EncodeResult<F>> {
        match mode {
            BnMode::Batch => Ok(self.encode_cached(x)?.0),
            BnMode::Running => {
                self.check_input(x)?;
                let mut skips = Vec::with_capacity(self.enc_blocks.len());
                let mut cur = x.clone();
                for block in &self.enc_blocks {
                    let s = block.forward_running(&cur);
                    let (p, _) = maxpool_forward(&s);
                    skips.push(s);
                    cur = p;
                }
                Ok(EncodeResult {
                    bottleneck: self.bott.forward_running(&cur),
                    skips,
                })
            }
        }
    }

    fn check_decode_inputs(&self, bottleneck: &Array4<F>, skips: &[Array4<F>]) -> Result<()> {
        let (b, c, h, w) = bottleneck.dim();
        let expected = self.arch.bottleneck_shape();
        if b == 0 || (c, h, w) != expected {
            return Err(Error::shape(
                "bottleneck",
                format!("[B>0, {}, {}, {}]", expected.0, expected.1, expected.2),
                format!("[{b}, {c}, {h}, {w}]"),
            ));
        }
        if skips.len() != self.arch.levels() {
            return Err(Error::shape("skip list", self.arch.levels(), skips.len()));
        }
        for (lvl, skip) in skips.iter().enumerate() {
            let f = 1 << lvl;
            let want = (
                b,
                self.arch.encoder_widths[lvl],
                self.arch.image_height / f,
                self.arch.image_width / f,
            );
            if skip.dim() != want {
                return Err(Error::shape(
                    format!("skip {lvl}"),
                    format!("{want:?}"),
                    format!("{:?}", skip.dim()),
                ));
            }
        }
        Ok(())
    }

    /// Batch-statistics decoder pass with caches for backward.
    pub fn decode_cached(
        &self,
        bottleneck: &Array4<F>,
        skips: &[Array4<F>],
    ) -> Result<(Array4<F>, DecoderCache<F>)> {
        self.check_decode_inputs(bottleneck, skips)?;
        let mut blocks = Vec::with_capacity(self.dec_blocks.len());
        let mut cur = bottleneck.clone();
        for (i, block) in self.dec_blocks.iter().enumerate() {
            let up = upsample_forward(&cur);
            let skip = &skips[self.arch.levels() - 1 - i];
            let cat = concatenate(Axis(1), &[up.view(), skip.view()]).expect("matched dims");
            let (out, cache) = block.forward_batch(&cat);
            blocks.push(cache);
            cur = out;
        }
        let head_in = cur;
        let logits = self.head.forward(&head_in);
        let probs = softmax_channels(&logits);
        Ok((
            probs.clone(),
            DecoderCache {
                blocks,
                head_in,
                probs,
            },
        ))
    }

    pub fn decode(
        &self,
        bottleneck: &Array4<F>,
        skips: &[Array4<F>],
        mode: BnMode,
    ) -> Result<Array4<F>> {
        match mode {
            BnMode::Batch => Ok(self.decode_cached(bottleneck, skips)?.0),
            BnMode::Running => {
                self.check_decode_inputs(bottleneck, skips)?;
                let mut cur = bottleneck.clone();
                for (i, block) in self.dec_blocks.iter().enumerate() {
                    let up = upsample_forward(&cur);
                    let skip = &skips[self.arch.levels() - 1 - i];
                    let cat = concatenate(Axis(1), &[up.view(), skip.view()]).expect("matched dims");
                    cur = block.forward_running(&cat);
                }
                Ok(softmax_channels(&self.head.forward(&cur)))
            }
        }
    }

    /// Probability batch `[B, C, H, W]`; literally `decode(encode(x))`.
    pub fn forward(&self, x: &Array4<F>, mode: BnMode) -> Result<Array4<F>> {
        let enc = self.encode(x, mode)?;
        self.decode(&enc.bottleneck, &enc.skips, mode)
    }

    /// Batch-mode forward keeping everything needed for backward.
    pub fn forward_cached(&self, x: &Array4<F>) -> Result<ForwardCache<F>> {
        let (encode, enc_cache) = self.encode_cached(x)?;
        let (_, dec_cache) = self.decode_cached(&encode.bottleneck, &encode.skips)?;
        Ok(ForwardCache {
            encode,
            cache: FullCache {
                enc: enc_cache,
                dec: dec_cache,
            },
        })
    }

    /// Batch-statistics forward with dropout applied at the bottleneck.
    /// Requires the arch to configure a dropout rate.
    pub fn forward_stochastic<R: Rng + ?Sized>(
        &self,
        x: &Array4<F>,
        rng: &mut R,
    ) -> Result<Array4<F>> {
        let rate = self.arch.dropout.ok_or_else(|| {
            Error::Config("stochastic forward needs an arch dropout rate".into())
        })?;
        let enc = self.encode(x, BnMode::Batch)?;
        let z = dropout(&enc.bottleneck, rate, rng);
        self.decode(&z, &enc.skips, BnMode::Batch)
    }

    /// Folds the batch statistics recorded in `cache` into every BN layer's
    /// running estimates. Kept separate from the forward so callers decide
    /// which forwards update state.
    pub fn update_running_stats(&mut self, cache: &FullCache<F>) {
        for (block, c) in self
            .enc_blocks
            .iter_mut()
            .zip(&cache.enc.blocks)
            .chain(std::iter::once((&mut self.bott, &cache.enc.bott)))
            .chain(self.dec_blocks.iter_mut().zip(&cache.dec.blocks))
        {
            if let (Some(bn), Some(bc)) = (block.bn.as_mut(), c.bn.as_ref()) {
                bn.apply_running_update(bc);
            }
        }
    }

    /// Backpropagates `dprobs = dL/d(probability output)` through the whole
    /// net, returning parameter gradients in [`SegModel::parameters`] order.
    pub fn backward(&self, cache: &FullCache<F>, dprobs: &Array4<F>) -> Result<Gradients<F>> {
        if dprobs.dim() != cache.dec.probs.dim() {
            return Err(Error::shape(
                "probability gradient",
                format!("{:?}", cache.dec.probs.dim()),
                format!("{:?}", dprobs.dim()),
            ));
        }
        let levels = self.arch.levels();
        let dlogits = softmax_backward(&cache.dec.probs, dprobs);
        let (mut cur, dw_head, db_head) = self.head.backward(&cache.dec.head_in, &dlogits);

        let mut dec_grads: Vec<Option<ConvBlockGrads<F>>> = (0..levels).map(|_| None).collect();
        let mut skip_grads: Vec<Option<Array4<F>>> = (0..levels).map(|_| None).collect();
        for i in (0..levels).rev() {
            let (d_cat, grads) = self.dec_blocks[i].backward(&cache.dec.blocks[i], &cur);
            dec_grads[i] = Some(grads);
            let up_ch = if i == 0 {
                self.arch.bottleneck_channels
            } else {
                self.arch.decoder_widths[i - 1]
            };
            let d_up = d_cat.slice(s![.., ..up_ch, .., ..]).to_owned();
            skip_grads[levels - 1 - i] = Some(d_cat.slice(s![.., up_ch.., .., ..]).to_owned());
            cur = upsample_backward(&d_up);
        }

        let (mut d_pool, bott_grads) = self.bott.backward(&cache.enc.bott, &cur);
        let mut enc_grads: Vec<Option<ConvBlockGrads<F>>> = (0..levels).map(|_| None).collect();
        for j in (0..levels).rev() {
            let s_dim = cache.enc.blocks[j].out.dim();
            let mut d_s = maxpool_backward(&cache.enc.pools[j], &d_pool, s_dim.2, s_dim.3);
            d_s += skip_grads[j].as_ref().expect("filled above");
            let (d_in, grads) = self.enc_blocks[j].backward(&cache.enc.blocks[j], &d_s);
            enc_grads[j] = Some(grads);
            d_pool = d_in;
        }

        let mut tensors = Vec::new();
        for g in enc_grads.into_iter().map(Option::unwrap) {
            push_block_grads(&mut tensors, g);
        }
        push_block_grads(&mut tensors, bott_grads);
        for g in dec_grads.into_iter().map(Option::unwrap) {
            push_block_grads(&mut tensors, g);
        }
        tensors.push(dw_head.into_dyn());
        tensors.push(db_head.into_dyn());
        Ok(Gradients { tensors })
    }

    /// Named learnable tensors, cloned, in a fixed traversal order.
    pub fn parameters(&self) -> ParameterSet<F> {
        let mut items = Vec::new();
        let mut push_block = |prefix: String, b: &ConvBlock<F>| {
            items.push((format!("{prefix}.conv.weight"), b.conv.weight.clone().into_dyn()));
            items.push((format!("{prefix}.conv.bias"), b.conv.bias.clone().into_dyn()));
            if let Some(bn) = &b.bn {
                items.push((format!("{prefix}.bn.gamma"), bn.gamma.clone().into_dyn()));
                items.push((format!("{prefix}.bn.beta"), bn.beta.clone().into_dyn()));
            }
        };
        for (i, b) in self.enc_blocks.iter().enumerate() {
            push_block(format!("enc{i}"), b);
        }
        push_block("bott".into(), &self.bott);
        for (i, b) in self.dec_blocks.iter().enumerate() {
            push_block(format!("dec{i}"), b);
        }
        items.push(("head.weight".into(), self.head.weight.clone().into_dyn()));
        items.push(("head.bias".into(), self.head.bias.clone().into_dyn()));
        ParameterSet { items }
    }

    pub fn set_parameters(&mut self, params: &ParameterSet<F>) -> Result<()> {
        let expected = self.parameters();
        if expected.len() != params.len() {
            return Err(Error::shape("parameter count", expected.len(), params.len()));
        }
        for ((name_a, tensor_a), (name_b, tensor_b)) in
            expected.items.iter().zip(params.items.iter())
        {
            if name_a != name_b || tensor_a.shape() != tensor_b.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {name_b} does not match this architecture's {name_a}"
                )));
            }
        }
        let mut it = params.items.iter();
        let mut take = |arr: &mut dyn AssignTarget<F>| {
            let (_, t) = it.next().expect("length checked");
            arr.assign_from(t);
        };
        for b in self
            .enc_blocks
            .iter_mut()
            .chain(std::iter::once(&mut self.bott))
            .chain(self.dec_blocks.iter_mut())
        {
            take(&mut b.conv.weight);
            take(&mut b.conv.bias);
            if let Some(bn) = b.bn.as_mut() {
                take(&mut bn.gamma);
                take(&mut bn.beta);
            }
        }
        take(&mut self.head.weight);
        take(&mut self.head.bias);
        Ok(())
    }

    /// Non-learnable state (BN running statistics), named like parameters.
    pub fn buffers(&self) -> Vec<(String, ndarray::ArrayD<F>)> {
        let mut items = Vec::new();
        let mut push_block = |prefix: String, b: &ConvBlock<F>| {
            if let Some(bn) = &b.bn {
                items.push((format!("{prefix}.bn.running_mean"), bn.running_mean.clone().into_dyn()));
                items.push((format!("{prefix}.bn.running_var"), bn.running_var.clone().into_dyn()));
            }
        };
        for (i, b) in self.enc_blocks.iter().enumerate() {
            push_block(format!("enc{i}"), b);
        }
        push_block("bott".into(), &self.bott);
        for (i, b) in self.dec_blocks.iter().enumerate() {
            push_block(format!("dec{i}"), b);
        }
        items
    }

    pub fn set_buffers(&mut self, buffers: &[(String, ndarray::ArrayD<F>)]) -> Result<()> {
        let expected = self.buffers();
        if expected.len() != buffers.len() {
            return Err(Error::shape("buffer count", expected.len(), buffers.len()));
        }
        for ((na, ta), (nb, tb)) in expected.iter().zip(buffers.iter()) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::Incompatible(format!(
                    "buffer {nb} does not match this architecture's {na}"
                )));
            }
        }
        let mut it = buffers.iter();
        let mut take = |arr: &mut dyn AssignTarget<F>| {
            let (_, t) = it.next().expect("length checked");
            arr.assign_from(t);
        };
        for b in self
            .enc_blocks
            .iter_mut()
            .chain(std::iter::once(&mut self.bott))
            .chain(self.dec_blocks.iter_mut())
        {
            if let Some(bn) = b.bn.as_mut() {
                take(&mut bn.running_mean);
                take(&mut bn.running_var);
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.parameters().items.iter().map(|(_, t)| t.len()).sum()
    }

    /// Casts every parameter and buffer into another element type.
    pub fn convert<G: Scalar>(&self) -> Result<SegModel<G>> {
        let mut out = SegModel::<G>::new(self.arch.clone(), 0)?;
        let params = ParameterSet {
            items: self
                .parameters()
                .items
                .into_iter()
                .map(|(n, t)| (n, t.mapv(|v| G::from_f64(v.to_f64()))))
                .collect(),
        };
        out.set_parameters(&params)?;
        let buffers: Vec<_> = self
            .buffers()
            .into_iter()
            .map(|(n, t)| (n, t.mapv(|v| G::from_f64(v.to_f64()))))
            .collect();
        out.set_buffers(&buffers)?;
        Ok(out)
    }
}

/// Assign-from-dyn helper so `set_parameters` can walk mixed tensor ranks.
trait AssignTarget<F: Scalar> {
    fn assign_from(&mut self, src: &ndarray::ArrayD<F>);
}

impl<F: Scalar, D: ndarray::Dimension> AssignTarget<F> for ndarray::Array<F, D> {
    fn assign_from(&mut self, src: &ndarray::ArrayD<F>) {
        self.assign(&src.view().into_dimensionality::<D>().expect("shape checked"));
    }
}

fn push_block_grads<F: Scalar>(tensors: &mut Vec<ndarray::ArrayD<F>>, g: ConvBlockGrads<F>) {
    tensors.push(g.dw.into_dyn());
    tensors.push(g.db.into_dyn());
    if let Some(dg) = g.dgamma {
        tensors.push(dg.into_dyn());
    }
    if let Some(db) = g.dbeta {
        tensors.push(db.into_dyn());
    }
}

/// Stable per-pixel softmax over the channel axis.
pub fn softmax_channels<F: Scalar>(logits: &Array4<F>) -> Array4<F> {
    let (b, c, h, w) = logits.dim();
    let mut out = Array4::zeros((b, c, h, w));
    for i in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut max = logits[(i, 0, y, x)];
                for k in 1..c {
                    max = max.max(logits[(i, k, y, x)]);
                }
                let mut denom = F::zero();
                for k in 0..c {
                    let e = (logits[(i, k, y, x)] - max).exp();
                    out[(i, k, y, x)] = e;
                    denom = denom + e;
                }
                for k in 0..c {
                    out[(i, k, y, x)] = out[(i, k, y, x)] / denom;
                }
            }
        }
    }
    out
}

/// `dL/dlogits` from `dL/dprobs` for a channel softmax:
/// `dz_c = p_c·(g_c − Σ_k g_k p_k)`.
pub fn softmax_backward<F: Scalar>(probs: &Array4<F>, dprobs: &Array4<F>) -> Array4<F> {
    let (b, c, h, w) = probs.dim();
    let mut out = Array4::zeros((b, c, h, w));
    for i in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut dot = F::zero();
                for k in 0..c {
                    dot = dot + dprobs[(i, k, y, x)] * probs[(i, k, y, x)];
                }
                for k in 0..c {
                    out[(i, k, y, x)] = probs[(i, k, y, x)] * (dprobs[(i, k, y, x)] - dot);
                }
            }
        }
    }
    out
}

/// Small fixtures shared by tests across the crate.
#[cfg(test)]
pub(crate) mod testutil {
    use super::ArchConfig;

    /// Two-level net with ~450 parameters; small enough for finite
    /// differences, still exercising skips, BN, pooling, and the head.
    pub(crate) fn tiny_arch() -> ArchConfig {
        ArchConfig {
            in_channels: 1,
            num_classes: 3,
            image_height: 8,
            image_width: 8,
            encoder_widths: vec![2, 3],
            bottleneck_channels: 3,
            decoder_widths: vec![3, 2],
            dropout: None,
            batch_norm: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}
