//! Feature-alignment refinement of pseudo labels.
//!
//! For each image the flattened bottleneck feature is matched against the
//! anchor bank by cosine similarity, blended toward the best anchor with the
//! (non-negative) similarity as the blend weight, standardized by the
//! anchor's own statistics, and decoded again through the unchanged decoder
//! and original skip tensors. The result replaces the raw prediction as the
//! training target, so everything here is stop-gradient by construction.

use ndarray::{Array1, Array4, ArrayView1, Axis};

use crate::anchorbank::{cosine_f64, AnchorBank, AnchorEntry};
use crate::error::{Error, Result};
use crate::prob::{split_batch, ProbabilityMap};
use crate::scalar::Scalar;
use crate::segmodel::{BnMode, EncodeResult, SegModel};

/// Stabilizer added to the anchor standard deviation before dividing.
pub const NORMALIZE_EPSILON: f64 = 1e-5;

/// Per-image record of one refinement: the blend weight, the blended and
/// standardized features, and which bank entry supplied the anchor.
#[derive(Debug, Clone)]
pub struct FusionResult<F: Scalar> {
    pub lambda: f64,
    pub fused: Array1<F>,
    pub normalized: Array1<F>,
    pub anchor_index: usize,
    pub anchor_score: f64,
}

/// Most similar bank entry by cosine; ties resolve to the lowest index.
/// `None` iff the bank is empty. Zero-norm pairs compare as similarity 0.
pub fn retrieve_anchor<'a, F: Scalar>(
    bank: &'a AnchorBank<F>,
    z: ArrayView1<'_, F>,
) -> Option<(usize, &'a AnchorEntry<F>)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, entry) in bank.entries().iter().enumerate() {
        let sim = cosine_f64(&z, &entry.feature.view());
        match best {
            Some((_, s)) if sim <= s => {}
            _ => best = Some((i, sim)),
        }
    }
    best.map(|(i, _)| (i, &bank.entries()[i]))
}

/// Similarity-weighted blend `z* = (1−λ)z + λz'` with `λ = max(0, cos(z, z'))`.
/// Every coordinate of the result lies between the two inputs.
pub fn fuse<F: Scalar>(
    z: ArrayView1<'_, F>,
    z_anchor: ArrayView1<'_, F>,
) -> Result<(Array1<F>, f64)> {
    if z.len() != z_anchor.len() {
        return Err(Error::shape("fusion inputs", z.len(), z_anchor.len()));
    }
    let lambda = cosine_f64(&z, &z_anchor).clamp(0.0, 1.0);
    let fused = if lambda == 0.0 {
        z.to_owned()
    } else if lambda == 1.0 {
        z_anchor.to_owned()
    } else {
        let lam = F::from_f64(lambda);
        let mut out = Array1::zeros(z.len());
        for (o, (&a, &b)) in out.iter_mut().zip(z.iter().zip(z_anchor.iter())) {
            let v = a + lam * (b - a);
            *o = v.max(a.min(b)).min(a.max(b));
        }
        out
    };
    Ok((fused, lambda))
}

/// Standardizes `z*` by the anchor's scalar mean and population standard
/// deviation: `ẑ = (z* − μ(z'))/(σ(z') + ε)`.
pub fn anchor_normalize<F: Scalar>(
    z_star: ArrayView1<'_, F>,
    z_anchor: ArrayView1<'_, F>,
    epsilon: f64,
) -> Result<Array1<F>> {
    let d = z_anchor.len();
    if z_star.len() != d {
        return Err(Error::shape("normalization inputs", d, z_star.len()));
    }
    if d < 2 {
        return Err(Error::InvalidArgument(
            "anchor statistics need at least 2 elements".into(),
        ));
    }
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "normalization epsilon must be positive, got {epsilon}"
        )));
    }
    let mean = z_anchor.iter().map(|v| (*v).to_f64()).sum::<f64>() / d as f64;
    let var = z_anchor
        .iter()
        .map(|v| {
            let c = (*v).to_f64() - mean;
            c * c
        })
        .sum::<f64>()
        / d as f64;
    let denom = var.sqrt() + epsilon;
    Ok(z_star.mapv(|v| F::from_f64((v.to_f64() - mean) / denom)))
}

/// A refined target map per image plus the fusion records behind them.
#[derive(Debug)]
pub struct Refinement<F: Scalar> {
    pub maps: Vec<ProbabilityMap<F>>,
    pub fusions: Vec<FusionResult<F>>,
}

/// Runs retrieve → fuse → normalize on every image's bottleneck and decodes
/// the standardized features with the original skip tensors (batch
/// statistics). `Ok(None)` signals an empty bank; the caller falls back to
/// the raw predictions.
pub fn refine_pseudo_label<F: Scalar>(
    model: &SegModel<F>,
    enc: &EncodeResult<F>,
    bank: &AnchorBank<F>,
    epsilon: f64,
) -> Result<Option<Refinement<F>>> {
    if bank.is_empty() {
        return Ok(None);
    }
    let b = enc.batch_size();
    let (_, cf, hf, wf) = enc.bottleneck.dim();
    let mut z_hat = Array4::<F>::zeros((b, cf, hf, wf));
    let mut fusions = Vec::with_capacity(b);
    for i in 0..b {
        let z = enc.bottleneck_flat(i);
        let (idx, entry) = retrieve_anchor(bank, z).expect("bank checked non-empty");
        let (fused, lambda) = fuse(z, entry.feature.view())?;
        let normalized = anchor_normalize(fused.view(), entry.feature.view(), epsilon)?;
        z_hat
            .index_axis_mut(Axis(0), i)
            .assign(
                &normalized
                    .view()
                    .into_shape_with_order((cf, hf, wf))
                    .expect("bottleneck layout is channel-major"),
            );
        fusions.push(FusionResult {
            lambda,
            fused,
            normalized,
            anchor_index: idx,
            anchor_score: entry.score,
        });
    }
    let probs = model.decode(&z_hat, &enc.skips, BnMode::Batch)?;
    Ok(Some(Refinement {
        maps: split_batch(&probs),
        fusions,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmodel::testutil::tiny_arch;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank_with(features: &[Array1<f64>]) -> AnchorBank<f64> {
        // One insertion per call (the fill phase admits the better half of
        // each batch), so indices follow the slice order.
        let mut bank = AnchorBank::new(features.len());
        for (i, f) in features.iter().enumerate() {
            let decisions = bank
                .update(&[(f.view(), i as f64), (f.view(), i as f64 + 1e9)])
                .unwrap();
            assert!(decisions[0].inserted());
        }
        assert_eq!(bank.len(), features.len());
        bank
    }

    #[test]
    fn retrieval_prefers_collinear_then_lowest_index() {
        let bank = bank_with(&[array![1.0, 0.0], array![0.0, 1.0]]);
        let (idx, entry) = retrieve_anchor(&bank, array![2.0, 0.0].view()).unwrap();
        assert_eq!(idx, 0);
        assert_eq!(entry.feature, array![1.0, 0.0]);

        // Singleton bank always answers with its only entry.
        let single = bank_with(&[array![0.0, 1.0]]);
        let (idx, _) = retrieve_anchor(&single, array![5.0, -3.0].view()).unwrap();
        assert_eq!(idx, 0);

        // Duplicated entries tie; the lowest index wins.
        let dup = bank_with(&[array![1.0, 1.0], array![2.0, 2.0]]);
        let (idx, _) = retrieve_anchor(&dup, array![3.0, 3.0].view()).unwrap();
        assert_eq!(idx, 0);
    }

    #[test]
    fn retrieval_cosine_oracle() {
        let bank = bank_with(&[array![1.0, 1.0], array![1.0, 0.0]]);
        let (idx, _) = retrieve_anchor(&bank, array![1.0, 0.1].view()).unwrap();
        assert_eq!(idx, 1);
    }

    #[test]
    fn empty_bank_yields_no_anchor() {
        let bank = AnchorBank::<f64>::new(4);
        assert!(retrieve_anchor(&bank, array![1.0, 0.0].view()).is_none());
    }

    #[test]
    fn fusion_examples() {
        let (z_star, lambda) = fuse(array![1.0, 0.0].view(), array![0.0, 1.0].view()).unwrap();
        assert_eq!(lambda, 0.0);
        assert_eq!(z_star, array![1.0, 0.0]);

        let (z_star, lambda) = fuse(array![1.0, 1.0].view(), array![1.0, 1.0].view()).unwrap();
        assert!((lambda - 1.0).abs() < 1e-12);
        assert_eq!(z_star, array![1.0, 1.0]);

        let (z_star, lambda) = fuse(array![1.0f64, 0.0].view(), array![1.0, 1.0].view()).unwrap();
        let expect = 1.0 / 2.0f64.sqrt();
        assert!((lambda - expect).abs() < 1e-9);
        assert!((z_star[0] - 1.0).abs() < 1e-9);
        assert!((z_star[1] - expect).abs() < 1e-9);
    }

    #[test]
    fn zero_norm_inputs_fuse_to_identity() {
        let (z_star, lambda) = fuse(array![0.0, 0.0].view(), array![1.0, 2.0].view()).unwrap();
        assert_eq!(lambda, 0.0);
        assert_eq!(z_star, array![0.0, 0.0]);
    }

    #[test]
    fn fusion_length_mismatch_is_an_error() {
        assert!(fuse(array![1.0].view(), array![1.0, 2.0].view()).is_err());
    }

    #[test]
    fn normalization_oracle() {
        let z = array![2.0, 4.0, 6.0];
        let out = anchor_normalize(z.view(), z.view(), NORMALIZE_EPSILON).unwrap();
        for (got, want) in out.iter().zip([-1.22474f64, 0.0, 1.22474]) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn constant_anchor_standardizes_to_zero_without_blowup() {
        let c = Array1::from_elem(8, 3.5);
        let out = anchor_normalize(c.view(), c.view(), NORMALIZE_EPSILON).unwrap();
        assert!(out.iter().all(|v: &f64| *v == 0.0));

        // Different numerator stays finite thanks to epsilon.
        let other = Array1::from_elem(8, 4.5);
        let out = anchor_normalize(other.view(), c.view(), NORMALIZE_EPSILON).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out[0] - 1.0 / NORMALIZE_EPSILON).abs() < 1e-3);
    }

    #[test]
    fn self_standardization_has_zero_mean_unit_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let z = Array1::from_shape_simple_fn(64, || rng.gen_range(-3.0..3.0));
        let out = anchor_normalize(z.view(), z.view(), NORMALIZE_EPSILON).unwrap();
        let mean = out.iter().sum::<f64>() / 64.0;
        let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-9);
        assert!((var.sqrt() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn normalization_affine_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(92);
        let anchor = Array1::from_shape_simple_fn(32, || rng.gen_range(-2.0..2.0));
        let x = Array1::from_shape_simple_fn(32, || rng.gen_range(-2.0..2.0));
        let c = 0.73;
        let shifted = x.mapv(|v| v + c);
        let a = anchor_normalize(shifted.view(), anchor.view(), NORMALIZE_EPSILON).unwrap();
        let b = anchor_normalize(x.view(), anchor.view(), NORMALIZE_EPSILON).unwrap();
        let mean = anchor.iter().sum::<f64>() / 32.0;
        let sigma = (anchor.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 32.0).sqrt();
        let want = c / (sigma + NORMALIZE_EPSILON);
        for (ai, bi) in a.iter().zip(b.iter()) {
            assert!((ai - bi - want).abs() < 1e-9);
        }
    }

    #[test]
    fn short_anchor_is_rejected() {
        assert!(anchor_normalize(array![1.0].view(), array![1.0].view(), NORMALIZE_EPSILON).is_err());
    }

    fn encode_fixture() -> (SegModel<f64>, EncodeResult<f64>) {
        let model = SegModel::<f64>::new(tiny_arch(), 93).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(94);
        let x = Array4::from_shape_simple_fn((2, 1, 8, 8), || rng.gen_range(-1.0..1.0));
        let enc = model.encode(&x, BnMode::Batch).unwrap();
        (model, enc)
    }

    #[test]
    fn empty_bank_skips_refinement() {
        let (model, enc) = encode_fixture();
        let bank = AnchorBank::<f64>::new(4);
        assert!(refine_pseudo_label(&model, &enc, &bank, NORMALIZE_EPSILON)
            .unwrap()
            .is_none());
    }

    #[test]
    fn self_anchor_takes_full_lambda_and_decodes_validly() {
        let (model, enc) = encode_fixture();
        let mut bank = AnchorBank::<f64>::new(1);
        bank.update(&[(enc.bottleneck_flat(0), 0.5)]).unwrap();
        let out = refine_pseudo_label(&model, &enc, &bank, NORMALIZE_EPSILON).unwrap().unwrap();
        assert_eq!(out.maps.len(), 2);
        assert_eq!(out.fusions.len(), 2);
        assert!((out.fusions[0].lambda - 1.0).abs() < 1e-9);
        assert_eq!(out.fusions[0].anchor_index, 0);
        // Image 0 fused onto its own anchor, so the normalized feature is
        // its standardized self.
        let want =
            anchor_normalize(enc.bottleneck_flat(0), enc.bottleneck_flat(0), NORMALIZE_EPSILON).unwrap();
        for (a, b) in out.fusions[0].normalized.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        for map in &out.maps {
            assert!(map.view().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn pipeline_matches_manual_composition() {
        let (model, enc) = encode_fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(95);
        let d = enc.bottleneck_flat(0).len();
        let feats: Vec<Array1<f64>> = (0..3)
            .map(|_| Array1::from_shape_simple_fn(d, || rng.gen_range(-1.0..1.0)))
            .collect();
        let bank = bank_with(&feats);
        let out = refine_pseudo_label(&model, &enc, &bank, NORMALIZE_EPSILON).unwrap().unwrap();

        let (_, cf, hf, wf) = enc.bottleneck.dim();
        let mut z_hat = Array4::<f64>::zeros((2, cf, hf, wf));
        for i in 0..2 {
            let z = enc.bottleneck_flat(i);
            let (idx, entry) = retrieve_anchor(&bank, z).unwrap();
            assert_eq!(idx, out.fusions[i].anchor_index);
            let (fused, lambda) = fuse(z, entry.feature.view()).unwrap();
            assert_eq!(lambda, out.fusions[i].lambda);
            let norm = anchor_normalize(fused.view(), entry.feature.view(), NORMALIZE_EPSILON).unwrap();
            z_hat
                .index_axis_mut(Axis(0), i)
                .assign(&norm.into_shape_with_order((cf, hf, wf)).unwrap());
        }
        let probs = model.decode(&z_hat, &enc.skips, BnMode::Batch).unwrap();
        for (i, map) in split_batch(&probs).into_iter().enumerate() {
            assert_eq!(map.view(), out.maps[i].view());
        }
    }

    proptest! {
        #[test]
        fn lambda_unit_interval_and_convexity(
            a in proptest::collection::vec(-10.0f64..10.0, 6),
            b in proptest::collection::vec(-10.0f64..10.0, 6),
            zero_a in any::<bool>(),
        ) {
            let z = if zero_a {
                Array1::zeros(6)
            } else {
                Array1::from_vec(a)
            };
            let anchor = Array1::from_vec(b);
            let (z_star, lambda) = fuse(z.view(), anchor.view()).unwrap();
            prop_assert!((0.0..=1.0).contains(&lambda));
            for ((s, &zi), &ai) in z_star.iter().zip(z.iter()).zip(anchor.iter()) {
                prop_assert!(*s >= zi.min(ai) && *s <= zi.max(ai));
            }
        }

        #[test]
        fn normalization_never_produces_nan(
            a in proptest::collection::vec(-100.0f64..100.0, 8),
            b in proptest::collection::vec(-100.0f64..100.0, 8),
        ) {
            let out = anchor_normalize(
                Array1::from_vec(a).view(),
                Array1::from_vec(b).view(),
                NORMALIZE_EPSILON,
            ).unwrap();
            prop_assert!(out.iter().all(|v| v.is_finite()));
        }
    }
}
