//! Label-preserving intensity transforms that define appearance domains.
//!
//! All transforms operate on a nominally [0, 1] image; the chain's caller
//! applies a final min-max rescale to [−1, 1]. Neutral parameters are exact
//! identities, so an identity domain reproduces the raw render bit-for-bit.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::DomainSpec;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn apply_gamma(img: &mut Array2<f64>, gamma: f64) {
    if gamma == 1.0 {
        return;
    }
    img.mapv_inplace(|v| v.max(0.0).powf(gamma));
}

pub fn apply_contrast_brightness(img: &mut Array2<f64>, contrast: f64, brightness: f64) {
    if contrast == 1.0 && brightness == 0.0 {
        return;
    }
    img.mapv_inplace(|v| contrast * (v - 0.5) + 0.5 + brightness);
}

/// Multiplies by a smooth sinusoidal field with random spatial frequency and
/// phase: `x · (1 + a · sin(...)·sin(...))`.
pub fn apply_bias_field(img: &mut Array2<f64>, amplitude: f64, rng: &mut ChaCha8Rng) {
    if amplitude == 0.0 {
        return;
    }
    let (h, w) = img.dim();
    let fy = rng.gen_range(0.5..1.5);
    let fx = rng.gen_range(0.5..1.5);
    let py = rng.gen_range(0.0..std::f64::consts::TAU);
    let px = rng.gen_range(0.0..std::f64::consts::TAU);
    for ((y, x), v) in img.indexed_iter_mut() {
        let sy = (std::f64::consts::TAU * fy * y as f64 / h as f64 + py).sin();
        let sx = (std::f64::consts::TAU * fx * x as f64 / w as f64 + px).sin();
        *v *= 1.0 + amplitude * sy * sx;
    }
}

pub fn apply_gaussian_noise(img: &mut Array2<f64>, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma == 0.0 {
        return;
    }
    img.mapv_inplace(|v| v + sigma * normal(rng));
}

/// Magnitude-domain noise: `sqrt((x+n₁)² + n₂²)` with independent Gaussian
/// draws per pixel. With `sigma = 0` this is `|x|`, an identity for the
/// nonnegative renders this chain processes.
pub fn apply_rician_noise(img: &mut Array2<f64>, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma == 0.0 {
        return;
    }
    img.mapv_inplace(|v| {
        let a = v + sigma * normal(rng);
        let b = sigma * normal(rng);
        (a * a + b * b).sqrt()
    });
}

/// Axis for the 1D motion-blur kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlurAxis {
    Horizontal,
    Vertical,
}

/// 1D box blur of length `k` with reflect padding. `k = 1` is the identity.
/// Even `k` uses the offsets `−(k/2−1) ..= k/2`.
pub fn apply_motion_blur(img: &mut Array2<f64>, k: usize, axis: BlurAxis) {
    if k <= 1 {
        return;
    }
    let (h, w) = img.dim();
    let lo = -((k as isize / 2) - if k % 2 == 0 { 1 } else { 0 });
    let hi = k as isize / 2;
    let refl = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            if i < 0 {
                i = -i;
            }
            if i >= n {
                i = 2 * (n - 1) - i;
            }
        }
        i as usize
    };
    let src = img.clone();
    for ((y, x), v) in img.indexed_iter_mut() {
        let mut acc = 0.0;
        for o in lo..=hi {
            acc += match axis {
                BlurAxis::Horizontal => src[(y, refl(x as isize + o, w))],
                BlurAxis::Vertical => src[(refl(y as isize + o, h), x)],
            };
        }
        *v = acc / k as f64;
    }
}

/// Affine min-max rescale to [−1, 1]; constant images map to all zeros.
pub fn normalize_to_unit_range(img: &mut Array2<f64>) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in img.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi <= lo {
        img.fill(0.0);
        return;
    }
    let scale = 2.0 / (hi - lo);
    img.mapv_inplace(|v| (v - lo) * scale - 1.0);
}

/// Runs a domain's full transform chain (without the final rescale — the
/// caller normalizes so identity domains stay exact).
pub fn apply_domain(img: &mut Array2<f64>, spec: &DomainSpec, rng: &mut ChaCha8Rng) {
    apply_gamma(img, spec.gamma);
    apply_contrast_brightness(img, spec.contrast, spec.brightness);
    apply_bias_field(img, spec.bias_field_strength, rng);
    apply_gaussian_noise(img, spec.gaussian_noise_sigma, rng);
    apply_rician_noise(img, spec.rician_noise_sigma, rng);
    apply_motion_blur(img, spec.motion_blur_len, spec.motion_blur_axis);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn neutral_parameters_are_exact_identities() {
        let orig = Array2::from_shape_fn((8, 8), |(y, x)| (y * 8 + x) as f64 / 63.0);
        let mut img = orig.clone();
        apply_gamma(&mut img, 1.0);
        apply_contrast_brightness(&mut img, 1.0, 0.0);
        apply_bias_field(&mut img, 0.0, &mut rng());
        apply_gaussian_noise(&mut img, 0.0, &mut rng());
        apply_rician_noise(&mut img, 0.0, &mut rng());
        apply_motion_blur(&mut img, 1, BlurAxis::Horizontal);
        assert_eq!(img, orig);
    }

    #[test]
    fn rician_bias_is_positive_on_zero_image() {
        let mut img = Array2::<f64>::zeros((32, 32));
        apply_rician_noise(&mut img, 0.05, &mut rng());
        let mean = img.iter().sum::<f64>() / 1024.0;
        assert!(mean > 0.03, "{mean}");
        assert!(img.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn constant_image_is_unchanged_by_blur() {
        let mut img = Array2::from_elem((8, 8), 0.37);
        apply_motion_blur(&mut img, 12, BlurAxis::Horizontal);
        for &v in img.iter() {
            assert!((v - 0.37).abs() < 1e-12);
        }
        let mut img = Array2::from_elem((8, 8), 0.37);
        apply_motion_blur(&mut img, 5, BlurAxis::Vertical);
        for &v in img.iter() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_box_blur_matches_hand_computation() {
        let mut img = array![[1.0, 2.0, 3.0, 4.0]];
        apply_motion_blur(&mut img, 3, BlurAxis::Horizontal);
        // Reflect padding: [2,1,2,3,4,3].
        assert_eq!(img, array![[(2.0 + 1.0 + 2.0) / 3.0, 2.0, 3.0, (3.0 + 4.0 + 3.0) / 3.0]]);
    }

    #[test]
    fn blur_preserves_mean_roughly_and_reduces_variance() {
        let mut r = rng();
        let orig = Array2::from_shape_fn((16, 16), |_| r.gen_range(0.0..1.0));
        let mut img = orig.clone();
        apply_motion_blur(&mut img, 12, BlurAxis::Horizontal);
        let var = |m: &Array2<f64>| {
            let mean = m.iter().sum::<f64>() / m.len() as f64;
            m.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m.len() as f64
        };
        assert!(var(&img) < var(&orig));
    }

    #[test]
    fn normalization_hits_both_endpoints() {
        let mut img = array![[0.2, 0.4], [0.6, 1.4]];
        normalize_to_unit_range(&mut img);
        assert_eq!(img[(0, 0)], -1.0);
        assert_eq!(img[(1, 1)], 1.0);
        assert!(img.iter().all(|&v| (-1.0..=1.0).contains(&v)));

        let mut flat = Array2::from_elem((4, 4), 0.8);
        normalize_to_unit_range(&mut flat);
        assert!(flat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gamma_darkens_or_brightens_midtones() {
        let mut img = Array2::from_elem((2, 2), 0.5);
        apply_gamma(&mut img, 2.0);
        assert!((img[(0, 0)] - 0.25).abs() < 1e-12);
        let mut img = Array2::from_elem((2, 2), 0.25);
        apply_gamma(&mut img, 0.5);
        assert!((img[(0, 0)] - 0.5).abs() < 1e-12);
    }
}
