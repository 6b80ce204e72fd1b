//! Renderer for the synthetic segmentation phantom.
//!
//! Each sample is a disk nested in a ring with an adjacent crescent lobe,
//! with randomized center, radii and orientation. Labels: 0 background,
//! 1 disk, 2 ring, 3 lobe (the last two drop out for smaller class counts).

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::SyntheticTask;

pub const BACKGROUND: u8 = 0;
pub const DISK: u8 = 1;
pub const RING: u8 = 2;
pub const LOBE: u8 = 3;

/// Per-class base intensities in the render's [0, 1] space.
const INTENSITY: [f64; 4] = [0.15, 0.85, 0.45, 0.65];
/// Per-pixel texture noise.
const TEXTURE_SIGMA: f64 = 0.015;

struct Geometry {
    cy: f64,
    cx: f64,
    r_disk: f64,
    r_ring: f64,
    lobe_cy: f64,
    lobe_cx: f64,
    lobe_ry: f64,
    lobe_rx: f64,
}

fn draw_geometry(task: &SyntheticTask, rng: &mut ChaCha8Rng) -> Geometry {
    let s = task.image_size as f64;
    let range = |lo: f64, hi: f64, rng: &mut ChaCha8Rng| {
        if hi > lo {
            rng.gen_range(lo..hi)
        } else {
            lo
        }
    };
    let j = task.center_jitter;
    let cy = s * range(0.5 - j, 0.5 + j, rng);
    let cx = s * range(0.5 - j, 0.5 + j, rng);
    let r_disk = range(task.inner_radius.0, task.inner_radius.1, rng);
    let r_ring = r_disk + range(task.ring_thickness.0, task.ring_thickness.1, rng);
    let lobe_r = range(task.lobe_radius.0, task.lobe_radius.1, rng);
    let theta = range(task.lobe_angle.0, task.lobe_angle.1, rng);
    let dist = r_ring + 0.6 * lobe_r;
    Geometry {
        cy,
        cx,
        r_disk,
        r_ring,
        lobe_cy: cy + dist * theta.sin(),
        lobe_cx: cx + dist * theta.cos(),
        lobe_ry: lobe_r * range(0.9, 1.3, rng),
        lobe_rx: lobe_r,
    }
}

fn rasterize(task: &SyntheticTask, g: &Geometry) -> Array2<u8> {
    let n = task.image_size;
    let mut mask = Array2::from_elem((n, n), BACKGROUND);
    for y in 0..n {
        for x in 0..n {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let d = ((fy - g.cy).powi(2) + (fx - g.cx).powi(2)).sqrt();
            if d <= g.r_disk {
                mask[(y, x)] = DISK;
            } else if d <= g.r_ring && task.num_classes > 2 {
                mask[(y, x)] = RING;
            } else if task.num_classes > 3 {
                let ey = (fy - g.lobe_cy) / g.lobe_ry;
                let ex = (fx - g.lobe_cx) / g.lobe_rx;
                if ey * ey + ex * ex <= 1.0 {
                    mask[(y, x)] = LOBE;
                }
            }
        }
    }
    mask
}

fn all_classes_present(task: &SyntheticTask, mask: &Array2<u8>) -> bool {
    (1..task.num_classes).all(|k| {
        mask.iter().filter(|&&v| v == k as u8).count() >= task.min_class_pixels
    })
}

/// 3×3 box blur with reflect padding; softens structure boundaries so the
/// segmentation task is not a pure threshold.
fn soften(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let refl = |i: isize, n: usize| -> usize {
        if i < 0 {
            (-i) as usize % n
        } else if i as usize >= n {
            let over = i as usize - n + 1;
            n - 1 - (over % n)
        } else {
            i as usize
        }
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0;
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                acc += img[(refl(y as isize + dy, h), refl(x as isize + dx, w))];
            }
        }
        acc / 9.0
    })
}

/// Renders one (image, mask) pair. The image lives in roughly [0, 1]; the
/// mask always contains every configured foreground class (geometry is
/// redrawn when a class would be clipped away).
pub fn render_sample(task: &SyntheticTask, rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<u8>) {
    let mut mask = rasterize(task, &draw_geometry(task, rng));
    for _ in 0..16 {
        if all_classes_present(task, &mask) {
            break;
        }
        mask = rasterize(task, &draw_geometry(task, rng));
    }
    debug_assert!(all_classes_present(task, &mask));
    let base = mask.mapv(|k| {
        INTENSITY[k as usize]
    });
    let textured = base.mapv(|v| v + TEXTURE_SIGMA * standard_normal(rng));
    (soften(&textured), mask)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(rng)
}
