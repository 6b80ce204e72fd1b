//! Segmentation quality metrics and their aggregation into report rows.
//!
//! All metrics are 2D and per image. Empty-mask conventions: Dice with both
//! masks empty is 1.0; ASSD with either mask empty is undefined (`None`) and
//! excluded from aggregation with a count; mIoU excludes classes absent from
//! both masks.

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_shapes(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(
            "mask pair",
            format!("{:?}", pred.dim()),
            format!("{:?}", gt.dim()),
        ));
    }
    Ok(())
}

/// Dice overlap `2|A∩B| / (|A|+|B|)` for one class. Both masks empty → 1.0.
pub fn dice(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>, class_id: u8) -> Result<f64> {
    check_shapes(pred, gt)?;
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let pa = p == class_id;
        let gb = g == class_id;
        a += pa as usize;
        b += gb as usize;
        inter += (pa && gb) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Intersection over union for one class. Both masks empty → `None`
/// (the class is excluded from means).
pub fn iou(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>, class_id: u8) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let pa = p == class_id;
        let gb = g == class_id;
        union += (pa || gb) as usize;
        inter += (pa && gb) as usize;
    }
    if union == 0 {
        return Ok(None);
    }
    Ok(Some(inter as f64 / union as f64))
}

/// Mean IoU over `0..num_classes`, skipping classes absent from both masks.
pub fn miou(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>, num_classes: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for k in 0..num_classes {
        if let Some(v) = iou(pred, gt, k as u8)? {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        // Argmax masks always contain some class; only possible when
        // num_classes fails to cover the label range.
        return Err(Error::Undefined(
            "no class present in either mask".into(),
        ));
    }
    Ok(sum / n as f64)
}

/// Foreground pixels of `class_id` with at least one 4-connected neighbor
/// outside the class (the image border counts as outside).
fn boundary_pixels(mask: ArrayView2<'_, u8>, class_id: u8) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w
            && mask[(y as usize, x as usize)] == class_id
    };
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[(y, x)] != class_id {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            if !inside(yi - 1, xi) || !inside(yi + 1, xi) || !inside(yi, xi - 1)
                || !inside(yi, xi + 1)
            {
                out.push((y, x));
            }
        }
    }
    out
}

fn min_distance(p: (usize, usize), set: &[(usize, usize)], spacing: f64) -> f64 {
    set.iter()
        .map(|&(y, x)| {
            let dy = (p.0 as f64 - y as f64) * spacing;
            let dx = (p.1 as f64 - x as f64) * spacing;
            (dy * dy + dx * dx).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Average symmetric surface distance between the two class boundaries,
/// exact all-pairs. Either mask empty for the class → `None`.
pub fn assd(
    pred: ArrayView2<'_, u8>,
    gt: ArrayView2<'_, u8>,
    class_id: u8,
    spacing: f64,
) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    if spacing <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "spacing must be positive, got {spacing}"
        )));
    }
    let a = boundary_pixels(pred, class_id);
    let b = boundary_pixels(gt, class_id);
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let sum_a: f64 = a.iter().map(|&p| min_distance(p, &b, spacing)).sum();
    let sum_b: f64 = b.iter().map(|&p| min_distance(p, &a, spacing)).sum();
    Ok(Some((sum_a + sum_b) / (a.len() + b.len()) as f64))
}

/// Per-image metric row: one Dice and ASSD slot per class plus mIoU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub image_id: String,
    pub domain: String,
    pub round: usize,
    pub dice: Vec<f64>,
    pub assd: Vec<Option<f64>>,
    pub miou: f64,
}

impl MetricRecord {
    /// Mean Dice over the non-background classes.
    pub fn foreground_dice(&self) -> f64 {
        let fg = &self.dice[1..];
        fg.iter().sum::<f64>() / fg.len() as f64
    }
}

/// Computes every per-class metric for one prediction/reference pair.
pub fn evaluate_mask(
    pred: ArrayView2<'_, u8>,
    gt: ArrayView2<'_, u8>,
    num_classes: usize,
    spacing: f64,
    image_id: impl Into<String>,
    domain: impl Into<String>,
    round: usize,
) -> Result<MetricRecord> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(
            "metrics need at least 2 classes".into(),
        ));
    }
    let mut d = Vec::with_capacity(num_classes);
    let mut s = Vec::with_capacity(num_classes);
    for k in 0..num_classes {
        d.push(dice(pred, gt, k as u8)?);
        s.push(assd(pred, gt, k as u8, spacing)?);
    }
    Ok(MetricRecord {
        image_id: image_id.into(),
        domain: domain.into(),
        round,
        dice: d,
        assd: s,
        miou: miou(pred, gt, num_classes)?,
    })
}

/// `mean ± std` row for one record group. ASSD statistics cover defined
/// foreground (image, class) values; `assd_excluded` counts the rest.
#[derive(Debug, Clone, Serialize)]
pub struct GroupSummary {
    pub group: String,
    pub count: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub miou_mean: f64,
    pub miou_std: f64,
    pub assd_mean: Option<f64>,
    pub assd_std: Option<f64>,
    pub assd_excluded: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Groups records by the supplied key and summarizes each group. Dice is
/// the per-image foreground mean; groups come back in key order.
pub fn aggregate<'a, I, K>(records: I, group_by: K) -> Result<Vec<GroupSummary>>
where
    I: IntoIterator<Item = &'a MetricRecord>,
    K: Fn(&MetricRecord) -> String,
{
    let mut groups: BTreeMap<String, Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(group_by(r)).or_default().push(r);
    }
    if groups.is_empty() {
        return Err(Error::InvalidArgument(
            "aggregation needs at least one record".into(),
        ));
    }
    let mut out = Vec::with_capacity(groups.len());
    for (group, rs) in groups {
        let dices: Vec<f64> = rs.iter().map(|r| r.foreground_dice()).collect();
        let mious: Vec<f64> = rs.iter().map(|r| r.miou).collect();
        let mut assds = Vec::new();
        let mut excluded = 0usize;
        for r in &rs {
            for v in r.assd.iter().skip(1) {
                match v {
                    Some(x) => assds.push(*x),
                    None => excluded += 1,
                }
            }
        }
        let (dice_mean, dice_std) = mean_std(&dices);
        let (miou_mean, miou_std) = mean_std(&mious);
        let (assd_mean, assd_std) = if assds.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&assds);
            (Some(m), Some(s))
        };
        out.push(GroupSummary {
            group,
            count: rs.len(),
            dice_mean,
            dice_std,
            miou_mean,
            miou_std,
            assd_mean,
            assd_std,
            assd_excluded: excluded,
        });
    }
    Ok(out)
}
