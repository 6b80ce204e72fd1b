//! Dataset directory layout: PNG rasters plus a line-oriented manifest.
//!
//! Images are 16-bit grayscale PNGs holding [−1, 1] intensities mapped
//! affinely onto the integer range; masks are 8-bit label PNGs. The
//! manifest is tab-separated with a versioned header line; paths are
//! relative to the manifest's directory.

use std::fs;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::Array2;

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const HEADER: &str = "a3tta-manifest v1";
const MANIFEST_NAME: &str = "manifest.tsv";

fn encode_intensity(v: f64) -> u16 {
    (((v + 1.0) / 2.0 * 65535.0).round().clamp(0.0, 65535.0)) as u16
}

fn decode_intensity(u: u16) -> f64 {
    u as f64 / 65535.0 * 2.0 - 1.0
}

fn write_image<F: Scalar>(path: &Path, img: &Array2<F>) -> Result<()> {
    let (h, w) = img.dim();
    let buf = ImageBuffer::<Luma<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
        Luma([encode_intensity(img[(y as usize, x as usize)].to_f64())])
    });
    buf.save(path)
        .map_err(|e| Error::format(path, format!("image encode: {e}")))
}

fn write_mask(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let buf = ImageBuffer::<Luma<u8>, Vec<u8>>::from_fn(w as u32, h as u32, |x, y| {
        Luma([mask[(y as usize, x as usize)]])
    });
    buf.save(path)
        .map_err(|e| Error::format(path, format!("mask encode: {e}")))
}

fn read_image<F: Scalar>(path: &Path) -> Result<Array2<F>> {
    let img = image::open(path).map_err(|e| Error::format(path, format!("image decode: {e}")))?;
    let gray = match img {
        DynamicImage::ImageLuma16(b) => b,
        other => other.to_luma16(),
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        F::from_f64(decode_intensity(gray.get_pixel(x as u32, y as u32)[0]))
    }))
}

fn read_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|e| Error::format(path, format!("mask decode: {e}")))?;
    let gray = match img {
        DynamicImage::ImageLuma8(b) => b,
        other => {
            // Any non-u8 container risks silently rescaling label values.
            if other.color().bits_per_pixel() != 8 {
                return Err(Error::format(path, "mask must be an 8-bit grayscale PNG"));
            }
            other.to_luma8()
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        gray.get_pixel(x as u32, y as u32)[0]
    }))
}

/// Writes `dataset` under `dir`: `images/`, `masks/`, and the manifest.
pub fn write_dataset<F: Scalar>(dir: &Path, dataset: &Dataset<F>) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    let mut lines = vec![HEADER.to_string()];
    for s in dataset.samples() {
        let img_rel = format!("images/{}.png", s.id);
        let mask_rel = format!("masks/{}.png", s.id);
        write_image(&dir.join(&img_rel), &s.image)?;
        write_mask(&dir.join(&mask_rel), &s.mask)?;
        lines.push(format!(
            "{img_rel}\t{mask_rel}\t{}\t{}",
            s.domain, s.spacing
        ));
    }
    lines.push(String::new());
    let manifest = dir.join(MANIFEST_NAME);
    fs::write(&manifest, lines.join("\n")).map_err(|e| Error::io(&manifest, e))
}

/// Loads a dataset from a manifest file or from a directory containing one.
/// Every referenced raster is read eagerly and validated against
/// `num_classes`.
pub fn load_dataset<F: Scalar>(path: &Path, num_classes: usize) -> Result<Dataset<F>> {
    let manifest = if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == HEADER => {}
        other => {
            return Err(Error::format(
                &manifest,
                format!("expected header {HEADER:?}, found {other:?}"),
            ));
        }
    }
    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::format(
                &manifest,
                format!("line {}: expected 4 tab-separated fields", lineno + 2),
            ));
        }
        let spacing: f64 = fields[3].parse().map_err(|_| {
            Error::format(
                &manifest,
                format!("line {}: bad spacing {:?}", lineno + 2, fields[3]),
            )
        })?;
        let img_path = base.join(fields[0]);
        let mask_path = base.join(fields[1]);
        let id = Path::new(fields[0])
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(fields[0])
            .to_string();
        samples.push(Sample {
            id,
            domain: fields[2].to_string(),
            spacing,
            image: read_image(&img_path)?,
            mask: read_mask(&mask_path)?,
        });
    }
    Dataset::new(samples, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_source, generate_domain, SyntheticTask};

    #[test]
    fn round_trip_is_stable_after_one_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_domain::<f32>(
            &SyntheticTask::default(),
            &default_source(),
            3,
            29,
        )
        .unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let once = load_dataset::<f32>(dir.path(), 4).unwrap();
        assert_eq!(once.len(), 3);
        for (a, b) in ds.samples().iter().zip(once.samples().iter()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.domain, b.domain);
            assert_eq!(a.mask, b.mask);
            for (x, y) in a.image.iter().zip(b.image.iter()) {
                assert!((x - y).abs() < 2.0 / 65535.0 + 1e-6);
            }
        }
        // A second write/load cycle reproduces values exactly: the data
        // already sits on the quantization grid.
        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(dir2.path(), &once).unwrap();
        let twice = load_dataset::<f32>(dir2.path(), 4).unwrap();
        for (a, b) in once.samples().iter().zip(twice.samples().iter()) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.mask, b.mask);
        }
    }

    #[test]
    fn empty_manifest_loads_as_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(MANIFEST_NAME), format!("{HEADER}\n")).unwrap();
        let ds = load_dataset::<f32>(dir.path(), 4).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn bad_header_and_bad_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join(MANIFEST_NAME);
        std::fs::write(&m, "something else\n").unwrap();
        assert!(load_dataset::<f32>(dir.path(), 4).is_err());

        std::fs::write(&m, format!("{HEADER}\nonly-one-field\n")).unwrap();
        assert!(load_dataset::<f32>(dir.path(), 4).is_err());

        std::fs::write(&m, format!("{HEADER}\na.png\tb.png\tdom\tnot-a-number\n")).unwrap();
        assert!(load_dataset::<f32>(dir.path(), 4).is_err());

        std::fs::write(&m, format!("{HEADER}\nmissing.png\tb.png\tdom\t1.0\n")).unwrap();
        assert!(load_dataset::<f32>(dir.path(), 4).is_err());
    }

    #[test]
    fn labels_beyond_class_count_are_rejected_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_domain::<f32>(
            &SyntheticTask::default(),
            &default_source(),
            1,
            31,
        )
        .unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        // The generator uses 4 classes; pretending the task has 3 must fail.
        assert!(load_dataset::<f32>(dir.path(), 3).is_err());
    }
}
