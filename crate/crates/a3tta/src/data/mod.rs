//! Synthetic multi-domain benchmark generation and dataset handling.
//!
//! A dataset is a list of (image, mask) samples tagged with a domain name.
//! The generator renders a geometric phantom and pushes it through a
//! per-domain intensity transform chain; real data can be brought in through
//! the manifest loader instead.

pub mod manifest;
pub mod phantom;
pub mod transforms;

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

pub use manifest::{load_dataset, write_dataset};
pub use transforms::BlurAxis;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeding::rng_for;

/// Geometry and label-space parameters of the synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTask {
    pub image_size: usize,
    pub num_classes: usize,
    /// Disk radius range in pixels.
    pub inner_radius: (f64, f64),
    /// Ring thickness range added on top of the disk radius.
    pub ring_thickness: (f64, f64),
    /// Lobe radius range.
    pub lobe_radius: (f64, f64),
    /// Structure center offset from the image center, as a fraction of the
    /// image size. Kept small so geometry stays roughly registered across
    /// samples, as anatomy is across patients.
    pub center_jitter: f64,
    /// Angular placement range of the lobe in radians. A narrow range keeps
    /// the lobe on the same side across samples.
    pub lobe_angle: (f64, f64),
    /// A class counts as present with at least this many pixels.
    pub min_class_pixels: usize,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 4,
            inner_radius: (6.5, 8.5),
            ring_thickness: (3.5, 4.5),
            lobe_radius: (4.0, 5.0),
            center_jitter: 0.02,
            lobe_angle: (0.8, 1.3),
            min_class_pixels: 8,
        }
    }
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "synthetic task supports 2 to 4 classes, got {}",
                self.num_classes
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config("image size must be at least 16".into()));
        }
        for (name, (lo, hi)) in [
            ("inner_radius", self.inner_radius),
            ("ring_thickness", self.ring_thickness),
            ("lobe_radius", self.lobe_radius),
        ] {
            if lo <= 0.0 || hi < lo {
                return Err(Error::Config(format!("invalid {name} range [{lo}, {hi}]")));
            }
        }
        if !(0.0..=0.25).contains(&self.center_jitter) {
            return Err(Error::Config(format!(
                "center jitter {} outside [0, 0.25]",
                self.center_jitter
            )));
        }
        let (lo, hi) = self.lobe_angle;
        if !(0.0 <= lo && lo <= hi && hi <= std::f64::consts::TAU) {
            return Err(Error::Config(format!(
                "lobe angle range [{lo}, {hi}] not within [0, 2pi]"
            )));
        }
        Ok(())
    }
}

/// One appearance domain: a named intensity transform chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainSpec {
    pub name: String,
    pub gamma: f64,
    pub contrast: f64,
    pub brightness: f64,
    pub bias_field_strength: f64,
    pub gaussian_noise_sigma: f64,
    pub rician_noise_sigma: f64,
    pub motion_blur_len: usize,
    pub motion_blur_axis: BlurAxis,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            name: "identity".into(),
            gamma: 1.0,
            contrast: 1.0,
            brightness: 0.0,
            bias_field_strength: 0.0,
            gaussian_noise_sigma: 0.0,
            rician_noise_sigma: 0.0,
            motion_blur_len: 1,
            motion_blur_axis: BlurAxis::Horizontal,
        }
    }
}

impl DomainSpec {
    pub fn identity(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\t', '\n']) {
            return Err(Error::Config(format!(
                "domain name {:?} must be non-empty and path-safe",
                self.name
            )));
        }
        if !(0.4..=2.5).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma {} outside [0.4, 2.5]",
                self.gamma
            )));
        }
        if self.contrast <= 0.0 {
            return Err(Error::Config("contrast must be positive".into()));
        }
        if self.gaussian_noise_sigma < 0.0
            || self.rician_noise_sigma < 0.0
            || self.bias_field_strength < 0.0
        {
            return Err(Error::Config("noise and bias amplitudes must be ≥ 0".into()));
        }
        if self.motion_blur_len == 0 {
            return Err(Error::Config("motion blur length must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// One image/mask pair.
#[derive(Debug, Clone)]
pub struct Sample<F: Scalar> {
    pub id: String,
    pub domain: String,
    pub spacing: f64,
    /// `[H, W]`, intensities in [−1, 1].
    pub image: Array2<F>,
    /// `[H, W]`, labels `0..num_classes`.
    pub mask: Array2<u8>,
}

/// A validated list of samples sharing one image shape and label space.
#[derive(Debug, Clone)]
pub struct Dataset<F: Scalar> {
    samples: Vec<Sample<F>>,
    num_classes: usize,
}

/// A fixed-order slice of a dataset, shaped for the model.
#[derive(Debug, Clone)]
pub struct Batch<F: Scalar> {
    /// `[B, 1, H, W]`
    pub images: Array4<F>,
    /// `[B, H, W]`
    pub masks: Array3<u8>,
    pub ids: Vec<String>,
    pub domains: Vec<String>,
    pub spacings: Vec<f64>,
}

impl<F: Scalar> Dataset<F> {
    pub fn new(samples: Vec<Sample<F>>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(
                "a dataset needs at least 2 classes".into(),
            ));
        }
        if let Some(first) = samples.first() {
            let dim = first.image.dim();
            for s in &samples {
                if s.image.dim() != dim {
                    return Err(Error::shape(
                        format!("image {}", s.id),
                        format!("{dim:?}"),
                        format!("{:?}", s.image.dim()),
                    ));
                }
                if s.mask.dim() != s.image.dim() {
                    return Err(Error::shape(
                        format!("mask {}", s.id),
                        format!("{:?}", s.image.dim()),
                        format!("{:?}", s.mask.dim()),
                    ));
                }
                if let Some(&bad) = s.mask.iter().find(|&&v| v as usize >= num_classes) {
                    return Err(Error::InvalidArgument(format!(
                        "mask {} holds label {bad} but the task has {num_classes} classes",
                        s.id
                    )));
                }
                if s.spacing <= 0.0 || !s.spacing.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "sample {} has non-positive spacing {}",
                        s.id, s.spacing
                    )));
                }
            }
        }
        Ok(Self {
            samples,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn samples(&self) -> &[Sample<F>] {
        &self.samples
    }

    /// `(H, W)` shared by every sample; `None` when empty.
    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| s.image.dim())
    }

    /// Stacks every image into `[N, 1, H, W]`.
    pub fn images_array(&self) -> Result<Array4<F>> {
        let (h, w) = self
            .image_shape()
            .ok_or_else(|| Error::InvalidArgument("dataset is empty".into()))?;
        let mut out = Array4::zeros((self.len(), 1, h, w));
        for (i, s) in self.samples.iter().enumerate() {
            out.index_axis_mut(Axis(0), i)
                .index_axis_mut(Axis(0), 0)
                .assign(&s.image);
        }
        Ok(out)
    }

    /// Stacks every mask into `[N, H, W]`.
    pub fn masks_array(&self) -> Result<Array3<u8>> {
        let (h, w) = self
            .image_shape()
            .ok_or_else(|| Error::InvalidArgument("dataset is empty".into()))?;
        let mut out = Array3::zeros((self.len(), h, w));
        for (i, s) in self.samples.iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(&s.mask);
        }
        Ok(out)
    }

    /// Splits the sample order into batches; the final batch may be short.
    pub fn batches(&self, batch_size: usize) -> Result<Vec<Batch<F>>> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be ≥ 1".into()));
        }
        let Some((h, w)) = self.image_shape() else {
            return Ok(Vec::new());
        };
        let mut out = Vec::with_capacity(self.len().div_ceil(batch_size));
        for chunk in self.samples.chunks(batch_size) {
            let b = chunk.len();
            let mut images = Array4::zeros((b, 1, h, w));
            let mut masks = Array3::zeros((b, h, w));
            for (j, s) in chunk.iter().enumerate() {
                images
                    .index_axis_mut(Axis(0), j)
                    .index_axis_mut(Axis(0), 0)
                    .assign(&s.image);
                masks.index_axis_mut(Axis(0), j).assign(&s.mask);
            }
            out.push(Batch {
                images,
                masks,
                ids: chunk.iter().map(|s| s.id.clone()).collect(),
                domains: chunk.iter().map(|s| s.domain.clone()).collect(),
                spacings: chunk.iter().map(|s| s.spacing).collect(),
            });
        }
        Ok(out)
    }

    /// Copy with the sample order permuted by `rng`. Arrival order is the
    /// one stochastic element of an adaptation run; deriving it from the run
    /// seed keeps every method on the identical stream.
    pub fn shuffled(&self, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        use rand::seq::SliceRandom;
        let mut samples = self.samples.clone();
        samples.shuffle(rng);
        Self {
            samples,
            num_classes: self.num_classes,
        }
    }

    /// Domain names in first-appearance order.
    pub fn domains(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.samples {
            if !out.contains(&s.domain) {
                out.push(s.domain.clone());
            }
        }
        out
    }

    pub fn filter_domain(&self, name: &str) -> Self {
        Self {
            samples: self
                .samples
                .iter()
                .filter(|s| s.domain == name)
                .cloned()
                .collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Renders `n` samples and applies the domain's transform chain, then the
/// final [−1, 1] rescale. Deterministic in `(task, spec, n, seed)`.
pub fn generate_domain<F: Scalar>(
    task: &SyntheticTask,
    spec: &DomainSpec,
    n: usize,
    seed: u64,
) -> Result<Dataset<F>> {
    task.validate()?;
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument(
            "domain generation needs n ≥ 1".into(),
        ));
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut geom = rng_for(seed, "geom", i as u64);
        let mut xform = rng_for(seed, "xform", i as u64);
        let (mut img, mask) = phantom::render_sample(task, &mut geom);
        transforms::apply_domain(&mut img, spec, &mut xform);
        transforms::normalize_to_unit_range(&mut img);
        samples.push(Sample {
            id: format!("{}-{i:04}", spec.name),
            domain: spec.name.clone(),
            spacing: 1.0,
            image: img.mapv(F::from_f64),
            mask,
        });
    }
    Dataset::new(samples, task.num_classes)
}

/// Source domain: clean renders with mild sensor noise.
pub fn default_source() -> DomainSpec {
    DomainSpec {
        name: "source".into(),
        gaussian_noise_sigma: 0.005,
        ..DomainSpec::default()
    }
}

/// Three target domains of increasing shift severity. The shifts are
/// dominated by global intensity remaps, so every image in a domain is
/// corrupted the same way, as a scanner change would.
pub fn default_targets() -> Vec<DomainSpec> {
    vec![
        DomainSpec {
            name: "shift_mild".into(),
            gamma: 0.55,
            brightness: 0.06,
            gaussian_noise_sigma: 0.01,
            ..DomainSpec::default()
        },
        DomainSpec {
            name: "shift_moderate".into(),
            gamma: 1.6,
            contrast: 0.95,
            gaussian_noise_sigma: 0.005,
            ..DomainSpec::default()
        },
        DomainSpec {
            name: "shift_severe".into(),
            gamma: 2.3,
            contrast: 0.8,
            brightness: -0.05,
            gaussian_noise_sigma: 0.015,
            ..DomainSpec::default()
        },
    ]
}

/// Everything needed to regenerate or reload a benchmark directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub version: u32,
    pub task: SyntheticTask,
    pub seed: u64,
    pub source: DomainSpec,
    pub targets: Vec<DomainSpec>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_target: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            version: 1,
            task: SyntheticTask::default(),
            seed: 17,
            source: default_source(),
            targets: default_targets(),
            n_train: 120,
            n_val: 40,
            n_target: 200,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.source.validate()?;
        for t in &self.targets {
            t.validate()?;
        }
        let mut names: Vec<&str> = self.targets.iter().map(|t| t.name.as_str()).collect();
        names.push(&self.source.name);
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("domain names must be unique".into()));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_target == 0 {
            return Err(Error::Config("benchmark split sizes must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn split_dir(&self, root: &Path, split: &BenchmarkSplit) -> PathBuf {
        match split {
            BenchmarkSplit::SourceTrain => root.join("source_train"),
            BenchmarkSplit::SourceVal => root.join("source_val"),
            BenchmarkSplit::Target(name) => root.join(name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BenchmarkSplit {
    SourceTrain,
    SourceVal,
    Target(String),
}

/// Generates every split and writes it under `root` along with the
/// benchmark description file.
pub fn generate_benchmark<F: Scalar>(root: &Path, config: &BenchmarkConfig) -> Result<()> {
    config.validate()?;
    let splits: Vec<(BenchmarkSplit, &DomainSpec, usize, u64)> = {
        let mut v = vec![
            (
                BenchmarkSplit::SourceTrain,
                &config.source,
                config.n_train,
                0u64,
            ),
            (BenchmarkSplit::SourceVal, &config.source, config.n_val, 1),
        ];
        for (i, t) in config.targets.iter().enumerate() {
            v.push((
                BenchmarkSplit::Target(t.name.clone()),
                t,
                config.n_target,
                2 + i as u64,
            ));
        }
        v
    };
    for (split, spec, n, idx) in splits {
        let seed = crate::seeding::derive_seed(config.seed, "benchmark-split", idx);
        let ds = generate_domain::<F>(&config.task, spec, n, seed)?;
        write_dataset(&config.split_dir(root, &split), &ds)?;
    }
    let path = root.join("benchmark.json");
    let json = serde_json::to_string_pretty(config)
        .map_err(|e| Error::format(&path, e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Reads a benchmark description written by [`generate_benchmark`].
pub fn load_benchmark_config(root: &Path) -> Result<BenchmarkConfig> {
    let path = root.join("benchmark.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let config: BenchmarkConfig =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if config.version != 1 {
        return Err(Error::format(
            &path,
            format!("unsupported benchmark version {}", config.version),
        ));
    }
    config.validate()?;
    Ok(config)
}
