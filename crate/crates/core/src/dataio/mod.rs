//! Loading, preprocessing and augmenting hand radiographs, plus the synthetic
//! disk dataset used for desk-scale runs.

pub mod augment;
pub mod image;
pub mod loader;
pub mod sample;
pub mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use self::augment::{augment, AugmentConfig, AugmentDraw};
pub use self::image::Image;
pub use self::loader::{load_dataset, Annotation, LabelRow};
pub use self::sample::{crop_and_resize, make_attention_map, BBox, Combine, Cropped, HandRadiograph, Keypoint, NUM_KEYPOINTS};
pub use self::synth::{generate_synthetic, generate_synthetic_range, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Side length at which the Gaussian width is specified.
pub const REFERENCE_SIZE: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub train_split: String,
    pub val_split: String,
    pub test_split: String,
    /// Gaussian width in pixels of a 500x500 crop; scaled with the input size.
    pub sigma: f64,
    pub combine: Combine,
    pub augment: AugmentConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            train_split: "train".into(),
            val_split: "val".into(),
            test_split: "test".into(),
            sigma: 15.0,
            combine: Combine::Max,
            augment: AugmentConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("data.sigma must be positive, got {}", self.sigma)));
        }
        self.augment.validate()
    }

    /// Gaussian width in pixels of an `input_size` crop.
    pub fn sigma_at(&self, input_size: usize) -> f64 {
        self.sigma * input_size as f64 / REFERENCE_SIZE as f64
    }
}

/// A network-ready sample: square crop and matching attention map.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub sample_id: String,
    pub image: Image,
    pub attention_map: Image,
    pub gender: u8,
    pub bone_age: f64,
}

/// Crop, resize to `size`, and build the attention map from the transformed
/// keypoints.
pub fn prepare(sample: &HandRadiograph, size: usize, cfg: &DataConfig) -> Result<PreparedSample> {
    let cropped = crop_and_resize(sample, size)?;
    let attention_map = make_attention_map(&cropped.keypoints, size, cfg.sigma_at(size), cfg.combine)?;
    Ok(PreparedSample {
        sample_id: sample.sample_id.clone(),
        image: cropped.image,
        attention_map,
        gender: sample.gender,
        bone_age: sample.bone_age,
    })
}

/// Load and prepare a whole split.
pub fn load_prepared(root: &Path, split: &str, size: usize, cfg: &DataConfig) -> Result<Vec<PreparedSample>> {
    load_dataset(root, split)?
        .iter()
        .map(|s| prepare(s, size, cfg))
        .collect()
}

impl synth::SyntheticSample {
    /// The sample as a radiograph with a full-image box and disk-centre keypoints.
    pub fn to_radiograph(&self) -> HandRadiograph {
        HandRadiograph {
            sample_id: self.id.clone(),
            image: self.image.clone(),
            bbox: BBox::full(&self.image),
            keypoints: sample::pad_keypoints(self.centers.iter().take(NUM_KEYPOINTS).map(|&c| Some(c)).collect()),
            gender: self.gender,
            bone_age: self.age,
        }
    }
}

/// Render and prepare synthetic samples in memory, skipping the disk layout.
pub fn synthetic_prepared(spec: &SyntheticSpec, size: usize, cfg: &DataConfig) -> Result<Vec<PreparedSample>> {
    synthetic_prepared_range(spec, 0..spec.n_samples, size, cfg)
}

pub fn synthetic_prepared_range(
    spec: &SyntheticSpec,
    indices: std::ops::Range<usize>,
    size: usize,
    cfg: &DataConfig,
) -> Result<Vec<PreparedSample>> {
    spec.validate()?;
    indices
        .map(|i| prepare(&synth::synthesize(spec, i)?.to_radiograph(), size, cfg))
        .collect()
}

/// Network inputs for a batch of samples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[N, 1, S, S]`.
    pub images: Tensor,
    pub maps: Tensor,
    pub genders: Vec<usize>,
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Stack samples into tensors, optionally augmenting sample `i` with `draws[i]`.
pub fn collate(samples: &[&PreparedSample], draws: Option<&[AugmentDraw]>) -> Batch {
    let n = samples.len();
    let (h, w) = samples
        .first()
        .map(|s| (s.image.height(), s.image.width()))
        .unwrap_or((0, 0));
    let mut img = Vec::with_capacity(n * h * w);
    let mut map = Vec::with_capacity(n * h * w);
    for (i, s) in samples.iter().enumerate() {
        match draws.map(|d| d[i]) {
            Some(d) if d != AugmentDraw::identity() => {
                let (a, m) = augment(&s.image, &s.attention_map, &d);
                img.extend_from_slice(a.data());
                map.extend_from_slice(m.data());
            }
            _ => {
                img.extend_from_slice(s.image.data());
                map.extend_from_slice(s.attention_map.data());
            }
        }
    }
    Batch {
        ids: samples.iter().map(|s| s.sample_id.clone()).collect(),
        images: Tensor::new(&[n, 1, h, w], img),
        maps: Tensor::new(&[n, 1, h, w], map),
        genders: samples.iter().map(|s| usize::from(s.gender)).collect(),
        labels: samples.iter().map(|s| s.bone_age).collect(),
    }
}
