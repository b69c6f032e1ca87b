//! Synthetic hand-radiograph stand-in: white disks on a dark background
//! whose count and radius grow with a latent age. Disk centres double as
//! keypoints, so the attention map carries the same signal as the image.

use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{write_png, Image};
use super::loader::{annotations_path, csv_path, image_path, Annotation, Annotations, LabelRow};
use super::sample::NUM_KEYPOINTS;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const BACKGROUND: f64 = 16.0 / 255.0;
pub const FOREGROUND: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_samples: usize,
    pub image_size: usize,
    /// Latent ages are drawn uniformly from this closed interval (months).
    pub age_range: (f64, f64),
    /// Months per additional disk, female / male.
    pub months_per_disk: (f64, f64),
    /// Disk radius in pixels at the lower and upper end of `age_range`.
    pub radius_range: (f64, f64),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            n_samples: 512,
            image_size: 500,
            age_range: (0.0, 228.0),
            months_per_disk: (14.25, 15.2),
            radius_range: (10.0, 30.0),
        }
    }
}

impl SyntheticSpec {
    pub fn new(seed: u64, n_samples: usize) -> Self {
        SyntheticSpec {
            seed,
            n_samples,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be positive".into()));
        }
        let (lo, hi) = self.age_range;
        if !(lo >= 0.0 && lo <= hi && hi <= super::sample::MAX_BONE_AGE) {
            return Err(Error::InvalidArgument(format!("age_range {lo}..{hi} must lie in [0, 240]")));
        }
        let (r0, r1) = self.radius_range;
        if !(r0 > 0.0 && r0 <= r1) || self.months_per_disk.0 <= 0.0 || self.months_per_disk.1 <= 0.0 {
            return Err(Error::InvalidArgument("disk radius and spacing must be positive".into()));
        }
        // Room for the largest number of the largest disks.
        let max_disks = self.disk_count(hi, 0).max(self.disk_count(hi, 1)) as f64;
        let area = std::f64::consts::PI * (r1 + 2.0) * (r1 + 2.0) * max_disks;
        if area > 0.35 * (self.image_size * self.image_size) as f64 {
            return Err(Error::InvalidArgument(format!(
                "image_size {} is too small for {max_disks} disks of radius {r1}",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Monotone in age; one disk at the bottom of the range.
    pub fn disk_count(&self, age: f64, gender: u8) -> usize {
        let per = if gender == 0 { self.months_per_disk.0 } else { self.months_per_disk.1 };
        1 + ((age - self.age_range.0).max(0.0) / per).floor() as usize
    }

    pub fn disk_radius(&self, age: f64) -> f64 {
        let (lo, hi) = self.age_range;
        let t = if hi > lo { ((age - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
        self.radius_range.0 + t * (self.radius_range.1 - self.radius_range.0)
    }
}

/// One rendered sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    pub age: f64,
    pub gender: u8,
    pub image: Image,
    pub centers: Vec<(f64, f64)>,
    pub radius: f64,
}

pub fn render_disks(size: usize, centers: &[(f64, f64)], radius: f64) -> Image {
    let mut img = Image::filled(size, size, BACKGROUND);
    let r2 = radius * radius;
    for &(cx, cy) in centers {
        let lo = |c: f64| (c - radius).floor().max(0.0) as usize;
        let hi = |c: f64| ((c + radius).ceil() as usize).min(size - 1);
        for y in lo(cy)..=hi(cy) {
            for x in lo(cx)..=hi(cx) {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                if dx * dx + dy * dy <= r2 {
                    img.set(x, y, FOREGROUND);
                }
            }
        }
    }
    img
}

/// Draw sample `index`; depends only on `(spec, index)`.
pub fn synthesize(spec: &SyntheticSpec, index: usize) -> Result<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (lo, hi) = spec.age_range;
    let age = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let gender = u8::from(rng.random_bool(0.5));
    let count = spec.disk_count(age, gender);
    let radius = spec.disk_radius(age);
    let margin = radius + 2.0;
    let size = spec.image_size as f64;
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while centers.len() < count {
        attempts += 1;
        if attempts > 200_000 {
            return Err(Error::Data(format!(
                "could not place {count} disks of radius {radius:.1} in a {size}px image"
            )));
        }
        let c = (rng.random_range(margin..size - margin), rng.random_range(margin..size - margin));
        let min_dist = 2.0 * radius + 2.0;
        if centers
            .iter()
            .all(|&(x, y)| (x - c.0).powi(2) + (y - c.1).powi(2) >= min_dist * min_dist)
        {
            centers.push(c);
        }
    }
    Ok(SyntheticSample {
        id: format!("syn{index:05}"),
        age,
        gender,
        image: render_disks(spec.image_size, &centers, radius),
        centers,
        radius,
    })
}

/// Write `spec.n_samples` samples as split `split` under `root`.
pub fn generate_synthetic(spec: &SyntheticSpec, root: &Path, split: &str) -> Result<Vec<LabelRow>> {
    generate_synthetic_range(spec, root, split, 0..spec.n_samples)
}

/// Write samples `indices` as one split; disjoint ranges give disjoint ids.
pub fn generate_synthetic_range(spec: &SyntheticSpec, root: &Path, split: &str, indices: Range<usize>) -> Result<Vec<LabelRow>> {
    spec.validate()?;
    let mut csv = String::from("id,boneage_months,male\n");
    let mut anns = Annotations::new();
    let mut rows = Vec::with_capacity(indices.len());
    for i in indices {
        let s = synthesize(spec, i)?;
        write_png(&image_path(root, split, &s.id), &s.image)?;
        csv.push_str(&format!("{},{},{}\n", s.id, s.age, s.gender));
        let sz = spec.image_size as f64;
        anns.insert(
            s.id.clone(),
            Annotation {
                bbox: [0.0, 0.0, sz, sz],
                keypoints: s.centers.iter().take(NUM_KEYPOINTS).map(|&(x, y)| Some([x, y])).collect(),
            },
        );
        rows.push(LabelRow {
            id: s.id,
            bone_age: s.age,
            gender: s.gender,
        });
    }
    write_atomic(&csv_path(root, split), csv.as_bytes())?;
    let json = serde_json::to_vec_pretty(&anns).expect("annotations serialize");
    write_atomic(&annotations_path(root, split), &json)?;
    Ok(rows)
}
