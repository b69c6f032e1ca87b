use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};

pub const NUM_KEYPOINTS: usize = 17;
pub const MAX_BONE_AGE: f64 = 240.0;

/// `None` marks an absent keypoint.
pub type Keypoint = Option<(f64, f64)>;

/// Axis-aligned box in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn full(img: &Image) -> BBox {
        BBox {
            x0: 0.0,
            y0: 0.0,
            w: img.width() as f64,
            h: img.height() as f64,
        }
    }

    /// Intersection with the image rectangle.
    pub fn clamped(&self, width: usize, height: usize) -> BBox {
        let x0 = self.x0.clamp(0.0, width as f64);
        let y0 = self.y0.clamp(0.0, height as f64);
        let x1 = (self.x0 + self.w).clamp(0.0, width as f64);
        let y1 = (self.y0 + self.h).clamp(0.0, height as f64);
        BBox {
            x0,
            y0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandRadiograph {
    pub sample_id: String,
    /// Intensities in `[0, 1]`.
    pub image: Image,
    pub bbox: BBox,
    /// Exactly [`NUM_KEYPOINTS`] entries.
    pub keypoints: Vec<Keypoint>,
    /// 0 = female, 1 = male.
    pub gender: u8,
    /// Months.
    pub bone_age: f64,
}

impl HandRadiograph {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::Sample {
            sample_id: self.sample_id.clone(),
            reason,
        };
        if self.keypoints.len() != NUM_KEYPOINTS {
            return Err(fail(format!("expected {NUM_KEYPOINTS} keypoints, got {}", self.keypoints.len())));
        }
        if self.gender > 1 {
            return Err(fail(format!("gender flag must be 0 or 1, got {}", self.gender)));
        }
        if !(0.0..=MAX_BONE_AGE).contains(&self.bone_age) {
            return Err(fail(format!("bone age {} is outside [0, {MAX_BONE_AGE}]", self.bone_age)));
        }
        if self.image.width() == 0 || self.image.height() == 0 {
            return Err(fail("empty image".into()));
        }
        Ok(())
    }
}

/// Pad with absent entries (or truncate) to exactly [`NUM_KEYPOINTS`].
pub fn pad_keypoints(mut kps: Vec<Keypoint>) -> Vec<Keypoint> {
    kps.resize(NUM_KEYPOINTS, None);
    kps
}

/// A crop resampled to a square grid, with keypoints in its coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Cropped {
    pub image: Image,
    pub keypoints: Vec<Keypoint>,
}

/// Map a source point into an `size x size` crop of `bbox`.
pub fn transform_point(bbox: &BBox, size: usize, (x, y): (f64, f64)) -> (f64, f64) {
    (
        (x - bbox.x0) * size as f64 / bbox.w,
        (y - bbox.y0) * size as f64 / bbox.h,
    )
}

/// Crop to the (clamped) bounding box and resample bilinearly to `size x size`.
/// Output pixel `j` samples source coordinate `x0 + j * w / size`; keypoints
/// follow the same map and are dropped when they leave `[0, size)`.
pub fn crop_and_resize(sample: &HandRadiograph, size: usize) -> Result<Cropped> {
    sample.validate()?;
    let img = &sample.image;
    let bbox = sample.bbox.clamped(img.width(), img.height());
    if !(bbox.w > 0.0 && bbox.h > 0.0) {
        return Err(Error::Sample {
            sample_id: sample.sample_id.clone(),
            reason: format!("degenerate bounding box {:?}", sample.bbox),
        });
    }
    let sx = bbox.w / size as f64;
    let sy = bbox.h / size as f64;
    let image = Image::from_fn(size, size, |j, i| {
        img.sample_clamped(bbox.x0 + j as f64 * sx, bbox.y0 + i as f64 * sy)
    });
    let limit = size as f64;
    let keypoints = sample
        .keypoints
        .iter()
        .map(|kp| {
            kp.map(|p| transform_point(&bbox, size, p))
                .filter(|&(x, y)| (0.0..limit).contains(&x) && (0.0..limit).contains(&y))
        })
        .collect();
    Ok(Cropped { image, keypoints })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    #[default]
    Max,
    /// Sum of Gaussians, clipped to 1.
    Sum,
}

/// Gaussian bumps of width `sigma` pixels centred on each present keypoint.
pub fn make_attention_map(keypoints: &[Keypoint], size: usize, sigma: f64, combine: Combine) -> Result<Image> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let denom = 2.0 * sigma * sigma;
    let present: Vec<(f64, f64)> = keypoints.iter().flatten().copied().collect();
    // Contributions beyond this radius are below f64 resolution next to 1.
    let reach = (denom * 40.0).sqrt();
    let mut map = Image::filled(size, size, 0.0);
    for &(kx, ky) in &present {
        let x_lo = (kx - reach).floor().max(0.0) as usize;
        let x_hi = ((kx + reach).ceil().max(0.0) as usize).min(size.saturating_sub(1));
        let y_lo = (ky - reach).floor().max(0.0) as usize;
        let y_hi = ((ky + reach).ceil().max(0.0) as usize).min(size.saturating_sub(1));
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let (dx, dy) = (x as f64 - kx, y as f64 - ky);
                let v = (-(dx * dx + dy * dy) / denom).exp();
                let cur = map.get(x, y);
                map.set(
                    x,
                    y,
                    match combine {
                        Combine::Max => cur.max(v),
                        Combine::Sum => (cur + v).min(1.0),
                    },
                );
            }
        }
    }
    Ok(map)
}
