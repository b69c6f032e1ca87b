//! Training-time augmentation. Photometric changes touch the image only;
//! the affine warp and flip are applied identically to the attention map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Maximum absolute translation as a fraction of the side length.
    pub translate: f64,
    pub scale: (f64, f64),
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            brightness: (0.8, 1.2),
            contrast: (0.8, 1.2),
            rotation_deg: 15.0,
            translate: 0.05,
            scale: (0.9, 1.1),
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi;
        if !ordered(self.brightness) || !ordered(self.contrast) || !ordered(self.scale) {
            return Err(Error::Config(
                "augmentation ranges must satisfy 0 < low <= high".into(),
            ));
        }
        if self.rotation_deg < 0.0 || self.translate < 0.0 || !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("augmentation magnitudes must be non-negative, flip_prob in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One concrete set of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub brightness: f64,
    pub contrast: f64,
    pub rotation_deg: f64,
    /// Translation in pixels.
    pub translate: (f64, f64),
    pub scale: f64,
    pub flip: bool,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        AugmentDraw {
            brightness: 1.0,
            contrast: 1.0,
            rotation_deg: 0.0,
            translate: (0.0, 0.0),
            scale: 1.0,
            flip: false,
        }
    }

    fn sample_range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        }
    }

    fn sample_sym(rng: &mut impl Rng, m: f64) -> f64 {
        if m == 0.0 {
            0.0
        } else {
            rng.random_range(-m..=m)
        }
    }

    pub fn sample(cfg: &AugmentConfig, size: usize, rng: &mut impl Rng) -> Self {
        let t = cfg.translate * size as f64;
        AugmentDraw {
            brightness: Self::sample_range(rng, cfg.brightness),
            contrast: Self::sample_range(rng, cfg.contrast),
            rotation_deg: Self::sample_sym(rng, cfg.rotation_deg),
            translate: (Self::sample_sym(rng, t), Self::sample_sym(rng, t)),
            scale: Self::sample_range(rng, cfg.scale),
            flip: rng.random_bool(cfg.flip_prob),
        }
    }

    /// Draws depend only on `(seed, epoch, index)`, never on iteration order.
    pub fn for_sample(cfg: &AugmentConfig, size: usize, seed: u64, epoch: usize, index: usize) -> Self {
        if !cfg.enabled {
            return Self::identity();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((epoch as u64) << 32) ^ index as u64);
        Self::sample(cfg, size, &mut rng)
    }

    fn is_affine_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.translate == (0.0, 0.0) && self.scale == 1.0
    }
}

/// Brightness then contrast about the image mean, clipped to `[0, 1]`.
pub fn photometric(img: &Image, d: &AugmentDraw) -> Image {
    let mut out = img.clone();
    for v in out.data_mut() {
        *v *= d.brightness;
    }
    if d.contrast != 1.0 {
        let mean = out.mean();
        for v in out.data_mut() {
            *v = (*v - mean) * d.contrast + mean;
        }
    }
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Rotation and scale about the centre, then translation, then optional flip.
/// Pixels mapped from outside the source are filled with 0.
pub fn geometric(img: &Image, d: &AugmentDraw) -> Image {
    let warped = if d.is_affine_identity() {
        img.clone()
    } else {
        let (w, h) = (img.width(), img.height());
        let cx = (w as f64 - 1.0) / 2.0;
        let cy = (h as f64 - 1.0) / 2.0;
        let (sin, cos) = d.rotation_deg.to_radians().sin_cos();
        // Inverse map: output point -> source point.
        Image::from_fn(w, h, |x, y| {
            let px = x as f64 - cx - d.translate.0;
            let py = y as f64 - cy - d.translate.1;
            let sx = (cos * px + sin * py) / d.scale + cx;
            let sy = (-sin * px + cos * py) / d.scale + cy;
            img.sample_or(sx, sy, 0.0)
        })
    };
    if d.flip {
        warped.flip_horizontal()
    } else {
        warped
    }
}

/// Augment an image and its attention map with the same draw.
pub fn augment(image: &Image, map: &Image, d: &AugmentDraw) -> (Image, Image) {
    let img = geometric(&photometric(image, d), d);
    let map = geometric(map, d);
    (img, map)
}
