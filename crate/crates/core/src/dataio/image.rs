//! Single-channel float images and their PNG encoding.

use std::path::Path;

use image::{GrayImage, ImageFormat, Luma};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

/// Row-major grayscale grid. Pixel `(x, y)` is column `x`, row `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "image data length");
        Image { width, height, data }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Image::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Image::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Bilinear sample at continuous pixel coordinates, clamping to the edge.
    pub fn sample_clamped(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        self.bilinear(x, y)
    }

    /// Bilinear sample, `fill` outside the image. Points within half a pixel
    /// of the border are still interpolated from edge pixels.
    pub fn sample_or(&self, x: f64, y: f64, fill: f64) -> f64 {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(x > -0.5 && x < w - 0.5 && y > -0.5 && y < h - 0.5) {
            return fill;
        }
        self.sample_clamped(x, y)
    }

    fn bilinear(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let top = if fx == 0.0 {
            self.get(x0, y0)
        } else {
            (1.0 - fx) * self.get(x0, y0) + fx * self.get(x1, y0)
        };
        if fy == 0.0 {
            return top;
        }
        let bottom = if fx == 0.0 {
            self.get(x0, y1)
        } else {
            (1.0 - fx) * self.get(x0, y1) + fx * self.get(x1, y1)
        };
        (1.0 - fy) * top + fy * bottom
    }

    /// Bilinear resize so that output pixel `j` samples source `j * src / dst`.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Image::from_fn(width, height, |x, y| self.sample_clamped(x as f64 * sx, y as f64 * sy))
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }

    pub fn to_gray8(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.get(x as usize, y as usize).clamp(0.0, 1.0);
            Luma([(v * 255.0).round() as u8])
        })
    }

    pub fn from_gray8(img: &GrayImage) -> Image {
        let (w, h) = img.dimensions();
        Image::new(
            w as usize,
            h as usize,
            img.pixels().map(|p| f64::from(p.0[0]) / 255.0).collect(),
        )
    }
}

/// Read any PNG as 8-bit grayscale scaled to `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: format!("unreadable image: {e}"),
    })?;
    Ok(Image::from_gray8(&img.to_luma8()))
}

pub fn encode_png(img: &image::DynamicImage) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).expect("in-memory PNG encoding");
    buf.into_inner()
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    write_atomic(path, &encode_png(&image::DynamicImage::ImageLuma8(img.to_gray8())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_to_same_size_is_exact() {
        let img = Image::from_fn(7, 5, |x, y| (x * 13 + y * 7) as f64 / 100.0);
        assert_eq!(img.resize(7, 5), img);
    }

    #[test]
    fn bilinear_midpoint_averages_neighbours() {
        let img = Image::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]);
        assert!((img.sample_clamped(0.5, 0.5) - 1.5).abs() < 1e-15);
        assert_eq!(img.sample_or(-1.0, 0.0, -7.0), -7.0);
    }

    #[test]
    fn png_round_trip_on_8bit_levels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Image::from_fn(4, 3, |x, y| ((x + 4 * y) * 20) as f64 / 255.0);
        write_png(&p, &img).unwrap();
        let back = read_png(&p).unwrap();
        assert_eq!(back, img);
    }
}
