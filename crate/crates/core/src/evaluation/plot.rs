//! Predicted-vs-actual and deviation-vs-actual scatter panels as a PNG.

use std::path::Path;

use image::{DynamicImage, Rgb, RgbImage};

use super::report::PredictionRecord;
use crate::dataio::image::encode_png;
use crate::dataio::sample::MAX_BONE_AGE;
use crate::error::Result;
use crate::fsutil::write_atomic;

const PANEL: u32 = 400;
const MARGIN: u32 = 30;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GUIDE: Rgb<u8> = Rgb([170, 170, 170]);
const FEMALE: Rgb<u8> = Rgb([214, 39, 40]);
const MALE: Rgb<u8> = Rgb([31, 119, 180]);

struct Panel {
    x0: u32,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Panel {
    fn to_px(&self, x: f64, y: f64) -> (i64, i64) {
        let fx = (x - self.xr.0) / (self.xr.1 - self.xr.0);
        let fy = (y - self.yr.0) / (self.yr.1 - self.yr.0);
        let px = self.x0 + MARGIN;
        let w = f64::from(PANEL - 2 * MARGIN);
        (
            i64::from(px) + (fx * w).round() as i64,
            i64::from(PANEL - MARGIN) - (fy * w).round() as i64,
        )
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), c: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = a.0 as f64 + t * (b.0 - a.0) as f64;
        let y = a.1 as f64 + t * (b.1 - a.1) as f64;
        put(img, x.round() as i64, y.round() as i64, c);
    }
}

fn dot(img: &mut RgbImage, p: (i64, i64), c: Rgb<u8>) {
    for dy in -1..=1 {
        for dx in -1..=1 {
            put(img, p.0 + dx, p.1 + dy, c);
        }
    }
}

fn frame(img: &mut RgbImage, p: &Panel) {
    let (l, b) = p.to_px(p.xr.0, p.yr.0);
    let (r, t) = p.to_px(p.xr.1, p.yr.1);
    line(img, (l, b), (r, b), AXIS);
    line(img, (l, b), (l, t), AXIS);
}

/// Render both panels side by side; points are coloured by gender and
/// dashed guides mark `thresholds` on the deviation panel.
pub fn render_panels(records: &[PredictionRecord], thresholds: &[f64]) -> RgbImage {
    let mut img = RgbImage::from_pixel(2 * PANEL, PANEL, WHITE);
    let hi = records
        .iter()
        .flat_map(|r| [r.bone_age, r.predicted])
        .fold(MAX_BONE_AGE, f64::max);
    let lo = records.iter().map(|r| r.predicted).fold(0.0, f64::min);
    let scatter = Panel { x0: 0, xr: (lo, hi), yr: (lo, hi) };
    let dev_max = records
        .iter()
        .map(|r| (r.predicted - r.bone_age).abs())
        .chain(thresholds.iter().copied())
        .fold(1.0, f64::max)
        * 1.1;
    let dev = Panel { x0: PANEL, xr: (lo, hi), yr: (-dev_max, dev_max) };

    frame(&mut img, &scatter);
    line(&mut img, scatter.to_px(lo, lo), scatter.to_px(hi, hi), GUIDE);
    frame(&mut img, &dev);
    line(&mut img, dev.to_px(lo, 0.0), dev.to_px(hi, 0.0), GUIDE);
    for &t in thresholds {
        for s in [-t, t] {
            let (a, y) = dev.to_px(lo, s);
            let (b, _) = dev.to_px(hi, s);
            for x in (a..=b).step_by(6) {
                line(&mut img, (x, y), ((x + 2).min(b), y), GUIDE);
            }
        }
    }
    for r in records {
        let c = if r.gender == 1 { MALE } else { FEMALE };
        dot(&mut img, scatter.to_px(r.bone_age, r.predicted), c);
        dot(&mut img, dev.to_px(r.bone_age, r.predicted - r.bone_age), c);
    }
    img
}

pub fn write_panels(path: &Path, records: &[PredictionRecord], thresholds: &[f64]) -> Result<()> {
    let img = render_panels(records, thresholds);
    write_atomic(path, &encode_png(&DynamicImage::ImageRgb8(img)))
}

/// Vertical bar chart of `counts`, one bar per bucket.
pub fn render_histogram(counts: &[usize]) -> RgbImage {
    let mut img = RgbImage::from_pixel(PANEL, PANEL, WHITE);
    let top = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let n = counts.len().max(1) as u32;
    let inner = PANEL - 2 * MARGIN;
    let bar = (inner / n).max(1);
    for (i, &c) in counts.iter().enumerate() {
        let h = (c as f64 / top * f64::from(inner)).round() as u32;
        let x0 = MARGIN + i as u32 * bar;
        for x in x0 + 1..x0 + bar.max(2) - 1 {
            for y in PANEL - MARGIN - h..PANEL - MARGIN {
                img.put_pixel(x, y, MALE);
            }
        }
    }
    let b = i64::from(PANEL - MARGIN);
    line(&mut img, (i64::from(MARGIN), b), (i64::from(PANEL - MARGIN), b), AXIS);
    img
}

pub fn write_histogram(path: &Path, counts: &[usize]) -> Result<()> {
    write_atomic(path, &encode_png(&DynamicImage::ImageRgb8(render_histogram(counts))))
}
