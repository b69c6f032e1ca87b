//! Grad-CAM heatmaps for the scalar age output at the four module boundaries.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{DynamicImage, Rgb, RgbImage};

use crate::autograd::Graph;
use crate::dataio::image::encode_png;
use crate::dataio::{collate, Image, PreparedSample};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::model::{Model, Taps};
use crate::tensor::Tensor;

/// Side length of every heatmap.
pub const CAM_SIZE: usize = 500;
pub const OVERLAY_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tap {
    PreTransformer,
    PostTransformer,
    PreRfaconv,
    PostRfaconv,
}

impl Tap {
    pub const ALL: [Tap; 4] = [Tap::PreTransformer, Tap::PostTransformer, Tap::PreRfaconv, Tap::PostRfaconv];

    pub fn name(self) -> &'static str {
        match self {
            Tap::PreTransformer => "pre_transformer",
            Tap::PostTransformer => "post_transformer",
            Tap::PreRfaconv => "pre_rfaconv",
            Tap::PostRfaconv => "post_rfaconv",
        }
    }

    fn node(self, taps: &Taps) -> crate::autograd::NodeId {
        match self {
            Tap::PreTransformer => taps.pre_transformer,
            Tap::PostTransformer => taps.post_transformer,
            Tap::PreRfaconv => taps.pre_rfaconv,
            Tap::PostRfaconv => taps.post_rfaconv,
        }
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Tap> {
        Tap::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| {
            let valid: Vec<_> = Tap::ALL.iter().map(|t| t.name()).collect();
            Error::InvalidArgument(format!("unknown tap {s:?}; valid taps: {}", valid.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CamMap {
    pub sample_id: String,
    pub tap: Tap,
    /// `CAM_SIZE` square, values in `[0, 1]`.
    pub heatmap: Image,
}

/// `ReLU(sum_c w_c A_c)` with `w_c` the spatial mean of the gradient, for a
/// single-sample `[1, C, H, W]` activation.
pub fn raw_cam(activation: &Tensor, grad: &Tensor) -> Result<Image> {
    if activation.shape() != grad.shape() || activation.rank() != 4 || activation.shape()[0] != 1 {
        return Err(Error::shape("grad-cam activation", activation.shape(), grad.shape()));
    }
    let (_, c, h, w) = activation.dims4();
    let hw = h * w;
    let (a, g) = (activation.data(), grad.data());
    let mut out = vec![0.0; hw];
    for ch in 0..c {
        let gs = &g[ch * hw..(ch + 1) * hw];
        let wc = gs.iter().sum::<f64>() / hw as f64;
        for (o, v) in out.iter_mut().zip(&a[ch * hw..(ch + 1) * hw]) {
            *o += wc * v;
        }
    }
    Ok(Image::new(w, h, out.into_iter().map(|v| v.max(0.0)).collect()))
}

/// Pixel-centre aligned bilinear resampling.
pub fn upsample(img: &Image, size: usize) -> Image {
    let sx = img.width() as f64 / size as f64;
    let sy = img.height() as f64 / size as f64;
    Image::from_fn(size, size, |x, y| {
        img.sample_clamped((x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5)
    })
}

/// Min-max scale to `[0, 1]`. A constant map becomes all ones if positive
/// and all zeros otherwise.
pub fn normalize(img: &Image) -> Image {
    let (lo, hi) = (img.min(), img.max());
    let data = if hi > lo {
        img.data().iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
    } else {
        vec![if hi > 0.0 { 1.0 } else { 0.0 }; img.data().len()]
    };
    Image::new(img.width(), img.height(), data)
}

/// Heatmap from an activation and its gradient: rectified, upsampled to
/// `CAM_SIZE` and normalized.
pub fn cam_from_gradient(activation: &Tensor, grad: &Tensor) -> Result<Image> {
    Ok(normalize(&upsample(&raw_cam(activation, grad)?, CAM_SIZE)))
}

/// Heatmaps of one sample at the requested taps, sharing one backward pass.
pub fn grad_cam_taps(model: &Model, sample: &PreparedSample, taps: &[Tap]) -> Result<Vec<CamMap>> {
    let batch = collate(&[sample], None);
    let mut g = Graph::with_params(&model.params, false, true);
    let x = g.constant(batch.images);
    let m = g.constant(batch.maps);
    let out = model.net.forward(&mut g, x, m, &batch.genders)?;
    let grads = g.backward(out.output);
    taps.iter()
        .map(|&tap| {
            let node = tap.node(&out.taps);
            let act = g.value(node);
            let zero;
            let grad = match grads.get(node) {
                Some(t) => t,
                None => {
                    zero = Tensor::zeros(act.shape());
                    &zero
                }
            };
            Ok(CamMap {
                sample_id: sample.sample_id.clone(),
                tap,
                heatmap: cam_from_gradient(act, grad)?,
            })
        })
        .collect()
}

pub fn grad_cam(model: &Model, sample: &PreparedSample, tap: Tap) -> Result<CamMap> {
    Ok(grad_cam_taps(model, sample, &[tap])?.remove(0))
}

/// Jet colormap for `v` in `[0, 1]`.
pub fn jet(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |offset: f64| (1.5 - (4.0 * v - offset).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Grayscale `base` blended with the colour-mapped heatmap.
pub fn overlay(base: &Image, heatmap: &Image, alpha: f64) -> RgbImage {
    let (w, h) = (heatmap.width(), heatmap.height());
    let base = if (base.width(), base.height()) == (w, h) {
        base.clone()
    } else {
        upsample(base, w)
    };
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let g = base.get(x as usize, y as usize).clamp(0.0, 1.0);
        let c = jet(heatmap.get(x as usize, y as usize));
        let px = |k: usize| ((1.0 - alpha) * g + alpha * c[k]) * 255.0;
        Rgb([px(0).round() as u8, px(1).round() as u8, px(2).round() as u8])
    })
}

pub fn write_overlay(path: &Path, base: &Image, heatmap: &Image) -> Result<()> {
    let img = overlay(base, heatmap, OVERLAY_ALPHA);
    write_atomic(path, &encode_png(&DynamicImage::ImageRgb8(img)))
}

/// Single-channel little-endian PFM; rows are stored bottom to top.
pub fn encode_pfm(img: &Image) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", img.width(), img.height()).into_bytes();
    for y in (0..img.height()).rev() {
        for x in 0..img.width() {
            out.extend_from_slice(&(img.get(x, y) as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    write_atomic(path, &encode_pfm(img))
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PFM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "Pf" {
        return Err(bad("not a single-channel PFM"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = fields[3].parse().map_err(|_| bad("bad scale"))?;
    let body = bytes.get(pos..).filter(|b| b.len() == 4 * w * h).ok_or_else(|| bad("wrong PFM payload size"))?;
    let mut img = Image::filled(w, h, 0.0);
    for (i, c) in body.chunks_exact(4).enumerate() {
        let c = [c[0], c[1], c[2], c[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(c) } else { f32::from_be_bytes(c) };
        img.set(i % w, h - 1 - i / w, f64::from(v));
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synthetic_prepared, DataConfig, SyntheticSpec};
    use crate::kernels::ConvGeom;
    use crate::model::BoNetConfig;
    use crate::params::ParamStore;

    #[test]
    fn tap_names_round_trip() {
        for t in Tap::ALL {
            assert_eq!(t.name().parse::<Tap>().unwrap(), t);
        }
        let err = "middle".parse::<Tap>().unwrap_err().to_string();
        for t in Tap::ALL {
            assert!(err.contains(t.name()));
        }
    }

    #[test]
    fn negative_weighted_sum_gives_zero_map() {
        let a = Tensor::from_fn(&[1, 2, 4, 4], |i| 1.0 + i as f64);
        let g = Tensor::full(&[1, 2, 4, 4], -0.5);
        let cam = cam_from_gradient(&a, &g).unwrap();
        assert_eq!((cam.width(), cam.height()), (CAM_SIZE, CAM_SIZE));
        assert!(cam.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_gradient_single_channel_is_normalized_activation() {
        let a = Tensor::from_fn(&[1, 1, 5, 5], |i| (i * 7 % 11) as f64);
        let cam = raw_cam(&a, &Tensor::full(&[1, 1, 5, 5], 0.3)).unwrap();
        let direct = normalize(&Image::new(5, 5, a.data().to_vec()));
        let n = normalize(&cam);
        for (x, y) in n.data().iter().zip(direct.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_identity_and_range() {
        let img = Image::from_fn(3, 3, |x, y| (x * 3 + y) as f64);
        assert_eq!(upsample(&img, 3), img);
        let big = upsample(&img, 500);
        assert_eq!(big.max(), img.max());
        assert_eq!(big.min(), img.min());
    }

    fn argmax(img: &Image) -> usize {
        img.data()
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
            .0
    }

    #[test]
    fn rescaling_invariance_on_toy_network() {
        // conv 1x1 -> relu -> gap -> linear, with the first layer scaled by s
        // and the head by 1/s.
        let x = Tensor::from_fn(&[1, 2, 6, 6], |i| ((i * 37 % 17) as f64 - 8.0) / 5.0);
        let cams = |s: f64| {
            let mut store = ParamStore::new();
            let w1 = store.add_param("w1", Tensor::new(&[3, 2, 1, 1], vec![0.7, -0.2, 0.1, 0.9, -0.5, 0.4]).map(|v| v * s));
            let w2 = store.add_param("w2", Tensor::new(&[1, 3], vec![1.3, -0.4, 0.8]).map(|v| v / s));
            let mut g = Graph::with_params(&store, false, true);
            let xi = g.constant(x.clone());
            let (w1n, w2n) = (g.param(w1), g.param(w2));
            let conv = g.conv2d(xi, w1n, None, ConvGeom::new(1, 0));
            let a = g.relu(conv);
            let pooled = g.global_avg_pool(a);
            let out = g.linear(pooled, w2n, None);
            let grads = g.backward(out);
            (g.value(out).item(), cam_from_gradient(g.value(a), grads.get(a).unwrap()).unwrap())
        };
        let (o1, c1) = cams(1.0);
        let (o2, c2) = cams(3.5);
        assert!((o1 - o2).abs() < 1e-12);
        assert_eq!(argmax(&c1), argmax(&c2));
        for (a, b) in c1.data().iter().zip(c2.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn model_heatmaps_meet_contract() {
        let mut cfg = BoNetConfig::mini();
        cfg.input_size = 32;
        let model = Model::new(&cfg, 3).unwrap();
        let sample = &synthetic_prepared(&SyntheticSpec::new(1, 1), 32, &DataConfig::default()).unwrap()[0];
        let maps = grad_cam_taps(&model, sample, &Tap::ALL).unwrap();
        assert_eq!(maps.len(), 4);
        for m in &maps {
            assert_eq!((m.heatmap.width(), m.heatmap.height()), (CAM_SIZE, CAM_SIZE));
            assert!(m.heatmap.min() >= 0.0 && m.heatmap.max() <= 1.0);
            assert!(m.heatmap.max() == 1.0 || m.heatmap.max() == 0.0);
        }
    }

    #[test]
    fn pfm_round_trip_and_overlay() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(7, 4, |x, y| (x + 10 * y) as f64 / 64.0);
        let p = dir.path().join("h.pfm");
        write_pfm(&p, &img).unwrap();
        assert_eq!(read_pfm(&p).unwrap(), img);
        let ov = overlay(&Image::filled(2, 2, 1.0), &Image::filled(4, 4, 0.0), 0.5);
        assert_eq!(ov.dimensions(), (4, 4));
        assert_eq!(*ov.get_pixel(0, 0), Rgb([128, 128, 191]));
        assert_eq!(jet(1.0), [0.5, 0.0, 0.0]);
    }
}
