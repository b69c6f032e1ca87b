//! Receptive-field attention convolution.
//!
//! Each `k x k` receptive field of every input channel gets its own softmax
//! weights over the `k^2` slots. The weighted slot features are laid out as
//! `k x k` tiles on a `(kH, kW)` grid and mixed by a `k x k`, stride-`k` conv,
//! so the output keeps the input's spatial size.

use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Builder, Conv2d};
use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::kernels::{ConvGeom, PoolGeom};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RfaConvConfig {
    pub kernel_size: usize,
    /// Output channels; `None` keeps the input channel count.
    pub out_channels: Option<usize>,
    pub bn_eps: f64,
}

impl Default for RfaConvConfig {
    fn default() -> Self {
        RfaConvConfig {
            kernel_size: 3,
            out_channels: None,
            bn_eps: 1e-5,
        }
    }
}

impl RfaConvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "RFAConv kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.out_channels == Some(0) {
            return Err(Error::Config("RFAConv out_channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RfaConv {
    /// `g^{1x1}`: grouped pointwise conv on the pooled input, `C -> k^2 C`.
    pub weight_conv: Conv2d,
    /// `g^{3x3}`: grouped `k x k` conv producing the slot features, `C -> k^2 C`.
    pub feature_conv: Conv2d,
    pub feature_bn: BatchNorm,
    /// Final `k x k`, stride-`k` conv over the rearranged grid, `C -> C'`.
    pub mix: Conv2d,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
}

/// Intermediate nodes of one forward pass.
pub struct RfaConvTrace {
    /// Softmax weights `[N, C, k^2, H, W]`.
    pub attention: NodeId,
    /// Slot features after norm and ReLU, `[N, C, k^2, H, W]`.
    pub features: NodeId,
    /// Rearranged weighted features `[N, C, kH, kW]`.
    pub tiled: NodeId,
    pub output: NodeId,
}

impl RfaConv {
    pub fn new(b: &mut Builder, name: &str, in_channels: usize, cfg: &RfaConvConfig) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel_size;
        let c = in_channels;
        let out = cfg.out_channels.unwrap_or(c);
        Ok(b.scoped(name, |b| RfaConv {
            weight_conv: Conv2d::new(b, "get_weight", c, c * k * k, (1, 1), ConvGeom::new(1, 0).with_groups(c), false),
            feature_conv: Conv2d::new(
                b,
                "generate_feature",
                c,
                c * k * k,
                (k, k),
                ConvGeom::new(1, k / 2).with_groups(c),
                false,
            ),
            feature_bn: BatchNorm::new(b, "generate_feature_bn", c * k * k, cfg.bn_eps),
            mix: Conv2d::new(b, "conv", c, out, (k, k), ConvGeom::new(k, 0), true),
            in_channels: c,
            out_channels: out,
            kernel_size: k,
        }))
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        Ok(self.forward_trace(g, x)?.output)
    }

    pub fn forward_trace(&self, g: &mut Graph, x: NodeId) -> Result<RfaConvTrace> {
        let s = g.shape(x).to_vec();
        let k = self.kernel_size;
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::shape("RFAConv input", format!("[N, {}, H, W]", self.in_channels), s));
        }
        if s[2] < k || s[3] < k {
            return Err(Error::shape(
                "RFAConv spatial size",
                format!("H, W >= {k}"),
                (s[2], s[3]),
            ));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);

        let pooled = g.avg_pool2d(x, PoolGeom::new(k, 1, k / 2));
        let logits = self.weight_conv.forward(g, pooled);
        let logits = g.reshape(logits, &[n, c, k * k, h, w]);
        let attention = g.softmax(logits, 2);

        let feat = self.feature_conv.forward(g, x);
        let feat = self.feature_bn.forward(g, feat);
        let feat = g.relu(feat);
        let features = g.reshape(feat, &[n, c, k * k, h, w]);

        let weighted = g.mul(features, attention);
        // b c (k1 k2) h w -> b c (h k1) (w k2)
        let t = g.reshape(weighted, &[n, c, k, k, h, w]);
        let t = g.permute(t, &[0, 1, 4, 2, 5, 3]);
        let tiled = g.reshape(t, &[n, c, h * k, w * k]);
        let output = self.mix.forward(g, tiled);
        Ok(RfaConvTrace {
            attention,
            features,
            tiled,
            output,
        })
    }
}
