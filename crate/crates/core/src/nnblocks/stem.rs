//! Five-layer convolutional stem shared in shape by both channels.

use serde::{Deserialize, Serialize};

use super::layers::{Builder, ConvBnRelu};
use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::kernels::{ConvGeom, PoolGeom};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvStemConfig {
    pub channel_widths: Vec<usize>,
    pub kernel_size: usize,
    pub bn_eps: f64,
}

impl Default for ConvStemConfig {
    fn default() -> Self {
        ConvStemConfig {
            channel_widths: vec![32, 32, 64, 64, 128],
            kernel_size: 3,
            bn_eps: 1e-5,
        }
    }
}

/// Max pooling follows these (1-based) conv layers.
pub const POOL_AFTER: [usize; 2] = [2, 4];

impl ConvStemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channel_widths.len() != 5 {
            return Err(Error::Config(format!(
                "conv stem needs exactly 5 channel widths, got {}",
                self.channel_widths.len()
            )));
        }
        if self.channel_widths.contains(&0) {
            return Err(Error::Config("conv stem widths must be positive".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "conv stem kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        *self.channel_widths.last().expect("validated stem")
    }

    /// Spatial extent after both stride-2 pools.
    pub fn out_size(&self, input: usize) -> usize {
        input / 2 / 2
    }
}

#[derive(Debug, Clone)]
pub struct ConvStem {
    layers: Vec<ConvBnRelu>,
    in_channels: usize,
}

impl ConvStem {
    pub fn new(b: &mut Builder, name: &str, in_channels: usize, cfg: &ConvStemConfig) -> Self {
        let k = cfg.kernel_size;
        b.scoped(name, |b| {
            let mut cin = in_channels;
            let layers = cfg
                .channel_widths
                .iter()
                .enumerate()
                .map(|(i, &cout)| {
                    let l = ConvBnRelu::new(
                        b,
                        &format!("conv{}", i + 1),
                        cin,
                        cout,
                        (k, k),
                        ConvGeom::new(1, k / 2),
                        cfg.bn_eps,
                    );
                    cin = cout;
                    l
                })
                .collect();
            ConvStem {
                layers,
                in_channels,
            }
        })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != self.in_channels || shape[2] < 4 || shape[3] < 4 {
            return Err(Error::shape(
                "conv stem input",
                format!("[N, {}, H>=4, W>=4]", self.in_channels),
                shape,
            ));
        }
        let mut y = x;
        for (i, layer) in self.layers.iter().enumerate() {
            y = layer.forward(g, y);
            if POOL_AFTER.contains(&(i + 1)) {
                y = g.max_pool2d(y, PoolGeom::new(2, 2, 0));
            }
        }
        Ok(y)
    }
}
