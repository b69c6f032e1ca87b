use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnblocks::{ConvStemConfig, RfaConvConfig, TransformerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneScale {
    Full,
    /// Inception-V3 topology with every width divided by 8.
    Mini,
}

impl BackboneScale {
    pub fn width_divisor(self) -> usize {
        match self {
            BackboneScale::Full => 1,
            BackboneScale::Mini => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoNetConfig {
    /// Side length of the square image and attention map fed to the network.
    pub input_size: usize,
    pub global_stem: ConvStemConfig,
    pub local_stem: ConvStemConfig,
    pub transformer: TransformerConfig,
    pub rfaconv: RfaConvConfig,
    pub backbone_scale: BackboneScale,
    /// Pad every valid-mode conv and pool of the fusion trunk so that small
    /// inputs do not collapse below 1x1.
    pub backbone_same_padding: bool,
    pub backbone_bn_eps: f64,
    pub gender_embed_dim: usize,
    pub head_dims: Vec<usize>,
    pub use_transformer: bool,
    pub use_rfaconv: bool,
}

impl Default for BoNetConfig {
    fn default() -> Self {
        BoNetConfig {
            input_size: 500,
            global_stem: ConvStemConfig::default(),
            local_stem: ConvStemConfig::default(),
            transformer: TransformerConfig::default(),
            rfaconv: RfaConvConfig::default(),
            backbone_scale: BackboneScale::Full,
            backbone_same_padding: false,
            backbone_bn_eps: 1e-3,
            gender_embed_dim: 32,
            head_dims: vec![1024, 512],
            use_transformer: true,
            use_rfaconv: true,
        }
    }
}

impl BoNetConfig {
    /// Desk-scale variant: 64x64 inputs, narrow stems, mini trunk with padding.
    pub fn mini() -> Self {
        let stem = ConvStemConfig {
            channel_widths: vec![8, 8, 16, 16, 32],
            ..ConvStemConfig::default()
        };
        BoNetConfig {
            input_size: 64,
            global_stem: stem.clone(),
            local_stem: stem,
            transformer: TransformerConfig {
                embed_dim: 32,
                num_heads: 4,
                mlp_hidden: 128,
                ..TransformerConfig::default()
            },
            backbone_scale: BackboneScale::Mini,
            backbone_same_padding: true,
            head_dims: vec![128, 64],
            ..BoNetConfig::default()
        }
    }

    pub fn with_modules(mut self, use_transformer: bool, use_rfaconv: bool) -> Self {
        self.use_transformer = use_transformer;
        self.use_rfaconv = use_rfaconv;
        self
    }

    /// Spatial extent of both stems' outputs.
    pub fn stem_grid(&self) -> usize {
        self.global_stem.out_size(self.input_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.global_stem.validate()?;
        self.local_stem.validate()?;
        self.rfaconv.validate()?;
        if self.input_size < 16 {
            return Err(Error::Config(format!(
                "input_size must be at least 16, got {}",
                self.input_size
            )));
        }
        if self.use_transformer {
            self.transformer.validate()?;
            if self.transformer.embed_dim != self.global_stem.out_channels() {
                return Err(Error::Config(format!(
                    "transformer.embed_dim {} must equal the global stem's output channels {}",
                    self.transformer.embed_dim,
                    self.global_stem.out_channels()
                )));
            }
        }
        if self.use_rfaconv {
            let k = self.rfaconv.kernel_size;
            if self.stem_grid() < k {
                return Err(Error::Config(format!(
                    "RFAConv kernel {k} exceeds the {0}x{0} stem output",
                    self.stem_grid()
                )));
            }
        }
        if self.gender_embed_dim == 0 {
            return Err(Error::Config("gender_embed_dim must be positive".into()));
        }
        if self.head_dims.len() != 2 || self.head_dims.contains(&0) {
            return Err(Error::Config(format!(
                "head_dims must list two positive widths, got {:?}",
                self.head_dims
            )));
        }
        if !(self.backbone_bn_eps > 0.0) {
            return Err(Error::Config("backbone_bn_eps must be positive".into()));
        }
        Ok(())
    }

    /// Channels entering the fusion trunk.
    pub fn fused_channels(&self) -> usize {
        let global = self.global_stem.out_channels();
        let local = if self.use_rfaconv {
            self.rfaconv.out_channels.unwrap_or(self.local_stem.out_channels())
        } else {
            self.local_stem.out_channels()
        };
        global + local
    }
}
