//! Neural building blocks: the convolutional stem, the Transformer block and
//! the RFAConv operator.

pub mod layers;
pub mod rfaconv;
pub mod stem;
pub mod transformer;

pub use layers::{apply_stat_updates, BatchNorm, Builder, Conv2d, ConvBnRelu, LayerNorm, Linear};
pub use rfaconv::{RfaConv, RfaConvConfig, RfaConvTrace};
pub use stem::{ConvStem, ConvStemConfig};
pub use transformer::{
    attention, scaled_dot_product_attention, FeedForward, MultiHeadSelfAttention, TransformerBlock,
    TransformerConfig, TransformerModule,
};
