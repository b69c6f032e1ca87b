//! Multi-head self-attention and the pre-norm Transformer block applied to
//! the global channel's feature map.

use serde::{Deserialize, Serialize};

use super::layers::{Builder, LayerNorm, Linear};
use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::kernels::PoolGeom;
use crate::params::{Init, ParamId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    /// Token width; must equal the stem's output channels.
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub num_blocks: usize,
    /// Feature maps with more cells than this are average-pooled before
    /// tokenization and upsampled back afterwards.
    pub token_cap: usize,
    pub ln_eps: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            embed_dim: 128,
            num_heads: 4,
            mlp_hidden: 512,
            num_blocks: 1,
            token_cap: 1024,
            ln_eps: 1e-5,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 {
            return Err(Error::Config("transformer dims must be positive".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.mlp_hidden == 0 || self.token_cap == 0 {
            return Err(Error::Config("mlp_hidden and token_cap must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Smallest pooling factor that brings an `h x w` grid under the token cap.
    pub fn pool_factor(&self, h: usize, w: usize) -> usize {
        let mut f = 1;
        while (h / f) * (w / f) > self.token_cap && f < h.min(w) {
            f += 1;
        }
        f
    }
}

/// `softmax(Q K^T / sqrt(d_k)) V` on `[B, n, d_k]` operands.
pub fn attention(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId) -> NodeId {
    let dk = g.shape(q)[2];
    let scores = g.bmm(q, k, false, true);
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    let weights = g.softmax(scores, 2);
    g.bmm(weights, v, false, false)
}

/// Scaled dot-product attention on plain matrices (`n x d_k`, `n x d_k`, `n x d_v`).
pub fn scaled_dot_product_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(Error::shape("attention operands", "rank-2 matrices", (q.shape(), k.shape(), v.shape())));
    }
    if q.shape()[1] == 0 || q.shape()[1] != k.shape()[1] {
        return Err(Error::shape("attention Q/K columns", q.shape()[1], k.shape()[1]));
    }
    if k.shape()[0] != v.shape()[0] || q.shape()[0] != k.shape()[0] {
        return Err(Error::shape("attention row counts", q.shape()[0], (k.shape()[0], v.shape()[0])));
    }
    let mut g = Graph::new();
    let add_batch = |t: &Tensor| t.clone().reshape(&[1, t.shape()[0], t.shape()[1]]);
    let (qi, ki, vi) = (
        g.constant(add_batch(q)),
        g.constant(add_batch(k)),
        g.constant(add_batch(v)),
    );
    let out = attention(&mut g, qi, ki, vi);
    let t = g.value(out).clone();
    Ok(t.reshape(&[q.shape()[0], v.shape()[1]]))
}

#[derive(Debug, Clone)]
pub struct MultiHeadSelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub num_heads: usize,
}

impl MultiHeadSelfAttention {
    pub fn new(b: &mut Builder, name: &str, dim: usize, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || dim % num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {dim} is not divisible by num_heads {num_heads}"
            )));
        }
        Ok(b.scoped(name, |b| MultiHeadSelfAttention {
            query: Linear::new(b, "query", dim, dim, true),
            key: Linear::new(b, "key", dim, dim, true),
            value: Linear::new(b, "value", dim, dim, true),
            out: Linear::new(b, "out", dim, dim, true),
            num_heads,
        }))
    }

    /// `[N, T, d] -> [N, T, d]`.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let s = g.shape(x).to_vec();
        let (n, t, d) = (s[0], s[1], s[2]);
        let h = self.num_heads;
        let dk = d / h;
        let split = |g: &mut Graph, y: NodeId| {
            let y = g.reshape(y, &[n, t, h, dk]);
            let y = g.permute(y, &[0, 2, 1, 3]);
            g.reshape(y, &[n * h, t, dk])
        };
        let q = self.query.forward(g, x);
        let q = split(g, q);
        let k = self.key.forward(g, x);
        let k = split(g, k);
        let v = self.value.forward(g, x);
        let v = split(g, v);
        let a = attention(g, q, k, v);
        let a = g.reshape(a, &[n, h, t, dk]);
        let a = g.permute(a, &[0, 2, 1, 3]);
        let a = g.reshape(a, &[n, t, d]);
        self.out.forward(g, a)
    }
}

/// Position-wise `max(0, x W1 + b1) W2 + b2`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(b: &mut Builder, name: &str, dim: usize, hidden: usize) -> Self {
        b.scoped(name, |b| FeedForward {
            fc1: Linear::new(b, "fc1", dim, hidden, true),
            fc2: Linear::new(b, "fc2", hidden, dim, true),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = self.fc1.forward(g, x);
        let h = g.relu(h);
        self.fc2.forward(g, h)
    }
}

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadSelfAttention,
    pub norm2: LayerNorm,
    pub mlp: FeedForward,
}

impl TransformerBlock {
    pub fn new(b: &mut Builder, name: &str, cfg: &TransformerConfig) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(TransformerBlock {
                norm1: LayerNorm::new(b, "norm1", cfg.embed_dim, cfg.ln_eps),
                attn: MultiHeadSelfAttention::new(b, "attn", cfg.embed_dim, cfg.num_heads)?,
                norm2: LayerNorm::new(b, "norm2", cfg.embed_dim, cfg.ln_eps),
                mlp: FeedForward::new(b, "mlp", cfg.embed_dim, cfg.mlp_hidden),
            })
        })
    }

    /// Pre-norm residual update of `[N, T, d]` tokens.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = self.norm1.forward(g, x);
        let h = self.attn.forward(g, h);
        let x = g.add(x, h);
        let h = self.norm2.forward(g, x);
        let h = self.mlp.forward(g, h);
        g.add(x, h)
    }
}

/// Tokenizes a `d x H x W` map per cell, adds learned positions, runs the
/// blocks and folds the tokens back into a map of the input's shape.
#[derive(Debug, Clone)]
pub struct TransformerModule {
    pub pos_embed: ParamId,
    pub blocks: Vec<TransformerBlock>,
    embed_dim: usize,
    grid: (usize, usize),
    pool: usize,
}

impl TransformerModule {
    /// `grid` is the spatial extent of the feature maps this module will see.
    pub fn new(b: &mut Builder, name: &str, cfg: &TransformerConfig, grid: (usize, usize)) -> Result<Self> {
        cfg.validate()?;
        let pool = cfg.pool_factor(grid.0, grid.1);
        let tokens = (grid.0 / pool) * (grid.1 / pool);
        b.scoped(name, |b| {
            let pos_embed = b.param("pos_embed", &[tokens, cfg.embed_dim], Init::Normal { std: 0.02 });
            let blocks = (0..cfg.num_blocks)
                .map(|i| TransformerBlock::new(b, &format!("block{i}"), cfg))
                .collect::<Result<_>>()?;
            Ok(TransformerModule {
                pos_embed,
                blocks,
                embed_dim: cfg.embed_dim,
                grid,
                pool,
            })
        })
    }

    pub fn pool_factor(&self) -> usize {
        self.pool
    }

    pub fn forward(&self, g: &mut Graph, fmap: NodeId) -> Result<NodeId> {
        let s = g.shape(fmap).to_vec();
        if s.len() != 4 || s[1] != self.embed_dim || (s[2], s[3]) != self.grid {
            return Err(Error::shape(
                "transformer input",
                format!("[N, {}, {}, {}]", self.embed_dim, self.grid.0, self.grid.1),
                s,
            ));
        }
        let (n, d) = (s[0], s[1]);
        let mut x = fmap;
        if self.pool > 1 {
            x = g.avg_pool2d(x, PoolGeom::new(self.pool, self.pool, 0));
        }
        let (h, w) = (g.shape(x)[2], g.shape(x)[3]);
        let t = g.permute(x, &[0, 2, 3, 1]);
        let mut t = g.reshape(t, &[n, h * w, d]);
        let pos = g.param(self.pos_embed);
        t = g.add_broadcast(t, pos);
        for block in &self.blocks {
            t = block.forward(g, t);
        }
        let y = g.reshape(t, &[n, h, w, d]);
        let mut y = g.permute(y, &[0, 3, 1, 2]);
        if self.pool > 1 {
            y = g.upsample_nearest(y, s[2], s[3]);
        }
        Ok(y)
    }
}
