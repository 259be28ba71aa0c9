//! Spatial sub-branch: non-overlapping patch projection of the onset frame,
//! a learnable position table, a shallow pre-norm transformer, and a
//! terminal LayerNorm before the tokens are folded back into a grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::layers::{merge_heads, split_heads, Conv2d, FeedForward, LayerNorm, Linear};
use crate::nn::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::temporal::{grid_map, grid_tokens, TokenGrid};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEmbedConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub input_size: usize,
    pub in_channels: usize,
}

impl Default for PatchEmbedConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 512,
            input_size: 224,
            in_channels: 3,
        }
    }
}

impl PatchEmbedConfig {
    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size.max(1)
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.input_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "input size {} not divisible by patch size {}",
                self.input_size, self.patch_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_ratio: f64,
    pub ln_eps: f64,
    pub pos_init_std: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 8,
            ffn_ratio: 4.0,
            ln_eps: 1e-6,
            pos_init_std: 0.02,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.n_heads == 0 || embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "{} attention heads do not divide embed dim {embed_dim}",
                self.n_heads
            )));
        }
        Ok(())
    }
}

/// `P×P` stride-`P` convolution, i.e. a shared linear map per patch.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Conv2d,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &PatchEmbedConfig,
        rng: &mut R,
    ) -> Self {
        Self {
            proj: Conv2d::new(store, name, cfg.in_channels, cfg.embed_dim, cfg.patch_size, cfg.patch_size, 0, rng),
            patch: cfg.patch_size,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<TokenGrid> {
        let &[_, _, h, w] = g.shape(x) else {
            return Err(Error::shape("patch_embed", format!("{:?}", g.shape(x))));
        };
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::shape(
                "patch_embed",
                format!("{h}×{w} input not divisible by patch {}", self.patch),
            ));
        }
        let y = self.proj.forward(g, x)?;
        grid_tokens(g, y)
    }
}

/// Learnable `(1, N, D)` table added to every sample's tokens.
#[derive(Debug, Clone)]
pub struct PositionEmbedding {
    pub table: ParamId,
}

impl PositionEmbedding {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        tokens: usize,
        dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            table: store.register(name, Tensor::trunc_normal(&[1, tokens, dim], std, rng), true),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, tokens: Var) -> Result<Var> {
        let pe = g.param(self.table);
        let (ts, ps) = (g.shape(tokens), g.shape(pe));
        if ts.len() != 3 || ts[1..] != ps[1..] {
            return Err(Error::shape("add_position", format!("{ts:?} + {ps:?}")));
        }
        g.add_broadcast(tokens, pe)
    }
}

/// Pre-norm softmax self-attention block.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
    heads: usize,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        cfg: &TransformerConfig,
        rng: &mut R,
    ) -> Self {
        let hidden = ((dim as f64) * cfg.ffn_ratio).round().max(1.0) as usize;
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, cfg.ln_eps),
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, cfg.ln_eps),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, hidden, rng),
            heads: cfg.n_heads,
        }
    }

    fn attention_probs_var<T: Scalar>(&self, g: &mut Graph<'_, T>, h: Var) -> Result<(Var, Var)> {
        let d = *g.shape(h).last().unwrap_or(&0);
        let dh = d / self.heads;
        let q = self.q.forward(g, h)?;
        let q = g.scale(q, T::lit(1.0 / (dh as f64).sqrt()));
        let k = self.k.forward(g, h)?;
        let v = self.v.forward(g, h)?;
        let q = split_heads(g, q, self.heads)?;
        let k = split_heads(g, k, self.heads)?;
        let v = split_heads(g, v, self.heads)?;
        let scores = g.bmm(q, k, true)?;
        Ok((g.softmax(scores), v))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let d = *g.shape(x).last().unwrap_or(&0);
        if d != self.q.inp {
            return Err(Error::shape("transformer_block", format!("token dim {d}, expected {}", self.q.inp)));
        }
        let h = self.ln1.forward(g, x)?;
        let (p, v) = self.attention_probs_var(g, h)?;
        let a = g.bmm(p, v, false)?;
        let a = merge_heads(g, a, self.heads)?;
        let a = self.out.forward(g, a)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.add(x, f)
    }

    /// Attention weights `(B*heads, N, N)` for the given block input.
    pub fn attention_probs<T: Scalar>(&self, store: &ParamStore<T>, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(store, false);
        let x = g.input(tokens.clone());
        let h = self.ln1.forward(&mut g, x)?;
        let (p, _) = self.attention_probs_var(&mut g, h)?;
        Ok(g.value(p).clone())
    }
}

#[derive(Debug, Clone)]
pub struct SpatialBranch {
    pub patch: PatchEmbed,
    pub pos: PositionEmbedding,
    pub blocks: Vec<TransformerBlock>,
    pub final_ln: LayerNorm,
}

impl SpatialBranch {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        patch: &PatchEmbedConfig,
        cfg: &TransformerConfig,
        rng: &mut R,
    ) -> Self {
        let d = patch.embed_dim;
        Self {
            patch: PatchEmbed::new(store, &format!("{name}.patch"), patch, rng),
            pos: PositionEmbedding::new(store, &format!("{name}.pos_embed"), patch.num_tokens(), d, cfg.pos_init_std, rng),
            blocks: (0..cfg.n_layers)
                .map(|i| TransformerBlock::new(store, &format!("{name}.blocks.{i}"), d, cfg, rng))
                .collect(),
            final_ln: LayerNorm::new(store, &format!("{name}.norm"), d, cfg.ln_eps),
        }
    }

    /// Patch tokens with positions added.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<'_, T>, onset: Var) -> Result<TokenGrid> {
        let tg = self.patch.forward(g, onset)?;
        let tokens = self.pos.forward(g, tg.tokens)?;
        Ok(TokenGrid { tokens, grid: tg.grid })
    }

    /// Transformer stack followed by the terminal LayerNorm.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, mut tokens: Var) -> Result<Var> {
        for b in &self.blocks {
            tokens = b.forward(g, tokens)?;
        }
        self.final_ln.forward(g, tokens)
    }

    /// Pre-reshape spatial tokens `(B, N, D)`.
    pub fn forward_tokens<T: Scalar>(&self, g: &mut Graph<'_, T>, onset: Var) -> Result<TokenGrid> {
        let tg = self.embed(g, onset)?;
        let tokens = self.encode(g, tg.tokens)?;
        Ok(TokenGrid { tokens, grid: tg.grid })
    }

    /// Onset frame `(B, 3, H, W)` to spatial features `(B, D, h, w)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, onset: Var) -> Result<Var> {
        let tg = self.forward_tokens(g, onset)?;
        grid_map(g, tg)
    }
}
