//! Temporal sub-branch: a strided convolutional stem turns the onset/apex
//! difference frame into a token grid, and a stack of retention blocks
//! mixes those tokens along a row-major scan with per-head exponential
//! decay.

pub mod retention;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, RetentionForm, Var};
use crate::nn::layers::{merge_heads, split_heads, BatchNorm, Conv2d, FeedForward, LayerNorm, Linear};
use crate::nn::params::ParamStore;
use crate::scalar::Scalar;

pub use retention::{retention_parallel, retention_recurrent, rotary_theta};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvStemConfig {
    pub in_channels: usize,
    /// Output channels of each 3×3 stride-2 stage.
    pub stage_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl Default for ConvStemConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stage_channels: vec![64, 128, 256, 512],
            kernel: 3,
            stride: 2,
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ConvStemConfig {
    pub fn total_stride(&self) -> usize {
        self.stride.pow(self.stage_channels.len() as u32)
    }

    pub fn validate(&self, input_size: usize, grid: usize, embed_dim: usize) -> Result<()> {
        if self.stage_channels.is_empty() || self.kernel % 2 == 0 || self.stride == 0 {
            return Err(Error::Config(format!("bad conv stem {self:?}")));
        }
        if grid == 0 || input_size % self.total_stride() != 0 || input_size / self.total_stride() != grid {
            return Err(Error::Config(format!(
                "stem stride {} does not map a {input_size}px input onto a {grid}×{grid} grid",
                self.total_stride()
            )));
        }
        if self.stage_channels.last() != Some(&embed_dim) {
            return Err(Error::Config(format!(
                "last stem stage has {:?} channels, embed dim is {embed_dim}",
                self.stage_channels.last()
            )));
        }
        Ok(())
    }
}

/// `γ_h = 1 - 2^(-5-h)` for `h = 0..heads`.
pub fn default_gammas(heads: usize) -> Vec<f64> {
    (0..heads).map(|h| 1.0 - 2f64.powi(-5 - h as i32)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionConfig {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub gammas: Vec<f64>,
    pub theta_base: f64,
    pub ffn_ratio: f64,
    pub form: RetentionForm,
    /// Multiply queries by `1/sqrt(d_head)` before retention.
    pub scale_queries: bool,
    pub ln_eps: f64,
}

impl Default for RetentionConfig {
    fn default() -> Self {
        Self {
            embed_dim: 512,
            n_layers: 5,
            n_heads: 8,
            gammas: default_gammas(8),
            theta_base: 10000.0,
            ffn_ratio: 4.0,
            form: RetentionForm::Parallel,
            scale_queries: true,
            ln_eps: 1e-5,
        }
    }
}

impl RetentionConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 || self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "{} heads must split embed dim {} into even head dims",
                self.n_heads, self.embed_dim
            )));
        }
        if self.gammas.len() != self.n_heads {
            return Err(Error::Config(format!(
                "{} decay rates for {} heads",
                self.gammas.len(),
                self.n_heads
            )));
        }
        if let Some(g) = self.gammas.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
            return Err(Error::Config(format!("decay rate {g} outside (0, 1)")));
        }
        if !(self.ffn_ratio > 0.0) {
            return Err(Error::Config("ffn_ratio must be positive".into()));
        }
        Ok(())
    }

    fn ffn_hidden(&self) -> usize {
        ((self.embed_dim as f64) * self.ffn_ratio).round().max(1.0) as usize
    }
}

/// Token sequence with its originating grid shape; tokens are `(B, h*w, C)`
/// in row-major scan order.
#[derive(Debug, Clone, Copy)]
pub struct TokenGrid {
    pub tokens: Var,
    pub grid: (usize, usize),
}

/// Flattens a `(B, C, h, w)` map node into row-major tokens.
pub fn grid_tokens<T: Scalar>(g: &mut Graph<'_, T>, map: Var) -> Result<TokenGrid> {
    let &[b, c, h, w] = g.shape(map) else {
        return Err(Error::shape("grid_tokens", format!("{:?}", g.shape(map))));
    };
    let t = g.permute(map, &[0, 2, 3, 1])?;
    let tokens = g.reshape(t, &[b, h * w, c])?;
    Ok(TokenGrid { tokens, grid: (h, w) })
}

/// Inverse of [`grid_tokens`].
pub fn grid_map<T: Scalar>(g: &mut Graph<'_, T>, tg: TokenGrid) -> Result<Var> {
    let &[b, n, c] = g.shape(tg.tokens) else {
        return Err(Error::shape("grid_map", format!("{:?}", g.shape(tg.tokens))));
    };
    if n != tg.grid.0 * tg.grid.1 {
        return Err(Error::shape("grid_map", format!("{n} tokens for grid {:?}", tg.grid)));
    }
    let t = g.permute(tg.tokens, &[0, 2, 1])?;
    g.reshape(t, &[b, c, tg.grid.0, tg.grid.1])
}

/// One conv 3×3 stride 2 → batch-norm → GELU stage.
#[derive(Debug, Clone)]
pub struct StemStage {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl StemStage {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ConvStemConfig,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, cfg.kernel, cfg.stride, cfg.kernel / 2, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout, cfg.bn_epsilon, cfg.bn_momentum),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(g.gelu(y))
    }
}

/// Stages of (conv 3×3 stride 2 → batch-norm → GELU).
#[derive(Debug, Clone)]
pub struct ConvStem {
    pub stages: Vec<StemStage>,
    total_stride: usize,
}

impl ConvStem {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ConvStemConfig,
        rng: &mut R,
    ) -> Self {
        let mut cin = cfg.in_channels;
        let stages = cfg
            .stage_channels
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let stage = StemStage::new(store, &format!("{name}.{i}"), cfg, cin, cout, rng);
                cin = cout;
                stage
            })
            .collect();
        Self {
            stages,
            total_stride: cfg.total_stride(),
        }
    }

    pub fn forward_stage<T: Scalar>(&self, g: &mut Graph<'_, T>, stage: usize, x: Var) -> Result<Var> {
        self.stages[stage].forward(g, x)
    }

    /// Runs stages `start..` on a feature map.
    pub fn forward_from<T: Scalar>(&self, g: &mut Graph<'_, T>, start: usize, mut x: Var) -> Result<Var> {
        for i in start..self.stages.len() {
            x = self.forward_stage(g, i, x)?;
        }
        Ok(x)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<TokenGrid> {
        let &[_, _, h, w] = g.shape(x) else {
            return Err(Error::shape("conv_stem", format!("{:?}", g.shape(x))));
        };
        if h % self.total_stride != 0 || w % self.total_stride != 0 {
            return Err(Error::shape(
                "conv_stem",
                format!("{h}×{w} input not divisible by total stride {}", self.total_stride),
            ));
        }
        let map = self.forward_from(g, 0, x)?;
        grid_tokens(g, map)
    }
}

/// Pre-norm retention block with per-head group norm and swish gating,
/// followed by a pre-norm GELU feed-forward.
#[derive(Debug, Clone)]
pub struct RetNetBlock {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub gate: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
    heads: usize,
    gammas: Vec<f64>,
    theta_base: f64,
    scale_queries: bool,
    group_eps: f64,
}

impl RetNetBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &RetentionConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.embed_dim;
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, cfg.ln_eps),
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, true, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng),
            gate: Linear::new(store, &format!("{name}.gate"), d, d, true, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, true, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, cfg.ln_eps),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.ffn_hidden(), rng),
            heads: cfg.n_heads,
            gammas: cfg.gammas.clone(),
            theta_base: cfg.theta_base,
            scale_queries: cfg.scale_queries,
            group_eps: cfg.ln_eps,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let d = *g.shape(x).last().unwrap_or(&0);
        if d != self.q.inp {
            return Err(Error::shape("retnet_block", format!("token dim {d}, expected {}", self.q.inp)));
        }
        let dh = d / self.heads;
        let h = self.ln1.forward(g, x)?;
        let mut q = self.q.forward(g, h)?;
        if self.scale_queries {
            q = g.scale(q, T::lit(1.0 / (dh as f64).sqrt()));
        }
        let k = self.k.forward(g, h)?;
        let v = self.v.forward(g, h)?;
        let gate = self.gate.forward(g, h)?;
        let theta: Vec<T> = rotary_theta(dh, self.theta_base);
        let q = split_heads(g, q, self.heads)?;
        let k = split_heads(g, k, self.heads)?;
        let v = split_heads(g, v, self.heads)?;
        let q = g.rotary(q, &theta)?;
        let k = g.rotary(k, &theta)?;
        let gammas: Vec<T> = self.gammas.iter().map(|&x| T::lit(x)).collect();
        let r = g.retention(q, k, v, &gammas)?;
        let r = g.layer_norm(r, None, None, self.group_eps)?;
        let r = merge_heads(g, r, self.heads)?;
        let gate = g.swish(gate);
        let y = g.mul(gate, r)?;
        let y = self.out.forward(g, y)?;
        let x = g.add(x, y)?;
        let h = self.ln2.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.add(x, f)
    }
}

/// Stem plus retention stack, emitting a `(B, C, h, w)` feature map.
#[derive(Debug, Clone)]
pub struct TemporalBranch {
    pub stem: ConvStem,
    pub blocks: Vec<RetNetBlock>,
    pub form: RetentionForm,
}

impl TemporalBranch {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        stem: &ConvStemConfig,
        ret: &RetentionConfig,
        rng: &mut R,
    ) -> Self {
        Self {
            stem: ConvStem::new(store, &format!("{name}.stem"), stem, rng),
            blocks: (0..ret.n_layers)
                .map(|i| RetNetBlock::new(store, &format!("{name}.blocks.{i}"), ret, rng))
                .collect(),
            form: ret.form,
        }
    }

    pub fn retain<T: Scalar>(&self, g: &mut Graph<'_, T>, mut tokens: Var) -> Result<Var> {
        for b in &self.blocks {
            tokens = b.forward(g, tokens)?;
        }
        Ok(tokens)
    }

    /// Difference frame `(B, 3, H, W)` to temporal features `(B, C, h, w)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, diff: Var) -> Result<Var> {
        let tg = self.stem.forward(g, diff)?;
        let tokens = self.retain(g, tg.tokens)?;
        grid_map(
            g,
            TokenGrid {
                tokens,
                grid: tg.grid,
            },
        )
    }
}
