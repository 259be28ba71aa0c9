//! Forward topologies over the two branches and the shared classification
//! head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, RetentionForm, Var};
use crate::nn::layers::{BatchNorm, LayerNorm, Linear};
use crate::nn::params::ParamStore;
use crate::scalar::Scalar;
use crate::spatial::{PatchEmbedConfig, SpatialBranch, TransformerConfig};
use crate::temporal::{
    default_gammas, grid_map, grid_tokens, ConvStemConfig, RetentionConfig, StemStage, TemporalBranch, TokenGrid,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionMode {
    #[serde(rename = "temporal")]
    TemporalOnly,
    #[serde(rename = "spatial")]
    SpatialOnly,
    #[serde(rename = "early")]
    EarlyTS,
    #[serde(rename = "t2s")]
    TtoS,
    #[serde(rename = "s2t")]
    StoT,
    #[serde(rename = "late")]
    LateTS,
}

impl FusionMode {
    pub const ALL: [FusionMode; 6] = [
        FusionMode::TemporalOnly,
        FusionMode::SpatialOnly,
        FusionMode::EarlyTS,
        FusionMode::TtoS,
        FusionMode::StoT,
        FusionMode::LateTS,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::TemporalOnly => "temporal",
            FusionMode::SpatialOnly => "spatial",
            FusionMode::EarlyTS => "early",
            FusionMode::TtoS => "t2s",
            FusionMode::StoT => "s2t",
            FusionMode::LateTS => "late",
        }
    }

    pub fn needs_temporal(self) -> bool {
        !matches!(self, FusionMode::SpatialOnly)
    }

    pub fn needs_spatial(self) -> bool {
        matches!(self, FusionMode::SpatialOnly | FusionMode::TtoS | FusionMode::StoT | FusionMode::LateTS)
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMode(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadNorm {
    Batch,
    Layer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: usize,
    pub norm: HeadNorm,
    pub norm_epsilon: f64,
    pub bn_momentum: f64,
    pub n_classes: usize,
}

impl HeadConfig {
    pub fn new(n_classes: usize) -> Self {
        Self {
            hidden: 1024,
            norm: HeadNorm::Batch,
            norm_epsilon: 1e-5,
            bn_momentum: 0.1,
            n_classes,
        }
    }
}

#[derive(Debug, Clone)]
enum HeadNormLayer {
    Batch(BatchNorm),
    Layer(LayerNorm),
}

/// Per-position `C→hidden` projection, normalisation, swish, average pool
/// over positions, then `hidden→classes`.
#[derive(Debug, Clone)]
pub struct Head {
    pub fc: Linear,
    norm: HeadNormLayer,
    pub classifier: Linear,
}

impl Head {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        cfg: &HeadConfig,
        rng: &mut R,
    ) -> Self {
        let norm = match cfg.norm {
            HeadNorm::Batch => HeadNormLayer::Batch(BatchNorm::new(
                store,
                &format!("{name}.norm"),
                cfg.hidden,
                cfg.norm_epsilon,
                cfg.bn_momentum,
            )),
            HeadNorm::Layer => HeadNormLayer::Layer(LayerNorm::new(store, &format!("{name}.norm"), cfg.hidden, cfg.norm_epsilon)),
        };
        Self {
            fc: Linear::new(store, &format!("{name}.fc"), in_channels, cfg.hidden, true, rng),
            norm,
            classifier: Linear::new(store, &format!("{name}.classifier"), cfg.hidden, cfg.n_classes, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        let &[b, c, h, w] = g.shape(features) else {
            return Err(Error::shape("head", format!("{:?}", g.shape(features))));
        };
        if c != self.fc.inp {
            return Err(Error::shape("head", format!("{c} channels, expected {}", self.fc.inp)));
        }
        let tokens = grid_tokens(g, features)?.tokens;
        let x = self.fc.forward(g, tokens)?;
        let hidden = self.fc.out;
        let x = match &self.norm {
            HeadNormLayer::Batch(bn) => {
                let flat = g.reshape(x, &[b * h * w, hidden])?;
                let y = bn.forward(g, flat)?;
                g.reshape(y, &[b, h * w, hidden])?
            }
            HeadNormLayer::Layer(ln) => ln.forward(g, x)?,
        };
        let x = g.swish(x);
        let pooled = g.mean_tokens(x)?;
        self.classifier.forward(g, pooled)
    }
}

/// Full architecture description; every dimension of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch: PatchEmbedConfig,
    pub stem: ConvStemConfig,
    pub retention: RetentionConfig,
    pub transformer: TransformerConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    /// 224² input, 16-pixel patches, 512-wide 14×14 features, five
    /// retention blocks, two transformer blocks, 1024-wide head.
    pub fn published(n_classes: usize) -> Self {
        Self {
            patch: PatchEmbedConfig::default(),
            stem: ConvStemConfig::default(),
            retention: RetentionConfig::default(),
            transformer: TransformerConfig::default(),
            head: HeadConfig::new(n_classes),
        }
    }

    /// 32² input, 8-pixel patches, 64-wide 4×4 features, one block per
    /// branch. Used by gradient checks and desk-scale training.
    pub fn tiny(n_classes: usize) -> Self {
        let heads = 4;
        Self {
            patch: PatchEmbedConfig {
                patch_size: 8,
                embed_dim: 64,
                input_size: 32,
                in_channels: 3,
            },
            stem: ConvStemConfig {
                stage_channels: vec![16, 32, 64],
                ..ConvStemConfig::default()
            },
            retention: RetentionConfig {
                embed_dim: 64,
                n_layers: 1,
                n_heads: heads,
                gammas: default_gammas(heads),
                ..RetentionConfig::default()
            },
            transformer: TransformerConfig {
                n_layers: 1,
                n_heads: heads,
                ..TransformerConfig::default()
            },
            head: HeadConfig {
                hidden: 128,
                ..HeadConfig::new(n_classes)
            },
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.patch.embed_dim
    }

    pub fn image_size(&self) -> usize {
        self.patch.input_size
    }

    pub fn grid(&self) -> usize {
        self.patch.grid()
    }

    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        self.stem.validate(self.patch.input_size, self.patch.grid(), self.patch.embed_dim)?;
        self.retention.validate()?;
        self.transformer.validate(self.patch.embed_dim)?;
        if self.retention.embed_dim != self.patch.embed_dim {
            return Err(Error::Config(format!(
                "retention dim {} differs from embed dim {}",
                self.retention.embed_dim, self.patch.embed_dim
            )));
        }
        if self.head.n_classes == 0 || self.head.hidden == 0 {
            return Err(Error::Config("head needs at least one class and hidden unit".into()));
        }
        Ok(())
    }
}

/// Output of one forward pass: logits and the pre-head fused feature map.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub logits: Var,
    pub fused: Var,
}

/// The recogniser: parameter store plus whichever branches `mode` needs.
#[derive(Debug, Clone)]
pub struct TsfModel<T> {
    pub config: ModelConfig,
    pub mode: FusionMode,
    pub store: ParamStore<T>,
    pub temporal: Option<TemporalBranch>,
    pub spatial: Option<SpatialBranch>,
    /// Onset-stream first stage; present only for early fusion, whose diff
    /// stream uses the temporal stem's own first stage.
    pub early_onset: Option<StemStage>,
    pub head: Head,
}

impl<T: Scalar> TsfModel<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, mode: FusionMode, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let temporal = mode
            .needs_temporal()
            .then(|| TemporalBranch::new(&mut store, "temporal", &config.stem, &config.retention, rng));
        let spatial = mode
            .needs_spatial()
            .then(|| SpatialBranch::new(&mut store, "spatial", &config.patch, &config.transformer, rng));
        let head = Head::new(&mut store, "head", config.embed_dim(), &config.head, rng);
        let early_onset = (mode == FusionMode::EarlyTS).then(|| {
            let stem = &config.stem;
            StemStage::new(&mut store, "early_onset", stem, stem.in_channels, stem.stage_channels[0], rng)
        });
        Ok(Self {
            config,
            mode,
            store,
            temporal,
            spatial,
            early_onset,
            head,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.config.head.n_classes
    }

    pub fn graph(&self, train: bool) -> Graph<'_, T> {
        Graph::new(&self.store, train).with_retention_form(self.config.retention.form)
    }

    fn temporal(&self, mode: FusionMode) -> Result<&TemporalBranch> {
        self.temporal.as_ref().ok_or(Error::MissingBranch {
            mode: mode.name(),
            branch: "temporal",
        })
    }

    fn spatial(&self, mode: FusionMode) -> Result<&SpatialBranch> {
        self.spatial.as_ref().ok_or(Error::MissingBranch {
            mode: mode.name(),
            branch: "spatial",
        })
    }

    /// Fused `(B, C, h, w)` features for `mode`, before the head.
    pub fn features(&self, g: &mut Graph<'_, T>, diff: Var, onset: Var, mode: FusionMode) -> Result<Var> {
        match mode {
            FusionMode::TemporalOnly => self.temporal(mode)?.forward(g, diff),
            FusionMode::SpatialOnly => self.spatial(mode)?.forward(g, onset),
            FusionMode::LateTS => {
                let (t, s) = (self.temporal(mode)?, self.spatial(mode)?);
                let ft = t.forward(g, diff)?;
                let fs = s.forward(g, onset)?;
                fuse_late(g, ft, fs)
            }
            FusionMode::TtoS => {
                let (t, s) = (self.temporal(mode)?, self.spatial(mode)?);
                let ft = t.forward(g, diff)?;
                let tt = grid_tokens(g, ft)?;
                let se = s.embed(g, onset)?;
                let x = g.add(se.tokens, tt.tokens)?;
                let tokens = s.encode(g, x)?;
                grid_map(g, TokenGrid { tokens, grid: se.grid })
            }
            FusionMode::StoT => {
                let (t, s) = (self.temporal(mode)?, self.spatial(mode)?);
                let st = s.forward_tokens(g, onset)?;
                let tg = t.stem.forward(g, diff)?;
                let x = g.add(st.tokens, tg.tokens)?;
                let tokens = t.retain(g, x)?;
                grid_map(g, TokenGrid { tokens, grid: tg.grid })
            }
            FusionMode::EarlyTS => {
                let t = self.temporal(mode)?;
                let onset_stage = self.early_onset.as_ref().ok_or(Error::MissingBranch {
                    mode: mode.name(),
                    branch: "early onset stage",
                })?;
                let d1 = t.stem.forward_stage(g, 0, diff)?;
                let o1 = onset_stage.forward(g, onset)?;
                let sum = g.add(d1, o1)?;
                let map = t.stem.forward_from(g, 1, sum)?;
                let tg = grid_tokens(g, map)?;
                let tokens = t.retain(g, tg.tokens)?;
                grid_map(g, TokenGrid { tokens, grid: tg.grid })
            }
        }
    }

    /// Runs `mode` on a `(diff, onset)` batch, each `(B, 3, S, S)`.
    pub fn forward(&self, g: &mut Graph<'_, T>, diff: Var, onset: Var, mode: FusionMode) -> Result<ForwardOutput> {
        let fused = self.features(g, diff, onset, mode)?;
        let logits = self.head.forward(g, fused)?;
        Ok(ForwardOutput { logits, fused })
    }

    /// Eval-mode logits for a batch.
    pub fn predict_logits(&self, diff: &Tensor<T>, onset: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.graph(false);
        let d = g.input(diff.clone());
        let o = g.input(onset.clone());
        let out = self.forward(&mut g, d, o, self.mode)?;
        Ok(g.value(out.logits).clone())
    }

    /// Same model, different retention evaluation order.
    pub fn set_retention_form(&mut self, form: RetentionForm) {
        self.config.retention.form = form;
    }
}

/// Elementwise sum of temporal and spatial feature maps.
pub fn fuse_late<T: Scalar>(g: &mut Graph<'_, T>, temporal: Var, spatial: Var) -> Result<Var> {
    if g.shape(temporal) != g.shape(spatial) {
        return Err(Error::shape(
            "fuse_late",
            format!("{:?} vs {:?}", g.shape(temporal), g.shape(spatial)),
        ));
    }
    g.add(temporal, spatial)
}

/// Mean softmax cross-entropy on plain tensors.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let l = g.input(logits.clone());
    let loss = g.cross_entropy(l, labels)?;
    Ok(g.value(loss).data()[0])
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
