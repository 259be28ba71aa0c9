//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored; every key is optional and
//! unknown keys are errors. Relative paths resolve against the config
//! file's directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{PreprocessConfig, TaskName};
use crate::error::{Error, Result};
use crate::fusion::{FusionMode, HeadNorm, ModelConfig};
use crate::nn::RetentionForm;
use crate::temporal::default_gammas;
use crate::train::TrainConfig;

/// Dataset shape for the `synth` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub subjects: usize,
    pub per_subject: usize,
    pub image_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects: 4,
            per_subject: 16,
            image_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskName,
    pub mode: FusionMode,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
    pub synth: SynthConfig,
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
}

/// Recognised keys, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: [&str; 32] = [
    "task",
    "mode",
    "image_size",
    "patch_size",
    "embed_dim",
    "stem_channels",
    "retention_layers",
    "retention_heads",
    "retention_gammas",
    "retention_form",
    "scale_queries",
    "transformer_layers",
    "transformer_heads",
    "ffn_ratio",
    "head_hidden",
    "head_norm",
    "lr0",
    "lr_decay",
    "batch_size",
    "epochs",
    "weight_decay",
    "loss_reduction",
    "seed",
    "augment",
    "crop_padding",
    "norm_mean",
    "norm_std",
    "manifest",
    "output_dir",
    "synth_subjects",
    "synth_per_subject",
    "synth_image_size",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn triple(key: &str, v: &str) -> Result<[f32; 3]> {
    let xs: Vec<f32> = parse_list(key, v)?;
    match xs[..] {
        [a] => Ok([a; 3]),
        [a, b, c] => Ok([a, b, c]),
        _ => Err(Error::Config(format!("`{key}` takes one or three values"))),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Stem widths doubling up to `embed_dim`, one stride-2 stage per factor
/// of two in `patch_size`.
pub fn default_stem_channels(patch_size: usize, embed_dim: usize) -> Vec<usize> {
    let stages = patch_size.max(2).trailing_zeros() as usize;
    (0..stages).map(|i| embed_dim >> (stages - 1 - i)).collect()
}

impl Default for RunConfig {
    fn default() -> Self {
        let task = TaskName::Casme2Five;
        let classes = crate::data::TaskSpec::new(task).num_classes();
        Self {
            task,
            mode: FusionMode::LateTS,
            model: ModelConfig::published(classes),
            train: TrainConfig::default(),
            preprocess: PreprocessConfig::default(),
            synth: SynthConfig::default(),
            manifest: None,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::from_text(&text, base)
    }

    pub fn from_text(text: &str, base: &Path) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", n + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key `{k}`", n + 1)));
            }
            if kv.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        let get = |k: &str| kv.get(k).map(String::as_str);

        let task: TaskName = get("task").map(str::parse).transpose()?.unwrap_or(TaskName::Casme2Five);
        let classes = crate::data::TaskSpec::new(task).num_classes();
        let mode = get("mode").map(str::parse).transpose()?.unwrap_or(FusionMode::LateTS);

        let mut model = ModelConfig::published(classes);
        if let Some(v) = get("image_size") {
            model.patch.input_size = parse("image_size", v)?;
        }
        if let Some(v) = get("patch_size") {
            model.patch.patch_size = parse("patch_size", v)?;
        }
        if let Some(v) = get("embed_dim") {
            model.patch.embed_dim = parse("embed_dim", v)?;
        }
        model.retention.embed_dim = model.patch.embed_dim;
        model.stem.stage_channels = match get("stem_channels") {
            Some(v) => parse_list("stem_channels", v)?,
            None => default_stem_channels(model.patch.patch_size, model.patch.embed_dim),
        };
        if let Some(v) = get("retention_layers") {
            model.retention.n_layers = parse("retention_layers", v)?;
        }
        if let Some(v) = get("retention_heads") {
            model.retention.n_heads = parse("retention_heads", v)?;
        }
        model.retention.gammas = match get("retention_gammas") {
            Some(v) => parse_list("retention_gammas", v)?,
            None => default_gammas(model.retention.n_heads),
        };
        if let Some(v) = get("retention_form") {
            model.retention.form = match v {
                "parallel" => RetentionForm::Parallel,
                "recurrent" => RetentionForm::Recurrent,
                _ => return Err(Error::Config(format!("`retention_form`: expected parallel or recurrent, got `{v}`"))),
            };
        }
        if let Some(v) = get("scale_queries") {
            model.retention.scale_queries = parse_bool("scale_queries", v)?;
        }
        if let Some(v) = get("transformer_layers") {
            model.transformer.n_layers = parse("transformer_layers", v)?;
        }
        if let Some(v) = get("transformer_heads") {
            model.transformer.n_heads = parse("transformer_heads", v)?;
        }
        if let Some(v) = get("ffn_ratio") {
            let r = parse("ffn_ratio", v)?;
            model.transformer.ffn_ratio = r;
            model.retention.ffn_ratio = r;
        }
        if let Some(v) = get("head_hidden") {
            model.head.hidden = parse("head_hidden", v)?;
        }
        if let Some(v) = get("head_norm") {
            model.head.norm = match v {
                "batch" => HeadNorm::Batch,
                "layer" => HeadNorm::Layer,
                _ => return Err(Error::Config(format!("`head_norm`: expected batch or layer, got `{v}`"))),
            };
        }
        model.validate()?;

        let mut train = TrainConfig::default();
        if let Some(v) = get("lr0") {
            train.lr0 = parse("lr0", v)?;
        }
        if let Some(v) = get("lr_decay") {
            train.lr_decay = parse("lr_decay", v)?;
        }
        if let Some(v) = get("batch_size") {
            train.batch_size = parse("batch_size", v)?;
        }
        if let Some(v) = get("epochs") {
            train.epochs = parse("epochs", v)?;
        }
        if let Some(v) = get("weight_decay") {
            train.weight_decay = parse("weight_decay", v)?;
        }
        if let Some(v) = get("loss_reduction") {
            train.loss_reduction = parse("loss_reduction", v)?;
        }
        if let Some(v) = get("seed") {
            train.seed = parse("seed", v)?;
        }
        train.validate()?;

        let mut preprocess = PreprocessConfig::for_size(model.patch.input_size);
        preprocess.rng_seed = train.seed;
        if let Some(v) = get("augment") {
            preprocess.train_augment = parse_bool("augment", v)?;
        }
        if let Some(v) = get("crop_padding") {
            preprocess.crop_padding = parse("crop_padding", v)?;
        }
        if let Some(v) = get("norm_mean") {
            preprocess.mean = triple("norm_mean", v)?;
        }
        if let Some(v) = get("norm_std") {
            preprocess.std = triple("norm_std", v)?;
        }
        preprocess.validate()?;

        let mut synth = SynthConfig::default();
        if let Some(v) = get("synth_subjects") {
            synth.subjects = parse("synth_subjects", v)?;
        }
        if let Some(v) = get("synth_per_subject") {
            synth.per_subject = parse("synth_per_subject", v)?;
        }
        if let Some(v) = get("synth_image_size") {
            synth.image_size = parse("synth_image_size", v)?;
        }

        Ok(Self {
            task,
            mode,
            model,
            train,
            preprocess,
            synth,
            manifest: get("manifest").map(|p| base.join(p)),
            output_dir: base.join(get("output_dir").unwrap_or("runs")),
        })
    }

    /// Serialises every key; `from_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let p = &self.preprocess;
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("task", self.task.to_string());
        put("mode", self.mode.to_string());
        put("image_size", m.patch.input_size.to_string());
        put("patch_size", m.patch.patch_size.to_string());
        put("embed_dim", m.patch.embed_dim.to_string());
        put("stem_channels", join(&m.stem.stage_channels));
        put("retention_layers", m.retention.n_layers.to_string());
        put("retention_heads", m.retention.n_heads.to_string());
        put("retention_gammas", join(&m.retention.gammas));
        put(
            "retention_form",
            match m.retention.form {
                RetentionForm::Parallel => "parallel",
                RetentionForm::Recurrent => "recurrent",
            }
            .into(),
        );
        put("scale_queries", m.retention.scale_queries.to_string());
        put("transformer_layers", m.transformer.n_layers.to_string());
        put("transformer_heads", m.transformer.n_heads.to_string());
        put("ffn_ratio", m.transformer.ffn_ratio.to_string());
        put("head_hidden", m.head.hidden.to_string());
        put(
            "head_norm",
            match m.head.norm {
                HeadNorm::Batch => "batch",
                HeadNorm::Layer => "layer",
            }
            .into(),
        );
        put("lr0", t.lr0.to_string());
        put("lr_decay", t.lr_decay.to_string());
        put("batch_size", t.batch_size.to_string());
        put("epochs", t.epochs.to_string());
        put("weight_decay", t.weight_decay.to_string());
        put("loss_reduction", t.loss_reduction.to_string());
        put("seed", t.seed.to_string());
        put("augment", p.train_augment.to_string());
        put("crop_padding", p.crop_padding.to_string());
        put("norm_mean", join(&p.mean));
        put("norm_std", join(&p.std));
        if let Some(mf) = &self.manifest {
            put("manifest", mf.display().to_string());
        }
        put("output_dir", self.output_dir.display().to_string());
        put("synth_subjects", self.synth.subjects.to_string());
        put("synth_per_subject", self.synth.per_subject.to_string());
        put("synth_image_size", self.synth.image_size.to_string());
        s
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.preprocess.rng_seed = seed;
        self
    }
}
