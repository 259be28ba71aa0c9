//! Dataset ingestion, label mapping, preprocessing, LOSO folds and the
//! synthetic where×how generator.

pub mod folds;
pub mod image;
pub mod manifest;
pub mod preprocess;
pub mod synth;
pub mod task;

use std::path::PathBuf;
use std::sync::Arc;

use crate::error::{Error, Result};

pub use self::image::{stack_batch, Image};
pub use folds::{loso_folds, Fold, FoldPlan};
pub use manifest::{load_manifest, write_manifest};
pub use preprocess::{difference_frame, preprocess, AugmentDraw, PreprocessConfig};
pub use synth::{synthesize_dataset, MotionTruth};
pub use task::{map_emotion, TaskName, TaskSpec};

/// Where a frame's pixels come from. File-backed frames are decoded on
/// first access.
#[derive(Debug, Clone)]
pub enum ImageSource {
    Memory(Arc<Image>),
    File(PathBuf),
}

impl ImageSource {
    pub fn load(&self, clip_id: &str) -> Result<Image> {
        match self {
            ImageSource::Memory(img) => Ok((**img).clone()),
            ImageSource::File(path) => Image::load_rgb(path).map_err(|msg| Error::Image {
                clip_id: clip_id.to_string(),
                path: path.clone(),
                msg,
            }),
        }
    }
}

/// One micro-expression clip reduced to its onset and apex frames.
#[derive(Debug, Clone)]
pub struct Sample {
    pub subject_id: String,
    pub clip_id: String,
    pub onset: ImageSource,
    pub apex: ImageSource,
    pub emotion: String,
    /// Generator ground truth; only synthetic samples carry it.
    pub truth: Option<MotionTruth>,
}

impl Sample {
    /// Decodes both frames and checks that their dimensions agree.
    pub fn load_pair(&self) -> Result<(Image, Image)> {
        let onset = self.onset.load(&self.clip_id)?;
        let apex = self.apex.load(&self.clip_id)?;
        if onset.dims() != apex.dims() {
            return Err(Error::Data(format!(
                "clip {}: onset {:?} and apex {:?} differ in size",
                self.clip_id,
                onset.dims(),
                apex.dims()
            )));
        }
        Ok((onset, apex))
    }
}

/// Immutable list of samples mapped onto one task's classes.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub samples: Vec<Sample>,
    /// Class index per sample.
    pub labels: Vec<usize>,
    pub task: TaskSpec,
    /// Rows skipped because their emotion is outside the task.
    pub dropped: usize,
}

impl DatasetIndex {
    /// Maps each sample's emotion through `task`, dropping unmappable ones.
    pub fn from_samples(samples: Vec<Sample>, task: TaskSpec) -> Result<Self> {
        let mut kept = Vec::with_capacity(samples.len());
        let mut labels = Vec::with_capacity(samples.len());
        let mut dropped = 0;
        for s in samples {
            if s.subject_id.is_empty() {
                return Err(Error::Data(format!("clip {} has an empty subject id", s.clip_id)));
            }
            match task.map_emotion(&s.emotion) {
                Some(c) => {
                    labels.push(c);
                    kept.push(s);
                }
                None => dropped += 1,
            }
        }
        if dropped > 0 {
            log::info!("{dropped} samples dropped: emotion outside task {}", task.name);
        }
        Ok(Self {
            samples: kept,
            labels,
            task,
            dropped,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subjects(&self) -> Vec<String> {
        let mut s: Vec<String> = self.samples.iter().map(|s| s.subject_id.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.task.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}
