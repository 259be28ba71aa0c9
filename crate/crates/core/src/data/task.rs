//! Label taxonomies: which raw emotions each benchmark task keeps and how
//! they collapse into classes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskName {
    Casme2Five,
    Casme2Three,
    SammFive,
    SammThree,
    Casme3Seven,
    Casme3Four,
    Synthetic(usize),
}

impl TaskName {
    pub const PUBLISHED: [TaskName; 6] = [
        TaskName::Casme2Five,
        TaskName::Casme2Three,
        TaskName::SammFive,
        TaskName::SammThree,
        TaskName::Casme3Seven,
        TaskName::Casme3Four,
    ];
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskName::Casme2Five => f.write_str("casme2-5"),
            TaskName::Casme2Three => f.write_str("casme2-3"),
            TaskName::SammFive => f.write_str("samm-5"),
            TaskName::SammThree => f.write_str("samm-3"),
            TaskName::Casme3Seven => f.write_str("casme3-7"),
            TaskName::Casme3Four => f.write_str("casme3-4"),
            TaskName::Synthetic(k) => write!(f, "synthetic-{k}"),
        }
    }
}

impl FromStr for TaskName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "casme2-5" => TaskName::Casme2Five,
            "casme2-3" => TaskName::Casme2Three,
            "samm-5" => TaskName::SammFive,
            "samm-3" => TaskName::SammThree,
            "casme3-7" => TaskName::Casme3Seven,
            "casme3-4" => TaskName::Casme3Four,
            other => match other.strip_prefix("synthetic-").and_then(|k| k.parse().ok()) {
                Some(k) if k >= 1 => TaskName::Synthetic(k),
                _ => return Err(Error::UnknownTask(s.to_string())),
            },
        })
    }
}

/// Raw emotions grouped as Negative under the MEGC2019 composite protocol.
const NEGATIVE: [&str; 6] = ["disgust", "repression", "anger", "contempt", "fear", "sadness"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: TaskName,
    pub classes: Vec<String>,
    emotion_map: BTreeMap<String, usize>,
}

fn canonical(raw: &str) -> String {
    let s = raw.trim().to_ascii_lowercase();
    match s.as_str() {
        "happy" | "hap" => "happiness",
        "disgusted" | "dis" => "disgust",
        "repressed" | "rep" => "repression",
        "surprised" | "sur" => "surprise",
        "other" | "oth" => "others",
        "angry" | "ang" => "anger",
        "con" => "contempt",
        "fea" | "fearful" => "fear",
        "sad" => "sadness",
        "neg" => "negative",
        "pos" => "positive",
        _ => return s,
    }
    .to_string()
}

impl TaskSpec {
    fn build(name: TaskName, classes: &[&str], pairs: &[(&str, usize)]) -> Self {
        Self {
            name,
            classes: classes.iter().map(|s| s.to_string()).collect(),
            emotion_map: pairs.iter().map(|&(e, i)| (e.to_string(), i)).collect(),
        }
    }

    fn identity(name: TaskName, classes: &[&str]) -> Self {
        let pairs: Vec<(&str, usize)> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Self::build(name, classes, &pairs)
    }

    fn grouped(name: TaskName, with_others: bool) -> Self {
        let mut classes = vec!["negative", "positive", "surprise"];
        let mut pairs: Vec<(&str, usize)> = NEGATIVE.iter().map(|&e| (e, 0)).collect();
        pairs.extend([("negative", 0), ("happiness", 1), ("positive", 1), ("surprise", 2)]);
        if with_others {
            classes.push("others");
            pairs.push(("others", 3));
        }
        Self::build(name, &classes, &pairs)
    }

    pub fn new(name: TaskName) -> Self {
        match name {
            TaskName::Casme2Five => Self::identity(name, &["happiness", "disgust", "repression", "surprise", "others"]),
            TaskName::SammFive => Self::identity(name, &["happiness", "anger", "contempt", "surprise", "others"]),
            TaskName::Casme3Seven => Self::identity(
                name,
                &["happiness", "anger", "disgust", "fear", "sadness", "surprise", "others"],
            ),
            TaskName::Casme2Three | TaskName::SammThree => Self::grouped(name, false),
            TaskName::Casme3Four => Self::grouped(name, true),
            TaskName::Synthetic(k) => {
                let classes: Vec<String> = (0..k).map(synthetic_label).collect();
                let refs: Vec<&str> = classes.iter().map(String::as_str).collect();
                Self::identity(name, &refs)
            }
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Ok(Self::new(name.parse()?))
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Raw emotions (canonical spelling) this task accepts.
    pub fn emotions(&self) -> impl Iterator<Item = &str> {
        self.emotion_map.keys().map(String::as_str)
    }

    pub fn map_emotion(&self, raw: &str) -> Option<usize> {
        self.emotion_map.get(&canonical(raw)).copied()
    }
}

pub fn synthetic_label(class: usize) -> String {
    format!("class{class}")
}

/// Class index for a raw emotion string, or `None` when the task excludes it.
pub fn map_emotion(raw: &str, task: &TaskSpec) -> Option<usize> {
    task.map_emotion(raw)
}
