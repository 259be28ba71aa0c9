use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::config::RunConfig;
use crate::eval::metrics::{uar, uf1, ConfusionMatrix};
use crate::fusion::FusionMode;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub subject: String,
    pub n_test: usize,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    pub support: u64,
    pub recall: f64,
    pub f1: f64,
    /// True when the class has no test samples and scores 0 by convention.
    pub empty: bool,
}

/// LOSO outcome. Metrics are computed once on the pooled confusion matrix;
/// `fold_mean_acc` is the unweighted mean of per-fold accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub task: String,
    pub mode: FusionMode,
    pub seed: u64,
    pub folds: Vec<FoldSummary>,
    pub confusion: ConfusionMatrix,
    pub acc: f64,
    pub uf1: f64,
    pub uar: f64,
    pub fold_mean_acc: f64,
    pub per_class: Vec<ClassReport>,
    pub config: RunConfig,
}

impl MetricsReport {
    pub fn new(config: &RunConfig, class_names: &[String], folds: Vec<FoldSummary>, confusion: ConfusionMatrix) -> Self {
        let per_class = confusion
            .class_stats()
            .into_iter()
            .zip(class_names)
            .map(|(s, name)| ClassReport {
                class: name.clone(),
                support: s.support,
                recall: s.recall,
                f1: s.f1,
                empty: s.empty,
            })
            .collect();
        let fold_mean_acc = if folds.is_empty() {
            0.0
        } else {
            folds.iter().map(|f| f.acc).sum::<f64>() / folds.len() as f64
        };
        Self {
            schema_version: SCHEMA_VERSION,
            task: config.task.to_string(),
            mode: config.mode,
            seed: config.train.seed,
            folds,
            acc: confusion.acc(),
            uf1: uf1(&confusion),
            uar: uar(&confusion),
            fold_mean_acc,
            per_class,
            confusion,
            config: config.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Data(format!("report serialisation: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("report parse: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_roundtrip_is_a_fixed_point() {
        let cfg = RunConfig::default();
        let m = ConfusionMatrix::from_counts(vec![vec![2, 0, 0, 0, 0], vec![1, 1, 0, 0, 0], vec![0; 5], vec![0, 0, 0, 3, 0], vec![0, 0, 0, 0, 1]])
            .unwrap();
        let names: Vec<String> = (0..5).map(|i| format!("c{i}")).collect();
        let folds = vec![
            FoldSummary { subject: "a".into(), n_test: 5, acc: 0.8 },
            FoldSummary { subject: "b".into(), n_test: 3, acc: 1.0 },
        ];
        let r = MetricsReport::new(&cfg, &names, folds, m);
        assert!(r.per_class[2].empty);
        assert!((r.fold_mean_acc - 0.9).abs() < 1e-15);
        let text = r.to_json().unwrap();
        let back = MetricsReport::from_json(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_json().unwrap(), text);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["schema_version", "task", "mode", "seed", "folds", "confusion", "acc", "uf1", "uar", "per_class"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["mode"], "late");
        assert_eq!(v["folds"][0]["n_test"], 5);
    }
}
