use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

/// Per-class counts and derived scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// True samples of this class.
    pub support: u64,
    pub recall: f64,
    pub f1: f64,
    /// No true samples and no predictions: the class scores 0 in both means.
    pub empty: bool,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if c == 0 || counts.iter().any(|r| r.len() != c) {
            return Err(Error::shape("confusion", "counts must be a non-empty square matrix"));
        }
        Ok(Self { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        let c = self.classes();
        if truth >= c || pred >= c {
            return Err(Error::LabelRange {
                label: truth.max(pred),
                classes: c,
            });
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::shape("confusion", "merging matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    /// `trace / total`; 0 for an empty matrix.
    pub fn acc(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }

    pub fn class_stats(&self) -> Vec<ClassStats> {
        let c = self.classes();
        (0..c)
            .map(|i| {
                let tp = self.counts[i][i];
                let support: u64 = self.counts[i].iter().sum();
                let predicted: u64 = (0..c).map(|r| self.counts[r][i]).sum();
                let (fp, fn_) = (predicted - tp, support - tp);
                let denom = 2 * tp + fp + fn_;
                ClassStats {
                    tp,
                    fp,
                    fn_,
                    support,
                    recall: if support == 0 { 0.0 } else { tp as f64 / support as f64 },
                    f1: if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 },
                    empty: support == 0,
                }
            })
            .collect()
    }

    /// Classes with no true samples; they contribute 0 to UF1 and UAR.
    pub fn empty_classes(&self) -> Vec<usize> {
        self.class_stats()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.empty)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::shape(
            "confusion",
            format!("{} predictions for {} labels", preds.len(), labels.len()),
        ));
    }
    if classes == 0 {
        return Err(Error::Config("confusion matrix needs at least one class".into()));
    }
    let mut m = ConfusionMatrix::zeros(classes);
    for (&p, &t) in preds.iter().zip(labels) {
        m.add(t, p)?;
    }
    Ok(m)
}

/// Unweighted mean over classes of `2·TP / (2·TP + FP + FN)`.
pub fn uf1(m: &ConfusionMatrix) -> f64 {
    let stats = m.class_stats();
    stats.iter().map(|s| s.f1).sum::<f64>() / stats.len() as f64
}

/// Unweighted mean over classes of `TP / N`.
pub fn uar(m: &ConfusionMatrix) -> f64 {
    let stats = m.class_stats();
    stats.iter().map(|s| s.recall).sum::<f64>() / stats.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_computed_two_class_example() {
        let m = ConfusionMatrix::from_counts(vec![vec![5, 5], vec![0, 10]]).unwrap();
        assert!((uf1(&m) - 11.0 / 15.0).abs() < 1e-15);
        assert!((uar(&m) - 0.75).abs() < 1e-15);
        assert_eq!(m.acc(), 0.75);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let labels = [0, 1, 2, 2, 1, 0];
        let m = confusion(&labels, &labels, 3).unwrap();
        assert_eq!((m.acc(), uf1(&m), uar(&m)), (1.0, 1.0, 1.0));
        assert!((0..3).all(|i| (0..3).all(|j| (m.get(i, j) > 0) == (i == j))));
    }

    #[test]
    fn empty_inputs_and_empty_classes() {
        let m = confusion(&[], &[], 4).unwrap();
        assert_eq!(m.total(), 0);
        assert_eq!(m.acc(), 0.0);
        let m = confusion(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(m.empty_classes(), vec![2]);
        assert!((uar(&m) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn range_and_length_errors() {
        assert!(confusion(&[3], &[0], 3).is_err());
        assert!(confusion(&[0, 1], &[0], 3).is_err());
    }

    #[test]
    fn equal_support_and_recall_gives_uar_equal_acc() {
        let m = ConfusionMatrix::from_counts(vec![vec![3, 1, 0], vec![0, 3, 1], vec![1, 0, 3]]).unwrap();
        assert!((uar(&m) - m.acc()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn relabelling_invariance(
            counts in prop::collection::vec(0u64..20, 16),
            perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
        ) {
            let rows: Vec<Vec<u64>> = counts.chunks(4).map(|r| r.to_vec()).collect();
            let m = ConfusionMatrix::from_counts(rows.clone()).unwrap();
            let permuted: Vec<Vec<u64>> = (0..4).map(|i| (0..4).map(|j| rows[perm[i]][perm[j]]).collect()).collect();
            let p = ConfusionMatrix::from_counts(permuted).unwrap();
            prop_assert!((uf1(&m) - uf1(&p)).abs() < 1e-12);
            prop_assert!((uar(&m) - uar(&p)).abs() < 1e-12);
            for v in [uf1(&m), uar(&m), m.acc()] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
