use std::collections::BTreeMap;

use crate::data::DatasetIndex;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub held_out_subject: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Leave-one-subject-out plan, one fold per subject in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    /// Builds the plan from per-sample subject ids.
    pub fn from_subjects<S: AsRef<str>>(subjects: &[S]) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::Data("cannot build folds for an empty dataset".into()));
        }
        let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in subjects.iter().enumerate() {
            by_subject.entry(s.as_ref()).or_default().push(i);
        }
        if by_subject.len() < 2 {
            return Err(Error::Data(format!(
                "LOSO needs at least two subjects, found {}",
                by_subject.len()
            )));
        }
        let folds = by_subject
            .iter()
            .map(|(&subject, test)| Fold {
                held_out_subject: subject.to_string(),
                train: (0..subjects.len()).filter(|i| subjects[*i].as_ref() != subject).collect(),
                test: test.clone(),
            })
            .collect();
        Ok(Self { folds })
    }

    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    /// Checks disjointness, coverage, subject exclusivity and fold count.
    pub fn check<S: AsRef<str>>(&self, subjects: &[S]) -> Result<()> {
        let fail = |m: String| Err(Error::Data(format!("fold plan invariant: {m}")));
        let mut seen = vec![false; subjects.len()];
        for f in &self.folds {
            for &i in &f.test {
                if i >= subjects.len() || seen[i] {
                    return fail(format!("test index {i} repeated or out of range"));
                }
                seen[i] = true;
                if subjects[i].as_ref() != f.held_out_subject {
                    return fail(format!("test index {i} is not subject {}", f.held_out_subject));
                }
            }
            if f.train.iter().any(|&i| subjects[i].as_ref() == f.held_out_subject) {
                return fail(format!("subject {} in its own train split", f.held_out_subject));
            }
            if f.train.len() + f.test.len() != subjects.len() {
                return fail(format!("fold {} does not partition the data", f.held_out_subject));
            }
        }
        if seen.iter().any(|&s| !s) {
            return fail("test sets do not cover the dataset".into());
        }
        let mut distinct: Vec<&str> = subjects.iter().map(AsRef::as_ref).collect();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() != self.folds.len() {
            return fail(format!("{} folds for {} subjects", self.folds.len(), distinct.len()));
        }
        Ok(())
    }
}

pub fn loso_folds(index: &DatasetIndex) -> Result<FoldPlan> {
    let subjects: Vec<&str> = index.samples.iter().map(|s| s.subject_id.as_str()).collect();
    FoldPlan::from_subjects(&subjects)
}
