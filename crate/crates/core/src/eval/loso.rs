use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{loso_folds, DatasetIndex, Fold, FoldPlan};
use crate::error::{Error, Result};
use crate::eval::config::RunConfig;
use crate::eval::metrics::ConfusionMatrix;
use crate::eval::report::{FoldSummary, MetricsReport};
use crate::fusion::TsfModel;
use crate::scalar::Scalar;
use crate::train::trainer::predict;
use crate::train::{train, Checkpoint, CheckpointMeta, PreparedData};

/// Pooled predictions across every fold of `plan`.
#[derive(Debug, Clone)]
pub struct Pooled {
    pub confusion: ConfusionMatrix,
    pub folds: Vec<FoldSummary>,
    /// Prediction for each dataset index.
    pub predictions: Vec<usize>,
}

/// Asks `predict_fold` for each fold's test predictions and pools them.
/// Every sample must be predicted exactly once.
pub fn pool_predictions(
    plan: &FoldPlan,
    labels: &[usize],
    classes: usize,
    mut predict_fold: impl FnMut(usize, &Fold) -> Result<Vec<usize>>,
) -> Result<Pooled> {
    let mut confusion = ConfusionMatrix::zeros(classes);
    let mut predictions = vec![usize::MAX; labels.len()];
    let mut folds = Vec::with_capacity(plan.len());
    for (k, fold) in plan.folds.iter().enumerate() {
        let preds = predict_fold(k, fold)?;
        if preds.len() != fold.test.len() {
            return Err(Error::Data(format!(
                "fold {}: {} predictions for {} test samples",
                fold.held_out_subject,
                preds.len(),
                fold.test.len()
            )));
        }
        let mut hits = 0;
        for (&i, &p) in fold.test.iter().zip(&preds) {
            if predictions[i] != usize::MAX {
                return Err(Error::Data(format!("sample {i} predicted twice")));
            }
            predictions[i] = p;
            confusion.add(labels[i], p)?;
            hits += usize::from(labels[i] == p);
        }
        folds.push(FoldSummary {
            subject: fold.held_out_subject.clone(),
            n_test: fold.test.len(),
            acc: hits as f64 / fold.test.len() as f64,
        });
    }
    if predictions.contains(&usize::MAX) {
        return Err(Error::Data("some samples were never predicted".into()));
    }
    Ok(Pooled {
        confusion,
        folds,
        predictions,
    })
}

/// Generator for fold `k`: the run seed on stream `k`.
pub fn fold_rng(seed: u64, fold: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fold as u64);
    rng
}

pub fn checkpoint_meta(cfg: &RunConfig) -> CheckpointMeta {
    CheckpointMeta {
        task: cfg.task.to_string(),
        mode: cfg.mode,
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        preprocess: cfg.preprocess.clone(),
    }
}

/// Trains a fresh model on `fold.train`; the epoch log goes to `log` when
/// given.
pub fn train_fold<T: Scalar>(
    cfg: &RunConfig,
    data: &PreparedData,
    fold_index: usize,
    train_idx: &[usize],
    log: Option<&Path>,
) -> Result<(TsfModel<T>, Checkpoint<T>)> {
    let mut rng = fold_rng(cfg.train.seed, fold_index);
    let mut model = TsfModel::<T>::new(cfg.model.clone(), cfg.mode, &mut rng)?;
    let mut writer = match log {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    let outcome = train(&mut model, data, train_idx, &cfg.train, &mut rng, |rec| {
        if let (Some(w), Some(p)) = (writer.as_mut(), log) {
            let line = serde_json::to_string(rec).map_err(|e| Error::Data(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    })?;
    if let (Some(mut w), Some(p)) = (writer, log) {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    let epochs = u32::try_from(cfg.train.epochs).unwrap_or(u32::MAX);
    let ckpt = Checkpoint::capture(&model, &outcome.optimizer, epochs, &rng, checkpoint_meta(cfg));
    Ok((model, ckpt))
}

fn fold_stem(fold_index: usize, fold: &Fold) -> String {
    let safe: String = fold
        .held_out_subject
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("fold{fold_index:02}_{safe}")
}

/// Full leave-one-subject-out protocol. With `out_dir`, writes per-fold
/// checkpoints and logs plus `report.json`. `on_fold` sees each trained
/// model with its test indices and predictions.
pub fn run_loso<T: Scalar>(
    index: &DatasetIndex,
    cfg: &RunConfig,
    out_dir: Option<&Path>,
    mut on_fold: impl FnMut(&Fold, &TsfModel<T>, &PreparedData, &[usize]) -> Result<()>,
) -> Result<MetricsReport> {
    let plan = loso_folds(index)?;
    let data = PreparedData::new(index, &cfg.preprocess)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let pooled = pool_predictions(&plan, &index.labels, index.task.num_classes(), |k, fold| {
        let stem = fold_stem(k, fold);
        let log = out_dir.map(|d| d.join(format!("{stem}.log.jsonl")));
        let (model, ckpt) = train_fold::<T>(cfg, &data, k, &fold.train, log.as_deref())?;
        if let Some(d) = out_dir {
            ckpt.save(&d.join(format!("{stem}.ckpt")))?;
        }
        let preds = predict(&model, &data, &fold.test, cfg.train.batch_size)?;
        log::info!(
            "fold {} ({}): {}/{} correct",
            k,
            fold.held_out_subject,
            preds.iter().zip(&fold.test).filter(|&(&p, &i)| p == data.labels[i]).count(),
            fold.test.len()
        );
        on_fold(fold, &model, &data, &preds)?;
        Ok(preds)
    })?;
    let report = MetricsReport::new(cfg, &index.task.classes, pooled.folds, pooled.confusion);
    if let Some(dir) = out_dir {
        report.save(&dir.join("report.json"))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthesize_dataset;
    use crate::eval::metrics::{uar, uf1};

    #[test]
    fn oracle_predictor_scores_one_and_conserves_counts() {
        let idx = synthesize_dataset(4, 5, 3, 16, 2).unwrap();
        let plan = loso_folds(&idx).unwrap();
        let pooled = pool_predictions(&plan, &idx.labels, 3, |_, f| Ok(f.test.iter().map(|&i| idx.labels[i]).collect())).unwrap();
        assert_eq!(pooled.folds.len(), 4);
        assert_eq!(pooled.folds.iter().map(|f| f.n_test).sum::<usize>(), idx.len());
        assert_eq!(pooled.confusion.total() as usize, idx.len());
        let m = &pooled.confusion;
        assert_eq!((m.acc(), uf1(m), uar(m)), (1.0, 1.0, 1.0));
    }

    #[test]
    fn short_fold_output_is_an_error() {
        let idx = synthesize_dataset(2, 3, 2, 16, 2).unwrap();
        let plan = loso_folds(&idx).unwrap();
        assert!(pool_predictions(&plan, &idx.labels, 2, |_, _| Ok(vec![0])).is_err());
    }
}
