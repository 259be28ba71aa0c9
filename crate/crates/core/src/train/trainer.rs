use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::preprocess::{normalize, resize_to_target};
use crate::data::{difference_frame, stack_batch, AugmentDraw, DatasetIndex, Image, PreprocessConfig};
use crate::error::{Error, Result};
use crate::fusion::{argmax, TsfModel};
use crate::nn::Graph;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{adamw_step, lr_at, AdamW, LossReduction, TrainConfig};

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
}

/// Frames decoded and resized once; augmentation and normalization happen
/// per batch.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub onsets: Vec<Image>,
    pub apexes: Vec<Image>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub preprocess: PreprocessConfig,
}

impl PreparedData {
    pub fn new(index: &DatasetIndex, preprocess: &PreprocessConfig) -> Result<Self> {
        preprocess.validate()?;
        let mut onsets = Vec::with_capacity(index.len());
        let mut apexes = Vec::with_capacity(index.len());
        for s in &index.samples {
            let (o, a) = s.load_pair()?;
            if o.channels() != 3 {
                return Err(Error::Data(format!("clip {}: expected 3 channels", s.clip_id)));
            }
            onsets.push(resize_to_target(&o, preprocess));
            apexes.push(resize_to_target(&a, preprocess));
        }
        Ok(Self {
            onsets,
            apexes,
            labels: index.labels.clone(),
            n_classes: index.task.num_classes(),
            preprocess: preprocess.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Normalized `(diff, onset)` pair for one sample under `draw`.
    pub fn pair(&self, i: usize, draw: Option<&AugmentDraw>) -> Result<(Image, Image)> {
        let cfg = &self.preprocess;
        let (o, a) = match draw {
            Some(d) if cfg.train_augment => (d.apply(&self.onsets[i]), d.apply(&self.apexes[i])),
            _ => (self.onsets[i].clone(), self.apexes[i].clone()),
        };
        let (o, a) = (normalize(&o, cfg), normalize(&a, cfg));
        Ok((difference_frame(&o, &a)?, o))
    }

    /// Stacked `(diff, onset)` tensors for the samples `idx`.
    pub fn batch<T: Scalar>(&self, idx: &[usize], draws: Option<&[AugmentDraw]>) -> Result<(Tensor<T>, Tensor<T>)> {
        let pairs = idx
            .iter()
            .enumerate()
            .map(|(k, &i)| self.pair(i, draws.map(|d| &d[k])))
            .collect::<Result<Vec<_>>>()?;
        let diffs: Vec<&Image> = pairs.iter().map(|p| &p.0).collect();
        let onsets: Vec<&Image> = pairs.iter().map(|p| &p.1).collect();
        Ok((stack_batch(&diffs)?, stack_batch(&onsets)?))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub optimizer: AdamW<T>,
    pub log: Vec<EpochRecord>,
}

/// Trains `model` in place on `train_idx`. Shuffling and augmentation draw
/// from `rng`, so `(model init, rng, data, cfg)` fix the trajectory.
/// `on_epoch` sees each record as soon as the epoch ends.
pub fn train<T: Scalar>(
    model: &mut TsfModel<T>,
    data: &PreparedData,
    train_idx: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_idx.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    if data.n_classes != model.n_classes() {
        return Err(Error::Config(format!(
            "data has {} classes, model has {}",
            data.n_classes,
            model.n_classes()
        )));
    }
    let mode = model.mode;
    let pad = data.preprocess.crop_padding;
    let mut optimizer = AdamW::new(&model.store);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order = train_idx.to_vec();
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg)?;
        order.shuffle(rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let draws: Vec<AugmentDraw> = chunk.iter().map(|_| AugmentDraw::sample(pad, rng)).collect();
            let (diff, onset) = data.batch::<T>(chunk, Some(&draws))?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (loss, grads, updates) = {
                let mut g: Graph<'_, T> = model.graph(true);
                let d = g.input(diff);
                let o = g.input(onset);
                let out = model.forward(&mut g, d, o, mode)?;
                let mean_loss = g.cross_entropy(out.logits, &labels)?;
                let loss = g.value(mean_loss).data()[0].as_f64();
                let loss_var = match cfg.loss_reduction {
                    LossReduction::Mean => mean_loss,
                    LossReduction::Sum => g.scale(mean_loss, T::lit(labels.len() as f64)),
                };
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
                }
                let logits = g.value(out.logits);
                let c = logits.shape()[1];
                correct += labels
                    .iter()
                    .enumerate()
                    .filter(|&(r, &y)| argmax(&logits.data()[r * c..(r + 1) * c]) == y)
                    .count();
                let grads = g.backward(loss_var)?.params(&g);
                (loss, grads, g.take_buffer_updates())
            };
            Graph::apply_buffer_updates(&mut model.store, updates);
            adamw_step(&mut model.store, &grads, &mut optimizer, lr, cfg)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let rec = EpochRecord {
            epoch,
            lr,
            loss: loss_sum / order.len() as f64,
            train_acc: correct as f64 / order.len() as f64,
        };
        log::debug!("epoch {epoch}: lr {lr:.3e} loss {:.4} acc {:.3}", rec.loss, rec.train_acc);
        on_epoch(&rec)?;
        log.push(rec);
    }
    Ok(TrainOutcome { optimizer, log })
}

/// Eval-mode class predictions for `idx`, in order.
pub fn predict<T: Scalar>(model: &TsfModel<T>, data: &PreparedData, idx: &[usize], batch_size: usize) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (diff, onset) = data.batch::<T>(chunk, None)?;
        let logits = model.predict_logits(&diff, &onset)?;
        let c = logits.shape()[1];
        preds.extend(logits.data().chunks_exact(c).map(argmax));
    }
    Ok(preds)
}

/// Fraction of `idx` whose eval-mode prediction matches its label.
pub fn accuracy<T: Scalar>(model: &TsfModel<T>, data: &PreparedData, idx: &[usize], batch_size: usize) -> Result<f64> {
    let preds = predict(model, data, idx, batch_size)?;
    let hits = preds.iter().zip(idx).filter(|&(&p, &i)| p == data.labels[i]).count();
    Ok(hits as f64 / idx.len().max(1) as f64)
}
