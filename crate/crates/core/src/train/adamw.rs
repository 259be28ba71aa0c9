use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

/// First and second moments per parameter slot (`None` for buffers) and
/// the number of steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub step: u64,
    pub m: Vec<Option<Tensor<T>>>,
    pub v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| e.trainable.then(|| Tensor::zeros(e.value.shape())))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One decoupled-weight-decay Adam update. Every gradient is checked for
/// finiteness before any weight changes; trainable parameters without a
/// gradient only decay.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamW<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::shape(
            "adamw",
            format!("{} grads, {} params, {} moments", grads.len(), store.len(), state.m.len()),
        ));
    }
    for (id, g) in store.ids().zip(grads) {
        let Some(g) = g else { continue };
        if g.shape() != store.get(id).shape() {
            return Err(Error::shape("adamw", format!("gradient for {}", store.entry(id).name)));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", store.entry(id).name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = T::lit(1.0 - b1.powi(t));
    let bc2 = T::lit(1.0 - b2.powi(t));
    let (b1, b2) = (T::lit(b1), T::lit(b2));
    let (one, lr_t, eps) = (T::one(), T::lit(lr), T::lit(cfg.adam_eps));
    let shrink = T::lit(1.0 - lr * cfg.weight_decay);
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        let i = id.index();
        let (Some(m), Some(v)) = (state.m[i].as_mut(), state.v[i].as_mut()) else {
            return Err(Error::Checkpoint(format!("no optimizer state for {}", store.entry(id).name)));
        };
        let w = store.get_mut(id).data_mut();
        match &grads[i] {
            Some(g) => {
                for (((w, m), v), &g) in w.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                    *w *= shrink;
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= lr_t * mhat / (vhat.sqrt() + eps);
                }
            }
            None => w.iter_mut().for_each(|w| *w *= shrink),
        }
    }
    Ok(())
}
