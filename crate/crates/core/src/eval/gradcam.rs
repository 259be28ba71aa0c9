//! Grad-CAM on the fused pre-head feature map.

use crate::data::Image;
use crate::error::{Error, Result};
use crate::fusion::TsfModel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Low-resolution class activation map plus its upsampled version.
#[derive(Debug, Clone)]
pub struct Heatmap {
    /// `(h, w)` map over the fused feature grid, in `[0, 1]`.
    pub grid: Image,
    /// Bilinear upsampling of `grid` to the input resolution.
    pub full: Image,
    pub target: usize,
}

impl Heatmap {
    /// `(x, y)` of the brightest upsampled pixel; ties go to the first in
    /// raster order.
    pub fn peak(&self) -> (usize, usize) {
        let w = self.full.width();
        let (i, _) = self
            .full
            .data()
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        (i % w, i / w)
    }
}

/// Channel weights are spatial means of `grad`; the map is
/// `ReLU(Σ_c w_c · A_c)` min-max scaled to `[0, 1]`. A constant map becomes
/// all ones when positive and all zeros otherwise.
pub fn cam_from<T: Scalar>(activations: &Tensor<T>, grad: &Tensor<T>) -> Result<Image> {
    let &[1, c, h, w] = activations.shape() else {
        return Err(Error::shape("gradcam", format!("expected one (1, C, h, w) map, got {:?}", activations.shape())));
    };
    if grad.shape() != activations.shape() {
        return Err(Error::shape("gradcam", "gradient and activation shapes differ"));
    }
    let plane = h * w;
    let (a, g) = (activations.data(), grad.data());
    let mut cam = vec![0.0f64; plane];
    for ch in 0..c {
        let gs = &g[ch * plane..(ch + 1) * plane];
        let weight = gs.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64;
        for (dst, &v) in cam.iter_mut().zip(&a[ch * plane..(ch + 1) * plane]) {
            *dst += weight * v.as_f64();
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let (lo, hi) = cam.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = hi - lo;
    let data = if range > 1e-12 * hi.abs().max(1.0) {
        cam.iter().map(|&v| ((v - lo) / range) as f32).collect()
    } else {
        vec![if hi > 0.0 { 1.0 } else { 0.0 }; plane]
    };
    Image::new(1, h, w, data)
}

/// Grad-CAM for one `(diff, onset)` sample, each `(1, 3, S, S)`, towards
/// `target`. Runs the model in evaluation mode.
pub fn gradcam<T: Scalar>(model: &TsfModel<T>, diff: &Tensor<T>, onset: &Tensor<T>, target: usize) -> Result<Heatmap> {
    if target >= model.n_classes() {
        return Err(Error::LabelRange {
            label: target,
            classes: model.n_classes(),
        });
    }
    if diff.shape().first() != Some(&1) {
        return Err(Error::shape("gradcam", "expects a batch of one"));
    }
    let mut g = model.graph(false);
    let (d, o) = (g.input(diff.clone()), g.input(onset.clone()));
    let out = model.forward(&mut g, d, o, model.mode)?;
    let mut onehot = Tensor::zeros(g.shape(out.logits));
    onehot.data_mut()[target] = T::one();
    let score = g.weighted_sum(out.logits, onehot)?;
    let grads = g.backward(score)?;
    let fused = g.value(out.fused);
    let grad = grads.get(out.fused).cloned().unwrap_or_else(|| Tensor::zeros(fused.shape()));
    let grid = cam_from(fused, &grad)?;
    let size = diff.shape()[2..].to_vec();
    let full = grid.resize(size[0], size[1]);
    let full = Image::new(1, size[0], size[1], full.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
    Ok(Heatmap { grid, full, target })
}

/// Blue-to-red colour map of `heat` alpha-blended over `base` (RGB in `[0, 1]`).
pub fn overlay(base: &Image, heat: &Image, alpha: f32) -> Result<Image> {
    let (c, h, w) = base.dims();
    if c != 3 || heat.dims() != (1, h, w) {
        return Err(Error::shape("overlay", format!("{:?} over {:?}", heat.dims(), base.dims())));
    }
    let mut out = base.clone();
    for y in 0..h {
        for x in 0..w {
            let t = heat.get(0, y, x);
            let colour = [
                (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0),
                (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0),
                (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0),
            ];
            for (ch, col) in colour.into_iter().enumerate() {
                let v = (1.0 - alpha) * base.get(ch, y, x) + alpha * col;
                out.set(ch, y, x, v);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{FusionMode, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_gradient_on_constant_map_is_uniform() {
        let a = Tensor::<f64>::full(&[1, 4, 3, 3], 0.7);
        let g = Tensor::<f64>::full(&[1, 4, 3, 3], 0.2);
        let cam = cam_from(&a, &g).unwrap();
        assert!(cam.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn cam_picks_the_weighted_channel() {
        // Channel 0 peaks at (0, 1) and has positive weight; channel 1 is
        // suppressed by a negative weight.
        let mut a = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        a.data_mut()[1] = 3.0;
        a.data_mut()[4 + 2] = 5.0;
        let mut g = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        g.data_mut()[..4].fill(1.0);
        g.data_mut()[4..].fill(-1.0);
        let cam = cam_from(&a, &g).unwrap();
        assert_eq!(cam.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn model_heatmap_has_input_size_and_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = TsfModel::<f32>::new(ModelConfig::tiny(3), FusionMode::LateTS, &mut rng).unwrap();
        let d = Tensor::randn(&[1, 3, 32, 32], 0.3, &mut rng);
        let o = Tensor::randn(&[1, 3, 32, 32], 1.0, &mut rng);
        let h = gradcam(&model, &d, &o, 2).unwrap();
        assert_eq!(h.full.dims(), (1, 32, 32));
        assert_eq!(h.grid.dims(), (1, 4, 4));
        assert!(h.full.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(gradcam(&model, &d, &o, 3).is_err());
        let base = Image::filled(3, 32, 32, 0.5);
        assert_eq!(overlay(&base, &h.full, 0.5).unwrap().dims(), (3, 32, 32));
    }
}
