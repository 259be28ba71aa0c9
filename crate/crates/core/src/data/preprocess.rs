//! Resize, paired augmentation, normalization and frame differencing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_size: usize,
    pub train_augment: bool,
    /// Zero padding added on every side before the random crop.
    pub crop_padding: usize,
    pub rng_seed: u64,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl PreprocessConfig {
    /// Defaults for `target_size`, with crop padding scaled from 8 px at 224.
    pub fn for_size(target_size: usize) -> Self {
        Self {
            target_size,
            train_augment: true,
            crop_padding: (8.0 * target_size as f64 / 224.0).round() as usize,
            rng_seed: 0,
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::Config("target_size must be positive".into()));
        }
        if self.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self::for_size(224)
    }
}

/// One sample's augmentation decision, shared by its onset and apex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentDraw {
    pub flip: bool,
    /// Crop offsets into the padded image, each in `0..=2·crop_padding`.
    pub dx: usize,
    pub dy: usize,
    pub pad: usize,
}

impl AugmentDraw {
    /// The geometry-preserving draw: no flip, centred crop.
    pub fn identity(pad: usize) -> Self {
        Self {
            flip: false,
            dx: pad,
            dy: pad,
            pad,
        }
    }

    pub fn sample<R: Rng + ?Sized>(pad: usize, rng: &mut R) -> Self {
        Self {
            flip: rng.random_bool(0.5),
            dx: rng.random_range(0..=2 * pad),
            dy: rng.random_range(0..=2 * pad),
            pad,
        }
    }

    /// Flip then pad-and-crop; output has the input's size.
    pub fn apply(&self, img: &Image) -> Image {
        let src = if self.flip { img.flip_horizontal() } else { img.clone() };
        if self.dx == self.pad && self.dy == self.pad {
            return src;
        }
        let (c, h, w) = src.dims();
        let mut out = Image::filled(c, h, w, 0.0);
        for ch in 0..c {
            for y in 0..h {
                let sy = (y + self.dy) as isize - self.pad as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let sx = (x + self.dx) as isize - self.pad as isize;
                    if sx >= 0 && sx < w as isize {
                        out.set(ch, y, x, src.get(ch, sy as usize, sx as usize));
                    }
                }
            }
        }
        out
    }
}

pub fn resize_to_target(img: &Image, cfg: &PreprocessConfig) -> Image {
    img.resize(cfg.target_size, cfg.target_size)
}

/// Per-channel `(v − mean) / std`; channels beyond the third reuse the last entry.
pub fn normalize(img: &Image, cfg: &PreprocessConfig) -> Image {
    let (c, h, w) = img.dims();
    let mut out = img.clone();
    let plane = h * w;
    for ch in 0..c {
        let (m, s) = (cfg.mean[ch.min(2)], cfg.std[ch.min(2)]);
        for v in &mut out.data_mut()[ch * plane..(ch + 1) * plane] {
            *v = (*v - m) / s;
        }
    }
    out
}

/// Resize to `target_size²`, augment with `draw` when training with
/// augmentation enabled, then normalize.
pub fn preprocess(img: &Image, cfg: &PreprocessConfig, train: bool, draw: &AugmentDraw) -> Image {
    let resized = resize_to_target(img, cfg);
    let geom = if train && cfg.train_augment {
        draw.apply(&resized)
    } else {
        resized
    };
    normalize(&geom, cfg)
}

/// `apex − onset`, pixelwise.
pub fn difference_frame(onset: &Image, apex: &Image) -> Result<Image> {
    if onset.dims() != apex.dims() {
        return Err(Error::shape(
            "difference_frame",
            format!("{:?} vs {:?}", onset.dims(), apex.dims()),
        ));
    }
    let (c, h, w) = onset.dims();
    let data = apex.data().iter().zip(onset.data()).map(|(a, o)| a - o).collect();
    Image::new(c, h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Image {
        Image::new(c, h, w, (0..c * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn difference_is_arithmetic_and_antisymmetric() {
        let o = Image::filled(3, 2, 2, 0.2);
        let a = Image::filled(3, 2, 2, 0.5);
        let d = difference_frame(&o, &a).unwrap();
        assert!(d.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
        assert!(difference_frame(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (x, y) = (random_image(&mut rng, 3, 5, 4), random_image(&mut rng, 3, 5, 4));
            let dxy = difference_frame(&x, &y).unwrap();
            let dyx = difference_frame(&y, &x).unwrap();
            assert!(dxy.data().iter().zip(dyx.data()).all(|(p, q)| *p == -*q));
            assert!(dxy.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert!(difference_frame(&o, &Image::filled(3, 2, 3, 0.0)).is_err());
    }

    #[test]
    fn eval_mode_only_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 3, 224, 224);
        let cfg = PreprocessConfig::default();
        let draw = AugmentDraw::sample(cfg.crop_padding, &mut rng);
        let out = preprocess(&img, &cfg, false, &draw);
        for (a, b) in img.data().iter().zip(out.data()) {
            assert_eq!(*b, (*a - 0.5) / 0.5);
        }
    }

    #[test]
    fn resizes_to_target() {
        let img = Image::filled(3, 448, 448, 0.7);
        let out = preprocess(&img, &PreprocessConfig::default(), false, &AugmentDraw::identity(8));
        assert_eq!(out.dims(), (3, 224, 224));
    }

    #[test]
    fn default_padding_scales_with_size() {
        assert_eq!(PreprocessConfig::for_size(224).crop_padding, 8);
        assert_eq!(PreprocessConfig::for_size(112).crop_padding, 4);
        assert_eq!(PreprocessConfig::for_size(32).crop_padding, 1);
    }

    #[test]
    fn seeded_augmentation_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 3, 40, 40);
        let cfg = PreprocessConfig::for_size(32);
        let run = || {
            let mut r = ChaCha8Rng::seed_from_u64(99);
            let d = AugmentDraw::sample(4, &mut r);
            preprocess(&img, &cfg, true, &d)
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn crop_shifts_content() {
        let img = Image::new(1, 2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let draw = AugmentDraw {
            flip: false,
            dx: 2,
            dy: 1,
            pad: 1,
        };
        // out(y, x) = img(y + dy − pad, x + dx − pad) = img(y, x + 1)
        assert_eq!(draw.apply(&img).data(), &[2., 3., 0., 5., 6., 0.]);
    }

    #[test]
    fn shared_flip_commutes_with_differencing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = PreprocessConfig {
            mean: [0.0; 3],
            std: [1.0; 3],
            ..PreprocessConfig::for_size(16)
        };
        for _ in 0..10 {
            let (o, a) = (random_image(&mut rng, 3, 16, 16), random_image(&mut rng, 3, 16, 16));
            let draw = AugmentDraw {
                flip: true,
                ..AugmentDraw::identity(cfg.crop_padding)
            };
            let lhs = difference_frame(&preprocess(&o, &cfg, true, &draw), &preprocess(&a, &cfg, true, &draw)).unwrap();
            let rhs = preprocess(&difference_frame(&o, &a).unwrap(), &cfg, true, &draw);
            for (x, y) in lhs.data().iter().zip(rhs.data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
