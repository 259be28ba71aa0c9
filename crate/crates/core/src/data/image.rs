use std::path::Path;

use image::{imageops, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Planar (channel-major) float image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "image",
                format!("{channels}×{height}×{width} needs {} values, got {}", channels * height * width, data.len()),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    /// Decodes any supported raster file as 8-bit RGB scaled to `[0, 1]`.
    pub fn load_rgb(path: &Path) -> std::result::Result<Self, String> {
        let img = image::open(path).map_err(|e| e.to_string())?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
            }
        }
        Ok(Self {
            channels: 3,
            height: h,
            width: w,
            data,
        })
    }

    fn to_u8(v: f32) -> u8 {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }

    /// Writes a 1-channel image as 8-bit grayscale or a 3-channel image as
    /// 8-bit RGB; values are clamped to `[0, 1]`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.channels {
            1 => ImageBuffer::<Luma<u8>, _>::from_fn(w, h, |x, y| Luma([Self::to_u8(self.get(0, y as usize, x as usize))]))
                .save(path),
            3 => ImageBuffer::<Rgb<u8>, _>::from_fn(w, h, |x, y| {
                Rgb([0, 1, 2].map(|c| Self::to_u8(self.get(c, y as usize, x as usize))))
            })
            .save(path),
            c => return Err(Error::Config(format!("cannot save {c}-channel image"))),
        };
        res.map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
    }

    /// Bilinear (triangle filter) resize.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
                ImageBuffer::from_raw(self.width as u32, self.height as u32, self.plane(c).to_vec())
                    .expect("plane length matches dimensions");
            let out = imageops::resize(&buf, width as u32, height as u32, imageops::FilterType::Triangle);
            data.extend_from_slice(out.as_raw());
        }
        Image {
            channels: self.channels,
            height,
            width,
            data,
        }
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }
}

/// Stacks equally sized images into a `(B, C, H, W)` tensor.
pub fn stack_batch<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let Some(first) = images.first() else {
        return Err(Error::Data("empty batch".into()));
    };
    let dims = first.dims();
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if img.dims() != dims {
            return Err(Error::shape("stack_batch", format!("{:?} vs {:?}", img.dims(), dims)));
        }
        data.extend(img.data.iter().map(|&v| T::lit(v as f64)));
    }
    Tensor::from_vec(&[images.len(), dims.0, dims.1, dims.2], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let data: Vec<f32> = (0..3 * 4 * 5).map(|i| (i as f32) / 60.0).collect();
        let img = Image::new(3, 4, 5, data).unwrap();
        img.save_png(&path).unwrap();
        let back = Image::load_rgb(&path).unwrap();
        assert_eq!(back.dims(), (3, 4, 5));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn resize_halves_and_keeps_constants() {
        let img = Image::filled(3, 8, 8, 0.25);
        let r = img.resize(4, 4);
        assert_eq!(r.dims(), (3, 4, 4));
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn flip_is_an_involution() {
        let img = Image::new(1, 2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let f = img.flip_horizontal();
        assert_eq!(f.data(), &[3., 2., 1., 6., 5., 4.]);
        assert_eq!(f.flip_horizontal(), img);
    }
}
