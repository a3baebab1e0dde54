//! Image decoding, resizing and normalization.

use std::path::Path;

use image::{DynamicImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    /// Keep aspect ratio, then zero-pad bottom and right.
    Train,
    /// Stretch both sides to the target.
    Test,
}

/// `3×H×W` tensor in `[0, 1]`.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("image has positive extent")
}

pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let &[3, h, w] = t.shape() else {
        return Err(Error::Dimension(format!("expected 3×H×W, got {:?}", t.shape())));
    };
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb(std::array::from_fn(|c| (d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    }))
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Image(format!("image decode failed: {e}")))?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Image("image decode failed: empty image".into()));
    }
    Ok(rgb_to_tensor(&DynamicImage::to_rgb8(&img)))
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

pub fn save_image(t: &Tensor<f32>, path: &Path) -> Result<()> {
    tensor_to_rgb(t)?
        .save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Per-channel ImageNet standardization of a `[0, 1]` image.
pub fn normalize(img: &Tensor<f32>) -> Tensor<f32> {
    let plane = img.len() / 3;
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = i / plane;
        *v = (*v - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
    }
    out
}

/// Test-mode resize followed by normalization: the model input for an image.
pub fn model_input(img: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let s = img.shape();
    let resized = if s[1] == size && s[2] == size { img.clone() } else { img.resize_bilinear(size, size)? };
    Ok(normalize(&resized))
}

/// Resizes an image and its mask to `target` per `mode`.
pub fn resize_and_pad(img: &Tensor<f32>, mask: &Mask, target: usize, mode: ResizeMode) -> Result<(Tensor<f32>, Mask)> {
    if target == 0 {
        return Err(Error::Validation("resize target must be positive".into()));
    }
    let &[3, h, w] = img.shape() else {
        return Err(Error::Dimension(format!("expected 3×H×W, got {:?}", img.shape())));
    };
    if mask.shape() != (h, w) {
        return Err(Error::Dimension(format!("mask {:?} does not match image {h}×{w}", mask.shape())));
    }
    let (nh, nw) = match mode {
        ResizeMode::Test => (target, target),
        ResizeMode::Train => {
            let scale = target as f64 / h.max(w) as f64;
            let r = |v: usize| ((v as f64 * scale).round() as usize).clamp(1, target);
            (r(h), r(w))
        }
    };
    let content = if (nh, nw) == (h, w) { img.clone() } else { img.resize_bilinear(nh, nw)? };
    let content_mask = mask.resize_nearest(nh, nw);
    if (nh, nw) == (target, target) {
        return Ok((content, content_mask));
    }
    let mut out = Tensor::zeros(&[3, target, target]);
    let src = content.data();
    let dst = out.data_mut();
    for c in 0..3 {
        for r in 0..nh {
            let s = c * nh * nw + r * nw;
            let d = c * target * target + r * target;
            dst[d..d + nw].copy_from_slice(&src[s..s + nw]);
        }
    }
    let padded = Mask::from_fn(target, target, |r, c| r < nh && c < nw && content_mask.get(r, c));
    Ok((out, padded))
}
