//! Geometric and photometric augmentation applied jointly to image and mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::mask::Mask;
use crate::tensor::Tensor;

/// Uniform scale range of the resize jitter.
pub const RESIZE_JITTER: (f64, f64) = (0.75, 1.4);
/// Maximum shift as a fraction of the side.
pub const SSR_SHIFT: f64 = 0.0625;
/// Maximum relative scale change.
pub const SSR_SCALE: f64 = 0.1;
/// Maximum rotation in degrees.
pub const SSR_ROTATE_DEG: f64 = 15.0;
/// Per-channel gain is drawn from `1 ± CONTRAST`.
pub const CONTRAST: f32 = 0.2;
/// Per-channel bias is drawn from `± BRIGHTNESS`.
pub const BRIGHTNESS: f32 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub resize_jitter: bool,
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
    pub shift_scale_rotate: bool,
    pub brightness_contrast: bool,
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self {
            resize_jitter: true,
            hflip: true,
            vflip: true,
            rot90: true,
            shift_scale_rotate: true,
            brightness_contrast: true,
        }
    }

    pub fn is_noop(&self) -> bool {
        *self == Self::none()
    }
}

pub fn hflip(img: &Tensor<f32>, mask: &Mask) -> (Tensor<f32>, Mask) {
    let (h, w) = mask.shape();
    let out = remap(img, h, w, |r, c| (r, w - 1 - c));
    (out, Mask::from_fn(h, w, |r, c| mask.get(r, w - 1 - c)))
}

pub fn vflip(img: &Tensor<f32>, mask: &Mask) -> (Tensor<f32>, Mask) {
    let (h, w) = mask.shape();
    let out = remap(img, h, w, |r, c| (h - 1 - r, c));
    (out, Mask::from_fn(h, w, |r, c| mask.get(h - 1 - r, c)))
}

/// Counter-clockwise rotation by 90 degrees; the output is `W×H`.
pub fn rot90(img: &Tensor<f32>, mask: &Mask) -> (Tensor<f32>, Mask) {
    let (h, w) = mask.shape();
    let out = remap(img, w, h, |r, c| (c, w - 1 - r));
    (out, Mask::from_fn(w, h, |r, c| mask.get(c, w - 1 - r)))
}

fn remap(img: &Tensor<f32>, oh: usize, ow: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Tensor<f32> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let d = img.data();
    let mut out = vec![0f32; 3 * oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let (sr, sc) = src(r, c);
            for ch in 0..3 {
                out[ch * oh * ow + r * ow + c] = d[ch * h * w + sr * w + sc];
            }
        }
    }
    Tensor::new(&[3, oh, ow], out).expect("positive extent")
}

/// Inverse affine warp: output pixel center `p` samples the input at `a·p + t`.
/// Bilinear for the image, nearest for the mask, zero outside.
pub fn warp_affine(img: &Tensor<f32>, mask: &Mask, a: [[f64; 2]; 2], t: [f64; 2]) -> (Tensor<f32>, Mask) {
    let (h, w) = mask.shape();
    let d = img.data();
    let mut out = vec![0f32; 3 * h * w];
    let mut m = Mask::empty(h, w);
    for r in 0..h {
        for c in 0..w {
            let (py, px) = (r as f64 + 0.5, c as f64 + 0.5);
            let sy = a[0][0] * py + a[0][1] * px + t[0] - 0.5;
            let sx = a[1][0] * py + a[1][1] * px + t[1] - 0.5;
            let (ny, nx) = (sy.round(), sx.round());
            if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
                m.set(r, c, mask.get(ny as usize, nx as usize));
            }
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
            let tap = |yy: f64, xx: f64, ch: usize| -> f32 {
                if yy < 0.0 || xx < 0.0 || yy as usize >= h || xx as usize >= w {
                    0.0
                } else {
                    d[ch * h * w + yy as usize * w + xx as usize]
                }
            };
            for ch in 0..3 {
                let top = tap(y0, x0, ch) * (1.0 - fx) + tap(y0, x0 + 1.0, ch) * fx;
                let bot = tap(y0 + 1.0, x0, ch) * (1.0 - fx) + tap(y0 + 1.0, x0 + 1.0, ch) * fx;
                out[ch * h * w + r * w + c] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    (Tensor::new(&[3, h, w], out).expect("positive extent"), m)
}

/// Scale `s` and rotation `theta` about the image center, then a shift.
fn similarity(h: usize, w: usize, s: f64, theta: f64, shift: [f64; 2]) -> ([[f64; 2]; 2], [f64; 2]) {
    // Forward map: q = s·R·(p − c) + c + shift. Invert for sampling.
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let (sin, cos) = theta.sin_cos();
    let a = [[cos / s, sin / s], [-sin / s, cos / s]];
    let qy = cy + shift[0];
    let qx = cx + shift[1];
    let t = [cy - (a[0][0] * qy + a[0][1] * qx), cx - (a[1][0] * qy + a[1][1] * qx)];
    (a, t)
}

/// Applies the enabled augmentations in a fixed order, driven by `seed`.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = sample.image.clone();
    let mut mask = sample.gt.clone();
    let (h, w) = mask.shape();
    if cfg.resize_jitter {
        let s = rng.gen_range(RESIZE_JITTER.0..=RESIZE_JITTER.1);
        // Random placement of the rescaled content inside the frame.
        let slack = |n: usize| (n as f64 * (s - 1.0)).abs() / 2.0;
        let sy = rng.gen_range(-1.0..=1.0) * slack(h);
        let sx = rng.gen_range(-1.0..=1.0) * slack(w);
        let (a, t) = similarity(h, w, s, 0.0, [sy, sx]);
        (img, mask) = warp_affine(&img, &mask, a, t);
    }
    if cfg.hflip && rng.gen_bool(0.5) {
        (img, mask) = hflip(&img, &mask);
    }
    if cfg.vflip && rng.gen_bool(0.5) {
        (img, mask) = vflip(&img, &mask);
    }
    if cfg.rot90 {
        for _ in 0..rng.gen_range(0..4) {
            (img, mask) = rot90(&img, &mask);
        }
    }
    if cfg.shift_scale_rotate {
        let (h, w) = mask.shape();
        let s = 1.0 + rng.gen_range(-SSR_SCALE..=SSR_SCALE);
        let theta = rng.gen_range(-SSR_ROTATE_DEG..=SSR_ROTATE_DEG).to_radians();
        let shift = [
            rng.gen_range(-SSR_SHIFT..=SSR_SHIFT) * h as f64,
            rng.gen_range(-SSR_SHIFT..=SSR_SHIFT) * w as f64,
        ];
        let (a, t) = similarity(h, w, s, theta, shift);
        (img, mask) = warp_affine(&img, &mask, a, t);
    }
    if cfg.brightness_contrast {
        let plane = img.len() / 3;
        let gains: [f32; 3] = std::array::from_fn(|_| 1.0 + rng.gen_range(-CONTRAST..=CONTRAST));
        let biases: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-BRIGHTNESS..=BRIGHTNESS));
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            let c = i / plane;
            *v = (*v * gains[c] + biases[c]).clamp(0.0, 1.0);
        }
    }
    Sample { id: sample.id.clone(), image: img, gt: mask, prompts: sample.prompts.clone() }
}
