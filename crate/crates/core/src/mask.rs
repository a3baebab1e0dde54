//! Binary masks, run-length encoding and 8-bit PNG mask I/O.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Row-major binary mask.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Mask({}×{}, area {})", self.height, self.width, self.area())
    }
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height * width != data.len() || height == 0 || width == 0 {
            return Err(dim_err(format!(
                "mask {height}×{width} needs {} pixels, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    /// Thresholds probabilities (`>= threshold` is foreground).
    pub fn from_probabilities(height: usize, width: usize, probs: &[f32], threshold: f32) -> Result<Self> {
        Self::new(height, width, probs.iter().map(|&p| p >= threshold).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }

    pub fn check_same_shape(&self, other: &Mask) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(dim_err(format!("mask shapes {:?} and {:?} differ", self.shape(), other.shape())))
        }
    }

    /// Smallest `(r0, c0, r1, c1)` box containing every foreground pixel.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    bb = Some(match bb {
                        None => (r, c, r, c),
                        Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
                    });
                }
            }
        }
        bb
    }

    /// Nearest-neighbour resample to `height × width`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        Mask::from_fn(height, width, |r, c| {
            let sr = ((r as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            let sc = ((c as f64 + 0.5) * self.width as f64 / width as f64) as usize;
            self.get(sr.min(self.height - 1), sc.min(self.width - 1))
        })
    }

    pub fn to_rle(&self) -> Rle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &v in &self.data {
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
        counts.push(run);
        Rle { size: [self.height, self.width], counts }
    }

    /// Reads an 8-bit image; any nonzero luma is foreground.
    pub fn load_png(path: &Path) -> Result<Mask> {
        let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        Self::from_luma(img)
    }

    /// [`Mask::load_png`] over in-memory PNG or JPEG bytes.
    pub fn decode_png(bytes: &[u8]) -> Result<Mask> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::Image(format!("mask decode failed: {e}")))?;
        Self::from_luma(img)
    }

    fn from_luma(img: image::DynamicImage) -> Result<Mask> {
        let img = img.to_luma8();
        let (w, h) = img.dimensions();
        Mask::new(h as usize, w as usize, img.pixels().map(|p| p.0[0] != 0).collect())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::GrayImage::from_fn(self.width as u32, self.height as u32, |c, r| {
            image::Luma([if self.get(r as usize, c as usize) { 255 } else { 0 }])
        });
        img.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

/// Uncompressed run-length encoding over row-major pixel order. Runs
/// alternate background/foreground and always start with background (the
/// first count may be zero).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn decode(&self) -> Result<Mask> {
        let [h, w] = self.size;
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if total != (h * w) as u64 {
            return Err(Error::Validation(format!(
                "RLE counts sum to {total}, expected {h}×{w} = {}",
                h * w
            )));
        }
        let mut data = Vec::with_capacity(h * w);
        for (i, &c) in self.counts.iter().enumerate() {
            data.extend(std::iter::repeat(i % 2 == 1).take(c as usize));
        }
        Mask::new(h, w, data)
    }
}

pub(crate) mod rle_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::{Mask, Rle};

    pub fn serialize<S: Serializer>(mask: &Option<Mask>, s: S) -> Result<S::Ok, S::Error> {
        mask.as_ref().map(Mask::to_rle).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Mask>, D::Error> {
        Option::<Rle>::deserialize(d)?
            .map(|rle| rle.decode().map_err(serde::de::Error::custom))
            .transpose()
    }
}
