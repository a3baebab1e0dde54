//! Click simulation against ground truth.
//!
//! Error regions are 8-connected components of the false-negative and
//! false-positive pixels. A click goes to the region pixel farthest (in exact
//! Euclidean distance) from the rest of the image; ties resolve to the
//! smallest row-major index.

use std::collections::VecDeque;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::prompt::{Click, Polarity};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// Predicted foreground on ground-truth background.
    FalsePositive,
    /// Missed ground-truth foreground.
    FalseNegative,
}

impl ErrorKind {
    pub fn polarity(self) -> Polarity {
        match self {
            ErrorKind::FalseNegative => Polarity::Positive,
            ErrorKind::FalsePositive => Polarity::Negative,
        }
    }
}

/// One 8-connected component of misclassified pixels of a single kind.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ErrorRegion {
    pub kind: ErrorKind,
    /// Member pixels in row-major order.
    pub pixels: Vec<(usize, usize)>,
    /// Extent of the image the region lives in.
    pub image_shape: (usize, usize),
}

impl ErrorRegion {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    /// Smallest row-major pixel of the region.
    pub fn seed(&self) -> (usize, usize) {
        self.pixels[0]
    }
}

/// Result of one iterative simulation step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NextClick {
    Click(Click),
    /// Prediction already equals the ground truth.
    Converged,
}

/// 8-connected components of `mask`, ordered by their smallest row-major pixel.
pub fn connected_components(mask: &Mask) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.shape();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if seen[start] || !mask.data()[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(p) = queue.pop_front() {
            let (r, c) = (p / w, p % w);
            comp.push((r, c));
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (y, x) = (r as i64 + dr, c as i64 + dc);
                    if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                        continue;
                    }
                    let q = y as usize * w + x as usize;
                    if !seen[q] && mask.data()[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Connected error regions of `pred` against `gt`, false negatives first.
pub fn error_regions(pred: &Mask, gt: &Mask) -> Result<Vec<ErrorRegion>> {
    pred.check_same_shape(gt)?;
    let (h, w) = gt.shape();
    let fn_mask = Mask::from_fn(h, w, |r, c| gt.get(r, c) && !pred.get(r, c));
    let fp_mask = Mask::from_fn(h, w, |r, c| pred.get(r, c) && !gt.get(r, c));
    let mut regions = Vec::new();
    for (kind, m) in [(ErrorKind::FalseNegative, fn_mask), (ErrorKind::FalsePositive, fp_mask)] {
        regions.extend(
            connected_components(&m)
                .into_iter()
                .map(|pixels| ErrorRegion { kind, pixels, image_shape: (h, w) }),
        );
    }
    Ok(regions)
}

/// Squared Euclidean distance from every pixel to the nearest pixel where
/// `feature` is true. Pixels are `u64::MAX` when there is no feature pixel.
pub fn squared_distance_transform(feature: &Mask) -> Vec<u64> {
    let (h, w) = feature.shape();
    const INF: f64 = f64::INFINITY;
    let mut grid: Vec<f64> = feature.data().iter().map(|&f| if f { 0.0 } else { INF }).collect();
    let mut buf = vec![0.0; h.max(w)];
    let mut out = vec![0.0; h.max(w)];
    for c in 0..w {
        for r in 0..h {
            buf[r] = grid[r * w + c];
        }
        edt_1d(&buf[..h], &mut out[..h]);
        for r in 0..h {
            grid[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        buf[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        edt_1d(&buf[..w], &mut out[..w]);
        grid[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
    grid.into_iter().map(|d| if d.is_finite() { d as u64 } else { u64::MAX }).collect()
}

/// Lower envelope of parabolas (Felzenszwalb & Huttenlocher).
fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(p) => p,
        None => {
            d.fill(f64::INFINITY);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *dq = diff * diff + f[p];
    }
}

/// The region pixel maximizing distance to the region's complement within
/// the image. When the region covers the whole image, the image border is
/// treated as the complement instead.
pub fn click_from_region(region: &ErrorRegion) -> Result<Click> {
    if region.pixels.is_empty() {
        return Err(Error::Contract("cannot place a click in an empty region".into()));
    }
    let (h, w) = region.image_shape;
    let mut inside = Mask::empty(h, w);
    for &(r, c) in &region.pixels {
        inside.set(r, c, true);
    }
    let complement = Mask::from_fn(h, w, |r, c| !inside.get(r, c));
    let dist: Vec<u64> = if complement.is_empty() {
        (0..h * w)
            .map(|i| {
                let (r, c) = ((i / w) as u64, (i % w) as u64);
                let m = (r + 1).min(h as u64 - r).min(c + 1).min(w as u64 - c);
                m * m
            })
            .collect()
    } else {
        squared_distance_transform(&complement)
    };
    let mut best = region.pixels[0];
    let mut best_d = dist[best.0 * w + best.1];
    for &(r, c) in &region.pixels[1..] {
        let d = dist[r * w + c];
        if d > best_d {
            best = (r, c);
            best_d = d;
        }
    }
    Ok(Click { row: best.0 as i64, col: best.1 as i64, polarity: region.kind.polarity() })
}

/// Picks the largest error region (ties: false negatives first, then the
/// smallest seed pixel) and clicks at its center.
pub fn select_region(regions: &[ErrorRegion]) -> Option<&ErrorRegion> {
    regions.iter().min_by(|a, b| {
        b.area()
            .cmp(&a.area())
            .then_with(|| kind_rank(a.kind).cmp(&kind_rank(b.kind)))
            .then_with(|| a.seed().cmp(&b.seed()))
    })
}

fn kind_rank(k: ErrorKind) -> u8 {
    match k {
        ErrorKind::FalseNegative => 0,
        ErrorKind::FalsePositive => 1,
    }
}

pub fn simulate_iterative(pred: &Mask, gt: &Mask) -> Result<NextClick> {
    let regions = error_regions(pred, gt)?;
    match select_region(&regions) {
        None => Ok(NextClick::Converged),
        Some(region) => Ok(NextClick::Click(click_from_region(region)?)),
    }
}

/// Samples `n_pos` distinct foreground and `n_neg` distinct background
/// pixels, deterministically per seed.
pub fn simulate_random(gt: &Mask, n_pos: usize, n_neg: usize, seed: u64) -> Result<Vec<Click>> {
    let w = gt.width();
    let fg: Vec<usize> = (0..gt.data().len()).filter(|&i| gt.data()[i]).collect();
    let bg: Vec<usize> = (0..gt.data().len()).filter(|&i| !gt.data()[i]).collect();
    if n_pos > fg.len() {
        return Err(Error::Validation(format!(
            "{n_pos} positive clicks requested but foreground has {} pixels",
            fg.len()
        )));
    }
    if n_neg > bg.len() {
        return Err(Error::Validation(format!(
            "{n_neg} negative clicks requested but background has {} pixels",
            bg.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clicks = Vec::with_capacity(n_pos + n_neg);
    for i in index::sample(&mut rng, fg.len(), n_pos) {
        let p = fg[i];
        clicks.push(Click::positive((p / w) as i64, (p % w) as i64));
    }
    for i in index::sample(&mut rng, bg.len(), n_neg) {
        let p = bg[i];
        clicks.push(Click::negative((p / w) as i64, (p % w) as i64));
    }
    Ok(clicks)
}
