//! Click-based evaluation: mIoU@k, NoC, NoF, SAT latency and reports.

mod diverse;
mod report;

pub use diverse::{derive_prompt, eval_diverse_prompts, PromptMode};
pub use report::{run_benchmark, write_report, BenchConfig, BenchmarkReport, Timings};

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::model::{ImageEmbedding, Model};
use crate::preprocess::normalize;
use crate::prompt::{Click, PromptSet};
use crate::sim::{simulate_iterative, NextClick};
use crate::tensor::Tensor;
use crate::training::Sample;

/// Click cap per sample.
pub const MAX_CLICKS: usize = 20;
pub const IOU_TARGETS: [f64; 2] = [0.90, 0.95];

/// Anything that can embed an image once and answer prompt rounds.
pub trait Segmenter: Sync {
    type Embedding: Send + Sync;

    /// Side of the square input the segmenter expects.
    fn input_size(&self) -> usize;

    /// Click radius used when deriving box and polygon prompts.
    fn click_radius(&self) -> u32;

    /// Identifies the configuration in reports.
    fn fingerprint(&self) -> String;

    /// `image` is `3×S×S` in `[0, 1]`.
    fn embed(&self, image: &Tensor<f32>) -> Result<Self::Embedding>;

    fn segment(&self, emb: &Self::Embedding, prompts: &PromptSet) -> Result<Mask>;
}

impl Segmenter for Model {
    type Embedding = ImageEmbedding;

    fn input_size(&self) -> usize {
        self.config().input_size
    }

    fn click_radius(&self) -> u32 {
        self.config().click_radius
    }

    fn fingerprint(&self) -> String {
        self.config().fingerprint()
    }

    fn embed(&self, image: &Tensor<f32>) -> Result<ImageEmbedding> {
        self.encode_image(&normalize(image))
    }

    fn segment(&self, emb: &ImageEmbedding, prompts: &PromptSet) -> Result<Mask> {
        Ok(self.predict(emb, prompts)?.to_mask())
    }
}

/// `|a ∩ b| / |a ∪ b|`, with two empty masks scoring 1.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    a.check_same_shape(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub max_clicks: usize,
    /// Feed the previous binarized prediction into the mask channel.
    pub mask_feedback: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { max_clicks: MAX_CLICKS, mask_feedback: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    /// IoU after each click.
    pub ious: Vec<f64>,
    /// IoU of the empty prediction, used when no click was needed.
    pub initial_iou: f64,
    pub max_clicks: usize,
    /// Clicks needed to reach 90% / 95% IoU, if reached.
    pub clicks_to_90: Option<usize>,
    pub clicks_to_95: Option<usize>,
    #[serde(skip)]
    pub encode_seconds: f64,
    #[serde(skip)]
    pub decode_seconds: Vec<f64>,
}

impl EvalRecord {
    fn clicks_to(ious: &[f64], initial: f64, target: f64) -> Option<usize> {
        if ious.is_empty() && initial >= target {
            return Some(0);
        }
        ious.iter().position(|&v| v >= target).map(|i| i + 1)
    }

    /// IoU after `k` clicks; the last value carries forward once the loop stopped.
    pub fn iou_at(&self, k: usize) -> f64 {
        match (k, self.ious.len()) {
            (0, _) | (_, 0) => self.initial_iou,
            (k, n) => self.ious[k.min(n) - 1],
        }
    }

    /// Clicks to 90% IoU, failures counted at the cap.
    pub fn noc90(&self) -> usize {
        self.clicks_to_90.unwrap_or(self.max_clicks)
    }

    pub fn noc95(&self) -> usize {
        self.clicks_to_95.unwrap_or(self.max_clicks)
    }

    pub fn failed90(&self) -> bool {
        self.clicks_to_90.is_none()
    }

    pub fn failed95(&self) -> bool {
        self.clicks_to_95.is_none()
    }
}

/// Iterative click loop against `sample.gt` until every IoU target is met or
/// `max_clicks` is reached.
pub fn interactive_eval<S: Segmenter>(seg: &S, sample: &Sample, opts: &EvalOptions) -> Result<EvalRecord> {
    let gt = &sample.gt;
    let t = Instant::now();
    let emb = seg.embed(&sample.image)?;
    let encode_seconds = t.elapsed().as_secs_f64();
    let mut pred = Mask::empty(gt.height(), gt.width());
    let initial_iou = iou(&pred, gt)?;
    let mut clicks: Vec<Click> = Vec::new();
    let mut ious = Vec::new();
    let mut decode_seconds = Vec::new();
    let goal = IOU_TARGETS[1];
    if initial_iou < goal {
        while clicks.len() < opts.max_clicks {
            let click = match simulate_iterative(&pred, gt)? {
                NextClick::Click(c) => c,
                NextClick::Converged => break,
            };
            clicks.push(click);
            let mut prompts = PromptSet::from_clicks(clicks.iter().copied());
            if opts.mask_feedback && clicks.len() > 1 {
                prompts.mask = Some(pred.clone());
            }
            let t = Instant::now();
            pred = seg.segment(&emb, &prompts)?;
            decode_seconds.push(t.elapsed().as_secs_f64());
            let v = iou(&pred, gt)?;
            ious.push(v);
            if v >= goal {
                break;
            }
        }
    }
    Ok(EvalRecord {
        id: sample.id.clone(),
        clicks_to_90: EvalRecord::clicks_to(&ious, initial_iou, 0.90),
        clicks_to_95: EvalRecord::clicks_to(&ious, initial_iou, 0.95),
        ious,
        initial_iou,
        max_clicks: opts.max_clicks,
        encode_seconds,
        decode_seconds,
    })
}

/// Evaluates samples concurrently; records keep the input order.
pub fn evaluate_all<S: Segmenter>(seg: &S, samples: &[Sample], opts: &EvalOptions) -> Result<Vec<EvalRecord>> {
    samples.par_iter().map(|s| interactive_eval(seg, s, opts)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub samples: usize,
    /// `miou[k-1]` is mIoU@k.
    pub miou: Vec<f64>,
    pub noc90: f64,
    pub noc95: f64,
    pub nof90: usize,
    pub nof95: usize,
}

impl Aggregate {
    pub fn miou_at(&self, k: usize) -> f64 {
        self.miou[k - 1]
    }
}

pub fn aggregate(records: &[EvalRecord]) -> Result<Aggregate> {
    if records.is_empty() {
        return Err(Error::Validation("cannot aggregate zero records".into()));
    }
    let n = records.len() as f64;
    let cap = records.iter().map(|r| r.max_clicks).max().unwrap_or(0).max(1);
    let miou = (1..=cap).map(|k| records.iter().map(|r| r.iou_at(k)).sum::<f64>() / n).collect();
    let mean = |f: fn(&EvalRecord) -> usize| records.iter().map(|r| f(r) as f64).sum::<f64>() / n;
    let count = |f: fn(&EvalRecord) -> bool| records.iter().filter(|r| f(r)).count();
    Ok(Aggregate {
        samples: records.len(),
        miou,
        noc90: mean(EvalRecord::noc90),
        noc95: mean(EvalRecord::noc95),
        nof90: count(EvalRecord::failed90),
        nof95: count(EvalRecord::failed95),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SatLatency {
    pub prompts_issued: usize,
    pub total_seconds: f64,
    pub encode_seconds: f64,
    /// Mean seconds per prompt.
    pub per_prompt_seconds: f64,
}

/// Grid cell centers of a `grid×grid` lattice over an `size×size` image.
pub fn grid_points(size: usize, grid: usize) -> Vec<Click> {
    let at = |i: usize| ((2 * i + 1) * size / (2 * grid)) as i64;
    (0..grid).flat_map(|r| (0..grid).map(move |c| Click::positive(at(r), at(c)))).collect()
}

/// Encodes once, then issues `grid²` single positive click prompts.
pub fn sat_latency<S: Segmenter>(seg: &S, image: &Tensor<f32>, grid: usize) -> Result<SatLatency> {
    if grid == 0 {
        return Err(Error::Validation("grid must be >= 1".into()));
    }
    let start = Instant::now();
    let emb = seg.embed(image)?;
    let encode_seconds = start.elapsed().as_secs_f64();
    let points = grid_points(seg.input_size(), grid);
    let mut decode = 0.0;
    for p in &points {
        let t = Instant::now();
        seg.segment(&emb, &PromptSet::from_clicks([*p]))?;
        decode += t.elapsed().as_secs_f64();
    }
    Ok(SatLatency {
        prompts_issued: points.len(),
        total_seconds: start.elapsed().as_secs_f64(),
        encode_seconds,
        per_prompt_seconds: decode / points.len() as f64,
    })
}
