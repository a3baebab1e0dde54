//! Loss, data, augmentation and the training loop.

mod augment;
mod dataset;
mod synthetic;

pub use augment::{augment, hflip, rot90, vflip, warp_affine, AugmentConfig};
pub use dataset::{load_dataset, save_dataset, Sample};
pub use synthetic::{generate_sample, generate_synthetic_dataset, MAX_TARGET_AREA, MIN_TARGET_AREA};

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{aggregate, evaluate_all, EvalOptions};
use crate::mask::Mask;
use crate::model::{save_checkpoint, Bound, Checkpoint, Model, ModelConfig};
use crate::preprocess::{normalize, ResizeMode};
use crate::prompt::PromptSet;
use crate::sim::{simulate_iterative, simulate_random, NextClick};
use crate::tensor::{AdamConfig, Graph, LrSchedule, OptimizerState, Tensor, Var};

pub const NFL_EPS: f64 = 1e-8;

/// Normalized focal loss of `1×H×W` logits against `gt`.
pub fn normalized_focal_loss<'g>(logits: Var<'g>, gt: &Mask, gamma: f64) -> Result<Var<'g>> {
    let s = logits.shape();
    if s.len() != 3 || s[0] != 1 || (s[1], s[2]) != gt.shape() {
        return Err(Error::Dimension(format!("logits {s:?} do not match mask {:?}", gt.shape())));
    }
    if gamma < 0.0 {
        return Err(Error::Validation(format!("focal exponent must be >= 0, got {gamma}")));
    }
    logits.normalized_focal_loss(gt.data(), gamma, NFL_EPS)
}

/// How clicks are simulated for each training sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClickSchedule {
    /// Probability of the random strategy; otherwise iterative.
    pub random_prob: f64,
    pub max_pos: usize,
    pub max_neg: usize,
    /// The iterative strategy runs 0..=this many model rounds after its first click.
    pub max_rounds: usize,
}

impl Default for ClickSchedule {
    fn default() -> Self {
        Self { random_prob: 0.5, max_pos: 4, max_neg: 3, max_rounds: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Folder { path: PathBuf },
    Synthetic { n: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub data: DataSource,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    /// Focal exponent.
    pub gamma: f64,
    pub augment: AugmentConfig,
    pub clicks: ClickSchedule,
    pub seed: u64,
    /// Evaluate every this many epochs; 0 disables.
    pub eval_every: usize,
    /// Number of training samples used for periodic evaluation.
    pub eval_samples: usize,
    pub eval_max_clicks: usize,
    /// Checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            data: DataSource::Synthetic { n: 256, seed: 0 },
            epochs: 60,
            batch_size: 4,
            base_lr: 5e-4,
            decay_epoch: 50,
            decay_factor: 0.1,
            gamma: 2.0,
            augment: AugmentConfig::all(),
            clicks: ClickSchedule::default(),
            seed: 0,
            eval_every: 10,
            eval_samples: 16,
            eval_max_clicks: 5,
            checkpoint_every: 10,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.into()));
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.base_lr > 0.0 && self.decay_factor > 0.0) {
            return bad("learning rate and decay factor must be positive");
        }
        if self.decay_epoch > self.epochs {
            return bad("decay_epoch must not exceed epochs");
        }
        if self.gamma < 0.0 {
            return bad("gamma must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.clicks.random_prob) || self.clicks.max_pos == 0 {
            return bad("click schedule needs random_prob in [0, 1] and max_pos >= 1");
        }
        if self.eval_every > 0 && (self.eval_samples == 0 || self.eval_max_clicks == 0) {
            return bad("periodic evaluation needs eval_samples and eval_max_clicks >= 1");
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::step_decay(self.base_lr, self.decay_epoch, self.decay_factor)
    }

    /// Loads or generates the training set at the model's input size.
    pub fn load_data(&self) -> Result<Vec<Sample>> {
        let size = self.model.input_size;
        match &self.data {
            DataSource::Synthetic { n, seed } => generate_synthetic_dataset(*n, size, size, *seed),
            DataSource::Folder { path } => load_dataset(path)?
                .iter()
                .map(|s| s.resized(size, ResizeMode::Train))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub mean_clicks: f64,
    /// Fraction of samples that used the random strategy.
    pub random_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: u64,
    pub mean_loss: f64,
    pub miou1: f64,
    pub miou_last: f64,
    pub noc90: f64,
}

struct SampleOutcome {
    loss: f64,
    grads: Vec<Tensor<f32>>,
    clicks: usize,
    random: bool,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Clicks and optional previous mask for one sample per the click schedule.
/// Model rounds reuse the already computed image tokens without gradients.
pub fn simulate_training_prompts<R: Rng>(
    model: &Model,
    tokens: &Tensor<f32>,
    gt: &Mask,
    schedule: &ClickSchedule,
    rng: &mut R,
) -> Result<(PromptSet, bool)> {
    let fg = gt.area();
    let bg = gt.data().len() - fg;
    if fg > 0 && rng.gen_bool(schedule.random_prob) {
        let n_pos = rng.gen_range(1..=schedule.max_pos).min(fg);
        let n_neg = rng.gen_range(0..=schedule.max_neg).min(bg);
        let clicks = simulate_random(gt, n_pos, n_neg, rng.gen())?;
        return Ok((PromptSet::from_clicks(clicks), true));
    }
    let rounds = rng.gen_range(0..=schedule.max_rounds);
    let mut prompts = PromptSet::default();
    let mut pred = Mask::empty(gt.height(), gt.width());
    for round in 0..=rounds {
        if round > 0 {
            let g = Graph::no_grad();
            let b = Bound::new(&g, model.params());
            let map = model.prompt_map(&prompts)?;
            let logits = model.predict_var(&b, g.constant(tokens.clone()), &map, None)?.tensor();
            pred = Mask::new(gt.height(), gt.width(), logits.data().iter().map(|&z| z > 0.0).collect())?;
        }
        match simulate_iterative(&pred, gt)? {
            NextClick::Click(c) => prompts.clicks.push(c),
            NextClick::Converged => break,
        }
        if round > 0 {
            prompts.mask = Some(pred.clone());
        }
    }
    Ok((prompts, false))
}

fn sample_outcome(
    model: &Model,
    sample: &Sample,
    cfg: &TrainConfig,
    seed: u64,
    step: u64,
) -> Result<SampleOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aug_seed = rng.gen();
    let sample = if cfg.augment.is_noop() { sample.clone() } else { augment(sample, &cfg.augment, aug_seed) };
    let g = Graph::new();
    let b = Bound::new(&g, model.params());
    let tokens = model.encode_var(&b, g.constant(normalize(&sample.image)))?;
    let (prompts, random) = simulate_training_prompts(model, &tokens.value(), &sample.gt, &cfg.clicks, &mut rng)?;
    let map = model.prompt_map(&prompts)?;
    let logits = model.predict_var(&b, tokens, &map, None)?;
    let loss = normalized_focal_loss(logits, &sample.gt, cfg.gamma)?;
    let value = loss.value().item() as f64;
    if !value.is_finite() {
        let l = logits.value();
        let (lo, hi) = l.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!(
                "sample {} with {} clicks, logits in [{lo}, {hi}], gt area {}",
                sample.id,
                prompts.clicks.len(),
                sample.gt.area()
            ),
        });
    }
    let mut grads = g.backward(loss)?;
    let grads = model
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            b.var(i).and_then(|v| grads.take(v)).unwrap_or_else(|| Tensor::zeros(p.tensor.shape()))
        })
        .collect();
    Ok(SampleOutcome { loss: value, grads, clicks: prompts.clicks.len(), random })
}

/// Model plus optimizer state; every random choice derives from `(seed, step)`.
pub struct Trainer {
    pub model: Model,
    pub optimizer: OptimizerState<f32>,
    pub cfg: TrainConfig,
    pub adam: AdamConfig,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone())?;
        let optimizer = OptimizerState::new(model.params().tensors(), cfg.schedule());
        Ok(Self { model, optimizer, cfg, adam: AdamConfig::default() })
    }

    /// Continues from a checkpoint written by [`fit`].
    pub fn resume(ckpt: Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if ckpt.model.config() != &cfg.model {
            return Err(Error::Validation("checkpoint model config differs from the training config".into()));
        }
        let optimizer = ckpt
            .optimizer
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state to resume from".into()))?;
        Ok(Self { model: ckpt.model, optimizer, cfg, adam: AdamConfig::default() })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.cfg.batch_size) as u64
    }

    /// Sample indices for `step`: a per-epoch permutation cut into batches.
    pub fn batch_indices(&self, n: usize, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch(n);
        let epoch = step / spe;
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = stream_rng(self.cfg.seed, 1 << 32 | epoch);
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let start = (step % spe) as usize * self.cfg.batch_size;
        perm[start..(start + self.cfg.batch_size).min(n)].to_vec()
    }

    /// One optimizer step on `batch`. Per-sample gradients are summed in batch order.
    pub fn train_step(&mut self, batch: &[&Sample], epoch: usize) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let step = self.optimizer.step;
        let mut rng = stream_rng(self.cfg.seed, step);
        let seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();
        let model = &self.model;
        let cfg = &self.cfg;
        let outcomes: Vec<SampleOutcome> = batch
            .par_iter()
            .zip(seeds)
            .map(|(s, seed)| sample_outcome(model, s, cfg, seed, step))
            .collect::<Result<_>>()?;
        let inv = 1.0 / batch.len() as f32;
        let mut iter = outcomes.iter();
        let mut grads = iter.next().unwrap().grads.clone();
        for o in iter {
            for (acc, g) in grads.iter_mut().zip(&o.grads) {
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
        }
        for g in &mut grads {
            for v in g.data_mut() {
                *v *= inv;
            }
        }
        let lr = self.optimizer.schedule.lr_at(epoch);
        self.optimizer.adam_step(&mut self.model.params_mut().tensors_mut(), &grads, &self.adam, lr)?;
        let n = outcomes.len() as f64;
        Ok(LossReport {
            step,
            epoch,
            lr,
            loss: outcomes.iter().map(|o| o.loss).sum::<f64>() / n,
            mean_clicks: outcomes.iter().map(|o| o.clicks as f64).sum::<f64>() / n,
            random_fraction: outcomes.iter().filter(|o| o.random).count() as f64 / n,
        })
    }

    /// The next step of the schedule over `data`.
    pub fn train_next(&mut self, data: &[Sample]) -> Result<LossReport> {
        let step = self.optimizer.step;
        let epoch = (step / self.steps_per_epoch(data.len())) as usize;
        let idx = self.batch_indices(data.len(), step);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
        self.train_step(&batch, epoch)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { model: self.model.clone(), optimizer: Some(self.optimizer.clone()) }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.model, Some(&self.optimizer))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitLog {
    pub losses: Vec<LossReport>,
    pub metrics: Vec<MetricsRow>,
}

/// Trains until `cfg.epochs` (or `max_steps`), evaluating and checkpointing
/// at epoch boundaries. Checkpoints go to `out_dir` when given.
pub fn fit(
    trainer: &mut Trainer,
    data: &[Sample],
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&LossReport),
) -> Result<FitLog> {
    if data.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let cfg = trainer.cfg.clone();
    let spe = trainer.steps_per_epoch(data.len());
    let total = (cfg.epochs as u64 * spe).min(cfg.max_steps.unwrap_or(u64::MAX));
    let mut log = FitLog::default();
    let mut epoch_losses = Vec::new();
    while trainer.step() < total {
        let report = trainer.train_next(data)?;
        on_step(&report);
        epoch_losses.push(report.loss);
        log.losses.push(report);
        let step = trainer.step();
        if step % spe != 0 && step != total {
            continue;
        }
        let epoch = step.div_ceil(spe) as usize;
        if cfg.eval_every > 0 && epoch % cfg.eval_every == 0 && step % spe == 0 {
            let n = cfg.eval_samples.min(data.len());
            let opts = EvalOptions { max_clicks: cfg.eval_max_clicks, mask_feedback: true };
            let agg = aggregate(&evaluate_all(&trainer.model, &data[..n], &opts)?)?;
            log.metrics.push(MetricsRow {
                epoch,
                step,
                mean_loss: epoch_losses.iter().sum::<f64>() / epoch_losses.len().max(1) as f64,
                miou1: agg.miou_at(1),
                miou_last: agg.miou_at(cfg.eval_max_clicks),
                noc90: agg.noc90,
            });
            log::info!("epoch {epoch} step {step}: mIoU@1 {:.4} NoC90 {:.2}", agg.miou_at(1), agg.noc90);
        }
        epoch_losses.clear();
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && step % spe == 0 {
                trainer.save(&dir.join(format!("epoch_{epoch:04}.ckpt")))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        trainer.save(&dir.join("final.ckpt"))?;
        std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&log.metrics)? + "\n")?;
    }
    Ok(log)
}
