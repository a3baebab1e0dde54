//! The segmentation network.
//!
//! The image is encoded once by a ViT into `N×D` tokens. Each prompt round
//! rasterizes the prompts into a dense map, patch-embeds it with its own
//! convolution, adds it to the cached image tokens and refines the sum with
//! `fusion_blocks` self-attention blocks. An optional text vector is projected
//! to one token and exchanged with the dense tokens through two cross-attention
//! blocks. A simple feature pyramid decoder turns the tokens into full
//! resolution logits.

mod checkpoint;
mod layers;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{Bound, Param, ParamId, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{dim_err, Error, Result};
use crate::mask::Mask;
use crate::prompt::{rasterize_with_spacing, DensePromptMap, PromptSet};
use crate::tensor::{Graph, Tensor, Var};
use layers::{Block, Conv, ConvUp, Linear, Norm, TextBlock};
use params::Init;

/// Scales of the decoder feature pyramid relative to the input, coarsest first.
pub const PYRAMID_SCALES: [usize; 4] = [32, 16, 8, 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Square input side; 1024 at paper scale.
    pub input_size: usize,
    /// Patch side; 16 at paper scale.
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Self-attention blocks after adding prompt tokens (0, 1 or 2).
    pub fusion_blocks: usize,
    pub fusion_mlp_ratio: usize,
    /// `false` rasterizes clicks as single pixels.
    pub use_disk: bool,
    pub click_radius: u32,
    /// Channels of the pyramid branches at 1/32, 1/16, 1/8 and 1/4 scale.
    pub pyramid_dims: [usize; 4],
    pub decoder_dim: usize,
    /// Length of externally supplied text embeddings.
    pub text_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 128,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            fusion_blocks: 2,
            fusion_mlp_ratio: 1,
            use_disk: true,
            click_radius: 3,
            pyramid_dims: [64, 64, 32, 32],
            decoder_dim: 32,
            text_dim: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if [self.input_size, self.patch_size, self.embed_dim, self.depth, self.heads, self.mlp_ratio]
            .contains(&0)
            || self.fusion_mlp_ratio == 0
            || self.decoder_dim == 0
            || self.text_dim == 0
            || self.pyramid_dims.contains(&0)
        {
            return bad("all model dimensions must be positive".into());
        }
        if self.input_size % self.patch_size != 0 {
            return bad(format!(
                "input size {} not divisible by patch size {}",
                self.input_size, self.patch_size
            ));
        }
        if !self.patch_size.is_power_of_two() || self.patch_size > 32 {
            return bad(format!("patch size {} must be a power of two <= 32", self.patch_size));
        }
        if self.input_size % 32 != 0 {
            return bad(format!("input size {} must be divisible by 32", self.input_size));
        }
        if self.fusion_blocks > 2 {
            return bad(format!("at most 2 fusion blocks, got {}", self.fusion_blocks));
        }
        if self.embed_dim % self.heads != 0 {
            return bad(format!("{} heads do not divide dim {}", self.heads, self.embed_dim));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Side lengths of the four decoder pyramid levels.
    pub fn pyramid_sides(&self) -> [usize; 4] {
        PYRAMID_SCALES.map(|s| self.input_size / s)
    }

    pub fn effective_radius(&self) -> u32 {
        if self.use_disk {
            self.click_radius
        } else {
            0
        }
    }

    pub fn canonical_text(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Short hash identifying the architecture and its settings.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        hex::encode(&digest[..8])
    }
}

/// Cached encoder output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding {
    tokens: Tensor<f32>,
    image_hash: String,
    config_fingerprint: String,
}

impl ImageEmbedding {
    pub fn tokens(&self) -> &Tensor<f32> {
        &self.tokens
    }

    pub fn image_hash(&self) -> &str {
        &self.image_hash
    }

    pub fn config_fingerprint(&self) -> &str {
        &self.config_fingerprint
    }

    pub fn size_bytes(&self) -> usize {
        self.tokens.len() * std::mem::size_of::<f32>()
    }
}

/// Foreground logits at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SegLogits {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl SegLogits {
    fn from_tensor(t: &Tensor<f32>) -> Self {
        let s = t.shape();
        Self { height: s[1], width: s[2], data: t.data().to_vec() }
    }

    /// Foreground where `sigmoid(logit) > 0.5`.
    pub fn to_mask(&self) -> Mask {
        Mask::new(self.height, self.width, self.data.iter().map(|&z| z > 0.0).collect())
            .expect("logits have positive extent")
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn hash_tensor(t: &Tensor<f32>) -> String {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

#[derive(Clone, Debug)]
struct Encoder {
    patch: Conv,
    pos: ParamId,
    blocks: Vec<Block>,
    norm: Norm,
}

#[derive(Clone, Debug)]
enum Resample {
    Down(Conv),
    Same(Conv),
    Up(ConvUp),
}

#[derive(Clone, Debug)]
struct Decoder {
    branches: Vec<Resample>,
    lateral: Vec<Conv>,
    fuse: Conv,
    head: Conv,
}

#[derive(Clone, Debug)]
struct TextPath {
    proj: Linear,
    blocks: Vec<TextBlock>,
}

/// Network weights plus the layer wiring.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    prompt_embed: Conv,
    fusion: Vec<Block>,
    text: TextPath,
    decoder: Decoder,
}

impl Model {
    /// Builds a freshly initialized model from `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::default();
        let mut init = Init { store: &mut store, rng: ChaCha8Rng::seed_from_u64(cfg.seed) };
        let (d, p) = (cfg.embed_dim, cfg.patch_size);

        let encoder = Encoder {
            patch: Conv::new(&mut init, "encoder.patch_embed", 3, d, p, p),
            pos: init.normal("encoder.pos_embed".into(), &[cfg.num_tokens(), d], 0.02),
            blocks: (0..cfg.depth)
                .map(|i| Block::new(&mut init, &format!("encoder.blocks.{i}"), d, cfg.heads, cfg.mlp_ratio))
                .collect(),
            norm: Norm::new(&mut init, "encoder.norm", d),
        };
        let prompt_embed = Conv::zeroed(&mut init, "prompt_embed", 3, d, p, p);
        let fusion = (0..cfg.fusion_blocks)
            .map(|i| Block::new(&mut init, &format!("fusion.{i}"), d, cfg.heads, cfg.fusion_mlp_ratio))
            .collect();
        let text = TextPath {
            proj: Linear::new(&mut init, "text.proj", cfg.text_dim, d),
            blocks: (0..2)
                .map(|i| TextBlock::new(&mut init, &format!("text.blocks.{i}"), d, cfg.heads))
                .collect(),
        };

        let grid = cfg.grid();
        let mut branches = Vec::new();
        let mut lateral = Vec::new();
        for (i, (&side, &ch)) in cfg.pyramid_sides().iter().zip(&cfg.pyramid_dims).enumerate() {
            let name = format!("decoder.pyramid.{i}");
            branches.push(if side < grid {
                let f = grid / side;
                Resample::Down(Conv::new(&mut init, &name, d, ch, f, f))
            } else if side == grid {
                Resample::Same(Conv::new(&mut init, &name, d, ch, 1, 1))
            } else {
                Resample::Up(ConvUp::new(&mut init, &name, d, ch, side / grid))
            });
            lateral.push(Conv::new(&mut init, &format!("decoder.mlp1.{i}"), ch, cfg.decoder_dim, 1, 1));
        }
        let e = cfg.decoder_dim;
        let decoder = Decoder {
            branches,
            lateral,
            fuse: Conv::new(&mut init, "decoder.mlp2", e, e, 1, 1),
            head: Conv::new(&mut init, "decoder.head", e, 1, 1, 1),
        };
        drop(init);
        Ok(Self { cfg, store, encoder, prompt_embed, fusion, text, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Hash over the config and every parameter value.
    pub fn weights_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.cfg.canonical_text().as_bytes());
        for p in self.store.iter() {
            h.update(p.name.as_bytes());
            for v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Adds Gaussian noise to every parameter (zero-initialized ones included).
    pub fn perturb(&mut self, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, std).expect("valid std");
        for t in self.store.tensors_mut() {
            for v in t.data_mut() {
                *v += dist.sample(&mut rng) as f32;
            }
        }
    }

    pub fn prompt_map(&self, prompts: &PromptSet) -> Result<DensePromptMap> {
        let s = self.cfg.input_size;
        rasterize_with_spacing(prompts, s, s, self.cfg.effective_radius(), self.cfg.click_radius.max(1))
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let s = self.cfg.input_size;
        if shape != [3, s, s] {
            return Err(dim_err(format!("image must be [3, {s}, {s}], got {shape:?}")));
        }
        Ok(())
    }

    fn check_tokens(&self, shape: &[usize], what: &str) -> Result<()> {
        let (n, d) = (self.cfg.num_tokens(), self.cfg.embed_dim);
        if shape != [n, d] {
            return Err(dim_err(format!("{what} must be [{n}, {d}], got {shape:?}")));
        }
        Ok(())
    }

    // Graph-level stages. Training composes these inside one graph.

    pub fn encode_var<'g>(&self, b: &Bound<'g, '_>, img: Var<'g>) -> Result<Var<'g>> {
        self.check_image(&img.shape())?;
        let enc = &self.encoder;
        let (d, n) = (self.cfg.embed_dim, self.cfg.num_tokens());
        let x = enc.patch.forward(b, img)?.reshape(&[d, n])?.transpose()?;
        let mut x = x.add(b.get(enc.pos))?;
        for blk in &enc.blocks {
            x = blk.forward(b, x)?;
        }
        enc.norm.forward(b, x)
    }

    pub fn embed_prompts_var<'g>(&self, b: &Bound<'g, '_>, map: Var<'g>) -> Result<Var<'g>> {
        let s = self.cfg.input_size;
        if map.shape() != [3, s, s] {
            return Err(dim_err(format!("prompt map must be [3, {s}, {s}], got {:?}", map.shape())));
        }
        let (d, n) = (self.cfg.embed_dim, self.cfg.num_tokens());
        self.prompt_embed.forward(b, map)?.reshape(&[d, n])?.transpose()
    }

    pub fn fuse_var<'g>(&self, b: &Bound<'g, '_>, img_tokens: Var<'g>, prompt_tokens: Var<'g>) -> Result<Var<'g>> {
        self.check_tokens(&img_tokens.shape(), "image tokens")?;
        self.check_tokens(&prompt_tokens.shape(), "prompt tokens")?;
        let mut x = img_tokens.add(prompt_tokens)?;
        for blk in &self.fusion {
            x = blk.forward(b, x)?;
        }
        Ok(x)
    }

    pub fn text_var<'g>(&self, b: &Bound<'g, '_>, fused: Var<'g>, text: Option<&[f32]>) -> Result<Var<'g>> {
        let Some(text) = text else { return Ok(fused) };
        if text.len() != self.cfg.text_dim {
            return Err(dim_err(format!(
                "text embedding has {} values, model expects {}",
                text.len(),
                self.cfg.text_dim
            )));
        }
        let t = b.graph().constant(Tensor::new(&[1, text.len()], text.to_vec())?);
        let mut token = self.text.proj.forward(b, t)?;
        let mut x = fused;
        for blk in &self.text.blocks {
            (token, x) = blk.forward(b, token, x)?;
        }
        Ok(x)
    }

    /// Decodes `N×D` tokens into `1×H×W` logits.
    pub fn decode_var<'g>(&self, b: &Bound<'g, '_>, tokens: Var<'g>) -> Result<Var<'g>> {
        let shape = tokens.shape();
        let grid = self.cfg.grid();
        let (n, d) = match shape.as_slice() {
            &[n, d] => (n, d),
            _ => return Err(dim_err(format!("decoder tokens must be N×D, got {shape:?}"))),
        };
        let side = (n as f64).sqrt().round() as usize;
        if side * side != n || side != grid || d != self.cfg.embed_dim {
            return Err(dim_err(format!(
                "decoder expects {grid}×{grid} tokens of dim {}, got {shape:?}",
                self.cfg.embed_dim
            )));
        }
        let feat = tokens.transpose()?.reshape(&[d, grid, grid])?;
        let quarter = self.cfg.input_size / 4;
        let mut acc: Option<Var<'g>> = None;
        for (branch, lat) in self.decoder.branches.iter().zip(&self.decoder.lateral) {
            let level = match branch {
                Resample::Down(c) | Resample::Same(c) => c.forward(b, feat)?,
                Resample::Up(c) => c.forward(b, feat)?,
            }
            .gelu();
            let y = lat.forward(b, level)?.resize_bilinear(quarter, quarter)?;
            acc = Some(match acc {
                None => y,
                Some(a) => a.add(y)?,
            });
        }
        let x = self.decoder.fuse.forward(b, acc.expect("four pyramid levels").gelu())?.gelu();
        let s = self.cfg.input_size;
        self.decoder.head.forward(b, x)?.resize_bilinear(s, s)
    }

    /// Pyramid level shapes `[C, side, side]` for the given tokens.
    pub fn pyramid_shapes(&self, tokens: &Tensor<f32>) -> Result<Vec<Vec<usize>>> {
        self.check_tokens(tokens.shape(), "tokens")?;
        let g = Graph::no_grad();
        let b = Bound::new(&g, &self.store);
        let grid = self.cfg.grid();
        let feat = g.constant(tokens.clone()).transpose()?.reshape(&[self.cfg.embed_dim, grid, grid])?;
        self.decoder
            .branches
            .iter()
            .map(|br| {
                Ok(match br {
                    Resample::Down(c) | Resample::Same(c) => c.forward(&b, feat)?,
                    Resample::Up(c) => c.forward(&b, feat)?,
                }
                .shape())
            })
            .collect()
    }

    /// Prompt-dependent part of the network on top of image tokens.
    pub fn predict_var<'g>(
        &self,
        b: &Bound<'g, '_>,
        img_tokens: Var<'g>,
        map: &DensePromptMap,
        text: Option<&[f32]>,
    ) -> Result<Var<'g>> {
        let m = b.graph().constant(map.to_tensor());
        let pt = self.embed_prompts_var(b, m)?;
        let fused = self.fuse_var(b, img_tokens, pt)?;
        let x = self.text_var(b, fused, text)?;
        self.decode_var(b, x)
    }

    // Tensor-level stages for inference.

    pub fn encode_image(&self, img: &Tensor<f32>) -> Result<ImageEmbedding> {
        let g = Graph::no_grad();
        let b = Bound::new(&g, &self.store);
        let tokens = self.encode_var(&b, g.constant(img.clone()))?.tensor();
        Ok(ImageEmbedding {
            tokens,
            image_hash: hash_tensor(img),
            config_fingerprint: self.cfg.fingerprint(),
        })
    }

    pub fn embed_prompts(&self, map: &DensePromptMap) -> Result<Tensor<f32>> {
        let g = Graph::no_grad();
        let b = Bound::new(&g, &self.store);
        Ok(self.embed_prompts_var(&b, g.constant(map.to_tensor()))?.tensor())
    }

    pub fn fuse(&self, emb: &ImageEmbedding, prompt_tokens: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_embedding(emb)?;
        let g = Graph::no_grad();
        let b = Bound::new(&g, &self.store);
        let x = self.fuse_var(&b, g.constant(emb.tokens.clone()), g.constant(prompt_tokens.clone()))?;
        Ok(x.tensor())
    }

    pub fn cross_attend_text(&self, fused: &Tensor<f32>, text: Option<&[f32]>) -> Result<Tensor<f32>> {
        self.check_tokens(fused.shape(), "fused tokens")?;
        let g = Graph::no_grad();
        let b = Bound::new(&g, &self.store);
        Ok(self.text_var(&b, g.constant(fused.clone()), text)?.tensor())
    }

    pub fn decode(&self, tokens: &Tensor<f32>) -> Result<SegLogits> {
        let g = Graph::no_grad();
        let b = Bound::new(&g, &self.store);
        Ok(SegLogits::from_tensor(&self.decode_var(&b, g.constant(tokens.clone()))?.value()))
    }

    fn check_embedding(&self, emb: &ImageEmbedding) -> Result<()> {
        if emb.config_fingerprint != self.cfg.fingerprint() {
            return Err(Error::Validation(format!(
                "embedding was produced by config {} but the model is {}",
                emb.config_fingerprint,
                self.cfg.fingerprint()
            )));
        }
        Ok(())
    }

    /// Prompt round over a cached embedding; the encoder does not run.
    pub fn predict(&self, emb: &ImageEmbedding, prompts: &PromptSet) -> Result<SegLogits> {
        self.check_embedding(emb)?;
        let map = self.prompt_map(prompts)?;
        let g = Graph::no_grad();
        let b = Bound::new(&g, &self.store);
        let tokens = g.constant(emb.tokens.clone());
        let out = self.predict_var(&b, tokens, &map, prompts.text_embedding.as_deref())?;
        Ok(SegLogits::from_tensor(&out.value()))
    }

    /// Full pass: encode, rasterize, fuse, text, decode.
    pub fn forward(&self, img: &Tensor<f32>, prompts: &PromptSet) -> Result<SegLogits> {
        let map = self.prompt_map(prompts)?;
        let g = Graph::no_grad();
        let b = Bound::new(&g, &self.store);
        let tokens = self.encode_var(&b, g.constant(img.clone()))?;
        let out = self.predict_var(&b, tokens, &map, prompts.text_embedding.as_deref())?;
        Ok(SegLogits::from_tensor(&out.value()))
    }
}
