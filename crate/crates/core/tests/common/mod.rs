#![allow(dead_code)]

pub mod gradcheck;
pub mod metrics_oracle;
pub mod raster_oracle;
pub mod sim_oracle;

use promptseg::model::ModelConfig;

/// A model small enough for quick training tests.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_size: 64,
        patch_size: 8,
        embed_dim: 32,
        depth: 2,
        heads: 2,
        pyramid_dims: [16, 16, 16, 16],
        decoder_dim: 16,
        text_dim: 8,
        ..ModelConfig::default()
    }
}
