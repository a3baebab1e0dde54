//! Interactive segmentation with dense visual prompts and an encode-once
//! image embedding.

pub mod error;
pub mod eval;
pub mod mask;
pub mod model;
pub mod preprocess;
pub mod prompt;
pub mod sim;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use mask::{Mask, Rle};
pub use prompt::{BoxPrompt, Click, DensePromptMap, Polarity, PolygonPrompt, PromptSet, ScribblePrompt};
