//! Samples and the on-disk dataset folder (`images/NAME.png`, `masks/NAME.png`).

use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::preprocess::{load_image, resize_and_pad, save_image, ResizeMode};
use crate::prompt::PromptSet;
use crate::tensor::Tensor;

/// An RGB image in `[0, 1]` with its ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub gt: Mask,
    pub prompts: Option<PromptSet>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, gt: Mask) -> Result<Self> {
        let id = id.into();
        match image.shape() {
            &[3, h, w] if (h, w) == gt.shape() => Ok(Self { id, image, gt, prompts: None }),
            s => Err(Error::Dimension(format!(
                "sample {id}: image {s:?} does not match mask {:?}",
                gt.shape()
            ))),
        }
    }

    pub fn height(&self) -> usize {
        self.gt.height()
    }

    pub fn width(&self) -> usize {
        self.gt.width()
    }

    /// Resizes to `size×size` with the given mode.
    pub fn resized(&self, size: usize, mode: ResizeMode) -> Result<Self> {
        let (image, gt) = resize_and_pad(&self.image, &self.gt, size, mode)?;
        Ok(Self { id: self.id.clone(), image, gt, prompts: self.prompts.clone() })
    }
}

/// Reads every `images/NAME.png` with its `masks/NAME.png`, sorted by name.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    let entries = std::fs::read_dir(&images).map_err(|e| Error::Dataset {
        files: vec![format!("{}: {e}", images.display())],
    })?;
    let mut names = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    let mut samples = Vec::with_capacity(names.len());
    let mut bad = Vec::new();
    for name in names {
        let ip = images.join(format!("{name}.png"));
        let mp = masks.join(format!("{name}.png"));
        let img = load_image(&ip);
        let gt = if mp.exists() { Mask::load_png(&mp) } else { Err(Error::Image("missing".into())) };
        match (img, gt) {
            (Ok(img), Ok(gt)) => match Sample::new(name, img, gt) {
                Ok(s) => samples.push(s),
                Err(e) => bad.push(format!("{}: {e}", mp.display())),
            },
            (Err(e), _) => bad.push(format!("{}: {e}", ip.display())),
            (_, Err(e)) => bad.push(format!("{}: {e}", mp.display())),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Dataset { files: bad });
    }
    if samples.is_empty() {
        return Err(Error::Dataset { files: vec![format!("{}: no PNG images", images.display())] });
    }
    Ok(samples)
}

pub fn save_dataset(samples: &[Sample], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    for s in samples {
        save_image(&s.image, &dir.join("images").join(format!("{}.png", s.id)))?;
        s.gt.save_png(&dir.join("masks").join(format!("{}.png", s.id)))?;
    }
    Ok(())
}
