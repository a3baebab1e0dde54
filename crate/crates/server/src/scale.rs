//! Original-image to model-space coordinate mapping.
//!
//! A coordinate `v` on an axis of length `from` maps to
//! `floor(v · to / from + 1/2)` on an axis of length `to`, clamped to
//! `to - 1`. Halves round up. Integer arithmetic keeps the rule exact.

use promptseg::{BoxPrompt, Click, Mask, PolygonPrompt, PromptSet, ScribblePrompt};

use crate::error::ServiceError;

pub fn scale_coord(v: i64, from: usize, to: usize) -> i64 {
    let (from, to) = (from as i64, to as i64);
    ((2 * v * to + from) / (2 * from)).min(to - 1)
}

/// Source and target image sizes, `(height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Scaler {
    pub original: (usize, usize),
    pub model: (usize, usize),
}

impl Scaler {
    fn point(&self, kind: &str, i: usize, row: i64, col: i64) -> Result<[i64; 2], ServiceError> {
        let (h, w) = self.original;
        if row < 0 || col < 0 || row >= h as i64 || col >= w as i64 {
            return Err(ServiceError::BadRequest(format!(
                "invalid prompt {kind}[{i}]: point ({row}, {col}) outside {h}×{w} image"
            )));
        }
        Ok([scale_coord(row, h, self.model.0), scale_coord(col, w, self.model.1)])
    }

    /// Checks every coordinate against the original image, then maps the set
    /// into model space. A mask may arrive at either resolution.
    pub fn to_model(&self, p: &PromptSet) -> Result<PromptSet, ServiceError> {
        let mut out = PromptSet { text_embedding: p.text_embedding.clone(), ..Default::default() };
        for (i, c) in p.clicks.iter().enumerate() {
            let [row, col] = self.point("clicks", i, c.row, c.col)?;
            out.clicks.push(Click { row, col, polarity: c.polarity });
        }
        for (i, b) in p.boxes.iter().enumerate() {
            let [r0, c0] = self.point("boxes", i, b.r0, b.c0)?;
            let [r1, c1] = self.point("boxes", i, b.r1, b.c1)?;
            out.boxes.push(BoxPrompt { r0, c0, r1, c1 });
        }
        for (i, poly) in p.polygons.iter().enumerate() {
            let vertices =
                poly.vertices.iter().map(|v| self.point("polygons", i, v[0], v[1])).collect::<Result<_, _>>()?;
            out.polygons.push(PolygonPrompt { vertices });
        }
        for (i, s) in p.scribbles.iter().enumerate() {
            let path = s.path.iter().map(|v| self.point("scribbles", i, v[0], v[1])).collect::<Result<_, _>>()?;
            out.scribbles.push(ScribblePrompt { path, polarity: s.polarity });
        }
        out.mask = p.mask.as_ref().map(|m| self.mask_to_model(m)).transpose()?;
        Ok(out)
    }

    pub fn mask_to_model(&self, m: &Mask) -> Result<Mask, ServiceError> {
        if m.shape() == self.model {
            Ok(m.clone())
        } else if m.shape() == self.original {
            Ok(m.resize_nearest(self.model.0, self.model.1))
        } else {
            Err(ServiceError::BadRequest(format!(
                "invalid prompt mask_rle: size {:?} matches neither the image {:?} nor the model {:?}",
                m.shape(),
                self.original,
                self.model
            )))
        }
    }
}
