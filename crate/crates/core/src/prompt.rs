//! Visual prompts and their three-channel dense rasterization.
//!
//! Channel 0 collects positive evidence, channel 1 negative evidence and
//! channel 2 the previous mask. Every prompt type reduces to clicks: a box
//! contributes its four corners as negative clicks, a polygon its vertices,
//! and a scribble is resampled into clicks along its arc length. Each click is
//! painted as a binary disk (Euclidean distance ≤ radius on pixel centers)
//! with union semantics, so rasterization is idempotent and order independent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

/// Click radius used at 1024×1024 input resolution.
pub const PAPER_SCALE_RADIUS: u32 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    fn channel(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Click {
    pub row: i64,
    pub col: i64,
    pub polarity: Polarity,
}

impl Click {
    pub fn positive(row: i64, col: i64) -> Self {
        Self { row, col, polarity: Polarity::Positive }
    }

    pub fn negative(row: i64, col: i64) -> Self {
        Self { row, col, polarity: Polarity::Negative }
    }

    fn check_bounds(&self, h: usize, w: usize) -> std::result::Result<(), String> {
        check_point(self.row, self.col, h, w)
    }
}

fn check_point(row: i64, col: i64, h: usize, w: usize) -> std::result::Result<(), String> {
    if row < 0 || col < 0 || row >= h as i64 || col >= w as i64 {
        Err(format!("point ({row}, {col}) outside {h}×{w} image"))
    } else {
        Ok(())
    }
}

/// Axis-aligned box given by its min and max corners (inclusive).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub r0: i64,
    pub c0: i64,
    pub r1: i64,
    pub c1: i64,
}

/// Closed polygon as an ordered vertex list of `[row, col]` pairs.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PolygonPrompt {
    pub vertices: Vec<[i64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScribblePrompt {
    pub path: Vec<[i64; 2]>,
    pub polarity: Polarity,
}

/// All prompts for one segmentation round. Serializes to the JSON wire
/// schema shared by the service and clients.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptSet {
    pub clicks: Vec<Click>,
    pub boxes: Vec<BoxPrompt>,
    pub polygons: Vec<PolygonPrompt>,
    pub scribbles: Vec<ScribblePrompt>,
    /// Previous segmentation, carried as RLE on the wire.
    #[serde(rename = "mask_rle", with = "crate::mask::rle_serde", skip_serializing_if = "Option::is_none")]
    pub mask: Option<Mask>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_embedding: Option<Vec<f32>>,
}

impl PromptSet {
    pub fn from_clicks(clicks: impl IntoIterator<Item = Click>) -> Self {
        Self { clicks: clicks.into_iter().collect(), ..Default::default() }
    }

    pub fn is_empty(&self) -> bool {
        self.clicks.is_empty()
            && self.boxes.is_empty()
            && self.polygons.is_empty()
            && self.scribbles.is_empty()
            && self.mask.is_none()
            && self.text_embedding.is_none()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("prompt set serializes")
    }

    pub fn from_json(doc: &str) -> Result<Self> {
        Ok(serde_json::from_str(doc)?)
    }
}

/// `3×H×W` binary map: positive clicks, negative clicks, previous mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DensePromptMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl DensePromptMap {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; 3 * height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[(c * self.height + row) * self.width + col]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[3, self.height, self.width], self.data.clone()).expect("consistent map shape")
    }

    /// Paints a click disk into its polarity channel.
    pub fn paint_click(&mut self, click: &Click, radius: u32) -> Result<()> {
        click.check_bounds(self.height, self.width).map_err(|reason| Error::InvalidPrompt {
            element: "click".into(),
            reason,
        })?;
        self.paint_disk(click.polarity.channel(), click.row as usize, click.col as usize, radius);
        Ok(())
    }

    fn paint_disk(&mut self, channel: usize, row: usize, col: usize, radius: u32) {
        let r = radius as i64;
        let (h, w) = (self.height as i64, self.width as i64);
        let base = channel * self.height * self.width;
        for dr in -r..=r {
            let y = row as i64 + dr;
            if y < 0 || y >= h {
                continue;
            }
            for dc in -r..=r {
                let x = col as i64 + dc;
                if x >= 0 && x < w && dr * dr + dc * dc <= r * r {
                    self.data[base + (y * w + x) as usize] = 1.0;
                }
            }
        }
    }

    pub fn set_mask(&mut self, mask: &Mask) -> Result<()> {
        if mask.shape() != (self.height, self.width) {
            return Err(Error::InvalidPrompt {
                element: "mask_rle".into(),
                reason: format!(
                    "mask is {}×{} but the prompt map is {}×{}",
                    mask.height(),
                    mask.width(),
                    self.height,
                    self.width
                ),
            });
        }
        let n = self.height * self.width;
        for (dst, &v) in self.data[2 * n..].iter_mut().zip(mask.data()) {
            *dst = if v { 1.0 } else { 0.0 };
        }
        Ok(())
    }
}

/// Returns a copy of `map` with `click` painted in.
pub fn rasterize_click(mut map: DensePromptMap, click: &Click, radius: u32) -> Result<DensePromptMap> {
    map.paint_click(click, radius)?;
    Ok(map)
}

/// The four corners of a box as negative clicks.
pub fn box_to_clicks(b: &BoxPrompt) -> Result<[Click; 4]> {
    if b.r0 > b.r1 || b.c0 > b.c1 {
        return Err(Error::InvalidPrompt {
            element: "box".into(),
            reason: format!("inverted corners ({}, {})-({}, {})", b.r0, b.c0, b.r1, b.c1),
        });
    }
    Ok([
        Click::negative(b.r0, b.c0),
        Click::negative(b.r0, b.c1),
        Click::negative(b.r1, b.c0),
        Click::negative(b.r1, b.c1),
    ])
}

/// One negative click per polygon vertex.
pub fn polygon_to_clicks(p: &PolygonPrompt) -> Result<Vec<Click>> {
    if p.vertices.len() < 3 {
        return Err(Error::InvalidPrompt {
            element: "polygon".into(),
            reason: format!("needs at least 3 vertices, got {}", p.vertices.len()),
        });
    }
    Ok(p.vertices.iter().map(|&[r, c]| Click::negative(r, c)).collect())
}

/// Resamples a scribble at arc-length intervals of `spacing` pixels; both
/// endpoints are always included and samples round to the nearest pixel.
pub fn scribble_to_clicks(s: &ScribblePrompt, spacing: u32) -> Result<Vec<Click>> {
    let invalid = |reason: String| Error::InvalidPrompt { element: "scribble".into(), reason };
    if s.path.is_empty() {
        return Err(invalid("empty path".into()));
    }
    if spacing == 0 {
        return Err(invalid("spacing must be >= 1".into()));
    }
    let pts: Vec<(f64, f64)> = s.path.iter().map(|&[r, c]| (r as f64, c as f64)).collect();
    let seg_len: Vec<f64> = pts
        .windows(2)
        .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
        .collect();
    let total: f64 = seg_len.iter().sum();

    let mut targets = Vec::new();
    let mut t = 0.0;
    while t < total {
        targets.push(t);
        t += spacing as f64;
    }
    targets.push(total);

    let mut clicks: Vec<Click> = Vec::with_capacity(targets.len());
    let mut seg = 0;
    let mut seg_start = 0.0;
    for target in targets {
        while seg < seg_len.len() && seg_start + seg_len[seg] < target {
            seg_start += seg_len[seg];
            seg += 1;
        }
        let (r, c) = if seg >= seg_len.len() {
            *pts.last().unwrap()
        } else if seg_len[seg] == 0.0 {
            pts[seg]
        } else {
            let f = ((target - seg_start) / seg_len[seg]).clamp(0.0, 1.0);
            let (a, b) = (pts[seg], pts[seg + 1]);
            (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1))
        };
        let click = Click { row: r.round() as i64, col: c.round() as i64, polarity: s.polarity };
        if clicks.last() != Some(&click) {
            clicks.push(click);
        }
    }
    Ok(clicks)
}

/// Rasterizes `prompts` onto an `h × w` map with scribble spacing equal to
/// the click radius (at least one pixel).
pub fn rasterize(prompts: &PromptSet, h: usize, w: usize, radius: u32) -> Result<DensePromptMap> {
    rasterize_with_spacing(prompts, h, w, radius, radius.max(1))
}

fn located(kind: &'static str, i: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::InvalidPrompt { reason, .. } => {
            Error::InvalidPrompt { element: format!("{kind}[{i}]"), reason }
        }
        other => other,
    }
}

pub fn rasterize_with_spacing(
    prompts: &PromptSet,
    h: usize,
    w: usize,
    radius: u32,
    spacing: u32,
) -> Result<DensePromptMap> {
    let mut map = DensePromptMap::new(h, w);
    let in_bounds = |kind: &str, i: usize, r: i64, c: i64| {
        check_point(r, c, h, w).map_err(|reason| Error::InvalidPrompt {
            element: format!("{kind}[{i}]"),
            reason,
        })
    };

    for (i, click) in prompts.clicks.iter().enumerate() {
        map.paint_click(click, radius).map_err(located("clicks", i))?;
    }
    for (i, b) in prompts.boxes.iter().enumerate() {
        let corners = box_to_clicks(b).map_err(located("boxes", i))?;
        for c in &corners {
            in_bounds("boxes", i, c.row, c.col)?;
        }
        for c in &corners {
            map.paint_click(c, radius)?;
        }
    }
    for (i, p) in prompts.polygons.iter().enumerate() {
        let clicks = polygon_to_clicks(p).map_err(located("polygons", i))?;
        for c in &clicks {
            in_bounds("polygons", i, c.row, c.col)?;
        }
        for c in &clicks {
            map.paint_click(c, radius)?;
        }
    }
    for (i, s) in prompts.scribbles.iter().enumerate() {
        for &[r, c] in &s.path {
            in_bounds("scribbles", i, r, c)?;
        }
        for c in scribble_to_clicks(s, spacing).map_err(located("scribbles", i))? {
            map.paint_click(&c, radius)?;
        }
    }
    if let Some(mask) = &prompts.mask {
        map.set_mask(mask)?;
    }
    Ok(map)
}
