//! Single-prompt evaluation with prompts derived from the ground truth.

use serde::{Deserialize, Serialize};

use super::{iou, Segmenter};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::prompt::{BoxPrompt, Click, Polarity, PolygonPrompt, PromptSet, ScribblePrompt};
use crate::sim::{connected_components, simulate_iterative, NextClick};
use crate::training::Sample;

/// Polygons are thinned to at most this many vertices.
pub const MAX_POLYGON_VERTICES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Click,
    Box,
    Scribble,
    Polygon,
}

impl PromptMode {
    pub const ALL: [PromptMode; 4] = [PromptMode::Click, PromptMode::Box, PromptMode::Scribble, PromptMode::Polygon];
}

fn largest_component(gt: &Mask) -> Vec<(usize, usize)> {
    let mut comps = connected_components(gt);
    // Stable: equal areas keep seed order.
    comps.sort_by_key(|c| std::cmp::Reverse(c.len()));
    comps.into_iter().next().unwrap_or_default()
}

fn center_click(gt: &Mask) -> Result<Click> {
    match simulate_iterative(&Mask::empty(gt.height(), gt.width()), gt)? {
        NextClick::Click(c) => Ok(c),
        NextClick::Converged => Err(Error::Validation("ground truth is empty".into())),
    }
}

/// Unit principal axis of a pixel set.
fn principal_axis(pixels: &[(usize, usize)]) -> [f64; 2] {
    let n = pixels.len() as f64;
    let (my, mx) = pixels.iter().fold((0.0, 0.0), |(a, b), &(r, c)| (a + r as f64, b + c as f64));
    let (my, mx) = (my / n, mx / n);
    let (mut syy, mut sxx, mut sxy) = (0.0, 0.0, 0.0);
    for &(r, c) in pixels {
        let (dy, dx) = (r as f64 - my, c as f64 - mx);
        syy += dy * dy;
        sxx += dx * dx;
        sxy += dy * dx;
    }
    let theta = 0.5 * (2.0 * sxy).atan2(syy - sxx);
    [theta.cos(), theta.sin()]
}

fn scribble(gt: &Mask, radius: u32) -> Result<ScribblePrompt> {
    let center = center_click(gt)?;
    let comp = largest_component(gt);
    let axis = principal_axis(&comp);
    let (h, w) = gt.shape();
    let inside = |r: f64, c: f64| {
        let (ri, ci) = (r.round(), c.round());
        ri >= 0.0 && ci >= 0.0 && (ri as usize) < h && (ci as usize) < w && gt.get(ri as usize, ci as usize)
    };
    let arm = |sign: f64| -> [i64; 2] {
        let (r0, c0) = (center.row as f64, center.col as f64);
        let mut t = 0.0;
        while inside(r0 + sign * (t + 1.0) * axis[0], c0 + sign * (t + 1.0) * axis[1]) {
            t += 1.0;
        }
        let t = (t - radius as f64).max(0.0);
        [(r0 + sign * t * axis[0]).round() as i64, (c0 + sign * t * axis[1]).round() as i64]
    };
    let mut path = vec![arm(-1.0), [center.row, center.col], arm(1.0)];
    path.dedup();
    Ok(ScribblePrompt { path, polarity: Polarity::Positive })
}

/// Convex hull by the monotone chain, counter-clockwise without collinear points.
fn convex_hull(mut pts: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    pts.sort();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (i64, i64), a: (i64, i64), b: (i64, i64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(i64, i64)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn polygon(gt: &Mask, radius: u32) -> Result<PolygonPrompt> {
    let comp = largest_component(gt);
    if comp.is_empty() {
        return Err(Error::Validation("ground truth is empty".into()));
    }
    let (h, w) = gt.shape();
    let n = comp.len() as f64;
    let (cy, cx) = comp.iter().fold((0.0, 0.0), |(a, b), &(r, c)| (a + r as f64, b + c as f64));
    let (cy, cx) = (cy / n, cx / n);
    let mut hull = convex_hull(comp.iter().map(|&(r, c)| (r as i64, c as i64)).collect());
    if hull.len() > MAX_POLYGON_VERTICES {
        let m = hull.len();
        hull = (0..MAX_POLYGON_VERTICES).map(|i| hull[i * m / MAX_POLYGON_VERTICES]).collect();
    }
    let limit = (h + w) as f64;
    let vertices: Vec<[i64; 2]> = hull
        .iter()
        .map(|&(r, c)| {
            let (dy, dx) = (r as f64 - cy, c as f64 - cx);
            let len = (dy * dy + dx * dx).sqrt().max(1e-9);
            let (uy, ux) = (dy / len, dx / len);
            let mut d = radius.max(1) as f64;
            loop {
                let pr = (r as f64 + d * uy).round().clamp(0.0, (h - 1) as f64);
                let pc = (c as f64 + d * ux).round().clamp(0.0, (w - 1) as f64);
                if !gt.get(pr as usize, pc as usize) || d > limit {
                    return [pr as i64, pc as i64];
                }
                d += 1.0;
            }
        })
        .collect();
    if vertices.len() < 3 {
        // Degenerate hulls (lines, points) fall back to the dilated box corners.
        let b = dilated_box(gt, radius)?;
        return Ok(PolygonPrompt { vertices: vec![[b.r0, b.c0], [b.r0, b.c1], [b.r1, b.c1], [b.r1, b.c0]] });
    }
    Ok(PolygonPrompt { vertices })
}

fn dilated_box(gt: &Mask, radius: u32) -> Result<BoxPrompt> {
    let (r0, c0, r1, c1) = gt.bounding_box().ok_or_else(|| Error::Validation("ground truth is empty".into()))?;
    let (h, w) = gt.shape();
    let d = radius.max(1) as i64;
    Ok(BoxPrompt {
        r0: (r0 as i64 - d).max(0),
        c0: (c0 as i64 - d).max(0),
        r1: (r1 as i64 + d).min(h as i64 - 1),
        c1: (c1 as i64 + d).min(w as i64 - 1),
    })
}

/// Builds a single prompt of the given kind from the ground truth.
pub fn derive_prompt(gt: &Mask, mode: PromptMode, radius: u32) -> Result<PromptSet> {
    if gt.is_empty() {
        return Err(Error::Validation("ground truth is empty".into()));
    }
    let mut p = PromptSet::default();
    match mode {
        PromptMode::Click => p.clicks.push(center_click(gt)?),
        PromptMode::Box => p.boxes.push(dilated_box(gt, radius)?),
        PromptMode::Scribble => p.scribbles.push(scribble(gt, radius)?),
        PromptMode::Polygon => p.polygons.push(polygon(gt, radius)?),
    }
    Ok(p)
}

/// IoU of a single prediction from a derived prompt.
pub fn eval_diverse_prompts<S: Segmenter>(seg: &S, sample: &Sample, mode: PromptMode) -> Result<f64> {
    let prompts = derive_prompt(&sample.gt, mode, seg.click_radius())?;
    let emb = seg.embed(&sample.image)?;
    iou(&seg.segment(&emb, &prompts)?, &sample.gt)
}
