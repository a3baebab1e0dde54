//! Brute-force per-pixel rasterization oracle.

use promptseg::prompt::rasterize;
use promptseg::{BoxPrompt, Click, Mask, Polarity, PolygonPrompt, PromptSet, ScribblePrompt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn point(rng: &mut ChaCha8Rng, h: usize, w: usize) -> [i64; 2] {
    [rng.gen_range(0..h as i64), rng.gen_range(0..w as i64)]
}

fn polarity(rng: &mut ChaCha8Rng) -> Polarity {
    if rng.gen_bool(0.5) {
        Polarity::Positive
    } else {
        Polarity::Negative
    }
}

pub fn random_prompt_set(rng: &mut ChaCha8Rng, h: usize, w: usize) -> PromptSet {
    let mut p = PromptSet::default();
    for _ in 0..rng.gen_range(0..6) {
        let [r, c] = point(rng, h, w);
        p.clicks.push(Click { row: r, col: c, polarity: polarity(rng) });
    }
    for _ in 0..rng.gen_range(0..3) {
        let [a, b] = point(rng, h, w);
        let [c, d] = point(rng, h, w);
        p.boxes.push(BoxPrompt { r0: a.min(c), c0: b.min(d), r1: a.max(c), c1: b.max(d) });
    }
    for _ in 0..rng.gen_range(0..3) {
        let n = rng.gen_range(3..7);
        p.polygons.push(PolygonPrompt { vertices: (0..n).map(|_| point(rng, h, w)).collect() });
    }
    for _ in 0..rng.gen_range(0..3) {
        let n = rng.gen_range(1..6);
        p.scribbles.push(ScribblePrompt { path: (0..n).map(|_| point(rng, h, w)).collect(), polarity: polarity(rng) });
    }
    if rng.gen_bool(0.4) {
        let density = rng.gen_range(0.0..1.0);
        p.mask = Some(Mask::from_fn(h, w, |_, _| rng.gen_bool(density)));
    }
    p
}

/// Scribble sample points at arc lengths `0, s, 2s, … < L` and `L`, found by
/// scanning for the first segment whose end reaches each target.
fn scribble_points(path: &[[i64; 2]], spacing: f64) -> Vec<[i64; 2]> {
    let pts: Vec<[f64; 2]> = path.iter().map(|p| [p[0] as f64, p[1] as f64]).collect();
    let mut ends = vec![0.0];
    for k in 1..pts.len() {
        let len = ((pts[k][0] - pts[k - 1][0]).powi(2) + (pts[k][1] - pts[k - 1][1]).powi(2)).sqrt();
        ends.push(ends[k - 1] + len);
    }
    let total = *ends.last().unwrap();
    let mut targets: Vec<f64> = (0..).map(|i| i as f64 * spacing).take_while(|&t| t < total).collect();
    targets.push(total);
    let mut out: Vec<[i64; 2]> = Vec::new();
    for t in targets {
        let at = match (1..pts.len()).find(|&k| ends[k] >= t) {
            None => *pts.last().unwrap(),
            Some(k) => {
                let len = ends[k] - ends[k - 1];
                if len == 0.0 {
                    pts[k - 1]
                } else {
                    let f = ((t - ends[k - 1]) / len).clamp(0.0, 1.0);
                    [pts[k - 1][0] + f * (pts[k][0] - pts[k - 1][0]), pts[k - 1][1] + f * (pts[k][1] - pts[k - 1][1])]
                }
            }
        };
        let q = [at[0].round() as i64, at[1].round() as i64];
        if out.last() != Some(&q) {
            out.push(q);
        }
    }
    out
}

/// Channel-major `3×H×W` map computed pixel by pixel.
pub fn oracle(p: &PromptSet, h: usize, w: usize, radius: u32) -> Vec<f32> {
    let mut centers: Vec<([i64; 2], usize)> = Vec::new();
    let ch = |pol: Polarity| if pol == Polarity::Positive { 0 } else { 1 };
    for c in &p.clicks {
        centers.push(([c.row, c.col], ch(c.polarity)));
    }
    for b in &p.boxes {
        for q in [[b.r0, b.c0], [b.r0, b.c1], [b.r1, b.c0], [b.r1, b.c1]] {
            centers.push((q, 1));
        }
    }
    for poly in &p.polygons {
        for &v in &poly.vertices {
            centers.push((v, 1));
        }
    }
    for s in &p.scribbles {
        for q in scribble_points(&s.path, radius.max(1) as f64) {
            centers.push((q, ch(s.polarity)));
        }
    }
    let r2 = (radius as i64).pow(2);
    let mut out = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for &([cy, cx], c) in &centers {
                if (y as i64 - cy).pow(2) + (x as i64 - cx).pow(2) <= r2 {
                    out[c * h * w + y * w + x] = 1.0;
                }
            }
            if let Some(m) = &p.mask {
                out[2 * h * w + y * w + x] = m.get(y, x) as u8 as f32;
            }
        }
    }
    out
}

fn shuffled(p: &PromptSet, rng: &mut ChaCha8Rng) -> PromptSet {
    let mut q = p.clone();
    q.clicks.shuffle(rng);
    q.boxes.shuffle(rng);
    q.polygons.shuffle(rng);
    q.scribbles.shuffle(rng);
    q
}

/// Runs `cases` random prompt sets; returns the number of permutation checks.
pub fn run(cases: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perms = 0;
    for case in 0..cases {
        let (h, w) = (rng.gen_range(1..40), rng.gen_range(1..40));
        let radius = rng.gen_range(0..7);
        let p = random_prompt_set(&mut rng, h, w);
        let got = rasterize(&p, h, w, radius).map_err(|e| format!("case {case}: {e}"))?;
        let want = oracle(&p, h, w, radius);
        if got.data() != want.as_slice() {
            return Err(format!("case {case}: raster differs from oracle ({h}×{w}, radius {radius})"));
        }
        for _ in 0..3 {
            let q = shuffled(&p, &mut rng);
            let again = rasterize(&q, h, w, radius).map_err(|e| format!("case {case}: {e}"))?;
            if again.data() != got.data() {
                return Err(format!("case {case}: prompt order changed the raster"));
            }
            perms += 1;
        }
    }
    Ok(perms)
}
