//! Brute-force oracle for the iterative click simulator.

use promptseg::sim::{simulate_iterative, NextClick};
use promptseg::{Click, Mask, Polarity};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 8-connected labels by repeated min-label propagation until nothing changes.
fn labels(m: &Mask) -> Vec<Option<usize>> {
    let (h, w) = m.shape();
    let mut lab: Vec<Option<usize>> = (0..h * w).map(|i| m.data()[i].then_some(i)).collect();
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                let Some(mut best) = lab[y * w + x] else { continue };
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        if let Some(l) = lab[ny as usize * w + nx as usize] {
                            best = best.min(l);
                        }
                    }
                }
                if Some(best) != lab[y * w + x] {
                    lab[y * w + x] = Some(best);
                    changed = true;
                }
            }
        }
        if !changed {
            return lab;
        }
    }
}

pub fn oracle_click(pred: &Mask, gt: &Mask) -> Option<Click> {
    let (h, w) = gt.shape();
    let fneg = Mask::from_fn(h, w, |r, c| gt.get(r, c) && !pred.get(r, c));
    let fpos = Mask::from_fn(h, w, |r, c| pred.get(r, c) && !gt.get(r, c));
    // (area, kind rank, seed index, pixels)
    let mut regions: Vec<(usize, u8, usize, Vec<usize>)> = Vec::new();
    for (rank, m) in [(0u8, &fneg), (1u8, &fpos)] {
        let lab = labels(m);
        let mut seeds: Vec<usize> = lab.iter().flatten().copied().collect();
        seeds.sort();
        seeds.dedup();
        for s in seeds {
            let px: Vec<usize> = (0..h * w).filter(|&i| lab[i] == Some(s)).collect();
            regions.push((px.len(), rank, s, px));
        }
    }
    let (_, rank, _, pixels) = regions
        .into_iter()
        .min_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)))?;
    let inside: Vec<bool> = (0..h * w).map(|i| pixels.contains(&i)).collect();
    let outside: Vec<usize> = (0..h * w).filter(|&i| !inside[i]).collect();
    let dist = |i: usize| -> u64 {
        let (y, x) = ((i / w) as i64, (i % w) as i64);
        if outside.is_empty() {
            let m = (y + 1).min(h as i64 - y).min(x + 1).min(w as i64 - x) as u64;
            return m * m;
        }
        outside
            .iter()
            .map(|&j| {
                let (oy, ox) = ((j / w) as i64, (j % w) as i64);
                ((y - oy).pow(2) + (x - ox).pow(2)) as u64
            })
            .min()
            .unwrap()
    };
    let mut best = pixels[0];
    for &p in &pixels {
        if dist(p) > dist(best) {
            best = p;
        }
    }
    let polarity = if rank == 0 { Polarity::Positive } else { Polarity::Negative };
    Some(Click { row: (best / w) as i64, col: (best % w) as i64, polarity })
}

fn blobs(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let n = rng.gen_range(0..4);
    let shapes: Vec<(f64, f64, f64, bool)> = (0..n)
        .map(|_| (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64), rng.gen_range(0.5..6.0), rng.gen_bool(0.5)))
        .collect();
    Mask::from_fn(h, w, |r, c| {
        shapes.iter().any(|&(cy, cx, s, square)| {
            let (dy, dx) = (r as f64 - cy, c as f64 - cx);
            if square {
                dy.abs() <= s && dx.abs() <= s
            } else {
                dy * dy + dx * dx <= s * s
            }
        })
    })
}

/// A mix of constructed pairs: blob unions, noisy copies, converged and
/// whole-image cases.
pub fn pair(rng: &mut ChaCha8Rng, case: usize) -> (Mask, Mask) {
    let (h, w) = (rng.gen_range(1..18), rng.gen_range(1..18));
    let gt = blobs(rng, h, w);
    let pred = match case % 5 {
        0 => Mask::empty(h, w),
        1 => gt.clone(),
        2 => Mask::from_fn(h, w, |r, c| gt.get(r, c) ^ rng.gen_bool(0.15)),
        3 => blobs(rng, h, w),
        _ => Mask::from_fn(h, w, |_, _| true),
    };
    (pred, gt)
}

/// Returns how many cases produced a click (the rest converged).
pub fn run(cases: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clicks = 0;
    for case in 0..cases {
        let (pred, gt) = pair(&mut rng, case);
        let got = simulate_iterative(&pred, &gt).map_err(|e| format!("case {case}: {e}"))?;
        let want = oracle_click(&pred, &gt);
        match (got, want) {
            (NextClick::Converged, None) => {}
            (NextClick::Click(a), Some(b)) if a == b => clicks += 1,
            (got, want) => return Err(format!("case {case}: simulator {got:?}, oracle {want:?}")),
        }
    }
    Ok(clicks)
}
