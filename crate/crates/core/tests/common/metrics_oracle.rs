//! Scripted mock segmenters with hand-computed metric expectations.

use promptseg::eval::{aggregate, interactive_eval, EvalOptions, Segmenter};
use promptseg::tensor::Tensor;
use promptseg::training::Sample;
use promptseg::{Mask, PromptSet, Result};

pub const SIDE: usize = 20;

/// Ground truth with exactly 100 foreground pixels.
pub fn gt() -> Mask {
    Mask::from_fn(SIDE, SIDE, |r, c| (5..15).contains(&r) && (5..15).contains(&c))
}

/// Answers the k-th click with a mask whose IoU against [`gt`] is the
/// script's k-th value (the last value repeats).
pub struct Scripted {
    pub scripts: Vec<Vec<f64>>,
}

impl Segmenter for Scripted {
    type Embedding = usize;

    fn input_size(&self) -> usize {
        SIDE
    }

    fn click_radius(&self) -> u32 {
        1
    }

    fn fingerprint(&self) -> String {
        "scripted".into()
    }

    fn embed(&self, image: &Tensor<f32>) -> Result<usize> {
        Ok(image.data()[0] as usize)
    }

    fn segment(&self, emb: &usize, prompts: &PromptSet) -> Result<Mask> {
        let script = &self.scripts[*emb];
        let k = prompts.clicks.len().clamp(1, script.len());
        let keep = (script[k - 1] * 100.0).round() as usize;
        let gt = gt();
        let mut seen = 0;
        Ok(Mask::from_fn(SIDE, SIDE, |r, c| {
            let on = gt.get(r, c) && seen < keep;
            seen += gt.get(r, c) as usize;
            on
        }))
    }
}

pub fn sample(script: usize) -> Sample {
    let image = Tensor::from_fn(&[3, SIDE, SIDE], |i| if i == 0 { script as f32 } else { 0.0 });
    Sample::new(format!("mock{script}"), image, gt()).unwrap()
}

fn check(cond: bool, what: &str) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.to_string())
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

/// Runs every branch; returns the number of checks passed.
pub fn run() -> std::result::Result<usize, String> {
    let mut never90 = vec![0.5; 20];
    never90[0] = 0.2;
    let mut at_cap = vec![0.91; 20];
    at_cap[19] = 0.96;
    let seg = Scripted {
        scripts: vec![
            vec![0.5, 0.8, 0.92, 0.96],          // early convergence at click 4
            vec![0.3, 0.6, 0.91, 0.93],          // 90 at click 3, never 95
            never90,                             // never converges
            at_cap,                              // 95 reached exactly at the cap
            vec![0.97],                          // converges on the first click
            vec![0.1, 0.2, 0.4, 0.6, 0.9, 0.95], // 90 at click 5
        ],
    };
    let opts = EvalOptions::default();
    let rec: Vec<_> = (0..seg.scripts.len())
        .map(|i| interactive_eval(&seg, &sample(i), &opts))
        .collect::<Result<_>>()
        .map_err(|e| e.to_string())?;
    let mut n = 0;
    let mut ck = |cond: bool, what: &str| {
        n += 1;
        check(cond, what)
    };

    ck(rec[0].ious == vec![0.5, 0.8, 0.92, 0.96], "script 0 IoU sequence")?;
    ck(rec[0].noc90() == 3 && rec[0].noc95() == 4, "script 0 NoC90 = 3, NoC95 = 4")?;
    ck(!rec[0].failed90() && !rec[0].failed95(), "script 0 has no failures")?;

    ck(rec[1].ious.len() == 20, "script 1 runs to the cap")?;
    ck(rec[1].noc90() == 3 && rec[1].noc95() == 20, "script 1 NoC95 counted at the cap")?;
    ck(rec[1].failed95() && !rec[1].failed90(), "script 1 flagged for NoF95 only")?;

    ck(rec[2].noc90() == 20 && rec[2].noc95() == 20, "script 2 never converges")?;
    ck(rec[2].failed90() && rec[2].failed95(), "script 2 fails both targets")?;

    ck(rec[3].ious.len() == 20 && rec[3].noc95() == 20 && !rec[3].failed95(), "script 3 converges at the cap")?;
    ck(rec[3].noc90() == 1, "script 3 NoC90 = 1")?;

    ck(rec[4].ious == vec![0.97] && rec[4].noc90() == 1 && rec[4].noc95() == 1, "script 4 converges at click 1")?;
    ck(close(rec[4].iou_at(5), 0.97), "script 4 IoU carries forward")?;

    ck(rec.iter().all(|r| r.ious.len() <= 20), "records never exceed 20 clicks")?;
    ck(rec.iter().all(|r| r.noc90() <= r.noc95()), "NoC90 <= NoC95 per record")?;

    let single = aggregate(&rec[..1]).map_err(|e| e.to_string())?;
    ck(single.noc90 == 3.0 && single.noc95 == 4.0 && single.nof95 == 0, "singleton aggregate")?;
    ck(close(single.miou_at(2), 0.8) && close(single.miou_at(20), 0.96), "singleton mIoU curve")?;

    let pair = aggregate(&[rec[0].clone(), rec[5].clone()]).map_err(|e| e.to_string())?;
    ck(pair.noc90 == 4.0, "NoC90 of 3 and 5 averages to 4.0")?;

    let all = aggregate(&rec).map_err(|e| e.to_string())?;
    ck(all.nof95 == 2 && all.nof90 == 1, "NoF95 = 2, NoF90 = 1")?;
    ck(close(all.noc90, (3 + 3 + 20 + 1 + 1 + 5) as f64 / 6.0), "NoC90 mean over six scripts")?;
    ck(close(all.noc95, (4 + 20 + 20 + 20 + 1 + 6) as f64 / 6.0), "NoC95 mean over six scripts")?;
    let m1 = (0.5 + 0.3 + 0.2 + 0.91 + 0.97 + 0.1) / 6.0;
    let m5 = (0.96 + 0.93 + 0.5 + 0.91 + 0.97 + 0.9) / 6.0;
    ck(close(all.miou_at(1), m1) && close(all.miou_at(5), m5), "mIoU@1 and mIoU@5 by hand")?;
    ck(all.nof90 <= all.nof95, "NoF90 <= NoF95")?;
    Ok(n)
}
