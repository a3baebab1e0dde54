//! Benchmark runs and their report files.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{aggregate, evaluate_all, sat_latency, Aggregate, EvalOptions, EvalRecord, SatLatency, Segmenter};
use crate::error::{Error, Result};
use crate::training::Sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub options: EvalOptions,
    /// SAT latency grid side; `None` skips the latency run.
    pub grid: Option<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { options: EvalOptions::default(), grid: None, seed: 0 }
    }
}

/// Wall-clock measurements, kept apart from the deterministic metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_seconds: f64,
    pub mean_encode_seconds: f64,
    pub mean_decode_seconds: f64,
    pub sat: Option<SatLatency>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub fingerprint: String,
    pub seed: u64,
    pub options: EvalOptions,
    pub aggregate: Aggregate,
    pub records: Vec<EvalRecord>,
    #[serde(skip)]
    pub timings: Option<Timings>,
}

pub fn run_benchmark<S: Segmenter>(seg: &S, samples: &[Sample], cfg: &BenchConfig) -> Result<BenchmarkReport> {
    let start = Instant::now();
    let size = seg.input_size();
    if let Some(s) = samples.iter().find(|s| s.gt.shape() != (size, size)) {
        return Err(Error::Dimension(format!(
            "sample {} is {:?}, segmenter expects {size}×{size}",
            s.id,
            s.gt.shape()
        )));
    }
    let records = evaluate_all(seg, samples, &cfg.options)?;
    let aggregate = aggregate(&records)?;
    let sat = match (cfg.grid, samples.first()) {
        (Some(g), Some(s)) => Some(sat_latency(seg, &s.image, g)?),
        _ => None,
    };
    let n = records.len() as f64;
    let decodes: Vec<f64> = records.iter().flat_map(|r| r.decode_seconds.iter().copied()).collect();
    let timings = Timings {
        total_seconds: start.elapsed().as_secs_f64(),
        mean_encode_seconds: records.iter().map(|r| r.encode_seconds).sum::<f64>() / n,
        mean_decode_seconds: decodes.iter().sum::<f64>() / decodes.len().max(1) as f64,
        sat,
    };
    Ok(BenchmarkReport {
        fingerprint: seg.fingerprint(),
        seed: cfg.seed,
        options: cfg.options,
        aggregate,
        records,
        timings: Some(timings),
    })
}

impl BenchmarkReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// One row per record with IoU@1..=max_clicks.
    pub fn to_csv(&self) -> String {
        let cap = self.options.max_clicks;
        let mut out = String::from("id,clicks,noc90,noc95,failed90,failed95");
        for k in 1..=cap {
            write!(out, ",iou@{k}").unwrap();
        }
        out.push('\n');
        for r in &self.records {
            write!(
                out,
                "{},{},{},{},{},{}",
                r.id,
                r.ious.len(),
                r.noc90(),
                r.noc95(),
                r.failed90() as u8,
                r.failed95() as u8
            )
            .unwrap();
            for k in 1..=cap {
                write!(out, ",{:.6}", r.iou_at(k)).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Writes `report.json`, `records.csv` and, if measured, `timings.json`.
pub fn write_report(report: &BenchmarkReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("report.json"), report.to_json())?;
    std::fs::write(out_dir.join("records.csv"), report.to_csv())?;
    if let Some(t) = &report.timings {
        std::fs::write(out_dir.join("timings.json"), serde_json::to_string_pretty(t)? + "\n")?;
    }
    Ok(())
}
