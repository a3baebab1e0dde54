use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use promptseg::eval::{run_benchmark, write_report, BenchConfig, EvalOptions, MAX_CLICKS};
use promptseg::model::load_checkpoint;
use promptseg::preprocess::ResizeMode;
use promptseg::training::{fit, load_dataset, TrainConfig, Trainer};
use promptseg_server::ServiceConfig;

#[derive(Parser)]
#[command(name = "promptseg", version, about = "Interactive segmentation with dense visual prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML config, writing checkpoints and metrics to OUT.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint that carries optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the click benchmark over a dataset folder.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Folder with images/NAME.png and masks/NAME.png.
        #[arg(long)]
        data: PathBuf,
        /// Also measure latency over a GRID×GRID lattice of clicks.
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long, default_value_t = MAX_CLICKS)]
        max_clicks: usize,
        #[arg(long)]
        no_mask_feedback: bool,
        /// Report directory.
        #[arg(long, default_value = "eval-report")]
        out: PathBuf,
    },
    /// Serve the session API.
    Serve {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        addr: Option<String>,
        /// TOML service config; PROMPTSEG_* variables override it, flags override both.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        cache_bytes: Option<usize>,
    },
}

fn train(config: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let cfg: TrainConfig = toml::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(load_checkpoint(p)?, cfg.clone())?,
        None => Trainer::new(cfg.clone())?,
    };
    let data = cfg.load_data()?;
    log::info!("{} training samples, resuming at step {}", data.len(), trainer.step());
    let spe = trainer.steps_per_epoch(data.len());
    let log = fit(&mut trainer, &data, Some(out), |r| {
        if r.step % spe == 0 {
            log::info!("step {} epoch {} lr {:.2e} loss {:.4}", r.step, r.epoch, r.lr, r.loss);
        }
    })?;
    if let Some(last) = log.metrics.last() {
        println!("epoch {} mIoU@1 {:.4} NoC90 {:.2}", last.epoch, last.miou1, last.noc90);
    }
    println!("wrote {}", out.join("final.ckpt").display());
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, grid: Option<usize>, max_clicks: usize, feedback: bool, out: &Path) -> Result<()> {
    if max_clicks == 0 {
        bail!("--max-clicks must be at least 1");
    }
    let model = load_checkpoint(ckpt)?.model;
    let size = model.config().input_size;
    let samples = load_dataset(data)?
        .iter()
        .map(|s| s.resized(size, ResizeMode::Test))
        .collect::<promptseg::Result<Vec<_>>>()?;
    let cfg = BenchConfig { options: EvalOptions { max_clicks, mask_feedback: feedback }, grid, seed: 0 };
    let report = run_benchmark(&model, &samples, &cfg)?;
    write_report(&report, out)?;
    let a = &report.aggregate;
    println!(
        "{} samples  NoC90 {:.2}  NoC95 {:.2}  NoF90 {}  NoF95 {}  mIoU@1 {:.4}",
        a.samples,
        a.noc90,
        a.noc95,
        a.nof90,
        a.nof95,
        a.miou_at(1)
    );
    if let Some(sat) = report.timings.as_ref().and_then(|t| t.sat.as_ref()) {
        println!(
            "SAT {} prompts: encode {:.1} ms, {:.2} ms per prompt, total {:.1} ms",
            sat.prompts_issued,
            sat.encode_seconds * 1e3,
            sat.per_prompt_seconds * 1e3,
            sat.total_seconds * 1e3
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn serve(ckpt: Option<PathBuf>, addr: Option<String>, config: Option<&Path>, cache_bytes: Option<usize>) -> Result<()> {
    let mut cfg = ServiceConfig::load(config)?;
    if ckpt.is_some() {
        cfg.ckpt = ckpt;
    }
    if let Some(a) = addr {
        cfg.addr = a;
    }
    if let Some(b) = cache_bytes {
        cfg.cache_bytes = b;
    }
    tokio::runtime::Runtime::new()?.block_on(promptseg_server::serve(&cfg))?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { config, out, resume } => train(&config, &out, resume.as_deref()),
        Command::Eval { ckpt, data, grid, max_clicks, no_mask_feedback, out } => {
            eval(&ckpt, &data, grid, max_clicks, !no_mask_feedback, &out)
        }
        Command::Serve { ckpt, addr, config, cache_bytes } => serve(ckpt, addr, config.as_deref(), cache_bytes),
    }
}
