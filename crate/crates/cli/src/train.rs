use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};

use unwarp_core::image::write_atomic;
use unwarp_core::model::{
    train, Checkpoint, FlowTarget, ModelConfig, ParamStore, QueryMode, TrainConfig, TrainMeta, TrainOptions,
    TrainSample, UpsampleMode,
};
use unwarp_core::synth::load_dataset;

use crate::{ensure_writable, precision_from_env, UsageError, DEFAULT_SEED};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Tiny,
    Toy,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum UpsampleFlag {
    Learned,
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum QueryFlag {
    Learned,
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FlowFlag {
    Continuous,
    Sentinel,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (with manifest.jsonl).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint (same flags as the original run).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    preset: Preset,
    /// Network input side; defaults to the preset's.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr_max: f64,
    #[arg(long, value_enum, default_value_t = UpsampleFlag::Learned)]
    upsample: UpsampleFlag,
    #[arg(long, value_enum, default_value_t = QueryFlag::Learned)]
    query: QueryFlag,
    #[arg(long, value_enum, default_value_t = FlowFlag::Continuous)]
    flow: FlowFlag,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Disable colour jitter.
    #[arg(long)]
    no_jitter: bool,
    /// Write an intermediate checkpoint every N steps.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Stop after this many schedule steps (the run can be resumed).
    #[arg(long)]
    stop_after: Option<usize>,
    /// Loss trace CSV; defaults to the checkpoint path with `.losses.csv`.
    #[arg(long)]
    loss_log: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn model_config(a: &TrainArgs) -> ModelConfig {
    let mut cfg = match a.preset {
        Preset::Tiny => ModelConfig::tiny(),
        Preset::Toy => ModelConfig::toy(),
        Preset::Full => ModelConfig::paper(),
    };
    if let Some(s) = a.size {
        cfg = cfg.with_size(s, s);
    }
    cfg.upsample = match a.upsample {
        UpsampleFlag::Learned => UpsampleMode::Learned,
        UpsampleFlag::Bilinear => UpsampleMode::Bilinear,
    };
    cfg.query = match a.query {
        QueryFlag::Learned => QueryMode::Learned,
        QueryFlag::Fixed => QueryMode::Fixed,
    };
    cfg
}

pub fn run(a: TrainArgs) -> Result<()> {
    let cfg = model_config(&a);
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    let mut tc = TrainConfig {
        steps: a.steps,
        batch: a.batch,
        lr_max: a.lr_max,
        seed: a.seed,
        target: match a.flow {
            FlowFlag::Continuous => FlowTarget::Continuous,
            FlowFlag::Sentinel => FlowTarget::Sentinel,
        },
        precision: precision_from_env()?,
        ..Default::default()
    };
    if a.no_jitter {
        tc.jitter = None;
    }
    tc.validate().map_err(|e| UsageError(e.to_string()))?;

    let same_as_resume = a.resume.as_ref().is_some_and(|r| r == &a.out);
    ensure_writable(&a.out, a.force || same_as_resume)?;
    let loss_log = a.loss_log.clone().unwrap_or_else(|| a.out.with_extension("losses.csv"));
    ensure_writable(&loss_log, a.force || same_as_resume)?;

    let init = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.config != cfg {
                bail!(
                    "checkpoint {} was trained with a different architecture:\n  checkpoint: {}\n  flags:      {}",
                    path.display(),
                    ck.config.to_canonical_json(),
                    cfg.to_canonical_json()
                );
            }
            let meta: TrainMeta = serde_json::from_str(&ck.meta).context("checkpoint has no training state to resume")?;
            if meta.train != tc {
                bail!(
                    "resume flags differ from the original run:\n  checkpoint: {}\n  flags:      {}",
                    serde_json::to_string(&meta.train)?,
                    serde_json::to_string(&tc)?
                );
            }
            ck
        }
        None => Checkpoint::new(cfg.clone(), ParamStore::init(&cfg, a.seed)?)?,
    };

    let loaded = load_dataset(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let samples = loaded
        .iter()
        .map(|s| TrainSample::fit(&s.record.image, &s.record.flow, &cfg))
        .collect::<Result<Vec<_>, _>>()?;
    println!(
        "training {} parameters on {} samples at {}x{} ({} steps, batch {})",
        init.params.scalar_count(),
        samples.len(),
        cfg.height,
        cfg.width,
        tc.steps,
        tc.batch
    );
    let t = Instant::now();
    let outcome = train(
        &samples,
        init,
        &tc,
        &TrainOptions {
            checkpoint_path: Some(a.out.clone()),
            checkpoint_every: a.checkpoint_every,
            stop_after: a.stop_after,
        },
    )?;
    let mut csv = String::from("step,lr,loss\n");
    for l in &outcome.losses {
        writeln!(csv, "{},{:e},{}", l.step, l.lr, l.loss).expect("string write");
    }
    write_atomic(&loss_log, csv.as_bytes()).with_context(|| format!("writing {}", loss_log.display()))?;
    let last = outcome.losses.last().map_or(f64::NAN, |l| l.loss);
    println!(
        "step {}/{}  loss {last:.5}  {:.1}s  -> {}",
        outcome.checkpoint.step,
        tc.steps,
        t.elapsed().as_secs_f64(),
        a.out.display()
    );
    Ok(())
}
