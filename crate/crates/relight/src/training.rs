//! The training loop: batches, loss log, periodic checkpoints and resume.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use relight_core::{ArchConfig, ModelBundle, StepLosses, Trainer, Variant};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{batch_indices, Dataset};
use crate::error::{Error, Result};

pub const LOSS_LOG: &str = "loss.log";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub no_adv: bool,
    /// Structural ablation applied on top of the configured architecture.
    pub ablate: Option<Variant>,
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub arch: ArchConfig,
    pub generator_params: usize,
    pub discriminator_params: usize,
    pub pairs: usize,
    /// Steps run by this invocation.
    pub steps: u64,
    pub last: Option<StepLosses>,
    pub final_checkpoint: PathBuf,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.ckpt")
}

/// One loss-log line, without the newline. `{}` prints the shortest
/// representation that parses back to the same value.
pub fn log_line(step: u64, l: &StepLosses) -> String {
    let mut s = step.to_string();
    for (name, v) in l.fields() {
        let _ = write!(s, "\t{name}={v}");
    }
    s
}

/// Parses a loss log into `(step, [(name, value)])` entries.
pub fn parse_log(text: &str) -> std::result::Result<Vec<(u64, Vec<(String, f64)>)>, String> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|line| {
            let mut f = line.split('\t');
            let step = f
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| format!("bad step in `{line}`"))?;
            let values = f
                .map(|kv| {
                    let (k, v) = kv.split_once('=').ok_or_else(|| format!("bad field `{kv}`"))?;
                    let v = v.parse().map_err(|_| format!("bad value `{kv}`"))?;
                    Ok((k.to_string(), v))
                })
                .collect::<std::result::Result<_, String>>()?;
            Ok((step, values))
        })
        .collect()
}

pub fn effective_arch(config: &TrainConfig, opts: &RunOptions) -> ArchConfig {
    match opts.ablate {
        Some(v) => v.apply(&config.arch),
        None => config.arch.clone(),
    }
}

/// Existing log lines up to and including `step`, for continuing a run
/// in the same directory.
fn log_prefix(path: &Path, step: u64) -> Result<String> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(String::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut kept = String::new();
    for line in text.lines() {
        let s: Option<u64> = line.split('\t').next().and_then(|s| s.parse().ok());
        if s.is_some_and(|s| s <= step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    Ok(kept)
}

/// Trains on the corpus at `data`, writing the loss log and checkpoints
/// into `out`. Progress lines go to `progress`.
pub fn train(
    data: &Path,
    config: &TrainConfig,
    out: &Path,
    opts: &RunOptions,
    progress: &mut dyn Write,
) -> Result<RunSummary> {
    config.validate()?;
    let arch = effective_arch(config, opts);
    arch.validate()?;
    let weights = if opts.no_adv {
        config.weights.without_adversarial()
    } else {
        config.weights
    };

    let native = Dataset::native_resolution(data)?;
    let factor = config.shrink_factor()?;
    if native != arch.resolution * factor {
        return Err(Error::usage(format!(
            "corpus images are {native}x{native}; resolution {} with resize_factor {} needs {}x{}",
            arch.resolution,
            config.resize_factor,
            arch.resolution * factor,
            arch.resolution * factor
        )));
    }
    let dataset = Dataset::load(data, arch.resolution, config.max_pairs)?;

    let mut trainer = match &opts.resume {
        Some(path) => {
            let parts = Checkpoint::load(path)?.into_parts(path)?;
            if parts.bundle.arch() != &arch {
                return Err(Error::format(path, "checkpoint architecture differs from the configured one"));
            }
            parts.into_trainer(config.adam, weights, path)?
        }
        None => Trainer::new(ModelBundle::new(&arch, config.seed)?, config.adam, weights)?,
    };
    let start = trainer.steps();
    if start > config.steps {
        return Err(Error::usage(format!(
            "checkpoint is at step {start}, beyond the configured {} steps",
            config.steps
        )));
    }

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(LOSS_LOG);
    let prefix = if opts.resume.is_some() { log_prefix(&log_path, start)? } else { String::new() };
    fs::write(&log_path, &prefix).map_err(|e| Error::io(&log_path, e))?;
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let generator_params = trainer.bundle.generator.num_scalars();
    let discriminator_params = trainer.bundle.discriminators.num_scalars();
    let label = opts.ablate.unwrap_or(Variant::Full).label();
    let _ = writeln!(
        progress,
        "variant={label}\tgenerator_params={generator_params}\tdiscriminator_params={discriminator_params}\tpairs={}\tresolution={}\tadversarial={}",
        dataset.len(),
        arch.resolution,
        weights.has_adversarial()
    );

    let mut last = None;
    for step in start + 1..=config.steps {
        let idx = batch_indices(config.seed, step, config.batch_size, dataset.len());
        let batch = dataset.batch(&idx)?;
        let losses = trainer.step(&batch).map_err(|source| Error::Step { step, source })?;
        writeln!(log, "{}", log_line(step, &losses)).map_err(|e| Error::io(&log_path, e))?;
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
            Checkpoint::from_trainer(&trainer)?.save(&out.join(checkpoint_name(step)))?;
        }
        if step % 100 == 0 || step == config.steps {
            let _ = writeln!(progress, "step {step}/{}\tl1_total={}\ttotal={}", config.steps, losses.l1_total, losses.total);
        }
        last = Some(losses);
    }
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    Checkpoint::from_trainer(&trainer)?.save(&final_checkpoint)?;
    Ok(RunSummary {
        arch,
        generator_params,
        discriminator_params,
        pairs: dataset.len(),
        steps: config.steps - start,
        last,
        final_checkpoint,
    })
}
