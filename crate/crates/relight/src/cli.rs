//! Command-line surface. [`run`] executes a parsed command; [`main_with`]
//! adds the single-line `error:` reporting used by the binary.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use relight_core::synth::Split;
use relight_core::train::predict;
use relight_core::Variant;

use crate::ablate;
use crate::checkpoint::Checkpoint;
use crate::config::{TrainConfig, CONFIG_HELP};
use crate::corpus::{build_corpus, CorpusSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{self, Prediction};
use crate::image_io;
use crate::training::{self, RunOptions};

#[derive(Debug, Parser)]
#[command(name = "relight", version, about = "Light source transfer on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic corpus and its pair manifest.
    GenData(GenDataArgs),
    /// Train the network on a corpus.
    #[command(after_long_help = CONFIG_HELP)]
    Train(TrainArgs),
    /// Relight one image with a trained checkpoint.
    Infer(InferArgs),
    /// Score a checkpoint (or a baseline) on every pair of a corpus.
    Eval(EvalArgs),
    /// Train and score the four calibration/multi-scale variants.
    #[command(after_long_help = CONFIG_HELP)]
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub scenes: u32,
    /// Image side: a power of two in [32, 256].
    #[arg(long)]
    pub res: usize,
    #[arg(long)]
    pub seed: u32,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
}

fn parse_ablation(s: &str) -> std::result::Result<Variant, String> {
    match Variant::parse(s) {
        Some(v) if v != Variant::Full => Ok(v),
        _ => Err(format!("expected cal, ms or cal+ms, got `{s}`")),
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// key = value file; see below for the keys.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Reconstruction losses only; discriminators stay untouched.
    #[arg(long)]
    pub no_adv: bool,
    /// Remove feature calibration (cal), multi-scale fusion (ms) or both (cal+ms).
    #[arg(long, value_parser = parse_ablation)]
    pub ablate: Option<Variant>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the shadow-free and relit intermediate images here.
    #[arg(long)]
    pub dump_aux: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Baseline {
    /// Score the unmodified inputs.
    Input,
    /// Score the targets against themselves.
    Target,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "baseline")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Per-pair LPIPS values in manifest order, one per line.
    #[arg(long)]
    pub lpips_file: Option<PathBuf>,
    /// Score a reference predictor instead of a checkpoint.
    #[arg(long, value_enum, conflicts_with = "ckpt")]
    pub baseline: Option<Baseline>,
    /// Resolution for baselines; defaults to the stored image size.
    #[arg(long, requires = "baseline")]
    pub res: Option<usize>,
    /// Also write metrics.txt and metrics.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Corpus to score on; defaults to --data.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Lines `<variant>\t<lpips>` with one value per scored pair and variant.
    #[arg(long)]
    pub lpips_file: Option<PathBuf>,
    #[arg(long)]
    pub no_adv: bool,
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub fn infer(args: &InferArgs) -> Result<()> {
    let parts = Checkpoint::load(&args.ckpt)?.into_parts(&args.ckpt)?;
    let bundle = parts.bundle;
    let r = bundle.arch().resolution;
    let image = image_io::read_png(&args.input)?;
    let side = image.shape().h;
    if side != r {
        return Err(Error::Image {
            path: args.input.clone(),
            detail: format!("expected a {r}x{r} image, got {side}x{side}"),
        });
    }
    let (y, shadow_free, relit) = predict(&bundle, &image_io::to_signed(&image))?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    image_io::write_png(&args.out, &image_io::to_unit(&y))?;
    if let Some(dir) = &args.dump_aux {
        create_dir(dir)?;
        image_io::write_png(dir.join("shadow_free.png"), &image_io::to_unit(&shadow_free))?;
        image_io::write_png(dir.join("relit.png"), &image_io::to_unit(&relit))?;
    }
    Ok(())
}

fn eval_cmd(args: &EvalArgs, stdout: &mut dyn Write) -> Result<()> {
    let bundle = match &args.ckpt {
        Some(p) => Some(Checkpoint::load(p)?.into_parts(p)?.bundle),
        None => None,
    };
    let resolution = match (&bundle, args.res) {
        (Some(b), _) => b.arch().resolution,
        (None, Some(r)) => r,
        (None, None) => Dataset::native_resolution(&args.data)?,
    };
    let data = Dataset::load(&args.data, resolution, 0)?;
    let lpips = args
        .lpips_file
        .as_deref()
        .map(|p| eval::read_lpips(p, data.len()))
        .transpose()?;
    let prediction = match (&bundle, args.baseline) {
        (Some(b), _) => Prediction::Model(b),
        (None, Some(Baseline::Target)) => Prediction::Target,
        (None, _) => Prediction::Input,
    };
    let report = eval::evaluate(&data, &prediction, lpips.as_deref())?;
    let (kv, json) = (report.to_kv(), report.to_json());
    let _ = write!(stdout, "{kv}{json}\n");
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        for (name, text) in [("metrics.txt", kv), ("metrics.json", json + "\n")] {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let spec = CorpusSpec {
                scenes: a.scenes,
                resolution: a.res,
                seed: a.seed,
                split: match a.split {
                    SplitArg::Train => Split::Train,
                    SplitArg::Val => Split::Val,
                },
            };
            let s = build_corpus(&spec, &a.out)?;
            let _ = writeln!(
                stdout,
                "scenes={}\tlit_images={}\tshadow_free_images={}\tpairs={}",
                s.scenes, s.lit_images, s.shadow_free_images, s.pairs
            );
        }
        Command::Train(a) => {
            let config = TrainConfig::load(&a.config)?;
            let opts = RunOptions {
                no_adv: a.no_adv,
                ablate: a.ablate,
                resume: a.resume,
            };
            let s = training::train(&a.data, &config, &a.out, &opts, stdout)?;
            let _ = writeln!(stdout, "checkpoint={}", s.final_checkpoint.display());
        }
        Command::Infer(a) => infer(&a)?,
        Command::Eval(a) => eval_cmd(&a, stdout)?,
        Command::Ablate(a) => {
            let config = TrainConfig::load(&a.config)?;
            let val = a.val.as_deref().unwrap_or(&a.data);
            let rows = ablate::ablate(&a.data, val, &config, &a.out, a.no_adv, a.lpips_file.as_deref(), stdout)?;
            let _ = write!(stdout, "{}", ablate::format_table(&rows, a.lpips_file.is_some()));
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
/// Failures print one line starting with `error:` to `stderr`.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = write!(stdout, "{}", e.render());
            return 0;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let msg = first.strip_prefix("error: ").unwrap_or(first);
            let _ = writeln!(stderr, "error: {msg}");
            return 2;
        }
    };
    match run(cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(stderr, "error: {msg}");
            1
        }
    }
}
