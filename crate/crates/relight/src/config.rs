//! Training configuration as flat `key = value` text.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use relight_core::{AdamConfig, ArchConfig, LossWeights, Norm};

use crate::error::{Error, Result};

/// Every accepted key, in the order [`TrainConfig::to_text`] writes them.
pub const KEYS: [&str; 27] = [
    "steps",
    "batch_size",
    "seed",
    "checkpoint_every",
    "resize_factor",
    "max_pairs",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "base_channels",
    "resolution",
    "fusion_channels",
    "render_branch_channels",
    "render_kernels",
    "reduction",
    "res_blocks",
    "disc_channels",
    "calibrate",
    "multiscale",
    "norm",
    "w_recon_scene",
    "w_recon_shadow",
    "w_recon_final",
    "w_adv_scene",
    "w_adv_shadow",
    "shadow_threshold",
];

/// Help text listing the config keys; shown by `relight train --help`.
pub const CONFIG_HELP: &str = "\
CONFIG FILE
  One `key = value` per line; `#` starts a comment. Unlisted keys keep
  their defaults (the desk preset). Keys:
    steps                   optimizer steps (2000)
    batch_size              pairs per step (2)
    seed                    initialization and batch order seed (7)
    checkpoint_every        steps between checkpoints, 0 = only at the end (500)
    resize_factor           corpus-to-model scale, 1/k for integer k (0.5)
    max_pairs               use only the first N manifest pairs, 0 = all (0)
    lr, beta1, beta2        Adam hyperparameters (0.0002, 0.5, 0.999)
    adam_eps                Adam denominator offset (1e-8)
    base_channels           full-resolution feature width, multiple of 4 (8)
    resolution              model input side, power of two >= 16 (64)
    fusion_channels         multi-scale branch width (32)
    render_branch_channels  width of each re-renderer branch (16)
    render_kernels          comma-separated odd kernel sizes (3,7,13,19,25)
    reduction               recalibration squeeze ratio (4)
    res_blocks              bottleneck residual blocks (9)
    disc_channels           first discriminator layer width (64)
    calibrate, multiscale   true | false (true, true)
    norm                    instance | none (instance)
    w_recon_scene, w_recon_shadow, w_recon_final
                            L1 weights (1, 1, 1)
    w_adv_scene, w_adv_shadow
                            adversarial weights (0.01, 0.01)
    shadow_threshold        shadow discriminator clamp (0.058823529411764705)";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Model resolution over corpus resolution.
    pub resize_factor: f64,
    /// 0 uses every pair.
    pub max_pairs: usize,
    pub adam: AdamConfig,
    pub arch: ArchConfig,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 2,
            seed: 7,
            checkpoint_every: 500,
            resize_factor: 0.5,
            max_pairs: 0,
            adam: AdamConfig::default(),
            arch: ArchConfig::desk(),
            weights: LossWeights::default(),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("`{key}`: cannot parse `{v}`"))
}

fn parse_bool(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{key}`: expected true or false, got `{v}`")),
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let a = &mut self.arch;
        let w = &mut self.weights;
        match key {
            "steps" => self.steps = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "resize_factor" => self.resize_factor = parse_num(key, v)?,
            "max_pairs" => self.max_pairs = parse_num(key, v)?,
            "lr" => self.adam.lr = parse_num(key, v)?,
            "beta1" => self.adam.beta1 = parse_num(key, v)?,
            "beta2" => self.adam.beta2 = parse_num(key, v)?,
            "adam_eps" => self.adam.eps = parse_num(key, v)?,
            "base_channels" => a.base_channels = parse_num(key, v)?,
            "resolution" => a.resolution = parse_num(key, v)?,
            "fusion_channels" => a.fusion_channels = parse_num(key, v)?,
            "render_branch_channels" => a.render_branch_channels = parse_num(key, v)?,
            "render_kernels" => {
                a.render_kernels = v
                    .split(',')
                    .map(|k| parse_num(key, k.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "reduction" => a.reduction = parse_num(key, v)?,
            "res_blocks" => a.res_blocks = parse_num(key, v)?,
            "disc_channels" => a.disc_channels = parse_num(key, v)?,
            "calibrate" => a.calibrate = parse_bool(key, v)?,
            "multiscale" => a.multiscale = parse_bool(key, v)?,
            "norm" => {
                a.norm = match v {
                    "instance" => Norm::Instance,
                    "none" => Norm::None,
                    _ => return Err(format!("`{key}`: expected instance or none, got `{v}`")),
                }
            }
            "w_recon_scene" => w.recon_scene = parse_num(key, v)?,
            "w_recon_shadow" => w.recon_shadow = parse_num(key, v)?,
            "w_recon_final" => w.recon_final = parse_num(key, v)?,
            "w_adv_scene" => w.adv_scene = parse_num(key, v)?,
            "w_adv_shadow" => w.adv_shadow = parse_num(key, v)?,
            "shadow_threshold" => w.shadow_threshold = parse_num(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    fn value(&self, key: &str) -> String {
        let (a, w) = (&self.arch, &self.weights);
        match key {
            "steps" => self.steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "resize_factor" => self.resize_factor.to_string(),
            "max_pairs" => self.max_pairs.to_string(),
            "lr" => self.adam.lr.to_string(),
            "beta1" => self.adam.beta1.to_string(),
            "beta2" => self.adam.beta2.to_string(),
            "adam_eps" => self.adam.eps.to_string(),
            "base_channels" => a.base_channels.to_string(),
            "resolution" => a.resolution.to_string(),
            "fusion_channels" => a.fusion_channels.to_string(),
            "render_branch_channels" => a.render_branch_channels.to_string(),
            "render_kernels" => a
                .render_kernels
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "reduction" => a.reduction.to_string(),
            "res_blocks" => a.res_blocks.to_string(),
            "disc_channels" => a.disc_channels.to_string(),
            "calibrate" => a.calibrate.to_string(),
            "multiscale" => a.multiscale.to_string(),
            "norm" => match a.norm {
                Norm::Instance => "instance".into(),
                Norm::None => "none".into(),
            },
            "w_recon_scene" => w.recon_scene.to_string(),
            "w_recon_shadow" => w.recon_shadow.to_string(),
            "w_recon_final" => w.recon_final.to_string(),
            "w_adv_scene" => w.adv_scene.to_string(),
            "w_adv_shadow" => w.adv_shadow.to_string(),
            "shadow_threshold" => w.shadow_threshold.to_string(),
            _ => unreachable!("key list and accessors disagree on `{key}`"),
        }
    }

    /// Parses config text on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |detail: String| Error::Config { line: i + 1, detail };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(err(format!("duplicate key `{k}`")));
            }
            cfg.set(k, v).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config { line, detail } => Error::format(path, format!("line {line}: {detail}")),
            other => Error::format(path, other.to_string()),
        })
    }

    /// Every key with its current value; [`TrainConfig::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.value(k));
        }
        s
    }

    /// Integer factor by which corpus images are shrunk.
    pub fn shrink_factor(&self) -> Result<usize> {
        let f = self.resize_factor;
        let inv = 1.0 / f;
        let k = inv.round();
        if !(f > 0.0 && f <= 1.0) || (inv - k).abs() > 1e-9 {
            return Err(Error::usage(format!("resize_factor {f} must be 1/k for a positive integer k")));
        }
        Ok(k as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::usage(format!("config: {detail}")));
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return bad(format!("lr {} must be positive", a.lr));
        }
        for (name, b) in [("beta1", a.beta1), ("beta2", a.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} must be in [0, 1)"));
            }
        }
        if !(a.eps > 0.0 && a.eps.is_finite()) {
            return bad(format!("adam_eps {} must be positive", a.eps));
        }
        self.shrink_factor()?;
        self.arch.validate()?;
        self.weights.validate()?;
        Ok(())
    }
}
