//! The light source transfer model: a scene reconversion subnetwork that
//! recovers a shadow-free rendering, a shadow estimation subnetwork that
//! predicts the relit image, and a re-renderer fusing both feature maps.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    down_block_params, res_blocks_params, up_block_params, BlockConfig, ConvLayer, Discriminator,
    DownBlock, Norm, Recalibration, ResBlocks, UpBlock,
};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Shape};

/// Number of stride-2 stages in each encoder and decoder.
pub const STAGES: usize = 4;
pub const IMAGE_CHANNELS: usize = 3;

pub const SCENE: &str = "scene";
pub const SHADOW: &str = "shadow";
pub const RENDER: &str = "render";
pub const DISC_SCENE: &str = "disc_scene";
pub const DISC_SHADOW: &str = "disc_shadow";

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ArchConfig {
    /// Channels of the full-resolution features (C0).
    pub base_channels: usize,
    /// Side of the square input image.
    pub resolution: usize,
    /// Width of each multi-scale branch and of the fused feature.
    pub fusion_channels: usize,
    pub render_branch_channels: usize,
    pub render_kernels: Vec<usize>,
    pub reduction: usize,
    pub res_blocks: usize,
    /// First-layer width of the discriminators.
    pub disc_channels: usize,
    pub calibrate: bool,
    pub multiscale: bool,
    pub norm: Norm,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            base_channels: 32,
            resolution: 64,
            fusion_channels: 32,
            render_branch_channels: 16,
            render_kernels: vec![3, 7, 13, 19, 25],
            reduction: 4,
            res_blocks: 9,
            disc_channels: 64,
            calibrate: true,
            multiscale: true,
            norm: Norm::Instance,
        }
    }
}

impl ArchConfig {
    /// The small preset used for CPU training runs.
    pub fn desk() -> Self {
        ArchConfig {
            base_channels: 8,
            ..Self::default()
        }
    }

    pub fn with_size(base_channels: usize, resolution: usize) -> Self {
        ArchConfig {
            base_channels,
            resolution,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::invalid("architecture", detail));
        let r = self.resolution;
        if r < 16 || !r.is_power_of_two() {
            return bad(format!("resolution {r} must be a power of two of at least 16"));
        }
        if self.base_channels == 0 || self.base_channels % 4 != 0 {
            return bad(format!("base channels {} must be a positive multiple of 4", self.base_channels));
        }
        if self.fusion_channels == 0 || self.render_branch_channels == 0 || self.disc_channels == 0 {
            return bad("channel widths must be positive".into());
        }
        if self.render_kernels.is_empty() || self.render_kernels.iter().any(|k| k % 2 == 0) {
            return bad(format!("re-renderer kernels {:?} must be odd and non-empty", self.render_kernels));
        }
        let merged = self.render_kernels.len() * self.render_branch_channels;
        if self.reduction == 0 || merged % self.reduction != 0 {
            return bad(format!("{merged} re-renderer channels not divisible by reduction {}", self.reduction));
        }
        Ok(())
    }

    /// Closed-form parameter count of the three generator subnetworks.
    pub fn generator_param_count(&self) -> usize {
        let c0 = self.base_channels;
        let f = self.fusion_channels;
        let conv = |ci: usize, co: usize, k: usize| ci * co * k * k + co;
        let ladder = {
            let mut n = conv(IMAGE_CHANNELS, c0, 7);
            for i in 0..STAGES {
                let d = BlockConfig {
                    in_channels: c0 << i,
                    out_channels: c0 << (i + 1),
                    norm: self.norm,
                    calibrate: self.calibrate,
                };
                let u = BlockConfig {
                    in_channels: c0 << (i + 1),
                    out_channels: c0 << i,
                    norm: self.norm,
                    calibrate: self.calibrate,
                };
                n += down_block_params(&d) + up_block_params(&u);
            }
            n + res_blocks_params(c0 << STAGES, self.res_blocks, self.norm)
        };
        let head = conv(c0, IMAGE_CHANNELS, 7);
        let scene_extra = if self.multiscale {
            let branches = f * (8 * c0 * 64 + 4 * c0 * 16 + 2 * c0 * 16) + 3 * f;
            branches + conv(3 * f + c0, f, 1) + conv(f + c0, c0, 3)
        } else {
            conv(2 * c0, c0, 3)
        };
        let b = self.render_branch_channels;
        let merged = self.render_kernels.len() * b;
        let hidden = merged / self.reduction;
        let render = self.render_kernels.iter().map(|&k| conv(2 * c0, b, k)).sum::<usize>()
            + conv(merged, hidden, 1)
            + conv(hidden, merged, 1)
            + conv(merged, IMAGE_CHANNELS, 7);
        2 * (ladder + head) + scene_extra + render
    }
}

/// The four structural variants compared in the ablation study, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    NoCalNoMs,
    NoCal,
    NoMs,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::NoCalNoMs, Variant::NoCal, Variant::NoMs, Variant::Full];

    pub fn label(self) -> &'static str {
        match self {
            Variant::NoCalNoMs => "MCN without Cal and MS",
            Variant::NoCal => "MCN without Cal",
            Variant::NoMs => "MCN without MS",
            Variant::Full => "MCN",
        }
    }

    /// Command-line spelling used by `--ablate`.
    pub fn flag(self) -> &'static str {
        match self {
            Variant::NoCalNoMs => "cal+ms",
            Variant::NoCal => "cal",
            Variant::NoMs => "ms",
            Variant::Full => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cal+ms" | "ms+cal" => Some(Variant::NoCalNoMs),
            "cal" => Some(Variant::NoCal),
            "ms" => Some(Variant::NoMs),
            "none" | "full" => Some(Variant::Full),
            _ => None,
        }
    }

    pub fn apply(self, arch: &ArchConfig) -> ArchConfig {
        let mut a = arch.clone();
        a.calibrate = matches!(self, Variant::NoMs | Variant::Full);
        a.multiscale = matches!(self, Variant::NoCal | Variant::Full);
        a
    }
}

/// Shallow conv, four down blocks, residual bottleneck, four up blocks.
#[derive(Clone, Debug)]
struct Ladder {
    shallow: ConvLayer,
    encoder: Vec<DownBlock>,
    bottleneck: ResBlocks,
    decoder: Vec<UpBlock>,
}

/// Intermediate features of one encoder/decoder ladder.
#[derive(Clone, Debug)]
pub struct LadderTrace {
    pub shallow: Var,
    /// Output of each down block.
    pub encoder_stages: Vec<Var>,
    pub residual: Var,
    /// Output of each up block; the last is the decoder feature.
    pub decoder_stages: Vec<Var>,
}

impl LadderTrace {
    pub fn encoder(&self) -> Var {
        *self.encoder_stages.last().expect("stages")
    }

    pub fn decoder(&self) -> Var {
        *self.decoder_stages.last().expect("stages")
    }
}

impl Ladder {
    fn new(prefix: &str, arch: &ArchConfig) -> Result<Self> {
        let c0 = arch.base_channels;
        let encoder = (0..STAGES)
            .map(|i| {
                let cfg = BlockConfig::down(c0 << i, arch.norm, arch.calibrate)?;
                Ok(DownBlock::new(&format!("{prefix}.enc{}", i + 1), cfg))
            })
            .collect::<Result<_>>()?;
        let decoder = (0..STAGES)
            .map(|i| {
                let cfg = BlockConfig::up(c0 << (STAGES - i), arch.norm, arch.calibrate)?;
                Ok(UpBlock::new(&format!("{prefix}.dec{}", i + 1), cfg))
            })
            .collect::<Result<_>>()?;
        Ok(Ladder {
            shallow: ConvLayer::conv(format!("{prefix}.shallow"), IMAGE_CHANNELS, c0, 7, 1, 3, true),
            encoder,
            bottleneck: ResBlocks::new(&format!("{prefix}.res"), c0 << STAGES, arch.res_blocks, arch.norm),
            decoder,
        })
    }

    fn register<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.shallow.register(store, rng)?;
        for b in &self.encoder {
            b.register(store, rng)?;
        }
        self.bottleneck.register(store, rng)?;
        for b in &self.decoder {
            b.register(store, rng)?;
        }
        Ok(())
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<LadderTrace> {
        let shallow = self.shallow.forward(tape, p, x)?;
        let shallow = tape.relu(shallow);
        let mut h = shallow;
        let mut encoder_stages = Vec::with_capacity(STAGES);
        for b in &self.encoder {
            h = b.forward(tape, p, h)?;
            encoder_stages.push(h);
        }
        let residual = self.bottleneck.forward(tape, p, h)?;
        h = residual;
        let mut decoder_stages = Vec::with_capacity(STAGES);
        for b in &self.decoder {
            h = b.forward(tape, p, h)?;
            decoder_stages.push(h);
        }
        Ok(LadderTrace {
            shallow,
            encoder_stages,
            residual,
            decoder_stages,
        })
    }
}

/// Everything the scene reconversion subnetwork computes.
#[derive(Clone, Debug)]
pub struct SceneTrace {
    pub ladder: LadderTrace,
    /// Multi-scale branches brought to full resolution (empty without fusion).
    pub upsampled: Vec<Var>,
    pub fused: Option<Var>,
    pub feature: Var,
    pub image: Var,
}

#[derive(Clone, Debug)]
pub struct SceneReconversion {
    ladder: Ladder,
    /// Deconvolutions lifting the first three up-block outputs.
    branches: Vec<ConvLayer>,
    fuse: Option<ConvLayer>,
    skip: ConvLayer,
    head: ConvLayer,
}

impl SceneReconversion {
    pub fn new(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        let c0 = arch.base_channels;
        let f = arch.fusion_channels;
        let (branches, fuse, skip_in) = if arch.multiscale {
            let b = vec![
                ConvLayer::deconv(format!("{SCENE}.up1"), 8 * c0, f, 8, 8, 0, true),
                ConvLayer::deconv(format!("{SCENE}.up2"), 4 * c0, f, 4, 4, 0, true),
                ConvLayer::deconv(format!("{SCENE}.up3"), 2 * c0, f, 4, 2, 1, true),
            ];
            let fuse = ConvLayer::conv(format!("{SCENE}.fuse"), 3 * f + c0, f, 1, 1, 0, true);
            (b, Some(fuse), f + c0)
        } else {
            (Vec::new(), None, 2 * c0)
        };
        Ok(SceneReconversion {
            ladder: Ladder::new(SCENE, arch)?,
            branches,
            fuse,
            skip: ConvLayer::conv(format!("{SCENE}.skip"), skip_in, c0, 3, 1, 1, true),
            head: ConvLayer::conv(format!("{SCENE}.out"), c0, IMAGE_CHANNELS, 7, 1, 3, true),
        })
    }

    fn register<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.ladder.register(store, rng)?;
        for l in self.branches.iter().chain(&self.fuse).chain([&self.skip, &self.head]) {
            l.register(store, rng)?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<SceneTrace> {
        let ladder = self.ladder.forward(tape, p, x)?;
        let decoder = ladder.decoder();
        let mut upsampled = Vec::with_capacity(self.branches.len());
        for (layer, &stage) in self.branches.iter().zip(&ladder.decoder_stages) {
            upsampled.push(layer.forward(tape, p, stage)?);
        }
        let (fused, skip_in) = match &self.fuse {
            Some(fuse) => {
                let mut parts = upsampled.clone();
                parts.push(decoder);
                let cat = tape.concat_channels(&parts)?;
                let fused = fuse.forward(tape, p, cat)?;
                let fused = tape.relu(fused);
                (Some(fused), tape.concat_channels(&[fused, ladder.shallow])?)
            }
            None => (None, tape.concat_channels(&[decoder, ladder.shallow])?),
        };
        let feature = self.skip.forward(tape, p, skip_in)?;
        let feature = tape.relu(feature);
        let image = self.head.forward(tape, p, feature)?;
        let image = tape.tanh(image);
        Ok(SceneTrace {
            ladder,
            upsampled,
            fused,
            feature,
            image,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ShadowTrace {
    pub ladder: LadderTrace,
    pub feature: Var,
    pub image: Var,
}

#[derive(Clone, Debug)]
pub struct ShadowEstimation {
    ladder: Ladder,
    head: ConvLayer,
}

impl ShadowEstimation {
    pub fn new(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        Ok(ShadowEstimation {
            ladder: Ladder::new(SHADOW, arch)?,
            head: ConvLayer::conv(format!("{SHADOW}.out"), arch.base_channels, IMAGE_CHANNELS, 7, 1, 3, true),
        })
    }

    fn register<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        self.ladder.register(store, rng)?;
        self.head.register(store, rng)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<ShadowTrace> {
        let ladder = self.ladder.forward(tape, p, x)?;
        let feature = ladder.decoder();
        let image = self.head.forward(tape, p, feature)?;
        let image = tape.tanh(image);
        Ok(ShadowTrace { ladder, feature, image })
    }
}

/// Parallel multi-kernel convolutions, channel recalibration and an RGB head.
#[derive(Clone, Debug)]
pub struct Rerenderer {
    feature_channels: usize,
    branches: Vec<ConvLayer>,
    recal: Recalibration,
    head: ConvLayer,
}

impl Rerenderer {
    pub fn new(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        let c_in = 2 * arch.base_channels;
        let b = arch.render_branch_channels;
        let branches = arch
            .render_kernels
            .iter()
            .map(|&k| ConvLayer::conv(format!("{RENDER}.branch{k}"), c_in, b, k, 1, k / 2, true))
            .collect::<Vec<_>>();
        let merged = branches.len() * b;
        Ok(Rerenderer {
            feature_channels: arch.base_channels,
            branches,
            recal: Recalibration::new(&format!("{RENDER}.recal"), merged, arch.reduction)?,
            head: ConvLayer::conv(format!("{RENDER}.out"), merged, IMAGE_CHANNELS, 7, 1, 3, true),
        })
    }

    pub fn head(&self) -> &ConvLayer {
        &self.head
    }

    fn register<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<()> {
        for l in &self.branches {
            l.register(store, rng)?;
        }
        self.recal.register(store, rng)?;
        self.head.register(store, rng)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, scene: Var, shadow: Var) -> Result<Var> {
        let (a, b) = (tape.shape(scene), tape.shape(shadow));
        if a != b || a.c != self.feature_channels {
            return Err(Error::Shape {
                op: "rerender",
                detail: format!("feature shapes {a} and {b}, expected {} channels each", self.feature_channels),
            });
        }
        let x = tape.concat_channels(&[scene, shadow])?;
        let mut outs = Vec::with_capacity(self.branches.len());
        for l in &self.branches {
            let y = l.forward(tape, p, x)?;
            outs.push(tape.relu(y));
        }
        let merged = tape.concat_channels(&outs)?;
        let merged = self.recal.forward(tape, p, merged)?;
        let y = self.head.forward(tape, p, merged)?;
        Ok(tape.tanh(y))
    }
}

/// Output images of the generator, all in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct Outputs {
    pub y_hat: Var,
    pub shadow_free: Var,
    pub relit: Var,
    pub scene_feature: Var,
    pub shadow_feature: Var,
}

/// Layer structure for one [`ArchConfig`]. Holds no parameter values.
#[derive(Clone, Debug)]
pub struct Network {
    pub arch: ArchConfig,
    pub scene: SceneReconversion,
    pub shadow: ShadowEstimation,
    pub render: Rerenderer,
    pub disc_scene: Discriminator,
    pub disc_shadow: Discriminator,
}

impl Network {
    pub fn new(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        Ok(Network {
            arch: arch.clone(),
            scene: SceneReconversion::new(arch)?,
            shadow: ShadowEstimation::new(arch)?,
            render: Rerenderer::new(arch)?,
            disc_scene: Discriminator::new(DISC_SCENE, IMAGE_CHANNELS, arch.disc_channels),
            disc_shadow: Discriminator::new(DISC_SHADOW, IMAGE_CHANNELS, arch.disc_channels),
        })
    }

    /// Freshly initialized generator and discriminator parameters.
    pub fn init<T: Scalar>(&self, seed: u64) -> Result<(ParamStore<T>, ParamStore<T>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut generator = ParamStore::new();
        self.scene.register(&mut generator, &mut rng)?;
        self.shadow.register(&mut generator, &mut rng)?;
        self.render.register(&mut generator, &mut rng)?;
        let mut discriminators = ParamStore::new();
        self.disc_scene.register(&mut discriminators, &mut rng)?;
        self.disc_shadow.register(&mut discriminators, &mut rng)?;
        Ok((generator, discriminators))
    }

    pub fn check_input<T: Scalar>(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let s = tape.shape(x);
        let r = self.arch.resolution;
        if s.c != IMAGE_CHANNELS || s.h != r || s.w != r {
            return Err(Error::Shape {
                op: "model input",
                detail: format!("expected {IMAGE_CHANNELS}x{r}x{r} images, got {}x{}x{}", s.c, s.h, s.w),
            });
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Outputs> {
        self.check_input(tape, x)?;
        let scene = self.scene.forward(tape, p, x)?;
        let shadow = self.shadow.forward(tape, p, x)?;
        let y_hat = self.render.forward(tape, p, scene.feature, shadow.feature)?;
        Ok(Outputs {
            y_hat,
            shadow_free: scene.image,
            relit: shadow.image,
            scene_feature: scene.feature,
            shadow_feature: shadow.feature,
        })
    }
}

/// Architecture plus generator and discriminator parameters.
#[derive(Clone, Debug)]
pub struct ModelBundle<T> {
    network: Network,
    pub generator: ParamStore<T>,
    pub discriminators: ParamStore<T>,
}

impl<T: Scalar> ModelBundle<T> {
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        let network = Network::new(arch)?;
        let (generator, discriminators) = network.init(seed)?;
        Ok(ModelBundle {
            network,
            generator,
            discriminators,
        })
    }

    /// Assembles a bundle from loaded parameters, checking that every
    /// expected tensor is present with the right shape and nothing else is.
    pub fn from_params(arch: &ArchConfig, generator: ParamStore<T>, discriminators: ParamStore<T>) -> Result<Self> {
        let network = Network::new(arch)?;
        let (g, d) = network.init::<T>(0)?;
        check_same_layout("generator", &g, &generator)?;
        check_same_layout("discriminator", &d, &discriminators)?;
        Ok(ModelBundle {
            network,
            generator,
            discriminators,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.network.arch
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    /// Forward pass with frozen parameters.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Outputs> {
        let p = self.generator.bind(tape, false);
        self.network.forward(tape, &p, x)
    }

    pub fn cast<U: Scalar>(&self) -> ModelBundle<U> {
        ModelBundle {
            network: self.network.clone(),
            generator: self.generator.cast(),
            discriminators: self.discriminators.cast(),
        }
    }
}

fn check_same_layout<T: Scalar>(what: &'static str, expected: &ParamStore<T>, got: &ParamStore<T>) -> Result<()> {
    for (name, shape) in expected.shapes() {
        match got.get(&name) {
            Ok(t) if t.shape() == shape => {}
            Ok(t) => {
                return Err(Error::invalid(
                    what,
                    format!("parameter `{name}` has shape {}, architecture needs {shape}", t.shape()),
                ))
            }
            Err(_) => return Err(Error::UnknownParameter(name)),
        }
    }
    if let Some(extra) = got.names().find(|n| !expected.contains(n)) {
        return Err(Error::invalid(what, format!("unexpected parameter `{extra}`")));
    }
    Ok(())
}

/// Expected shape of every stage of the scene ladder for a batch of `n`.
pub fn scene_stage_shapes(arch: &ArchConfig, n: usize) -> (Vec<Shape>, Vec<Shape>) {
    let (c0, r) = (arch.base_channels, arch.resolution);
    let enc = (1..=STAGES).map(|i| Shape::new(n, c0 << i, r >> i, r >> i)).collect();
    let dec = (1..=STAGES)
        .map(|i| Shape::new(n, c0 << (STAGES - i), r >> (STAGES - i), r >> (STAGES - i)))
        .collect();
    (enc, dec)
}
