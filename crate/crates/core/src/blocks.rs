//! Composite network blocks: the down/up-sampling feature self-calibrated
//! blocks, residual stacks, channel recalibration and the patch
//! discriminator.
//!
//! Every block owns a name prefix. `register` creates its parameters in a
//! [`ParamStore`]; `forward` looks them up again in the matching [`Bound`].
//! Convolutions followed by instance normalization carry no bias, since
//! the normalization cancels it.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tape::{Activation, Tape, Var};
use crate::tensor::{Scalar, Shape};

/// Epsilon inside instance normalization.
pub const NORM_EPS: f64 = 1e-5;
/// Negative slope of the discriminator activations.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Norm {
    None,
    Instance,
}

/// One convolution or transposed convolution layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
    pub transposed: bool,
}

impl ConvLayer {
    pub fn conv(name: String, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, bias: bool) -> Self {
        ConvLayer {
            name,
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            pad,
            bias,
            transposed: false,
        }
    }

    pub fn deconv(name: String, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, bias: bool) -> Self {
        ConvLayer {
            transposed: true,
            ..Self::conv(name, cin, cout, kernel, stride, pad, bias)
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> Shape {
        let k = self.kernel;
        if self.transposed {
            Shape::new(self.in_channels, self.out_channels, k, k)
        } else {
            Shape::new(self.out_channels, self.in_channels, k, k)
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().numel() + if self.bias { self.out_channels } else { 0 }
    }

    pub fn register<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        store.init_weight(self.weight_name(), self.weight_shape(), rng)?;
        if self.bias {
            store.init_bias(self.bias_name(), self.out_channels)?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&self.weight_name())?;
        let b = if self.bias { Some(p.get(&self.bias_name())?) } else { None };
        if self.transposed {
            tape.deconv2d(x, w, b, self.stride, self.pad)
        } else {
            tape.conv2d(x, w, b, self.stride, self.pad)
        }
    }
}

fn normalize<T: Scalar>(tape: &mut Tape<T>, x: Var, norm: Norm) -> Var {
    match norm {
        Norm::None => x,
        Norm::Instance => tape.instance_norm(x, T::from_f64(NORM_EPS)),
    }
}

fn has_bias(norm: Norm) -> bool {
    norm == Norm::None
}

fn expect_channels<T: Scalar>(tape: &Tape<T>, op: &'static str, x: Var, channels: usize) -> Result<Shape> {
    let s = tape.shape(x);
    if s.c != channels {
        return Err(Error::Shape {
            op,
            detail: format!("expected {channels} input channels, got {}", s.c),
        });
    }
    Ok(s)
}

/// Channel plan and options shared by the self-calibrated blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub norm: Norm,
    /// Whether the sigmoid calibration branch is present. Without it the
    /// gate is fixed at 1.
    pub calibrate: bool,
}

impl BlockConfig {
    /// Encoder block: channels double.
    pub fn down(in_channels: usize, norm: Norm, calibrate: bool) -> Result<Self> {
        if in_channels == 0 {
            return Err(Error::invalid("block channels", "must be positive"));
        }
        Ok(BlockConfig {
            in_channels,
            out_channels: 2 * in_channels,
            norm,
            calibrate,
        })
    }

    /// Decoder block: channels halve.
    pub fn up(in_channels: usize, norm: Norm, calibrate: bool) -> Result<Self> {
        if in_channels < 2 || in_channels % 2 != 0 {
            return Err(Error::invalid(
                "block channels",
                format!("up-sampling block needs an even channel count, got {in_channels}"),
            ));
        }
        Ok(BlockConfig {
            in_channels,
            out_channels: in_channels / 2,
            norm,
            calibrate,
        })
    }
}

/// Intermediate features of a self-calibrated block.
#[derive(Clone, Copy, Debug)]
pub struct CalibratedTrace {
    /// Feature at the reduced scale.
    pub low: Var,
    /// Feature at the enlarged scale.
    pub high: Var,
    /// Sigmoid calibration weight, when the branch exists.
    pub weight: Option<Var>,
    pub output: Var,
}

/// Down-sampling feature self-calibrated block (DFSB).
///
/// ```text
/// low    = relu(norm(conv3x3/2(x)))
/// high   = relu(norm(deconv4x4*2(low)))
/// weight = sigmoid(conv1x1(x))
/// out    = norm(conv3x3/2(weight * high)) + low
/// ```
#[derive(Clone, Debug)]
pub struct DownBlock {
    pub config: BlockConfig,
    down: ConvLayer,
    up: ConvLayer,
    gate: Option<ConvLayer>,
    remap: ConvLayer,
}

impl DownBlock {
    pub fn new(prefix: &str, config: BlockConfig) -> Self {
        let (ci, co) = (config.in_channels, config.out_channels);
        let bias = has_bias(config.norm);
        DownBlock {
            config,
            down: ConvLayer::conv(format!("{prefix}.down"), ci, co, 3, 2, 1, bias),
            up: ConvLayer::deconv(format!("{prefix}.up"), co, ci, 4, 2, 1, bias),
            gate: config
                .calibrate
                .then(|| ConvLayer::conv(format!("{prefix}.gate"), ci, ci, 1, 1, 0, true)),
            remap: ConvLayer::conv(format!("{prefix}.remap"), ci, co, 3, 2, 1, bias),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &ConvLayer> {
        [&self.down, &self.up].into_iter().chain(self.gate.as_ref()).chain([&self.remap])
    }

    pub fn register<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        self.layers().try_for_each(|l| l.register(store, rng))
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(ConvLayer::param_count).sum()
    }

    /// Name of the calibration layer, if present.
    pub fn gate_layer(&self) -> Option<&ConvLayer> {
        self.gate.as_ref()
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.trace(tape, p, x)?.output)
    }

    pub fn trace<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<CalibratedTrace> {
        let s = expect_channels(tape, "dfsb", x, self.config.in_channels)?;
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(Error::Shape {
                op: "dfsb",
                detail: format!("spatial dims {}x{} must be even", s.h, s.w),
            });
        }
        let norm = self.config.norm;
        let low = self.down.forward(tape, p, x)?;
        let low = normalize(tape, low, norm);
        let low = tape.relu(low);
        let high = self.up.forward(tape, p, low)?;
        let high = normalize(tape, high, norm);
        let high = tape.relu(high);
        let (gated, weight) = match &self.gate {
            Some(gate) => {
                let pre = gate.forward(tape, p, x)?;
                let w = tape.sigmoid(pre);
                (tape.mul(w, high)?, Some(w))
            }
            None => (high, None),
        };
        let remapped = self.remap.forward(tape, p, gated)?;
        let remapped = normalize(tape, remapped, norm);
        let output = tape.add(remapped, low)?;
        Ok(CalibratedTrace {
            low,
            high,
            weight,
            output,
        })
    }
}

/// Up-sampling feature self-calibrated block (UFSB), the decoder mirror
/// of [`DownBlock`].
///
/// ```text
/// high   = relu(norm(deconv4x4*2(x)))
/// low    = relu(norm(conv3x3/2(high)))
/// weight = sigmoid(conv1x1(x))
/// out    = norm(deconv4x4*2(weight * low)) + high
/// ```
#[derive(Clone, Debug)]
pub struct UpBlock {
    pub config: BlockConfig,
    up: ConvLayer,
    down: ConvLayer,
    gate: Option<ConvLayer>,
    remap: ConvLayer,
}

impl UpBlock {
    pub fn new(prefix: &str, config: BlockConfig) -> Self {
        let (ci, co) = (config.in_channels, config.out_channels);
        let bias = has_bias(config.norm);
        UpBlock {
            config,
            up: ConvLayer::deconv(format!("{prefix}.up"), ci, co, 4, 2, 1, bias),
            down: ConvLayer::conv(format!("{prefix}.down"), co, ci, 3, 2, 1, bias),
            gate: config
                .calibrate
                .then(|| ConvLayer::conv(format!("{prefix}.gate"), ci, ci, 1, 1, 0, true)),
            remap: ConvLayer::deconv(format!("{prefix}.remap"), ci, co, 4, 2, 1, bias),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &ConvLayer> {
        [&self.up, &self.down].into_iter().chain(self.gate.as_ref()).chain([&self.remap])
    }

    pub fn register<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        self.layers().try_for_each(|l| l.register(store, rng))
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(ConvLayer::param_count).sum()
    }

    pub fn gate_layer(&self) -> Option<&ConvLayer> {
        self.gate.as_ref()
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.trace(tape, p, x)?.output)
    }

    pub fn trace<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<CalibratedTrace> {
        expect_channels(tape, "ufsb", x, self.config.in_channels)?;
        let norm = self.config.norm;
        let high = self.up.forward(tape, p, x)?;
        let high = normalize(tape, high, norm);
        let high = tape.relu(high);
        let low = self.down.forward(tape, p, high)?;
        let low = normalize(tape, low, norm);
        let low = tape.relu(low);
        let (gated, weight) = match &self.gate {
            Some(gate) => {
                let pre = gate.forward(tape, p, x)?;
                let w = tape.sigmoid(pre);
                (tape.mul(w, low)?, Some(w))
            }
            None => (low, None),
        };
        let remapped = self.remap.forward(tape, p, gated)?;
        let remapped = normalize(tape, remapped, norm);
        let output = tape.add(remapped, high)?;
        Ok(CalibratedTrace {
            low,
            high,
            weight,
            output,
        })
    }
}

/// Closed-form parameter count of a [`DownBlock`]: `34·ci·co` weights,
/// plus `ci² + ci` for the gate, plus `2·co + ci` biases without normalization.
pub fn down_block_params(cfg: &BlockConfig) -> usize {
    let (ci, co) = (cfg.in_channels, cfg.out_channels);
    let mut n = 34 * ci * co;
    if cfg.calibrate {
        n += ci * ci + ci;
    }
    if cfg.norm == Norm::None {
        n += 2 * co + ci;
    }
    n
}

/// Closed-form parameter count of an [`UpBlock`]: `41·ci·co` weights,
/// plus `ci² + ci` for the gate, plus `2·co + ci` biases without normalization.
pub fn up_block_params(cfg: &BlockConfig) -> usize {
    let (ci, co) = (cfg.in_channels, cfg.out_channels);
    let mut n = 41 * ci * co;
    if cfg.calibrate {
        n += ci * ci + ci;
    }
    if cfg.norm == Norm::None {
        n += 2 * co + ci;
    }
    n
}

/// A stack of channel-preserving residual units
/// `y = x + conv3x3(relu(norm(conv3x3(x))))`.
#[derive(Clone, Debug)]
pub struct ResBlocks {
    pub channels: usize,
    units: Vec<(ConvLayer, ConvLayer)>,
    norm: Norm,
}

impl ResBlocks {
    pub fn new(prefix: &str, channels: usize, count: usize, norm: Norm) -> Self {
        let units = (1..=count)
            .map(|i| {
                (
                    ConvLayer::conv(format!("{prefix}.block{i}.conv1"), channels, channels, 3, 1, 1, has_bias(norm)),
                    ConvLayer::conv(format!("{prefix}.block{i}.conv2"), channels, channels, 3, 1, 1, true),
                )
            })
            .collect();
        ResBlocks { channels, units, norm }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn register<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        self.units.iter().try_for_each(|(a, b)| {
            a.register(store, rng)?;
            b.register(store, rng)
        })
    }

    pub fn param_count(&self) -> usize {
        self.units.iter().map(|(a, b)| a.param_count() + b.param_count()).sum()
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        expect_channels(tape, "resblocks", x, self.channels)?;
        let mut h = x;
        for (conv1, conv2) in &self.units {
            let r = conv1.forward(tape, p, h)?;
            let r = normalize(tape, r, self.norm);
            let r = tape.relu(r);
            let r = conv2.forward(tape, p, r)?;
            h = tape.add(h, r)?;
        }
        Ok(h)
    }
}

/// Closed-form parameter count of [`ResBlocks`]: `count · (18c² + c)`,
/// plus `count · c` when unnormalized.
pub fn res_blocks_params(channels: usize, count: usize, norm: Norm) -> usize {
    let c = channels;
    count * (18 * c * c + c + if norm == Norm::None { c } else { 0 })
}

/// Squeeze-and-excitation style per-channel gating:
/// `x * sigmoid(fc2(relu(fc1(avg_pool(x)))))`.
#[derive(Clone, Debug)]
pub struct Recalibration {
    pub channels: usize,
    pub reduction: usize,
    fc1: ConvLayer,
    fc2: ConvLayer,
}

impl Recalibration {
    pub fn new(prefix: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::invalid(
                "recalibration",
                format!("{channels} channels not divisible by reduction {reduction}"),
            ));
        }
        let hidden = channels / reduction;
        Ok(Recalibration {
            channels,
            reduction,
            fc1: ConvLayer::conv(format!("{prefix}.fc1"), channels, hidden, 1, 1, 0, true),
            fc2: ConvLayer::conv(format!("{prefix}.fc2"), hidden, channels, 1, 1, 0, true),
        })
    }

    pub fn register<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        self.fc1.register(store, rng)?;
        self.fc2.register(store, rng)
    }

    pub fn fc2(&self) -> &ConvLayer {
        &self.fc2
    }

    /// `2c²/r + c/r + c`.
    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }

    /// Returns the rescaled feature and the per-channel scale.
    pub fn forward_with_scale<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        expect_channels(tape, "recalibration", x, self.channels)?;
        let pooled = tape.global_avg_pool(x);
        let h = self.fc1.forward(tape, p, pooled)?;
        let h = tape.relu(h);
        let s = self.fc2.forward(tape, p, h)?;
        let s = tape.sigmoid(s);
        Ok((tape.scale_channels(x, s)?, s))
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_with_scale(tape, p, x)?.0)
    }
}

/// Smallest input side the discriminator accepts.
pub const DISCRIMINATOR_MIN_SIZE: usize = 16;

/// Patch discriminator: four stride-2 4x4 convolutions
/// (`base, 2·base, 4·base, 8·base` channels, leaky ReLU, instance norm
/// after all but the first) and a 3x3 head producing one score per patch.
#[derive(Clone, Debug)]
pub struct Discriminator {
    layers: Vec<ConvLayer>,
    head: ConvLayer,
    in_channels: usize,
}

impl Discriminator {
    pub fn new(prefix: &str, in_channels: usize, base: usize) -> Self {
        let widths = [base, 2 * base, 4 * base, 8 * base];
        let mut cin = in_channels;
        let layers = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let l = ConvLayer::conv(format!("{prefix}.layer{}", i + 1), cin, w, 4, 2, 1, i == 0);
                cin = w;
                l
            })
            .collect();
        Discriminator {
            layers,
            head: ConvLayer::conv(format!("{prefix}.head"), cin, 1, 3, 1, 1, true),
            in_channels,
        }
    }

    pub fn register<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.register(store, rng))?;
        self.head.register(store, rng)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum::<usize>() + self.head.param_count()
    }

    /// Output size of the score map for a square input of side `size`.
    pub fn score_size(size: usize) -> usize {
        (0..4).fold(size, |s, _| (s + 2 - 4) / 2 + 1)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = expect_channels(tape, "discriminator", x, self.in_channels)?;
        if s.h < DISCRIMINATOR_MIN_SIZE || s.w < DISCRIMINATOR_MIN_SIZE {
            return Err(Error::Shape {
                op: "discriminator",
                detail: format!(
                    "input {}x{} smaller than the {DISCRIMINATOR_MIN_SIZE}x{DISCRIMINATOR_MIN_SIZE} minimum",
                    s.h, s.w
                ),
            });
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h)?;
            if i > 0 {
                h = tape.instance_norm(h, T::from_f64(NORM_EPS));
            }
            h = tape.activation(h, Activation::LeakyRelu(LEAKY_SLOPE));
        }
        self.head.forward(tape, p, h)
    }
}
