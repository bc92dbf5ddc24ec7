//! Binary checkpoint: `MCNW`, format version, architecture, named f32
//! tensors and a trailing CRC32, all little-endian.
//!
//! Training checkpoints add the Adam moments as `<param>.adam_m` and
//! `<param>.adam_v` records and the optimizer step counters as two
//! 16-bit halves stored in a `(1, 1, 1, 2)` record.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use relight_core::net::DISC_SCENE;
use relight_core::net::DISC_SHADOW;
use relight_core::{AdamConfig, AdamState, ArchConfig, LossWeights, ModelBundle, Norm, ParamStore, Shape, Tensor, Trainer};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MCNW";
pub const VERSION: u32 = 1;
pub const MOMENT_M: &str = ".adam_m";
pub const MOMENT_V: &str = ".adam_v";
pub const GEN_STEPS: &str = "optimizer.generator.steps";
pub const DISC_STEPS: &str = "optimizer.discriminator.steps";

const FLAG_CALIBRATE: u32 = 1;
const FLAG_MULTISCALE: u32 = 2;
const FLAG_INSTANCE_NORM: u32 = 4;

/// Raw checkpoint contents: architecture plus ordered tensor records.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> std::result::Result<usize, String> {
        Ok(self.u32()? as usize)
    }
}

fn to_u32(what: &str, v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::usage(format!("{what} {v} does not fit in 32 bits")))
}

fn encode_arch(a: &ArchConfig, out: &mut Vec<u8>) -> Result<()> {
    let mut flags = 0;
    if a.calibrate {
        flags |= FLAG_CALIBRATE;
    }
    if a.multiscale {
        flags |= FLAG_MULTISCALE;
    }
    if a.norm == Norm::Instance {
        flags |= FLAG_INSTANCE_NORM;
    }
    let fields = [
        ("base_channels", a.base_channels),
        ("resolution", a.resolution),
        ("fusion_channels", a.fusion_channels),
        ("render_branch_channels", a.render_branch_channels),
        ("reduction", a.reduction),
        ("res_blocks", a.res_blocks),
        ("disc_channels", a.disc_channels),
        ("flags", flags as usize),
        ("kernel count", a.render_kernels.len()),
    ];
    for (what, v) in fields.into_iter().chain(a.render_kernels.iter().map(|&k| ("kernel", k))) {
        out.extend_from_slice(&to_u32(what, v)?.to_le_bytes());
    }
    Ok(())
}

fn decode_arch(r: &mut Reader) -> std::result::Result<ArchConfig, String> {
    let mut a = ArchConfig {
        base_channels: r.usize()?,
        resolution: r.usize()?,
        fusion_channels: r.usize()?,
        render_branch_channels: r.usize()?,
        reduction: r.usize()?,
        res_blocks: r.usize()?,
        disc_channels: r.usize()?,
        ..ArchConfig::default()
    };
    let flags = r.u32()?;
    if flags & !(FLAG_CALIBRATE | FLAG_MULTISCALE | FLAG_INSTANCE_NORM) != 0 {
        return Err(format!("unknown architecture flags {flags:#x}"));
    }
    a.calibrate = flags & FLAG_CALIBRATE != 0;
    a.multiscale = flags & FLAG_MULTISCALE != 0;
    a.norm = if flags & FLAG_INSTANCE_NORM != 0 { Norm::Instance } else { Norm::None };
    let n = r.usize()?;
    if n > 64 {
        return Err(format!("implausible kernel count {n}"));
    }
    a.render_kernels = (0..n).map(|_| r.usize()).collect::<std::result::Result<_, _>>()?;
    a.validate().map_err(|e| e.to_string())?;
    Ok(a)
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        encode_arch(&self.arch, &mut out)?;
        out.extend_from_slice(&to_u32("tensor count", self.tensors.len())?.to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&to_u32("name length", name.len())?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for d in t.shape().dims() {
                out.extend_from_slice(&to_u32("dimension", d)?.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Checks the CRC before looking at anything else.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 {
            return Err(Error::format(path, format!("truncated checkpoint ({} bytes)", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
                stored,
                computed,
            });
        }
        Self::decode_body(body).map_err(|detail| Error::format(path, detail))
    }

    fn decode_body(body: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported format version {version}, expected {VERSION}"));
        }
        let arch = decode_arch(&mut r)?;
        let count = r.usize()?;
        let mut tensors = Vec::new();
        let mut names = HashSet::new();
        for _ in 0..count {
            let len = r.usize()?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| "tensor name is not UTF-8".to_string())?
                .to_string();
            if !names.insert(name.clone()) {
                return Err(format!("tensor `{name}` appears twice"));
            }
            let d = [r.usize()?, r.usize()?, r.usize()?, r.usize()?];
            let shape = Shape::new(d[0], d[1], d[2], d[3]);
            let numel = d.iter().try_fold(1usize, |acc, &x| acc.checked_mul(x));
            let bytes = numel
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| format!("tensor `{name}` has absurd shape {shape}"))?;
            let data = r
                .take(bytes)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::from_vec(shape, data).map_err(|e| e.to_string())?;
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(format!("{} trailing bytes after the last tensor", body.len() - r.pos));
        }
        Ok(Checkpoint { arch, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn from_bundle(bundle: &ModelBundle<f32>) -> Self {
        let tensors = bundle
            .generator
            .iter()
            .chain(bundle.discriminators.iter())
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect();
        Checkpoint {
            arch: bundle.arch().clone(),
            tensors,
        }
    }

    /// Parameters followed by both optimizers' moments and step counters.
    pub fn from_trainer(trainer: &Trainer<f32>) -> Result<Self> {
        let mut ck = Self::from_bundle(&trainer.bundle);
        for (adam, counter) in [(&trainer.gen_adam, GEN_STEPS), (&trainer.disc_adam, DISC_STEPS)] {
            for (name, m, v) in adam.moments() {
                ck.tensors.push((format!("{name}{MOMENT_M}"), m.clone()));
                ck.tensors.push((format!("{name}{MOMENT_V}"), v.clone()));
            }
            ck.tensors.push((counter.to_string(), encode_counter(adam.step_count())?));
        }
        Ok(ck)
    }

    /// Splits records into generator, discriminator and optimizer parts
    /// and checks the parameters against the stored architecture.
    pub fn into_parts(self, path: &Path) -> Result<Parts> {
        let mut generator = ParamStore::new();
        let mut discriminators = ParamStore::new();
        let mut moments = BTreeMap::new();
        let mut counters = BTreeMap::new();
        for (name, t) in self.tensors {
            if name == GEN_STEPS || name == DISC_STEPS {
                counters.insert(name, decode_counter(&t).map_err(|d| Error::format(path, d))?);
            } else if name.ends_with(MOMENT_M) || name.ends_with(MOMENT_V) {
                moments.insert(name, t);
            } else if name.starts_with(DISC_SCENE) || name.starts_with(DISC_SHADOW) {
                discriminators.insert(name, t)?;
            } else {
                generator.insert(name, t)?;
            }
        }
        let bundle =
            ModelBundle::from_params(&self.arch, generator, discriminators).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Parts {
            bundle,
            moments,
            counters,
        })
    }
}

/// Decoded checkpoint contents.
pub struct Parts {
    pub bundle: ModelBundle<f32>,
    moments: BTreeMap<String, Tensor<f32>>,
    counters: BTreeMap<String, u64>,
}

impl Parts {
    pub fn has_optimizer_state(&self) -> bool {
        self.counters.contains_key(GEN_STEPS)
    }

    /// Rebuilds a trainer with the saved optimizer state.
    pub fn into_trainer(mut self, adam: AdamConfig, weights: LossWeights, path: &Path) -> Result<Trainer<f32>> {
        if !self.has_optimizer_state() {
            return Err(Error::format(path, "checkpoint holds no optimizer state; cannot resume"));
        }
        let gen_names: Vec<String> = self.bundle.generator.names().map(str::to_string).collect();
        let disc_names: Vec<String> = self.bundle.discriminators.names().map(str::to_string).collect();
        let mut trainer = Trainer::new(self.bundle, adam, weights)?;
        for (state, names, counter) in [
            (&mut trainer.gen_adam, &gen_names, GEN_STEPS),
            (&mut trainer.disc_adam, &disc_names, DISC_STEPS),
        ] {
            restore(state, names, &mut self.moments, self.counters.get(counter).copied(), path)?;
        }
        if let Some(name) = self.moments.keys().next() {
            return Err(Error::format(path, format!("moment `{name}` has no matching parameter")));
        }
        Ok(trainer)
    }
}

fn restore(
    state: &mut AdamState<f32>,
    names: &[String],
    moments: &mut BTreeMap<String, Tensor<f32>>,
    steps: Option<u64>,
    path: &Path,
) -> Result<()> {
    let (mut m, mut v) = (BTreeMap::new(), BTreeMap::new());
    for name in names {
        let pair = (moments.remove(&format!("{name}{MOMENT_M}")), moments.remove(&format!("{name}{MOMENT_V}")));
        match pair {
            (Some(a), Some(b)) => {
                m.insert(name.clone(), a);
                v.insert(name.clone(), b);
            }
            (None, None) => {}
            _ => return Err(Error::format(path, format!("`{name}` has only one Adam moment"))),
        }
    }
    let steps = steps.unwrap_or(0);
    if steps > 0 && m.len() != names.len() {
        return Err(Error::format(path, "optimizer moments incomplete"));
    }
    state.restore(steps, m, v);
    Ok(())
}

fn encode_counter(steps: u64) -> Result<Tensor<f32>> {
    let s = u32::try_from(steps).map_err(|_| Error::usage(format!("step count {steps} exceeds 32 bits")))?;
    let halves = vec![(s & 0xffff) as f32, (s >> 16) as f32];
    Ok(Tensor::from_vec(Shape::new(1, 1, 1, 2), halves)?)
}

fn decode_counter(t: &Tensor<f32>) -> std::result::Result<u64, String> {
    let d = t.data();
    let ok = |v: f32| v >= 0.0 && v < 65536.0 && v.fract() == 0.0;
    if t.shape() != Shape::new(1, 1, 1, 2) || !ok(d[0]) || !ok(d[1]) {
        return Err("malformed optimizer step counter".into());
    }
    Ok(d[0] as u64 | (d[1] as u64) << 16)
}
