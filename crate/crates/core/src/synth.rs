//! Procedural relighting scenes: domes and boxes on a checkered ground
//! plane, lit from one of eight compass directions at a fixed elevation,
//! with hard shadows found by marching the height field toward the light.
//!
//! Image coordinates put north at the top (`-y`) and east on the right (`+x`).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const AMBIENT: f64 = 0.25;
pub const ELEVATION_DEG: f64 = 35.0;
pub const TEMPERATURES: [u32; 5] = [2500, 3500, 4500, 5500, 6500];
/// Temperature used for the shadow-free reference.
pub const NEUTRAL_KELVIN: u32 = 4500;
pub const MIN_RESOLUTION: usize = 32;
pub const MAX_RESOLUTION: usize = 256;
const MARCH_STEP: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    N,
    NE,
    E,
    SE,
    S,
    SW,
    W,
    NW,
}

impl Direction {
    pub const ALL: [Direction; 8] = [
        Direction::N,
        Direction::NE,
        Direction::E,
        Direction::SE,
        Direction::S,
        Direction::SW,
        Direction::W,
        Direction::NW,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Direction::N => "N",
            Direction::NE => "NE",
            Direction::E => "E",
            Direction::SE => "SE",
            Direction::S => "S",
            Direction::SW => "SW",
            Direction::W => "W",
            Direction::NW => "NW",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.name() == s)
    }

    pub fn opposite(self) -> Self {
        let i = Self::ALL.iter().position(|&d| d == self).expect("listed");
        Self::ALL[(i + 4) % 8]
    }

    /// Integer step toward the light in image coordinates.
    pub fn offset(self) -> (i32, i32) {
        match self {
            Direction::N => (0, -1),
            Direction::NE => (1, -1),
            Direction::E => (1, 0),
            Direction::SE => (1, 1),
            Direction::S => (0, 1),
            Direction::SW => (-1, 1),
            Direction::W => (-1, 0),
            Direction::NW => (-1, -1),
        }
    }

    /// Unit vector toward the light: horizontal part along [`offset`](Self::offset),
    /// raised by the fixed elevation.
    pub fn light_vector(self) -> [f64; 3] {
        let (dx, dy) = self.offset();
        let norm = Float::sqrt((dx * dx + dy * dy) as f64);
        let el = ELEVATION_DEG.to_radians();
        let (s, c) = (Float::sin(el), Float::cos(el));
        [c * dx as f64 / norm, c * dy as f64 / norm, s]
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// RGB multipliers per color temperature. Blue over red grows with temperature.
pub fn temperature_gain(kelvin: u32) -> Option<[f64; 3]> {
    Some(match kelvin {
        2500 => [1.00, 0.65, 0.36],
        3500 => [1.00, 0.79, 0.57],
        4500 => [1.00, 0.89, 0.77],
        5500 => [1.00, 0.97, 0.94],
        6500 => [0.95, 0.97, 1.00],
        _ => return None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LightSetting {
    pub direction: Direction,
    pub kelvin: u32,
}

impl LightSetting {
    /// The fixed transfer target: light from the east at 4500 K.
    pub const TARGET: LightSetting = LightSetting {
        direction: Direction::E,
        kelvin: 4500,
    };

    pub fn new(direction: Direction, kelvin: u32) -> Result<Self> {
        if temperature_gain(kelvin).is_none() {
            return Err(Error::invalid("color temperature", format!("{kelvin} K is not one of {TEMPERATURES:?}")));
        }
        Ok(LightSetting { direction, kelvin })
    }

    /// All 40 settings, direction-major.
    pub fn all() -> impl Iterator<Item = LightSetting> {
        Direction::ALL
            .into_iter()
            .flat_map(|direction| TEMPERATURES.into_iter().map(move |kelvin| LightSetting { direction, kelvin }))
    }

    pub fn gain(&self) -> [f64; 3] {
        temperature_gain(self.kelvin).expect("validated temperature")
    }
}

impl fmt::Display for LightSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.direction, self.kelvin)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectShape {
    /// Half-ellipsoid cap.
    Disk,
    /// Axis-aligned flat-topped square prism.
    Box,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: ObjectShape,
    /// Center in pixel coordinates; always a pixel center.
    pub center: (f64, f64),
    /// Radius, or half side for boxes.
    pub radius: f64,
    pub height: f64,
    pub albedo: [f64; 3],
}

impl SceneObject {
    /// Height of the object's surface at `(x, y)`, or `None` outside its footprint.
    pub fn height_at(&self, x: f64, y: f64) -> Option<f64> {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        match self.shape {
            ObjectShape::Disk => {
                let q = (dx * dx + dy * dy) / (self.radius * self.radius);
                (q < 1.0).then(|| self.height * Float::sqrt(1.0 - q))
            }
            ObjectShape::Box => (dx.abs() <= self.radius && dy.abs() <= self.radius).then_some(self.height),
        }
    }

    /// Unit surface normal at a point inside the footprint.
    fn normal_at(&self, x: f64, y: f64) -> [f64; 3] {
        match self.shape {
            ObjectShape::Box => [0.0, 0.0, 1.0],
            ObjectShape::Disk => {
                let (dx, dy) = (x - self.center.0, y - self.center.1);
                let (r, h) = (self.radius, self.height);
                // Gradient of (dx/r)^2 + (dy/r)^2 + (z/h)^2 = 1.
                let z = self.height_at(x, y).unwrap_or(0.0);
                let n = [dx / (r * r), dy / (r * r), z / (h * h)];
                let len = Float::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
                if len == 0.0 {
                    [0.0, 0.0, 1.0]
                } else {
                    [n[0] / len, n[1] / len, n[2] / len]
                }
            }
        }
    }

    /// Radius of the disk containing the object and any shadow it casts.
    pub fn extent(&self) -> f64 {
        let footprint = match self.shape {
            ObjectShape::Disk => self.radius,
            ObjectShape::Box => self.radius * core::f64::consts::SQRT_2,
        };
        footprint + self.height / Float::tan(ELEVATION_DEG.to_radians()) + 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub resolution: usize,
    pub objects: Vec<SceneObject>,
    /// Two ground tones laid out as a checkerboard.
    pub ground: [[f64; 3]; 2],
    pub checker: usize,
}

pub fn check_resolution(resolution: usize) -> Result<()> {
    if !resolution.is_power_of_two() || !(MIN_RESOLUTION..=MAX_RESOLUTION).contains(&resolution) {
        return Err(Error::invalid(
            "resolution",
            format!("{resolution} must be a power of two in [{MIN_RESOLUTION}, {MAX_RESOLUTION}]"),
        ));
    }
    Ok(())
}

fn random_albedo<R: Rng>(rng: &mut R) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.random_range(0.2..0.8))
}

impl SceneSpec {
    /// Scene fully determined by `seed`: 2 to 6 non-interfering objects.
    pub fn generate(seed: u64, resolution: usize) -> Result<Self> {
        check_resolution(resolution)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spec = Self::flat_with(&mut rng, seed, resolution);
        let want = rng.random_range(2..=6usize);
        let r = resolution as f64;
        let mut scale = 1.0;
        loop {
            spec.objects.clear();
            for _ in 0..400 {
                if spec.objects.len() == want {
                    break;
                }
                let shape = if rng.random_bool(0.5) { ObjectShape::Disk } else { ObjectShape::Box };
                let radius = (rng.random_range(0.04..0.08) * r * scale).max(2.0);
                let height = (rng.random_range(0.03..0.07) * r * scale).max(1.5);
                let mut obj = SceneObject {
                    shape,
                    center: (0.0, 0.0),
                    radius,
                    height,
                    albedo: random_albedo(&mut rng),
                };
                let e = obj.extent();
                let lo = Float::ceil(e) as usize;
                if 2 * lo + 1 > resolution {
                    continue;
                }
                let cx = rng.random_range(lo..resolution - lo) as f64 + 0.5;
                let cy = rng.random_range(lo..resolution - lo) as f64 + 0.5;
                obj.center = (cx, cy);
                let clear = spec.objects.iter().all(|o| {
                    let (dx, dy) = (o.center.0 - cx, o.center.1 - cy);
                    Float::sqrt(dx * dx + dy * dy) > o.extent() + e
                });
                if clear {
                    spec.objects.push(obj);
                }
            }
            if spec.objects.len() >= 2 {
                return Ok(spec);
            }
            scale *= 0.8;
        }
    }

    /// Ground plane only.
    pub fn flat(seed: u64, resolution: usize) -> Result<Self> {
        check_resolution(resolution)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::flat_with(&mut rng, seed, resolution))
    }

    fn flat_with(rng: &mut ChaCha8Rng, seed: u64, resolution: usize) -> Self {
        SceneSpec {
            seed,
            resolution,
            objects: Vec::new(),
            ground: [random_albedo(rng), random_albedo(rng)],
            checker: (resolution / 8).max(1),
        }
    }

    /// Tallest surface at `(x, y)` and the object providing it.
    fn surface(&self, x: f64, y: f64) -> (f64, Option<usize>) {
        let mut best = (0.0, None);
        for (i, o) in self.objects.iter().enumerate() {
            if let Some(h) = o.height_at(x, y) {
                if h > best.0 {
                    best = (h, Some(i));
                }
            }
        }
        best
    }

    fn max_height(&self) -> f64 {
        self.objects.iter().map(|o| o.height).fold(0.0, f64::max)
    }

    fn ground_albedo(&self, px: usize, py: usize) -> [f64; 3] {
        self.ground[((px / self.checker) + (py / self.checker)) % 2]
    }

    /// Albedo and normal at the center of pixel `(px, py)`.
    fn material(&self, px: usize, py: usize) -> ([f64; 3], [f64; 3], f64) {
        let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
        match self.surface(x, y) {
            (h, Some(i)) => (self.objects[i].albedo, self.objects[i].normal_at(x, y), h),
            _ => (self.ground_albedo(px, py), [0.0, 0.0, 1.0], 0.0),
        }
    }

    /// For each pixel, the object that blocks the light from `direction`, if any.
    pub fn shadow_map(&self, direction: Direction) -> ShadowMap {
        let r = self.resolution;
        let l = direction.light_vector();
        let horiz = Float::sqrt(l[0] * l[0] + l[1] * l[1]);
        let (ux, uy) = (l[0] / horiz, l[1] / horiz);
        let rise = l[2] / horiz;
        let top = self.max_height();
        let mut occluder = vec![None; r * r];
        if top > 0.0 {
            for py in 0..r {
                for px in 0..r {
                    let (x0, y0) = (px as f64 + 0.5, py as f64 + 0.5);
                    let (z0, _) = self.surface(x0, y0);
                    let mut t = MARCH_STEP;
                    while z0 + rise * t <= top {
                        let (x, y) = (x0 + ux * t, y0 + uy * t);
                        if x < 0.0 || y < 0.0 || x >= r as f64 || y >= r as f64 {
                            break;
                        }
                        if let (h, Some(i)) = self.surface(x, y) {
                            if h > z0 + rise * t {
                                occluder[py * r + px] = Some(i);
                                break;
                            }
                        }
                        t += MARCH_STEP;
                    }
                }
            }
        }
        ShadowMap {
            resolution: r,
            occluder,
        }
    }

    fn shade(&self, direction: Direction, shadows: &ShadowMap, gain: [f64; 3]) -> Tensor<f32> {
        let l = direction.light_vector();
        self.paint(gain, |px, py, n| {
            if shadows.is_shadowed(px, py) {
                AMBIENT
            } else {
                AMBIENT + dot(n, l).max(0.0)
            }
        })
    }

    fn paint(&self, gain: [f64; 3], light: impl Fn(usize, usize, [f64; 3]) -> f64) -> Tensor<f32> {
        let r = self.resolution;
        let plane = r * r;
        let mut data = vec![0.0f32; 3 * plane];
        for py in 0..r {
            for px in 0..r {
                let (albedo, n, _) = self.material(px, py);
                let e = light(px, py, n);
                for c in 0..3 {
                    data[c * plane + py * r + px] = (albedo[c] * e * gain[c]).clamp(0.0, 1.0) as f32;
                }
            }
        }
        Tensor::from_vec(Shape::new(1, 3, r, r), data).expect("sized buffer")
    }

    /// Lit render in `[0, 1]`, shape `(1, 3, r, r)`.
    pub fn render(&self, light: LightSetting) -> Tensor<f32> {
        let shadows = self.shadow_map(light.direction);
        self.shade(light.direction, &shadows, light.gain())
    }

    /// Renders all 40 settings, sharing the shadow computation per direction.
    pub fn render_all(&self) -> Vec<(LightSetting, Tensor<f32>)> {
        let mut out = Vec::with_capacity(40);
        for d in Direction::ALL {
            let shadows = self.shadow_map(d);
            for k in TEMPERATURES {
                let light = LightSetting { direction: d, kelvin: k };
                out.push((light, self.shade(d, &shadows, light.gain())));
            }
        }
        out
    }

    /// Ambient plus the diffuse term averaged over all eight directions,
    /// without shadows, at the neutral temperature.
    pub fn render_shadow_free(&self) -> Tensor<f32> {
        let lights = Direction::ALL.map(Direction::light_vector);
        let gain = temperature_gain(NEUTRAL_KELVIN).expect("table entry");
        self.paint(gain, |_, _, n| {
            AMBIENT + lights.iter().map(|&l| dot(n, l).max(0.0)).sum::<f64>() / lights.len() as f64
        })
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Per-pixel occluder indices for one light direction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShadowMap {
    pub resolution: usize,
    occluder: Vec<Option<usize>>,
}

impl ShadowMap {
    pub fn is_shadowed(&self, px: usize, py: usize) -> bool {
        self.occluder[py * self.resolution + px].is_some()
    }

    pub fn occluder(&self, px: usize, py: usize) -> Option<usize> {
        self.occluder[py * self.resolution + px]
    }

    pub fn count(&self) -> usize {
        self.occluder.iter().filter(|o| o.is_some()).count()
    }

    /// Centroid (pixel-center coordinates) of the shadow cast by `object`.
    pub fn centroid(&self, object: usize) -> Option<(f64, f64)> {
        let r = self.resolution;
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for (i, o) in self.occluder.iter().enumerate() {
            if *o == Some(object) {
                sx += (i % r) as f64 + 0.5;
                sy += (i / r) as f64 + 0.5;
                n += 1;
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }
}

/// Train and validation scenes come from disjoint seed ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            _ => None,
        }
    }
}

/// Seed of scene `index` in a corpus: the corpus seed in the high 32 bits,
/// the split in bit 31 and the index below it.
pub fn scene_seed(corpus_seed: u32, split: Split, index: u32) -> u64 {
    assert!(index < 1 << 31, "scene index out of range");
    let bit = match split {
        Split::Train => 0,
        Split::Val => 1u64 << 31,
    };
    ((corpus_seed as u64) << 32) | bit | index as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn forty_settings() {
        let all: Vec<_> = LightSetting::all().collect();
        assert_eq!(all.len(), 40);
        assert_eq!(all[0].to_string(), "N_2500");
        assert!(LightSetting::new(Direction::E, 4000).is_err());
        assert_eq!(Direction::SW.opposite(), Direction::NE);
    }

    #[test]
    fn light_vectors_are_unit() {
        for d in Direction::ALL {
            let l = d.light_vector();
            assert!((dot(l, l) - 1.0).abs() < 1e-12);
            assert!((l[2] - ELEVATION_DEG.to_radians().sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn generated_scenes_respect_limits() {
        for seed in 0..20 {
            let s = SceneSpec::generate(seed, 32).unwrap();
            assert!((2..=6).contains(&s.objects.len()));
            for o in &s.objects {
                let e = o.extent();
                assert!(o.center.0 - e >= 0.0 && o.center.0 + e <= 32.0);
            }
        }
        assert!(SceneSpec::generate(0, 48).is_err());
        assert!(SceneSpec::generate(0, 512).is_err());
    }

    #[test]
    fn seeds_disjoint() {
        assert_ne!(scene_seed(7, Split::Train, 0), scene_seed(7, Split::Val, 0));
        assert_eq!(scene_seed(0, Split::Train, 5), 5);
    }
}
