//! On-disk synthetic corpus: one directory per scene holding all lit
//! renders and the shadow-free proxy, plus a tab-separated manifest of
//! every (source setting -> fixed target setting) pair.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use relight_core::synth::{self, Direction, LightSetting, SceneSpec, Split};

use crate::error::{Error, Result};
use crate::image_io;

pub const MANIFEST: &str = "manifest.tsv";
pub const SHADOW_FREE_FILE: &str = "shadow_free.png";
pub const MAX_SCENES: u32 = 1 << 20;

/// One training or evaluation pair. Paths are relative to the corpus root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub scene_seed: u64,
    pub input: String,
    pub target: String,
    pub shadow_free: String,
    pub source: LightSetting,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

pub fn setting_file(light: LightSetting) -> String {
    format!("{light}.png")
}

impl Manifest {
    /// Rows of one scene, in setting order, skipping the target setting.
    pub fn scene_rows(scene_seed: u64) -> impl Iterator<Item = ManifestRow> {
        let target = format!("{scene_seed}/{}", setting_file(LightSetting::TARGET));
        let shadow_free = format!("{scene_seed}/{SHADOW_FREE_FILE}");
        LightSetting::all()
            .filter(|&l| l != LightSetting::TARGET)
            .map(move |l| ManifestRow {
                scene_seed,
                input: format!("{scene_seed}/{}", setting_file(l)),
                target: target.clone(),
                shadow_free: shadow_free.clone(),
                source: l,
            })
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.scene_seed, r.input, r.target, r.shadow_free, r.source.direction, r.source.kelvin
            );
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |detail: String| Error::format(path, format!("line {}: {detail}", i + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(bad(format!("expected 6 tab-separated fields, found {}", f.len())));
            }
            let scene_seed = f[0].parse().map_err(|_| bad(format!("bad scene seed `{}`", f[0])))?;
            let direction = Direction::parse(f[4]).ok_or_else(|| bad(format!("bad direction `{}`", f[4])))?;
            let kelvin = f[5].parse().map_err(|_| bad(format!("bad temperature `{}`", f[5])))?;
            let source = LightSetting::new(direction, kelvin).map_err(|e| bad(e.to_string()))?;
            for p in &f[1..4] {
                if p.is_empty() || Path::new(p).is_absolute() || p.split('/').any(|c| c == "..") {
                    return Err(bad(format!("path `{p}` must be relative to the corpus root")));
                }
            }
            rows.push(ManifestRow {
                scene_seed,
                input: f[1].to_string(),
                target: f[2].to_string(),
                shadow_free: f[3].to_string(),
                source,
            });
        }
        if rows.is_empty() {
            return Err(Error::format(path, "manifest lists no pairs"));
        }
        Ok(Manifest { rows })
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text, &path)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusSpec {
    pub scenes: u32,
    pub resolution: usize,
    pub seed: u32,
    pub split: Split,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 || self.scenes > MAX_SCENES {
            return Err(Error::usage(format!("scene count {} must be in 1..={MAX_SCENES}", self.scenes)));
        }
        synth::check_resolution(self.resolution)?;
        Ok(())
    }

    pub fn scene_seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.scenes).map(|i| synth::scene_seed(self.seed, self.split, i))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusSummary {
    pub scenes: usize,
    pub lit_images: usize,
    pub shadow_free_images: usize,
    pub pairs: usize,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Renders every scene and writes the manifest last.
pub fn build_corpus(spec: &CorpusSpec, root: &Path) -> Result<CorpusSummary> {
    spec.validate()?;
    create_dir(root)?;
    let mut manifest = Manifest::default();
    let mut summary = CorpusSummary {
        scenes: 0,
        lit_images: 0,
        shadow_free_images: 0,
        pairs: 0,
    };
    for seed in spec.scene_seeds() {
        let scene = SceneSpec::generate(seed, spec.resolution)?;
        let dir: PathBuf = root.join(seed.to_string());
        create_dir(&dir)?;
        for (light, image) in scene.render_all() {
            image_io::write_png(dir.join(setting_file(light)), &image)?;
            summary.lit_images += 1;
        }
        image_io::write_png(dir.join(SHADOW_FREE_FILE), &scene.render_shadow_free())?;
        summary.shadow_free_images += 1;
        summary.scenes += 1;
        manifest.rows.extend(Manifest::scene_rows(seed));
    }
    summary.pairs = manifest.rows.len();
    let path = root.join(MANIFEST);
    fs::write(&path, manifest.to_tsv()).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}
