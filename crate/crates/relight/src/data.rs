//! Loads a corpus into memory at model resolution and draws batches.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relight_core::{Batch, Tensor};

use crate::corpus::{Manifest, ManifestRow};
use crate::error::{Error, Result};
use crate::image_io;

/// Manifest pairs with their images in `[0, 1]`. Targets and shadow-free
/// images are shared by every pair of a scene and stored once.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub resolution: usize,
    images: Vec<Tensor<f32>>,
    pairs: Vec<[usize; 3]>,
}

/// Checks that every file named by the manifest exists.
pub fn check_files(root: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut missing = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for r in rows {
        for p in [&r.input, &r.target, &r.shadow_free] {
            if seen.insert(p.as_str()) && !root.join(p).is_file() {
                missing.push(root.join(p).display().to_string());
            }
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingFiles(missing))
    }
}

impl Dataset {
    /// Reads the first `max_pairs` pairs (all when 0) and shrinks every
    /// image to `resolution`, which must divide the stored size.
    pub fn load(root: &Path, resolution: usize, max_pairs: usize) -> Result<Self> {
        let mut rows = Manifest::read(root)?.rows;
        if max_pairs > 0 {
            rows.truncate(max_pairs);
        }
        check_files(root, &rows)?;
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut images = Vec::new();
        let mut pairs = Vec::with_capacity(rows.len());
        for r in &rows {
            let mut ids = [0; 3];
            for (slot, rel) in ids.iter_mut().zip([&r.input, &r.target, &r.shadow_free]) {
                if let Some(&i) = index.get(rel) {
                    *slot = i;
                    continue;
                }
                let path = root.join(rel);
                let img = image_io::read_png(&path)?;
                let side = img.shape().h;
                if side < resolution || side % resolution != 0 {
                    return Err(Error::Image {
                        path,
                        detail: format!("{side}x{side} image cannot be shrunk to {resolution}x{resolution}"),
                    });
                }
                images.push(image_io::box_downsample(&img, side / resolution)?);
                index.insert(rel.clone(), images.len() - 1);
                *slot = images.len() - 1;
            }
            pairs.push(ids);
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            rows,
            resolution,
            images,
            pairs,
        })
    }

    /// Side of the stored images, read from the first input file.
    pub fn native_resolution(root: &Path) -> Result<usize> {
        let rows = Manifest::read(root)?.rows;
        let path = root.join(&rows[0].input);
        Ok(image_io::read_png(&path)?.shape().h)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn input(&self, i: usize) -> &Tensor<f32> {
        &self.images[self.pairs[i][0]]
    }

    pub fn target(&self, i: usize) -> &Tensor<f32> {
        &self.images[self.pairs[i][1]]
    }

    pub fn shadow_free(&self, i: usize) -> &Tensor<f32> {
        &self.images[self.pairs[i][2]]
    }

    /// Stacks the given pairs, mapped to `[-1, 1]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch<f32>> {
        let stack = |slot: usize| -> Result<Tensor<f32>> {
            let items: Vec<_> = indices
                .iter()
                .map(|&i| image_io::to_signed(&self.images[self.pairs[i][slot]]))
                .collect();
            Ok(Tensor::stack(&items)?)
        };
        Ok(Batch::new(stack(0)?, stack(1)?, stack(2)?)?)
    }
}

/// Pair indices used at 1-based `step`. Pairs are visited epoch by epoch,
/// each epoch in its own seeded order, so the result depends only on the
/// arguments and never on how many steps ran before in this process.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, pairs: usize) -> Vec<usize> {
    assert!(step >= 1 && pairs > 0, "steps are 1-based and the dataset is non-empty");
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch_size as u64)
        .map(|j| {
            let k = (step - 1) * batch_size as u64 + j;
            let (epoch, pos) = (k / pairs as u64, (k % pairs as u64) as usize);
            let order = match &cached {
                Some((e, o)) if *e == epoch => o,
                _ => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
                    let mut o: Vec<usize> = (0..pairs).collect();
                    o.shuffle(&mut rng);
                    &cached.insert((epoch, o)).1
                }
            };
            order[pos]
        })
        .collect()
}
