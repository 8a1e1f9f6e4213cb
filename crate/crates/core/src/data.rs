//! Paired rainy/clean datasets, aligned cropping and synthetic rain.
//!
//! A dataset root holds `rainy/` and `clean/` directories whose files pair by
//! identical name. A `manifest.tsv` in the root, if present, overrides that
//! layout with explicit `rainy_path<TAB>clean_path` lines, relative to the root.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::ImageTensor;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";
const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// A rainy image with its clean ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub rainy: ImageTensor,
    pub clean: ImageTensor,
}

impl PairedSample {
    pub fn new(id: impl Into<String>, rainy: ImageTensor, clean: ImageTensor) -> Result<Self> {
        let id = id.into();
        if rainy.dims() != clean.dims() {
            return Err(Error::Input(format!(
                "{id}: rainy image is {:?} but clean image is {:?}",
                rainy.dims(),
                clean.dims()
            )));
        }
        Ok(Self { id, rainy, clean })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.rainy.dims()
    }
}

/// Where a dataset lives and how training crops are drawn from it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSpec {
    pub rainy_dir: PathBuf,
    pub clean_dir: PathBuf,
    /// Optional explicit pairing file; overrides filename matching.
    pub manifest: Option<PathBuf>,
    /// Square training crop side; 0 trains on whole images.
    pub crop: usize,
    pub seed: u64,
}

impl DatasetSpec {
    /// Standard layout under `root`, picking up `manifest.tsv` if it exists.
    pub fn from_root(root: impl AsRef<Path>) -> Self {
        let root = root.as_ref();
        let manifest = root.join(MANIFEST_FILE);
        Self {
            rainy_dir: root.join("rainy"),
            clean_dir: root.join("clean"),
            manifest: manifest.is_file().then_some(manifest),
            crop: 100,
            seed: 0,
        }
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            let name = path
                .file_name()
                .expect("file has a name")
                .to_string_lossy()
                .into_owned();
            out.insert(name, path);
        }
    }
    Ok(out)
}

/// Image files in `path`: the file itself, or the images in a directory
/// sorted by name.
pub fn image_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        Ok(list_images(path)?.into_values().collect())
    } else if path.is_file() {
        Ok(vec![path.to_path_buf()])
    } else {
        Err(Error::Input(format!("{} does not exist", path.display())))
    }
}

fn manifest_pairs(manifest: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (rainy, clean) = line.split_once('\t').ok_or_else(|| {
            Error::Input(format!(
                "{}:{}: expected `rainy_path<TAB>clean_path`",
                manifest.display(),
                n + 1
            ))
        })?;
        let id = rainy.trim().to_owned();
        pairs.push((id, base.join(rainy.trim()), base.join(clean.trim())));
    }
    pairs.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(pairs)
}

/// Loads every pair, sorted lexicographically by id (the file name, or the
/// rainy path for manifest datasets).
pub fn load_pairs(spec: &DatasetSpec) -> Result<Vec<PairedSample>> {
    let pairs = match &spec.manifest {
        Some(manifest) => manifest_pairs(manifest)?,
        None => {
            let rainy = list_images(&spec.rainy_dir)?;
            let clean = list_images(&spec.clean_dir)?;
            let mut orphans: Vec<String> = rainy
                .keys()
                .filter(|k| !clean.contains_key(*k))
                .map(|k| format!("rainy/{k}"))
                .chain(
                    clean
                        .keys()
                        .filter(|k| !rainy.contains_key(*k))
                        .map(|k| format!("clean/{k}")),
                )
                .collect();
            if !orphans.is_empty() {
                orphans.sort();
                return Err(Error::Orphans(orphans));
            }
            rainy
                .into_iter()
                .map(|(name, path)| {
                    let clean_path = clean[&name].clone();
                    (name, path, clean_path)
                })
                .collect()
        }
    };
    pairs
        .into_iter()
        .map(|(id, r, c)| PairedSample::new(id, ImageTensor::load(r)?, ImageTensor::load(c)?))
        .collect()
}

/// Cuts the same `size x size` window out of both images.
pub fn random_crop_pair(sample: &PairedSample, size: usize, rng: &mut impl Rng) -> Result<PairedSample> {
    let (h, w) = sample.dims();
    if size == 0 || h < size || w < size {
        return Err(Error::TooSmall {
            what: "random cropping",
            min_height: size.max(1),
            min_width: size.max(1),
            height: h,
            width: w,
        });
    }
    let y0 = rng.random_range(0..=h - size);
    let x0 = rng.random_range(0..=w - size);
    Ok(PairedSample {
        id: sample.id.clone(),
        rainy: sample.rainy.crop(y0, x0, size, size),
        clean: sample.clean.crop(y0, x0, size, size),
    })
}

/// Parameters of the streak generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RainParams {
    pub streaks: usize,
    /// Streak direction in degrees from vertical.
    pub angle_deg: f64,
    pub length_px: usize,
    /// Peak brightness added by one streak, in `[0, 1]`.
    pub intensity: f64,
}

impl Default for RainParams {
    fn default() -> Self {
        Self {
            streaks: 40,
            angle_deg: 15.0,
            length_px: 8,
            intensity: 0.6,
        }
    }
}

/// Adds bright oriented streaks at seeded positions; the result is clamped
/// to `[0, 1]` and never darker than `clean`.
pub fn synth_rain(clean: &ImageTensor, params: &RainParams, seed: u64) -> ImageTensor {
    let (h, w) = clean.dims();
    let mut layer = vec![0.0; h * w];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dx, dy) = {
        let a = params.angle_deg.to_radians();
        (a.sin(), a.cos())
    };
    let intensity = params.intensity.clamp(0.0, 1.0);
    for _ in 0..params.streaks {
        let y0 = rng.random_range(0.0..h as f64);
        let x0 = rng.random_range(0.0..w as f64);
        let brightness = intensity * rng.random_range(0.5..=1.0);
        for t in 0..params.length_px {
            let y = (y0 + dy * t as f64).round();
            let x = (x0 + dx * t as f64).round();
            if (0.0..h as f64).contains(&y) && (0.0..w as f64).contains(&x) {
                let cell = &mut layer[y as usize * w + x as usize];
                *cell = f64::max(*cell, brightness);
            }
        }
    }
    ImageTensor::from_fn(h, w, |c, y, x| {
        let v = clean.get(c, y, x);
        (v + layer[y * w + x]).min(1.0).max(v)
    })
}

/// A smooth seeded test scene: per-channel sinusoids over a soft gradient,
/// with values in `[0.1, 0.7]` so added rain stays visible.
pub fn synthetic_scene(height: usize, width: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..1.0),
            ]
        })
        .collect();
    ImageTensor::from_fn(height, width, |c, y, x| {
        let [fy, fx, phase, tilt] = waves[c];
        let (v, u) = (y as f64 / height as f64, x as f64 / width as f64);
        let wave = (std::f64::consts::TAU * (fy * v + fx * u) + phase).sin();
        0.4 + 0.2 * wave * (1.0 - 0.5 * tilt) + 0.1 * tilt * (u - 0.5)
    })
}

/// `count` synthetic pairs: [`synthetic_scene`] with [`synth_rain`] on top,
/// identified as `synth_000`, `synth_001`, ...
pub fn synthetic_pairs(count: usize, size: usize, params: &RainParams, seed: u64) -> Vec<PairedSample> {
    (0..count)
        .map(|i| {
            let s = seed.wrapping_mul(1000).wrapping_add(i as u64);
            let clean = synthetic_scene(size, size, s);
            let rainy = synth_rain(&clean, params, s ^ 0x5eed);
            PairedSample::new(format!("synth_{i:03}"), rainy, clean).expect("equal sizes")
        })
        .collect()
}

fn mix(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// RNG for everything random in one epoch; depends only on `(seed, epoch)`.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, epoch))
}

/// Shuffled sample order for `epoch`.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut epoch_rng(seed, epoch));
    order
}
