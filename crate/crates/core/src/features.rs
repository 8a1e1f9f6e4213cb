//! Frozen VGG-16-style feature extractor shared by the perceptual losses.
//!
//! The stack follows the VGG-16 layout (`64, 64, M, 128, 128, M, 256 x3, M,
//! 512 x3, M, 512 x3`) scaled by `base_width / 64`. Taps name convolutions by
//! their 1-based position and return the post-ReLU activation, so the default
//! taps `2, 4, 7` are the usual `relu1_2`, `relu2_2` and `relu3_3`.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sapnet_autograd::{ConvOptions, Tape, Tensor, Var};

use crate::image::ImageTensor;
use crate::nn::{Binding, Conv};
use crate::pretrained::{self, WeightFile, WeightSource};
use crate::{Error, Result};

/// ImageNet channel statistics used to normalise inputs.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Output width multipliers (of `base_width`) of the 13 convolutions.
const WIDTHS: [usize; 13] = [1, 1, 2, 2, 4, 4, 4, 8, 8, 8, 8, 8, 8];
/// Convolutions followed by 2x2 max pooling.
const POOL_AFTER: [usize; 5] = [2, 4, 7, 10, 13];

const VGG_FILE: &str = "vgg16.safetensors";

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ExtractorConfig {
    pub source: WeightSource,
    /// Explicit weight file; defaults to `$SAPNET_CACHE/vgg16.safetensors`.
    pub weights: Option<PathBuf>,
    pub seed: u64,
    pub base_width: usize,
    /// 1-based convolution indices, shallow to deep.
    pub taps: Vec<usize>,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            source: WeightSource::Pretrained,
            weights: None,
            seed: 0,
            base_width: 64,
            taps: vec![2, 4, 7],
        }
    }
}

impl ExtractorConfig {
    pub fn seeded(base_width: usize, taps: Vec<usize>, seed: u64) -> Self {
        Self {
            source: WeightSource::SeededRandom,
            weights: None,
            seed,
            base_width,
            taps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::config("loss.vgg_base_width", "must be positive"));
        }
        if self.taps.is_empty() {
            return Err(Error::config("loss.taps", "needs at least one tap"));
        }
        if self.taps.windows(2).any(|w| w[0] >= w[1]) || self.taps[0] == 0 || *self.taps.last().unwrap() > 13 {
            return Err(Error::config(
                "loss.taps",
                "taps must be strictly increasing conv indices in 1..=13",
            ));
        }
        if self.source == WeightSource::Pretrained && self.base_width != 64 {
            return Err(Error::config(
                "loss.vgg_base_width",
                "pretrained weights need base width 64",
            ));
        }
        Ok(())
    }

    fn depth(&self) -> usize {
        *self.taps.last().expect("validated taps")
    }

    /// Smallest input side that survives every pooling before the deepest tap.
    pub fn min_input_side(&self) -> usize {
        min_side(self.depth())
    }
}

fn min_side(depth: usize) -> usize {
    1 << POOL_AFTER.iter().filter(|&&p| p < depth).count()
}

fn in_channels(i: usize, base: usize) -> usize {
    if i == 0 {
        3
    } else {
        WIDTHS[i - 1] * base
    }
}

/// Position of conv `i` (0-based) in torchvision's `features` sequence.
fn torchvision_index(i: usize) -> usize {
    2 * i + POOL_AFTER.iter().filter(|&&p| p <= i).count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    convs: Vec<Conv>,
    taps: Vec<usize>,
}

impl FeatureExtractor {
    pub fn build(cfg: &ExtractorConfig) -> Result<Self> {
        cfg.validate()?;
        let convs = match cfg.source {
            WeightSource::SeededRandom => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                (0..cfg.depth())
                    .map(|i| Conv::he_normal(in_channels(i, cfg.base_width), WIDTHS[i] * cfg.base_width, 3, &mut rng))
                    .collect()
            }
            WeightSource::Pretrained => {
                let path = pretrained::resolve(cfg.weights.as_deref(), VGG_FILE, "VGG-16", "loss.vgg")?;
                let file = WeightFile::open(path, "VGG-16", "loss.vgg")?;
                (0..cfg.depth())
                    .map(|i| {
                        let (cin, cout) = (in_channels(i, 64), WIDTHS[i] * 64);
                        let idx = torchvision_index(i);
                        Ok(Conv {
                            weight: file.tensor(&format!("features.{idx}.weight"), &[cout, cin, 3, 3])?,
                            bias: file.tensor(&format!("features.{idx}.bias"), &[cout])?,
                        })
                    })
                    .collect::<Result<_>>()?
            }
        };
        Ok(Self {
            convs,
            taps: cfg.taps.clone(),
        })
    }

    pub fn min_input_side(&self) -> usize {
        min_side(self.convs.len())
    }

    pub fn tap_count(&self) -> usize {
        self.taps.len()
    }

    /// Spatial downsampling factor of every tap relative to the input.
    pub fn tap_strides(&self) -> Vec<usize> {
        self.taps
            .iter()
            .map(|&t| 1 << POOL_AFTER.iter().filter(|&&p| p < t).count())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(Conv::param_count).sum()
    }

    /// Tap activations for a `[3, H, W]` value in `[0, 1]`, shallow to deep.
    /// Weights are constants; gradients flow to `x`.
    pub fn extract<'t>(&self, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Input(format!(
                "feature extractor expects [3, H, W], got {shape:?}"
            )));
        }
        let min = self.min_input_side();
        if shape[1] < min || shape[2] < min {
            return Err(Error::TooSmall {
                what: "the feature extractor",
                min_height: min,
                min_width: min,
                height: shape[1],
                width: shape[2],
            });
        }
        let tape = x.tape();
        let shift = tape.fixed(Tensor::from_vec([3], IMAGENET_MEAN.map(|m| -m).to_vec()));
        let scale = tape.fixed(Tensor::from_vec([3], IMAGENET_STD.map(|s| 1.0 / s).to_vec()));
        let mut h = x.add_channels(shift).mul_channels(scale);
        let mut out = Vec::with_capacity(self.taps.len());
        let same = ConvOptions::same(3, 1);
        for (i, conv) in self.convs.iter().enumerate() {
            let n = i + 1;
            h = conv.forward(h, same, Binding::Frozen).relu();
            if self.taps.contains(&n) {
                out.push(h);
            }
            if POOL_AFTER.contains(&n) && n < self.convs.len() {
                h = h.max_pool2d(2, 2, 0);
            }
        }
        Ok(out)
    }

    pub fn extract_tensors(&self, img: &ImageTensor) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        Ok(self
            .extract(tape.constant(img.tensor()))?
            .into_iter()
            .map(|v| v.value().as_ref().clone())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pretrained::test_support;
    use rand::Rng;

    fn image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(h, w, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn torchvision_indices() {
        let idx: Vec<usize> = (0..13).map(torchvision_index).collect();
        assert_eq!(idx, [0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28]);
    }

    #[test]
    fn default_taps_downsample_by_1_2_4() {
        let fe = FeatureExtractor::build(&ExtractorConfig::seeded(4, vec![2, 4, 7], 1)).unwrap();
        assert_eq!(fe.tap_strides(), [1, 2, 4]);
        let feats = fe.extract_tensors(&image(32, 40, 1)).unwrap();
        assert_eq!(feats.len(), 3);
        let shapes: Vec<&[usize]> = feats.iter().map(Tensor::shape).collect();
        assert_eq!(shapes, [&[4, 32, 40][..], &[8, 16, 20], &[16, 8, 10]]);
    }

    #[test]
    fn extraction_is_deterministic() {
        let cfg = ExtractorConfig::seeded(4, vec![2, 4], 3);
        let img = image(32, 32, 2);
        let a = FeatureExtractor::build(&cfg).unwrap().extract_tensors(&img).unwrap();
        let b = FeatureExtractor::build(&cfg).unwrap().extract_tensors(&img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_inputs_name_the_minimum() {
        let fe = FeatureExtractor::build(&ExtractorConfig::seeded(4, vec![2, 4, 7], 1)).unwrap();
        assert_eq!(fe.min_input_side(), 4);
        let err = fe.extract_tensors(&image(3, 40, 1)).unwrap_err();
        assert!(err.to_string().contains("4x4"), "{err}");
        let full = ExtractorConfig {
            taps: vec![13],
            ..ExtractorConfig::default()
        };
        assert_eq!(full.min_input_side(), 16);
    }

    #[test]
    fn bad_taps_are_rejected() {
        for taps in [vec![], vec![4, 2], vec![0, 3], vec![2, 14]] {
            assert!(ExtractorConfig::seeded(4, taps, 0).validate().is_err());
        }
    }

    #[test]
    fn pretrained_without_file_explains_fallback() {
        let cfg = ExtractorConfig {
            weights: Some("/nonexistent/vgg.safetensors".into()),
            ..ExtractorConfig::default()
        };
        let err = FeatureExtractor::build(&cfg).unwrap_err();
        assert!(matches!(err, Error::PretrainedUnavailable { .. }));
        assert!(err.to_string().contains("seeded_random"));
    }

    #[test]
    fn pretrained_file_loads_by_torchvision_name() {
        let seeded = FeatureExtractor::build(&ExtractorConfig::seeded(64, vec![2, 4], 9)).unwrap();
        let tensors: Vec<(String, Tensor)> = seeded
            .convs
            .iter()
            .enumerate()
            .flat_map(|(i, c)| {
                let idx = torchvision_index(i);
                // round through f32 so the comparison below is exact
                let w = c.weight.map(|v| f64::from(v as f32));
                [
                    (format!("features.{idx}.weight"), w),
                    (format!("features.{idx}.bias"), c.bias.clone()),
                ]
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg16.safetensors");
        test_support::write_f32(&path, &tensors);
        let cfg = ExtractorConfig {
            weights: Some(path),
            taps: vec![2, 4],
            ..ExtractorConfig::default()
        };
        let loaded = FeatureExtractor::build(&cfg).unwrap();
        assert_eq!(loaded.convs[3].weight, tensors[6].1);
    }
}
