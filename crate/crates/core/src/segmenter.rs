//! Frozen background segmenter and its confidence (focal) loss.
//!
//! The encoder is a ResNet bottleneck stack (ResNet-101 by default) with
//! batch norm folded into the convolution biases. The decoder is a feature
//! pyramid: 1x1 laterals, a top-down pathway that upsamples the coarser stair,
//! concatenates it with the lateral and applies two 3x3 convolutions, then a
//! 1x1 head over the concatenation of all four stairs at 1/4 resolution.
//! Every decoder weight is drawn from `N(0, σ²)`; nothing here is trained.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sapnet_autograd::{ConvOptions, Tape, Tensor, Var};

use crate::features::{IMAGENET_MEAN, IMAGENET_STD};
use crate::image::ImageTensor;
use crate::nn::{Binding, Conv};
use crate::pretrained::{self, WeightFile, WeightSource};
use crate::{Error, Result};

/// Total encoder stride; inputs are padded to a multiple of it.
pub const ENCODER_STRIDE: usize = 32;
/// Probability clamp applied before the logarithm of the focal loss.
pub const PROB_EPS: f64 = 1e-7;

const RESNET_FILE: &str = "resnet101.safetensors";
const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct SegConfig {
    pub num_classes: usize,
    pub decoder_init_std: f64,
    pub encoder: WeightSource,
    /// Explicit encoder weight file; defaults to `$SAPNET_CACHE/resnet101.safetensors`.
    pub encoder_weights: Option<PathBuf>,
    pub seed: u64,
    /// Bottleneck blocks per encoder stage.
    pub encoder_blocks: [usize; 4],
    /// Bottleneck width of the first stage; outputs are 4x this, doubling per stage.
    pub encoder_width: usize,
    /// Channels of each decoder stair.
    pub stair_channels: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            num_classes: 21,
            decoder_init_std: 0.05,
            encoder: WeightSource::Pretrained,
            encoder_weights: None,
            seed: 0,
            encoder_blocks: [3, 4, 23, 3],
            encoder_width: 64,
            stair_channels: 128,
        }
    }
}

impl SegConfig {
    /// Small seeded segmenter for tests and examples.
    pub fn tiny(seed: u64) -> Self {
        Self {
            encoder: WeightSource::SeededRandom,
            seed,
            encoder_blocks: [1, 1, 1, 1],
            encoder_width: 4,
            stair_channels: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("seg.num_classes", "must be >= 2"));
        }
        if !(self.decoder_init_std > 0.0 && self.decoder_init_std.is_finite()) {
            return Err(Error::config("seg.decoder_init_std", "must be positive"));
        }
        if self.encoder_blocks.contains(&0) {
            return Err(Error::config(
                "seg.encoder_blocks",
                "every stage needs at least one block",
            ));
        }
        if self.encoder_width == 0 || self.stair_channels == 0 {
            return Err(Error::config("seg.encoder_width", "widths must be positive"));
        }
        if self.encoder == WeightSource::Pretrained && self.encoder_width != 64 {
            return Err(Error::config("seg.encoder_width", "pretrained weights need width 64"));
        }
        Ok(())
    }

    fn stage_outputs(&self) -> [usize; 4] {
        let w = self.encoder_width;
        [4 * w, 8 * w, 16 * w, 32 * w]
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Bottleneck {
    reduce: Conv,
    spatial: Conv,
    expand: Conv,
    downsample: Option<Conv>,
    stride: usize,
}

impl Bottleneck {
    fn forward<'t>(&self, x: Var<'t>) -> Var<'t> {
        let f = Binding::Frozen;
        let pointwise = ConvOptions::default();
        let y = self.reduce.forward(x, pointwise, f).relu();
        let y = self.spatial.forward(y, ConvOptions::strided(3, self.stride), f).relu();
        let y = self.expand.forward(y, pointwise, f);
        let skip = match &self.downsample {
            Some(d) => d.forward(x, ConvOptions::strided(1, self.stride), f),
            None => x,
        };
        (y + skip).relu()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Encoder {
    stem: Conv,
    stages: Vec<Vec<Bottleneck>>,
}

/// Supplies encoder convolutions by their torchvision name.
trait ConvSource {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, residual_out: bool) -> Result<Conv>;
}

struct Seeded {
    rng: ChaCha8Rng,
    residual_scale: f64,
}

impl ConvSource for Seeded {
    fn conv(&mut self, _: &str, cin: usize, cout: usize, k: usize, residual_out: bool) -> Result<Conv> {
        let mut c = Conv::he_normal(cin, cout, k, &mut self.rng);
        if residual_out {
            // keeps activations bounded through deep random residual stacks
            c.weight = c.weight.scale(self.residual_scale);
        }
        Ok(c)
    }
}

impl ConvSource for WeightFile {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, _: bool) -> Result<Conv> {
        let (conv, bn) = match name.rsplit_once('.') {
            Some((block, "downsample")) => (format!("{block}.downsample.0"), format!("{block}.downsample.1")),
            _ => {
                let (prefix, last) = name.rsplit_once('.').unwrap_or(("", name));
                let n = last.trim_start_matches("conv");
                let join = |s: String| if prefix.is_empty() { s } else { format!("{prefix}.{s}") };
                (join(format!("conv{n}")), join(format!("bn{n}")))
            }
        };
        let weight = self.tensor(&format!("{conv}.weight"), &[cout, cin, k, k])?;
        let gamma = self.tensor(&format!("{bn}.weight"), &[cout])?;
        let beta = self.tensor(&format!("{bn}.bias"), &[cout])?;
        let mean = self.tensor(&format!("{bn}.running_mean"), &[cout])?;
        let var = self.tensor(&format!("{bn}.running_var"), &[cout])?;
        Ok(fold_batch_norm(&weight, &gamma, &beta, &mean, &var))
    }
}

/// Folds inference-mode batch norm into the preceding bias-free convolution.
fn fold_batch_norm(weight: &Tensor, gamma: &Tensor, beta: &Tensor, mean: &Tensor, var: &Tensor) -> Conv {
    let cout = weight.shape()[0];
    let per_out = weight.numel() / cout;
    let scale: Vec<f64> = gamma
        .data()
        .iter()
        .zip(var.data())
        .map(|(g, v)| g / (v + BN_EPS).sqrt())
        .collect();
    let mut w = weight.clone();
    for (row, s) in w.data_mut().chunks_mut(per_out).zip(&scale) {
        row.iter_mut().for_each(|v| *v *= s);
    }
    let bias = (0..cout).map(|o| beta.data()[o] - mean.data()[o] * scale[o]).collect();
    Conv {
        weight: w,
        bias: Tensor::from_vec([cout], bias),
    }
}

impl Encoder {
    fn build(cfg: &SegConfig, src: &mut dyn ConvSource) -> Result<Self> {
        let w = cfg.encoder_width;
        let stem = src.conv("conv1", 3, w, 7, false)?;
        let mut cin = w;
        let mut stages = Vec::with_capacity(4);
        for (s, &blocks) in cfg.encoder_blocks.iter().enumerate() {
            let mid = w << s;
            let out = 4 * mid;
            let mut stage = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let name = format!("layer{}.{b}", s + 1);
                let downsample = if b == 0 {
                    Some(src.conv(&format!("{name}.downsample"), cin, out, 1, false)?)
                } else {
                    None
                };
                stage.push(Bottleneck {
                    reduce: src.conv(&format!("{name}.conv1"), cin, mid, 1, false)?,
                    spatial: src.conv(&format!("{name}.conv2"), mid, mid, 3, false)?,
                    expand: src.conv(&format!("{name}.conv3"), mid, out, 1, true)?,
                    downsample,
                    stride,
                });
                cin = out;
            }
            stages.push(stage);
        }
        Ok(Self { stem, stages })
    }

    /// Stage outputs at strides 4, 8, 16 and 32.
    fn forward<'t>(&self, x: Var<'t>) -> Vec<Var<'t>> {
        let mut h = self
            .stem
            .forward(
                x,
                ConvOptions {
                    stride: 2,
                    padding: 3,
                    dilation: 1,
                },
                Binding::Frozen,
            )
            .relu()
            .max_pool2d(3, 2, 1);
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                h = block.forward(h);
            }
            outs.push(h);
        }
        outs
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Decoder {
    /// 1x1 laterals for the stride 4, 8, 16 and 32 outputs.
    laterals: Vec<Conv>,
    /// Two 3x3 convolutions per stair, same order as `laterals`.
    smooth: Vec<[Conv; 2]>,
    head: Conv,
}

impl Decoder {
    fn build(cfg: &SegConfig, rng: &mut ChaCha8Rng) -> Self {
        let s = cfg.stair_channels;
        let std = cfg.decoder_init_std;
        let laterals = cfg
            .stage_outputs()
            .iter()
            .map(|&c| Conv::gaussian(c, s, 1, std, rng))
            .collect();
        let smooth = (0..4)
            .map(|i| {
                let cin = if i == 3 { s } else { 2 * s };
                [Conv::gaussian(cin, s, 3, std, rng), Conv::gaussian(s, s, 3, std, rng)]
            })
            .collect();
        let head = Conv::gaussian(4 * s, cfg.num_classes, 1, std, rng);
        Self { laterals, smooth, head }
    }

    fn forward<'t>(&self, feats: &[Var<'t>]) -> Var<'t> {
        let f = Binding::Frozen;
        let same = ConvOptions::same(3, 1);
        let smooth = |i: usize, x: Var<'t>| {
            let [a, b] = &self.smooth[i];
            b.forward(a.forward(x, same, f).relu(), same, f).relu()
        };
        let lateral = |i: usize| self.laterals[i].forward(feats[i], ConvOptions::default(), f);
        let mut stairs = vec![smooth(3, lateral(3))];
        for i in (0..3).rev() {
            let l = lateral(i);
            let (_, h, w) = l.value().dims3();
            let up = stairs.last().expect("coarser stair").resize_bilinear(h, w);
            stairs.push(smooth(i, Var::concat_channels(&[up, l])));
        }
        let (_, h, w) = stairs.last().expect("finest stair").value().dims3();
        let resized: Vec<Var<'t>> = stairs.into_iter().map(|s| s.resize_bilinear(h, w)).collect();
        self.head
            .forward(Var::concat_channels(&resized), ConvOptions::default(), f)
    }
}

/// The complete frozen segmentation network.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmenter {
    config: SegConfig,
    encoder: Encoder,
    decoder: Decoder,
}

impl Segmenter {
    /// Builds the network. The decoder is always drawn from `seed`; the
    /// encoder is loaded or drawn from a separate stream of the same seed.
    pub fn build(cfg: &SegConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let encoder = match cfg.encoder {
            WeightSource::SeededRandom => {
                let total: usize = cfg.encoder_blocks.iter().sum();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(1);
                let mut src = Seeded {
                    rng,
                    residual_scale: 1.0 / (total as f64).sqrt(),
                };
                Encoder::build(cfg, &mut src)?
            }
            WeightSource::Pretrained => {
                let key = "seg.encoder";
                let path = pretrained::resolve(cfg.encoder_weights.as_deref(), RESNET_FILE, "ResNet-101", key)?;
                let mut file = WeightFile::open(path, "ResNet-101", key)?;
                Encoder::build(cfg, &mut file)?
            }
        };
        let decoder = Decoder::build(cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self {
            config: cfg.clone(),
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &SegConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Every decoder scalar, in a fixed order.
    pub fn decoder_values(&self) -> Vec<f64> {
        let d = &self.decoder;
        let mut convs: Vec<&Conv> = d.laterals.iter().collect();
        convs.extend(d.smooth.iter().flatten());
        convs.push(&d.head);
        convs.iter().flat_map(|c| c.weight.data().iter().copied()).collect()
    }

    pub fn param_count(&self) -> usize {
        let enc: usize = self.encoder.stem.param_count()
            + self
                .encoder
                .stages
                .iter()
                .flatten()
                .map(|b| {
                    b.reduce.param_count()
                        + b.spatial.param_count()
                        + b.expand.param_count()
                        + b.downsample.as_ref().map_or(0, Conv::param_count)
                })
                .sum::<usize>();
        let d = &self.decoder;
        let dec: usize = d
            .laterals
            .iter()
            .chain(d.smooth.iter().flatten())
            .map(Conv::param_count)
            .sum();
        enc + dec + d.head.param_count()
    }

    /// Per-pixel class probabilities `[n, H, W]` for a `[3, H, W]` value.
    pub fn segment_graph<'t>(&self, img: Var<'t>) -> Result<Var<'t>> {
        let shape = img.shape();
        let (h, w) = match shape[..] {
            [3, h, w] => (h, w),
            _ => return Err(Error::Input(format!("segmenter expects [3, H, W], got {shape:?}"))),
        };
        if !img.value().all_finite() {
            return Err(Error::Numeric("segmenter input".into()));
        }
        let ph = h.div_ceil(ENCODER_STRIDE) * ENCODER_STRIDE;
        let pw = w.div_ceil(ENCODER_STRIDE) * ENCODER_STRIDE;
        let tape = img.tape();
        let shift = tape.fixed(Tensor::from_vec([3], IMAGENET_MEAN.map(|m| -m).to_vec()));
        let scale = tape.fixed(Tensor::from_vec([3], IMAGENET_STD.map(|s| 1.0 / s).to_vec()));
        let x = img.add_channels(shift).mul_channels(scale);
        let x = if (ph, pw) == (h, w) {
            x
        } else {
            x.pad_reflect(0, ph - h, 0, pw - w)
        };
        let logits = self.decoder.forward(&self.encoder.forward(x)).resize_bilinear(ph, pw);
        let logits = if (ph, pw) == (h, w) {
            logits
        } else {
            logits.crop(0, 0, h, w)
        };
        Ok(logits.softmax_channels())
    }

    pub fn segment(&self, img: &ImageTensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self
            .segment_graph(tape.constant(img.tensor()))?
            .value()
            .as_ref()
            .clone())
    }
}

/// Mean over pixels of `-α (1 - p)^γ ln p`, where `p` is the pixel's largest
/// class probability clamped to `[1e-7, 1 - 1e-7]`.
pub fn focal_seg_loss<'t>(probs: Var<'t>, alpha: f64, gamma: f64) -> Var<'t> {
    let p = probs.max_channels().clamp(PROB_EPS, 1.0 - PROB_EPS);
    let weight = (-p + 1.0).powf(gamma);
    (weight * p.ln()).mean().scale(-alpha)
}

/// [`focal_seg_loss`] on a plain probability map.
pub fn focal_seg_loss_value(probs: &Tensor, alpha: f64, gamma: f64) -> f64 {
    let tape = Tape::new();
    focal_seg_loss(tape.constant(probs), alpha, gamma).item()
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
    fn probabilities_cover_the_input_and_sum_to_one() {
        let seg = Segmenter::build(&SegConfig::tiny(1), 1).unwrap();
        for (h, w) in [(32, 32), (20, 45)] {
            let p = seg.segment(&image(h, w, 2)).unwrap();
            assert_eq!(p.shape(), [21, h, w]);
            for i in 0..h * w {
                let total: f64 = (0..21).map(|c| p.data()[c * h * w + i]).sum();
                assert!((total - 1.0).abs() < 1e-5);
                assert!((0..21).all(|c| p.data()[c * h * w + i] >= 0.0));
            }
        }
    }

    #[test]
    fn same_seed_same_decoder() {
        let cfg = SegConfig::tiny(0);
        assert_eq!(Segmenter::build(&cfg, 4).unwrap(), Segmenter::build(&cfg, 4).unwrap());
        assert_ne!(
            Segmenter::build(&cfg, 4).unwrap().decoder_values(),
            Segmenter::build(&cfg, 5).unwrap().decoder_values()
        );
    }

    #[test]
    fn default_depth_stays_finite() {
        let cfg = SegConfig {
            encoder: WeightSource::SeededRandom,
            encoder_width: 2,
            stair_channels: 4,
            ..SegConfig::default()
        };
        let p = Segmenter::build(&cfg, 0).unwrap().segment(&image(32, 32, 1)).unwrap();
        assert!(p.all_finite());
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let seg = Segmenter::build(&SegConfig::tiny(1), 1).unwrap();
        let mut t = image(32, 32, 1).into_tensor();
        t.data_mut()[0] = f64::NAN;
        assert!(matches!(
            seg.segment(&ImageTensor::from_tensor(t)),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn confident_map_has_negligible_loss() {
        let (n, hw) = (3, 16);
        let probs = Tensor::from_fn([n, 4, 4], |i| if i < hw { 1.0 - 1e-7 } else { 0.5e-7 });
        assert!(focal_seg_loss_value(&probs, 1.0, 2.0) < 1e-12);
    }

    #[test]
    fn loss_is_invariant_to_class_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Tensor::from_fn([4, 3, 3], |_| rng.random_range(-2.0..2.0));
        let tape = Tape::new();
        let probs = tape.constant(&logits).softmax_channels().value().as_ref().clone();
        let mut permuted = probs.clone();
        let plane = 9;
        for (dst, src) in [(0, 2), (1, 3), (2, 0), (3, 1)] {
            permuted.data_mut()[dst * plane..(dst + 1) * plane]
                .copy_from_slice(&probs.data()[src * plane..(src + 1) * plane]);
        }
        assert_eq!(
            focal_seg_loss_value(&probs, 1.0, 2.0),
            focal_seg_loss_value(&permuted, 1.0, 2.0)
        );
    }

    #[test]
    fn raising_confidence_lowers_the_loss() {
        let map = |p: f64| Tensor::from_fn([3, 2, 2], |i| if i < 4 { p } else { (1.0 - p) / 2.0 });
        let values: Vec<f64> = [0.4, 0.5, 0.7, 0.9, 0.99]
            .iter()
            .map(|&p| focal_seg_loss_value(&map(p), 1.0, 2.0))
            .collect();
        assert!(values.windows(2).all(|w| w[1] < w[0]), "{values:?}");
    }

    #[test]
    fn batch_norm_folding_matches_explicit_normalisation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut r = |shape: &[usize], lo: f64, hi: f64| Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi));
        let (w, gamma, beta, mean, var) = (
            r(&[2, 3, 3, 3], -1.0, 1.0),
            r(&[2], 0.5, 1.5),
            r(&[2], -0.5, 0.5),
            r(&[2], -0.5, 0.5),
            r(&[2], 0.1, 2.0),
        );
        let x = r(&[3, 5, 5], 0.0, 1.0);
        let folded = fold_batch_norm(&w, &gamma, &beta, &mean, &var);
        let tape = Tape::new();
        let opts = ConvOptions::same(3, 1);
        let y = folded.forward(tape.constant(&x), opts, Binding::Frozen).value();
        let raw = tape.constant(&x).conv2d(tape.constant(&w), None, opts).value();
        for o in 0..2 {
            let s = gamma.data()[o] / (var.data()[o] + BN_EPS).sqrt();
            for i in 0..25 {
                let expected = (raw.data()[o * 25 + i] - mean.data()[o]) * s + beta.data()[o];
                assert!((y.data()[o * 25 + i] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pretrained_encoder_loads_torchvision_names() {
        let cfg = SegConfig {
            encoder_blocks: [1, 1, 1, 1],
            stair_channels: 4,
            ..SegConfig::default()
        };
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        let mut add_conv_bn = |conv: &str, bn: &str, cout: usize, cin: usize, k: usize| {
            tensors.push((format!("{conv}.weight"), Tensor::full([cout, cin, k, k], 0.01)));
            tensors.push((format!("{bn}.weight"), Tensor::full([cout], 1.0)));
            tensors.push((format!("{bn}.bias"), Tensor::full([cout], 0.5)));
            tensors.push((format!("{bn}.running_mean"), Tensor::zeros([cout])));
            tensors.push((format!("{bn}.running_var"), Tensor::full([cout], 1.0)));
        };
        add_conv_bn("conv1", "bn1", 64, 3, 7);
        let mut cin = 64;
        for s in 0..4 {
            let mid = 64 << s;
            let p = format!("layer{}.0", s + 1);
            add_conv_bn(&format!("{p}.conv1"), &format!("{p}.bn1"), mid, cin, 1);
            add_conv_bn(&format!("{p}.conv2"), &format!("{p}.bn2"), mid, mid, 3);
            add_conv_bn(&format!("{p}.conv3"), &format!("{p}.bn3"), 4 * mid, mid, 1);
            add_conv_bn(
                &format!("{p}.downsample.0"),
                &format!("{p}.downsample.1"),
                4 * mid,
                cin,
                1,
            );
            cin = 4 * mid;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.safetensors");
        test_support::write_f32(&path, &tensors);
        let seg = Segmenter::build(
            &SegConfig {
                encoder_weights: Some(path),
                ..cfg.clone()
            },
            0,
        )
        .unwrap();
        let bias = seg.encoder.stages[2][0].expand.bias.data()[0];
        assert!((bias - 0.5).abs() < 1e-6);

        let missing = SegConfig {
            encoder_weights: Some(dir.path().join("absent.safetensors")),
            ..cfg
        };
        let err = Segmenter::build(&missing, 0).unwrap_err();
        assert!(err.to_string().contains("seg.encoder=seeded_random"), "{err}");
    }
}
