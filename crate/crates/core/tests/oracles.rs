//! Value and gradient checks of the losses, metrics and frozen branches
//! against independent recomputations.

mod common;

use common::*;
use sapnet::autograd::{Tape, Tensor};
use sapnet::features::{ExtractorConfig, FeatureExtractor};
use sapnet::losses::{lpisl, negative_ssim_loss, pcl, total_loss, LossConfig};
use sapnet::metrics::ssim_metric;
use sapnet::segmenter::{focal_seg_loss, focal_seg_loss_value, SegConfig, Segmenter};
use sapnet::ImageTensor;

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.numel() as f64
}

#[test]
fn ssim_matches_loop_oracle_on_random_pairs() {
    for seed in 0..5 {
        let (a, b) = (random_image(16, 16, seed), random_image(16, 16, seed + 50));
        let got = ssim_metric(&a, &b).unwrap();
        assert!((got - naive_ssim(&a, &b)).abs() < 1e-6);
    }
}

#[test]
fn ssim_gradient_on_12x12() {
    let (x, y) = (random_image(12, 12, 1), random_image(12, 12, 2));
    let err = input_gradcheck(
        |v| negative_ssim_loss(v, v.tape().constant(y.tensor())).unwrap(),
        x.tensor(),
    );
    assert!(err < GRAD_TOL, "{err}");
}

#[test]
fn pcl_matches_term_by_term_oracle() {
    let fe = FeatureExtractor::build(&ExtractorConfig::seeded(4, vec![2, 4, 7], 21)).unwrap();
    let omega = [0.25, 0.5, 1.0];
    let (d, g, r) = (
        random_image(16, 16, 3),
        random_image(16, 16, 4),
        random_image(16, 16, 5),
    );
    let (fd, fg, fr) = (
        fe.extract_tensors(&d).unwrap(),
        fe.extract_tensors(&g).unwrap(),
        fe.extract_tensors(&r).unwrap(),
    );
    let mut expected = 0.0;
    for i in 0..3 {
        expected += omega[i] * mean_abs_diff(&fd[i], &fg[i]) / (mean_abs_diff(&fd[i], &fr[i]) + 1e-7);
    }
    let tape = Tape::new();
    let c = |img: &ImageTensor| tape.constant(img.tensor());
    let got = pcl(c(&d), c(&g), c(&r), &fe, &omega).unwrap().item();
    assert!((got - expected).abs() <= 1e-6 * expected.abs(), "{got} vs {expected}");
}

#[test]
fn pcl_gradient_with_one_tap_on_32x32() {
    let fe = FeatureExtractor::build(&ExtractorConfig::seeded(4, vec![2], 22)).unwrap();
    let (d, g, r) = (
        random_image(32, 32, 6),
        random_image(32, 32, 7),
        random_image(32, 32, 8),
    );
    let err = input_gradcheck(
        |x| {
            let t = x.tape();
            pcl(x, t.constant(g.tensor()), t.constant(r.tensor()), &fe, &[1.0]).unwrap()
        },
        d.tensor(),
    );
    assert!(err < GRAD_TOL, "{err}");
}

#[test]
fn lpisl_gradient_on_16x16() {
    let fe = FeatureExtractor::build(&ExtractorConfig::seeded(4, vec![2, 4], 23)).unwrap();
    let (d, g) = (random_image(16, 16, 9), random_image(16, 16, 10));
    let err = input_gradcheck(
        |x| lpisl(x, x.tape().constant(g.tensor()), &fe, 16).unwrap(),
        d.tensor(),
    );
    assert!(err < GRAD_TOL, "{err}");
}

#[test]
fn total_is_the_weighted_sum_of_separately_computed_terms() {
    let fe = FeatureExtractor::build(&ExtractorConfig::seeded(4, vec![2, 4, 7], 24)).unwrap();
    let cfg = LossConfig {
        extractor: ExtractorConfig::seeded(4, vec![2, 4, 7], 24),
        lpisl_size: 16,
        ..LossConfig::default()
    };
    let (d, g, r) = (
        random_image(16, 16, 11),
        random_image(16, 16, 12),
        random_image(16, 16, 13),
    );
    let probs = Tensor::from_fn([4, 16, 16], |i| 0.1 + (i % 7) as f64 * 0.05);
    let tape = Tape::new();
    let c = |img: &ImageTensor| tape.constant(img.tensor());
    let p = tape.constant(&probs).softmax_channels();
    let total = total_loss(c(&d), c(&g), c(&r), Some(p), Some(&fe), &cfg).unwrap();

    let s = negative_ssim_loss(c(&d), c(&g)).unwrap().item();
    let f = focal_seg_loss(p, cfg.focal_alpha, cfg.focal_gamma).item();
    let q = pcl(c(&d), c(&g), c(&r), &fe, &cfg.weights.omega).unwrap().item();
    let l = lpisl(c(&d), c(&g), &fe, 16).unwrap().item();
    let w = &cfg.weights;
    assert_eq!(
        total.total.item(),
        w.lambda1 * s + w.lambda2 * f + w.lambda3 * q + w.lambda4 * l
    );
    assert_eq!(
        [
            total.breakdown.ssim_loss,
            total.breakdown.seg_loss,
            total.breakdown.pcl,
            total.breakdown.lpisl
        ],
        [s, f, q, l]
    );
}

#[test]
fn focal_loss_of_a_uniform_map() {
    let probs = Tensor::full([21, 4, 4], 1.0 / 21.0);
    let expected = (20.0f64 / 21.0).powi(2) * 21f64.ln();
    assert!((focal_seg_loss_value(&probs, 1.0, 2.0) - expected).abs() < 1e-12);
}

#[test]
fn focal_gradient_on_three_class_maps() {
    let probs = random_tensor(&[3, 4, 4], 0.05, 1.0, 14);
    let err = input_gradcheck(|p| focal_seg_loss(p, 1.0, 2.0), &probs);
    assert!(err < GRAD_TOL, "{err}");
}

#[test]
fn decoder_init_follows_the_declared_gaussian() {
    let cfg = SegConfig {
        encoder_blocks: [1, 1, 1, 1],
        encoder_width: 64,
        stair_channels: 128,
        ..SegConfig::tiny(31)
    };
    let seg = Segmenter::build(&cfg, 31).unwrap();
    let v = seg.decoder_values();
    let n = v.len() as f64;
    assert!(n >= 1e5, "only {n} values");
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() <= 3.0 * 0.05 / n.sqrt(), "mean {mean}");
    assert!((std - 0.05).abs() <= 0.05 * 0.05, "std {std}");
}

#[test]
fn frozen_segmenter_passes_gradients_to_its_input() {
    let seg = Segmenter::build(&SegConfig::tiny(32), 32).unwrap();
    let img = random_image(20, 20, 15);
    let probe = random_tensor(&[21, 20, 20], -1.0, 1.0, 16);
    let value = |t: &Tensor| {
        let tape = Tape::new();
        (seg.segment_graph(tape.constant(t)).unwrap() * tape.constant(&probe))
            .sum()
            .item()
    };
    let mut up = img.tensor().clone();
    let mut down = up.clone();
    up.data_mut()[123] += 1e-5;
    down.data_mut()[123] -= 1e-5;
    let fd = (value(&up) - value(&down)) / 2e-5;
    assert!(fd.abs() > 0.0);

    let tape = Tape::new();
    let x = tape.input(img.tensor().clone());
    let grads = tape.backward((seg.segment_graph(x).unwrap() * tape.constant(&probe)).sum());
    let g = grads.wrt(x).unwrap().data()[123];
    assert!((g - fd).abs() <= 1e-4 * fd.abs().max(1e-8), "{g} vs {fd}");
}
