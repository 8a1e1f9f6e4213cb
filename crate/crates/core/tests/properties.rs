//! Randomised invariants.

mod common;

use common::random_image;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sapnet::attention::{apply_attention_tensor, attention_gate, AttentionKind, AttentionWeights};
use sapnet::autograd::Tape;
use sapnet::config::RunConfig;
use sapnet::data::{random_crop_pair, synthetic_pairs, RainParams};
use sapnet::derain::{parameter_count, ModelConfig};
use sapnet::metrics::{psnr, ssim_metric};
use sapnet::nn::Binding;
use sapnet::train::{lr_at, TrainConfig};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ssim_is_symmetric_and_at_most_one(a in 0u64..1000, b in 0u64..1000) {
        let (x, y) = (random_image(12, 12, a), random_image(12, 12, b));
        let (s1, s2) = (ssim_metric(&x, &y).unwrap(), ssim_metric(&y, &x).unwrap());
        prop_assert!((s1 - s2).abs() < 1e-12);
        prop_assert!(s1 <= 1.0 + 1e-12);
    }

    #[test]
    fn psnr_is_symmetric(a in 0u64..1000, b in 0u64..1000) {
        let (x, y) = (random_image(8, 8, a), random_image(8, 8, b));
        prop_assert_eq!(psnr(&x, &y, 1.0).unwrap(), psnr(&y, &x, 1.0).unwrap());
    }

    #[test]
    fn attention_gates_stay_in_the_unit_interval(seed in 0u64..1000, kind in 0usize..3) {
        let kind = [AttentionKind::Se, AttentionKind::Ca, AttentionKind::Cra][kind];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = AttentionWeights::init(8, 4, &mut rng);
        let x = common::random_tensor(&[8, 5, 5], -3.0, 3.0, seed);
        let tape = Tape::new();
        let gate = attention_gate(kind, tape.constant(&x), Some(&w), Binding::Frozen).unwrap().unwrap();
        prop_assert!(gate.value().data().iter().all(|&g| g > 0.0 && g < 1.0));
        let y = apply_attention_tensor(kind, &x, Some(&w)).unwrap();
        prop_assert!(y.data().iter().zip(x.data()).all(|(a, b)| a.abs() <= b.abs()));
    }

    #[test]
    fn schedule_never_increases(epochs in proptest::collection::vec(0usize..200, 2)) {
        let cfg = TrainConfig::default();
        let (lo, hi) = (epochs[0].min(epochs[1]), epochs[0].max(epochs[1]));
        prop_assert!(lr_at(hi, &cfg) <= lr_at(lo, &cfg));
    }

    #[test]
    fn parameter_count_ignores_stage_count(stages in 1usize..12, channels in 1usize..12) {
        let base = ModelConfig { channels, reduction: 4, ..ModelConfig::tiny() };
        let more = ModelConfig { stages, ..base.clone() };
        prop_assert_eq!(parameter_count(&base).unwrap(), parameter_count(&more).unwrap());
    }

    #[test]
    fn crops_keep_rainy_and_clean_aligned(seed in 0u64..1000, size in 1usize..24) {
        let pair = &synthetic_pairs(1, 24, &RainParams::default(), seed)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let crop = random_crop_pair(pair, size, &mut rng).unwrap();
        // rain only brightens, so the aligned crop never has rainy < clean
        prop_assert!(crop.rainy.tensor().data().iter().zip(crop.clean.tensor().data()).all(|(r, c)| r >= c));
        prop_assert_eq!(crop.rainy.dims(), (size, size));
    }

    #[test]
    fn config_text_round_trips(channels in 1usize..64, lr in 1e-6f64..1.0, seed in any::<u64>(), seg in any::<bool>()) {
        let mut cfg = RunConfig::default();
        cfg.model.channels = channels;
        cfg.train.base_lr = lr;
        cfg.train.seed = seed;
        cfg.train.toggles.use_seg = seg;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
    }
}
