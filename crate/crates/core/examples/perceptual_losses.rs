//! Evaluates every loss term for a few candidate outputs between the rainy
//! input and the ground truth.
//!
//! ```text
//! cargo run --release --example perceptual_losses
//! ```

use sapnet::data::{synth_rain, synthetic_scene, RainParams};
use sapnet::features::{ExtractorConfig, FeatureExtractor};
use sapnet::losses::{loss_breakdown, LossConfig};
use sapnet::segmenter::{SegConfig, Segmenter};
use sapnet::ImageTensor;

fn main() -> sapnet::Result<()> {
    let cfg = LossConfig {
        extractor: ExtractorConfig::seeded(8, vec![2, 4, 7], 0),
        lpisl_size: 64,
        ..LossConfig::default()
    };
    let fe = FeatureExtractor::build(&cfg.extractor)?;
    let seg = Segmenter::build(&SegConfig::tiny(0), 0)?;

    let clean = synthetic_scene(48, 48, 5);
    let rainy = synth_rain(&clean, &RainParams::default(), 6);
    for t in [0.1, 0.25, 0.5, 0.75, 1.0] {
        // from near the rainy input towards the ground truth (t = 1); at t = 0
        // the contrastive denominator vanishes
        let out = ImageTensor::from_tensor(rainy.tensor().zip_map(clean.tensor(), |r, c| (1.0 - t) * r + t * c));
        let probs = seg.segment(&out)?;
        let b = loss_breakdown(&out, &clean, &rainy, Some(&probs), Some(&fe), &cfg)?;
        println!("t={t:.2}  {b}");
    }
    Ok(())
}
