//! Runs the progressive network on a synthetic rainy image and saves every
//! stage output next to the input.
//!
//! ```text
//! cargo run --example derain_forward -- [out_dir]
//! ```

use std::path::PathBuf;

use sapnet::data::{synth_rain, synthetic_scene, RainParams};
use sapnet::derain::{derain, parameter_count, DerainWeights, ModelConfig};
use sapnet::metrics::psnr;

fn main() -> sapnet::Result<()> {
    let out_dir = std::env::args()
        .nth(1)
        .map_or_else(|| PathBuf::from("target/derain_forward"), PathBuf::from);
    std::fs::create_dir_all(&out_dir).map_err(|e| sapnet::Error::Input(e.to_string()))?;

    let cfg = ModelConfig {
        stages: 4,
        ..ModelConfig::tiny()
    };
    let weights = DerainWeights::init(&cfg, 1)?;
    println!(
        "{} parameters, receptive field {} px, minimum input {} px",
        parameter_count(&cfg)?,
        cfg.receptive_field(),
        cfg.min_image_side()
    );

    let clean = synthetic_scene(48, 48, 3);
    let rainy = synth_rain(&clean, &RainParams::default(), 4);
    rainy.save(out_dir.join("rainy.png"))?;
    let out = derain(&rainy, &weights, &cfg)?;
    for (t, stage) in out.intermediates.iter().enumerate() {
        let path = out_dir.join(format!("stage_{}.png", t + 1));
        stage.save(&path)?;
        println!(
            "stage {}: psnr vs clean {:.2} dB -> {}",
            t + 1,
            psnr(&stage.clamp01(), &clean, 1.0)?,
            path.display()
        );
    }
    Ok(())
}
