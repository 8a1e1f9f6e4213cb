//! Segments an image with the frozen seeded segmenter and shows how the
//! confidence loss reacts to a blurred versus a sharp input.
//!
//! ```text
//! cargo run --release --example segmentation_loss
//! ```

use sapnet::data::{synth_rain, synthetic_scene, RainParams};
use sapnet::segmenter::{focal_seg_loss_value, SegConfig, Segmenter};

fn main() -> sapnet::Result<()> {
    let cfg = SegConfig::tiny(0);
    let seg = Segmenter::build(&cfg, cfg.seed)?;
    println!(
        "segmenter: {} classes, {} parameters",
        seg.num_classes(),
        seg.param_count()
    );

    let clean = synthetic_scene(40, 40, 1);
    let rainy = synth_rain(
        &clean,
        &RainParams {
            streaks: 120,
            ..RainParams::default()
        },
        2,
    );
    for (name, img) in [("clean", &clean), ("rainy", &rainy)] {
        let probs = seg.segment(img)?;
        let (n, h, w) = probs.dims3();
        let mut counts = vec![0usize; n];
        for y in 0..h {
            for x in 0..w {
                let best = (0..n)
                    .max_by(|&a, &b| probs.at3(a, y, x).total_cmp(&probs.at3(b, y, x)))
                    .unwrap();
                counts[best] += 1;
            }
        }
        let used = counts.iter().filter(|&&c| c > 0).count();
        println!(
            "{name}: focal loss {:.5}, {used} classes in the argmax map",
            focal_seg_loss_value(&probs, 1.0, 2.0)
        );
    }
    Ok(())
}
