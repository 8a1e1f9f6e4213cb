//! Writes a small synthetic paired dataset in the on-disk layout the
//! trainer and evaluator read, then loads it back.
//!
//! ```text
//! cargo run --example synth_rain_dataset -- [root] [count] [size]
//! ```

use std::path::PathBuf;

use sapnet::data::{load_pairs, synthetic_pairs, DatasetSpec, RainParams};
use sapnet::metrics::{evaluate, format_score, Identity};

fn main() -> sapnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let root = args
        .next()
        .map_or_else(|| PathBuf::from("target/synth_rain"), PathBuf::from);
    let count: usize = args.next().map_or(8, |v| v.parse().expect("count"));
    let size: usize = args.next().map_or(64, |v| v.parse().expect("size"));

    for sub in ["rainy", "clean"] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| sapnet::Error::Input(format!("{}: {e}", dir.display())))?;
    }
    let params = RainParams {
        streaks: size * size / 40,
        ..RainParams::default()
    };
    for pair in synthetic_pairs(count, size, &params, 0) {
        pair.rainy.save(root.join("rainy").join(format!("{}.png", pair.id)))?;
        pair.clean.save(root.join("clean").join(format!("{}.png", pair.id)))?;
    }

    let pairs = load_pairs(&DatasetSpec::from_root(&root))?;
    let baseline = evaluate(&Identity, &pairs)?;
    println!(
        "{} pairs in {}; rainy inputs score psnr {} dB, ssim {}",
        pairs.len(),
        root.display(),
        format_score(baseline.mean_psnr),
        format_score(baseline.mean_ssim)
    );
    Ok(())
}
