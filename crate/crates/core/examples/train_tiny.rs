//! Overfits the tiny network on four synthetic rainy pairs with the full
//! four-term loss and reports PSNR before and after.
//!
//! ```text
//! cargo run --release --example train_tiny -- [steps] [lr]
//! ```

use sapnet::config::RunConfig;
use sapnet::data::{synthetic_pairs, RainParams};
use sapnet::metrics::{evaluate, format_score, DerainModel, Identity};
use sapnet::train::Trainer;

fn main() -> sapnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(200, |s| s.parse().expect("steps"));
    let lr: f64 = args.next().map_or(1e-2, |s| s.parse().expect("lr"));

    let pairs = synthetic_pairs(4, 32, &RainParams::default(), 7);
    let mut cfg = RunConfig::tiny(7);
    cfg.train.epochs = steps;
    cfg.train.base_lr = lr;

    let before = evaluate(&Identity, &pairs)?;
    let mut trainer = Trainer::new(&cfg)?;
    let started = std::time::Instant::now();
    trainer.train(
        &pairs,
        &mut |r| {
            if r.step == 1 || r.step % 20 == 0 {
                println!("{r}");
            }
        },
        None,
    )?;
    let model = DerainModel {
        config: trainer.config().model.clone(),
        weights: trainer.weights().clone(),
    };
    let after = evaluate(&model, &pairs)?;
    println!(
        "rainy psnr {} dB, derained psnr {} dB, ssim {} -> {}, {:.1}s",
        format_score(before.mean_psnr),
        format_score(after.mean_psnr),
        format_score(before.mean_ssim),
        format_score(after.mean_ssim),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
