//! Prints the component ablation rows with their switches and resolved
//! config hashes, and optionally trains each row briefly on synthetic data.
//!
//! ```text
//! cargo run --release --example ablation_matrix -- [steps]
//! ```

use sapnet::config::{Ablation, RunConfig};
use sapnet::data::{synthetic_pairs, RainParams};
use sapnet::metrics::{evaluate, format_score, DerainModel};
use sapnet::train::Trainer;

fn main() -> sapnet::Result<()> {
    let steps: usize = std::env::args().nth(1).map_or(0, |s| s.parse().expect("steps"));
    let pairs = synthetic_pairs(4, 32, &RainParams::default(), 1);

    println!("row   seg pcl dil decay lpisl  hash");
    for row in Ablation::ALL {
        let t = row.toggles();
        let flag = |b: bool| if b { "x" } else { "." };
        let full = RunConfig::default().with_ablation(row);
        print!(
            "{:<5} {:^3} {:^3} {:^3} {:^5} {:^5}  {}",
            row.to_string(),
            flag(t.use_seg),
            flag(t.use_pcl),
            flag(t.use_dilation),
            flag(t.use_decay),
            flag(t.use_lpisl),
            &full.hash()[..16]
        );
        if steps > 0 {
            let mut cfg = RunConfig::tiny(1).with_ablation(row);
            cfg.train.epochs = steps;
            let mut trainer = Trainer::new(&cfg)?;
            trainer.train(&pairs, &mut |_| {}, None)?;
            let model = DerainModel {
                config: trainer.config().model.clone(),
                weights: trainer.weights().clone(),
            };
            let report = evaluate(&model, &pairs)?;
            print!("  psnr {} dB", format_score(report.mean_psnr));
        }
        println!();
    }
    Ok(())
}
