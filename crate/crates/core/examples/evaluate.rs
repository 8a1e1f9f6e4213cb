//! Scores a checkpoint (or an untrained model) on a paired dataset and
//! writes the TSV report.
//!
//! ```text
//! cargo run --release --example evaluate -- <dataset_root> [checkpoint] [report.tsv]
//! ```

use std::path::PathBuf;

use sapnet::checkpoint::Checkpoint;
use sapnet::data::{load_pairs, DatasetSpec};
use sapnet::derain::{DerainWeights, ModelConfig};
use sapnet::metrics::{evaluate, format_score, DerainModel, Identity};

fn main() -> sapnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let root = PathBuf::from(
        args.next()
            .expect("usage: evaluate <dataset_root> [checkpoint] [report.tsv]"),
    );
    let model = match args.next() {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            DerainModel {
                config: ck.config.model,
                weights: ck.weights,
            }
        }
        None => {
            let config = ModelConfig::tiny();
            let weights = DerainWeights::init(&config, 0)?;
            DerainModel { config, weights }
        }
    };
    let report_path = args
        .next()
        .map_or_else(|| PathBuf::from("target/report.tsv"), PathBuf::from);

    let pairs = load_pairs(&DatasetSpec::from_root(&root))?;
    let baseline = evaluate(&Identity, &pairs)?;
    let report = evaluate(&model, &pairs)?;
    report.write_tsv(&report_path)?;
    println!(
        "{} pairs: model psnr {} dB / ssim {} (rainy input {} dB / {}); report in {}",
        pairs.len(),
        format_score(report.mean_psnr),
        format_score(report.mean_ssim),
        format_score(baseline.mean_psnr),
        format_score(baseline.mean_ssim),
        report_path.display()
    );
    Ok(())
}
