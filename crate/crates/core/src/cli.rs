//! The `sapnet` command line: `train`, `derain`, `eval` and `inspect`.
//!
//! Exit codes: 0 on success, 2 for invalid configuration or usage, 1 for
//! any other failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{image_files, load_pairs, DatasetSpec};
use crate::derain::{derain, parameter_count};
use crate::metrics::{evaluate, format_score, DerainModel, EvalReport};
use crate::train::Trainer;
use crate::{Error, ImageTensor, Result};

/// Frozen copy of the resolved configuration inside a run directory.
pub const RUN_CONFIG_FILE: &str = "config.cfg";

#[derive(Debug, Parser)]
#[command(name = "sapnet", version, about = "Single-image deraining: train, derain, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config file, or resume from a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Resume from this checkpoint; its stored config is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Derain an image or every image in a directory.
    Derain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output file, or directory when the input is a directory.
        #[arg(long)]
        output: PathBuf,
        /// Write every stage as `<name>_t<k>`; a value overrides the stage count.
        #[arg(long, num_args = 0..=1, default_missing_value = "0")]
        stages: Option<usize>,
    },
    /// Score a checkpoint on a paired dataset and write a TSV report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root holding `rainy/` and `clean/`.
        #[arg(long)]
        input: PathBuf,
        /// Report path.
        #[arg(long)]
        output: PathBuf,
    },
    /// Print the resolved configuration, its hash and model size.
    Inspect {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Train {
            config,
            checkpoint,
            seed,
        } => cmd_train(config.as_deref(), checkpoint.as_deref(), seed),
        Command::Derain {
            checkpoint,
            input,
            output,
            stages,
        } => cmd_derain(&checkpoint, &input, &output, stages).map(|_| ()),
        Command::Eval {
            checkpoint,
            input,
            output,
        } => cmd_eval(&checkpoint, &input, &output).map(|report| {
            println!("mean_psnr_db={}", format_score(report.mean_psnr));
            println!("mean_ssim={}", format_score(report.mean_ssim));
        }),
        Command::Inspect {
            config,
            checkpoint,
            seed,
        } => cmd_inspect(config.as_deref(), checkpoint.as_deref(), seed).map(|text| print!("{text}")),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::ConfigMismatch(_) | Error::PretrainedUnavailable { .. } => 2,
        _ => 1,
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).map_err(|e| match e {
        Error::Io { path, source } => Error::config("--config", format!("cannot read {}: {source}", path.display())),
        other => other,
    })
}

/// Trains to completion, writing `config.cfg`, `train.log`, `last.ckpt`
/// and `final.ckpt` into `out_dir`.
pub fn cmd_train(config: Option<&Path>, checkpoint: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut trainer = match (config, checkpoint) {
        (_, Some(ck)) => Trainer::from_checkpoint(Checkpoint::load(ck)?)?,
        (Some(path), None) => {
            let mut cfg = load_config(path)?;
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            Trainer::new(&cfg)?
        }
        (None, None) => return Err(Error::config("--config", "train needs --config or --checkpoint")),
    };
    let cfg = trainer.config().clone();
    if cfg.out_dir.as_os_str().is_empty() {
        return Err(Error::config("out_dir", "train needs an output directory"));
    }
    let data = load_pairs(&cfg.dataset_spec()?)?;
    if data.is_empty() {
        return Err(Error::Input("no pairs found".into()));
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    cfg.save(cfg.out_dir.join(RUN_CONFIG_FILE))?;
    trainer.train(&data, &mut |r| println!("{r}"), Some(&cfg.out_dir))
}

/// `<stem>_t<k>.<ext>` next to `path`.
pub fn stage_path(path: &Path, k: usize) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let name = match path.extension() {
        Some(ext) => format!("{stem}_t{k}.{}", ext.to_string_lossy()),
        None => format!("{stem}_t{k}"),
    };
    path.with_file_name(name)
}

/// Derains `input` (file or directory) into `output`. Returns the files
/// written. With `stages`, every intermediate is written instead of the
/// final image alone; a nonzero value overrides the stage count.
pub fn cmd_derain(checkpoint: &Path, input: &Path, output: &Path, stages: Option<usize>) -> Result<Vec<PathBuf>> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut model = ck.config.model.clone();
    if let Some(n) = stages.filter(|&n| n > 0) {
        model.stages = n;
        model.validate()?;
    }
    let files = image_files(input)?;
    if files.is_empty() {
        return Err(Error::Input(format!("no images in {}", input.display())));
    }
    let targets: Vec<(PathBuf, PathBuf)> = if input.is_dir() {
        std::fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
        files
            .into_iter()
            .map(|f| {
                let out = output.join(f.file_name().expect("listed file has a name"));
                (f, out)
            })
            .collect()
    } else {
        if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        vec![(files[0].clone(), output.to_path_buf())]
    };
    let mut written = Vec::new();
    for (src, dst) in targets {
        let result = derain(&ImageTensor::load(&src)?, &ck.weights, &model)?;
        if stages.is_some() {
            for (k, img) in result.intermediates.iter().enumerate() {
                let path = stage_path(&dst, k + 1);
                img.save(&path)?;
                written.push(path);
            }
        } else {
            result.final_image().save(&dst)?;
            written.push(dst);
        }
    }
    Ok(written)
}

/// Scores a checkpoint on the dataset under `root` and writes the report.
pub fn cmd_eval(checkpoint: &Path, root: &Path, report: &Path) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let spec = DatasetSpec::from_root(root);
    let pairs = if spec.manifest.is_none() && !spec.rainy_dir.is_dir() {
        Vec::new()
    } else {
        load_pairs(&spec)?
    };
    if pairs.is_empty() {
        return Err(Error::Input(format!("no pairs found under {}", root.display())));
    }
    let model = DerainModel {
        config: ck.config.model.clone(),
        weights: ck.weights,
    };
    let out = evaluate(&model, &pairs)?;
    out.write_tsv(report)?;
    Ok(out)
}

/// Summary of a config or checkpoint: hash, sizes, then every key.
pub fn cmd_inspect(config: Option<&Path>, checkpoint: Option<&Path>, seed: Option<u64>) -> Result<String> {
    let (mut cfg, epoch) = match (config, checkpoint) {
        (Some(path), None) => (load_config(path)?, None),
        (None, Some(ck)) => {
            let ck = Checkpoint::load(ck)?;
            (ck.config, Some(ck.epoch))
        }
        _ => {
            return Err(Error::config(
                "--config",
                "inspect needs exactly one of --config or --checkpoint",
            ))
        }
    };
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    let resolved = cfg.resolved();
    resolved.validate()?;
    let mut out = format!(
        "hash={}\nparameters={}\nreceptive_field={}\nmin_image_side={}\n",
        cfg.hash(),
        parameter_count(&resolved.model)?,
        resolved.model.receptive_field(),
        resolved.model.min_image_side()
    );
    if let Some(epoch) = epoch {
        out.push_str(&format!("epoch={epoch}\n"));
    }
    out.push_str(&resolved.to_text());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_suffix_keeps_extension() {
        assert_eq!(stage_path(Path::new("out/a.png"), 3), Path::new("out/a_t3.png"));
        assert_eq!(stage_path(Path::new("b"), 1), Path::new("b_t1"));
    }

    #[test]
    fn bare_stages_flag_parses() {
        let cli = Cli::try_parse_from([
            "sapnet",
            "derain",
            "--checkpoint",
            "c",
            "--input",
            "i",
            "--output",
            "o",
            "--stages",
        ])
        .unwrap();
        assert!(matches!(cli.command, Command::Derain { stages: Some(0), .. }));
        let cli = Cli::try_parse_from([
            "sapnet",
            "derain",
            "--checkpoint",
            "c",
            "--input",
            "i",
            "--output",
            "o",
            "--stages",
            "4",
        ])
        .unwrap();
        assert!(matches!(cli.command, Command::Derain { stages: Some(4), .. }));
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["sapnet", "bogus"]), 2);
        assert_eq!(run(["sapnet", "train"]), 2);
    }
}
