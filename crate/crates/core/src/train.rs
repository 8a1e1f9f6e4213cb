//! Training loop: batches of crops, the weighted loss on the final stage,
//! Adam over the derain weights only, and a step-decay schedule.
//!
//! Each step writes one [`TrainLogRecord`], rendered as a single line:
//!
//! ```text
//! epoch=0 step=1 ssim_loss=-0.41 seg_loss=2.9 pcl=1.2 lpisl=0.8 total=-0.12 lr=0.001 wall_time=0.532
//! ```
//!
//! Every random choice in an epoch is derived from `(train.seed, epoch)`, so
//! resuming from a checkpoint continues exactly as an uninterrupted run.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use sapnet_autograd::{Tape, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{epoch_order, epoch_rng, random_crop_pair, PairedSample};
use crate::derain::{derain_graph, DerainWeights};
use crate::features::FeatureExtractor;
use crate::losses::{total_loss, LossBreakdown};
use crate::nn::Binding;
use crate::optim::Adam;
use crate::segmenter::Segmenter;
use crate::{Error, Result};

/// Component switches of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Toggles {
    pub use_seg: bool,
    pub use_pcl: bool,
    pub use_lpisl: bool,
    pub use_dilation: bool,
    pub use_decay: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            use_seg: true,
            use_pcl: true,
            use_lpisl: true,
            use_dilation: true,
            use_decay: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub seed: u64,
    pub toggles: Toggles,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 12,
            base_lr: 1e-3,
            decay_epochs: vec![30, 50, 80],
            decay_factor: 0.2,
            seed: 0,
            toggles: Toggles::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("train.base_lr", "must be positive"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::config("train.decay_factor", "must lie in (0, 1)"));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("train.decay_epochs", "must be strictly increasing"));
        }
        Ok(())
    }
}

/// Learning rate for `epoch`: `base_lr · factor^k` with `k` the number of
/// decay epochs at or before `epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if !cfg.toggles.use_decay {
        return cfg.base_lr;
    }
    let k = cfg.decay_epochs.iter().filter(|&&e| e <= epoch).count();
    // dividing by the reciprocal keeps factors like 0.2 exact (1 / 0.2 == 5)
    cfg.base_lr / (1.0 / cfg.decay_factor).powi(k as i32)
}

/// One optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: LossBreakdown,
    pub lr: f64,
    /// Seconds since training started.
    pub wall_time: f64,
}

impl fmt::Display for TrainLogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} step={} {} lr={} wall_time={:.3}",
            self.epoch, self.step, self.loss, self.lr, self.wall_time
        )
    }
}

impl FromStr for TrainLogRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for part in line.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Input(format!("log field `{part}` is not key=value")))?;
            fields.insert(k, v);
        }
        fn get<T: FromStr>(fields: &std::collections::HashMap<&str, &str>, key: &str) -> Result<T> {
            fields
                .get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Input(format!("log line lacks a valid `{key}`")))
        }
        Ok(Self {
            epoch: get(&fields, "epoch")?,
            step: get(&fields, "step")?,
            loss: LossBreakdown {
                ssim_loss: get(&fields, "ssim_loss")?,
                seg_loss: get(&fields, "seg_loss")?,
                pcl: get(&fields, "pcl")?,
                lpisl: get(&fields, "lpisl")?,
                total: get(&fields, "total")?,
            },
            lr: get(&fields, "lr")?,
            wall_time: get(&fields, "wall_time")?,
        })
    }
}

/// Training state: derain weights, optimizer and the frozen branches.
pub struct Trainer {
    config: RunConfig,
    weights: DerainWeights,
    optimizer: Adam,
    segmenter: Option<Segmenter>,
    extractor: Option<FeatureExtractor>,
    epoch: usize,
    started: Instant,
}

impl Trainer {
    /// Fresh weights drawn from `train.seed`.
    pub fn new(config: &RunConfig) -> Result<Self> {
        let config = config.resolved();
        config.validate()?;
        let weights = DerainWeights::init(&config.model, config.train.seed)?;
        Self::assemble(config, weights, None, 0)
    }

    /// Continues from a checkpoint.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let config = ck.config.resolved();
        config.validate()?;
        ck.weights.check_config(&config.model)?;
        Self::assemble(config, ck.weights, Some(ck.optimizer), ck.epoch)
    }

    fn assemble(config: RunConfig, weights: DerainWeights, optimizer: Option<Adam>, epoch: usize) -> Result<Self> {
        let segmenter = if config.loss.weights.lambda2 > 0.0 {
            Some(Segmenter::build(&config.seg, config.seg.seed)?)
        } else {
            None
        };
        let extractor = if config.loss.needs_extractor() {
            Some(FeatureExtractor::build(&config.loss.extractor)?)
        } else {
            None
        };
        let optimizer = optimizer.unwrap_or_else(|| Adam::new(weights.named_tensors().into_iter().map(|(_, t)| t)));
        Ok(Self {
            config,
            weights,
            optimizer,
            segmenter,
            extractor,
            epoch,
            started: Instant::now(),
        })
    }

    /// The resolved configuration in effect.
    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn weights(&self) -> &DerainWeights {
        &self.weights
    }

    pub fn segmenter(&self) -> Option<&Segmenter> {
        self.segmenter.as_ref()
    }

    pub fn extractor(&self) -> Option<&FeatureExtractor> {
        self.extractor.as_ref()
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Optimisation steps taken so far.
    pub fn steps(&self) -> u64 {
        self.optimizer.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            weights: self.weights.clone(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            rng_seed: self.config.train.seed,
        }
    }

    /// Loss and gradients of one sample; gradients follow
    /// [`DerainWeights::named_tensors`] order.
    pub fn sample_gradients(&self, sample: &PairedSample) -> Result<(LossBreakdown, Vec<Tensor>)> {
        let tape = Tape::new();
        let rainy = tape.constant(sample.rainy.tensor());
        let clean = tape.constant(sample.clean.tensor());
        let outputs = derain_graph(rainy, &self.weights, &self.config.model, Binding::Trainable)?;
        let derained = *outputs.last().expect("at least one stage");
        let probs = match &self.segmenter {
            Some(seg) => Some(seg.segment_graph(derained)?),
            None => None,
        };
        let loss = total_loss(
            derained,
            clean,
            rainy,
            probs,
            self.extractor.as_ref(),
            &self.config.loss,
        )?;
        if !loss.breakdown.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.optimizer.step + 1,
                breakdown: loss.breakdown,
            });
        }
        let grads = tape.backward(loss.total);
        let g = self
            .weights
            .named_tensors()
            .into_iter()
            .map(|(_, t)| grads.param_or_zeros(t))
            .collect();
        Ok((loss.breakdown, g))
    }

    /// One Adam step on the mean loss of `batch`.
    pub fn step(&mut self, batch: &[PairedSample], lr: f64) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut parts = Vec::with_capacity(batch.len());
        let mut sum: Option<Vec<Tensor>> = None;
        for sample in batch {
            let (b, g) = self.sample_gradients(sample)?;
            parts.push(b);
            match &mut sum {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, gi)| a.add_assign(gi)),
                None => sum = Some(g),
            }
        }
        let scale = 1.0 / batch.len() as f64;
        let grads: Vec<Tensor> = sum.expect("nonempty batch").iter().map(|g| g.scale(scale)).collect();
        let breakdown = LossBreakdown::mean(&parts, &self.config.loss.weights);
        if !breakdown.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::NonFiniteLoss {
                step: self.optimizer.step + 1,
                breakdown,
            });
        }
        self.optimizer.update(self.weights.tensors_mut(), &grads, lr)?;
        Ok(breakdown)
    }

    /// Runs the next epoch over `data`, reporting every step to `log`.
    pub fn train_epoch(&mut self, data: &[PairedSample], log: &mut dyn FnMut(&TrainLogRecord)) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Input("no pairs found".into()));
        }
        let epoch = self.epoch;
        let seed = self.config.train.seed;
        let lr = lr_at(epoch, &self.config.train);
        let crop = self.config.data.crop;
        let mut rng = epoch_rng(seed.wrapping_add(1), epoch);
        let order = epoch_order(data.len(), seed, epoch);
        for chunk in order.chunks(self.config.train.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    if crop == 0 {
                        Ok(data[i].clone())
                    } else {
                        random_crop_pair(&data[i], crop, &mut rng)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let loss = self.step(&batch, lr)?;
            log(&TrainLogRecord {
                epoch,
                step: self.optimizer.step,
                loss,
                lr,
                wall_time: self.started.elapsed().as_secs_f64(),
            });
        }
        self.epoch += 1;
        Ok(())
    }

    /// Trains until `train.epochs` epochs are complete. With `out_dir`, the
    /// log goes to `train.log`, `last.ckpt` is rewritten after every epoch
    /// and `final.ckpt` is written at the end.
    pub fn train(
        &mut self,
        data: &[PairedSample],
        log: &mut dyn FnMut(&TrainLogRecord),
        out_dir: Option<&Path>,
    ) -> Result<()> {
        let mut file = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("train.log");
                let f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((path, f))
            }
            None => None,
        };
        while self.epoch < self.config.train.epochs {
            let mut write_err = None;
            self.train_epoch(data, &mut |r| {
                if let Some((path, f)) = &mut file {
                    if let Err(e) = writeln!(f, "{r}") {
                        write_err.get_or_insert(Error::io(path.clone(), e));
                    }
                }
                log(r);
            })?;
            if let Some(e) = write_err {
                return Err(e);
            }
            if let Some(dir) = out_dir {
                self.checkpoint().save(dir.join("last.ckpt"))?;
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(dir.join("final.ckpt"))?;
        }
        Ok(())
    }
}

/// Builds a trainer and runs it to completion, collecting the log.
pub fn train(config: &RunConfig, data: &[PairedSample]) -> Result<(Checkpoint, Vec<TrainLogRecord>)> {
    let mut trainer = Trainer::new(config)?;
    let mut records = Vec::new();
    let out = (!config.out_dir.as_os_str().is_empty()).then_some(config.out_dir.as_path());
    trainer.train(data, &mut |r| records.push(*r), out)?;
    Ok((trainer.checkpoint(), records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derain::ModelConfig;
    use crate::image::ImageTensor;
    use crate::pretrained::WeightSource;

    #[test]
    fn schedule_matches_step_decay() {
        let cfg = TrainConfig::default();
        let got: Vec<f64> = [0, 29, 30, 50, 80, 99].iter().map(|&e| lr_at(e, &cfg)).collect();
        assert_eq!(got, [1e-3, 1e-3, 2e-4, 4e-5, 8e-6, 8e-6]);
        let flat = TrainConfig {
            toggles: Toggles {
                use_decay: false,
                ..Toggles::default()
            },
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(80, &flat), 1e-3);
    }

    #[test]
    fn hundred_epochs_use_four_rates() {
        let cfg = TrainConfig::default();
        let mut rates: Vec<u64> = (0..100).map(|e| lr_at(e, &cfg).to_bits()).collect();
        rates.dedup();
        assert_eq!(rates.len(), 4);
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        let bad = [
            TrainConfig {
                decay_factor: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                decay_epochs: vec![50, 30],
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn log_lines_round_trip() {
        let r = TrainLogRecord {
            epoch: 3,
            step: 17,
            loss: LossBreakdown {
                ssim_loss: -0.5,
                seg_loss: 2.25,
                pcl: 0.1,
                lpisl: 1e-9,
                total: -0.2,
            },
            lr: 2e-4,
            wall_time: 1.5,
        };
        assert_eq!(r.to_string().parse::<TrainLogRecord>().unwrap(), r);
        assert!("epoch=1 step=x".parse::<TrainLogRecord>().is_err());
    }

    fn ssim_only_config() -> RunConfig {
        let mut cfg = RunConfig {
            model: ModelConfig::tiny(),
            ..RunConfig::default()
        };
        cfg.train.toggles = Toggles {
            use_seg: false,
            use_pcl: false,
            use_lpisl: false,
            ..Toggles::default()
        };
        cfg.loss.extractor.source = WeightSource::SeededRandom;
        cfg.seg.encoder = WeightSource::SeededRandom;
        cfg.data.crop = 0;
        cfg
    }

    fn pairs() -> Vec<PairedSample> {
        (0..3)
            .map(|i| {
                let clean = ImageTensor::from_fn(12, 12, |c, y, x| ((c + y + x + i) % 5) as f64 / 5.0);
                let rainy = ImageTensor::from_tensor(clean.tensor().map(|v| (v + 0.2).min(1.0)));
                PairedSample::new(format!("{i}"), rainy, clean).unwrap()
            })
            .collect()
    }

    #[test]
    fn disabled_terms_build_no_frozen_branches() {
        let t = Trainer::new(&ssim_only_config()).unwrap();
        assert!(t.segmenter().is_none() && t.extractor().is_none());
    }

    #[test]
    fn zeroed_weights_step_like_ssim_only() {
        let mut toggled = ssim_only_config();
        toggled.train.toggles = Toggles::default();
        toggled.loss.weights.lambda2 = 0.0;
        toggled.loss.weights.lambda3 = 0.0;
        toggled.loss.weights.lambda4 = 0.0;
        let data = pairs();
        let mut a = Trainer::new(&ssim_only_config()).unwrap();
        let mut b = Trainer::new(&toggled).unwrap();
        a.step(&data, 1e-3).unwrap();
        b.step(&data, 1e-3).unwrap();
        assert_eq!(a.weights(), b.weights());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut t = Trainer::new(&ssim_only_config()).unwrap();
        let err = t.train_epoch(&[], &mut |_| {}).unwrap_err();
        assert!(err.to_string().contains("no pairs found"));
    }

    #[test]
    fn non_finite_loss_reports_the_step() {
        let mut t = Trainer::new(&ssim_only_config()).unwrap();
        t.weights.output.bias = t.weights.output.bias.map(|_| 1e300);
        let err = t.step(&pairs(), 1e-3).unwrap_err();
        match err {
            Error::NonFiniteLoss { step, breakdown } => {
                assert_eq!(step, 1);
                assert!(!breakdown.is_finite());
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn epoch_writes_checkpoints_and_log() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ssim_only_config();
        cfg.train.epochs = 2;
        cfg.train.batch_size = 2;
        cfg.out_dir = dir.path().to_path_buf();
        let (ck, records) = train(&cfg, &pairs()).unwrap();
        assert_eq!(records.len(), 4);
        assert_eq!(ck.epoch, 2);
        assert_eq!(Checkpoint::load(dir.path().join("final.ckpt")).unwrap(), ck);
        let log = std::fs::read_to_string(dir.path().join("train.log")).unwrap();
        let parsed: Vec<TrainLogRecord> = log.lines().map(|l| l.parse().unwrap()).collect();
        assert_eq!(
            parsed.iter().map(|r| r.loss).collect::<Vec<_>>(),
            records.iter().map(|r| r.loss).collect::<Vec<_>>()
        );
    }
}
