//! Run configuration in flat `section.key=value` text.
//!
//! Lines are `key=value`; blank lines and lines starting with `#` are
//! ignored. Every key is optional and falls back to its default, but
//! unknown or repeated keys are errors. Lists are comma separated and an
//! empty value means "unset" for optional paths. [`RunConfig::to_text`]
//! writes every key in a fixed order, which is also what
//! [`RunConfig::hash`] digests.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::DatasetSpec;
use crate::derain::ModelConfig;
use crate::losses::LossConfig;
use crate::segmenter::SegConfig;
use crate::train::{Toggles, TrainConfig};
use crate::{Error, Result};

/// Dataset location and cropping.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub crop: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            crop: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub seg: SegConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub out_dir: PathBuf,
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Desk-scale preset: tiny network, seeded random frozen branches at
    /// reduced width, whole-image batches of 4 and a one-step-per-epoch
    /// schedule of 200 epochs at lr 1e-2 with decay switched off.
    pub fn tiny(seed: u64) -> Self {
        Self {
            model: ModelConfig::tiny(),
            seg: SegConfig::tiny(seed),
            loss: LossConfig {
                lpisl_size: 32,
                extractor: crate::features::ExtractorConfig::seeded(4, vec![2, 4, 7], seed),
                ..LossConfig::default()
            },
            train: TrainConfig {
                epochs: 200,
                batch_size: 4,
                base_lr: 1e-2,
                seed,
                toggles: Toggles {
                    use_decay: false,
                    ..Toggles::default()
                },
                ..TrainConfig::default()
            },
            data: DataConfig {
                root: None,
                crop: 0,
                seed,
            },
            out_dir: PathBuf::new(),
        }
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, s, l, t, d) = (&self.model, &self.seg, &self.loss, &self.train, &self.data);
        let w = &l.weights;
        let fe = &l.extractor;
        vec![
            ("model.channels", m.channels.to_string()),
            ("model.kernel", m.kernel.to_string()),
            ("model.dilations", join(&m.dilations)),
            ("model.stages", m.stages.to_string()),
            ("model.attention", m.attention.to_string()),
            ("model.reduction", m.reduction.to_string()),
            ("model.block_repeats", m.block_repeats.to_string()),
            ("seg.num_classes", s.num_classes.to_string()),
            ("seg.decoder_init_std", s.decoder_init_std.to_string()),
            ("seg.encoder", s.encoder.to_string()),
            ("seg.encoder_weights", path_text(&s.encoder_weights)),
            ("seg.seed", s.seed.to_string()),
            ("seg.encoder_blocks", join(&s.encoder_blocks)),
            ("seg.encoder_width", s.encoder_width.to_string()),
            ("seg.stair_channels", s.stair_channels.to_string()),
            ("loss.lambda1", w.lambda1.to_string()),
            ("loss.lambda2", w.lambda2.to_string()),
            ("loss.lambda3", w.lambda3.to_string()),
            ("loss.lambda4", w.lambda4.to_string()),
            ("loss.omega", join(&w.omega)),
            ("loss.contrastive", l.contrastive.to_string()),
            ("loss.lpisl_size", l.lpisl_size.to_string()),
            ("loss.focal_alpha", l.focal_alpha.to_string()),
            ("loss.focal_gamma", l.focal_gamma.to_string()),
            ("loss.vgg", fe.source.to_string()),
            ("loss.vgg_weights", path_text(&fe.weights)),
            ("loss.vgg_seed", fe.seed.to_string()),
            ("loss.vgg_base_width", fe.base_width.to_string()),
            ("loss.taps", join(&fe.taps)),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.base_lr", t.base_lr.to_string()),
            ("train.decay_epochs", join(&t.decay_epochs)),
            ("train.decay_factor", t.decay_factor.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.use_seg", t.toggles.use_seg.to_string()),
            ("train.use_pcl", t.toggles.use_pcl.to_string()),
            ("train.use_lpisl", t.toggles.use_lpisl.to_string()),
            ("train.use_dilation", t.toggles.use_dilation.to_string()),
            ("train.use_decay", t.toggles.use_decay.to_string()),
            ("data.root", path_text(&d.root)),
            ("data.crop", d.crop.to_string()),
            ("data.seed", d.seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
        ]
    }

    /// Names of all accepted keys.
    pub fn keys() -> Vec<&'static str> {
        Self::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let (m, s, l, t, d) = (
            &mut self.model,
            &mut self.seg,
            &mut self.loss,
            &mut self.train,
            &mut self.data,
        );
        match key {
            "model.channels" => m.channels = parse(key, value)?,
            "model.kernel" => m.kernel = parse(key, value)?,
            "model.dilations" => m.dilations = parse_list(key, value)?,
            "model.stages" => m.stages = parse(key, value)?,
            "model.attention" => m.attention = parse(key, value)?,
            "model.reduction" => m.reduction = parse(key, value)?,
            "model.block_repeats" => m.block_repeats = parse(key, value)?,
            "seg.num_classes" => s.num_classes = parse(key, value)?,
            "seg.decoder_init_std" => s.decoder_init_std = parse(key, value)?,
            "seg.encoder" => s.encoder = parse(key, value)?,
            "seg.encoder_weights" => s.encoder_weights = parse_path(value),
            "seg.seed" => s.seed = parse(key, value)?,
            "seg.encoder_blocks" => {
                let blocks: Vec<usize> = parse_list(key, value)?;
                s.encoder_blocks = blocks
                    .try_into()
                    .map_err(|_| Error::config(key, "expected four block counts"))?;
            }
            "seg.encoder_width" => s.encoder_width = parse(key, value)?,
            "seg.stair_channels" => s.stair_channels = parse(key, value)?,
            "loss.lambda1" => l.weights.lambda1 = parse(key, value)?,
            "loss.lambda2" => l.weights.lambda2 = parse(key, value)?,
            "loss.lambda3" => l.weights.lambda3 = parse(key, value)?,
            "loss.lambda4" => l.weights.lambda4 = parse(key, value)?,
            "loss.omega" => l.weights.omega = parse_list(key, value)?,
            "loss.contrastive" => l.contrastive = parse(key, value)?,
            "loss.lpisl_size" => l.lpisl_size = parse(key, value)?,
            "loss.focal_alpha" => l.focal_alpha = parse(key, value)?,
            "loss.focal_gamma" => l.focal_gamma = parse(key, value)?,
            "loss.vgg" => l.extractor.source = parse(key, value)?,
            "loss.vgg_weights" => l.extractor.weights = parse_path(value),
            "loss.vgg_seed" => l.extractor.seed = parse(key, value)?,
            "loss.vgg_base_width" => l.extractor.base_width = parse(key, value)?,
            "loss.taps" => l.extractor.taps = parse_list(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.base_lr" => t.base_lr = parse(key, value)?,
            "train.decay_epochs" => t.decay_epochs = parse_list(key, value)?,
            "train.decay_factor" => t.decay_factor = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.use_seg" => t.toggles.use_seg = parse(key, value)?,
            "train.use_pcl" => t.toggles.use_pcl = parse(key, value)?,
            "train.use_lpisl" => t.toggles.use_lpisl = parse(key, value)?,
            "train.use_dilation" => t.toggles.use_dilation = parse(key, value)?,
            "train.use_decay" => t.toggles.use_decay = parse(key, value)?,
            "data.root" => d.root = parse_path(value),
            "data.crop" => d.crop = parse(key, value)?,
            "data.seed" => d.seed = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected key=value, got `{line}`")))?;
            let key = key.trim();
            if !seen.insert(key.to_owned()) {
                return Err(Error::config(key, "given more than once"));
            }
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.seg.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }

    /// Applies the training toggles: disabled terms get weight zero and
    /// disabling dilation sets every rate to 1. Idempotent.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        let t = &self.train.toggles;
        let w = &mut out.loss.weights;
        if !t.use_seg {
            w.lambda2 = 0.0;
        }
        if !t.use_pcl {
            w.lambda3 = 0.0;
        }
        if !t.use_lpisl {
            w.lambda4 = 0.0;
        }
        if !t.use_dilation {
            out.model.dilations.iter_mut().for_each(|d| *d = 1);
        }
        out
    }

    /// SHA-256 of the canonical text of the resolved configuration, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.resolved().to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The dataset this run reads.
    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let root = self
            .data
            .root
            .as_ref()
            .ok_or_else(|| Error::config("data.root", "no dataset root configured"))?;
        Ok(DatasetSpec {
            crop: self.data.crop,
            seed: self.data.seed,
            ..DatasetSpec::from_root(root)
        })
    }

    /// Copy with the component switches of an ablation row.
    pub fn with_ablation(&self, ablation: Ablation) -> Self {
        let mut out = self.clone();
        out.model.attention = crate::attention::AttentionKind::Cra;
        out.train.toggles = ablation.toggles();
        out
    }
}

/// Rows of the component ablation: each adds one component to the previous.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    /// Channel residual attention only.
    M1,
    /// + segmentation loss.
    M2,
    /// + perceptual contrastive loss.
    M3,
    /// + dilated residual blocks.
    M4,
    /// + learning-rate decay.
    M5,
    /// + LPISL: the full model.
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [Self::M1, Self::M2, Self::M3, Self::M4, Self::M5, Self::Full];

    pub fn toggles(self) -> Toggles {
        let rank = Self::ALL.iter().position(|&a| a == self).expect("listed");
        Toggles {
            use_seg: rank >= 1,
            use_pcl: rank >= 2,
            use_dilation: rank >= 3,
            use_decay: rank >= 4,
            use_lpisl: rank >= 5,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::M1 => "M1",
            Self::M2 => "M2",
            Self::M3 => "M3",
            Self::M4 => "M4",
            Self::M5 => "M5",
            Self::Full => "full",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;

    #[test]
    fn text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.model.dilations = vec![1, 2];
        cfg.loss.weights.lambda3 = 0.125;
        cfg.train.base_lr = 1e-3 / 3.0;
        cfg.seg.encoder_weights = Some("/w/r.safetensors".into());
        cfg.data.root = Some("data".into());
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn defaults_match_training_protocol() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.model.dilations, [1, 2, 4, 8, 16]);
        assert_eq!(cfg.model.attention, AttentionKind::Cra);
        assert_eq!(cfg.train.base_lr, 1e-3);
        assert_eq!(cfg.train.batch_size, 12);
        assert_eq!(cfg.seg.num_classes, 21);
        assert_eq!(cfg.loss.weights.lambda1, 1.0);
    }

    #[test]
    fn unknown_key_is_named() {
        match RunConfig::parse("model.chanels=16\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "model.chanels"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_values_and_duplicates_are_rejected() {
        assert!(RunConfig::parse("model.stages=six").is_err());
        assert!(RunConfig::parse("model.stages=2\nmodel.stages=3").is_err());
        assert!(RunConfig::parse("seg.encoder_blocks=1,2,3").is_err());
        assert!(RunConfig::parse("just words").is_err());
    }

    #[test]
    fn comments_and_whitespace_are_ignored() {
        let cfg = RunConfig::parse("# tiny\n\n  model.channels = 8  \n").unwrap();
        assert_eq!(cfg.model.channels, 8);
    }

    #[test]
    fn every_key_is_settable() {
        let defaults = RunConfig::default();
        for (key, value) in defaults.entries() {
            let mut cfg = RunConfig::default();
            cfg.set(key, &value).unwrap();
            assert_eq!(cfg, defaults, "{key}");
        }
    }

    #[test]
    fn toggles_resolve_into_weights_and_dilations() {
        let cfg = RunConfig::default().with_ablation(Ablation::M1).resolved();
        assert_eq!(cfg.model.dilations, [1, 1, 1, 1, 1]);
        let w = &cfg.loss.weights;
        assert_eq!((w.lambda2, w.lambda3, w.lambda4), (0.0, 0.0, 0.0));
        assert_eq!(cfg.resolved(), cfg);
    }

    #[test]
    fn ablation_rows_add_one_component_each() {
        let on = |a: Ablation| {
            let t = a.toggles();
            [t.use_seg, t.use_pcl, t.use_dilation, t.use_decay, t.use_lpisl]
                .iter()
                .filter(|&&b| b)
                .count()
        };
        let counts: Vec<usize> = Ablation::ALL.iter().map(|&a| on(a)).collect();
        assert_eq!(counts, [0, 1, 2, 3, 4, 5]);
    }
}
