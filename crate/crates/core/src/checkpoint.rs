//! Binary checkpoint container.
//!
//! Layout (all integers little endian):
//!
//! ```text
//! b"SAPNETCK"  u32 version (=1)  u32 entry count
//! per entry:   u32 key length, key bytes, u8 kind, u64 payload length, payload
//! ```
//!
//! Kinds are `0` UTF-8 text, `1` u64, `2` named tensor list. A tensor list is
//! `u32 count` followed by `u32 name length, name, u32 rank, u64 dims...,
//! f64 values...` per tensor. Entries are written in the order `config`
//! (canonical run configuration text), `derain_weights`, `optimizer_state`
//! (`step`, `beta1`, `beta2`, `eps`, then `m.<name>` and `v.<name>` per
//! weight), `epoch` and `rng_seed`.

use std::collections::HashMap;
use std::path::Path;

use sapnet_autograd::Tensor;

use crate::config::RunConfig;
use crate::derain::{DerainWeights, ModelConfig};
use crate::optim::Adam;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SAPNETCK";
pub const VERSION: u32 = 1;

const TEXT: u8 = 0;
const UINT: u8 = 1;
const TENSORS: u8 = 2;

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// The resolved run configuration the weights were trained under.
    pub config: RunConfig,
    pub weights: DerainWeights,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub rng_seed: u64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0
            .extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.0.extend_from_slice(b);
    }

    fn entry(&mut self, key: &str, kind: u8, payload: &[u8]) {
        self.bytes(key.as_bytes());
        self.0.push(kind);
        self.u64(payload.len() as u64);
        self.0.extend_from_slice(payload);
    }
}

fn tensor_list<'a>(tensors: impl IntoIterator<Item = (String, &'a Tensor)>) -> Vec<u8> {
    let items: Vec<(String, &Tensor)> = tensors.into_iter().collect();
    let mut w = Writer(Vec::new());
    w.u32(items.len());
    for (name, t) in items {
        w.bytes(name.as_bytes());
        w.u32(t.shape().len());
        for &d in t.shape() {
            w.u64(d as u64);
        }
        for &v in t.data() {
            w.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.0
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("key is not UTF-8".into()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn read_tensors(payload: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: payload, pos: 0 };
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::from_vec(shape, data)));
    }
    if !r.done() {
        return Err(Error::Checkpoint("trailing bytes in tensor list".into()));
    }
    Ok(out)
}

fn fill(target: Vec<(String, &mut Tensor)>, mut source: HashMap<String, Tensor>, what: &str) -> Result<()> {
    for (name, slot) in target {
        let t = source
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("{what} is missing `{name}`")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "{what} `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    if let Some(extra) = source.keys().next() {
        return Err(Error::Checkpoint(format!("{what} has unexpected tensor `{extra}`")));
    }
    Ok(())
}

fn named_mut(weights: &mut DerainWeights) -> (Vec<String>, Vec<&mut Tensor>) {
    let names = weights.named_tensors().into_iter().map(|(n, _)| n).collect();
    (names, weights.tensors_mut())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(MAGIC.to_vec());
        w.0.extend_from_slice(&VERSION.to_le_bytes());
        w.u32(5);
        w.entry("config", TEXT, self.config.to_text().as_bytes());
        w.entry("derain_weights", TENSORS, &tensor_list(self.weights.named_tensors()));

        let names: Vec<String> = self.weights.named_tensors().into_iter().map(|(n, _)| n).collect();
        let o = &self.optimizer;
        let scalars = [
            Tensor::scalar(o.step as f64),
            Tensor::scalar(o.beta1),
            Tensor::scalar(o.beta2),
            Tensor::scalar(o.eps),
        ];
        let mut opt: Vec<(String, &Tensor)> = ["step", "beta1", "beta2", "eps"]
            .iter()
            .map(|s| s.to_string())
            .zip(&scalars)
            .collect();
        opt.extend(names.iter().map(|n| format!("m.{n}")).zip(&o.first_moment));
        opt.extend(names.iter().map(|n| format!("v.{n}")).zip(&o.second_moment));
        w.entry("optimizer_state", TENSORS, &tensor_list(opt));
        w.entry("epoch", UINT, &(self.epoch as u64).to_le_bytes());
        w.entry("rng_seed", UINT, &self.rng_seed.to_le_bytes());
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()? as u32;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let count = r.u32()?;
        let mut entries: HashMap<String, (u8, &[u8])> = HashMap::new();
        for _ in 0..count {
            let key = r.string()?;
            let kind = r.u8()?;
            let len = usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("entry too large".into()))?;
            entries.insert(key, (kind, r.take(len)?));
        }
        if !r.done() {
            return Err(Error::Checkpoint("trailing bytes after the last entry".into()));
        }
        let mut get = |key: &str, kind: u8| -> Result<&[u8]> {
            match entries.remove(key) {
                Some((k, payload)) if k == kind => Ok(payload),
                Some(_) => Err(Error::Checkpoint(format!("entry `{key}` has the wrong kind"))),
                None => Err(Error::Checkpoint(format!("missing entry `{key}`"))),
            }
        };
        let uint = |payload: &[u8]| -> Result<u64> {
            Ok(u64::from_le_bytes(payload.try_into().map_err(|_| {
                Error::Checkpoint("integer entry is not 8 bytes".into())
            })?))
        };

        let text =
            std::str::from_utf8(get("config", TEXT)?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = RunConfig::parse(text)?;
        let mut weights = DerainWeights::zeros(&config.model)?;
        let (names, slots) = named_mut(&mut weights);
        let stored: HashMap<String, Tensor> = read_tensors(get("derain_weights", TENSORS)?)?.into_iter().collect();
        fill(names.iter().cloned().zip(slots).collect(), stored, "derain_weights")?;

        let mut opt: HashMap<String, Tensor> = read_tensors(get("optimizer_state", TENSORS)?)?.into_iter().collect();
        let mut scalar = |name: &str| -> Result<f64> {
            opt.remove(name)
                .filter(|t| t.numel() == 1)
                .map(|t| t.item())
                .ok_or_else(|| Error::Checkpoint(format!("optimizer_state is missing `{name}`")))
        };
        let (step, beta1, beta2, eps) = (scalar("step")?, scalar("beta1")?, scalar("beta2")?, scalar("eps")?);
        let mut optimizer = Adam::new(weights.named_tensors().into_iter().map(|(_, t)| t));
        optimizer.step = step as u64;
        optimizer.beta1 = beta1;
        optimizer.beta2 = beta2;
        optimizer.eps = eps;
        let mut slots: Vec<(String, &mut Tensor)> = names
            .iter()
            .map(|n| format!("m.{n}"))
            .zip(optimizer.first_moment.iter_mut())
            .collect();
        slots.extend(
            names
                .iter()
                .map(|n| format!("v.{n}"))
                .zip(optimizer.second_moment.iter_mut()),
        );
        fill(slots, opt, "optimizer_state")?;

        let epoch =
            usize::try_from(uint(get("epoch", UINT)?)?).map_err(|_| Error::Checkpoint("epoch out of range".into()))?;
        let rng_seed = uint(get("rng_seed", UINT)?)?;
        Ok(Self {
            config,
            weights,
            optimizer,
            epoch,
            rng_seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads a checkpoint and checks it was trained with `expected`.
    pub fn load_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.check_model(expected)?;
        Ok(ck)
    }

    pub fn check_model(&self, expected: &ModelConfig) -> Result<()> {
        let stored = &self.config.model;
        if stored != expected {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint model is {stored:?}, requested {expected:?}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derain::derain;
    use crate::image::ImageTensor;

    fn sample() -> Checkpoint {
        let config = RunConfig {
            model: ModelConfig::tiny(),
            ..RunConfig::default()
        };
        let weights = DerainWeights::init(&config.model, 3).unwrap();
        let mut optimizer = Adam::new(weights.named_tensors().into_iter().map(|(_, t)| t));
        optimizer.step = 7;
        optimizer.first_moment[2] = optimizer.first_moment[2].map(|_| 0.125);
        Checkpoint {
            config,
            weights,
            optimizer,
            epoch: 4,
            rng_seed: 99,
        }
    }

    #[test]
    fn round_trip_is_value_identical() {
        let ck = sample();
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }

    #[test]
    fn second_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        sample().save(&a).unwrap();
        Checkpoint::load(&a).unwrap().save(&b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn loaded_weights_derain_identically() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let img = ImageTensor::from_fn(9, 9, |c, y, x| ((c + y * x) % 7) as f64 / 7.0);
        assert_eq!(
            derain(&img, &ck.weights, &ck.config.model).unwrap(),
            derain(&img, &back.weights, &back.config.model).unwrap()
        );
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        sample().save(&path).unwrap();
        let wanted = ModelConfig {
            channels: 16,
            ..ModelConfig::tiny()
        };
        assert!(matches!(
            Checkpoint::load_for(&path, &wanted),
            Err(Error::ConfigMismatch(_))
        ));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&wrong_version),
            Err(Error::Checkpoint(_))
        ));
    }
}
