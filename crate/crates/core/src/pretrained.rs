//! Loading frozen backbone weights from `.safetensors` files.
//!
//! Tensor names follow the torchvision state-dict layout, so a file exported
//! with `safetensors.torch.save_file(model.state_dict(), path)` loads as is.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use safetensors::{Dtype, SafeTensors};
use sapnet_autograd::Tensor;

use crate::{Error, Result};

/// Environment variable naming the directory searched for pretrained files.
pub const CACHE_ENV: &str = "SAPNET_CACHE";

/// Where a frozen backbone's weights come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WeightSource {
    Pretrained,
    /// Deterministic random weights from a seed; needs no files.
    SeededRandom,
}

impl fmt::Display for WeightSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pretrained => "pretrained",
            Self::SeededRandom => "seeded_random",
        })
    }
}

impl FromStr for WeightSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pretrained" | "pretrained_resnet101" | "pretrained_vgg16" => Ok(Self::Pretrained),
            "seeded_random" => Ok(Self::SeededRandom),
            other => Err(format!(
                "unknown weight source `{other}` (expected pretrained or seeded_random)"
            )),
        }
    }
}

/// Resolves the weight file: the explicit path if given, otherwise
/// `$SAPNET_CACHE/<file_name>`.
pub(crate) fn resolve(
    explicit: Option<&Path>,
    file_name: &str,
    what: &'static str,
    key: &'static str,
) -> Result<PathBuf> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => match std::env::var_os(CACHE_ENV) {
            Some(dir) => Path::new(&dir).join(file_name),
            None => {
                return Err(Error::PretrainedUnavailable {
                    what,
                    key,
                    detail: format!("no weight path configured and {CACHE_ENV} is unset"),
                })
            }
        },
    };
    if !path.is_file() {
        return Err(Error::PretrainedUnavailable {
            what,
            key,
            detail: format!("{} does not exist", path.display()),
        });
    }
    Ok(path)
}

/// An opened weight file.
pub(crate) struct WeightFile {
    path: PathBuf,
    bytes: Vec<u8>,
    what: &'static str,
    key: &'static str,
}

impl WeightFile {
    pub fn open(path: PathBuf, what: &'static str, key: &'static str) -> Result<Self> {
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        SafeTensors::deserialize(&bytes).map_err(|e| Error::PretrainedUnavailable {
            what,
            key,
            detail: format!("{} is not a safetensors file: {e}", path.display()),
        })?;
        Ok(Self { path, bytes, what, key })
    }

    fn fail(&self, detail: String) -> Error {
        Error::PretrainedUnavailable {
            what: self.what,
            key: self.key,
            detail: format!("{}: {detail}", self.path.display()),
        }
    }

    /// Reads tensor `name` as f64, checking its shape.
    pub fn tensor(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let st = SafeTensors::deserialize(&self.bytes).map_err(|e| self.fail(e.to_string()))?;
        let view = st
            .tensor(name)
            .map_err(|_| self.fail(format!("missing tensor `{name}`")))?;
        if view.shape() != shape {
            return Err(self.fail(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                view.shape()
            )));
        }
        let raw = view.data();
        let data: Vec<f64> = match view.dtype() {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
            other => return Err(self.fail(format!("tensor `{name}` has unsupported dtype {other:?}"))),
        };
        Ok(Tensor::from_vec(shape.to_vec(), data))
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use std::collections::HashMap;
    use std::path::Path;

    use safetensors::tensor::TensorView;
    use safetensors::Dtype;
    use sapnet_autograd::Tensor;

    /// Writes `tensors` as an f32 safetensors file.
    pub fn write_f32(path: &Path, tensors: &[(String, Tensor)]) {
        let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
            .iter()
            .map(|(name, t)| {
                let bytes = t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
                (name.clone(), t.shape().to_vec(), bytes)
            })
            .collect();
        let views: HashMap<String, TensorView<'_>> = buffers
            .iter()
            .map(|(name, shape, bytes)| {
                (
                    name.clone(),
                    TensorView::new(Dtype::F32, shape.clone(), bytes).expect("valid view"),
                )
            })
            .collect();
        safetensors::serialize_to_file(views, &None, path).expect("write safetensors");
    }
}
