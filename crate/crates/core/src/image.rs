//! RGB image tensors and 8-bit conversion.

use std::path::Path;

use image::RgbImage;
use sapnet_autograd::Tensor;

use crate::{Error, Result};

/// An RGB image stored as a `[3, H, W]` tensor of floats, nominally in `[0, 1]`.
///
/// Network outputs may leave the unit range; [`ImageTensor::to_rgb8`] clamps.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub fn new(tensor: Tensor) -> Result<Self> {
        match tensor.shape() {
            [3, h, w] if *h > 0 && *w > 0 => Ok(Self(tensor)),
            s => Err(Error::Input(format!(
                "expected a [3, H, W] image tensor, got shape {s:?}"
            ))),
        }
    }

    /// Panics if `tensor` is not `[3, H, W]`.
    pub fn from_tensor(tensor: Tensor) -> Self {
        Self::new(tensor).expect("RGB tensor")
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self(Tensor::full([3, height, width], value))
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Tensor::zeros([3, height, width]);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    t.set3(c, y, x, f(c, y, x));
                }
            }
        }
        Self(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.0.at3(c, y, x)
    }

    pub fn clamp01(&self) -> Self {
        Self(self.0.clamp(0.0, 1.0))
    }

    pub fn is_finite(&self) -> bool {
        self.0.all_finite()
    }

    /// Crop of `height x width` starting at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |c, y, x| self.get(c, y0 + y, x0 + x))
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut t = Tensor::zeros([3, h, w]);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                t.set3(c, y as usize, x as usize, f64::from(px.0[c]) / 255.0);
            }
        }
        Self(t)
    }

    /// Clamps to `[0, 1]` and rounds to the nearest 8-bit level.
    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = self.dims();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Decode {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// Writes an 8-bit image; the format follows the file extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8().save(path).map_err(|source| Error::Encode {
            path: path.to_path_buf(),
            source,
        })
    }
}

impl From<ImageTensor> for Tensor {
    fn from(img: ImageTensor) -> Self {
        img.0
    }
}
