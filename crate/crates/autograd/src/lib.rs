//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Values are recorded on a [`Tape`] as they are computed; [`Tape::backward`]
//! then sweeps the record in reverse. The operation set covers what image
//! restoration networks need: dilated/strided convolution, channel gating,
//! pooling, bilinear resampling, reflection padding, softmax and fixed
//! separable filters.
//!
//! ```
//! use sapnet_autograd::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.input(Tensor::from_vec([3], vec![1.0, 2.0, 3.0]));
//! let y = (x * x).sum();
//! let grads = tape.backward(y);
//! assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

pub mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use ops::{reflect_index, ConvOptions};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
