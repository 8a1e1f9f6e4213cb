pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod derain;
mod error;
pub mod features;
mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pretrained;
pub mod segmenter;
pub mod train;

pub use error::{Error, Result};
pub use image::ImageTensor;
pub use sapnet_autograd as autograd;
