mod channel;
mod conv;
mod elementwise;
mod spatial;

pub use conv::ConvOptions;
pub use spatial::reflect_index;
