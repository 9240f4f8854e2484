//! Minimal neural-network toolkit on top of candle tensors.

pub mod conv;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;

pub use conv::conv2d;
pub use layers::{Attention, Conv2d, GroupNorm, Linear};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Init, Param, ParamStore, Partition, Scope};
