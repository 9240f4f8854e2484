pub mod checkpoint;
pub mod conditioning;
pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod intrinsics;
pub mod nn;
pub mod rng;
pub mod selection;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use image::ImageTensor;
