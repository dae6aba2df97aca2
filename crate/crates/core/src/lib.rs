pub mod augment;
pub mod catalog;
pub mod edlclassify;
pub mod error;
pub mod imagecore;
pub mod neuralnet;
pub mod scorefield;
pub mod segnet;
pub mod synth;
pub mod vbgmm;

pub use error::{Error, Result};
