//! The mcforge pipeline: step 1 segmentation, step 2 classification and
//! review, step 3 segmenter training, and the iteration that ties them to
//! the class catalog.

pub mod config;
pub mod iterate;
pub mod models;
pub mod step1;
pub mod step2;

pub use config::PipelineConfig;
