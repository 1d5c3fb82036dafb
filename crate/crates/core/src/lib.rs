pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod heatmap;
pub mod image;
pub mod inference;
pub mod landmarks;
pub mod measure;
pub mod phantom;
pub mod preprocess;
pub mod service;
pub mod tensor;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
