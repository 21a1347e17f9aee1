pub mod arrays;
pub mod augmenter;
pub mod cli;
pub mod error;
pub mod evaluator;
pub mod fft;
pub mod graph;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rasterizer;
pub mod renderer;
pub mod scene;
pub mod synthetic;
pub mod tensor;
pub mod texture;
pub mod trainer;
pub mod vgg;

pub use error::{Error, ErrorClass, Result};
