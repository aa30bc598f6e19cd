pub mod anonymizer;
pub mod autodiff;
pub mod blending;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod dataset;
pub mod discriminator;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod image;
pub mod inversion;
pub mod labels;
pub mod latent;
pub mod manifest;
pub mod params;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
