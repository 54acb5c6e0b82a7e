pub mod config;
pub mod critic;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod generator;
pub mod metrics;
pub mod params;
pub mod pointcloud;
pub mod synth;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/point-clouds.md")]
    mod point_clouds {}
    #[doc = include_str!("../../../book/src/distances.md")]
    mod distances {}
    #[doc = include_str!("../../../book/src/tree-generator.md")]
    mod tree_generator {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/synthetic-data.md")]
    mod synthetic_data {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
