//! Streaming reconstruction and compression of dynamic Gaussian-splat scenes.

pub mod codec;
pub mod config;
pub mod deform;
pub mod error;
pub mod io;
pub mod knn;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod quat;
pub mod raster;
pub mod refine;
pub mod sh;
pub mod splatter;
pub mod testkit;

pub use error::{EgsError, Result};
