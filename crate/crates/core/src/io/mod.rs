//! File formats: Gaussian PLY frames, flow rasters, masks, images and
//! camera rigs, plus the dataset directory layout used by the tools.

pub mod cameras;
pub mod dataset;
pub mod flow;
pub mod images;
pub mod ply;

pub use cameras::{read_cameras, write_cameras, CameraEntry, CameraRig, LoadOptions};
pub use flow::{read_flow, write_flow};
pub use images::{read_image, read_mask, write_image, write_mask};
pub use ply::{read_gaussian_ply, write_gaussian_ply, Precision};
