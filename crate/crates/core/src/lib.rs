pub mod checkpoint;
pub mod config;
pub mod data;
pub mod domain;
pub mod error;
pub mod eval;
pub mod gfilter;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod nets;
pub mod nn;
pub mod optim;
pub mod train;
pub mod viz;
pub mod warp;

pub use config::Config;
pub use domain::{FlowField, Image, LandmarkSet, Mask, Sample, View};
pub use error::{Error, Result};
