//! Image-coupled volume propagation (ICVP) stereo matching on the CPU.
//!
//! The crate contains a small reverse-mode autodiff engine ([`tensor`]), the
//! network's layer vocabulary ([`blocks`]), the full model
//! ([`extractor`], [`cost_volume`], [`aggregation`], [`head`], [`model`]),
//! synthetic stereo data and file formats ([`data`]), and the training and
//! verification drivers used by the command-line tool.

pub mod aggregation;
pub mod blocks;
pub mod config;
pub mod cost_volume;
pub mod data;
pub mod error;
pub mod extractor;
pub mod head;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
