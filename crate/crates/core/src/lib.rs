//! Range-aware attention detector for LiDAR bird's-eye-view point clouds.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`autodiff`]), pillar BEV encoding ([`bev`]), the range-aware attention
//! convolution ([`raaconv`]), Gaussian center targets ([`targets`]), the
//! training objective ([`losses`]), a toy network with synthetic scenes
//! ([`model`], [`synth`], [`train`]) and decoding/evaluation ([`decode`],
//! [`eval`]).

pub mod autodiff;
pub mod bev;
pub mod boxes;
pub mod config;
pub mod conv;
pub mod decode;
pub mod encodings;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod params;
pub mod raaconv;
pub mod synth;
pub mod targets;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
