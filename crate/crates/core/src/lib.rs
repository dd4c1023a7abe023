//! Shape and reflectance capture from a handful of flashlight photographs.
//!
//! The crate covers the whole pipeline: procedural scene generation and a
//! Cook-Torrance renderer for training data ([`scene`], [`render`]), the
//! coarse-to-fine recursive network and its training loop ([`netarch`],
//! [`training`]), normal-map integration ([`geometry`]) and evaluation
//! protocols ([`eval`]).

pub mod brdf;
pub mod geometry;
pub mod error;
pub mod eval;
pub mod infer;
pub mod io;
pub mod maps;
pub mod netarch;
pub mod math;
pub mod raster;
pub mod render;
pub mod scene;
pub mod tracer;
pub mod training;

pub use error::{Error, Result};
pub mod nn;
