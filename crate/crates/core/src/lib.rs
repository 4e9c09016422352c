//! Row-anchor lane detection.
//!
//! Lanes are predicted by selecting one gridding cell (or "no lane") on each
//! of a fixed set of image rows, for each of `C` lane slots. This crate holds
//! the geometry ([`grid`]), a small reverse-mode differentiation engine
//! ([`autodiff`]), the training objectives ([`losses`]), a toy backbone with
//! row-selection and regression heads ([`model`]), a synthetic scene
//! generator with TuSimple-format IO ([`synthdata`]) and the two benchmark
//! metrics ([`metrics`]).

pub mod autodiff;
pub mod error;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synthdata;

pub use error::{Error, Result};
pub use grid::{
    decode_argmax, decode_expectation, encode_targets, formulation_cost, locations_to_lanes,
    segmentation_cost, Decode, GridTarget, LanePolyline, LaneSet, LocationMatrix, PredictionTensor,
    RowAnchorGrid,
};
