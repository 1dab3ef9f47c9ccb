//! Traffic flow forecasting with dynamic hypergraph structure learning.
//!
//! The model encodes a window of observations on a time-expanded road
//! graph, learns a low-rank hypergraph incidence matrix from the encoded
//! states, adds a second-order neighbourhood interaction term, and fuses
//! several temporal resolutions before a linear readout.
//!
//! Everything runs on the small reverse-mode tape in [`numerics`]; there is
//! no external tensor library.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod hyperstruct;
pub mod interaction;
pub mod learning;
pub mod multiscale;
pub mod numerics;
pub mod topology;
pub mod verify;

pub use error::{Error, Result};
