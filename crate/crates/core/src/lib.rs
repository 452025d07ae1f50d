//! Behavioral simulation of a dual-polarization QPSK coherent link whose
//! receiver equalizes with a continuous-time analog CMA butterfly.
//!
//! Pipeline: [`txchain`] → [`fiberchan`] → [`rxfrontend`] → [`cmaeq`] →
//! [`cprc`] → [`metrics`], orchestrated by [`runner`]. [`refimpl`] is a
//! discrete-time CMA used as an independent oracle.

// `!(x >= 0.0)` is the idiom here for rejecting NaN along with negatives
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analogcells;
pub mod cmaeq;
pub mod cprc;
pub mod error;
pub mod fiberchan;
pub mod metrics;
pub mod refimpl;
pub mod runner;
pub mod rxfrontend;
pub mod sigkit;
pub mod txchain;

pub use error::{Error, Result};
