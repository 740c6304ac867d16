//! Recurrent networks for dynamical systems built without gradient descent.
//!
//! Hidden layers are sampled from pairs of data points and every outer matrix
//! is obtained from a truncated-SVD least-squares solve, following the
//! extended dynamic mode decomposition (EDMD) view of the Koopman operator:
//!
//! ```text
//! z_t = K F(h_{t-1}) + B G(x_t),    h_t = C z_t
//! ```
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. File formats, experiment drivers and the command line live in the
//! companion `sampled-rnn` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod control;
pub mod dynamics;
pub mod embedding;
mod error;
pub mod linalg;
pub mod metrics;
pub mod rng;
pub mod rnn;
pub mod sampling;

pub use error::{Error, Result};

pub use nalgebra::{Complex, DMatrix, DVector};
