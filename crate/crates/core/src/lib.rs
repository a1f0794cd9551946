//! Forward and inverse Kalman-type filters, Cramér–Rao bound recursions and
//! stability checks for counter-adversarial state estimation.
//!
//! The crate is `no_std` with `alloc`; enable `std` for nothing more than
//! convenience in downstream crates.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod error;
pub mod forward;
pub mod inverse;
pub mod math;
pub mod matkit;
pub mod metrics;
pub mod models;
pub mod rcrlb;
pub mod rng;
pub mod stability;

pub use error::{Error, Result};
pub use matkit::{Mat, Vector};
