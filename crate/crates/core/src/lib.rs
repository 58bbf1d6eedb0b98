//! Differentially private last-layer training under Neural Collapse.
//!
//! The crate models pre-trained features that sit near a simplex equiangular
//! tight frame, trains a linear head on them with noisy gradient descent
//! under zero-concentrated differential privacy, and measures the
//! misclassification error by Monte Carlo. Closed-form error and sample
//! complexity bounds live in [`bounds`] so the simulator can be checked
//! against them.
//!
//! ```
//! use ncdp_core::geometry::make_etf;
//! let frame = make_etf(3, 2, None, true).unwrap();
//! assert_eq!(frame.prototype(0), vec![1.0, 0.0, 0.0]);
//! ```

pub mod analysis;
pub mod bounds;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod mitigations;
pub mod par;
pub mod privacy;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
