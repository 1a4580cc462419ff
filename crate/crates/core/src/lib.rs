//! Wireless radiation field reconstruction and channel prediction.
//!
//! A pair of neural fields (coarse and fine) is trained from sparse complex
//! channel measurements with known directions of arrival. Channels at new
//! locations are synthesized by volume rendering along arrival directions,
//! applying free-space attenuation and phase rotation between each sample and
//! the receiver. An image-method simulator provides ground truth.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod channel;
pub mod error;
pub mod experiment;
pub mod field;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod raysearch;
pub mod sim;
pub mod train;

pub use channel::{free_space_gain, iq_to_amp_phase, multipath_sum, ComplexValue, FrequencyConfig, Measurement};
pub use error::{Error, Result};
pub use geometry::{direction_to_unit, unit_to_direction, Aabb, Direction, Position, Vec3};
pub use metrics::{nmse, snr_db};
