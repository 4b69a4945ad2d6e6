//! Zero-rate transmission over an AWGN channel with noisy passive feedback.
//!
//! The crate provides a Monte Carlo simulator of the two-phase
//! one-switching-moment scheme, an error-exponent engine for its achievable
//! bounds, and helpers for validating the intermediate ambiguity bounds.

// Range checks are written `!(x > 0.0)` on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod channel;
pub mod decoder;
pub mod error;
pub mod exponent;
pub mod geometry;
pub mod harness;
pub mod protocol;

pub use error::{Error, Result};

pub use channel::{NoiseStream, SessionStreams, StreamRole};
pub use decoder::{Decoder, DecoderMode, DecoderSettings};
pub use exponent::{ExponentBreakdown, GridSpec, OptReport};
pub use geometry::Codebook;
pub use harness::{ErrorEstimate, RunConfig};
pub use protocol::{Case, Scheme, SchemeParams, Transcript};
