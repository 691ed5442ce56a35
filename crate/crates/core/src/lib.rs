//! Core building blocks for a desk-scale QKD network emulator.
//!
//! The crate is organised along the data flow of an emulated link:
//!
//! * [`channel`]: fiber/free-space channel segments, composite links,
//!   turbulence statistics and fading-transmission histograms.
//! * [`sim`]: Monte-Carlo simulation of QKD sessions (decoy-state BB84,
//!   entangled-pair BBM92, CV quadrature exchanges) over those channels,
//!   producing per-block counting or quadrature statistics.
//! * [`keyrate`]: finite-key and asymptotic secret-key engines consuming
//!   the block statistics.
//! * [`rng`]: the deterministic, stream-derivable generator every
//!   simulation takes as an explicit argument.
//!
//! Everything here is a pure function of (configuration, seed); there is no
//! hidden global state and no wall clock.

// Validation guards use `!(x >= 0.0)` so NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod keyrate;
pub mod rng;
pub mod sim;
