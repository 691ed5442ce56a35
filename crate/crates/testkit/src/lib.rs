//! Reference evaluators for the test suites.
//!
//! Everything in this crate is written from the governing formulas alone,
//! without touching the production engine code, so the test suites can
//! compare the two routes. Keep it dependency-free and keep it boring:
//! straight-line transliterations, plain arguments, no shared helpers with
//! the code under test.

pub mod dv_reference;
pub mod expectation;
