//! Brute-force reference computations.
//!
//! Nothing here shares code with the engine: every function is a direct
//! transcription of a definition over plain `f64` slices, written for
//! clarity rather than speed. Tests compare the real implementations
//! against these.

pub mod attention;
pub mod conv;
pub mod mechanistic;
pub mod metrics;
