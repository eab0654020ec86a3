//! Streaming detection and repair of FD/CFD violations.

pub mod detect;
pub mod dynamics;
pub mod error;
pub mod genbench;
pub mod model;
pub mod repair;
pub mod runtime;
pub mod windowing;
