//! Koopman-model identification from noisy snapshots and dual-loop robust
//! control: a nominal LQG loop plus an LMI-synthesized compensator driven by
//! the observer residual.

pub mod bounds;
pub mod config;
pub mod edmd;
pub mod error;
pub mod linalg;
pub mod nominal;
pub mod pipeline;
pub mod plant;
pub mod runtime;
pub mod sdp;
pub mod synthesis;

pub use error::{Error, Result};
