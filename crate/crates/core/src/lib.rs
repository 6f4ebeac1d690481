//! Binaural signal matching for wearable microphone arrays: signal-independent,
//! COMPASS and signal-dependent filter designs, an online mixture-of-experts
//! renderer, field-of-view control, a shoebox scene simulator and the
//! evaluation used to compare them.

pub mod config;
pub mod error;
pub mod eval;
pub mod filters;
pub mod fov;
pub mod grid;
pub mod hrtf;
pub mod linalg;
pub mod moe;
pub mod pipeline;
pub mod runner;
pub mod scene;
pub mod signal;
pub mod stft;

pub use error::{Error, Result};
