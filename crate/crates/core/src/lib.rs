//! Audio- and facial-action-unit-driven talking head generation.
//!
//! The pipeline ingests (or synthesizes) aligned audio/frame/AU-label clips,
//! fuses per-frame identity, audio, and AU features with a dilated non-causal
//! temporal convolutional self-attention network, and decodes lip-synced face
//! frames. Training, generation, evaluation, and a procedural synthetic
//! dataset are all included so every stage runs at desk scale on a CPU.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod params;
pub mod tcsan;
pub mod training;
pub mod threads;

pub use error::{Error, Result};
