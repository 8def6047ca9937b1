//! Spike sorting for multi-electrode extracellular recordings.
//!
//! The pipeline runs in two parts. A model (the [`peel::Catalogue`]) is
//! estimated on a stretch of data:
//!
//! [`ingest`] → [`preprocess`] → [`detect`] → [`events`] → [`reduce`] →
//! [`cluster`] → [`jitter::build_templates`]
//!
//! and the whole recording is then classified by [`peel::peel`], which
//! repeatedly detects events, matches them against jitter-aligned templates
//! and subtracts the accepted ones until only unclassified events remain.
//!
//! [`synth`] generates recordings with known ground truth.

pub mod cluster;
pub mod detect;
mod error;
pub mod events;
pub mod fsutil;
pub mod ingest;
pub mod jitter;
pub mod peel;
pub mod preprocess;
mod recording;
pub mod reduce;
pub mod stats;
pub mod synth;
mod waveform;

pub use error::{Error, Result};
pub use recording::{ChannelScale, Recording, Stage};
pub use waveform::Waveform;
