//! Device-free human presence detection from WiFi channel state information.
//!
//! The crate covers the whole chain: synthetic MIMO-OFDM CSI
//! ([`synth`]), window assembly and validity filtering ([`csi`]), the
//! magnitude/phase image pre-processing ([`preprocess`], with per-frame
//! feature caching for stride-1 windows in [`sliding`]), a small CNN engine
//! with a two-branch classifier ([`nn`]), dataset and training orchestration
//! ([`pipeline`]) and the per-second online detector ([`detector`]).

pub mod csi;
pub mod detector;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod sliding;
pub mod synth;

pub use csi::{CsiFrame, CsiWindow, Label, StreamHeader, WindowConfig};
