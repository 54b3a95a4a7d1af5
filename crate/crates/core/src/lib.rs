//! Source-camera identification of electronically stabilized video by PRNU
//! fingerprint matching, with per-frame inversion of the stabilizing warp.

pub mod batcheval;
pub mod error;
pub mod features;
pub mod imagecore;
pub mod inversion;
pub mod prnu;
pub mod registry;
pub mod selector;
pub mod synth;
pub mod warp;

pub use error::{Error, Result};
