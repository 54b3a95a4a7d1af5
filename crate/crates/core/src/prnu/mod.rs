//! Noise residuals, reference fingerprints and the NCC/PCE statistics.

pub mod correlation;
pub mod fingerprint;
pub mod wavelet;

pub use correlation::{ncc, pce, CorrelationPlane, PceReport, PreparedFingerprint, ShiftPolicy};
pub use fingerprint::{build_fingerprint, Adaptation, Fingerprint, FingerprintAccumulator, Sidecar};
pub use wavelet::{denoise, residual, DEFAULT_SIGMA0_SQ};
