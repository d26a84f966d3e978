//! Context-aware fairness evaluation for tabular income prediction.
//!
//! Data loading and cleaning, feature encoding, vanilla and fairness-aware
//! logistic models, group error-rate metrics, MMD between contexts, the
//! local/global deployment harness and synthetic data generation.

pub mod data;
pub mod encode;
pub mod harness;
pub mod metrics;
pub mod mmd;
pub mod optim;
pub mod pipeline;
pub mod synth;
pub mod trainer;

use sha2::{Digest, Sha256};

/// Derives an independent 64-bit seed from a base seed and a label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Fixed float formatting for CSV artifacts: 17 significant digits, which
/// round-trips every `f64` exactly.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn parse_float(s: &str) -> Option<f64> {
    s.trim().parse().ok()
}
