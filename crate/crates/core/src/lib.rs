//! Monte Carlo relevance propagation.
//!
//! The engine runs a network many times under independent dropout masks, pushes each
//! prediction back to the input with the z+ relevance rule using the *same* mask, and
//! summarises the resulting per-pixel relevance samples as mean, standard deviation,
//! signal-to-noise (`mean / sigma`) and confusion (`mean * sigma`) maps.

pub mod fixtures;
pub mod heatmap;
pub mod mcrp;
pub mod model;
pub mod relprop;
pub mod tensor;

pub use mcrp::{run_mcrp, McrpError, McrpRun, RelevanceSample, SamplingConfig, UncertaintyMaps};
pub use model::{
    forward, load_model, predict_deterministic, sample_mask, DropoutMask, ForwardTrace, Layer, LayerKind,
    LayerSpec, ModelError, ModelGraph,
};
pub use relprop::{relevance_pass, RelevanceSeed, RelevanceTrace, SeedMode};
pub use tensor::{Tensor, TensorError};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Lowercase hex of a digest.
pub fn hex_digest(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes
        .iter()
        .fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// SHA-256 of `bytes`, hex encoded.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex_digest(&Sha256::digest(bytes))
}
