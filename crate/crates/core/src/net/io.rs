//! Self-describing JSON persistence for network parameters.
//!
//! Floats are written in shortest round-trip form and parsed back exactly, so
//! a save/load cycle is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layer, NetworkParams};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed network file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("invalid network: {0}")]
    Invalid(#[from] super::NetError),
}

/// On-disk form of a network: layer specs, row-major weights, biases, version and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedNetwork {
    pub format_version: u32,
    pub training_seed: u64,
    pub layers: Vec<Layer>,
}

impl SavedNetwork {
    pub fn new(params: &NetworkParams, training_seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            training_seed,
            layers: params.layers().to_vec(),
        }
    }

    /// Validates the version and shapes and returns the parameters.
    pub fn into_params(self) -> Result<NetworkParams, IoError> {
        if self.format_version != FORMAT_VERSION {
            return Err(IoError::Version {
                found: self.format_version,
            });
        }
        Ok(NetworkParams::from_layers(self.layers)?)
    }
}

pub fn to_json(params: &NetworkParams, training_seed: u64) -> String {
    serde_json::to_string(&SavedNetwork::new(params, training_seed))
        .expect("network serialization cannot fail")
}

/// Parses a network file, returning the parameters and training seed.
pub fn from_json(text: &str) -> Result<(NetworkParams, u64), IoError> {
    let saved: SavedNetwork = serde_json::from_str(text)?;
    let seed = saved.training_seed;
    Ok((saved.into_params()?, seed))
}

pub fn save(path: &Path, params: &NetworkParams, training_seed: u64) -> Result<(), IoError> {
    fs::write(path, to_json(params, training_seed)).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<(NetworkParams, u64), IoError> {
    let text = fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::super::{default_architecture, Activation, LayerSpec};
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let net = NetworkParams::init(&default_architecture(), 42).unwrap();
        save(&path, &net, 42).unwrap();
        let (back, seed) = load(&path).unwrap();
        assert_eq!(seed, 42);
        assert_eq!(back, net);
    }

    #[test]
    fn rejects_foreign_versions_and_bad_shapes() {
        let net = NetworkParams::init(&default_architecture()[3..], 1).unwrap();
        let mut saved = SavedNetwork::new(&net, 1);
        saved.format_version = 99;
        let text = serde_json::to_string(&saved).unwrap();
        assert!(matches!(from_json(&text), Err(IoError::Version { found: 99 })));

        let mut saved = SavedNetwork::new(&net, 1);
        saved.layers[0].weights.pop();
        let text = serde_json::to_string(&saved).unwrap();
        assert!(matches!(from_json(&text), Err(IoError::Invalid(_))));
    }

    proptest! {
        #[test]
        fn json_round_trip_is_bit_exact(
            weights in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 6),
            biases in proptest::collection::vec(-1e6f64..1e6, 2),
            seed in any::<u64>(),
        ) {
            let layer = Layer {
                spec: LayerSpec::new(3, 2, Activation::Relu),
                weights,
                biases,
            };
            let net = NetworkParams::from_layers(vec![layer]).unwrap();
            let (back, s) = from_json(&to_json(&net, seed)).unwrap();
            prop_assert_eq!(s, seed);
            for (a, b) in net.layers()[0].weights.iter().chain(&net.layers()[0].biases)
                .zip(back.layers()[0].weights.iter().chain(&back.layers()[0].biases)) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
