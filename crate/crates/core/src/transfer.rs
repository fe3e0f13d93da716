//! Network-based transfer: copy source parameters, freeze leading hidden
//! layers, fine-tune on target data, and average fine-tuned models per cluster.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::features::{FeatureRow, Scaler};
use crate::net::io::SavedNetwork;
use crate::net::{default_architecture, train, Dataset, FrozenMask, LayerSpec, NetError, NetworkParams, TrainHistory, TrainSpec};
use crate::similarity::{ClusterAssignment, Dimension, Level};

#[derive(Debug, thiserror::Error)]
pub enum TransferError {
    #[error("architecture mismatch at layer {layer}: source {source_spec}, target {target_spec}")]
    Architecture {
        layer: usize,
        source_spec: String,
        target_spec: String,
    },
    #[error("source has {source_layers} layers, target architecture has {target_layers}")]
    Depth { source_layers: usize, target_layers: usize },
    #[error("ensemble has no members")]
    EmptyEnsemble,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] crate::net::io::IoError),
}

/// Freezing configuration: how many leading hidden layers keep their source values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferConfig {
    Config1,
    Config2,
    Config3,
}

impl TransferConfig {
    pub const ALL: [TransferConfig; 3] = [TransferConfig::Config1, TransferConfig::Config2, TransferConfig::Config3];

    pub fn frozen_layers(self) -> usize {
        match self {
            TransferConfig::Config1 => 0,
            TransferConfig::Config2 => 1,
            TransferConfig::Config3 => 2,
        }
    }

    pub fn mask(self, num_layers: usize) -> FrozenMask {
        FrozenMask::leading(num_layers, self.frozen_layers().min(num_layers.saturating_sub(1)))
    }

    pub fn name(self) -> &'static str {
        match self {
            TransferConfig::Config1 => "config1",
            TransferConfig::Config2 => "config2",
            TransferConfig::Config3 => "config3",
        }
    }
}

impl fmt::Display for TransferConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TransferConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown transfer config {s:?}"))
    }
}

/// Copies `source` for fine-tuning against `architecture` and returns the config's mask.
pub fn transfer_init_with(
    source: &NetworkParams,
    architecture: &[LayerSpec],
    config: TransferConfig,
) -> Result<(NetworkParams, FrozenMask), TransferError> {
    let specs = source.specs();
    if specs.len() != architecture.len() {
        return Err(TransferError::Depth {
            source_layers: specs.len(),
            target_layers: architecture.len(),
        });
    }
    for (layer, (s, t)) in specs.iter().zip(architecture).enumerate() {
        if s != t {
            return Err(TransferError::Architecture {
                layer,
                source_spec: format!("{s:?}"),
                target_spec: format!("{t:?}"),
            });
        }
    }
    Ok((source.clone(), config.mask(specs.len())))
}

/// [`transfer_init_with`] against the default 26-256-128-64-1 architecture.
pub fn transfer_init(source: &NetworkParams, config: TransferConfig) -> Result<(NetworkParams, FrozenMask), TransferError> {
    transfer_init_with(source, &default_architecture(), config)
}

pub fn fine_tune(
    source: &NetworkParams,
    config: TransferConfig,
    train_set: &Dataset,
    validation_set: &Dataset,
    spec: &TrainSpec,
) -> Result<(NetworkParams, TrainHistory), TransferError> {
    let (init, mask) = transfer_init_with(source, &source.specs(), config)?;
    Ok(train(&init, train_set, validation_set, spec, &mask)?)
}

/// Member predictions in original units, each through its own scaler.
pub fn member_predictions(
    members: &[(&NetworkParams, &Scaler)],
    rows: &[FeatureRow],
) -> Result<Vec<Vec<f64>>, TransferError> {
    members
        .iter()
        .map(|(net, scaler)| {
            let data = scaler.dataset(rows);
            Ok(net
                .predict(&data.x)?
                .into_iter()
                .map(|p| scaler.invert_target(p))
                .collect())
        })
        .collect()
}

/// Arithmetic mean of member predictions in original units.
pub fn ensemble_predict(members: &[(&NetworkParams, &Scaler)], rows: &[FeatureRow]) -> Result<Vec<f64>, TransferError> {
    let preds = member_predictions(members, rows)?;
    average(&preds)
}

pub fn average(preds: &[Vec<f64>]) -> Result<Vec<f64>, TransferError> {
    let first = preds.first().ok_or(TransferError::EmptyEnsemble)?;
    let k = preds.len() as f64;
    Ok((0..first.len())
        .map(|i| preds.iter().map(|p| p[i]).sum::<f64>() / k)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    /// `None` for the ensemble of every source.
    pub dimension: Option<Dimension>,
    pub level: Option<Level>,
    pub members: Vec<String>,
    pub config: TransferConfig,
}

impl EnsembleSpec {
    pub fn id(&self) -> String {
        match (self.dimension, self.level) {
            (Some(d), Some(l)) => format!("ens_{d}_{l}"),
            _ => "ens_all".to_string(),
        }
    }
}

/// One ensemble per populated (dimension, level) cluster plus one over all sources.
pub fn build_ensembles(assignments: &[ClusterAssignment], config: TransferConfig) -> Vec<EnsembleSpec> {
    let mut out = Vec::new();
    for dim in Dimension::ALL {
        for level in Level::ALL {
            let members: Vec<String> = assignments
                .iter()
                .filter(|a| a.level(dim) == level)
                .map(|a| a.product_id.clone())
                .collect();
            if members.is_empty() {
                log::warn!("no sources in cluster {dim}/{level}; ensemble omitted");
                continue;
            }
            out.push(EnsembleSpec {
                dimension: Some(dim),
                level: Some(level),
                members,
                config,
            });
        }
    }
    out.push(EnsembleSpec {
        dimension: None,
        level: None,
        members: assignments.iter().map(|a| a.product_id.clone()).collect(),
        config,
    });
    out
}

/// A trained network with the scaler it expects and where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub product_id: String,
    /// Product whose parameters initialised this model, if any.
    pub source_product: Option<String>,
    pub config: Option<TransferConfig>,
    pub seed: u64,
    /// Inclusive introduction-relative week range the model was trained on.
    pub train_weeks: (i64, i64),
    pub scaler: Scaler,
    pub network: SavedNetwork,
    pub history: TrainHistory,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

impl ModelBundle {
    pub fn params(&self) -> Result<NetworkParams, TransferError> {
        Ok(self.network.clone().into_params()?)
    }

    pub fn save(&self, path: &Path) -> Result<(), std::io::Error> {
        let text = serde_json::to_string(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text)
    }

    pub fn load(path: &Path) -> Result<Self, std::io::Error> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }
}
