//! Run configuration: one JSON document that fully determines a training
//! run (architecture, cluster layout, losses, optimizer, data, seed).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{ClusterConfig, RadiusSpec};
use crate::losses::LossWeights;
use crate::model::SaeConfig;
use crate::optim::OptimizerKind;
use crate::textures::DataConfig;

/// Cluster layout parameters; the class count comes from the model config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    #[serde(default = "default_d_c")]
    pub d_c: f64,
    #[serde(default = "default_r_c")]
    pub r_c: RadiusField,
    #[serde(default = "default_b_c")]
    pub b_c: f64,
    #[serde(default)]
    pub phase0: f64,
}

/// Scalar radius or one per cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RadiusField {
    Uniform(f64),
    PerCluster(Vec<f64>),
}

fn default_d_c() -> f64 {
    0.85
}
fn default_r_c() -> RadiusField {
    RadiusField::Uniform(0.34)
}
fn default_b_c() -> f64 {
    0.79
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            d_c: default_d_c(),
            r_c: default_r_c(),
            b_c: default_b_c(),
            phase0: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default = "default_kind")]
    pub kind: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_kind() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    5
}
// The geometric loss sums over the batch while cross-entropy averages, so
// the batch size sets their balance; 8 keeps the classification signal
// alive next to k_g = 0.2.
fn default_batch_size() -> usize {
    8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: default_kind(),
            lr: default_lr(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "desk_sae")]
    pub sae: SaeConfig,
    #[serde(default)]
    pub clusters: ClusterParams,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn desk_sae() -> SaeConfig {
    SaeConfig { width_scale: 0.25, ..SaeConfig::default() }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            sae: desk_sae(),
            clusters: ClusterParams::default(),
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            data: DataConfig::default(),
            seed: 0,
            output_dir: default_output_dir(),
        }
    }
}

impl RunConfig {
    /// The desk-scale profile: quarter-width model on 32x32 inputs, the
    /// reference cluster layout, Adam at 1e-3, batch 64.
    pub fn desk_default() -> Self {
        RunConfig::default()
    }

    pub fn validate(&self) -> Result<()> {
        self.sae.validate()?;
        self.data.split.validate()?;
        self.cluster_config()?;
        Ok(())
    }

    /// Materialize the cluster layout for this run.
    pub fn cluster_config(&self) -> Result<ClusterConfig> {
        let radius = match &self.clusters.r_c {
            RadiusField::Uniform(r) => RadiusSpec::Uniform(*r),
            RadiusField::PerCluster(v) => RadiusSpec::PerCluster(v.clone()),
        };
        ClusterConfig::circular_nd(
            self.sae.n_classes,
            self.clusters.d_c,
            radius,
            self.clusters.b_c,
            self.clusters.phase0,
            self.sae.latent_dims,
        )
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_form_a_valid_run() {
        let config = RunConfig::desk_default();
        config.validate().unwrap();
        let clusters = config.cluster_config().unwrap();
        assert_eq!(clusters.n_classes(), 5);
        assert!((clusters.center_distance() - 0.85).abs() < 1e-15);
        assert_eq!(config.sae.stage_channels(), [16, 32, 64, 128, 128]);
    }

    #[test]
    fn empty_json_parses_to_defaults() {
        let config: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(config, RunConfig::desk_default());
    }

    #[test]
    fn json_round_trip() {
        let config = RunConfig::desk_default();
        let text = serde_json::to_string_pretty(&config).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn per_cluster_radius_field() {
        let json = r#"{"clusters": {"d_c": 0.85, "r_c": [0.3, 0.3, 0.3, 0.3, 0.2], "b_c": 0.79}}"#;
        let config: RunConfig = serde_json::from_str(json).unwrap();
        let clusters = config.cluster_config().unwrap();
        assert_eq!(clusters.radii(), &[0.3, 0.3, 0.3, 0.3, 0.2]);
    }
}
