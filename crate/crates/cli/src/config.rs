//! TOML run configuration. Every key is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use aqgroup::graph::DistanceMetric;
use aqgroup::{ModelConfig, TrainConfig, Variant};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Model hyperparameters; the city count comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_groups: usize,
    pub d_hidden: usize,
    pub d_ffn: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub gnn_layers: usize,
    pub d_edge: usize,
    pub time_dims: [usize; 3],
    pub tau_in: usize,
    pub tau_out: usize,
    pub radius_km: f64,
    pub distance: DistanceMetric,
    pub logit_init_std: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ModelConfig::new(0);
        Self {
            n_groups: c.n_groups,
            d_hidden: c.d_hidden,
            d_ffn: c.d_ffn,
            heads: c.heads,
            encoder_blocks: c.encoder_blocks,
            gnn_layers: c.gnn_layers,
            d_edge: c.d_edge,
            time_dims: c.time_dims,
            tau_in: c.tau_in,
            tau_out: c.tau_out,
            radius_km: c.radius_km,
            distance: c.distance,
            logit_init_std: c.logit_init_std,
        }
    }
}

impl ModelSection {
    pub fn to_config(&self, n_cities: usize, variant: Variant, seed: u64) -> ModelConfig {
        ModelConfig {
            n_cities,
            n_groups: self.n_groups,
            d_hidden: self.d_hidden,
            d_ffn: self.d_ffn,
            heads: self.heads,
            encoder_blocks: self.encoder_blocks,
            gnn_layers: self.gnn_layers,
            d_edge: self.d_edge,
            time_dims: self.time_dims,
            tau_in: self.tau_in,
            tau_out: self.tau_out,
            radius_km: self.radius_km,
            distance: self.distance,
            logit_init_std: self.logit_init_std,
            variant,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub variant: Variant,
    pub seeds: Vec<u64>,
    /// Stride between consecutive windows, in hours.
    pub window_step: usize,
    pub precision: Precision,
    pub model: ModelSection,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            out: None,
            variant: Variant::Full,
            seeds: vec![0],
            window_step: 1,
            precision: Precision::F64,
            model: ModelSection::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.data_dir
            .as_deref()
            .context("no data directory given (use --data-dir or `data_dir` in the config)")
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().context("no output directory given (use --out or `out` in the config)")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let text = toml::to_string(&RunConfig::default()).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, RunConfig::default());
        assert_eq!(back.train.epochs, 300);
        assert_eq!(back.train.batch_size, 64);
        assert_eq!(back.model.n_groups, 15);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig = toml::from_str("variant = \"fga\"\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(c.variant, Variant::Fga);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.lr_logits, 0.05);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("bogus = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[model]\nwidth = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nlr = 3\n").is_err());
    }
}
