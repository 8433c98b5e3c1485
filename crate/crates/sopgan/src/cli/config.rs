//! One JSON document configures a whole run. Missing keys fall back to
//! the defaults below, so a config file only needs the fields it changes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::ScoreConfig;
use crate::dsp::{ChannelId, StftConfig, WindowPlan};
use crate::error::{Error, Result};
use crate::gan::TrainConfig;
use crate::seed;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed. Every stochastic stage derives its own stream from it,
    /// so sub-config seeds in the file are overridden at resolution time.
    pub seed: u64,
    /// Channels used for training and scoring (any non-empty subset of
    /// s1/s2/s3, also applied to the synthesizer).
    pub channels: Vec<ChannelId>,
    /// Samples per analysis window.
    pub window_len: usize,
    /// Optional streaming hop in samples; windows tile back to back
    /// when absent.
    pub window_hop: Option<usize>,
    pub stft: StftConfig,
    pub latent_dim: usize,
    pub base_channels: usize,
    pub train: TrainConfig,
    pub score: ScoreConfig,
    /// Calibration percentile for the detection threshold, in (0, 100].
    pub threshold_percentile: f64,
    /// Per-window pixel percentile for localization masks, in (0, 100).
    pub localize_percentile: f64,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            channels: vec![ChannelId::S1, ChannelId::S2, ChannelId::S3],
            window_len: 2000,
            window_hop: None,
            stft: StftConfig::default(),
            latent_dim: 16,
            base_channels: 16,
            train: TrainConfig::default(),
            score: ScoreConfig::default(),
            threshold_percentile: 99.0,
            localize_percentile: 98.0,
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("{}: {e}", path.display()))
        })?;
        Ok(cfg)
    }

    /// Propagates the root seed and shared window geometry into the
    /// embedded configs. Call once before using any of them.
    pub fn resolve(&mut self) {
        self.synth.seed = seed::derive(self.seed, "synth", 0);
        self.train.seed = seed::derive(self.seed, "train", 0);
        self.score.seed = seed::derive(self.seed, "score", 0);
        self.synth.window_len = self.window_len;
        self.synth.channels = self.channels.clone();
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("channel selection must not be empty".into()));
        }
        for (i, c) in self.channels.iter().enumerate() {
            if self.channels[..i].contains(c) {
                return Err(Error::Config(format!("channel {c} selected twice")));
            }
        }
        if self.window_len == 0 {
            return Err(Error::Config("window_len must be positive".into()));
        }
        if self.window_hop == Some(0) {
            return Err(Error::Config("window_hop must be positive".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if !(self.threshold_percentile > 0.0 && self.threshold_percentile <= 100.0) {
            return Err(Error::Config(format!(
                "threshold_percentile must lie in (0, 100], got {}",
                self.threshold_percentile
            )));
        }
        if !(self.localize_percentile > 0.0 && self.localize_percentile < 100.0) {
            return Err(Error::Config(format!(
                "localize_percentile must lie in (0, 100), got {}",
                self.localize_percentile
            )));
        }
        self.stft.validate()?;
        self.train.validate()?;
        self.score.validate()?;
        self.synth.validate()?;
        Ok(())
    }

    pub fn window_plan(&self) -> Result<WindowPlan> {
        match self.window_hop {
            Some(hop) => WindowPlan::streaming(self.window_len, hop),
            None => WindowPlan::training(self.window_len),
        }
    }

    /// Image shape the model trains on: selected channels × output grid.
    pub fn image_shape(&self) -> [usize; 3] {
        [
            self.channels.len(),
            self.stft.out_height,
            self.stft.out_width,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let mut cfg = RunConfig::default();
        cfg.resolve();
        cfg.validate().unwrap();
        assert_eq!(cfg.image_shape(), [3, 64, 64]);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"seed": 11, "channels": ["s1"]}"#).unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.channels, vec![ChannelId::S1]);
        assert_eq!(cfg.window_len, 2000);
        assert_eq!(cfg.stft.fft_size, StftConfig::default().fft_size);
    }

    #[test]
    fn nested_partial_json_fills_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"train": {"epochs": 3}, "score": {"restarts": 2}}"#)
                .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.score.restarts, 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"sede": 11}"#);
        assert!(err.is_err());
    }

    #[test]
    fn resolve_derives_distinct_module_seeds() {
        let mut cfg = RunConfig::default();
        cfg.resolve();
        assert_ne!(cfg.synth.seed, cfg.train.seed);
        assert_ne!(cfg.train.seed, cfg.score.seed);
        let mut again = RunConfig::default();
        again.resolve();
        assert_eq!(cfg.synth.seed, again.synth.seed);
    }

    #[test]
    fn resolve_propagates_geometry_to_synth() {
        let mut cfg = RunConfig {
            window_len: 1500,
            channels: vec![ChannelId::S2],
            ..RunConfig::default()
        };
        cfg.synth.burst_onset_range = (100, 600);
        cfg.resolve();
        assert_eq!(cfg.synth.window_len, 1500);
        assert_eq!(cfg.synth.channels, vec![ChannelId::S2]);
        cfg.validate().unwrap();
        assert_eq!(cfg.image_shape()[0], 1);
    }

    #[test]
    fn duplicate_channels_rejected() {
        let cfg = RunConfig {
            channels: vec![ChannelId::S1, ChannelId::S1],
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let mut cfg = RunConfig::default();
        cfg.seed = 99;
        std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(loaded.seed, 99);
        assert_eq!(loaded.threshold_percentile, cfg.threshold_percentile);
    }

    #[test]
    fn malformed_json_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
    }
}
