//! JSON run configuration shared by training, decoding and evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::trainer::{LossWeights, ModelConfig, ScheduleConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    /// Weight of the transducer loss on labeled pretraining batches.
    pub alpha: f64,
    pub seed: u64,
    /// Batch packing cap on summed T x (U + 1).
    pub batch_cap: usize,
    /// Streaming attention chunk size (in latent frames) for fine-tuning
    /// and streaming decoding.
    pub chunk_size: usize,
    pub left_chunks: usize,
    pub max_symbols_per_frame: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeled_manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unlabeled_manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_manifest: Option<PathBuf>,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub validate_every: usize,
}

fn default_log_every() -> usize {
    1
}

impl RunConfig {
    /// Small model suitable for the synthetic corpora and for CI budgets.
    pub fn toy(vocab_size: usize) -> Self {
        RunConfig {
            model: ModelConfig::toy(vocab_size),
            schedule: ScheduleConfig {
                k: 5.0,
                warmup: 200,
                total_steps: 1000,
                d_model: crate::encoder::EncoderConfig::toy().d_model,
            },
            alpha: 0.5,
            seed: 1234,
            batch_cap: 4096,
            chunk_size: 4,
            left_chunks: 1,
            max_symbols_per_frame: 4,
            labeled_manifest: None,
            unlabeled_manifest: None,
            valid_manifest: None,
            log_every: 1,
            validate_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        LossWeights::new(self.alpha)?;
        if self.schedule.d_model != self.model.encoder.d_model {
            return Err(Error::Config(
                "schedule d_model disagrees with the encoder".into(),
            ));
        }
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be positive".into()));
        }
        if self.batch_cap == 0 {
            return Err(Error::Config("batch_cap must be positive".into()));
        }
        if self.max_symbols_per_frame == 0 {
            return Err(Error::Config("max_symbols_per_frame must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}
