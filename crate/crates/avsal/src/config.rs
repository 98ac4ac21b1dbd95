//! Top-level JSON configuration tying model, data, and training together.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;
use std::path::Path;

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

impl HarnessConfig {
    /// The desk-scale preset: paper-shaped architecture at small widths,
    /// runnable end to end on a laptop CPU.
    pub fn desk() -> HarnessConfig {
        HarnessConfig {
            model: ModelConfig::desk(),
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<HarnessConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: HarnessConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Force geometry agreement between the synthetic data and the model,
    /// then validate everything.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        self.train.validate()?;
        if self.model.frames != self.synth.frames
            || self.model.height != self.synth.height
            || self.model.width != self.synth.width
        {
            return Err(Error::Config(format!(
                "model geometry {}x{}x{} disagrees with synthetic data {}x{}x{}",
                self.model.frames,
                self.model.height,
                self.model.width,
                self.synth.frames,
                self.synth.height,
                self.synth.width
            )));
        }
        Ok(())
    }

    /// Override every seed from one CLI-level value.
    pub fn override_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.train.seed = seed;
    }
}
