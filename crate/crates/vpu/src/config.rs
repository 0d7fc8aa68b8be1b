//! The JSON run configuration: training fields at the top level (with nested
//! `model`, `loss`, `encoder` and `adam` blocks) plus a `protocol` block.
//! Missing fields take their defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vpu_core::interact::ProtocolConfig;
use vpu_core::train::TrainConfig;

use crate::error::{AppError, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.protocol.validate()?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| AppError::Invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let c = RunConfig::from_json(r#"{"epochs": 3, "loss": {"lambda": 0}, "model": {"d_model": 32}, "protocol": {"mode": "mixed"}}"#)
            .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.loss.lambda, 0.0);
        assert_eq!(c.train.loss.gamma, 2.0);
        assert_eq!(c.train.model.d_model, 32);
        assert_eq!(c.train.lr, 5e-4);
        assert_eq!(c.protocol.mode, vpu_core::interact::ProtocolMode::Mixed);
        assert_eq!(c.protocol.max_interactions, 20);
    }

    #[test]
    fn round_trips_and_rejects_bad_values() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
        assert_eq!(RunConfig::from_json(r#"{"lr": -1}"#).unwrap_err().exit_code(), 2);
        assert_eq!(RunConfig::from_json("{").unwrap_err().exit_code(), 2);
    }
}
