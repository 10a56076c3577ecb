use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::data::{SyntheticCorpusConfig, TimestampFormat};
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::scm::ScmConfig;
use crate::simulator::WorldConfig;
use crate::sr::SrConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    /// Slate logs from the simulated world's random logging policy.
    #[default]
    Simulator,
    /// Generated click corpus turned into slates.
    Synthetic,
    /// A `session_id,item_id,timestamp` CSV turned into slates.
    ClickLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub synthetic: SyntheticCorpusConfig,
    pub click_log: Option<PathBuf>,
    pub timestamp_format: TimestampFormat,
    pub top_items: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Train, validation and test fractions of the chronological split.
    pub split: [f64; 3],
    pub slate_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Simulator,
            synthetic: SyntheticCorpusConfig::default(),
            click_log: None,
            timestamp_format: TimestampFormat::Epoch,
            top_items: 10_000,
            min_len: 3,
            max_len: 10,
            split: [0.8, 0.1, 0.1],
            slate_size: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulatorConfig {
    pub world: WorldConfig,
    pub logged_sessions: usize,
    /// Logged sessions held out for validation and offline testing.
    pub heldout_sessions: usize,
    pub eval_sessions: usize,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig {
            world: WorldConfig::default(),
            logged_sessions: 1000,
            heldout_sessions: 400,
            eval_sessions: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    /// Guidance weights tried on validation sessions; empty keeps
    /// `augment.guidance`.
    pub guidance_grid: Vec<f64>,
    pub guidance_valid_sessions: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 5,
            guidance_grid: vec![0.0, 2.0, 4.0, 6.0],
            guidance_valid_sessions: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub simulator: SimulatorConfig,
    pub sr: SrConfig,
    pub diffusion: DiffusionConfig,
    pub scm: ScmConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            simulator: SimulatorConfig::default(),
            sr: SrConfig::default(),
            diffusion: DiffusionConfig::default(),
            scm: ScmConfig::default(),
            augment: AugmentConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_sections().map_err(|e| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        })
    }

    fn validate_sections(&self) -> Result<()> {
        self.sr.validate()?;
        self.diffusion.validate()?;
        self.scm.validate()?;
        self.augment.validate()?;
        if self.eval.k == 0 {
            return Err(Error::Config("eval.k must be positive".into()));
        }
        if self.eval.guidance_grid.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("guidance grid entries must be non-negative".into()));
        }
        let d = &self.data;
        match d.source {
            DataSource::Simulator => {
                self.simulator.world.validate()?;
                let s = &self.simulator;
                if s.logged_sessions == 0 || s.heldout_sessions < 2 || s.eval_sessions == 0 {
                    return Err(Error::Config(
                        "simulator needs logged and eval sessions and at least 2 held-out sessions".into(),
                    ));
                }
            }
            DataSource::Synthetic => d.synthetic.validate()?,
            DataSource::ClickLog => {
                if d.click_log.is_none() {
                    return Err(Error::Config("data.click_log is required for the click-log source".into()));
                }
            }
        }
        if d.source != DataSource::Simulator {
            if d.split.iter().any(|f| !(*f > 0.0)) || (d.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config("data.split must be positive and sum to 1".into()));
            }
            if d.slate_size < 2 || d.top_items == 0 || d.min_len == 0 || d.min_len > d.max_len {
                return Err(Error::Config("data slate size or length filter invalid".into()));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring where outputs go.
    pub fn fingerprint(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn slate_size(&self) -> usize {
        match self.data.source {
            DataSource::Simulator => self.simulator.world.slate_size,
            _ => self.data.slate_size,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&json).unwrap(), cfg);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"seed": 4, "sr": {"dim": 8, "adam": {"lr": 0.01}}}"#).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.sr.dim, 8);
        assert_eq!(cfg.sr.adam.lr, 0.01);
        assert_eq!(cfg.sr.adam.beta1, 0.9);
        assert_eq!(cfg.diffusion, DiffusionConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        for doc in [r#"{"sedd": 1}"#, r#"{"sr": {"dims": 8}}"#, r#"{"eval": {"k": 5, "x": 1}}"#] {
            assert!(matches!(ExperimentConfig::from_json(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn invalid_sections_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"eval": {"k": 0}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"data": {"source": "click-log"}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"augment": {"min_len": 1}}"#).is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seed = 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }
}
