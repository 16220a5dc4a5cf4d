use std::path::{Path, PathBuf};

use adseal::encoder::EncoderConfig;
use adseal::evaluation::{AlsConfig, SyntheticSpec};
use adseal::privacy::{PrivacyMode, Topology, DEFAULT_CLOUD_INTERCEPT_RATE, DEFAULT_REPLAYS};
use adseal::recommender::{TagConfig, TrainConfig};
use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

/// One TOML document holding every knob of a run. Missing keys take the
/// defaults below; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives every seeded component. Sub-section seeds are overwritten with it.
    pub seed: u64,
    /// Slate size for evaluation and rankings.
    pub k: usize,
    /// Directory for all artifacts.
    pub out: PathBuf,
    pub synthetic: SyntheticSpec,
    pub encoder: EncoderConfig,
    pub training: TrainConfig,
    pub tags: TagConfig,
    pub als: AlsConfig,
    pub privacy: PrivacyConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrivacyConfig {
    pub mode: Topology,
    pub intercept_rate: f64,
    /// Monte-Carlo replays for the leakage probability.
    pub replays: usize,
    /// Federated rounds run by `train`.
    pub rounds: u64,
    /// Adam step size of each client's local training; local mode only.
    pub client_lr: f64,
    /// Weight client deltas by example count.
    pub weighted: bool,
    /// Clients that attempt a raw upload during local training.
    pub misbehaving: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            k: 1,
            out: PathBuf::from("out"),
            synthetic: SyntheticSpec::default(),
            encoder: EncoderConfig::default(),
            training: TrainConfig::default(),
            tags: TagConfig::default(),
            als: AlsConfig::default(),
            privacy: PrivacyConfig::default(),
        }
    }
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            mode: Topology::Local,
            intercept_rate: DEFAULT_CLOUD_INTERCEPT_RATE,
            replays: DEFAULT_REPLAYS,
            rounds: 1,
            client_lr: 0.05,
            weighted: false,
            misbehaving: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Topology>,
    pub out: Option<PathBuf>,
    pub k: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> anyhow::Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(mode) = overrides.mode {
            config.privacy.mode = mode;
        }
        if let Some(out) = &overrides.out {
            config.out = out.clone();
        }
        if let Some(k) = overrides.k {
            config.k = k;
        }
        config.synthetic.seed = config.seed;
        config.training.seed = config.seed;
        config.als.seed = config.seed;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.k == 0 {
            bail!("k must be positive");
        }
        if self.privacy.rounds == 0 {
            bail!("privacy.rounds must be positive");
        }
        if !(self.privacy.client_lr > 0.0) {
            bail!("privacy.client_lr must be positive");
        }
        if self.training.epochs == 0 || self.training.batch_size == 0 {
            bail!("training.epochs and training.batch_size must be positive");
        }
        self.synthetic.validate()?;
        self.encoder.validate()?;
        self.privacy_mode().validate()?;
        Ok(())
    }

    /// Training settings for the configured topology.
    pub fn round_training(&self) -> TrainConfig {
        match self.privacy.mode {
            Topology::Local => TrainConfig { lr: self.privacy.client_lr, ..self.training },
            Topology::Cloud => self.training,
        }
    }

    pub fn privacy_mode(&self) -> PrivacyMode {
        PrivacyMode { topology: self.privacy.mode, adversary_intercept_rate: self.privacy.intercept_rate }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[training]\nepoch = 3").is_err());
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 3\nk = 2\n[privacy]\nmode = \"cloud\"\n").unwrap();
        let c = RunConfig::load(Some(&path), &Overrides { seed: Some(9), ..Overrides::default() }).unwrap();
        assert_eq!((c.seed, c.k, c.privacy.mode), (9, 2, Topology::Cloud));
        assert_eq!((c.synthetic.seed, c.training.seed, c.als.seed), (9, 9, 9));
    }
}
