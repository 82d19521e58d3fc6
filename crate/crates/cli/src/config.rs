//! Experiment configuration files.

use std::path::{Path, PathBuf};

use ncp_core::convhead::{ConvHead, ConvHeadConfig};
use ncp_core::network::Policy;
use ncp_core::params::ModelParams;
use ncp_core::simworld::{DatasetConfig, TrackConfig};
use ncp_core::trainer::TrainConfig;
use ncp_core::wiring::{build_fully_connected, build_ncp, WiringConfig, WiringGraph};
use ncp_core::{Error, ModelKind, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum WiringSpec {
    /// Sparse four-layer circuit, either inline or from a JSON file
    /// relative to the experiment config.
    Ncp {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        file: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        config: Option<WiringConfig>,
    },
    Fully {
        n_neurons: usize,
        n_sensory: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Held-out closed-loop tracks per noise level; themes alternate.
    pub n_episodes: usize,
    pub track: TrackConfig,
    /// Track `k` uses seed `track_seed + k`.
    pub track_seed: u64,
    pub noise_variances: Vec<f64>,
    /// Episode `k` perturbs its frames from stream `noise_seed + k`.
    pub noise_seed: u64,
    pub max_steps: usize,
    pub activity_max_lag: usize,
    pub saliency_frames: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_episodes: 25,
            track: TrackConfig::default(),
            track_seed: 1000,
            noise_variances: vec![0.0, 0.1, 0.2],
            noise_seed: 0,
            max_steps: usize::MAX,
            activity_max_lag: 0,
            saliency_frames: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub model_kind: ModelKind,
    pub wiring: WiringSpec,
    #[serde(default)]
    pub head: ConvHeadConfig,
    /// Initial gain of the affine read-out from the motor neuron.
    #[serde(default = "default_gain")]
    pub output_gain: f64,
    pub init_seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DatasetConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_gain() -> f64 {
    1.0
}

/// Which seed `--seed` replaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedTarget {
    Data,
    Train,
    Eval,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve_files(path.parent().unwrap_or(Path::new(".")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Inlines a wiring file so that the resolved config is self-contained.
    fn resolve_files(&mut self, base: &Path) -> Result<()> {
        if let WiringSpec::Ncp { file, config } = &mut self.wiring {
            match (file.take(), config.is_some()) {
                (Some(f), false) => {
                    let p = base.join(f);
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    *config = Some(serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?);
                }
                (None, true) => {}
                _ => return Err(Error::Config("ncp wiring needs exactly one of `file` and `config`".into())),
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.validate()?;
        self.head.validate()?;
        self.eval.track.validate()?;
        let wiring = self.build_wiring()?;
        if wiring.n_sensory != self.head.n_features {
            return Err(Error::Config(format!(
                "conv head produces {} features but the wiring has {} sensory inputs",
                self.head.n_features, wiring.n_sensory
            )));
        }
        if (self.data.render.height, self.data.render.width) != (self.head.in_height, self.head.in_width) || self.head.in_channels != 3 {
            return Err(Error::Config("conv head input must match the rendered RGB frame size".into()));
        }
        if self.eval.noise_variances.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("noise variances must be non-negative".into()));
        }
        if self.eval.n_episodes == 0 {
            return Err(Error::Config("eval.n_episodes must be positive".into()));
        }
        Ok(())
    }

    pub fn build_wiring(&self) -> Result<WiringGraph> {
        match &self.wiring {
            WiringSpec::Ncp { config: Some(c), .. } => build_ncp(c),
            WiringSpec::Ncp { .. } => Err(Error::Config("ncp wiring config was not resolved".into())),
            WiringSpec::Fully { n_neurons, n_sensory } => build_fully_connected(*n_neurons, *n_sensory),
        }
    }

    pub fn init_policy(&self) -> Result<Policy<f64>> {
        let wiring = self.build_wiring()?;
        let rnn = ModelParams::init(self.model_kind, &wiring, self.init_seed);
        let head = ConvHead::init(self.head.clone(), self.init_seed.wrapping_add(1))?;
        Ok(Policy::new(wiring, rnn, Some(head))?.with_output_gain(self.output_gain))
    }

    pub fn override_seed(&mut self, target: SeedTarget, seed: u64) {
        match target {
            SeedTarget::Data => self.data.seed = seed,
            SeedTarget::Train => self.train.seed = seed,
            SeedTarget::Eval => self.eval.noise_seed = seed,
        }
    }

    /// Every seed the experiment draws from.
    pub fn seeds(&self) -> Vec<(&'static str, u64)> {
        let mut v = vec![
            ("data", self.data.seed),
            ("init", self.init_seed),
            ("train", self.train.seed),
            ("eval_track", self.eval.track_seed),
            ("eval_noise", self.eval.noise_seed),
        ];
        if let WiringSpec::Ncp { config: Some(c), .. } = &self.wiring {
            v.push(("wiring", c.seed));
        }
        v
    }

    pub fn seed_list(&self) -> String {
        self.seeds().iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
    }

    /// SHA-256 of the canonical JSON text of the resolved config.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
