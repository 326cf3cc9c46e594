use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::TdConfig;
use crate::error::{Error, Result};
use crate::planner::MppiConfig;
use crate::quantizer::{EncodingVariant, FsqConfig};
use crate::worldmodel::WorldModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Exploration std interpolated linearly over episodes, constant after.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSchedule {
    pub start: f64,
    pub end: f64,
    pub episodes: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            start: 1.0,
            end: 0.1,
            episodes: 20,
        }
    }
}

impl NoiseSchedule {
    pub fn at(&self, episode: usize) -> f64 {
        if self.episodes == 0 {
            return self.end;
        }
        let frac = (episode as f64 / self.episodes as f64).min(1.0);
        self.start + (self.end - self.start) * frac
    }
}

/// Every knob of a run. Parsed from TOML; sections may equally be written
/// as dotted keys (`mppi.horizon = 3`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: String,
    pub seed: u64,
    pub episodes: usize,
    pub random_episodes: usize,
    pub batch_size: usize,
    /// Gradient updates per collected driver step.
    pub utd_ratio: f64,
    pub buffer_capacity: usize,
    pub latent_dim: usize,
    pub levels: Vec<usize>,
    pub encoding_variant: EncodingVariant,
    pub precision: Precision,
    pub max_episode_steps: usize,
    pub action_repeat: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Episodes between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    pub symlog_rewards: bool,
    pub world_model: WorldModelConfig,
    pub td: TdConfig,
    pub mppi: MppiConfig,
    pub noise: NoiseSchedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: "pendulum".into(),
            seed: 1,
            episodes: 150,
            random_episodes: 10,
            batch_size: 512,
            utd_ratio: 1.0,
            buffer_capacity: 1_000_000,
            latent_dim: 32,
            levels: vec![5, 3],
            encoding_variant: EncodingVariant::Codes,
            precision: Precision::F32,
            max_episode_steps: 100,
            action_repeat: 2,
            eval_interval: 10,
            eval_episodes: 10,
            checkpoint_interval: 0,
            symlog_rewards: false,
            world_model: WorldModelConfig::default(),
            td: TdConfig::default(),
            mppi: MppiConfig::default(),
            noise: NoiseSchedule::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config always serialises")
    }

    pub fn fsq(&self) -> Result<FsqConfig> {
        FsqConfig::new(&self.levels, self.latent_dim)
    }

    /// Length of the replay windows used by one update.
    pub fn window_len(&self) -> usize {
        self.world_model.horizon.max(self.td.n_step)
    }

    pub fn updates_per_episode(&self) -> usize {
        (self.utd_ratio * self.max_episode_steps as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        crate::envs::make_dynamics(&self.env, self.max_episode_steps, self.action_repeat).map_err(|e| match e {
            Error::UnknownEnv(name) => Error::Config(format!("unknown environment `{name}`")),
            other => other,
        })?;
        self.fsq()?;
        self.td.validate()?;
        self.mppi.validate()?;
        let positive = [
            ("episodes", self.episodes),
            ("batch_size", self.batch_size),
            ("buffer_capacity", self.buffer_capacity),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes),
            ("world_model.horizon", self.world_model.horizon),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        if !(self.utd_ratio > 0.0 && self.utd_ratio.is_finite()) {
            return Err(Error::Config(format!("utd_ratio must be positive, got {}", self.utd_ratio)));
        }
        if self.buffer_capacity <= self.window_len() {
            return Err(Error::Config("buffer_capacity must exceed the replay window length".into()));
        }
        let wm = &self.world_model;
        if !(wm.discount > 0.0 && wm.discount <= 1.0) || !(wm.gumbel_temperature > 0.0) || !(wm.lr > 0.0) || !(wm.encoder_lr > 0.0) {
            return Err(Error::Config("world_model discount in (0, 1], temperature and rates positive".into()));
        }
        if !(self.td.lr > 0.0) || self.noise.start < 0.0 || self.noise.end < 0.0 {
            return Err(Error::Config("td.lr must be positive and noise levels non-negative".into()));
        }
        Ok(())
    }
}
