//! Run configuration: every module's settings plus ablation switches, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::affordance::AffordanceConfig;
use crate::data::{CollectConfig, PolicySpec};
use crate::error::{Error, Result};
use crate::novelty::NoveltyConfig;
use crate::offline_rl::IqlConfig;
use crate::recovery::RecoveryConfig;
use crate::representation::RepresentationConfig;
use crate::sim::SimConfig;

/// Which recovery components are active at deployment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub use_affordance: bool,
    pub use_rnn: bool,
    pub use_rnd: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

impl Ablation {
    pub const FULL: Self = Self {
        use_affordance: true,
        use_rnn: true,
        use_rnd: true,
    };
    pub const NO_RND: Self = Self {
        use_rnd: false,
        ..Self::FULL
    };
    pub const NO_RNN: Self = Self {
        use_rnn: false,
        ..Self::FULL
    };
    pub const NO_RNN_NO_RND: Self = Self {
        use_affordance: true,
        use_rnn: false,
        use_rnd: false,
    };
    pub const NO_AFFORDANCE: Self = Self {
        use_affordance: false,
        use_rnn: false,
        use_rnd: false,
    };

    pub fn validate(&self) -> Result<()> {
        if !self.use_affordance && (self.use_rnn || self.use_rnd) {
            return Err(Error::Config(
                "use_rnn and use_rnd require use_affordance".into(),
            ));
        }
        Ok(())
    }

    pub fn label(&self) -> &'static str {
        match (self.use_affordance, self.use_rnn, self.use_rnd) {
            (false, _, _) => "no-affordance",
            (true, true, true) => "full",
            (true, true, false) => "no-rnd",
            (true, false, true) => "no-rnn",
            (true, false, false) => "no-rnn-no-rnd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub scenario: String,
    pub episodes: usize,
    pub policy: PolicySpec,
    pub collect: CollectConfig,
    /// The map is built from its own, smaller set of clean traversals.
    pub map_episodes: usize,
    pub map_policy: PolicySpec,
    pub map_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenario: "corridor-easy".into(),
            episodes: 240,
            policy: PolicySpec::Mixed { collision_fraction: 0.15 },
            collect: CollectConfig::default(),
            map_episodes: 20,
            map_policy: PolicySpec::NoisyWaypointFollower,
            map_seed: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    pub node_stride: usize,
    pub edge_threshold: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            node_stride: 5,
            edge_threshold: -8.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuntimeConfig {
    pub v_loc: f64,
    /// A waypoint counts as reached once `V(z_t, waypoint)` exceeds this.
    pub v_adv: f64,
    pub goal_radius: f64,
    pub step_budget: usize,
    /// Steps one recovery episode may take before an intervention is declared.
    pub recovery_budget: usize,
    /// Stop following the route and head straight for the goal within this value.
    pub goal_value: f64,
    /// Standard deviation of the heading drift injected in fig1 case (a).
    pub drift_noise: f64,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            v_loc: -10.0,
            v_adv: -3.0,
            goal_radius: 0.5,
            step_budget: 400,
            recovery_budget: 60,
            goal_value: -3.0,
            drift_noise: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub sim: SimConfig,
    pub data: DataConfig,
    pub representation: RepresentationConfig,
    pub iql: IqlConfig,
    pub affordance: AffordanceConfig,
    pub novelty: NoveltyConfig,
    pub map: MapConfig,
    pub recovery: RecoveryConfig,
    pub runtime: RuntimeConfig,
    pub ablation: Ablation,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sim: SimConfig::default(),
            data: DataConfig::default(),
            representation: RepresentationConfig::default(),
            iql: IqlConfig::default(),
            affordance: AffordanceConfig::default(),
            novelty: NoveltyConfig::default(),
            map: MapConfig::default(),
            recovery: RecoveryConfig::default(),
            runtime: RuntimeConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.sim.rays < 3 || self.sim.dt <= 0.0 {
            return Err(Error::Config("sim needs rays >= 3 and dt > 0".into()));
        }
        self.representation.validate()?;
        self.iql.validate()?;
        self.affordance.validate(self.iql.sampler.d_max)?;
        self.recovery.validate()?;
        self.ablation.validate()?;
        if self.recovery.horizon == 0 || self.map.node_stride == 0 {
            return Err(Error::Config("horizon and node_stride must be >= 1".into()));
        }
        if self.data.episodes == 0 || self.data.map_episodes == 0 {
            return Err(Error::Config("data.episodes and data.map_episodes must be >= 1".into()));
        }
        Ok(())
    }

    /// Time spanned by one imagined latent step.
    pub fn plan_step_dt(&self) -> f64 {
        self.affordance.stride as f64 * self.sim.dt
    }
}
