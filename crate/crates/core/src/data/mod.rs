//! Offline experience: rewards, episodes, collection, storage and sampling.

pub mod collect;
pub mod format;
pub mod sampler;

use serde::{Deserialize, Serialize};

use crate::sim::{Action, Observation, Pose};

pub use collect::{collect_episodes, CollectConfig, PolicySpec};
pub use format::{read_dataset, write_dataset};
pub use sampler::{relabel, sample_batch, Batch, GapDistribution, GoalPair, PairSampler, Polarity, SamplerConfig};

pub const REWARD_GOAL: f64 = 0.0;
pub const REWARD_STEP: f64 = -1.0;
pub const REWARD_COLLISION: f64 = -10.0;

/// Step reward: collision dominates, then goal, otherwise a unit step cost.
pub fn reward(reached_goal: bool, collided: bool) -> f64 {
    if collided {
        REWARD_COLLISION
    } else if reached_goal {
        REWARD_GOAL
    } else {
        REWARD_STEP
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Observation,
    pub action: Action,
    pub reward: f64,
    pub next_obs: Observation,
    pub done: bool,
    pub collided: bool,
    pub pose: Pose,
    pub episode_id: u32,
    pub step_index: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: u32,
    pub transitions: Vec<Transition>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Observation `i` of the episode's state sequence `o_0 ..= o_T`.
    pub fn observation(&self, i: usize) -> &Observation {
        if i < self.transitions.len() {
            &self.transitions[i].obs
        } else {
            &self.transitions[self.transitions.len() - 1].next_obs
        }
    }

    /// Number of states, one more than the number of transitions.
    pub fn num_states(&self) -> usize {
        self.transitions.len() + 1
    }

    pub fn ended_in_collision(&self) -> bool {
        self.transitions.last().is_some_and(|t| t.collided)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub rays: usize,
    pub obs_dim: usize,
    pub max_range: f64,
    pub scenario: String,
    pub variant: String,
    pub policy: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn num_transitions(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.num_transitions() == 0
    }

    /// `(episode, state)` index of every state in order.
    pub fn state_index(&self) -> Vec<(usize, usize)> {
        self.episodes
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.num_states()).map(move |s| (e, s)))
            .collect()
    }

    pub fn iter_transitions(&self) -> impl Iterator<Item = &Transition> {
        self.episodes.iter().flat_map(|e| e.transitions.iter())
    }
}

/// Model-facing features of every state, one row per `(episode, state)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTable {
    offsets: Vec<usize>,
    pub features: crate::nn::Tensor,
}

impl StateTable {
    pub fn new(d: &Dataset) -> Self {
        let mut offsets = Vec::with_capacity(d.episodes.len());
        let mut rows = Vec::new();
        for ep in &d.episodes {
            offsets.push(rows.len());
            rows.extend((0..ep.num_states()).map(|s| ep.observation(s).features(d.meta.max_range)));
        }
        let features = crate::nn::stack_rows(rows.iter().map(|r| r.as_slice()), d.meta.obs_dim);
        Self { offsets, features }
    }

    pub fn row(&self, episode: usize, state: usize) -> usize {
        self.offsets[episode] + state
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
