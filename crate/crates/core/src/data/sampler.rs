//! Hindsight goal relabeling and positive/negative pair sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, REWARD_COLLISION, REWARD_GOAL, REWARD_STEP};
use crate::error::{Error, Result};
use crate::sim::Observation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GapDistribution {
    /// Number of trials until first success, so support starts at 1.
    Geometric { p: f64 },
    Uniform,
}

impl GapDistribution {
    /// Draw a gap in `1..=d_max`, resampling anything past the truncation.
    pub fn sample<R: Rng>(&self, d_max: usize, rng: &mut R) -> usize {
        match *self {
            GapDistribution::Uniform => rng.random_range(1..=d_max),
            GapDistribution::Geometric { p } => loop {
                let mut k = 1;
                while rng.random::<f64>() >= p {
                    k += 1;
                    if k > d_max {
                        break;
                    }
                }
                if k <= d_max {
                    return k;
                }
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub d_max: usize,
    pub gap: GapDistribution,
    /// Fraction of the batch that is negative; 0.25 is the 1:3 split.
    pub negative_fraction: f64,
    /// Probability that a positive uses the anchor's own observation as goal.
    pub self_goal_prob: f64,
    pub cross_episode_negatives: bool,
    /// Allow negatives from the anchor's own episode beyond `d_max`.
    pub same_episode_negatives: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            d_max: 10,
            gap: GapDistribution::Geometric { p: 0.2 },
            negative_fraction: 0.25,
            self_goal_prob: 0.1,
            cross_episode_negatives: true,
            same_episode_negatives: true,
        }
    }
}

impl SamplerConfig {
    pub fn num_negatives(&self) -> usize {
        (self.batch_size as f64 * self.negative_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_max < 1 {
            return Err(Error::Config("sampler.d_max must be at least 1".into()));
        }
        if self.batch_size == 0 || !(0.0..1.0).contains(&self.negative_fraction) {
            return Err(Error::Config("sampler batch_size/negative_fraction out of range".into()));
        }
        if let GapDistribution::Geometric { p } = self.gap {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config(format!("geometric p must be in (0,1], got {p}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
}

/// An anchor transition paired with a goal state.
///
/// Indices refer to the dataset the pair was drawn from. `goal_state` indexes
/// the goal episode's state sequence `o_0 ..= o_T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoalPair {
    pub episode: usize,
    pub step: usize,
    pub goal_episode: usize,
    pub goal_state: usize,
    /// `None` for cross-episode negatives.
    pub gap: Option<usize>,
    pub polarity: Polarity,
    pub reward: f64,
    /// True only when the goal is reached by this transition, which stops bootstrapping.
    pub done: bool,
}

impl GoalPair {
    pub fn anchor_obs<'a>(&self, d: &'a Dataset) -> &'a Observation {
        &d.episodes[self.episode].transitions[self.step].obs
    }

    pub fn next_obs<'a>(&self, d: &'a Dataset) -> &'a Observation {
        &d.episodes[self.episode].transitions[self.step].next_obs
    }

    pub fn goal_obs<'a>(&self, d: &'a Dataset) -> &'a Observation {
        d.episodes[self.goal_episode].observation(self.goal_state)
    }
}

/// Reward and terminal flag for transition `t` relabeled with a goal `gap` states ahead.
///
/// Gap 0 means the goal is the current observation, so the agent is already there.
/// Otherwise the step costs -1 (or -10 on collision) and bootstraps from `s'`.
pub fn relabel(gap: usize, collided: bool) -> (f64, bool) {
    if gap == 0 {
        (REWARD_GOAL, true)
    } else if collided {
        (REWARD_COLLISION, false)
    } else {
        (REWARD_STEP, false)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub positives: Vec<GoalPair>,
    pub negatives: Vec<GoalPair>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flattened (episode, step) index over all transitions, built once per dataset.
#[derive(Debug, Clone)]
pub struct PairSampler {
    index: Vec<(u32, u32)>,
    config: SamplerConfig,
}

impl PairSampler {
    pub fn new(d: &Dataset, config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        if d.is_empty() {
            return Err(Error::Empty("dataset has no transitions".into()));
        }
        let index = d
            .episodes
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.len()).map(move |s| (e as u32, s as u32)))
            .collect();
        Ok(Self { index, config })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    fn anchor<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        let (e, s) = self.index[rng.random_range(0..self.index.len())];
        (e as usize, s as usize)
    }

    pub fn positive<R: Rng>(&self, d: &Dataset, rng: &mut R) -> GoalPair {
        let cfg = &self.config;
        let (e, s) = self.anchor(rng);
        let ep = &d.episodes[e];
        let gap = if rng.random::<f64>() < cfg.self_goal_prob {
            0
        } else {
            // states after the anchor: s+1 ..= len
            let room = ep.len() - s;
            loop {
                let k = cfg.gap.sample(cfg.d_max, rng);
                if k <= room {
                    break k;
                }
            }
        };
        let (reward, done) = relabel(gap, ep.transitions[s].collided);
        GoalPair {
            episode: e,
            step: s,
            goal_episode: e,
            goal_state: s + gap,
            gap: Some(gap),
            polarity: Polarity::Positive,
            reward,
            done,
        }
    }

    /// A negative pair, or `None` when the drawn anchor admits none.
    pub fn try_negative<R: Rng>(&self, d: &Dataset, rng: &mut R) -> Option<GoalPair> {
        let cfg = &self.config;
        let (e, s) = self.anchor(rng);
        let ep = &d.episodes[e];
        let far_start = s + cfg.d_max + 1;
        let same_ok = cfg.same_episode_negatives && far_start < ep.num_states();
        let cross_ok = cfg.cross_episode_negatives && d.episodes.len() > 1;
        let use_same = match (same_ok, cross_ok) {
            (false, false) => return None,
            (true, false) => true,
            (false, true) => false,
            (true, true) => rng.random::<bool>(),
        };
        let (goal_episode, goal_state, gap) = if use_same {
            let j = rng.random_range(far_start..ep.num_states());
            (e, j, Some(j - s))
        } else {
            let mut ge = rng.random_range(0..d.episodes.len() - 1);
            if ge >= e {
                ge += 1;
            }
            (ge, rng.random_range(0..d.episodes[ge].num_states()), None)
        };
        Some(GoalPair {
            episode: e,
            step: s,
            goal_episode,
            goal_state,
            gap,
            polarity: Polarity::Negative,
            reward: REWARD_STEP,
            done: false,
        })
    }

    pub fn sample<R: Rng>(&self, d: &Dataset, rng: &mut R) -> Result<Batch> {
        let n_neg = self.config.num_negatives();
        let n_pos = self.config.batch_size - n_neg;
        let positives = (0..n_pos).map(|_| self.positive(d, rng)).collect();
        let mut negatives = Vec::with_capacity(n_neg);
        let mut misses = 0usize;
        while negatives.len() < n_neg {
            match self.try_negative(d, rng) {
                Some(p) => negatives.push(p),
                None => {
                    misses += 1;
                    if misses > 1000 * n_neg.max(1) {
                        return Err(Error::Empty(format!(
                            "no negative pairs available: episodes shorter than d_max={} and cross-episode negatives unavailable",
                            self.config.d_max
                        )));
                    }
                }
            }
        }
        Ok(Batch { positives, negatives })
    }
}

pub fn sample_batch<R: Rng>(d: &Dataset, config: &SamplerConfig, rng: &mut R) -> Result<Batch> {
    PairSampler::new(d, *config)?.sample(d, rng)
}
