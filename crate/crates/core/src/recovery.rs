//! Localization recovery by anti-novelty latent planning.
//!
//! Candidate code sequences are drawn from a Gaussian around a running mean
//! (the prior on the first iteration), rolled out through the affordance
//! model and scored by
//!
//! ```text
//! c = T(ẑ_K) + λ‖ẑ_K - z_g‖² + Σ_k [η₁(V_loc - V_k) + η₂(-log p(u_k))] + η₃(Δθ_min - |Δθ_K|)
//! ```
//!
//! MPPI re-centres the sampler on the softmax(-c / temperature) average and
//! the best candidate ever seen is kept.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::affordance::{estimate_plan_yaw_batch, prior_log_density, Affordance, LatentRollout};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::novelty::Rnd;
use crate::offline_rl::IqlModels;
use crate::sim::Action;
use crate::topo_map::Localization;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    pub lambda_goal: f64,
    pub eta_reach: f64,
    pub eta_prob: f64,
    pub eta_aggr: f64,
    pub v_loc: f64,
    pub delta_theta_min: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            lambda_goal: 0.5,
            eta_reach: 0.3,
            eta_prob: 0.05,
            eta_aggr: 0.1,
            v_loc: -10.0,
            delta_theta_min: 0.6,
        }
    }
}

impl CostWeights {
    pub fn zero() -> Self {
        Self {
            lambda_goal: 0.0,
            eta_reach: 0.0,
            eta_prob: 0.0,
            eta_aggr: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_goal,
            self.eta_reach,
            self.eta_prob,
            self.eta_aggr,
            self.v_loc,
            self.delta_theta_min,
        ];
        if all.iter().any(|v| !v.is_finite()) || self.lambda_goal < 0.0 {
            return Err(Error::Config("cost weights must be finite and lambda_goal >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryConfig {
    pub weights: CostWeights,
    pub candidates: usize,
    pub horizon: usize,
    pub iters: usize,
    pub temperature: f64,
    pub init_std: f64,
    /// Sampler spread after the first iteration.
    pub refine_std: f64,
    /// Candidates per parallel work item.
    pub chunk: usize,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            weights: CostWeights::default(),
            candidates: 64,
            horizon: 5,
            iters: 3,
            temperature: 1.0,
            init_std: 1.0,
            refine_std: 0.5,
            chunk: 16,
        }
    }
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.candidates == 0 || self.horizon == 0 || self.iters == 0 {
            return Err(Error::Config("recovery candidates, horizon and iters must be >= 1".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("recovery temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanCandidate {
    pub rollout: LatentRollout,
    pub novelty: f64,
    pub cost: f64,
}

/// Cost of one rollout given the novelty of its final latent.
pub fn score_plan(z_goal: Option<&[f64]>, rollout: &LatentRollout, novelty: f64, w: &CostWeights) -> f64 {
    assert!(!rollout.is_empty(), "rollout horizon must be at least 1");
    let last = rollout.last();
    let mut c = novelty;
    if let Some(g) = z_goal {
        c += w.lambda_goal * last.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    for (v, lp) in rollout.values.iter().zip(&rollout.log_prior) {
        c += w.eta_reach * (w.v_loc - v) + w.eta_prob * (-lp);
    }
    c + w.eta_aggr * (w.delta_theta_min - rollout.yaw.abs())
}

/// Frozen models used by the planner. `rnd = None` scores every plan as equally novel.
#[derive(Clone, Copy)]
pub struct PlannerModels<'a> {
    pub affordance: &'a Affordance,
    pub iql: &'a IqlModels,
    pub rnd: Option<&'a Rnd>,
    /// Time spanned by one latent step, used to integrate yaw.
    pub step_dt: f64,
}

/// Roll out and score `codes[k]` (`N × d_u` each).
pub fn evaluate_codes(
    m: &PlannerModels,
    history: &[Vec<f64>],
    z_t: &[f64],
    z_goal: Option<&[f64]>,
    codes: &[Tensor],
    cfg: &RecoveryConfig,
) -> Vec<PlanCandidate> {
    let n = codes[0].nrows();
    let chunk = cfg.chunk.max(1);
    let n_chunks = n.div_ceil(chunk);
    let parts = crate::par::map_indexed(n_chunks, |c| {
        let rows: Vec<usize> = (c * chunk..((c + 1) * chunk).min(n)).collect();
        let sub: Vec<Tensor> = codes.iter().map(|t| t.select(ndarray::Axis(0), &rows)).collect();
        evaluate_chunk(m, history, z_t, z_goal, &sub, &cfg.weights)
    });
    parts.into_iter().flatten().collect()
}

fn evaluate_chunk(
    m: &PlannerModels,
    history: &[Vec<f64>],
    z_t: &[f64],
    z_goal: Option<&[f64]>,
    codes: &[Tensor],
    w: &CostWeights,
) -> Vec<PlanCandidate> {
    let n = codes[0].nrows();
    let states = m.affordance.rollout_batch(history, codes);
    let mut prev = Tensor::from_shape_fn((n, z_t.len()), |(_, j)| z_t[j]);
    let mut values = Vec::with_capacity(states.len());
    for s in &states {
        values.push(m.iql.value_rows(&prev, &(s - &prev)).column(0).to_vec());
        prev = s.clone();
    }
    let yaw = estimate_plan_yaw_batch(z_t, &states, m.iql, m.step_dt);
    let novelty = match m.rnd {
        Some(r) => r.score_rows(states.last().expect("horizon >= 1")),
        None => vec![0.0; n],
    };
    (0..n)
        .map(|i| {
            let rollout = LatentRollout {
                codes: codes.iter().map(|t| t.row(i).to_vec()).collect(),
                states: states.iter().map(|t| t.row(i).to_vec()).collect(),
                log_prior: codes.iter().map(|t| prior_log_density(t.row(i).as_slice().expect("row"))).collect(),
                values: values.iter().map(|v| v[i]).collect(),
                yaw: yaw[i],
            };
            let cost = score_plan(z_goal, &rollout, novelty[i], w);
            PlanCandidate {
                rollout,
                novelty: novelty[i],
                cost,
            }
        })
        .collect()
}

/// Gaussian code sampler with a per-step mean; `mean[k]` is `1 × d_u`.
#[derive(Debug, Clone)]
pub struct CodeSampler {
    pub mean: Vec<Vec<f64>>,
    pub std: f64,
    pub rng: ChaCha8Rng,
}

impl CodeSampler {
    pub fn prior(horizon: usize, d_u: usize, std: f64, seed: u64) -> Self {
        Self {
            mean: vec![vec![0.0; d_u]; horizon],
            std,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn sample(&mut self, n: usize) -> Vec<Tensor> {
        let std = self.std;
        let rng = &mut self.rng;
        self.mean
            .iter()
            .map(|mu| {
                Tensor::from_shape_fn((n, mu.len()), |(_, j)| {
                    let e: f64 = rng.sample(StandardNormal);
                    mu[j] + std * e
                })
            })
            .collect()
    }
}

/// Sample `n` code sequences and roll them out.
pub fn generate_candidates(
    m: &PlannerModels,
    history: &[Vec<f64>],
    z_t: &[f64],
    z_goal: Option<&[f64]>,
    n: usize,
    sampler: &mut CodeSampler,
    cfg: &RecoveryConfig,
) -> Vec<PlanCandidate> {
    assert!(n >= 1, "need at least one candidate");
    let codes = sampler.sample(n);
    evaluate_codes(m, history, z_t, z_goal, &codes, cfg)
}

/// Index of the lowest-cost candidate (first on ties).
pub fn argmin_cost(c: &[PlanCandidate]) -> usize {
    let mut best = 0;
    for (i, p) in c.iter().enumerate() {
        if p.cost < c[best].cost {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct MppiResult {
    pub best: PlanCandidate,
    /// Best-ever cost after each iteration.
    pub best_costs: Vec<f64>,
}

pub fn mppi_refine(
    m: &PlannerModels,
    history: &[Vec<f64>],
    z_t: &[f64],
    z_goal: Option<&[f64]>,
    cfg: &RecoveryConfig,
    seed: u64,
) -> MppiResult {
    assert!(cfg.iters >= 1, "MPPI needs at least one iteration");
    let mut sampler = CodeSampler::prior(cfg.horizon, m.affordance.d_u, cfg.init_std, seed);
    let mut best: Option<PlanCandidate> = None;
    let mut best_costs = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        if it > 0 {
            sampler.std = cfg.refine_std;
        }
        let cands = generate_candidates(m, history, z_t, z_goal, cfg.candidates, &mut sampler, cfg);
        let i = argmin_cost(&cands);
        if best.as_ref().is_none_or(|b| cands[i].cost < b.cost) {
            best = Some(cands[i].clone());
        }
        best_costs.push(best.as_ref().expect("set above").cost);
        // importance-weighted mean update
        let cmin = cands[i].cost;
        let w: Vec<f64> = cands.iter().map(|c| (-(c.cost - cmin) / cfg.temperature).exp()).collect();
        let total: f64 = w.iter().sum();
        for (k, mu) in sampler.mean.iter_mut().enumerate() {
            for (j, v) in mu.iter_mut().enumerate() {
                *v = cands.iter().zip(&w).map(|(c, wi)| wi * c.rollout.codes[k][j]).sum::<f64>() / total;
            }
        }
    }
    MppiResult {
        best: best.expect("at least one iteration"),
        best_costs,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryDecision {
    pub action: Action,
    pub plan: PlanCandidate,
}

/// Plan while lost and return the policy's action toward the first imagined latent.
///
/// Callers must only invoke this when `loc` is `Lost`.
pub fn recover_step(
    z_t: &[f64],
    history: &[Vec<f64>],
    loc: Localization,
    z_goal: Option<&[f64]>,
    m: &PlannerModels,
    cfg: &RecoveryConfig,
    seed: u64,
) -> RecoveryDecision {
    assert!(loc.is_lost(), "recover_step called while localized");
    let res = mppi_refine(m, history, z_t, z_goal, cfg, seed);
    let action = m.iql.act(z_t, &res.best.rollout.states[0]);
    RecoveryDecision { action, plan: res.best }
}
