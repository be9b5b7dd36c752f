//! Conditional affordance model `ψ(z' | h, u)`.
//!
//! A GRU summarizes the last `H` latent states (sampled every `stride` frames)
//! into `h`. A posterior `q(u | h, z' - z)` compresses the observed change into
//! a low-dimensional code under a KL penalty, and the decoder predicts `z'` as
//! a residual on the current latent from `h` and the FiLM-modulated code
//! `γ(h) ⊙ u + δ(h)`. At planning time codes come from the standard normal
//! prior and predictions are fed back into the history.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, AdamW, AdamWConfig, Archive, Graph, Gru, Linear, Mlp, ParamSet, Tensor, Var};
use crate::offline_rl::IqlModels;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffordanceConfig {
    pub d_u: usize,
    pub d_h: usize,
    pub history: usize,
    /// Frames between consecutive latents in a history window and between a
    /// latent and its prediction.
    pub stride: usize,
    pub beta_vib: f64,
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for AffordanceConfig {
    fn default() -> Self {
        Self {
            d_u: 8,
            d_h: 64,
            history: 8,
            stride: 3,
            beta_vib: 0.01,
            hidden: 128,
            steps: 5000,
            batch_size: 128,
            lr: 3e-4,
            weight_decay: 1e-4,
        }
    }
}

impl AffordanceConfig {
    pub fn validate(&self, d_max: usize) -> Result<()> {
        if self.d_u == 0 || self.d_h == 0 || self.history == 0 || self.stride == 0 {
            return Err(Error::Config("affordance dims, history and stride must be positive".into()));
        }
        if self.stride > d_max {
            return Err(Error::Config(format!("affordance stride {} exceeds d_max {d_max}", self.stride)));
        }
        Ok(())
    }
}

/// `γ ⊙ u + δ`.
pub fn film_modulate(gamma: &[f64], delta: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    if gamma.len() != u.len() || delta.len() != u.len() {
        return Err(Error::DimMismatch {
            what: "FiLM parameters vs code".into(),
            expected: u.len(),
            found: gamma.len().min(delta.len()),
        });
    }
    Ok(u.iter().zip(gamma).zip(delta).map(|((u, g), d)| g * u + d).collect())
}

/// KL(N(μ, σ²) || N(0, 1)) summed over dimensions.
pub fn kl_standard_normal(mu: &[f64], sigma: &[f64]) -> f64 {
    mu.iter()
        .zip(sigma)
        .map(|(m, s)| 0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln()))
        .sum()
}

/// Log density of the standard-normal prior.
pub fn prior_log_density(u: &[f64]) -> f64 {
    let d = u.len() as f64;
    -0.5 * u.iter().map(|v| v * v).sum::<f64>() - 0.5 * d * (2.0 * std::f64::consts::PI).ln()
}

/// Temporal feature of a latent history (oldest first).
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalFeature {
    pub h: Vec<f64>,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentRollout {
    pub codes: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
    pub log_prior: Vec<f64>,
    pub values: Vec<f64>,
    pub yaw: f64,
}

impl LatentRollout {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> &[f64] {
        self.states.last().expect("non-empty rollout")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct AffordanceLoss {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// One training batch: `history[i]` is `n × d_z`, oldest first; the last
/// history entry is the anchor the prediction is a residual on.
#[derive(Debug, Clone, PartialEq)]
pub struct AffordanceBatch {
    pub history: Vec<Tensor>,
    pub target: Tensor,
    /// Reparameterization noise, `n × d_u`.
    pub eps: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affordance {
    pub params: ParamSet,
    gru: Option<Gru>,
    gamma: Linear,
    delta: Linear,
    posterior: Mlp,
    decoder: Mlp,
    pub d_z: usize,
    pub d_u: usize,
    pub history: usize,
    pub stride: usize,
    pub beta_vib: f64,
}

const LOG_SIGMA_MIN: f64 = -6.0;
const LOG_SIGMA_MAX: f64 = 2.0;

impl Affordance {
    /// `use_rnn = false` builds the variant whose temporal feature is the current latent.
    pub fn new(d_z: usize, cfg: &AffordanceConfig, use_rnn: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(4);
        let mut params = ParamSet::new(seed);
        let gru = use_rnn.then(|| Gru::new(&mut params, &mut rng, "gru", d_z, cfg.d_h));
        let d_h = if use_rnn { cfg.d_h } else { d_z };
        let gamma = Linear::new(&mut params, &mut rng, "film.gamma", d_h, cfg.d_u);
        let delta = Linear::new(&mut params, &mut rng, "film.delta", d_h, cfg.d_u);
        let h = cfg.hidden;
        let posterior = Mlp::new(&mut params, &mut rng, "posterior", &[d_h + d_z, h, h, 2 * cfg.d_u], Activation::Relu, false);
        let decoder = Mlp::new(&mut params, &mut rng, "decoder", &[d_h + cfg.d_u, h, h, d_z], Activation::Relu, false);
        Self {
            params,
            gru,
            gamma,
            delta,
            posterior,
            decoder,
            d_z,
            d_u: cfg.d_u,
            history: cfg.history,
            stride: cfg.stride,
            beta_vib: cfg.beta_vib,
        }
    }

    pub fn uses_rnn(&self) -> bool {
        self.gru.is_some()
    }

    fn temporal_taped(&self, g: &mut Graph, p: &[Var], hist: &[Var]) -> Var {
        match &self.gru {
            Some(gru) => gru.encode(g, p, hist),
            None => *hist.last().expect("non-empty history"),
        }
    }

    /// `γ(h) = 1 + W_γ h + b_γ` so that a fresh model starts near identity modulation.
    fn film_taped(&self, g: &mut Graph, p: &[Var], h: Var, u: Var) -> Var {
        let gm = self.gamma.forward(g, p, h);
        let gm = g.offset(gm, 1.0);
        let dl = self.delta.forward(g, p, h);
        let m = g.mul(gm, u);
        g.add(m, dl)
    }

    fn decode_taped(&self, g: &mut Graph, p: &[Var], h: Var, anchor: Var, u: Var) -> Var {
        let f = self.film_taped(g, p, h, u);
        let x = g.concat(&[h, f]);
        let d = self.decoder.forward(g, p, x);
        g.add(anchor, d)
    }

    /// Recon, KL and total loss on a tape.
    pub fn loss_taped(&self, g: &mut Graph, p: &[Var], batch: &AffordanceBatch) -> (Var, Var, Var) {
        let hist: Vec<Var> = batch.history.iter().map(|t| g.constant(t.clone())).collect();
        let anchor = *hist.last().expect("non-empty history");
        let target = g.constant(batch.target.clone());
        let h = self.temporal_taped(g, p, &hist);
        let delta = g.sub(target, anchor);
        let qin = g.concat(&[h, delta]);
        let q = self.posterior.forward(g, p, qin);
        let mu = g.slice(q, 0, self.d_u);
        let log_sigma = g.slice(q, self.d_u, 2 * self.d_u);
        let log_sigma = g.clamp(log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX);
        let sigma = g.exp(log_sigma);
        let eps = g.constant(batch.eps.clone());
        let noise = g.mul(sigma, eps);
        let u = g.add(mu, noise);
        let pred = self.decode_taped(g, p, h, anchor, u);
        let err = g.sub(pred, target);
        let err = g.square(err);
        let err = g.row_sum(err);
        let recon = g.mean(err);
        // 0.5 (μ² + σ² - 1 - 2 log σ)
        let mu2 = g.square(mu);
        let s2 = g.square(sigma);
        let a = g.add(mu2, s2);
        let ls2 = g.scale(log_sigma, 2.0);
        let a = g.sub(a, ls2);
        let a = g.offset(a, -1.0);
        let a = g.scale(a, 0.5);
        let a = g.row_sum(a);
        let kl = g.mean(a);
        let wkl = g.scale(kl, self.beta_vib);
        let total = g.add(recon, wkl);
        (total, recon, kl)
    }

    pub fn loss(&self, batch: &AffordanceBatch) -> AffordanceLoss {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let (t, r, k) = self.loss_taped(&mut g, &p, batch);
        AffordanceLoss {
            total: g.scalar(t),
            recon: g.scalar(r),
            kl: g.scalar(k),
        }
    }

    fn temporal_rows(&self, hist: &[Tensor]) -> Tensor {
        match &self.gru {
            Some(gru) => gru.infer_encode(&self.params, hist),
            None => hist.last().expect("non-empty history").clone(),
        }
    }

    /// Pad or trim a history to exactly `H` entries, repeating the oldest.
    pub fn window<'a>(&self, history: &'a [Vec<f64>]) -> Vec<&'a [f64]> {
        assert!(!history.is_empty(), "temporal encoding needs a history");
        let take = history.len().min(self.history);
        let recent = &history[history.len() - take..];
        let mut out: Vec<&[f64]> = std::iter::repeat_n(recent[0].as_slice(), self.history - take).collect();
        out.extend(recent.iter().map(|v| v.as_slice()));
        out
    }

    pub fn temporal_encode(&self, history: &[Vec<f64>]) -> TemporalFeature {
        let w = self.window(history);
        let hist: Vec<Tensor> = w
            .iter()
            .map(|z| Tensor::from_shape_vec((1, z.len()), z.to_vec()).expect("row"))
            .collect();
        TemporalFeature {
            h: self.temporal_rows(&hist).row(0).to_vec(),
            horizon: self.history,
        }
    }

    /// FiLM parameters `(γ(h), δ(h))` for a single feature.
    pub fn film_params(&self, h: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let ht = Tensor::from_shape_vec((1, h.len()), h.to_vec()).expect("row");
        let gm = self.gamma.infer(&self.params, &ht).mapv(|v| v + 1.0);
        let dl = self.delta.infer(&self.params, &ht);
        (gm.row(0).to_vec(), dl.row(0).to_vec())
    }

    fn decode_rows(&self, h: &Tensor, anchor: &Tensor, u: &Tensor) -> Tensor {
        let gm = self.gamma.infer(&self.params, h).mapv(|v| v + 1.0);
        let dl = self.delta.infer(&self.params, h);
        let f = &gm * u + &dl;
        let x = ndarray::concatenate![ndarray::Axis(1), *h, f];
        anchor + &self.decoder.infer(&self.params, &x)
    }

    /// Posterior mean and standard deviation of `u` for observed transitions.
    pub fn posterior(&self, history: &[Tensor], target: &Tensor) -> (Tensor, Tensor) {
        let h = self.temporal_rows(history);
        let anchor = history.last().expect("history");
        let x = ndarray::concatenate![ndarray::Axis(1), h, target - anchor];
        let q = self.posterior.infer(&self.params, &x);
        let mu = q.slice(ndarray::s![.., ..self.d_u]).to_owned();
        let sigma = q
            .slice(ndarray::s![.., self.d_u..])
            .mapv(|v| v.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX).exp());
        (mu, sigma)
    }

    /// One-step prediction for batched histories and codes.
    pub fn predict(&self, history: &[Tensor], u: &Tensor) -> Tensor {
        let h = self.temporal_rows(history);
        self.decode_rows(&h, history.last().expect("history"), u)
    }

    /// Roll `codes.len()` steps forward for every row of `codes[k]`.
    ///
    /// Every candidate starts from the same `history`; each prediction is
    /// appended to that candidate's history and re-encoded before the next step.
    pub fn rollout_batch(&self, history: &[Vec<f64>], codes: &[Tensor]) -> Vec<Tensor> {
        assert!(!codes.is_empty(), "rollout horizon must be at least 1");
        let n = codes[0].nrows();
        let base: Vec<Tensor> = self
            .window(history)
            .iter()
            .map(|z| Tensor::from_shape_fn((n, z.len()), |(_, j)| z[j]))
            .collect();
        let mut hist = base;
        let mut out = Vec::with_capacity(codes.len());
        for u in codes {
            let next = self.predict(&hist, u);
            hist.remove(0);
            hist.push(next.clone());
            out.push(next);
        }
        out
    }

    /// Single-candidate rollout: `codes[k]` is the k-th code.
    pub fn rollout_latent(&self, history: &[Vec<f64>], codes: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let codes: Vec<Tensor> = codes
            .iter()
            .map(|u| Tensor::from_shape_vec((1, u.len()), u.clone()).expect("row"))
            .collect();
        self.rollout_batch(history, &codes)
            .into_iter()
            .map(|t| t.row(0).to_vec())
            .collect()
    }

    pub fn save_into(&self, a: &mut Archive, prefix: &str) {
        a.insert_params(prefix, &self.params);
    }

    pub fn load_from(&mut self, a: &Archive, prefix: &str) -> Result<()> {
        a.load_into(prefix, &mut self.params)
    }
}

/// `Σ_k ω_k · dt` with `ω_k` the policy's mean angular velocity from
/// `ẑ_{k-1}` toward `ẑ_k`, where `ẑ_0 = z_t`.
pub fn estimate_plan_yaw(z_t: &[f64], states: &[Vec<f64>], policy: &IqlModels, dt: f64) -> f64 {
    let mut prev = z_t;
    let mut yaw = 0.0;
    for s in states {
        yaw += policy.act(prev, s).w * dt;
        prev = s;
    }
    yaw
}

/// Yaw estimates for a batch of rollouts, `states[k]` being `n × d_z`.
pub fn estimate_plan_yaw_batch(z_t: &[f64], states: &[Tensor], policy: &IqlModels, dt: f64) -> Vec<f64> {
    let n = states.first().map(|t| t.nrows()).unwrap_or(0);
    let mut prev = Tensor::from_shape_fn((n, z_t.len()), |(_, j)| z_t[j]);
    let mut yaw = vec![0.0; n];
    for s in states {
        for (y, a) in yaw.iter_mut().zip(policy.act_rows(&prev, s)) {
            *y += a.w * dt;
        }
        prev = s.clone();
    }
    yaw
}

/// Indices of training windows: (episode, anchor state) with a target `stride` ahead.
#[derive(Debug, Clone)]
pub struct WindowSampler {
    anchors: Vec<(usize, usize)>,
    offsets: Vec<usize>,
}

impl WindowSampler {
    /// `lengths[e]` is the number of states in episode `e`.
    pub fn new(lengths: &[usize], stride: usize) -> Result<Self> {
        let mut offsets = Vec::with_capacity(lengths.len());
        let mut anchors = Vec::new();
        let mut acc = 0;
        for (e, &n) in lengths.iter().enumerate() {
            offsets.push(acc);
            acc += n;
            for s in 0..n.saturating_sub(stride) {
                anchors.push((e, s));
            }
        }
        if anchors.is_empty() {
            return Err(Error::Empty(format!("no episode longer than the affordance stride {stride}")));
        }
        Ok(Self { anchors, offsets })
    }

    /// Latent-table rows of `(history oldest first, target)` for one anchor.
    pub fn rows(&self, e: usize, s: usize, history: usize, stride: usize) -> (Vec<usize>, usize) {
        let base = self.offsets[e];
        let hist = (0..history)
            .rev()
            .map(|k| base + s.saturating_sub(k * stride))
            .collect();
        (hist, base + s + stride)
    }

    pub fn sample<R: Rng>(&self, z: &Tensor, n: usize, history: usize, stride: usize, d_u: usize, rng: &mut R) -> AffordanceBatch {
        let picks: Vec<(Vec<usize>, usize)> = (0..n)
            .map(|_| {
                let (e, s) = self.anchors[rng.random_range(0..self.anchors.len())];
                self.rows(e, s, history, stride)
            })
            .collect();
        let hist = (0..history)
            .map(|k| {
                let idx: Vec<usize> = picks.iter().map(|(h, _)| h[k]).collect();
                z.select(ndarray::Axis(0), &idx)
            })
            .collect();
        let tgt: Vec<usize> = picks.iter().map(|(_, t)| *t).collect();
        AffordanceBatch {
            history: hist,
            target: z.select(ndarray::Axis(0), &tgt),
            eps: Tensor::from_shape_simple_fn((n, d_u), || rng.sample(StandardNormal)),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct AffordanceLogRow {
    pub step: usize,
    pub loss: AffordanceLoss,
}

/// Fit the affordance model on a latent table (one row per dataset state).
pub fn train_affordance(
    z: &Tensor,
    lengths: &[usize],
    cfg: &AffordanceConfig,
    use_rnn: bool,
    seed: u64,
) -> Result<(Affordance, Vec<AffordanceLogRow>)> {
    let mut model = Affordance::new(z.ncols(), cfg, use_rnn, seed);
    let windows = WindowSampler::new(lengths, cfg.stride)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(5);
    let mut opt = AdamW::new(
        &model.params,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let mut log = Vec::new();
    for step in 0..cfg.steps {
        let batch = windows.sample(z, cfg.batch_size, cfg.history, cfg.stride, cfg.d_u, &mut rng);
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let (t, r, k) = model.loss_taped(&mut g, &p, &batch);
        let loss = AffordanceLoss {
            total: g.scalar(t),
            recon: g.scalar(r),
            kl: g.scalar(k),
        };
        if !loss.total.is_finite() {
            return Err(Error::Divergence {
                stage: "affordance".into(),
                report: format!("step {step}: {loss:?}"),
            });
        }
        let grads = g.backward(t);
        let step_grads = model.params.grads(&grads, &p);
        opt.step(&mut model.params, &step_grads)?;
        if step % 50 == 0 || step + 1 == cfg.steps {
            log.push(AffordanceLogRow { step, loss });
        }
    }
    Ok((model, log))
}
