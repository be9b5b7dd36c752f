//! Goal-conditioned implicit Q-learning with negative sampling.
//!
//! Goals enter every network as the relative embedding `Δz = z_g - z_t`.
//! Q regresses onto `r + γ V(z', Δz')`, V regresses onto an upper expectile of
//! the target Q plus `V_min` on negative pairs, and the policy is extracted by
//! advantage-weighted regression. Only the Q loss reaches the encoder.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PairSampler, SamplerConfig, StateTable};
use crate::error::{Error, Result};
use crate::nn::{soft_update, Activation, AdamW, AdamWConfig, Archive, Graph, Mlp, ParamSet, Tensor, Var};
use crate::representation::Encoder;
use crate::sim::{Action, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IqlConfig {
    pub gamma: f64,
    pub tau: f64,
    pub beta_awr: f64,
    pub v_min: f64,
    pub adv_weight_clip: f64,
    pub hidden: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub finetune_encoder: bool,
    /// Cosine-anneal the learning rate down to this fraction of `lr` (1 keeps it constant).
    pub lr_final_frac: f64,
    pub log_every: usize,
    pub sampler: SamplerConfig,
}

impl Default for IqlConfig {
    fn default() -> Self {
        Self {
            gamma: 0.97,
            tau: 0.7,
            beta_awr: 3.0,
            v_min: -20.0,
            adv_weight_clip: 100.0,
            hidden: 128,
            sigma_min: 0.05,
            sigma_max: 1.0,
            rho: 0.005,
            lr: 3e-4,
            weight_decay: 1e-4,
            steps: 10_000,
            finetune_encoder: true,
            lr_final_frac: 1.0,
            log_every: 50,
            sampler: SamplerConfig::default(),
        }
    }
}

impl IqlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must be in (0,1), got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must be in (0,1), got {}", self.tau)));
        }
        if self.beta_awr <= 0.0 || self.sigma_min <= 0.0 || self.sigma_max <= self.sigma_min {
            return Err(Error::Config("beta_awr > 0 and 0 < sigma_min < sigma_max required".into()));
        }
        self.sampler.validate()
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// `z_g - z_t`.
pub fn relative_goal_embedding(z_g: &[f64], z_t: &[f64]) -> Result<Vec<f64>> {
    if z_g.len() != z_t.len() {
        return Err(Error::DimMismatch {
            what: "relative goal embedding".into(),
            expected: z_t.len(),
            found: z_g.len(),
        });
    }
    Ok(z_g.iter().zip(z_t).map(|(g, t)| g - t).collect())
}

/// `|tau - 1(u < 0)| * u^2`: positive residuals carry weight `tau`.
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    w * u * u
}

/// Row-wise expectile loss on a tape, averaged.
pub fn expectile_loss_taped(g: &mut Graph, u: Var, tau: f64) -> Var {
    let w = g.value(u).mapv(|v| if v < 0.0 { 1.0 - tau } else { tau });
    let w = g.constant(w);
    let sq = g.square(u);
    let l = g.mul(w, sq);
    g.mean(l)
}

/// AWR weights `min(exp(beta * adv), clip)`.
pub fn awr_weights(adv: &[f64], beta: f64, clip: f64) -> Vec<f64> {
    adv.iter().map(|a| (beta * a).exp().min(clip)).collect()
}

fn normal_log_prob_const() -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IqlModels {
    pub q: ParamSet,
    pub q_target: ParamSet,
    pub v: ParamSet,
    pub pi: ParamSet,
    q_net: Mlp,
    v_net: Mlp,
    pi_net: Mlp,
    pub d_z: usize,
    pub v_max: f64,
    pub w_max: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Q and V heads output in units of this, so unit-scale weights span the value range.
    pub value_scale: f64,
}

/// Parameter bindings for one tape.
pub struct Bound {
    pub q: Vec<Var>,
    pub q_target: Vec<Var>,
    pub v: Vec<Var>,
    pub pi: Vec<Var>,
}

/// Latent-space inputs for one batch. Actions are normalized to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub z: Tensor,
    pub a: Tensor,
    pub r: Tensor,
    pub not_done: Tensor,
    pub z_next: Tensor,
    pub z_goal: Tensor,
    pub z_neg: Tensor,
    pub z_neg_goal: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TapedTerms {
    pub l_q: Var,
    pub l_v: Var,
    pub l_pi: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct IqlDiagnostics {
    pub l_q: f64,
    pub l_v: f64,
    pub l_pi: f64,
    pub mean_v_pos: f64,
    pub mean_v_neg: f64,
    pub mean_weight: f64,
}

impl IqlModels {
    pub fn new(d_z: usize, sim: &SimConfig, cfg: &IqlConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let h = cfg.hidden;
        let mut q = ParamSet::new(seed);
        let q_net = Mlp::new(&mut q, &mut rng, "q", &[2 * d_z + 2, h, h, 1], Activation::Relu, true);
        let mut v = ParamSet::new(seed);
        let v_net = Mlp::new(&mut v, &mut rng, "v", &[2 * d_z, h, h, 1], Activation::Relu, true);
        let mut pi = ParamSet::new(seed);
        let pi_net = Mlp::new(&mut pi, &mut rng, "pi", &[2 * d_z, h, h, 4], Activation::Relu, true);
        Self {
            q_target: q.clone(),
            q,
            v,
            pi,
            q_net,
            v_net,
            pi_net,
            d_z,
            v_max: sim.v_max,
            w_max: sim.w_max,
            sigma_min: cfg.sigma_min,
            sigma_max: cfg.sigma_max,
            value_scale: cfg.v_min.abs().max(1.0),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            q: self.q.bind(g),
            q_target: self.q_target.bind_frozen(g),
            v: self.v.bind(g),
            pi: self.pi.bind(g),
        }
    }

    pub fn normalize_action(&self, a: &Action) -> [f64; 2] {
        [a.v / self.v_max, a.w / self.w_max]
    }

    fn q_taped(&self, g: &mut Graph, p: &[Var], z: Var, a: Var, dz: Var) -> Var {
        let x = g.concat(&[z, a, dz]);
        let q = self.q_net.forward(g, p, x);
        g.scale(q, self.value_scale)
    }

    fn v_taped(&self, g: &mut Graph, p: &[Var], z: Var, dz: Var) -> Var {
        let x = g.concat(&[z, dz]);
        let v = self.v_net.forward(g, p, x);
        g.scale(v, self.value_scale)
    }

    /// Gaussian log-density of normalized actions, summed over (v, w).
    fn log_prob_taped(&self, g: &mut Graph, p: &[Var], z: Var, dz: Var, a: Var) -> Var {
        let x = g.concat(&[z, dz]);
        let out = self.pi_net.forward(g, p, x);
        let mean = g.slice(out, 0, 2);
        let mean = g.tanh(mean);
        let raw = g.slice(out, 2, 4);
        let s = g.sigmoid(raw);
        let s = g.scale(s, self.sigma_max - self.sigma_min);
        let std = g.offset(s, self.sigma_min);
        let diff = g.sub(a, mean);
        let log_std = g.log(std);
        let neg = g.neg(log_std);
        let inv_std = g.exp(neg);
        let zsc = g.mul(diff, inv_std);
        let quad = g.square(zsc);
        let quad = g.scale(quad, -0.5);
        let lp = g.sub(quad, log_std);
        let lp = g.offset(lp, normal_log_prob_const());
        g.row_sum(lp)
    }

    /// All three losses on a tape. `z` and `z_goal` are passed as variables so
    /// that the caller can route encoder gradients through the Q loss.
    pub fn losses_taped(&self, g: &mut Graph, b: &Bound, z: Var, z_goal: Var, batch: &LatentBatch, cfg: &IqlConfig) -> (TapedTerms, IqlDiagnostics) {
        // Q target with V stopped
        let dz_next = &batch.z_goal - &batch.z_next;
        let v_next = self.value_rows(&batch.z_next, &dz_next);
        let target = &batch.r + &(&batch.not_done * &v_next.mapv(|v| cfg.gamma * v));
        let target = g.constant(target);

        let dz = g.sub(z_goal, z);
        let a = g.constant(batch.a.clone());
        let q = self.q_taped(g, &b.q, z, a, dz);
        let err = g.sub(target, q);
        let err = g.square(err);
        let l_q = g.mean(err);

        let zs = g.detach(z);
        let dzs = g.detach(dz);
        let q_hat = self.q_taped(g, &b.q_target, zs, a, dzs);
        let q_hat = g.detach(q_hat);
        let v_pos = self.v_taped(g, &b.v, zs, dzs);
        let u = g.sub(q_hat, v_pos);
        let l_exp = expectile_loss_taped(g, u, cfg.tau);

        let zn = g.constant(batch.z_neg.clone());
        let dzn = g.constant(&batch.z_neg_goal - &batch.z_neg);
        let v_neg = self.v_taped(g, &b.v, zn, dzn);
        let l_neg = if batch.z_neg.nrows() > 0 {
            let d = g.offset(v_neg, -cfg.v_min);
            let d = g.square(d);
            g.mean(d)
        } else {
            g.constant(Tensor::zeros((1, 1)))
        };
        let l_v = g.add(l_exp, l_neg);

        let adv: Vec<f64> = g.value(u).iter().copied().collect();
        let w = awr_weights(&adv, cfg.beta_awr, cfg.adv_weight_clip);
        let mean_weight = w.iter().sum::<f64>() / w.len().max(1) as f64;
        let wv = g.constant(Tensor::from_shape_vec((w.len(), 1), w).expect("column"));
        let lp = self.log_prob_taped(g, &b.pi, zs, dzs, a);
        let wl = g.mul(wv, lp);
        let wl = g.mean(wl);
        let l_pi = g.neg(wl);

        let mean = |g: &Graph, v: Var| {
            let t = g.value(v);
            if t.is_empty() {
                0.0
            } else {
                t.sum() / t.len() as f64
            }
        };
        let diag = IqlDiagnostics {
            l_q: g.scalar(l_q),
            l_v: g.scalar(l_v),
            l_pi: g.scalar(l_pi),
            mean_v_pos: mean(g, v_pos),
            mean_v_neg: mean(g, v_neg),
            mean_weight,
        };
        (TapedTerms { l_q, l_v, l_pi }, diag)
    }

    /// Losses on fixed latents, without encoder involvement.
    pub fn losses(&self, batch: &LatentBatch, cfg: &IqlConfig) -> IqlDiagnostics {
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let z = g.constant(batch.z.clone());
        let zg = g.constant(batch.z_goal.clone());
        self.losses_taped(&mut g, &b, z, zg, batch, cfg).1
    }

    pub fn value_rows(&self, z: &Tensor, dz: &Tensor) -> Tensor {
        let x = ndarray::concatenate![ndarray::Axis(1), *z, *dz];
        self.v_net.infer(&self.v, &x) * self.value_scale
    }

    pub fn q_rows(&self, z: &Tensor, a: &Tensor, dz: &Tensor, target: bool) -> Tensor {
        let x = ndarray::concatenate![ndarray::Axis(1), *z, *a, *dz];
        self.q_net.infer(if target { &self.q_target } else { &self.q }, &x) * self.value_scale
    }

    /// V(z, z_g) for a single pair.
    pub fn value(&self, z: &[f64], z_goal: &[f64]) -> f64 {
        let zt = Tensor::from_shape_vec((1, z.len()), z.to_vec()).expect("row");
        let gt = Tensor::from_shape_vec((1, z_goal.len()), z_goal.to_vec()).expect("row");
        self.value_rows(&zt, &(&gt - &zt))[[0, 0]]
    }

    /// V between every `z` row and every goal row, as a `z.nrows() × goals.nrows()` matrix.
    pub fn value_matrix(&self, z: &Tensor, goals: &Tensor) -> Tensor {
        let n = z.nrows();
        let m = goals.nrows();
        let d = self.d_z;
        let rows = crate::par::map_indexed(n, |i| {
            let zi = z.row(i);
            let zt = Tensor::from_shape_fn((m, d), |(_, k)| zi[k]);
            let dz = goals - &zt;
            self.value_rows(&zt, &dz).column(0).to_vec()
        });
        Tensor::from_shape_fn((n, m), |(i, j)| rows[i][j])
    }

    /// Deterministic action: the policy mean mapped back to actuator units.
    pub fn act_rows(&self, z: &Tensor, z_goal: &Tensor) -> Vec<Action> {
        let x = ndarray::concatenate![ndarray::Axis(1), *z, z_goal - z];
        let out = self.pi_net.infer(&self.pi, &x);
        out.rows()
            .into_iter()
            .map(|r| Action::new(r[0].tanh() * self.v_max, r[1].tanh() * self.w_max))
            .collect()
    }

    pub fn act(&self, z: &[f64], z_goal: &[f64]) -> Action {
        let zt = Tensor::from_shape_vec((1, z.len()), z.to_vec()).expect("row");
        let gt = Tensor::from_shape_vec((1, z_goal.len()), z_goal.to_vec()).expect("row");
        self.act_rows(&zt, &gt)[0]
    }

    pub fn save_into(&self, a: &mut Archive) {
        a.insert_params("q", &self.q);
        a.insert_params("q_target", &self.q_target);
        a.insert_params("v", &self.v);
        a.insert_params("pi", &self.pi);
    }

    pub fn load_from(&mut self, a: &Archive) -> Result<()> {
        a.load_into("q", &mut self.q)?;
        a.load_into("q_target", &mut self.q_target)?;
        a.load_into("v", &mut self.v)?;
        a.load_into("pi", &mut self.pi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IqlLogRow {
    pub step: usize,
    pub l_q: f64,
    pub l_v: f64,
    pub l_pi: f64,
    pub mean_v_pos: f64,
    pub mean_v_neg: f64,
}

pub fn write_loss_csv(rows: &[IqlLogRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut s = String::from("step,l_q,l_v,l_pi,mean_v_pos,mean_v_neg\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.step, r.l_q, r.l_v, r.l_pi, r.mean_v_pos, r.mean_v_neg
        ));
    }
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct IqlOutcome {
    pub models: IqlModels,
    pub encoder: Encoder,
    pub log: Vec<IqlLogRow>,
}

/// Row indices of one sampled batch into a [`StateTable`].
struct BatchRows {
    s: Vec<usize>,
    next: Vec<usize>,
    goal: Vec<usize>,
    neg_s: Vec<usize>,
    neg_goal: Vec<usize>,
    a: Tensor,
    r: Tensor,
    not_done: Tensor,
}

fn batch_rows(d: &Dataset, t: &StateTable, models: &IqlModels, b: &crate::data::Batch) -> BatchRows {
    let n = b.positives.len();
    let mut a = Tensor::zeros((n, 2));
    let mut r = Tensor::zeros((n, 1));
    let mut not_done = Tensor::zeros((n, 1));
    for (i, p) in b.positives.iter().enumerate() {
        let act = models.normalize_action(&d.episodes[p.episode].transitions[p.step].action);
        a[[i, 0]] = act[0];
        a[[i, 1]] = act[1];
        r[[i, 0]] = p.reward;
        not_done[[i, 0]] = if p.done { 0.0 } else { 1.0 };
    }
    BatchRows {
        s: b.positives.iter().map(|p| t.row(p.episode, p.step)).collect(),
        next: b.positives.iter().map(|p| t.row(p.episode, p.step + 1)).collect(),
        goal: b.positives.iter().map(|p| t.row(p.goal_episode, p.goal_state)).collect(),
        neg_s: b.negatives.iter().map(|p| t.row(p.episode, p.step)).collect(),
        neg_goal: b.negatives.iter().map(|p| t.row(p.goal_episode, p.goal_state)).collect(),
        a,
        r,
        not_done,
    }
}

/// Cosine schedule from `lr` at step 0 to `lr * final_frac` at the last step.
pub fn cosine_lr(lr: f64, final_frac: f64, step: usize, steps: usize) -> f64 {
    if steps <= 1 {
        return lr;
    }
    let t = step as f64 / (steps - 1) as f64;
    lr * (final_frac + (1.0 - final_frac) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Stage-2 value learning. The encoder is fine-tuned by the Q loss only.
pub fn train_iql(d: &Dataset, table: &StateTable, mut encoder: Encoder, sim: &SimConfig, cfg: &IqlConfig, seed: u64) -> Result<IqlOutcome> {
    cfg.validate()?;
    let sampler = PairSampler::new(d, cfg.sampler)?;
    let mut models = IqlModels::new(encoder.d_z, sim, cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut opt_q = AdamW::new(&models.q, cfg.adamw());
    let mut opt_v = AdamW::new(&models.v, cfg.adamw());
    let mut opt_pi = AdamW::new(&models.pi, cfg.adamw());
    let mut opt_e = AdamW::new(&encoder.params, cfg.adamw());
    let feats = &table.features;
    let mut log = Vec::new();
    for step in 0..cfg.steps {
        let lr = cosine_lr(cfg.lr, cfg.lr_final_frac, step, cfg.steps);
        for o in [&mut opt_q, &mut opt_v, &mut opt_pi, &mut opt_e] {
            o.config.lr = lr;
        }
        let batch = sampler.sample(d, &mut rng)?;
        let rows = batch_rows(d, table, &models, &batch);
        let n = rows.s.len();
        let mut g = Graph::new();
        let pe = if cfg.finetune_encoder {
            encoder.params.bind(&mut g)
        } else {
            encoder.params.bind_frozen(&mut g)
        };
        let all: Vec<usize> = rows.s.iter().chain(&rows.goal).copied().collect();
        let x = g.constant(feats.select(ndarray::Axis(0), &all));
        let z_all = encoder.forward(&mut g, &pe, x);
        let z = g.gather(z_all, &(0..n).collect::<Vec<_>>());
        let zg = g.gather(z_all, &(n..2 * n).collect::<Vec<_>>());
        let enc = |idx: &[usize]| encoder.encode_features(&feats.select(ndarray::Axis(0), idx));
        let lb = LatentBatch {
            z: g.value(z).clone(),
            a: rows.a,
            r: rows.r,
            not_done: rows.not_done,
            z_next: enc(&rows.next)?,
            z_goal: g.value(zg).clone(),
            z_neg: enc(&rows.neg_s)?,
            z_neg_goal: enc(&rows.neg_goal)?,
        };
        let b = models.bind(&mut g);
        let (t, diag) = models.losses_taped(&mut g, &b, z, zg, &lb, cfg);
        if ![diag.l_q, diag.l_v, diag.l_pi].iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence {
                stage: "iql".into(),
                report: format!("step {step}: L_Q={} L_V={} L_pi={}", diag.l_q, diag.l_v, diag.l_pi),
            });
        }
        let total = g.add(t.l_q, t.l_v);
        let total = g.add(total, t.l_pi);
        let grads = g.backward(total);
        let g_q = models.q.grads(&grads, &b.q);
        opt_q.step(&mut models.q, &g_q)?;
        let g_v = models.v.grads(&grads, &b.v);
        opt_v.step(&mut models.v, &g_v)?;
        let g_pi = models.pi.grads(&grads, &b.pi);
        opt_pi.step(&mut models.pi, &g_pi)?;
        if cfg.finetune_encoder {
            let g_e = encoder.params.grads(&grads, &pe);
            opt_e.step(&mut encoder.params, &g_e)?;
        }
        soft_update(&mut models.q_target, &models.q, cfg.rho);
        if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            log.push(IqlLogRow {
                step,
                l_q: diag.l_q,
                l_v: diag.l_v,
                l_pi: diag.l_pi,
                mean_v_pos: diag.mean_v_pos,
                mean_v_neg: diag.mean_v_neg,
            });
        }
    }
    Ok(IqlOutcome { models, encoder, log })
}
