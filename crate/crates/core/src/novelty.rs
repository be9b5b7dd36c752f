//! Random network distillation over latents.
//!
//! A frozen random prior `f̄` and a trained predictor `f` (one extra hidden
//! layer) map latents to `D_rnd` outputs; novelty is `‖f̄(z) - f(z)‖²`.
//! Inputs are standardized with statistics frozen at training time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, AdamW, AdamWConfig, Archive, Graph, Mlp, ParamSet, Tensor, Var};
use crate::representation::sample_rows;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoveltyConfig {
    pub d_rnd: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Give the predictor one more hidden layer than the prior.
    pub predictor_extra_layer: bool,
}

impl Default for NoveltyConfig {
    fn default() -> Self {
        Self {
            d_rnd: 32,
            hidden: 128,
            steps: 5000,
            batch_size: 128,
            lr: 1e-3,
            weight_decay: 0.0,
            predictor_extra_layer: true,
        }
    }
}

/// `‖a - b‖²`.
pub fn novelty_metric(prior_out: &[f64], predictor_out: &[f64]) -> f64 {
    prior_out.iter().zip(predictor_out).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rnd {
    pub prior: ParamSet,
    pub predictor: ParamSet,
    prior_net: Mlp,
    predictor_net: Mlp,
    /// Per-dimension input mean and inverse std, `1 × d_z` each.
    pub input_stats: ParamSet,
    pub d_z: usize,
}

impl Rnd {
    pub fn new(d_z: usize, cfg: &NoveltyConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(6);
        let h = cfg.hidden;
        let mut prior = ParamSet::new(seed);
        let prior_net = Mlp::new(&mut prior, &mut rng, "rnd", &[d_z, h, h, cfg.d_rnd], Activation::Relu, false);
        let mut predictor = ParamSet::new(seed);
        let dims: &[usize] = if cfg.predictor_extra_layer {
            &[d_z, h, h, h, cfg.d_rnd]
        } else {
            &[d_z, h, h, cfg.d_rnd]
        };
        let predictor_net = Mlp::new(&mut predictor, &mut rng, "rnd", dims, Activation::Relu, false);
        let mut input_stats = ParamSet::new(seed);
        input_stats.add("mean", Tensor::zeros((1, d_z)));
        input_stats.add("inv_std", Tensor::ones((1, d_z)));
        Self {
            prior,
            predictor,
            prior_net,
            predictor_net,
            input_stats,
            d_z,
        }
    }

    fn standardize(&self, z: &Tensor) -> Tensor {
        (z - self.input_stats.get(0)) * self.input_stats.get(1)
    }

    /// Freeze input statistics from training latents.
    pub fn fit_input_stats(&mut self, z: &Tensor) {
        let n = z.nrows().max(1) as f64;
        let mean = z.sum_axis(ndarray::Axis(0)) / n;
        let var = z
            .rows()
            .into_iter()
            .fold(ndarray::Array1::<f64>::zeros(z.ncols()), |acc, r| acc + (&r - &mean).mapv(|v| v * v))
            / n;
        *self.input_stats.get_mut(0) = mean.insert_axis(ndarray::Axis(0));
        *self.input_stats.get_mut(1) = var.mapv(|v| 1.0 / (v + 1e-6).sqrt()).insert_axis(ndarray::Axis(0));
    }

    /// Novelty of every row of `z`.
    pub fn score_rows(&self, z: &Tensor) -> Vec<f64> {
        let z = &self.standardize(z);
        let a = self.prior_net.infer(&self.prior, z);
        let b = self.predictor_net.infer(&self.predictor, z);
        (&a - &b).rows().into_iter().map(|r| r.iter().map(|v| v * v).sum()).collect()
    }

    pub fn score(&self, z: &[f64]) -> f64 {
        let t = Tensor::from_shape_vec((1, z.len()), z.to_vec()).expect("row");
        self.score_rows(&t)[0]
    }

    /// Mean novelty over a batch on a tape, with the prior held constant.
    pub fn loss_taped(&self, g: &mut Graph, p: &[Var], z: &Tensor) -> Var {
        let z = &self.standardize(z);
        let target = g.constant(self.prior_net.infer(&self.prior, z));
        let x = g.constant(z.clone());
        let y = self.predictor_net.forward(g, p, x);
        let d = g.sub(y, target);
        let d = g.square(d);
        let d = g.row_sum(d);
        g.mean(d)
    }

    pub fn prior_checksum(&self) -> String {
        self.prior.checksum()
    }

    pub fn save_into(&self, a: &mut Archive) {
        a.insert_params("rnd_prior", &self.prior);
        a.insert_params("rnd_predictor", &self.predictor);
        a.insert_params("rnd_stats", &self.input_stats);
    }

    pub fn load_from(&mut self, a: &Archive) -> Result<()> {
        a.load_into("rnd_prior", &mut self.prior)?;
        a.load_into("rnd_predictor", &mut self.predictor)?;
        a.load_into("rnd_stats", &mut self.input_stats)
    }
}

/// Train the predictor on latents (after freezing input statistics); returns the mean training novelty per logged step.
pub fn train_rnd(z: &Tensor, rnd: &mut Rnd, cfg: &NoveltyConfig, seed: u64) -> Result<Vec<(usize, f64)>> {
    if z.nrows() == 0 {
        return Err(Error::Empty("no latents to train novelty on".into()));
    }
    rnd.fit_input_stats(z);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let mut opt = AdamW::new(
        &rnd.predictor,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let mut log = Vec::new();
    for step in 0..cfg.steps {
        let batch = sample_rows(z, cfg.batch_size, &mut rng);
        let mut g = Graph::new();
        let p = rnd.predictor.bind(&mut g);
        let l = rnd.loss_taped(&mut g, &p, &batch);
        let v = g.scalar(l);
        if !v.is_finite() {
            return Err(Error::Divergence {
                stage: "rnd".into(),
                report: format!("step {step}: loss {v}"),
            });
        }
        let grads = g.backward(l);
        let step_grads = rnd.predictor.grads(&grads, &p);
        opt.step(&mut rnd.predictor, &step_grads)?;
        if step % 50 == 0 || step + 1 == cfg.steps {
            log.push((step, v));
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        assert_eq!(novelty_metric(&[1.0, 0.0], &[0.0, 0.0]), 1.0);
        assert_eq!(novelty_metric(&[0.5, -2.0], &[0.5, -2.0]), 0.0);
    }
}
