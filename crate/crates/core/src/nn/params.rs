//! Named parameter containers, AdamW, target-network mixing and a
//! finite-difference gradient checker.

use rand::Rng;
use sha2::{Digest, Sha256};

use super::graph::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Named real tensors with fixed shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    seed: u64,
}

impl ParamSet {
    pub fn new(seed: u64) -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
    pub fn add_uniform<R: Rng>(
        &mut self,
        rng: &mut R,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
    ) -> usize {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Register every tensor as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Register every tensor as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }

    pub fn grads(&self, grads: &Gradients, vars: &[Var]) -> Vec<Tensor> {
        vars.iter()
            .zip(&self.tensors)
            .map(|(v, t)| grads.get_or_zeros(*v, t))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Hex SHA-256 over names, shapes and values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.iter() {
            h.update(n.as_bytes());
            h.update((t.nrows() as u64).to_le_bytes());
            h.update((t.ncols() as u64).to_le_bytes());
            for v in t.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Replace values from another set with identical names and shapes.
    pub fn assign(&mut self, other: &ParamSet) -> Result<()> {
        self.check_compatible(other)?;
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }

    fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Malformed("parameter names differ".into()));
        }
        for (i, (a, b)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if a.dim() != b.dim() {
                return Err(Error::DimMismatch {
                    what: format!("parameter {}", self.names[i]),
                    expected: a.len(),
                    found: b.len(),
                });
            }
        }
        Ok(())
    }

    pub(crate) fn from_parts(names: Vec<String>, tensors: Vec<Tensor>, seed: u64) -> Self {
        Self {
            names,
            tensors,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// AdamW state: per-parameter first/second moments and the step count.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &ParamSet, config: AdamWConfig) -> Self {
        let zeros = || params.tensors.iter().map(|t| Tensor::zeros(t.raw_dim())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One decoupled-weight-decay Adam update.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        assert_eq!(grads.len(), params.len(), "gradient count");
        for (i, g) in grads.iter().enumerate() {
            assert_eq!(g.dim(), params.tensors[i].dim(), "gradient shape");
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(params.names[i].clone()));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .tensors
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= c.lr * c.weight_decay * *p;
                    *p -= c.lr * mh / (vh.sqrt() + c.eps);
                });
        }
        Ok(())
    }
}

/// `target <- (1 - rho) * target + rho * online`
pub fn soft_update(target: &mut ParamSet, online: &ParamSet, rho: f64) {
    assert!((0.0..=1.0).contains(&rho), "rho must lie in [0, 1]");
    target
        .check_compatible(online)
        .expect("soft_update shape mismatch");
    for (t, o) in target.tensors.iter_mut().zip(&online.tensors) {
        ndarray::Zip::from(t)
            .and(o)
            .for_each(|t, &o| *t = (1.0 - rho) * *t + rho * o);
    }
}

/// Largest relative error between the analytic gradient of `loss` and central
/// finite differences. At most `max_coords` coordinates per tensor are probed
/// (chosen by `rng`); `None` probes all of them.
pub fn grad_check<F, R>(
    loss: F,
    params: &ParamSet,
    epsilon: f64,
    max_coords: Option<usize>,
    rng: &mut R,
) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
    R: Rng,
{
    let eval = |ps: &ParamSet| {
        let mut g = Graph::new();
        let vars = ps.bind(&mut g);
        let l = loss(&mut g, &vars);
        g.scalar(l)
    };
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let l = loss(&mut g, &vars);
    let grads = params.grads(&g.backward(l), &vars);

    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (ti, t) in params.tensors.iter().enumerate() {
        let n = t.len();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => (0..k).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        let cols = t.ncols();
        for flat in coords {
            let (r, c) = (flat / cols, flat % cols);
            let orig = t[[r, c]];
            probe.tensors[ti][[r, c]] = orig + epsilon;
            let up = eval(&probe);
            probe.tensors[ti][[r, c]] = orig - epsilon;
            let down = eval(&probe);
            probe.tensors[ti][[r, c]] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let analytic = grads[ti][[r, c]];
            let denom = analytic.abs().max(numeric.abs()).max(1e-5);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}
