//! Dense building blocks: linear layers, MLPs and a GRU cell.
//!
//! Layers only store indices into a [`ParamSet`]; the forward functions take
//! the per-graph bindings produced by [`ParamSet::bind`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::ParamSet;
use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    w: usize,
    b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = ps.add_uniform(rng, format!("{name}.w"), in_dim, out_dim, in_dim);
        let b = ps.add_uniform(rng, format!("{name}.b"), 1, out_dim, in_dim);
        Self { w, b, in_dim, out_dim }
    }

    /// Zero-initialized layer.
    pub fn zeros(ps: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = ps.add(format!("{name}.w"), super::Tensor::zeros((in_dim, out_dim)));
        let b = ps.add(format!("{name}.b"), super::Tensor::zeros((1, out_dim)));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let y = g.matmul(x, p[self.w]);
        g.add_row(y, p[self.b])
    }

    pub fn weight_index(&self) -> usize {
        self.w
    }

    pub fn bias_index(&self) -> usize {
        self.b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Multilayer perceptron; hidden layers are `linear -> [layer norm] -> act`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
    act: Activation,
    layer_norm: bool,
}

impl Mlp {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        rng: &mut R,
        name: &str,
        dims: &[usize],
        act: Activation,
        layer_norm: bool,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self {
            layers,
            act,
            layer_norm,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn last_layer(&self) -> &Linear {
        self.layers.last().expect("non-empty MLP")
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h);
            if i < last {
                if self.layer_norm {
                    h = g.layer_norm(h);
                }
                h = self.act.apply(g, h);
            }
        }
        h
    }
}

/// Gated recurrent unit with the reset gate applied after the hidden
/// projection: `n = tanh(W_in x + b_in + r * (W_hn h + b_hn))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gru {
    input: Linear,
    hidden: Linear,
    pub hidden_dim: usize,
}

impl Gru {
    pub fn new<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, in_dim: usize, hidden_dim: usize) -> Self {
        let input = Linear::new(ps, rng, &format!("{name}.ih"), in_dim, 3 * hidden_dim);
        let hidden = Linear::new(ps, rng, &format!("{name}.hh"), hidden_dim, 3 * hidden_dim);
        Self {
            input,
            hidden,
            hidden_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input.in_dim
    }

    pub fn layers(&self) -> (&Linear, &Linear) {
        (&self.input, &self.hidden)
    }

    pub fn step(&self, g: &mut Graph, p: &[Var], x: Var, h: Var) -> Var {
        let d = self.hidden_dim;
        let gx = self.input.forward(g, p, x);
        let gh = self.hidden.forward(g, p, h);
        let xr = g.slice(gx, 0, d);
        let xz = g.slice(gx, d, 2 * d);
        let xn = g.slice(gx, 2 * d, 3 * d);
        let hr = g.slice(gh, 0, d);
        let hz = g.slice(gh, d, 2 * d);
        let hn = g.slice(gh, 2 * d, 3 * d);
        let r = g.add(xr, hr);
        let r = g.sigmoid(r);
        let z = g.add(xz, hz);
        let z = g.sigmoid(z);
        let rn = g.mul(r, hn);
        let n = g.add(xn, rn);
        let n = g.tanh(n);
        let keep = g.one_minus(z);
        let a = g.mul(keep, n);
        let b = g.mul(z, h);
        g.add(a, b)
    }

    /// Final hidden state after consuming `seq` from a zero initial state.
    pub fn encode(&self, g: &mut Graph, p: &[Var], seq: &[Var]) -> Var {
        assert!(!seq.is_empty(), "GRU needs a non-empty sequence");
        let rows = g.value(seq[0]).nrows();
        let mut h = g.constant(super::Tensor::zeros((rows, self.hidden_dim)));
        for &x in seq {
            h = self.step(g, p, x, h);
        }
        h
    }
}

// Graph-free forward passes for inference. These mirror the taped versions
// exactly and exist because planning evaluates networks far more often than
// training differentiates them.

fn sigmoid_t(x: &Tensor) -> Tensor {
    x.mapv(super::graph::sigmoid)
}

pub fn layer_norm_rows(x: &mut Tensor) {
    let m = x.ncols() as f64;
    for mut row in x.rows_mut() {
        let mean = row.sum() / m;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        let s = 1.0 / (var + super::graph::LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * s);
    }
}

impl Linear {
    pub fn infer(&self, ps: &ParamSet, x: &Tensor) -> Tensor {
        x.dot(ps.get(self.w)) + ps.get(self.b)
    }
}

impl Activation {
    fn apply_t(self, x: &mut Tensor) {
        match self {
            Activation::Relu => x.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => x.mapv_inplace(f64::tanh),
        }
    }
}

impl Mlp {
    pub fn infer(&self, ps: &ParamSet, x: &Tensor) -> Tensor {
        let last = self.layers.len() - 1;
        let mut h = self.layers[0].infer(ps, x);
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = layer.infer(ps, &h);
            }
            if i < last {
                if self.layer_norm {
                    layer_norm_rows(&mut h);
                }
                self.act.apply_t(&mut h);
            }
        }
        h
    }
}

impl Gru {
    pub fn infer_step(&self, ps: &ParamSet, x: &Tensor, h: &Tensor) -> Tensor {
        use ndarray::s;
        let d = self.hidden_dim;
        let gx = self.input.infer(ps, x);
        let gh = self.hidden.infer(ps, h);
        let r = sigmoid_t(&(&gx.slice(s![.., 0..d]) + &gh.slice(s![.., 0..d])));
        let z = sigmoid_t(&(&gx.slice(s![.., d..2 * d]) + &gh.slice(s![.., d..2 * d])));
        let n = (&gx.slice(s![.., 2 * d..]) + &(&r * &gh.slice(s![.., 2 * d..]))).mapv(f64::tanh);
        &z.mapv(|v| 1.0 - v) * &n + &z * h
    }

    pub fn infer_encode(&self, ps: &ParamSet, seq: &[Tensor]) -> Tensor {
        assert!(!seq.is_empty(), "GRU needs a non-empty sequence");
        let mut h = Tensor::zeros((seq[0].nrows(), self.hidden_dim));
        for x in seq {
            h = self.infer_step(ps, x, &h);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gru_zero_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new(1);
        let gru = Gru::new(&mut ps, &mut rng, "gru", 4, 6);
        // Biases zeroed: the all-zero input sequence keeps h at zero.
        for idx in [gru.input.bias_index(), gru.hidden.bias_index()] {
            ps.get_mut(idx).fill(0.0);
        }
        let mut g = Graph::new();
        let p = ps.bind_frozen(&mut g);
        let xs: Vec<_> = (0..5).map(|_| g.constant(Tensor::zeros((3, 4)))).collect();
        let h = gru.encode(&mut g, &p, &xs);
        assert!(g.value(h).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mlp_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new(2);
        let mlp = Mlp::new(&mut ps, &mut rng, "m", &[5, 8, 8, 3], Activation::Relu, true);
        let mut g = Graph::new();
        let p = ps.bind(&mut g);
        let x = g.constant(Tensor::ones((7, 5)));
        let y = mlp.forward(&mut g, &p, x);
        assert_eq!(g.value(y).dim(), (7, 3));
        assert_eq!(mlp.in_dim(), 5);
        assert_eq!(mlp.out_dim(), 3);
    }

    #[test]
    fn inference_matches_taped_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new(3);
        let mlp = Mlp::new(&mut ps, &mut rng, "m", &[4, 6, 2], Activation::Tanh, true);
        let gru = Gru::new(&mut ps, &mut rng, "g", 2, 5);
        let x = Tensor::from_shape_fn((3, 4), |(i, j)| (i as f64 - j as f64) * 0.3);

        let mut g = Graph::new();
        let p = ps.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let y = mlp.forward(&mut g, &p, xv);
        let h = gru.encode(&mut g, &p, &[y, y]);

        let yi = mlp.infer(&ps, &x);
        let hi = gru.infer_encode(&ps, &[yi.clone(), yi.clone()]);
        for (a, b) in g.value(y).iter().zip(yi.iter()).chain(g.value(h).iter().zip(hi.iter())) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
