//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Calling [`Graph::backward`] on a scalar (1×1) node walks the tape in
//! reverse and accumulates gradients for every node that depends on a
//! trainable leaf. Graphs are cheap to build and are discarded after each
//! step; they are never shared between threads.

use ndarray::{Array2, Axis, Zip};

pub type Tensor = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    LayerNorm(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Gather(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
    // LayerNorm keeps the per-row inverse standard deviation here.
    aux: Option<Tensor>,
}

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by node, produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` was not reached.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.raw_dim()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            tracked,
            aux: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.dim(), (1, 1));
        t[[0, 0]]
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copy of `v`'s value as an untracked leaf (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let tr = self.tracked(a) || self.tracked(b);
        self.push(out, Op::MatMul(a, b), tr)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape");
        let out = self.value(a) + self.value(b);
        let tr = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Add(a, b), tr)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shape");
        let out = self.value(a) - self.value(b);
        let tr = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Sub(a, b), tr)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape");
        let out = self.value(a) * self.value(b);
        let tr = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Mul(a, b), tr)
    }

    /// `a[n×m] + row[1×m]`, broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, m) = self.value(a).dim();
        assert_eq!(self.value(row).dim(), (1, m), "add_row shape");
        let out = self.value(a) + self.value(row);
        let tr = self.tracked(a) || self.tracked(row);
        self.push(out, Op::AddRow(a, row), tr)
    }

    /// `a[n×m] * row[1×m]`, broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (_, m) = self.value(a).dim();
        assert_eq!(self.value(row).dim(), (1, m), "mul_row shape");
        let out = self.value(a) * self.value(row);
        let tr = self.tracked(a) || self.tracked(row);
        self.push(out, Op::MulRow(a, row), tr)
    }

    /// `a[n×m] * col[n×1]`, broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (n, _) = self.value(a).dim();
        assert_eq!(self.value(col).dim(), (n, 1), "mul_col shape");
        let out = self.value(a) * self.value(col);
        let tr = self.tracked(a) || self.tracked(col);
        self.push(out, Op::MulCol(a, col), tr)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let tr = self.tracked(a);
        self.push(out, Op::Scale(a, c), tr)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        let tr = self.tracked(a);
        self.push(out, Op::Offset(a), tr)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.offset(n, 1.0)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).mapv(f);
        let tr = self.tracked(a);
        self.push(out, op, tr)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Elementwise clamp; gradient passes only where the input lies inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (n, m) = x.dim();
        let mut out = Tensor::zeros((n, m));
        let mut inv = Tensor::zeros((n, 1));
        for (i, row) in x.axis_iter(Axis(0)).enumerate() {
            let mean = row.sum() / m as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            inv[[i, 0]] = s;
            for (j, v) in row.iter().enumerate() {
                out[[i, j]] = (v - mean) * s;
            }
        }
        let tr = self.tracked(a);
        let id = self.push(out, Op::LayerNorm(a), tr);
        self.nodes[id.0].aux = Some(inv);
        id
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let tr = self.tracked(a);
        self.push(Tensor::from_elem((1, 1), s), Op::Sum(a), tr)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.len().max(1) as f64;
        let tr = self.tracked(a);
        self.push(Tensor::from_elem((1, 1), s), Op::Mean(a), tr)
    }

    /// Sum over columns, producing an `n×1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let tr = self.tracked(a);
        self.push(s, Op::RowSum(a), tr)
    }

    /// Column-wise concatenation of equal-height blocks.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat: row counts differ");
        let tr = parts.iter().any(|p| self.tracked(*p));
        self.push(out, Op::Concat(parts.to_vec()), tr)
    }

    /// Columns `start..end`.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self
            .value(a)
            .slice(ndarray::s![.., start..end])
            .to_owned();
        let tr = self.tracked(a);
        self.push(out, Op::Slice(a, start, end), tr)
    }

    /// Rows of `a` picked by `idx` (repeats allowed).
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select(Axis(0), idx);
        let tr = self.tracked(a);
        self.push(out, Op::Gather(a, idx.to_vec()), tr)
    }

    /// Backpropagate from a 1×1 node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Tensor| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    acc(*a, g.dot(&val(*b).t()));
                }
                if self.tracked(*b) {
                    acc(*b, val(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    acc(*a, g * val(*b));
                }
                if self.tracked(*b) {
                    acc(*b, g * val(*a));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.tracked(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.tracked(*a) {
                    acc(*a, g * val(*row));
                }
                if self.tracked(*row) {
                    let d = (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(*row, d);
                }
            }
            Op::MulCol(a, col) => {
                if self.tracked(*a) {
                    acc(*a, g * val(*col));
                }
                if self.tracked(*col) {
                    let d = (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*col, d);
                }
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::Offset(a) => acc(*a, g.clone()),
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= 1.0 - y * y);
                acc(*a, d);
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= y * (1.0 - y));
                acc(*a, d);
            }
            Op::Exp(a) => acc(*a, g * &node.value),
            Op::Log(a) => acc(*a, g / val(*a)),
            Op::Square(a) => acc(*a, g * val(*a) * 2.0),
            Op::Clamp(a, lo, hi) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    if x < *lo || x > *hi {
                        *d = 0.0;
                    }
                });
                acc(*a, d);
            }
            Op::LayerNorm(a) => {
                let y = &node.value;
                let inv = node.aux.as_ref().expect("layer norm aux");
                let (n, m) = y.dim();
                let mut d = Tensor::zeros((n, m));
                for i in 0..n {
                    let gy = g.row(i);
                    let yr = y.row(i);
                    let mean_g = gy.sum() / m as f64;
                    let mean_gy = gy.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>()
                        / m as f64;
                    for j in 0..m {
                        d[[i, j]] = inv[[i, 0]] * (gy[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                acc(*a, d);
            }
            Op::Sum(a) => {
                let s = g[[0, 0]];
                acc(*a, Tensor::from_elem(val(*a).raw_dim(), s));
            }
            Op::Mean(a) => {
                let t = val(*a);
                let s = g[[0, 0]] / t.len().max(1) as f64;
                acc(*a, Tensor::from_elem(t.raw_dim(), s));
            }
            Op::RowSum(a) => {
                let (_, m) = val(*a).dim();
                let d = ndarray::concatenate(Axis(1), &vec![g.view(); m]).expect("row_sum grad");
                acc(*a, d);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    if self.tracked(*p) {
                        acc(*p, g.slice(ndarray::s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::Slice(a, start, end) => {
                let mut d = Tensor::zeros(val(*a).raw_dim());
                d.slice_mut(ndarray::s![.., *start..*end]).assign(g);
                acc(*a, d);
            }
            Op::Gather(a, idx) => {
                let mut d = Tensor::zeros(val(*a).raw_dim());
                for (r, &src) in idx.iter().enumerate() {
                    let mut row = d.row_mut(src);
                    row += &g.row(r);
                }
                acc(*a, d);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor) -> Tensor {
        let h = 1e-6;
        let mut out = Tensor::zeros(x.raw_dim());
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut p = x.clone();
                p[[i, j]] += h;
                let mut m = x.clone();
                m[[i, j]] -= h;
                out[[i, j]] = (f(&p) - f(&m)) / (2.0 * h);
            }
        }
        out
    }

    fn check(build: impl Fn(&mut Graph, Var) -> Var, x: Tensor) {
        let f = |t: &Tensor| {
            let mut g = Graph::new();
            let v = g.param(t.clone());
            let out = build(&mut g, v);
            g.scalar(out)
        };
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let out = build(&mut g, v);
        let grads = g.backward(out);
        let analytic = grads.get_or_zeros(v, &x);
        let numeric = numeric_grad(f, &x);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-5 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let x = array![[0.3, -1.2, 2.0], [0.7, 0.1, -0.4]];
        check(|g, v| { let t = g.tanh(v); g.sum(t) }, x.clone());
        check(|g, v| { let t = g.sigmoid(v); let s = g.square(t); g.mean(s) }, x.clone());
        check(|g, v| { let t = g.exp(v); g.sum(t) }, x.clone());
        check(|g, v| { let e = g.exp(v); let l = g.log(e); let s = g.square(l); g.sum(s) }, x.clone());
        check(|g, v| { let t = g.relu(v); let s = g.square(t); g.sum(s) }, x.clone());
        check(|g, v| { let t = g.clamp(v, -1.0, 1.0); let s = g.square(t); g.sum(s) }, x.clone());
    }

    #[test]
    fn layer_norm_gradient() {
        let x = array![[0.3, -1.2, 2.0, 0.5], [0.7, 0.1, -0.4, 3.0]];
        let w = array![[1.0, -2.0, 0.5, 0.3], [0.2, 0.4, -1.0, 2.0]];
        check(
            move |g, v| {
                let n = g.layer_norm(v);
                let c = g.constant(w.clone());
                let p = g.mul(n, c);
                g.sum(p)
            },
            x,
        );
    }

    #[test]
    fn structural_ops_gradient() {
        let x = array![[0.3, -1.2, 2.0], [0.7, 0.1, -0.4]];
        check(
            |g, v| {
                let w = g.constant(array![[1.0, 2.0], [0.5, -1.0], [0.3, 0.2]]);
                let m = g.matmul(v, w);
                let s = g.slice(v, 1, 3);
                let c = g.concat(&[m, s]);
                let r = g.row_sum(c);
                let q = g.square(r);
                let gth = g.gather(v, &[1, 1, 0]);
                let gs = g.sum(gth);
                let qs = g.sum(q);
                g.add(qs, gs)
            },
            x,
        );
    }

    #[test]
    fn broadcast_ops_gradient() {
        let x = array![[0.3, -1.2, 2.0]];
        check(
            |g, row| {
                let a = g.constant(array![[1.0, 2.0, 3.0], [-1.0, 0.5, 0.2]]);
                let col = g.constant(array![[2.0], [-3.0]]);
                let s = g.add_row(a, row);
                let m = g.mul_row(s, row);
                let c = g.mul_col(m, col);
                let sq = g.square(c);
                g.sum(sq)
            },
            x.clone(),
        );
        check(
            |g, col| {
                let a = g.constant(array![[1.0, 2.0, 3.0]]);
                let t = g.constant(array![[1.0, 2.0, 3.0], [-1.0, 0.5, 0.2], [0.3, 0.3, 0.1]]);
                let ct = g.matmul(t, col);
                let m = g.mul_col(t, ct);
                let w = g.mul_row(m, a);
                let s = g.square(w);
                g.mean(s)
            },
            array![[0.5], [-0.2], [1.0]],
        );
    }

    #[test]
    fn detached_nodes_block_gradient() {
        let mut g = Graph::new();
        let p = g.param(array![[2.0]]);
        let d = g.detach(p);
        let y = g.mul(p, d);
        let grads = g.backward(y);
        assert_eq!(grads.get(p).unwrap()[[0, 0]], 2.0);
    }
}
