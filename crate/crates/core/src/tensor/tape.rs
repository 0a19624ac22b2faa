//! Reverse-mode automatic differentiation over coarse tensor primitives.
//!
//! A [`Tape`] owns every intermediate of one forward pass. Nodes are
//! appended in evaluation order, so creation order is a topological order
//! and [`Tape::backward`] simply walks the node list in reverse.
//!
//! Shape violations inside a primitive are programming errors and panic;
//! non-finite values are recorded and surfaced by [`Tape::check_finite`] and
//! [`Tape::backward`].

use std::sync::Arc;

use super::fft::fft2_planes;
use super::{Precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Smooth pointwise nonlinearities and the trigonometric maps used by the
/// temporal phase features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Gelu,
    Tanh,
    Silu,
    Identity,
    Cos,
    Sin,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Unary {
    fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Unary::Tanh => x.tanh(),
            Unary::Silu => x / (1.0 + (-x).exp()),
            Unary::Identity => x,
            Unary::Cos => x.cos(),
            Unary::Sin => x.sin(),
        }
    }

    fn deriv(self, x: f64) -> f64 {
        match self {
            Unary::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Unary::Tanh => 1.0 - x.tanh().powi(2),
            Unary::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Identity => 1.0,
            Unary::Cos => -x.sin(),
            Unary::Sin => x.cos(),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    MulRows(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    BlockMatMul(Var, Var),
    Gather(Var, Arc<[usize]>),
    ScatterAdd(Var, Arc<[usize]>),
    Map(Var, Unary),
    Sum(Var),
    SumRows(Var),
    SoftmaxRows(Var),
    InstanceNorm { x: Var, inv_std: Vec<f64>, dims: [usize; 3] },
    Reshape(Var),
    Narrow(Var, usize),
    Concat(Var, Var),
    Dft2(Var, [usize; 4]),
    Idft2Real(Var, [usize; 4]),
    CvSquared(Var),
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | AddBcast(a, b)
            | MulBcast(a, b)
            | MulRows(a, b)
            | MatMul(a, b)
            | BlockMatMul(a, b)
            | Concat(a, b) => [Some(a), Some(b)],
            Scale(a, _)
            | Gather(a, _)
            | ScatterAdd(a, _)
            | Map(a, _)
            | Sum(a)
            | SumRows(a)
            | SoftmaxRows(a)
            | Reshape(a)
            | Narrow(a, _)
            | Dft2(a, _)
            | Idft2Real(a, _)
            | CvSquared(a) => [Some(a), None],
            InstanceNorm { x, .. } => [Some(x), None],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Single-owner record of one forward evaluation.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    nonfinite: Option<&'static str>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// require gradients or is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone(), Precision::Double))
    }

    /// Like [`Gradients::get`] but substitutes zeros for unreachable inputs.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    c: (&mut [f64], isize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.0.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: callers pass slices whose extents cover the strided m×k, k×n
    // and m×n regions described by the stride arguments.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.0.as_mut_ptr(),
            c.1,
            1,
        );
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new(Precision::Double)
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape { nodes: Vec::new(), precision, nonfinite: None }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, mut data: Vec<f64>, name: &'static str) -> Var {
        self.precision.round_slice(&mut data);
        if self.nonfinite.is_none() && data.iter().any(|v| !v.is_finite()) {
            self.nonfinite = Some(name);
        }
        let requires_grad = op.inputs().iter().flatten().any(|&i| self.rg(i));
        let value = Tensor::from_parts(shape, data, self.precision);
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Fails with a numeric-domain error if any recorded value is non-finite.
    pub fn check_finite(&self) -> Result<()> {
        match self.nonfinite {
            Some(op) => Err(Error::NonFinite { op: op.to_string() }),
            None => Ok(()),
        }
    }

    /// Records a leaf. Gradients are tracked when `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let mut value = t.to_precision(self.precision);
        value.set_requires_grad(requires_grad);
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some("leaf");
        }
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf regardless of the tensor's own flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone().requiring_grad())
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.leaf(t)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: operand shapes differ");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let d = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        self.push(Op::Add(a, b), self.shape(a).to_vec(), d, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let d = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        self.push(Op::Sub(a, b), self.shape(a).to_vec(), d, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let d = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        self.push(Op::Mul(a, b), self.shape(a).to_vec(), d, "mul")
    }

    /// `x + tile(y)`: `y` is repeated along the leading extents of `x`.
    pub fn add_bcast(&mut self, x: Var, y: Var) -> Var {
        let (n, m) = (self.data(x).len(), self.data(y).len());
        assert!(n % m == 0, "add_bcast: {n} not a multiple of {m}");
        let yd = self.data(y);
        let d = self.data(x).iter().enumerate().map(|(j, v)| v + yd[j % m]).collect();
        self.push(Op::AddBcast(x, y), self.shape(x).to_vec(), d, "add_bcast")
    }

    /// `x * tile(y)`: `y` is repeated along the leading extents of `x`.
    pub fn mul_bcast(&mut self, x: Var, y: Var) -> Var {
        let (n, m) = (self.data(x).len(), self.data(y).len());
        assert!(n % m == 0, "mul_bcast: {n} not a multiple of {m}");
        let yd = self.data(y);
        let d = self.data(x).iter().enumerate().map(|(j, v)| v * yd[j % m]).collect();
        self.push(Op::MulBcast(x, y), self.shape(x).to_vec(), d, "mul_bcast")
    }

    /// Scales row `i` of `x: [n, m]` by `w[i]`.
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Var {
        let n = self.data(w).len();
        let len = self.data(x).len();
        assert!(n > 0 && len % n == 0, "mul_rows: {len} values for {n} rows");
        let m = len / n;
        let wd = self.data(w);
        let d = self.data(x).iter().enumerate().map(|(j, v)| v * wd[j / m]).collect();
        self.push(Op::MulRows(x, w), self.shape(x).to_vec(), d, "mul_rows")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let d = self.data(x).iter().map(|v| v * c).collect();
        self.push(Op::Scale(x, c), self.shape(x).to_vec(), d, "scale")
    }

    fn mat_dims(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        assert_eq!(s.len(), 2, "expected a matrix, got {s:?}");
        (s[0], s[1])
    }

    /// `a: [n, k] @ b: [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.mat_dims(a);
        let (k2, m) = self.mat_dims(b);
        assert_eq!(k, k2, "matmul inner extents differ");
        let mut out = vec![0.0; n * m];
        dgemm(n, k, m, (self.data(a), k as isize, 1), (self.data(b), m as isize, 1), (&mut out, m as isize), 0.0);
        self.push(Op::MatMul(a, b), vec![n, m], out, "matmul")
    }

    /// Block-diagonal product: columns of `x: [n, h·d]` are split into `h`
    /// groups and group `i` is multiplied by `w[i]: [d, d]`.
    pub fn block_matmul(&mut self, x: Var, w: Var) -> Var {
        let (n, hd) = self.mat_dims(x);
        let ws = self.shape(w).to_vec();
        assert!(ws.len() == 3 && ws[1] == ws[2] && ws[0] * ws[1] == hd, "block_matmul: bad weight {ws:?}");
        let (h, d) = (ws[0], ws[1]);
        let mut out = vec![0.0; n * hd];
        let (xd, wd) = (self.data(x), self.data(w));
        for i in 0..h {
            dgemm(
                n,
                d,
                d,
                (&xd[i * d..], hd as isize, 1),
                (&wd[i * d * d..], d as isize, 1),
                (&mut out[i * d..], hd as isize),
                0.0,
            );
        }
        self.push(Op::BlockMatMul(x, w), vec![n, hd], out, "block_matmul")
    }

    /// `out[j] = x[idx[j]]` over flattened payloads.
    pub fn gather(&mut self, x: Var, idx: Arc<[usize]>, shape: &[usize]) -> Var {
        assert_eq!(shape.iter().product::<usize>(), idx.len(), "gather: shape/index mismatch");
        let xd = self.data(x);
        let d = idx.iter().map(|&i| xd[i]).collect();
        self.push(Op::Gather(x, idx), shape.to_vec(), d, "gather")
    }

    /// `out[idx[j]] += x[j]` into a zero tensor of the given shape.
    pub fn scatter_add(&mut self, x: Var, idx: Arc<[usize]>, shape: &[usize]) -> Var {
        assert_eq!(self.data(x).len(), idx.len(), "scatter_add: value/index mismatch");
        let mut d = vec![0.0; shape.iter().product()];
        for (v, &i) in self.data(x).iter().zip(idx.iter()) {
            d[i] += v;
        }
        self.push(Op::ScatterAdd(x, idx), shape.to_vec(), d, "scatter_add")
    }

    pub fn map(&mut self, x: Var, f: Unary) -> Var {
        let d = self.data(x).iter().map(|&v| f.eval(v)).collect();
        self.push(Op::Map(x, f), self.shape(x).to_vec(), d, "map")
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Op::Sum(x), vec![1], vec![s], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.data(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Column sums of `x: [n, m]`, giving `[m]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let (_, m) = self.mat_dims(x);
        let mut d = vec![0.0; m];
        for row in self.data(x).chunks_exact(m) {
            for (acc, v) in d.iter_mut().zip(row) {
                *acc += v;
            }
        }
        self.push(Op::SumRows(x), vec![m], d, "sum_rows")
    }

    /// Row-wise softmax of `x: [n, m]`.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (_, m) = self.mat_dims(x);
        let mut d = self.data(x).to_vec();
        for row in d.chunks_exact_mut(m) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        self.push(Op::SoftmaxRows(x), self.shape(x).to_vec(), d, "softmax_rows")
    }

    /// Zero-mean, unit-variance normalization of `x: [G, N, C]` over the
    /// middle axis, separately for each group and channel.
    pub fn instance_norm(&mut self, x: Var, groups: usize, eps: f64) -> Var {
        let len = self.data(x).len();
        let s = self.shape(x).to_vec();
        let c = *s.last().expect("instance_norm on scalar");
        assert!(len % (groups * c) == 0, "instance_norm: bad grouping");
        let n = len / (groups * c);
        let xd = self.data(x);
        let mut out = vec![0.0; len];
        let mut inv_std = vec![0.0; groups * c];
        for g in 0..groups {
            let base = g * n * c;
            for ch in 0..c {
                let mut mean = 0.0;
                for t in 0..n {
                    mean += xd[base + t * c + ch];
                }
                mean /= n as f64;
                let mut var = 0.0;
                for t in 0..n {
                    let e = xd[base + t * c + ch] - mean;
                    var += e * e;
                }
                var /= n as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[g * c + ch] = is;
                for t in 0..n {
                    out[base + t * c + ch] = (xd[base + t * c + ch] - mean) * is;
                }
            }
        }
        self.push(Op::InstanceNorm { x, inv_std, dims: [groups, n, c] }, s, out, "instance_norm")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        assert_eq!(shape.iter().product::<usize>(), self.data(x).len(), "reshape: size mismatch");
        let d = self.data(x).to_vec();
        self.push(Op::Reshape(x), shape.to_vec(), d, "reshape")
    }

    /// Slice `[start, start+len)` of the leading axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(start + len <= s[0], "narrow out of range");
        let inner: usize = s[1..].iter().product();
        let d = self.data(x)[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        self.push(Op::Narrow(x, start * inner), shape, d, "narrow")
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa[1..], sb[1..], "concat: trailing extents differ");
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut d = self.data(a).to_vec();
        d.extend_from_slice(self.data(b));
        self.push(Op::Concat(a, b), shape, d, "concat")
    }

    /// Forward DFT over the two spatial axes of a real `[B, H, W, C]` field.
    /// The result `[2, B, H, W, C]` holds the real part then the imaginary part.
    pub fn dft2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "dft2 expects [B, H, W, C]");
        let dims = [s[0], s[1], s[2], s[3]];
        let mut re = self.data(x).to_vec();
        let mut im = vec![0.0; re.len()];
        fft2_planes(&mut re, &mut im, dims, false);
        re.extend_from_slice(&im);
        self.push(Op::Dft2(x, dims), vec![2, s[0], s[1], s[2], s[3]], re, "dft2")
    }

    /// Real part of the normalized inverse DFT of a `[2, B, H, W, C]` spectrum.
    pub fn idft2_real(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 5 && s[0] == 2, "idft2_real expects [2, B, H, W, C]");
        let dims = [s[1], s[2], s[3], s[4]];
        let half = self.data(x).len() / 2;
        let mut re = self.data(x)[..half].to_vec();
        let mut im = self.data(x)[half..].to_vec();
        fft2_planes(&mut re, &mut im, dims, true);
        let scale = 1.0 / (dims[1] * dims[2]) as f64;
        re.iter_mut().for_each(|v| *v *= scale);
        self.push(Op::Idft2Real(x, dims), s[1..].to_vec(), re, "idft2_real")
    }

    /// Squared coefficient of variation (population std over mean) of a vector.
    pub fn cv_squared(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        self.push(Op::CvSquared(x), vec![1], vec![var / (mean * mean)], "cv_squared")
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let diff = self.sub(a, b);
        let sq = self.mul(diff, diff);
        self.mean(sq)
    }

    /// Reverse accumulation from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        self.check_finite()?;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            for inp in node.op.inputs().into_iter().flatten() {
                if inp.0 >= i {
                    return Err(Error::Internal(format!("tape node {i} consumes node {} recorded after it", inp.0)));
                }
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads =
            grads.into_iter().zip(&self.nodes).map(|(g, node)| if node.requires_grad { g } else { None }).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        use Op::*;
        let node = &self.nodes[i];
        let y = node.value.data();
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let len = self.data(v).len();
                grads[v.0].get_or_insert_with(|| vec![0.0; len])
            }};
        }
        match &node.op {
            Leaf => {}
            Add(a, b) => {
                for &v in &[*a, *b] {
                    if self.rg(v) {
                        acc!(v).iter_mut().zip(g).for_each(|(o, gi)| *o += gi);
                    }
                }
            }
            Sub(a, b) => {
                if self.rg(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(o, gi)| *o += gi);
                }
                if self.rg(*b) {
                    acc!(*b).iter_mut().zip(g).for_each(|(o, gi)| *o -= gi);
                }
            }
            Mul(a, b) => {
                if self.rg(*a) {
                    let bd = self.data(*b);
                    acc!(*a).iter_mut().enumerate().for_each(|(j, o)| *o += g[j] * bd[j]);
                }
                if self.rg(*b) {
                    let ad = self.data(*a);
                    acc!(*b).iter_mut().enumerate().for_each(|(j, o)| *o += g[j] * ad[j]);
                }
            }
            AddBcast(x, yv) => {
                if self.rg(*x) {
                    acc!(*x).iter_mut().zip(g).for_each(|(o, gi)| *o += gi);
                }
                if self.rg(*yv) {
                    let gy = acc!(*yv);
                    let m = gy.len();
                    for (j, gi) in g.iter().enumerate() {
                        gy[j % m] += gi;
                    }
                }
            }
            MulBcast(x, yv) => {
                let yd = self.data(*yv);
                let m = yd.len();
                if self.rg(*x) {
                    acc!(*x).iter_mut().enumerate().for_each(|(j, o)| *o += g[j] * yd[j % m]);
                }
                if self.rg(*yv) {
                    let xd = self.data(*x);
                    let gy = acc!(*yv);
                    for (j, gi) in g.iter().enumerate() {
                        gy[j % m] += gi * xd[j];
                    }
                }
            }
            MulRows(x, w) => {
                let wd = self.data(*w);
                let m = g.len() / wd.len();
                if self.rg(*x) {
                    acc!(*x).iter_mut().enumerate().for_each(|(j, o)| *o += g[j] * wd[j / m]);
                }
                if self.rg(*w) {
                    let xd = self.data(*x);
                    let gw = acc!(*w);
                    for (j, gi) in g.iter().enumerate() {
                        gw[j / m] += gi * xd[j];
                    }
                }
            }
            Scale(x, c) => {
                if self.rg(*x) {
                    acc!(*x).iter_mut().zip(g).for_each(|(o, gi)| *o += c * gi);
                }
            }
            MatMul(a, b) => {
                let (n, k) = self.mat_dims(*a);
                let (_, m) = self.mat_dims(*b);
                if self.rg(*a) {
                    // dA = G · Bᵀ
                    let bd = self.data(*b);
                    let ga = acc!(*a);
                    dgemm(n, m, k, (g, m as isize, 1), (bd, 1, m as isize), (ga, k as isize), 1.0);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · G
                    let ad = self.data(*a);
                    let gb = acc!(*b);
                    dgemm(k, n, m, (ad, 1, k as isize), (g, m as isize, 1), (gb, m as isize), 1.0);
                }
            }
            BlockMatMul(x, w) => {
                let (n, hd) = self.mat_dims(*x);
                let ws = self.shape(*w);
                let (h, d) = (ws[0], ws[1]);
                if self.rg(*x) {
                    let wd = self.data(*w);
                    let gx = acc!(*x);
                    for bi in 0..h {
                        dgemm(
                            n,
                            d,
                            d,
                            (&g[bi * d..], hd as isize, 1),
                            (&wd[bi * d * d..], 1, d as isize),
                            (&mut gx[bi * d..], hd as isize),
                            1.0,
                        );
                    }
                }
                if self.rg(*w) {
                    let xd = self.data(*x);
                    let gw = acc!(*w);
                    for bi in 0..h {
                        dgemm(
                            d,
                            n,
                            d,
                            (&xd[bi * d..], 1, hd as isize),
                            (&g[bi * d..], hd as isize, 1),
                            (&mut gw[bi * d * d..], d as isize),
                            1.0,
                        );
                    }
                }
            }
            Gather(x, idx) => {
                if self.rg(*x) {
                    let gx = acc!(*x);
                    for (gi, &k) in g.iter().zip(idx.iter()) {
                        gx[k] += gi;
                    }
                }
            }
            ScatterAdd(x, idx) => {
                if self.rg(*x) {
                    acc!(*x).iter_mut().zip(idx.iter()).for_each(|(o, &k)| *o += g[k]);
                }
            }
            Map(x, f) => {
                if self.rg(*x) {
                    let xd = self.data(*x);
                    acc!(*x).iter_mut().enumerate().for_each(|(j, o)| *o += g[j] * f.deriv(xd[j]));
                }
            }
            Sum(x) => {
                if self.rg(*x) {
                    acc!(*x).iter_mut().for_each(|o| *o += g[0]);
                }
            }
            SumRows(x) => {
                if self.rg(*x) {
                    let m = g.len();
                    acc!(*x).iter_mut().enumerate().for_each(|(j, o)| *o += g[j % m]);
                }
            }
            SoftmaxRows(x) => {
                if self.rg(*x) {
                    let (_, m) = self.mat_dims(*x);
                    let gx = acc!(*x);
                    for ((gr, yr), gxr) in g.chunks_exact(m).zip(y.chunks_exact(m)).zip(gx.chunks_exact_mut(m)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            gxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            InstanceNorm { x, inv_std, dims } => {
                if self.rg(*x) {
                    let [groups, n, c] = *dims;
                    let gx = acc!(*x);
                    for gi in 0..groups {
                        let base = gi * n * c;
                        for ch in 0..c {
                            let (mut mg, mut mgy) = (0.0, 0.0);
                            for t in 0..n {
                                let k = base + t * c + ch;
                                mg += g[k];
                                mgy += g[k] * y[k];
                            }
                            mg /= n as f64;
                            mgy /= n as f64;
                            let is = inv_std[gi * c + ch];
                            for t in 0..n {
                                let k = base + t * c + ch;
                                gx[k] += is * (g[k] - mg - y[k] * mgy);
                            }
                        }
                    }
                }
            }
            Reshape(x) => {
                if self.rg(*x) {
                    acc!(*x).iter_mut().zip(g).for_each(|(o, gi)| *o += gi);
                }
            }
            Narrow(x, offset) => {
                if self.rg(*x) {
                    let gx = acc!(*x);
                    gx[*offset..*offset + g.len()].iter_mut().zip(g).for_each(|(o, gi)| *o += gi);
                }
            }
            Concat(a, b) => {
                let na = self.data(*a).len();
                if self.rg(*a) {
                    acc!(*a).iter_mut().zip(&g[..na]).for_each(|(o, gi)| *o += gi);
                }
                if self.rg(*b) {
                    acc!(*b).iter_mut().zip(&g[na..]).for_each(|(o, gi)| *o += gi);
                }
            }
            Dft2(x, dims) => {
                // adjoint of the forward transform: conjugate-direction transform, real part
                if self.rg(*x) {
                    let half = g.len() / 2;
                    let mut re = g[..half].to_vec();
                    let mut im = g[half..].to_vec();
                    fft2_planes(&mut re, &mut im, *dims, true);
                    acc!(*x).iter_mut().zip(&re).for_each(|(o, v)| *o += v);
                }
            }
            Idft2Real(x, dims) => {
                // adjoint of Re(F⁻¹·): forward transform of the real cotangent, scaled
                if self.rg(*x) {
                    let mut re = g.to_vec();
                    let mut im = vec![0.0; g.len()];
                    fft2_planes(&mut re, &mut im, *dims, false);
                    let scale = 1.0 / (dims[1] * dims[2]) as f64;
                    let gx = acc!(*x);
                    let half = gx.len() / 2;
                    for j in 0..half {
                        gx[j] += re[j] * scale;
                        gx[half + j] += im[j] * scale;
                    }
                }
            }
            CvSquared(x) => {
                if self.rg(*x) {
                    let d = self.data(*x);
                    let n = d.len() as f64;
                    let mean = d.iter().sum::<f64>() / n;
                    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let m2 = mean * mean;
                    let gx = acc!(*x);
                    for (j, o) in gx.iter_mut().enumerate() {
                        let dv = 2.0 * (d[j] - mean) / n;
                        let dmean = 1.0 / n;
                        *o += g[0] * (dv / m2 - 2.0 * var / (m2 * mean) * dmean);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::default();
        let x = tape.param(&t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x);
        let l = tape.sum(sq);
        let g = tape.backward(l).unwrap().get(x).unwrap();
        assert_eq!(g.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn softmax_dot_gradient() {
        let mut tape = Tape::default();
        let x = tape.param(&t(&[1, 2], &[0.0, 0.0]));
        let p = tape.softmax_rows(x);
        let w = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let pw = tape.mul(p, w);
        let l = tape.sum(pw);
        let g = tape.backward(l).unwrap().get(x).unwrap();
        assert!((g.data()[0] - 0.25).abs() < 1e-15);
        assert!((g.data()[1] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut tape = Tape::default();
        let x = tape.param(&t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::default();
        let x = tape.param(&t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(x, c);
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn nan_is_reported_not_propagated_silently() {
        let mut tape = Tape::default();
        let x = tape.param(&t(&[2], &[1.0, 0.0]));
        let v = tape.constant(t(&[1], &[0.0]));
        let v = tape.reshape(v, &[1]);
        let e = tape.cv_squared(v);
        let _ = x;
        assert!(matches!(tape.check_finite(), Err(Error::NonFinite { .. })));
        assert!(tape.backward(e).is_err());
    }

    #[test]
    fn single_precision_tape_rounds_results() {
        let mut tape = Tape::new(Precision::Single);
        let a = tape.constant(t(&[1], &[0.1]));
        let b = tape.scale(a, 3.0);
        let v = tape.value(b).item();
        assert_eq!(v, v as f32 as f64);
    }
}
