//! Reverse-mode differentiation over a closed set of matrix operations.
//!
//! A [`Graph`] is a single-use tape: leaves are registered as constants,
//! free variables or named parameters, every operation appends a node, and
//! [`Graph::backward`] walks the nodes in reverse once. Gradients only flow
//! into nodes that depend on a variable or parameter.

use std::collections::BTreeMap;
use std::f64::consts::{LN_2, PI};

use crate::error::{Error, Result};
use crate::tensor::{self, gemm, gemm_nt, gemm_tn, Tensor};

/// Variance floor used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Variable,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    SubCol(Var, Var),
    DivCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalar(Var, Var),
    Softmax(Var),
    CausalSoftmax(Var),
    Elu(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Log2(Var),
    Exp(Var),
    Softplus(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Transpose(Var),
    Reshape(Var),
    Interleave(Vec<Var>),
    Conv1d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        kernel: usize,
        stride: usize,
    },
    MaxPoolCols {
        input: Var,
        argmax: Vec<usize>,
    },
    GroupCombine {
        input: Var,
        weights: Var,
    },
    Sum(Var),
    Mean(Var),
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    GaussianKernel {
        sigma: Var,
        dist: Tensor,
        prefactor: bool,
    },
    JsDivergence(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of a backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(value, op, needs)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Variable, true)
    }

    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.push(value, Op::Param(name.into()), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.derived(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.derived(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.derived(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.derived(value, Op::Mul(a, b), &[a, b]))
    }

    /// `a (r×c) + row (1×c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.shape(row) != [1, c] {
            return Err(Error::dim("add_row", self.shape(a), self.shape(row)));
        }
        let b = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..r {
            for (x, y) in value.row_mut(i).iter_mut().zip(&b) {
                *x += y;
            }
        }
        Ok(self.derived(value, Op::AddRow(a, row), &[a, row]))
    }

    /// `a (r×c) - col (r×1)` broadcast over columns.
    pub fn sub_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, _) = self.dims(a);
        if self.shape(col) != [r, 1] {
            return Err(Error::dim("sub_col", self.shape(a), self.shape(col)));
        }
        let mut value = self.value(a).clone();
        for i in 0..r {
            let s = self.value(col).data()[i];
            value.row_mut(i).iter_mut().for_each(|x| *x -= s);
        }
        Ok(self.derived(value, Op::SubCol(a, col), &[a, col]))
    }

    /// `a (r×c) / col (r×1)` broadcast over columns.
    pub fn div_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, _) = self.dims(a);
        if self.shape(col) != [r, 1] {
            return Err(Error::dim("div_col", self.shape(a), self.shape(col)));
        }
        let mut value = self.value(a).clone();
        for i in 0..r {
            let s = self.value(col).data()[i];
            value.row_mut(i).iter_mut().for_each(|x| *x /= s);
        }
        Ok(self.derived(value, Op::DivCol(a, col), &[a, col]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.derived(value, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.derived(value, Op::AddScalar(a), &[a])
    }

    /// `a * s` where `s` is a 1×1 node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("mul_scalar", self.shape(a), self.shape(s)));
        }
        let k = self.value(s).item();
        let value = self.value(a).scale(k);
        Ok(self.derived(value, Op::MulScalar(a, s), &[a, s]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = tensor::softmax_rows(self.value(a))?;
        Ok(self.derived(value, Op::Softmax(a), &[a]))
    }

    /// Row-wise softmax restricted to columns `j <= i`; masked entries are 0.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r != c {
            return Err(Error::dim("causal_softmax_rows", self.shape(a), &[r, r]));
        }
        let mut value = self.value(a).clone();
        for i in 0..r {
            let row = value.row_mut(i);
            tensor::softmax_in_place(&mut row[..=i]);
            row[i + 1..].iter_mut().for_each(|x| *x = 0.0);
        }
        Ok(self.derived(value, Op::CausalSoftmax(a), &[a]))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(tensor::elu);
        self.derived(value, Op::Elu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(tensor::sigmoid);
        self.derived(value, Op::Sigmoid(a), &[a])
    }

    /// Square root. The backward pass uses a zero subgradient at 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let value = tensor::elementwise(self.value(a), tensor::Elementwise::Sqrt)?;
        Ok(self.derived(value, Op::Sqrt(a), &[a]))
    }

    pub fn log2(&mut self, a: Var) -> Result<Var> {
        let value = tensor::elementwise(self.value(a), tensor::Elementwise::Log2)?;
        Ok(self.derived(value, Op::Log2(a), &[a]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.derived(value, Op::Exp(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(tensor::softplus);
        self.derived(value, Op::Softplus(a), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.dims(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(Error::dim(
                    "concat_rows",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::matrix(rows, c, data)?;
        Ok(self.derived(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.dims(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(Error::dim(
                    "concat_cols",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::matrix(r, total, data)?;
        Ok(self.derived(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let (r, _) = self.dims(a);
        if start + count > r {
            return Err(Error::dim("slice_rows", self.shape(a), &[start, count]));
        }
        let value = self.value(a).slice_rows(start, count);
        Ok(self.derived(value, Op::SliceRows(a, start), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + count > c {
            return Err(Error::dim("slice_cols", self.shape(a), &[start, count]));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(r * count);
        for i in 0..r {
            data.extend_from_slice(&src.row(i)[start..start + count]);
        }
        let value = Tensor::matrix(r, count, data)?;
        Ok(self.derived(value, Op::SliceCols(a, start), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.derived(value, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.derived(value, Op::Reshape(a), &[a]))
    }

    /// Interleaves equally shaped r×c parts row by row: the output has
    /// `parts.len() * r` rows and row `p.len()*t + k` is row `t` of part `k`.
    pub fn interleave_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let shape = self.shape(parts[0]).to_vec();
        for &p in parts {
            if self.shape(p) != shape.as_slice() {
                return Err(Error::dim("interleave_rows", &shape, self.shape(p)));
            }
        }
        let (r, c) = self.dims(parts[0]);
        let mut data = Vec::with_capacity(parts.len() * r * c);
        for t in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(t));
            }
        }
        let value = Tensor::matrix(parts.len() * r, c, data)?;
        Ok(self.derived(value, Op::Interleave(parts.to_vec()), parts))
    }

    /// 1-D convolution along rows. `input` is positions × in-channels,
    /// `weight` is (kernel · in-channels) × out-channels with row index
    /// `tap * in_channels + channel`, `bias` is 1 × out-channels.
    pub fn conv1d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        kernel: usize,
        stride: usize,
    ) -> Result<Var> {
        let (positions, cin) = self.dims(input);
        let (wr, cout) = self.dims(weight);
        if wr != kernel * cin || kernel == 0 || stride == 0 || positions < kernel {
            return Err(Error::dim("conv1d", self.shape(input), self.shape(weight)));
        }
        if let Some(b) = bias {
            if self.shape(b) != [1, cout] {
                return Err(Error::dim("conv1d bias", self.shape(weight), self.shape(b)));
            }
        }
        let steps = (positions - kernel) / stride + 1;
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut out = vec![0.0; steps * cout];
        for t in 0..steps {
            let window = &x[t * stride * cin..(t * stride + kernel) * cin];
            gemm(
                window,
                w,
                &mut out[t * cout..(t + 1) * cout],
                1,
                kernel * cin,
                cout,
            );
        }
        let mut value = Tensor::matrix(steps, cout, out)?;
        if let Some(b) = bias {
            let b = self.value(b).data().to_vec();
            for t in 0..steps {
                value
                    .row_mut(t)
                    .iter_mut()
                    .zip(&b)
                    .for_each(|(o, bv)| *o += bv);
            }
        }
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.derived(
            value,
            Op::Conv1d {
                input,
                weight,
                bias,
                kernel,
                stride,
            },
            &parents,
        ))
    }

    /// Non-overlapping max-pooling along columns with the given window.
    pub fn max_pool_cols(&mut self, a: Var, window: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if window == 0 || c % window != 0 {
            return Err(Error::dim("max_pool_cols", self.shape(a), &[window]));
        }
        let groups = c / window;
        let src = self.value(a);
        let mut data = Vec::with_capacity(r * groups);
        let mut argmax = Vec::with_capacity(r * groups);
        for i in 0..r {
            let row = src.row(i);
            for gi in 0..groups {
                let mut best = gi * window;
                for j in gi * window..(gi + 1) * window {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                data.push(row[best]);
                argmax.push(i * c + best);
            }
        }
        let value = Tensor::matrix(r, groups, data)?;
        Ok(self.derived(value, Op::MaxPoolCols { input: a, argmax }, &[a]))
    }

    /// Weighted sum over consecutive row groups: for `weights` of shape
    /// k×1, output row `t` is `Σ_m weights[m] · input[k·t + m]`.
    pub fn group_combine(&mut self, input: Var, weights: Var) -> Result<Var> {
        let (r, c) = self.dims(input);
        let (k, wc) = self.dims(weights);
        if wc != 1 || k == 0 || r % k != 0 {
            return Err(Error::dim(
                "group_combine",
                self.shape(input),
                self.shape(weights),
            ));
        }
        let steps = r / k;
        let w = self.value(weights).data().to_vec();
        let x = self.value(input);
        let mut data = vec![0.0; steps * c];
        for t in 0..steps {
            let out = &mut data[t * c..(t + 1) * c];
            for (m, wm) in w.iter().enumerate() {
                out.iter_mut()
                    .zip(x.row(k * t + m))
                    .for_each(|(o, v)| *o += wm * v);
            }
        }
        let value = Tensor::matrix(steps, c, data)?;
        Ok(self.derived(
            value,
            Op::GroupCombine { input, weights },
            &[input, weights],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.derived(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.derived(value, Op::Mean(a), &[a])
    }

    /// Per-row normalisation to zero mean and unit variance, then `gain` and
    /// `bias` (each 1×c).
    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(input);
        if self.shape(gain) != [1, c] || self.shape(bias) != [1, c] {
            return Err(Error::dim(
                "layer_norm",
                self.shape(input),
                self.shape(gain),
            ));
        }
        let x = self.value(input);
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut xhat = x.clone();
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(i);
            for j in 0..c {
                xh[j] = (row[j] - mean) * is;
            }
            let o = out.row_mut(i);
            for j in 0..c {
                o[j] = xh[j] * gv[j] + bv[j];
            }
        }
        Ok(self.derived(
            out,
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[input, gain, bias],
        ))
    }

    /// `K[i][j] = c(σ_i) · exp(-dist[i][j] / (2σ_i²))` with
    /// `c(σ) = 1/(√(2π)σ)` when `prefactor` is set and 1 otherwise.
    /// `sigma` is L×1, `dist` a constant L×L matrix.
    pub fn gaussian_kernel(&mut self, sigma: Var, dist: &Tensor, prefactor: bool) -> Result<Var> {
        let (l, one) = self.dims(sigma);
        if one != 1 || dist.shape() != [l, l] {
            return Err(Error::dim(
                "gaussian_kernel",
                self.shape(sigma),
                dist.shape(),
            ));
        }
        let s = self.value(sigma).data();
        let mut value = Tensor::zeros(&[l, l]);
        for i in 0..l {
            let si = s[i];
            let pre = if prefactor {
                1.0 / ((2.0 * PI).sqrt() * si)
            } else {
                1.0
            };
            let inv = 1.0 / (2.0 * si * si);
            for j in 0..l {
                value.set(i, j, pre * (-dist.get(i, j) * inv).exp());
            }
        }
        Ok(self.derived(
            value,
            Op::GaussianKernel {
                sigma,
                dist: dist.clone(),
                prefactor,
            },
            &[sigma],
        ))
    }

    /// Pairwise base-2 Jensen-Shannon divergence between the rows of `p`
    /// and the rows of `q` (both row-stochastic, L×N): output is Lp×Lq.
    pub fn js_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let (lp, n) = self.dims(p);
        let (lq, nq) = self.dims(q);
        if n != nq {
            return Err(Error::dim("js_divergence", self.shape(p), self.shape(q)));
        }
        let value = js_matrix_values(self.value(p), self.value(q));
        debug_assert_eq!(value.shape(), [lp, lq]);
        Ok(self.derived(value, Op::JsDivergence(p, q), &[p, q]))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    /// Gradient for every named parameter on this graph; parameters the loss
    /// does not depend on get exact zeros.
    pub fn param_gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param(name) => Some((
                    name.clone(),
                    grads
                        .get(Var(i))
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(n.value.shape())),
                )),
                _ => None,
            })
            .collect()
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Variable | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let mut ga = vec![0.0; n * k];
                    gemm_nt(gout.data(), bv.data(), &mut ga, n, m, k);
                    acc(grads, *a, Tensor::matrix(n, k, ga).unwrap());
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * m];
                    gemm_tn(av.data(), gout.data(), &mut gb, k, n, m);
                    acc(grads, *b, Tensor::matrix(k, m, gb).unwrap());
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, gout.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, gout.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, gout.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, gout.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(
                        grads,
                        *a,
                        gout.zip_map(self.value(*b), "mul", |g, x| g * x).unwrap(),
                    );
                }
                if self.wants(*b) {
                    acc(
                        grads,
                        *b,
                        gout.zip_map(self.value(*a), "mul", |g, x| g * x).unwrap(),
                    );
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    acc(grads, *a, gout.clone());
                }
                if self.wants(*row) {
                    let c = gout.cols();
                    let mut g = vec![0.0; c];
                    for i in 0..gout.rows() {
                        g.iter_mut().zip(gout.row(i)).for_each(|(s, v)| *s += v);
                    }
                    acc(grads, *row, Tensor::matrix(1, c, g).unwrap());
                }
            }
            Op::SubCol(a, col) => {
                if self.wants(*a) {
                    acc(grads, *a, gout.clone());
                }
                if self.wants(*col) {
                    let g: Vec<f64> = (0..gout.rows())
                        .map(|i| -gout.row(i).iter().sum::<f64>())
                        .collect();
                    acc(grads, *col, Tensor::column(&g));
                }
            }
            Op::DivCol(a, col) => {
                let d = self.value(*col).data();
                if self.wants(*a) {
                    let mut g = gout.clone();
                    for i in 0..g.rows() {
                        g.row_mut(i).iter_mut().for_each(|v| *v /= d[i]);
                    }
                    acc(grads, *a, g);
                }
                if self.wants(*col) {
                    // d(a/d)/dd = -a/d² = -y/d
                    let g: Vec<f64> = (0..gout.rows())
                        .map(|i| {
                            -gout
                                .row(i)
                                .iter()
                                .zip(y.row(i))
                                .map(|(g, yv)| g * yv)
                                .sum::<f64>()
                                / d[i]
                        })
                        .collect();
                    acc(grads, *col, Tensor::column(&g));
                }
            }
            Op::Scale(a, s) => acc(grads, *a, gout.scale(*s)),
            Op::AddScalar(a) => acc(grads, *a, gout.clone()),
            Op::MulScalar(a, s) => {
                let k = self.value(*s).item();
                if self.wants(*a) {
                    acc(grads, *a, gout.scale(k));
                }
                if self.wants(*s) {
                    let dot: f64 = gout
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, x)| g * x)
                        .sum();
                    acc(grads, *s, Tensor::scalar(dot));
                }
            }
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                let mut g = gout.clone();
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let dot: f64 = gout.row(i).iter().zip(yr).map(|(g, y)| g * y).sum();
                    g.row_mut(i)
                        .iter_mut()
                        .zip(yr)
                        .for_each(|(gv, yv)| *gv = yv * (*gv - dot));
                }
                acc(grads, *a, g);
            }
            Op::Elu(a) => {
                let x = self.value(*a);
                let g = Tensor::new(
                    y.shape().to_vec(),
                    gout.data()
                        .iter()
                        .zip(x.data())
                        .zip(y.data())
                        .map(|((g, xv), yv)| if *xv > 0.0 { *g } else { g * (yv + 1.0) })
                        .collect(),
                )
                .unwrap();
                acc(grads, *a, g);
            }
            Op::Sigmoid(a) => acc(
                grads,
                *a,
                gout.zip_map(y, "sigmoid", |g, s| g * s * (1.0 - s))
                    .unwrap(),
            ),
            Op::Sqrt(a) => acc(
                grads,
                *a,
                gout.zip_map(y, "sqrt", |g, s| if s > 0.0 { 0.5 * g / s } else { 0.0 })
                    .unwrap(),
            ),
            Op::Log2(a) => acc(
                grads,
                *a,
                gout.zip_map(self.value(*a), "log2", |g, x| g / (x * LN_2))
                    .unwrap(),
            ),
            Op::Exp(a) => acc(grads, *a, gout.zip_map(y, "exp", |g, e| g * e).unwrap()),
            Op::Softplus(a) => acc(
                grads,
                *a,
                gout.zip_map(self.value(*a), "softplus", |g, x| g * tensor::sigmoid(x))
                    .unwrap(),
            ),
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let r = self.value(*p).rows();
                    if self.wants(*p) {
                        acc(grads, *p, gout.slice_rows(start, r));
                    }
                    start += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    if self.wants(*p) {
                        acc(grads, *p, slice_cols(gout, start, pc));
                    }
                    start += pc;
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut g = Tensor::zeros(&[src.rows(), src.cols()]);
                let c = src.cols();
                g.data_mut()[start * c..start * c + gout.len()].copy_from_slice(gout.data());
                acc(grads, *a, g);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut g = Tensor::zeros(&[src.rows(), src.cols()]);
                let count = gout.cols();
                for i in 0..src.rows() {
                    g.row_mut(i)[*start..start + count].copy_from_slice(gout.row(i));
                }
                acc(grads, *a, g);
            }
            Op::Transpose(a) => acc(grads, *a, gout.transpose()),
            Op::Reshape(a) => acc(grads, *a, gout.reshape(self.shape(*a)).unwrap()),
            Op::Interleave(parts) => {
                let k = parts.len();
                for (m, p) in parts.iter().enumerate() {
                    if !self.wants(*p) {
                        continue;
                    }
                    let src = self.value(*p);
                    let mut g = Tensor::zeros(&[src.rows(), src.cols()]);
                    for t in 0..src.rows() {
                        g.row_mut(t).copy_from_slice(gout.row(k * t + m));
                    }
                    acc(grads, *p, g);
                }
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                kernel,
                stride,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let cin = x.cols();
                let cout = w.cols();
                let span = kernel * cin;
                if self.wants(*input) {
                    let mut gx = Tensor::zeros(&[x.rows(), cin]);
                    for t in 0..gout.rows() {
                        let off = t * stride * cin;
                        let window = &mut gx.data_mut()[off..off + span];
                        gemm_nt(gout.row(t), w.data(), window, 1, cout, span);
                    }
                    acc(grads, *input, gx);
                }
                if self.wants(*weight) {
                    let mut gw = vec![0.0; span * cout];
                    for t in 0..gout.rows() {
                        let off = t * stride * cin;
                        gemm_tn(
                            &x.data()[off..off + span],
                            gout.row(t),
                            &mut gw,
                            span,
                            1,
                            cout,
                        );
                    }
                    acc(grads, *weight, Tensor::matrix(span, cout, gw).unwrap());
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let mut gb = vec![0.0; cout];
                        for t in 0..gout.rows() {
                            gb.iter_mut().zip(gout.row(t)).for_each(|(s, v)| *s += v);
                        }
                        acc(grads, *b, Tensor::matrix(1, cout, gb).unwrap());
                    }
                }
            }
            Op::MaxPoolCols { input, argmax } => {
                let src = self.value(*input);
                let mut g = Tensor::zeros(src.shape());
                for (o, &src_idx) in argmax.iter().enumerate() {
                    g.data_mut()[src_idx] += gout.data()[o];
                }
                acc(grads, *input, g);
            }
            Op::GroupCombine { input, weights } => {
                let x = self.value(*input);
                let w = self.value(*weights).data();
                let k = w.len();
                if self.wants(*input) {
                    let mut g = Tensor::zeros(x.shape());
                    for t in 0..gout.rows() {
                        for (m, wm) in w.iter().enumerate() {
                            g.row_mut(k * t + m)
                                .iter_mut()
                                .zip(gout.row(t))
                                .for_each(|(gv, go)| *gv += wm * go);
                        }
                    }
                    acc(grads, *input, g);
                }
                if self.wants(*weights) {
                    let mut gw = vec![0.0; k];
                    for t in 0..gout.rows() {
                        for (m, gwm) in gw.iter_mut().enumerate() {
                            *gwm += gout
                                .row(t)
                                .iter()
                                .zip(x.row(k * t + m))
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                    }
                    acc(grads, *weights, Tensor::column(&gw));
                }
            }
            Op::Sum(a) => acc(grads, *a, Tensor::filled(self.shape(*a), gout.item())),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc(grads, *a, Tensor::filled(self.shape(*a), gout.item() / n))
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let (r, c) = (xhat.rows(), xhat.cols());
                if self.wants(*input) {
                    let mut gx = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        let xh = xhat.row(i);
                        let dxh: Vec<f64> =
                            gout.row(i).iter().zip(gv).map(|(g, w)| g * w).collect();
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let row = gx.row_mut(i);
                        for j in 0..c {
                            row[j] = inv_std[i] * (dxh[j] - s1 / c as f64 - xh[j] * s2 / c as f64);
                        }
                    }
                    acc(grads, *input, gx);
                }
                if self.wants(*gain) {
                    let mut gg = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += gout.get(i, j) * xhat.get(i, j);
                        }
                    }
                    acc(grads, *gain, Tensor::matrix(1, c, gg).unwrap());
                }
                if self.wants(*bias) {
                    let mut gb = vec![0.0; c];
                    for i in 0..r {
                        gb.iter_mut().zip(gout.row(i)).for_each(|(s, v)| *s += v);
                    }
                    acc(grads, *bias, Tensor::matrix(1, c, gb).unwrap());
                }
            }
            Op::GaussianKernel {
                sigma,
                dist,
                prefactor,
            } => {
                let s = self.value(*sigma).data();
                let l = s.len();
                let mut g = vec![0.0; l];
                for i in 0..l {
                    let si = s[i];
                    let pre_term = if *prefactor { -1.0 / si } else { 0.0 };
                    let mut total = 0.0;
                    for j in 0..l {
                        let k = y.get(i, j);
                        total += gout.get(i, j) * k * (pre_term + dist.get(i, j) / (si * si * si));
                    }
                    g[i] = total;
                }
                acc(grads, *sigma, Tensor::column(&g));
            }
            Op::JsDivergence(p, q) => {
                let (pv, qv) = (self.value(*p), self.value(*q));
                let n = pv.cols();
                let mut gp = Tensor::zeros(pv.shape());
                let mut gq = Tensor::zeros(qv.shape());
                for i in 0..pv.rows() {
                    let pr = pv.row(i);
                    for j in 0..qv.rows() {
                        let go = gout.get(i, j);
                        if go == 0.0 {
                            continue;
                        }
                        let qr = qv.row(j);
                        for k in 0..n {
                            let m = 0.5 * (pr[k] + qr[k]);
                            if m <= 0.0 {
                                continue;
                            }
                            gp.data_mut()[i * n + k] += go * 0.5 * safe_log2_ratio(pr[k], m);
                            gq.data_mut()[j * n + k] += go * 0.5 * safe_log2_ratio(qr[k], m);
                        }
                    }
                }
                if self.wants(*p) {
                    acc(grads, *p, gp);
                }
                if self.wants(*q) {
                    acc(grads, *q, gq);
                }
            }
        }
    }
}

/// log2(a/m) with a floored away from zero so the derivative stays finite.
fn safe_log2_ratio(a: f64, m: f64) -> f64 {
    (a.max(f64::MIN_POSITIVE) / m).log2()
}

fn slice_cols(t: &Tensor, start: usize, count: usize) -> Tensor {
    let mut data = Vec::with_capacity(t.rows() * count);
    for i in 0..t.rows() {
        data.extend_from_slice(&t.row(i)[start..start + count]);
    }
    Tensor::matrix(t.rows(), count, data).unwrap()
}

/// Plain (untaped) evaluation of the pairwise base-2 JS divergence.
/// Terms with zero probability contribute nothing.
pub(crate) fn js_matrix_values(p: &Tensor, q: &Tensor) -> Tensor {
    let (lp, lq) = (p.rows(), q.rows());
    let mut out = Tensor::zeros(&[lp, lq]);
    for i in 0..lp {
        let pr = p.row(i);
        for j in 0..lq {
            let qr = q.row(j);
            let mut total = 0.0;
            for (&a, &b) in pr.iter().zip(qr) {
                // a / m written as 2a / (a + b): halving a subnormal sum can
                // round m to zero, this form stays in (0, 2]
                let s = a + b;
                if a > 0.0 {
                    total += a * (2.0 * a / s).log2();
                }
                if b > 0.0 {
                    total += b * (2.0 * b / s).log2();
                }
            }
            out.set(i, j, 0.5 * total);
        }
    }
    out
}
