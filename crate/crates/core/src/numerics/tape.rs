//! Eager tensor tape with reverse-mode differentiation.
//!
//! Every operation computes its value immediately and records enough to
//! propagate gradients later. [`Tape::backward`] walks the record in reverse
//! and accumulates into the [`ParamStore`] gradients of every parameter that
//! was bound with [`Tape::param`].
//!
//! The temporal convolution and the LSTM recurrence are recorded as single
//! fused operations with hand-written backward passes. Unit tests check both
//! against compositions of the elementary operations.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::gemm::{axpy, dot, gemm, MatRef};
use crate::numerics::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Mul,
    Sigmoid,
    Tanh,
    Scale(f64),
}

/// Traversal order of a recurrent pass. Output rows always follow input time
/// order regardless of direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    MulConst(usize, Tensor),
    Sigmoid(usize),
    Tanh(usize),
    Scale(usize, f64),
    AddRowBias(usize, usize),
    Sum(usize),
    Concat(Vec<usize>),
    SliceRows(usize, usize),
    MeanOverTime(usize),
    Reshape(usize),
    LogSoftmaxRows(usize),
    Nll(usize, Vec<usize>),
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
    },
    Lstm {
        x: usize,
        w_in: usize,
        w_h: usize,
        b: usize,
        dir: Direction,
        gates: Vec<f64>,
        cells: Vec<f64>,
        tanh_cells: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

/// Gradients of the loss with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input data; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::get`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter. Binding the same id twice returns the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param(id), true);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = crate::numerics::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a.0, b.0), rg))
    }

    pub fn elementwise(&mut self, kind: Elementwise, operands: &[Var]) -> Result<Var> {
        let arity = match kind {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        if operands.len() != arity {
            return Err(Error::InvalidTensor(format!(
                "{kind:?} takes {arity} operand(s), got {}",
                operands.len()
            )));
        }
        match kind {
            Elementwise::Add => self.add(operands[0], operands[1]),
            Elementwise::Mul => self.mul(operands[0], operands[1]),
            Elementwise::Sigmoid => Ok(self.sigmoid(operands[0])),
            Elementwise::Tanh => Ok(self.tanh(operands[0])),
            Elementwise::Scale(s) => Ok(self.scale(operands[0], s)),
        }
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(op, x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |p, q| p * q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a.0, b.0), rg))
    }

    /// Multiplies by a fixed tensor (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let x = self.value(a);
        if x.shape() != c.shape() {
            return Err(Error::shape("mul_const", x.shape(), c.shape()));
        }
        let data = x.data().iter().zip(c.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::MulConst(a.0, c), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a.0), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a.0), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a.0, s), rg)
    }

    /// Adds a length-C vector to every row of an L×C matrix.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if xv.rank() != 2 || bv.len() != xv.cols() {
            return Err(Error::shape("add_row_bias", xv.shape(), bv.shape()));
        }
        let mut value = xv.clone();
        let c = xv.cols();
        for row in value.data_mut().chunks_mut(c) {
            for (v, bias) in row.iter_mut().zip(bv.data()) {
                *v += bias;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(value, Op::AddRowBias(x.0, b.0), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a.0), rg)
    }

    /// Joins L×Dᵢ matrices column-wise, in list order.
    pub fn concat_last_axis(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidTensor("concat_last_axis of empty list".into()))?;
        let l = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.rows() != l {
                return Err(Error::shape("concat_last_axis", self.value(first).shape(), v.shape()));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; l * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p).data();
            for t in 0..l {
                data[t * total + offset..t * total + offset + w].copy_from_slice(&v[t * w..(t + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::new(vec![l, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat(parts.iter().map(|p| p.0).collect()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_rows(start, len)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceRows(a.0, start), rg))
    }

    /// Column means of an L×D matrix, returned as a length-D vector.
    pub fn mean_over_time(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(Error::shape("mean_over_time", x.shape(), &[]));
        }
        let (l, d) = (x.rows(), x.cols());
        let mut out = vec![0.0; d];
        for t in 0..l {
            for (o, v) in out.iter_mut().zip(x.row(t)) {
                *o += v;
            }
        }
        let inv = 1.0 / l as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(vec![d], out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::MeanOverTime(a.0), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a.0), rg))
    }

    /// Row-wise log-softmax, stabilized by subtracting each row's maximum.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(Error::shape("log_softmax_rows", x.shape(), &[]));
        }
        let c = x.cols();
        let mut value = x.clone();
        for row in value.data_mut().chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::LogSoftmaxRows(a.0), rg))
    }

    /// Mean over rows of `-log_probs[t, labels[t]]`.
    pub fn nll_loss(&mut self, log_probs: Var, labels: &[usize]) -> Result<Var> {
        let lp = self.value(log_probs);
        if lp.rank() != 2 || lp.rows() != labels.len() {
            return Err(Error::shape("nll_loss", lp.shape(), &[labels.len()]));
        }
        let c = lp.cols();
        let mut total = 0.0;
        for (t, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::LabelOutOfRange {
                    t,
                    label: y,
                    classes: c,
                });
            }
            total -= lp.data()[t * c + y];
        }
        let value = Tensor::scalar(total / labels.len() as f64);
        let rg = self.rg(log_probs);
        Ok(self.push(value, Op::Nll(log_probs.0, labels.to_vec()), rg))
    }

    /// Same-length temporal convolution with zero padding of (K−1)/2 rows on
    /// each side. `w` is C_out×C_in×K, `b` has length C_out.
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.rank() != 3 || xv.rank() != 2 || xv.cols() != wv.shape()[1] {
            return Err(Error::shape("conv1d_same", xv.shape(), wv.shape()));
        }
        let (co, ci, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {k}")));
        }
        if bv.len() != co {
            return Err(Error::shape("conv1d_same bias", wv.shape(), bv.shape()));
        }
        let l = xv.rows();
        let xpad = conv_pad(xv, k);
        let wkc = conv_weight_kc(wv);
        let kci = k * ci;
        let mut out = Vec::with_capacity(l * co);
        for _ in 0..l {
            out.extend_from_slice(bv.data());
        }
        gemm(
            1.0,
            MatRef::strided(&xpad, l, kci, ci, 1),
            MatRef::row_major(&wkc, co, kci).t(),
            1.0,
            &mut out,
            co,
        );
        let value = Tensor::new(vec![l, co], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Conv1d { x: x.0, w: w.0, b: b.0 }, rg))
    }

    /// Runs a standard (no-peephole) LSTM over an L×C input with zero initial
    /// state. `w_in` is 4H×C, `w_h` is 4H×H and `b` has length 4H, with gate
    /// row blocks ordered input, forget, cell, output.
    pub fn lstm(&mut self, x: Var, w_in: Var, w_h: Var, b: Var, dir: Direction) -> Result<Var> {
        let (xv, wiv, whv, bv) = (self.value(x), self.value(w_in), self.value(w_h), self.value(b));
        if whv.rank() != 2 || whv.rows() != 4 * whv.cols() {
            return Err(Error::shape("lstm w_hidden", whv.shape(), &[]));
        }
        let h = whv.cols();
        let g4 = 4 * h;
        if xv.rank() != 2 || wiv.rank() != 2 || wiv.rows() != g4 || wiv.cols() != xv.cols() {
            return Err(Error::shape("lstm", xv.shape(), wiv.shape()));
        }
        if bv.len() != g4 {
            return Err(Error::shape("lstm bias", whv.shape(), bv.shape()));
        }
        let l = xv.rows();

        let mut gates = Vec::with_capacity(l * g4);
        for _ in 0..l {
            gates.extend_from_slice(bv.data());
        }
        gemm(1.0, xv.as_mat(), wiv.as_mat().t(), 1.0, &mut gates, g4);

        let mut cells = vec![0.0; l * h];
        let mut tanh_cells = vec![0.0; l * h];
        let mut hs = vec![0.0; l * h];
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        let wh = whv.data();
        for s in 0..l {
            let t = step_index(dir, l, s);
            let row = &mut gates[t * g4..(t + 1) * g4];
            if s > 0 {
                for (r, g) in row.iter_mut().enumerate() {
                    *g += dot(&wh[r * h..(r + 1) * h], &h_prev);
                }
            }
            for j in 0..h {
                let i = sigmoid(row[j]);
                let f = sigmoid(row[h + j]);
                let g = row[2 * h + j].tanh();
                let o = sigmoid(row[3 * h + j]);
                row[j] = i;
                row[h + j] = f;
                row[2 * h + j] = g;
                row[3 * h + j] = o;
                let c = f * c_prev[j] + i * g;
                let tc = c.tanh();
                cells[t * h + j] = c;
                tanh_cells[t * h + j] = tc;
                hs[t * h + j] = o * tc;
            }
            h_prev.copy_from_slice(&hs[t * h..(t + 1) * h]);
            c_prev.copy_from_slice(&cells[t * h..(t + 1) * h]);
        }
        let value = Tensor::new(vec![l, h], hs)?;
        let rg = self.rg(x) || self.rg(w_in) || self.rg(w_h) || self.rg(b);
        Ok(self.push(
            value,
            Op::Lstm {
                x: x.0,
                w_in: w_in.0,
                w_h: w_h.0,
                b: b.0,
                dir,
                gates,
                cells,
                tanh_cells,
            },
            rg,
        ))
    }

    /// Propagates gradients of a one-element `loss` to every node and adds
    /// the parameter gradients into `store`. Gradients accumulate across
    /// calls until [`ParamStore::zero_grad`].
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                let p = store.get_mut(*id);
                assert_eq!(p.grad.shape(), g.shape(), "parameter {} changed shape", p.name);
                for (acc, v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += v;
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let want = |j: usize| nodes[j].requires_grad;
        macro_rules! gbuf {
            ($j:expr) => {
                grad_buf(grads, nodes, $j)
            };
        }
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let n = bv.cols();
                if want(*a) {
                    let ga = gbuf!(*a);
                    let k = av.cols();
                    gemm(
                        1.0,
                        MatRef::row_major(g.data(), av.rows(), n),
                        bv.as_mat().t(),
                        1.0,
                        ga.data_mut(),
                        k,
                    );
                }
                if want(*b) {
                    let gb = gbuf!(*b);
                    gemm(
                        1.0,
                        av.as_mat().t(),
                        MatRef::row_major(g.data(), av.rows(), n),
                        1.0,
                        gb.data_mut(),
                        n,
                    );
                }
            }
            Op::Add(a, b) => {
                for j in [*a, *b] {
                    if want(j) {
                        axpy(1.0, g.data(), gbuf!(j).data_mut());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                if want(*a) {
                    let ga = gbuf!(*a).data_mut();
                    for ((acc, gv), y) in ga.iter_mut().zip(g.data()).zip(bv.data()) {
                        *acc += gv * y;
                    }
                }
                if want(*b) {
                    let gb = gbuf!(*b).data_mut();
                    for ((acc, gv), x) in gb.iter_mut().zip(g.data()).zip(av.data()) {
                        *acc += gv * x;
                    }
                }
            }
            Op::MulConst(a, c) => {
                let ga = gbuf!(*a).data_mut();
                for ((acc, gv), m) in ga.iter_mut().zip(g.data()).zip(c.data()) {
                    *acc += gv * m;
                }
            }
            Op::Sigmoid(a) => {
                let ga = gbuf!(*a).data_mut();
                for ((acc, gv), y) in ga.iter_mut().zip(g.data()).zip(out.data()) {
                    *acc += gv * y * (1.0 - y);
                }
            }
            Op::Tanh(a) => {
                let ga = gbuf!(*a).data_mut();
                for ((acc, gv), y) in ga.iter_mut().zip(g.data()).zip(out.data()) {
                    *acc += gv * (1.0 - y * y);
                }
            }
            Op::Scale(a, s) => axpy(*s, g.data(), gbuf!(*a).data_mut()),
            Op::AddRowBias(x, b) => {
                if want(*x) {
                    axpy(1.0, g.data(), gbuf!(*x).data_mut());
                }
                if want(*b) {
                    let gb = gbuf!(*b).data_mut();
                    for row in g.data().chunks(gb.len()) {
                        axpy(1.0, row, gb);
                    }
                }
            }
            Op::Sum(a) => {
                let s = g.item();
                gbuf!(*a).data_mut().iter_mut().for_each(|v| *v += s);
            }
            Op::Concat(parts) => {
                let (l, total) = (out.rows(), out.cols());
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p].value.cols();
                    if want(p) {
                        let gp = gbuf!(p).data_mut();
                        for t in 0..l {
                            axpy(
                                1.0,
                                &g.data()[t * total + offset..t * total + offset + w],
                                &mut gp[t * w..(t + 1) * w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceRows(a, start) => {
                let c = out.cols();
                let ga = gbuf!(*a).data_mut();
                axpy(1.0, g.data(), &mut ga[start * c..start * c + g.len()]);
            }
            Op::MeanOverTime(a) => {
                let l = nodes[*a].value.rows();
                let inv = 1.0 / l as f64;
                let ga = gbuf!(*a).data_mut();
                for row in ga.chunks_mut(g.len()) {
                    axpy(inv, g.data(), row);
                }
            }
            Op::Reshape(a) => axpy(1.0, g.data(), gbuf!(*a).data_mut()),
            Op::LogSoftmaxRows(a) => {
                let c = out.cols();
                let ga = gbuf!(*a).data_mut();
                for ((acc, gr), y) in ga.chunks_mut(c).zip(g.data().chunks(c)).zip(out.data().chunks(c)) {
                    let s: f64 = gr.iter().sum();
                    for j in 0..c {
                        acc[j] += gr[j] - y[j].exp() * s;
                    }
                }
            }
            Op::Nll(a, labels) => {
                let c = nodes[*a].value.cols();
                let scale = -g.item() / labels.len() as f64;
                let ga = gbuf!(*a).data_mut();
                for (t, &y) in labels.iter().enumerate() {
                    ga[t * c + y] += scale;
                }
            }
            Op::Conv1d { x, w, b } => {
                let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
                let (co, ci, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                let l = xv.rows();
                let kci = k * ci;
                let gy = MatRef::row_major(g.data(), l, co);
                if want(*b) {
                    let gb = gbuf!(*b).data_mut();
                    for row in g.data().chunks(co) {
                        axpy(1.0, row, gb);
                    }
                }
                if want(*w) {
                    let xpad = conv_pad(xv, k);
                    let mut gwkc = vec![0.0; co * kci];
                    gemm(1.0, gy.t(), MatRef::strided(&xpad, l, kci, ci, 1), 0.0, &mut gwkc, kci);
                    let gw = gbuf!(*w).data_mut();
                    for o in 0..co {
                        for kk in 0..k {
                            for c in 0..ci {
                                gw[(o * ci + c) * k + kk] += gwkc[o * kci + kk * ci + c];
                            }
                        }
                    }
                }
                if want(*x) {
                    let wkc = conv_weight_kc(wv);
                    let mut gxs = vec![0.0; l * kci];
                    gemm(1.0, gy, MatRef::row_major(&wkc, co, kci), 0.0, &mut gxs, kci);
                    let pad = (k - 1) / 2;
                    let mut gpad = vec![0.0; (l + k - 1) * ci];
                    for t in 0..l {
                        axpy(1.0, &gxs[t * kci..(t + 1) * kci], &mut gpad[t * ci..t * ci + kci]);
                    }
                    let gx = gbuf!(*x).data_mut();
                    axpy(1.0, &gpad[pad * ci..(pad + l) * ci], gx);
                }
            }
            Op::Lstm {
                x,
                w_in,
                w_h,
                b,
                dir,
                gates,
                cells,
                tanh_cells,
            } => {
                let (xv, wiv, whv) = (&nodes[*x].value, &nodes[*w_in].value, &nodes[*w_h].value);
                let h = whv.cols();
                let g4 = 4 * h;
                let l = xv.rows();
                let wh = whv.data();
                let hs = out.data();
                let gh = g.data();

                let mut dg = vec![0.0; l * g4];
                let mut dh_rec = vec![0.0; h];
                let mut dc_next = vec![0.0; h];
                for s in (0..l).rev() {
                    let t = step_index(*dir, l, s);
                    let prev = (s > 0).then(|| step_index(*dir, l, s - 1));
                    let gt = &gates[t * g4..(t + 1) * g4];
                    let dgt = &mut dg[t * g4..(t + 1) * g4];
                    for j in 0..h {
                        let (ig, fg, gg, og) = (gt[j], gt[h + j], gt[2 * h + j], gt[3 * h + j]);
                        let tc = tanh_cells[t * h + j];
                        let cp = prev.map_or(0.0, |p| cells[p * h + j]);
                        let dh = gh[t * h + j] + dh_rec[j];
                        let d_o = dh * tc;
                        let dc = dh * og * (1.0 - tc * tc) + dc_next[j];
                        dc_next[j] = dc * fg;
                        dgt[j] = dc * gg * ig * (1.0 - ig);
                        dgt[h + j] = dc * cp * fg * (1.0 - fg);
                        dgt[2 * h + j] = dc * ig * (1.0 - gg * gg);
                        dgt[3 * h + j] = d_o * og * (1.0 - og);
                    }
                    if s > 0 {
                        dh_rec.fill(0.0);
                        for r in 0..g4 {
                            if dgt[r] != 0.0 {
                                axpy(dgt[r], &wh[r * h..(r + 1) * h], &mut dh_rec);
                            }
                        }
                    }
                }
                let dgm = MatRef::row_major(&dg, l, g4);
                if want(*b) {
                    let gb = gbuf!(*b).data_mut();
                    for row in dg.chunks(g4) {
                        axpy(1.0, row, gb);
                    }
                }
                if want(*w_h) {
                    let mut h_prev = vec![0.0; l * h];
                    for s in 1..l {
                        let t = step_index(*dir, l, s);
                        let p = step_index(*dir, l, s - 1);
                        h_prev[t * h..(t + 1) * h].copy_from_slice(&hs[p * h..(p + 1) * h]);
                    }
                    let gwh = gbuf!(*w_h).data_mut();
                    gemm(1.0, dgm.t(), MatRef::row_major(&h_prev, l, h), 1.0, gwh, h);
                }
                if want(*w_in) {
                    let gwi = gbuf!(*w_in).data_mut();
                    gemm(1.0, dgm.t(), xv.as_mat(), 1.0, gwi, xv.cols());
                }
                if want(*x) {
                    let gx = gbuf!(*x).data_mut();
                    gemm(1.0, dgm, wiv.as_mat(), 1.0, gx, xv.cols());
                }
            }
        }
    }
}

fn grad_buf<'g>(grads: &'g mut [Option<Tensor>], nodes: &[Node], j: usize) -> &'g mut Tensor {
    grads[j].get_or_insert_with(|| Tensor::zeros(nodes[j].value.shape()))
}

fn step_index(dir: Direction, l: usize, s: usize) -> usize {
    match dir {
        Direction::Forward => s,
        Direction::Backward => l - 1 - s,
    }
}

fn conv_pad(x: &Tensor, k: usize) -> Vec<f64> {
    let (l, ci) = (x.rows(), x.cols());
    let pad = (k - 1) / 2;
    let mut xpad = vec![0.0; (l + k - 1) * ci];
    xpad[pad * ci..(pad + l) * ci].copy_from_slice(x.data());
    xpad
}

/// Reorders C_out×C_in×K weights to C_out×(K·C_in) so each output row is a
/// dot product with a contiguous window of the padded input.
fn conv_weight_kc(w: &Tensor) -> Vec<f64> {
    let (co, ci, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let wd = w.data();
    let mut out = vec![0.0; co * k * ci];
    for o in 0..co {
        for c in 0..ci {
            for kk in 0..k {
                out[o * k * ci + kk * ci + c] = wd[(o * ci + c) * k + kk];
            }
        }
    }
    out
}
