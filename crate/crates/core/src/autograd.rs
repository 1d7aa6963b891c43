//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records one forward pass (one image). Nodes that do not depend
//! on a trainable parameter are skipped during the backward sweep, so frozen
//! encoder stages cost nothing in the reverse pass.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Patchify {
        x: Var,
        height: usize,
        width: usize,
        patch: usize,
    },
    ConcatBroadcast(Var, Var),
    ColMax {
        x: Var,
        argmax: Vec<usize>,
    },
    BceLogits {
        x: Var,
        target: Vec<f64>,
    },
    SoftmaxCe {
        x: Var,
        target: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Leaf bound to a stored parameter; reused if already bound in this graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "add {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a `1×C` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(row) != (1, c) {
            return Err(Error::Dimension(format!(
                "row broadcast {:?} onto {r}x{c}",
                self.shape(row)
            )));
        }
        let mut value = self.value(x).clone();
        let b = self.value(row).data().to_vec();
        for i in 0..r {
            for (v, bi) in value.row_mut(i).iter_mut().zip(&b) {
                *v += bi;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(value, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    /// Multiplies `x` by a `1×1` variable.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::Dimension("scale_by expects a 1x1 scalar".into()));
        }
        let k = self.value(s).data()[0];
        let value = self.value(x).map(|v| v * k);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::ScaleBy(x, s), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| {
            let u = GELU_C * (v + 0.044715 * v * v * v);
            0.5 * v * (1.0 + u.tanh())
        });
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let rg = self.rg(x);
        self.push(value, Op::SoftmaxRows(x), rg)
    }

    /// Per-row layer normalization with `1×C` affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(Error::Dimension(format!("layer norm over {c} channels")));
        }
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Tensor::zeros(r, c);
        let mut out = Tensor::zeros(r, c);
        let mut rstd = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(i);
            for (h, &v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * rs;
            }
            let xh = xhat.row(i).to_vec();
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = xh[j] * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > c {
            return Err(Error::Dimension(format!(
                "column slice {start}..{} of {c}",
                start + len
            )));
        }
        let xv = self.value(x);
        let mut out = Tensor::zeros(r, len);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(&xv.row(i)[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::Dimension("concat with differing row counts".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(i);
                out.row_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(value, Op::Transpose(x), rg)
    }

    /// Gathers non-overlapping `p×p` neighborhoods of a token-major
    /// `height×width×C` map into rows of length `p·p·C`
    /// (column index `(dy·p + dx)·C + c`).
    pub fn patchify(&mut self, x: Var, height: usize, width: usize, patch: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r != height * width || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
            return Err(Error::Dimension(format!(
                "cannot split a {height}x{width} map ({r} tokens) into {patch}x{patch} patches"
            )));
        }
        let (oh, ow) = (height / patch, width / patch);
        let xv = self.value(x);
        let mut out = Tensor::zeros(oh * ow, patch * patch * c);
        for py in 0..oh {
            for px in 0..ow {
                let orow = out.row_mut(py * ow + px);
                for dy in 0..patch {
                    for dx in 0..patch {
                        let src = (py * patch + dy) * width + px * patch + dx;
                        let off = (dy * patch + dx) * c;
                        orow[off..off + c].copy_from_slice(xv.row(src));
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::Patchify {
                x,
                height,
                width,
                patch,
            },
            rg,
        ))
    }

    /// `[x | v]` where the `1×D` row `v` is repeated for every row of `x`.
    pub fn concat_broadcast(&mut self, x: Var, v: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let (vr, d) = self.shape(v);
        if vr != 1 {
            return Err(Error::Dimension("broadcast source must be a row".into()));
        }
        let mut out = Tensor::zeros(r, c + d);
        let vv = self.value(v).data().to_vec();
        for i in 0..r {
            let row = out.row_mut(i);
            row[..c].copy_from_slice(self.nodes[x.0].value.row(i));
            row[c..].copy_from_slice(&vv);
        }
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(out, Op::ConcatBroadcast(x, v), rg))
    }

    /// Global max pooling: per-column maximum over rows (first row on ties).
    pub fn col_max(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r == 0 {
            return Err(Error::Dimension("max pooling over an empty map".into()));
        }
        let xv = self.value(x);
        let mut argmax = vec![0usize; c];
        let mut out = xv.row(0).to_vec();
        for i in 1..r {
            for (j, &v) in xv.row(i).iter().enumerate() {
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::row_vector(&out), Op::ColMax { x, argmax }, rg))
    }

    /// Mean sigmoid binary cross-entropy of a `1×K` logit row.
    pub fn bce_logits(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        if self.shape(x) != (1, target.len()) {
            return Err(Error::Dimension("bce logits/target length".into()));
        }
        let loss = crate::objectives::bce_with_logits(self.value(x).data(), target);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::filled(1, 1, loss),
            Op::BceLogits {
                x,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax cross-entropy of a `1×K` logit row against a probability target.
    pub fn softmax_ce(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        if self.shape(x) != (1, target.len()) {
            return Err(Error::Dimension("softmax ce logits/target length".into()));
        }
        let loss = crate::objectives::softmax_cross_entropy(self.value(x).data(), target);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::filled(1, 1, loss),
            Op::SoftmaxCe {
                x,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from the scalar `loss`, returning parameter gradients
    /// scaled by `seed`.
    pub fn backward(&self, loss: Var, seed: f64) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Dimension("backward needs a scalar".into()));
        }
        let mut grads = Gradients::new(self.store.len());
        if !self.rg(loss) {
            return Ok(grads);
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::filled(1, 1, seed));

        for i in (0..=loss.0).rev() {
            let Some(dy) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let send = |v: Var, g: Tensor, adj: &mut Vec<Option<Tensor>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut adj[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => grads.accumulate(*id, &dy),
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        send(*a, dy.matmul_nt(self.value(*b))?, &mut adj);
                    }
                    if self.rg(*b) {
                        send(*b, self.value(*a).matmul_tn(&dy)?, &mut adj);
                    }
                }
                Op::MatMulNt(a, b) => {
                    // y = a bᵀ: da = dy b, db = dyᵀ a
                    if self.rg(*a) {
                        send(*a, dy.matmul(self.value(*b))?, &mut adj);
                    }
                    if self.rg(*b) {
                        send(*b, dy.matmul_tn(self.value(*a))?, &mut adj);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        send(*b, dy.clone(), &mut adj);
                    }
                    send(*a, dy, &mut adj);
                }
                Op::AddRow(x, row) => {
                    if self.rg(*row) {
                        let mut g = Tensor::zeros(1, dy.cols());
                        for r in 0..dy.rows() {
                            for (gi, &d) in g.data_mut().iter_mut().zip(dy.row(r)) {
                                *gi += d;
                            }
                        }
                        send(*row, g, &mut adj);
                    }
                    send(*x, dy, &mut adj);
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    send(*x, dy.map(|d| d * s), &mut adj);
                }
                Op::ScaleBy(x, s) => {
                    if self.rg(*s) {
                        let g = dot(dy.data(), self.value(*x).data());
                        send(*s, Tensor::filled(1, 1, g), &mut adj);
                    }
                    let k = self.value(*s).data()[0];
                    send(*x, dy.map(|d| d * k), &mut adj);
                }
                Op::Relu(x) => {
                    let mut g = dy;
                    for (gi, &xi) in g.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if xi <= 0.0 {
                            *gi = 0.0;
                        }
                    }
                    send(*x, g, &mut adj);
                }
                Op::Gelu(x) => {
                    let mut g = dy;
                    for (gi, &v) in g.data_mut().iter_mut().zip(self.value(*x).data()) {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        *gi *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                    }
                    send(*x, g, &mut adj);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut g = dy;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let s = dot(g.row(r), yr);
                        for (gi, &yi) in g.row_mut(r).iter_mut().zip(yr) {
                            *gi = yi * (*gi - s);
                        }
                    }
                    send(*x, g, &mut adj);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let c = dy.cols();
                    if self.rg(*gamma) || self.rg(*beta) {
                        let mut dg = Tensor::zeros(1, c);
                        let mut db = Tensor::zeros(1, c);
                        for r in 0..dy.rows() {
                            for j in 0..c {
                                let d = dy.get(r, j);
                                dg.data_mut()[j] += d * xhat.get(r, j);
                                db.data_mut()[j] += d;
                            }
                        }
                        send(*gamma, dg, &mut adj);
                        send(*beta, db, &mut adj);
                    }
                    if self.rg(*x) {
                        let g = self.value(*gamma).data();
                        let mut dx = Tensor::zeros(dy.rows(), c);
                        for (r, &rs) in rstd.iter().enumerate() {
                            let dxh: Vec<f64> =
                                dy.row(r).iter().zip(g).map(|(d, gi)| d * gi).collect();
                            let xh = xhat.row(r);
                            let m1 = dxh.iter().sum::<f64>() / c as f64;
                            let m2 = dot(&dxh, xh) / c as f64;
                            for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                                *o = rs * (dxh[j] - m1 - xh[j] * m2);
                            }
                        }
                        send(*x, dx, &mut adj);
                    }
                }
                Op::SliceCols(x, start) => {
                    let (r, c) = self.shape(*x);
                    let mut g = Tensor::zeros(r, c);
                    let len = dy.cols();
                    for i in 0..r {
                        g.row_mut(i)[*start..*start + len].copy_from_slice(dy.row(i));
                    }
                    send(*x, g, &mut adj);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        if self.rg(p) {
                            let mut g = Tensor::zeros(r, c);
                            for i in 0..r {
                                g.row_mut(i).copy_from_slice(&dy.row(i)[off..off + c]);
                            }
                            send(p, g, &mut adj);
                        }
                        off += c;
                    }
                }
                Op::Transpose(x) => send(*x, dy.transpose(), &mut adj),
                Op::Patchify {
                    x,
                    height,
                    width,
                    patch,
                } => {
                    let (r, c) = self.shape(*x);
                    let (p, w) = (*patch, *width);
                    let ow = w / p;
                    let oh = height / p;
                    let mut g = Tensor::zeros(r, c);
                    for py in 0..oh {
                        for px in 0..ow {
                            let drow = dy.row(py * ow + px);
                            for dy_ in 0..p {
                                for dx_ in 0..p {
                                    let dst = (py * p + dy_) * w + px * p + dx_;
                                    let off = (dy_ * p + dx_) * c;
                                    g.row_mut(dst).copy_from_slice(&drow[off..off + c]);
                                }
                            }
                        }
                    }
                    send(*x, g, &mut adj);
                }
                Op::ConcatBroadcast(x, v) => {
                    let (r, c) = self.shape(*x);
                    let d = self.shape(*v).1;
                    if self.rg(*x) {
                        let mut g = Tensor::zeros(r, c);
                        for i in 0..r {
                            g.row_mut(i).copy_from_slice(&dy.row(i)[..c]);
                        }
                        send(*x, g, &mut adj);
                    }
                    if self.rg(*v) {
                        let mut g = Tensor::zeros(1, d);
                        for i in 0..r {
                            for (gi, &di) in g.data_mut().iter_mut().zip(&dy.row(i)[c..]) {
                                *gi += di;
                            }
                        }
                        send(*v, g, &mut adj);
                    }
                }
                Op::ColMax { x, argmax } => {
                    let (r, c) = self.shape(*x);
                    let mut g = Tensor::zeros(r, c);
                    for (j, &i) in argmax.iter().enumerate() {
                        g.set(i, j, dy.data()[j]);
                    }
                    send(*x, g, &mut adj);
                }
                Op::BceLogits { x, target } => {
                    let d = dy.data()[0];
                    let k = target.len() as f64;
                    let g: Vec<f64> = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(&z, &y)| d * (sigmoid(z) - y) / k)
                        .collect();
                    send(*x, Tensor::row_vector(&g), &mut adj);
                }
                Op::SoftmaxCe { x, target } => {
                    let d = dy.data()[0];
                    let mut p = self.value(*x).data().to_vec();
                    softmax_in_place(&mut p);
                    let total: f64 = target.iter().sum();
                    let g: Vec<f64> = p
                        .iter()
                        .zip(target)
                        .map(|(&pi, &yi)| d * (pi * total - yi))
                        .collect();
                    send(*x, Tensor::row_vector(&g), &mut adj);
                }
            }
        }
        Ok(grads)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
