//! Reverse-mode automatic differentiation over batched tensors.
//!
//! A `Graph` is a tape of nodes built by a single forward pass. Calling
//! `backward` walks the tape in reverse, accumulating gradients into every
//! node that transitively depends on a leaf. Non-leaf values and gradients
//! are released as soon as they are consumed, which keeps peak memory close
//! to the forward-pass footprint.

use crate::error::Result;
use crate::mathx;
use crate::scan::{self, ScanSaved};
use crate::tensor::{matmul, matmul_acc, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

enum Op {
    Leaf,
    MatMul { ta: bool, tb: bool },
    AddBias,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Softplus { sig: Vec<f64> },
    Silu { sig: Vec<f64> },
    Gelu,
    SoftmaxRows,
    LayerNorm { mean: Vec<f64>, inv_std: Vec<f64> },
    RmsNorm { inv_rms: Vec<f64> },
    CausalConv { k: usize },
    Scan { a: Tensor, saved: ScanSaved },
    SliceCols { start: usize },
    ConcatCols,
    ReverseRows,
    Reshape,
    MeanRows,
    ScaleShiftRows { scale: Tensor },
    SumSq,
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    bindings: Vec<Option<Var>>,
}

/// Gradients keyed by `Var`, produced by `Graph::backward`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Graph {
    pub fn new(grad_enabled: bool) -> Self {
        Graph { nodes: Vec::new(), grad_enabled, bindings: Vec::new() }
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, op: Op) -> Var {
        let needs_grad =
            self.grad_enabled && parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node { value, parents, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf (parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs = self.grad_enabled;
        self.nodes.push(Node { value, parents: Vec::new(), op: Op::Leaf, needs_grad: needs });
        Var(self.nodes.len() - 1)
    }

    /// Bind a parameter from a store, caching so repeated binds share a node.
    pub fn param(&mut self, store: &crate::nn::ParamStore, id: crate::nn::ParamId) -> Var {
        if self.bindings.len() < store.len() {
            self.bindings.resize(store.len(), None);
        }
        if let Some(v) = self.bindings[id.0] {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.bindings[id.0] = Some(v);
        v
    }

    /// Node ids bound to store parameters, for gradient collection.
    pub fn bound_params(&self) -> Vec<(usize, Var)> {
        self.bindings
            .iter()
            .enumerate()
            .filter_map(|(pid, v)| v.map(|v| (pid, v)))
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = matmul(&self.nodes[a.0].value, ta, &self.nodes[b.0].value, tb);
        self.push(out, vec![a.0, b.0], Op::MatMul { ta, tb })
    }

    /// x (n, r, c) + bias (1, 1, c).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[bias.0].value;
        assert_eq!(bv.shape(), (1, 1, xv.cols()), "bias shape mismatch");
        let mut out = xv.clone();
        let bd = bv.data();
        let cols = out.cols();
        for chunk in out.data_mut().chunks_mut(cols) {
            for (o, b) in chunk.iter_mut().zip(bd) {
                *o += b;
            }
        }
        self.push(out, vec![x.0, bias.0], Op::AddBias)
    }

    /// x * w + bias.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match bias {
            Some(b) => self.add_bias(y, b),
            None => y,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = broadcast_zip(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        self.push(out, vec![a.0, b.0], Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = broadcast_zip(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        self.push(out, vec![a.0, b.0], Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = broadcast_zip(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        self.push(out, vec![a.0, b.0], Op::Mul)
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Var {
        let out = self.nodes[x.0].value.map(|v| v * a);
        self.push(out, vec![x.0], Op::Scale(a))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let out = xv.map(mathx::softplus);
        let sig = if self.grad_enabled {
            let mut s = vec![0.0; xv.len()];
            mathx::sigmoid_slice(xv.data(), &mut s);
            s
        } else {
            Vec::new()
        };
        self.push(out, vec![x.0], Op::Softplus { sig })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut sig = vec![0.0; xv.len()];
        mathx::sigmoid_slice(xv.data(), &mut sig);
        let mut out = xv.clone();
        for (o, s) in out.data_mut().iter_mut().zip(&sig) {
            *o *= s;
        }
        if !self.grad_enabled {
            sig.clear();
            sig.shrink_to_fit();
        }
        self.push(out, vec![x.0], Op::Silu { sig })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(mathx::gelu);
        self.push(out, vec![x.0], Op::Gelu)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut out = xv.clone();
        let cols = out.cols();
        for row in out.data_mut().chunks_mut(cols) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            let inv = 1.0 / z;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        self.push(out, vec![x.0], Op::SoftmaxRows)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let gv = self.nodes[gamma.0].value.data().to_vec();
        let bv = self.nodes[beta.0].value.data().to_vec();
        let cols = xv.cols();
        assert_eq!(gv.len(), cols, "layer_norm gamma width");
        let nrows = xv.batch() * xv.rows();
        let mut mean = Vec::with_capacity(nrows);
        let mut inv_std = Vec::with_capacity(nrows);
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(cols) {
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            mean.push(mu);
            inv_std.push(is);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mu) * is * gv[j] + bv[j];
            }
        }
        if !self.grad_enabled {
            mean.clear();
            inv_std.clear();
        }
        self.push(out, vec![x.0, gamma.0, beta.0], Op::LayerNorm { mean, inv_std })
    }

    pub fn rms_norm(&mut self, x: Var, gamma: Var, eps: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let gv = self.nodes[gamma.0].value.data().to_vec();
        let cols = xv.cols();
        assert_eq!(gv.len(), cols, "rms_norm gamma width");
        let nrows = xv.batch() * xv.rows();
        let mut inv_rms = Vec::with_capacity(nrows);
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(cols) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let ir = 1.0 / (ms + eps).sqrt();
            inv_rms.push(ir);
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * ir * gv[j];
            }
        }
        if !self.grad_enabled {
            inv_rms.clear();
        }
        self.push(out, vec![x.0, gamma.0], Op::RmsNorm { inv_rms })
    }

    /// Depthwise causal 1-d convolution along rows. x (n, T, ch), w (1, k, ch),
    /// bias (1, 1, ch); positions before the window start read as zero.
    pub fn causal_conv(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[bias.0].value;
        let (n, t_len, ch) = xv.shape();
        let k = wv.rows();
        assert_eq!(wv.shape(), (1, k, ch), "conv weight shape");
        assert_eq!(bv.shape(), (1, 1, ch), "conv bias shape");
        let mut out = Tensor::zeros(n, t_len, ch);
        let wd = wv.data();
        let bd = bv.data();
        for b in 0..n {
            let xs = xv.item(b);
            let os = out.item_mut(b);
            for t in 0..t_len {
                let orow = &mut os[t * ch..(t + 1) * ch];
                orow.copy_from_slice(bd);
                for j in 0..k {
                    let xi = t as isize + j as isize - (k as isize - 1);
                    if xi < 0 {
                        continue;
                    }
                    let xrow = &xs[xi as usize * ch..(xi as usize + 1) * ch];
                    let wrow = &wd[j * ch..(j + 1) * ch];
                    for c in 0..ch {
                        orow[c] += wrow[c] * xrow[c];
                    }
                }
            }
        }
        self.push(out, vec![x.0, w.0, bias.0], Op::CausalConv { k })
    }

    /// Selective scan; `a_log` parameterizes the diagonal as A = -exp(a_log),
    /// with the magnitude clamped away from zero so the kernel's 1/A stays
    /// finite even if a_log underflows.
    pub fn scan(
        &mut self,
        x: Var,
        dt: Var,
        b: Var,
        c: Var,
        a_log: Var,
        d_skip: Var,
    ) -> Result<Var> {
        let a = self.nodes[a_log.0].value.map(|v| -v.exp().max(1e-300));
        let (y, saved) = scan::scan_forward(
            &self.nodes[x.0].value,
            &self.nodes[dt.0].value,
            &self.nodes[b.0].value,
            &self.nodes[c.0].value,
            &a,
            &self.nodes[d_skip.0].value,
            self.grad_enabled,
        )?;
        let saved = saved.unwrap_or(ScanSaved { h: Vec::new(), bfac: Vec::new() });
        Ok(self.push(
            y,
            vec![x.0, dt.0, b.0, c.0, a_log.0, d_skip.0],
            Op::Scan { a, saved },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, r, c) = xv.shape();
        assert!(start + len <= c, "slice_cols out of range");
        let mut out = Tensor::zeros(n, r, len);
        for b in 0..n {
            let src = xv.item(b);
            let dst = out.item_mut(b);
            for i in 0..r {
                dst[i * len..(i + 1) * len]
                    .copy_from_slice(&src[i * c + start..i * c + start + len]);
            }
        }
        self.push(out, vec![x.0], Op::SliceCols { start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (n, r, _) = self.shape(parts[0]);
        let total: usize = parts.iter().map(|&p| self.shape(p).2).sum();
        let mut out = Tensor::zeros(n, r, total);
        let mut off = 0;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            assert_eq!((pv.batch(), pv.rows()), (n, r), "concat_cols shape mismatch");
            let w = pv.cols();
            for b in 0..n {
                let src = pv.item(b);
                let dst = out.item_mut(b);
                for i in 0..r {
                    dst[i * total + off..i * total + off + w]
                        .copy_from_slice(&src[i * w..(i + 1) * w]);
                }
            }
            off += w;
        }
        self.push(out, parts.iter().map(|v| v.0).collect(), Op::ConcatCols)
    }

    pub fn reverse_rows(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.reversed_rows();
        self.push(out, vec![x.0], Op::ReverseRows)
    }

    pub fn reshape(&mut self, x: Var, batch: usize, rows: usize, cols: usize) -> Var {
        let out = self.nodes[x.0].value.reshaped(batch, rows, cols);
        self.push(out, vec![x.0], Op::Reshape)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, r, c) = xv.shape();
        let mut out = Tensor::zeros(n, 1, c);
        for b in 0..n {
            let src = xv.item(b);
            let dst = out.item_mut(b);
            for i in 0..r {
                for j in 0..c {
                    dst[j] += src[i * c + j];
                }
            }
            let inv = 1.0 / r as f64;
            for v in dst.iter_mut() {
                *v *= inv;
            }
        }
        self.push(out, vec![x.0], Op::MeanRows)
    }

    /// `y[b,i,:] = x[b,i,:] * scale[b,i] + shift[b,i]`, with constant
    /// (non-differentiated) per-row scale and shift of shape (n, r, 1).
    pub fn scale_shift_rows(&mut self, x: Var, scale: Tensor, shift: Tensor) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, r, c) = xv.shape();
        assert_eq!(scale.shape(), (n, r, 1), "scale shape mismatch");
        assert_eq!(shift.shape(), (n, r, 1), "shift shape mismatch");
        let mut out = xv.clone();
        for b in 0..n {
            let dst = out.item_mut(b);
            for i in 0..r {
                let s = scale.at(b, i, 0);
                let m = shift.at(b, i, 0);
                for v in &mut dst[i * c..(i + 1) * c] {
                    *v = *v * s + m;
                }
            }
        }
        self.push(out, vec![x.0], Op::ScaleShiftRows { scale })
    }

    /// Sum of squared entries, as a (1,1,1) scalar node.
    pub fn sum_sq(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), vec![x.0], Op::SumSq)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = &self.nodes[v.0].value;
        assert_eq!(t.len(), 1, "scalar_value on non-scalar");
        t.data()[0]
    }

    /// Reverse pass from a scalar loss. Consumes intermediate values: the
    /// graph should not be evaluated further afterwards.
    pub fn backward(&mut self, loss: Var) -> Gradients {
        assert!(self.grad_enabled, "backward on a no-grad graph");
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].needs_grad && !matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = None;
                continue;
            }
            let Some(grad) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(grad);
                continue;
            }
            self.back_node(id, &grad, &mut grads);
            // All consumers of this node are done: release its value and any
            // saved buffers.
            self.nodes[id].value = Tensor::zeros(0, 0, 0);
            self.nodes[id].op = Op::Leaf;
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], parent: usize, delta: Tensor) {
        if !self.nodes[parent].needs_grad {
            return;
        }
        match &mut grads[parent] {
            Some(g) => g.add_in_place(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn back_node(&mut self, id: usize, grad: &Tensor, grads: &mut [Option<Tensor>]) {
        let parents = self.nodes[id].parents.clone();
        match &self.nodes[id].op {
            Op::Leaf => unreachable!(),
            Op::MatMul { ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let a = parents[0];
                let b = parents[1];
                if self.nodes[a].needs_grad {
                    let av = &self.nodes[a].value;
                    let bv = &self.nodes[b].value;
                    let mut da = Tensor::zeros(av.batch(), av.rows(), av.cols());
                    match (ta, tb) {
                        (false, false) => matmul_acc(&mut da, grad, false, bv, true, 0.0),
                        (true, false) => matmul_acc(&mut da, bv, false, grad, true, 0.0),
                        (false, true) => matmul_acc(&mut da, grad, false, bv, false, 0.0),
                        (true, true) => matmul_acc(&mut da, bv, true, grad, true, 0.0),
                    }
                    self.accumulate(grads, a, da);
                }
                if self.nodes[b].needs_grad {
                    let av = &self.nodes[a].value;
                    let bv = &self.nodes[b].value;
                    let mut db = Tensor::zeros(bv.batch(), bv.rows(), bv.cols());
                    match (ta, tb) {
                        (false, false) => matmul_acc(&mut db, av, true, grad, false, 0.0),
                        (true, false) => matmul_acc(&mut db, av, false, grad, false, 0.0),
                        (false, true) => matmul_acc(&mut db, grad, true, av, false, 0.0),
                        (true, true) => matmul_acc(&mut db, grad, true, av, true, 0.0),
                    }
                    self.accumulate(grads, b, db);
                }
            }
            Op::AddBias => {
                let (x, bias) = (parents[0], parents[1]);
                if self.nodes[bias].needs_grad {
                    let cols = grad.cols();
                    let mut db = Tensor::zeros(1, 1, cols);
                    let dbd = db.data_mut();
                    for chunk in grad.data().chunks(cols) {
                        for (d, g) in dbd.iter_mut().zip(chunk) {
                            *d += g;
                        }
                    }
                    self.accumulate(grads, bias, db);
                }
                self.accumulate(grads, x, grad.clone());
            }
            Op::Add => {
                let (a, b) = (parents[0], parents[1]);
                let da = reduce_to_batch(grad, self.nodes[a].value.batch());
                self.accumulate(grads, a, da);
                let db = reduce_to_batch(grad, self.nodes[b].value.batch());
                self.accumulate(grads, b, db);
            }
            Op::Sub => {
                let (a, b) = (parents[0], parents[1]);
                let da = reduce_to_batch(grad, self.nodes[a].value.batch());
                self.accumulate(grads, a, da);
                let mut db = reduce_to_batch(grad, self.nodes[b].value.batch());
                db.scale_in_place(-1.0);
                self.accumulate(grads, b, db);
            }
            Op::Mul => {
                let (a, b) = (parents[0], parents[1]);
                if self.nodes[a].needs_grad {
                    let full = broadcast_zip(grad, &self.nodes[b].value, |g, y| g * y);
                    let da = reduce_to_batch(&full, self.nodes[a].value.batch());
                    self.accumulate(grads, a, da);
                }
                if self.nodes[b].needs_grad {
                    let full = broadcast_zip(grad, &self.nodes[a].value, |g, x| g * x);
                    let db = reduce_to_batch(&full, self.nodes[b].value.batch());
                    self.accumulate(grads, b, db);
                }
            }
            Op::Scale(s) => {
                let s = *s;
                self.accumulate(grads, parents[0], grad.map(|g| g * s));
            }
            Op::Softplus { sig } => {
                let mut dx = grad.clone();
                for (d, s) in dx.data_mut().iter_mut().zip(sig) {
                    *d *= s;
                }
                self.accumulate(grads, parents[0], dx);
            }
            Op::Silu { sig } => {
                let x = &self.nodes[parents[0]].value;
                let mut dx = grad.clone();
                for ((d, s), xv) in dx.data_mut().iter_mut().zip(sig).zip(x.data()) {
                    *d *= s * (1.0 + xv * (1.0 - s));
                }
                self.accumulate(grads, parents[0], dx);
            }
            Op::Gelu => {
                let x = &self.nodes[parents[0]].value;
                let mut dx = grad.clone();
                for (d, xv) in dx.data_mut().iter_mut().zip(x.data()) {
                    *d *= mathx::gelu_grad(*xv);
                }
                self.accumulate(grads, parents[0], dx);
            }
            Op::SoftmaxRows => {
                let y = &self.nodes[id].value;
                let cols = y.cols();
                let mut dx = grad.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                    for (d, y) in drow.iter_mut().zip(yrow) {
                        *d = y * (*d - dot);
                    }
                }
                self.accumulate(grads, parents[0], dx);
            }
            Op::LayerNorm { mean, inv_std } => {
                let (x, gamma, beta) = (parents[0], parents[1], parents[2]);
                let xv = &self.nodes[x].value;
                let gv = self.nodes[gamma].value.data().to_vec();
                let cols = xv.cols();
                let cf = cols as f64;
                let mut dx = Tensor::zeros(xv.batch(), xv.rows(), xv.cols());
                let mut dgamma = Tensor::zeros(1, 1, cols);
                let mut dbeta = Tensor::zeros(1, 1, cols);
                for (ri, ((grow, xrow), dxrow)) in grad
                    .data()
                    .chunks(cols)
                    .zip(xv.data().chunks(cols))
                    .zip(dx.data_mut().chunks_mut(cols))
                    .enumerate()
                {
                    let mu = mean[ri];
                    let is = inv_std[ri];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..cols {
                        let xhat = (xrow[j] - mu) * is;
                        let dyg = grow[j] * gv[j];
                        m1 += dyg;
                        m2 += dyg * xhat;
                        dgamma.data_mut()[j] += grow[j] * xhat;
                        dbeta.data_mut()[j] += grow[j];
                    }
                    m1 /= cf;
                    m2 /= cf;
                    for j in 0..cols {
                        let xhat = (xrow[j] - mu) * is;
                        let dyg = grow[j] * gv[j];
                        dxrow[j] = is * (dyg - m1 - xhat * m2);
                    }
                }
                self.accumulate(grads, x, dx);
                self.accumulate(grads, gamma, dgamma);
                self.accumulate(grads, beta, dbeta);
            }
            Op::RmsNorm { inv_rms } => {
                let (x, gamma) = (parents[0], parents[1]);
                let xv = &self.nodes[x].value;
                let gv = self.nodes[gamma].value.data().to_vec();
                let cols = xv.cols();
                let cf = cols as f64;
                let mut dx = Tensor::zeros(xv.batch(), xv.rows(), xv.cols());
                let mut dgamma = Tensor::zeros(1, 1, cols);
                for (ri, ((grow, xrow), dxrow)) in grad
                    .data()
                    .chunks(cols)
                    .zip(xv.data().chunks(cols))
                    .zip(dx.data_mut().chunks_mut(cols))
                    .enumerate()
                {
                    let ir = inv_rms[ri];
                    let mut m = 0.0;
                    for j in 0..cols {
                        let dyg = grow[j] * gv[j];
                        m += dyg * xrow[j];
                        dgamma.data_mut()[j] += grow[j] * xrow[j] * ir;
                    }
                    m /= cf;
                    let ir3 = ir * ir * ir;
                    for j in 0..cols {
                        let dyg = grow[j] * gv[j];
                        dxrow[j] = ir * dyg - ir3 * xrow[j] * m;
                    }
                }
                self.accumulate(grads, x, dx);
                self.accumulate(grads, gamma, dgamma);
            }
            Op::CausalConv { k } => {
                let k = *k;
                let (x, w, bias) = (parents[0], parents[1], parents[2]);
                let xv = &self.nodes[x].value;
                let wv = &self.nodes[w].value;
                let (n, t_len, ch) = xv.shape();
                let mut dx = Tensor::zeros(n, t_len, ch);
                let mut dw = Tensor::zeros(1, k, ch);
                let mut db = Tensor::zeros(1, 1, ch);
                let wd = wv.data();
                for b in 0..n {
                    let gs = grad.item(b);
                    let xs = xv.item(b);
                    let dxs = dx.item_mut(b);
                    for t in 0..t_len {
                        let grow = &gs[t * ch..(t + 1) * ch];
                        for c in 0..ch {
                            db.data_mut()[c] += grow[c];
                        }
                        for j in 0..k {
                            let xi = t as isize + j as isize - (k as isize - 1);
                            if xi < 0 {
                                continue;
                            }
                            let xi = xi as usize;
                            for c in 0..ch {
                                dw.data_mut()[j * ch + c] += grow[c] * xs[xi * ch + c];
                                dxs[xi * ch + c] += grow[c] * wd[j * ch + c];
                            }
                        }
                    }
                }
                self.accumulate(grads, x, dx);
                self.accumulate(grads, w, dw);
                self.accumulate(grads, bias, db);
            }
            Op::Scan { a, saved } => {
                let g = scan::scan_backward(
                    grad,
                    &self.nodes[parents[0]].value,
                    &self.nodes[parents[1]].value,
                    &self.nodes[parents[2]].value,
                    &self.nodes[parents[3]].value,
                    a,
                    &self.nodes[parents[5]].value,
                    saved,
                );
                // chain through A = -exp(a_log): dL/da_log = dL/dA * A
                let mut da_log = g.da;
                for (d, av) in da_log.data_mut().iter_mut().zip(a.data()) {
                    *d *= av;
                }
                self.accumulate(grads, parents[0], g.dx);
                self.accumulate(grads, parents[1], g.ddt);
                self.accumulate(grads, parents[2], g.db);
                self.accumulate(grads, parents[3], g.dc);
                self.accumulate(grads, parents[4], da_log);
                self.accumulate(grads, parents[5], g.dd);
            }
            Op::SliceCols { start } => {
                let start = *start;
                let x = parents[0];
                let xv = &self.nodes[x].value;
                let (n, r, c) = xv.shape();
                let w = grad.cols();
                let mut dx = Tensor::zeros(n, r, c);
                for b in 0..n {
                    let gs = grad.item(b);
                    let dst = dx.item_mut(b);
                    for i in 0..r {
                        dst[i * c + start..i * c + start + w]
                            .copy_from_slice(&gs[i * w..(i + 1) * w]);
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::ConcatCols => {
                let total = grad.cols();
                let (n, r, _) = grad.shape();
                let mut off = 0;
                for &p in &parents {
                    let w = self.nodes[p].value.cols();
                    if self.nodes[p].needs_grad {
                        let mut dp = Tensor::zeros(n, r, w);
                        for b in 0..n {
                            let gs = grad.item(b);
                            let dst = dp.item_mut(b);
                            for i in 0..r {
                                dst[i * w..(i + 1) * w]
                                    .copy_from_slice(&gs[i * total + off..i * total + off + w]);
                            }
                        }
                        self.accumulate(grads, p, dp);
                    }
                    off += w;
                }
            }
            Op::ReverseRows => {
                self.accumulate(grads, parents[0], grad.reversed_rows());
            }
            Op::Reshape => {
                let xv = &self.nodes[parents[0]].value;
                let (b, r, c) = xv.shape();
                self.accumulate(grads, parents[0], grad.reshaped(b, r, c));
            }
            Op::MeanRows => {
                let xv = &self.nodes[parents[0]].value;
                let (n, r, c) = xv.shape();
                let inv = 1.0 / r as f64;
                let mut dx = Tensor::zeros(n, r, c);
                for b in 0..n {
                    let gs = grad.item(b);
                    let dst = dx.item_mut(b);
                    for i in 0..r {
                        for j in 0..c {
                            dst[i * c + j] = gs[j] * inv;
                        }
                    }
                }
                self.accumulate(grads, parents[0], dx);
            }
            Op::ScaleShiftRows { scale } => {
                let (n, r, c) = grad.shape();
                let mut dx = grad.clone();
                for b in 0..n {
                    let dst = dx.item_mut(b);
                    for i in 0..r {
                        let s = scale.at(b, i, 0);
                        for v in &mut dst[i * c..(i + 1) * c] {
                            *v *= s;
                        }
                    }
                }
                self.accumulate(grads, parents[0], dx);
            }
            Op::SumSq => {
                let g = grad.data()[0];
                let xv = &self.nodes[parents[0]].value;
                let dx = xv.map(|v| 2.0 * v * g);
                self.accumulate(grads, parents[0], dx);
            }
        }
    }
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()), "elementwise shape mismatch");
    let batch = a.batch().max(b.batch());
    assert!(
        a.batch() == b.batch() || a.batch() == 1 || b.batch() == 1,
        "elementwise batch mismatch"
    );
    let mut out = Tensor::zeros(batch, a.rows(), a.cols());
    for i in 0..batch {
        let ai = a.item(if a.batch() == 1 { 0 } else { i });
        let bi = b.item(if b.batch() == 1 { 0 } else { i });
        for ((o, &x), &y) in out.item_mut(i).iter_mut().zip(ai).zip(bi) {
            *o = f(x, y);
        }
    }
    out
}

/// Sum a (n, r, c) gradient down to batch 1 when the forward side broadcast.
fn reduce_to_batch(grad: &Tensor, target_batch: usize) -> Tensor {
    if grad.batch() == target_batch {
        return grad.clone();
    }
    assert_eq!(target_batch, 1, "can only reduce to batch 1");
    let mut out = Tensor::zeros(1, grad.rows(), grad.cols());
    for b in 0..grad.batch() {
        let src = grad.item(b);
        for (o, s) in out.item_mut(0).iter_mut().zip(src) {
            *o += s;
        }
    }
    out
}
