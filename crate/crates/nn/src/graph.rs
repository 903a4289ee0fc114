//! Tape-based reverse-mode automatic differentiation.
//!
//! Ops are coarse (a whole multi-head attention core is one op) so the tape
//! for a mini-batch stays short. Every op validates its output; a NaN or Inf
//! anywhere surfaces as [`NnError::NonFinite`].

use rand::Rng;

use crate::ops::{self, gelu_grad_scalar, softmax_in_place, LayerNormCache};
use crate::params::ParamSet;
use crate::tensor::{gemm, Tensor};
use crate::{shape_err, NnError, Result};

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Param(usize),
    Constant,
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, cache: LayerNormCache },
    Mask(NodeId, Vec<f64>),
    GatherRows(NodeId, Vec<usize>),
    Assemble(Vec<(NodeId, Vec<usize>)>),
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, seq: usize, probs: Vec<f64> },
    SoftmaxCrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<f64> },
    BceWithLogits { logits: NodeId, targets: Vec<f64>, sigmoid: Vec<f64> },
    WeightedSum(Vec<(NodeId, f64)>),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records one forward pass over a borrowed parameter set.
pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

/// Per-parameter gradients in [`ParamSet`] order, one tensor per parameter.
pub type Gradients = Vec<Tensor>;

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self { params, nodes: Vec::new(), param_nodes: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match (&self.nodes[id].value, &self.nodes[id].op) {
            (Some(v), _) => v,
            (None, Op::Param(i)) => self.params.tensor(*i),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId], name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(NnError::NonFinite(name));
        }
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Ok(self.nodes.len() - 1)
    }

    /// Leaf for a registered parameter. Repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let idx = self.params.index_of(name).ok_or_else(|| NnError::Invalid(format!("unknown parameter {name}")))?;
        Ok(self.param_at(idx))
    }

    pub fn param_at(&mut self, idx: usize) -> NodeId {
        if let Some(id) = self.param_nodes[idx] {
            return id;
        }
        self.nodes.push(Node { value: None, op: Op::Param(idx), needs_grad: true });
        let id = self.nodes.len() - 1;
        self.param_nodes[idx] = Some(id);
        id
    }

    pub fn constant(&mut self, t: Tensor) -> Result<NodeId> {
        if !t.is_finite() {
            return Err(NnError::NonFinite("constant"));
        }
        self.nodes.push(Node { value: Some(t), op: Op::Constant, needs_grad: false });
        Ok(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a[n,k] @ b[m,k]ᵀ`
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.cols() {
            return Err(shape_err("matmul_bt", format!("{:?} @ {:?}ᵀ", av.shape(), bv.shape())));
        }
        let (n, k, m) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, av.data(), false, bv.data(), true, &mut out, 0.0);
        self.push(Tensor::from_parts(vec![n, m], out), Op::MatMulBt(a, b), &[a, b], "matmul_bt")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(b));
        let m = xv.cols();
        if bv.numel() != m {
            return Err(shape_err("add_bias", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(m) {
            for (r, bb) in row.iter_mut().zip(bv.data()) {
                *r += bb;
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::AddBias(x, b), &[x, b], "add_bias")
    }

    /// `x @ w + b`
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let xv = self.value(x);
        let out = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|v| v * c).collect());
        self.push(out, Op::Scale(x, c), &[x], "scale")
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = ops::gelu(self.value(x))?;
        self.push(out, Op::Gelu(x), &[x], "gelu")
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (out, cache) = ops::layer_norm_forward(self.value(x), self.value(gain), self.value(bias))?;
        self.push(out, Op::LayerNorm { x, gain, bias, cache }, &[x, gain, bias], "layer_norm")
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`. `p == 0` is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, p: f64, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(NnError::Invalid(format!("dropout rate {p} outside [0,1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> =
            (0..self.value(x).numel()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::Mask(x, mask), &[x], "dropout")
    }

    /// Rows `idx` of a 2-D node (embedding lookup when `src` is a table).
    pub fn gather_rows(&mut self, src: NodeId, idx: &[usize]) -> Result<NodeId> {
        let sv = self.value(src);
        let d = sv.cols();
        if let Some(&bad) = idx.iter().find(|&&i| i >= sv.rows()) {
            return Err(shape_err("gather_rows", format!("row {bad} of {}", sv.rows())));
        }
        if idx.is_empty() {
            return Err(shape_err("gather_rows", "empty index list"));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(sv.row(i));
        }
        let out = Tensor::from_parts(vec![idx.len(), d], data);
        self.push(out, Op::GatherRows(src, idx.to_vec()), &[src], "gather_rows")
    }

    /// Builds an `[n_rows, d]` matrix whose row `rows[j]` is row `j` of the
    /// corresponding part. Rows not covered by any part are zero.
    pub fn assemble(&mut self, n_rows: usize, d: usize, parts: Vec<(NodeId, Vec<usize>)>) -> Result<NodeId> {
        let mut data = vec![0.0; n_rows * d];
        let mut seen = vec![false; n_rows];
        let mut inputs = Vec::with_capacity(parts.len());
        for (node, rows) in &parts {
            let v = self.value(*node);
            if v.cols() != d || v.rows() != rows.len() {
                return Err(shape_err(
                    "assemble",
                    format!("part {:?} placed into {} rows of width {d}", v.shape(), rows.len()),
                ));
            }
            for (j, &r) in rows.iter().enumerate() {
                if r >= n_rows || seen[r] {
                    return Err(shape_err("assemble", format!("row {r} out of range or placed twice")));
                }
                seen[r] = true;
                data[r * d..(r + 1) * d].copy_from_slice(v.row(j));
            }
            inputs.push(*node);
        }
        let out = Tensor::from_parts(vec![n_rows, d], data);
        self.push(out, Op::Assemble(parts), &inputs, "assemble")
    }

    /// Scaled dot-product multi-head attention over `batch` sequences of
    /// length `seq` laid out contiguously in `q`, `k`, `v` (`[batch·seq, d]`).
    /// Keys whose `key_mask` entry is false get exactly zero weight.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        seq: usize,
        key_mask: &[bool],
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let n = qv.rows();
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() || heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", format!("q {:?} heads {heads}", qv.shape())));
        }
        if seq == 0 || n % seq != 0 || key_mask.len() != n {
            return Err(shape_err("attention", format!("{n} rows, seq {seq}, mask {}", key_mask.len())));
        }
        let batch = n / seq;
        for b in 0..batch {
            if !key_mask[b * seq..(b + 1) * seq].iter().any(|&m| m) {
                return Err(NnError::Invalid(format!("sequence {b} has no unmasked key")));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; n * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + off..(b * seq + i) * d + off + dh];
                    let prow = &mut probs[pbase + i * seq..pbase + (i + 1) * seq];
                    for j in 0..seq {
                        prow[j] = if key_mask[b * seq + j] {
                            let kj = &kd[(b * seq + j) * d + off..(b * seq + j) * d + off + dh];
                            qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(b * seq + i) * d + off..(b * seq + i) * d + off + dh];
                    for j in 0..seq {
                        let p = prow[j];
                        if p == 0.0 {
                            continue;
                        }
                        let vj = &vd[(b * seq + j) * d + off..(b * seq + j) * d + off + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![n, d], out);
        self.push(out, Op::Attention { q, k, v, heads, seq, probs }, &[q, k, v], "attention")
    }

    /// Mean softmax cross-entropy over rows of `logits[n, C]`. Returns a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let loss = ops::softmax_cross_entropy(lv, targets)?;
        let c = lv.cols();
        let mut probs = lv.data().to_vec();
        for row in probs.chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
            "softmax_cross_entropy",
        )
    }

    /// Mean binary cross-entropy of `logits[n, 1]` against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.numel() != targets.len() || targets.is_empty() {
            return Err(shape_err("bce_with_logits", format!("{:?} vs {}", lv.shape(), targets.len())));
        }
        let mut loss = 0.0;
        let mut sigmoid = Vec::with_capacity(targets.len());
        for (&z, &y) in lv.data().iter().zip(targets) {
            // log(1+e^z) computed stably
            let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
            loss += softplus - y * z;
            sigmoid.push(1.0 / (1.0 + (-z).exp()));
        }
        loss /= targets.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits { logits, targets: targets.to_vec(), sigmoid },
            &[logits],
            "bce_with_logits",
        )
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, parts: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut total = 0.0;
        for &(id, w) in parts {
            let v = self.value(id);
            if v.numel() != 1 {
                return Err(shape_err("weighted_sum", format!("non-scalar {:?}", v.shape())));
            }
            total += w * v.data()[0];
        }
        let ids: Vec<NodeId> = parts.iter().map(|p| p.0).collect();
        self.push(Tensor::scalar(total), Op::WeightedSum(parts.to_vec()), &ids, "weighted_sum")
    }

    /// Reverse pass from a scalar node. Returns one gradient per parameter of
    /// the borrowed set, zero-filled for parameters the loss does not touch.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let mut out = Vec::with_capacity(self.params.len());
        for (i, node) in self.param_nodes.iter().enumerate() {
            let shape = self.params.tensor(i).shape().to_vec();
            let t = match node.and_then(|n| grads[n].take()) {
                Some(g) => Tensor::from_parts(shape, g),
                None => Tensor::zeros(&shape),
            };
            if !t.is_finite() {
                return Err(NnError::NonFinite("backward"));
            }
            out.push(t);
        }
        Ok(out)
    }

    fn backprop_node(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let acc = |target: NodeId, delta: Vec<f64>, grads: &mut [Option<Vec<f64>>]| {
            if !self.nodes[target].needs_grad {
                return;
            }
            match &mut grads[target] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[id].op {
            Op::Param(_) | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if self.nodes[*a].needs_grad {
                    let mut da = vec![0.0; n * k];
                    gemm(n, m, k, g, false, bv.data(), true, &mut da, 0.0);
                    acc(*a, da, grads);
                }
                if self.nodes[*b].needs_grad {
                    let mut db = vec![0.0; k * m];
                    gemm(k, n, m, av.data(), true, g, false, &mut db, 0.0);
                    acc(*b, db, grads);
                }
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                if self.nodes[*a].needs_grad {
                    let mut da = vec![0.0; n * k];
                    gemm(n, m, k, g, false, bv.data(), false, &mut da, 0.0);
                    acc(*a, da, grads);
                }
                if self.nodes[*b].needs_grad {
                    let mut db = vec![0.0; m * k];
                    gemm(m, n, k, g, true, av.data(), false, &mut db, 0.0);
                    acc(*b, db, grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec(), grads);
                acc(*b, g.to_vec(), grads);
            }
            Op::AddBias(x, b) => {
                let m = self.value(*b).numel();
                let mut db = vec![0.0; m];
                for row in g.chunks(m) {
                    for (d, r) in db.iter_mut().zip(row) {
                        *d += r;
                    }
                }
                acc(*x, g.to_vec(), grads);
                acc(*b, db, grads);
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect(), grads),
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                acc(*x, g.iter().zip(xv).map(|(d, &v)| d * gelu_grad_scalar(v)).collect(), grads);
            }
            Op::LayerNorm { x, gain, bias, cache } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                let rows = g.len() / d;
                let mut dx = vec![0.0; g.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let nr = &cache.normalized[r * d..(r + 1) * d];
                    let mut mean_dn = 0.0;
                    let mut mean_dn_n = 0.0;
                    for j in 0..d {
                        let dn = gr[j] * gv[j];
                        mean_dn += dn;
                        mean_dn_n += dn * nr[j];
                        dgain[j] += gr[j] * nr[j];
                        dbias[j] += gr[j];
                    }
                    mean_dn /= d as f64;
                    mean_dn_n /= d as f64;
                    for j in 0..d {
                        let dn = gr[j] * gv[j];
                        dx[r * d + j] = cache.inv_std[r] * (dn - mean_dn - nr[j] * mean_dn_n);
                    }
                }
                acc(*x, dx, grads);
                acc(*gain, dgain, grads);
                acc(*bias, dbias, grads);
            }
            Op::Mask(x, mask) => acc(*x, g.iter().zip(mask).map(|(d, m)| d * m).collect(), grads),
            Op::GatherRows(src, idx) => {
                let sv = self.value(*src);
                let d = sv.cols();
                let mut ds = vec![0.0; sv.numel()];
                for (j, &i) in idx.iter().enumerate() {
                    for c in 0..d {
                        ds[i * d + c] += g[j * d + c];
                    }
                }
                acc(*src, ds, grads);
            }
            Op::Assemble(parts) => {
                let d = self.value(id).cols();
                for (node, rows) in parts {
                    let mut dp = Vec::with_capacity(rows.len() * d);
                    for &r in rows {
                        dp.extend_from_slice(&g[r * d..(r + 1) * d]);
                    }
                    acc(*node, dp, grads);
                }
            }
            Op::Attention { q, k, v, heads, seq, probs } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *heads, *seq, probs, g);
                acc(*q, dq, grads);
                acc(*k, dk, grads);
                acc(*v, dv, grads);
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let c = self.value(*logits).cols();
                let n = targets.len() as f64;
                let mut dl = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    dl[i * c + t] -= 1.0;
                }
                dl.iter_mut().for_each(|v| *v *= g[0] / n);
                acc(*logits, dl, grads);
            }
            Op::BceWithLogits { logits, targets, sigmoid } => {
                let n = targets.len() as f64;
                let dl = sigmoid.iter().zip(targets).map(|(s, y)| (s - y) * g[0] / n).collect();
                acc(*logits, dl, grads);
            }
            Op::WeightedSum(parts) => {
                for &(node, w) in parts {
                    acc(node, vec![w * g[0]], grads);
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        seq: usize,
        probs: &[f64],
        g: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let d = self.value(q).cols();
        let n = self.value(q).rows();
        let batch = n / seq;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                let pbase = (b * heads + h) * seq * seq;
                let row = |i: usize| (b * seq + i) * d + off;
                for i in 0..seq {
                    let prow = &probs[pbase + i * seq..pbase + (i + 1) * seq];
                    let gi = &g[row(i)..row(i) + dh];
                    // dP_ij = dO_i · V_j ; dV_j += P_ij dO_i
                    let mut dot = 0.0;
                    for j in 0..seq {
                        let p = prow[j];
                        if p == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vj = &vd[row(j)..row(j) + dh];
                        dp[j] = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                        dot += p * dp[j];
                        for (dvj, gx) in dv[row(j)..row(j) + dh].iter_mut().zip(gi) {
                            *dvj += p * gx;
                        }
                    }
                    // dS_ij = P_ij (dP_ij − Σ_l P_il dP_il)
                    for j in 0..seq {
                        let p = prow[j];
                        if p == 0.0 {
                            continue;
                        }
                        let ds = p * (dp[j] - dot) * scale;
                        for c in 0..dh {
                            dq[row(i) + c] += ds * kd[row(j) + c];
                            dk[row(j) + c] += ds * qd[row(i) + c];
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}
