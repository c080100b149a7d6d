//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Tape`]; node ids increase in
//! creation order, so walking the ids backwards from the loss visits each
//! operation exactly once and only after all of its consumers.

use super::gemm::{gemm, Operand};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum MatMulKind {
    /// `[.., m, k] · [k, n]`, the leading axes of the left operand folded into `m`.
    Plain { m: usize, k: usize, n: usize },
    /// `[m, k] · [b, k, n]`, left operand shared across the batch.
    SharedLeft { batch: usize, m: usize, k: usize, n: usize },
    /// `[b, m, k] · [b, k, n]`.
    Batched { batch: usize, m: usize, k: usize, n: usize },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    /// Right operand broadcast (right-aligned, size-1 or missing axes) onto the left shape.
    AddBroadcast(Var, Var),
    Hadamard(Var, Var),
    ScaleShift(Var, f64),
    Relu(Var),
    MatMul(Var, Var, MatMulKind),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
        batch: usize,
        rows: usize,
        scores: Tensor,
    },
    MaeLoss {
        pred: Var,
        target: Tensor,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation trace for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Tracked leaf: receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Row-stochastic score matrix saved by an [`Tape::attention`] node.
    pub fn attention_scores(&self, v: Var) -> Option<&Tensor> {
        match &self.nodes[v.0].op {
            Op::Attention { scores, .. } => Some(scores),
            _ => None,
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `a + b` with `b` broadcast onto the shape of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let map = broadcast_offsets(va.shape(), vb.shape())
            .ok_or_else(|| Error::dim("add_broadcast", va.shape(), vb.shape()))?;
        let bd = vb.data();
        let data = va.data().iter().zip(&map).map(|(x, &j)| x + bd[j]).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::AddBroadcast(a, b), rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim("hadamard", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Hadamard(a, b), rg))
    }

    /// `scale * x + shift`, elementwise with scalar coefficients.
    pub fn scale_shift(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(&[x]);
        self.push(out, Op::ScaleShift(x, scale), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// Matrix product with batch handling:
    /// `[m,k]·[k,n]`, `[..,m,k]·[k,n]` (shared right operand),
    /// `[m,k]·[b,k,n]` (shared left operand) and `[b,m,k]·[b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::dim("matmul", &sa, &sb);
        let (kind, out_shape) = match (sa.len(), sb.len()) {
            (ra, 2) if ra >= 2 => {
                let k = sa[ra - 1];
                if k != sb[0] {
                    return Err(mismatch());
                }
                let m = sa[..ra - 1].iter().product();
                let mut shape = sa[..ra - 1].to_vec();
                shape.push(sb[1]);
                (MatMulKind::Plain { m, k, n: sb[1] }, shape)
            }
            (2, 3) => {
                if sa[1] != sb[1] {
                    return Err(mismatch());
                }
                let kind = MatMulKind::SharedLeft { batch: sb[0], m: sa[0], k: sa[1], n: sb[2] };
                (kind, vec![sb[0], sa[0], sb[2]])
            }
            (3, 3) => {
                if sa[0] != sb[0] || sa[2] != sb[1] {
                    return Err(mismatch());
                }
                let kind = MatMulKind::Batched { batch: sa[0], m: sa[1], k: sa[2], n: sb[2] };
                (kind, vec![sa[0], sa[1], sb[2]])
            }
            _ => return Err(mismatch()),
        };
        let mut out = vec![0.0; out_shape.iter().product()];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        match kind {
            MatMulKind::Plain { m, k, n } => {
                gemm(Operand::new(da, m, k), Operand::new(db, k, n), &mut out, false);
            }
            MatMulKind::SharedLeft { batch, m, k, n } => {
                for i in 0..batch {
                    gemm(
                        Operand::new(da, m, k),
                        Operand::new(&db[i * k * n..(i + 1) * k * n], k, n),
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
            }
            MatMulKind::Batched { batch, m, k, n } => {
                for i in 0..batch {
                    gemm(
                        Operand::new(&da[i * m * k..(i + 1) * m * k], m, k),
                        Operand::new(&db[i * k * n..(i + 1) * k * n], k, n),
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
            }
        }
        let out = Tensor::new(&out_shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b, kind), rg))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn row_softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.last_dim();
        let mut data = vx.data().to_vec();
        data.chunks_mut(c).for_each(softmax_in_place);
        let out = Tensor::new(vx.shape(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Normalization over the last (channel) axis with affine `gamma`, `beta` of length C.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.last_dim();
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.shape() != [c] || vb.shape() != [c] {
            return Err(Error::dim("layer_norm", vx.shape(), vg.shape()));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let rows = vx.numel() / c;
        let mut xhat = vec![0.0; vx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::dim("permute", shape, axes));
        }
        let out = permute_tensor(vx, axes);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Permute(x, axes.to_vec()), rg))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::dim("transpose", self.shape(x), &[2]));
        }
        self.permute(x, &[1, 0])
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptyInput("concat_last parts"))?;
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        let rows: usize = lead.iter().product();
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(Error::dim("concat_last", self.shape(*first), s));
            }
            width += s[s.len() - 1];
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                let v = self.value(p);
                let c = v.last_dim();
                out.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        let out = Tensor::new(&shape, out)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Scaled dot-product attention `softmax(Q·Kᵀ·scale)·V` over `[b, r, d]`
    /// (or `[r, d]`) operands. The score matrix is kept on the node.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        let (batch, rows, d, dv) = match (sq.len(), sk.len(), sv.len()) {
            (2, 2, 2) if sq == sk && sv[0] == sq[0] => (1, sq[0], sq[1], sv[1]),
            (3, 3, 3) if sq == sk && sv[..2] == sq[..2] => (sq[0], sq[1], sq[2], sv[2]),
            _ => return Err(Error::dim("attention", &sq, &sv)),
        };
        let (dq, dk, dvv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut scores = vec![0.0; batch * rows * rows];
        let mut out = vec![0.0; batch * rows * dv];
        for b in 0..batch {
            let s = &mut scores[b * rows * rows..(b + 1) * rows * rows];
            let qb = Operand::new(&dq[b * rows * d..(b + 1) * rows * d], rows, d);
            let kb = Operand::new(&dk[b * rows * d..(b + 1) * rows * d], rows, d);
            gemm(qb, kb.t(), s, false);
            for row in s.chunks_mut(rows) {
                row.iter_mut().for_each(|z| *z *= scale);
                softmax_in_place(row);
            }
            let vb = Operand::new(&dvv[b * rows * dv..(b + 1) * rows * dv], rows, dv);
            gemm(Operand::new(s, rows, rows), vb, &mut out[b * rows * dv..(b + 1) * rows * dv], false);
        }
        let scores_shape: Vec<usize> = if sq.len() == 2 { vec![rows, rows] } else { vec![batch, rows, rows] };
        let mut out_shape = sv.clone();
        *out_shape.last_mut().expect("rank >= 2") = dv;
        let out = Tensor::new(&out_shape, out)?;
        let scores = Tensor::new(&scores_shape, scores)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(out, Op::Attention { q, k, v, scale, batch, rows, scores }, rg))
    }

    /// Mean absolute error against an untracked target of the same shape.
    pub fn mae_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let vp = self.value(pred);
        if vp.shape() != target.shape() {
            return Err(Error::dim("mae_loss", vp.shape(), target.shape()));
        }
        let n = vp.numel() as f64;
        let loss = vp.data().iter().zip(target.data()).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
        let rg = self.rg(&[pred]);
        Ok(self.push(Tensor::scalar(loss), Op::MaeLoss { pred, target: target.clone() }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Reverse pass from a single-element output. Gradients are returned for
    /// every tracked leaf; intermediate gradients are released once consumed.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.numel() != 1 {
            return Err(Error::dim("backward", out.value.shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !out.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(Tensor::ones(out.value.shape()));
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        let t = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(t.data_mut());
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &x in [a, b] {
                    self.accumulate(grads, x, |d| d.iter_mut().zip(gd).for_each(|(o, gi)| *o += gi));
                }
            }
            Op::AddBroadcast(a, b) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(o, gi)| *o += gi));
                if self.requires_grad(*b) {
                    let map = broadcast_offsets(node.value.shape(), self.shape(*b)).expect("checked on forward");
                    self.accumulate(grads, *b, |d| {
                        for (&j, gi) in map.iter().zip(gd) {
                            d[j] += gi;
                        }
                    });
                }
            }
            Op::Hadamard(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * vb[i];
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * va[i];
                    }
                });
            }
            Op::ScaleShift(x, s) => {
                self.accumulate(grads, *x, |d| d.iter_mut().zip(gd).for_each(|(o, gi)| *o += s * gi));
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                self.accumulate(grads, *x, |d| {
                    for i in 0..d.len() {
                        if vx[i] > 0.0 {
                            d[i] += gd[i];
                        }
                    }
                });
            }
            Op::MatMul(a, b, kind) => self.matmul_backward(*a, *b, *kind, gd, grads),
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.last_dim();
                self.accumulate(grads, *x, |d| {
                    for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = node.value.last_dim();
                let vg = self.value(*gamma).data();
                self.accumulate(grads, *gamma, |d| {
                    for (hr, gr) in xhat.chunks(c).zip(gd.chunks(c)) {
                        for j in 0..c {
                            d[j] += hr[j] * gr[j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |d| {
                    for gr in gd.chunks(c) {
                        for j in 0..c {
                            d[j] += gr[j];
                        }
                    }
                });
                self.accumulate(grads, *x, |d| {
                    let cf = c as f64;
                    for (r, ((dr, hr), gr)) in d.chunks_mut(c).zip(xhat.chunks(c)).zip(gd.chunks(c)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * vg[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= cf;
                        mean_dh_h /= cf;
                        for j in 0..c {
                            let dh = gr[j] * vg[j];
                            dr[j] += rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |d| d.iter_mut().zip(gd).for_each(|(o, gi)| *o += gi));
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let back = permute_tensor(g, &inverse);
                self.accumulate(grads, *x, |d| d.iter_mut().zip(back.data()).for_each(|(o, gi)| *o += gi));
            }
            Op::Concat(parts) => {
                let width = node.value.last_dim();
                let rows = node.value.numel() / width;
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).last_dim();
                    self.accumulate(grads, p, |d| {
                        for r in 0..rows {
                            let src = &gd[r * width + offset..r * width + offset + c];
                            d[r * c..(r + 1) * c].iter_mut().zip(src).for_each(|(o, gi)| *o += gi);
                        }
                    });
                    offset += c;
                }
            }
            Op::Attention { q, k, v, scale, batch, rows, scores } => {
                self.attention_backward(*q, *k, *v, *scale, *batch, *rows, scores.data(), gd, grads);
            }
            Op::MaeLoss { pred, target } => {
                let vp = self.value(*pred).data();
                let n = vp.len() as f64;
                let g0 = gd[0] / n;
                self.accumulate(grads, *pred, |d| {
                    for i in 0..d.len() {
                        let diff = vp[i] - target.data()[i];
                        if diff > 0.0 {
                            d[i] += g0;
                        } else if diff < 0.0 {
                            d[i] -= g0;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|o| *o += g0));
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, kind: MatMulKind, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let (da, db) = (self.value(a).data(), self.value(b).data());
        match kind {
            MatMulKind::Plain { m, k, n } => {
                // dA += g·Bᵀ, dB += Aᵀ·g
                self.accumulate(grads, a, |d| gemm(Operand::new(gd, m, n), Operand::new(db, k, n).t(), d, true));
                self.accumulate(grads, b, |d| gemm(Operand::new(da, m, k).t(), Operand::new(gd, m, n), d, true));
            }
            MatMulKind::SharedLeft { batch, m, k, n } => {
                self.accumulate(grads, a, |d| {
                    for i in 0..batch {
                        let gi = Operand::new(&gd[i * m * n..(i + 1) * m * n], m, n);
                        let bi = Operand::new(&db[i * k * n..(i + 1) * k * n], k, n);
                        gemm(gi, bi.t(), d, true);
                    }
                });
                self.accumulate(grads, b, |d| {
                    for i in 0..batch {
                        let gi = Operand::new(&gd[i * m * n..(i + 1) * m * n], m, n);
                        gemm(Operand::new(da, m, k).t(), gi, &mut d[i * k * n..(i + 1) * k * n], true);
                    }
                });
            }
            MatMulKind::Batched { batch, m, k, n } => {
                self.accumulate(grads, a, |d| {
                    for i in 0..batch {
                        let gi = Operand::new(&gd[i * m * n..(i + 1) * m * n], m, n);
                        let bi = Operand::new(&db[i * k * n..(i + 1) * k * n], k, n);
                        gemm(gi, bi.t(), &mut d[i * m * k..(i + 1) * m * k], true);
                    }
                });
                self.accumulate(grads, b, |d| {
                    for i in 0..batch {
                        let gi = Operand::new(&gd[i * m * n..(i + 1) * m * n], m, n);
                        let ai = Operand::new(&da[i * m * k..(i + 1) * m * k], m, k);
                        gemm(ai.t(), gi, &mut d[i * k * n..(i + 1) * k * n], true);
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
        batch: usize,
        rows: usize,
        scores: &[f64],
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let d = self.value(q).last_dim();
        let dv = self.value(v).last_dim();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let need_qk = self.requires_grad(q) || self.requires_grad(k);
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dvals = vec![0.0; vd.len()];
        let mut ds = vec![0.0; rows * rows];
        for b in 0..batch {
            let s = &scores[b * rows * rows..(b + 1) * rows * rows];
            let gb = Operand::new(&gd[b * rows * dv..(b + 1) * rows * dv], rows, dv);
            // dV = Sᵀ·g
            gemm(Operand::new(s, rows, rows).t(), gb, &mut dvals[b * rows * dv..(b + 1) * rows * dv], false);
            if !need_qk {
                continue;
            }
            // dS = g·Vᵀ, then through the row softmax and the scale.
            let vb = Operand::new(&vd[b * rows * dv..(b + 1) * rows * dv], rows, dv);
            gemm(gb, vb.t(), &mut ds, false);
            for (dsr, sr) in ds.chunks_mut(rows).zip(s.chunks(rows)) {
                let dot: f64 = dsr.iter().zip(sr).map(|(a, b)| a * b).sum();
                for j in 0..rows {
                    dsr[j] = scale * sr[j] * (dsr[j] - dot);
                }
            }
            let kb = Operand::new(&kd[b * rows * d..(b + 1) * rows * d], rows, d);
            let qb = Operand::new(&qd[b * rows * d..(b + 1) * rows * d], rows, d);
            gemm(Operand::new(&ds, rows, rows), kb, &mut dq[b * rows * d..(b + 1) * rows * d], false);
            gemm(Operand::new(&ds, rows, rows).t(), qb, &mut dk[b * rows * d..(b + 1) * rows * d], false);
        }
        self.accumulate(grads, v, |d| add_into(d, &dvals));
        if need_qk {
            self.accumulate(grads, q, |d| add_into(d, &dq));
            self.accumulate(grads, k, |d| add_into(d, &dk));
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, s)| *o += s);
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in row.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    row.iter_mut().for_each(|z| *z /= sum);
}

/// For each flat index of `lhs`, the flat index of the broadcast `rhs` element.
fn broadcast_offsets(lhs: &[usize], rhs: &[usize]) -> Option<Vec<usize>> {
    if rhs.len() > lhs.len() {
        return None;
    }
    let pad = lhs.len() - rhs.len();
    let mut strides = vec![0usize; lhs.len()];
    let mut acc = 1;
    for i in (0..rhs.len()).rev() {
        let (l, r) = (lhs[pad + i], rhs[i]);
        if r == l {
            strides[pad + i] = acc;
        } else if r != 1 {
            return None;
        }
        acc *= r;
    }
    let numel: usize = lhs.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; lhs.len()];
    let mut off = 0usize;
    for _ in 0..numel {
        out.push(off);
        for ax in (0..lhs.len()).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < lhs[ax] {
                break;
            }
            off -= strides[ax] * lhs[ax];
            idx[ax] = 0;
        }
    }
    Some(out)
}

fn permute_tensor(x: &Tensor, axes: &[usize]) -> Tensor {
    let shape = x.shape();
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..src.len() {
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permutation preserves numel")
}
