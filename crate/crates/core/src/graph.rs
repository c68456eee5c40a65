//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in execution order, so the node index is a valid
//! topological order and [`Graph::backward`] walks it in reverse exactly once.
//! Leaves created from tensors with `requires_grad` accumulate gradients across
//! repeated `backward` calls until [`Graph::zero_grads`].

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{gemm, gemm_strided};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Silu,
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, a_t: bool, b_t: bool },
    Binary { kind: Binary, a: Var, b: Var },
    Unary { kind: Unary, a: Var },
    Scale { a: Var, factor: f64 },
    Sum { a: Var },
    Mean { a: Var },
    Reshape { a: Var },
    Embedding { table: Var, ids: Vec<usize> },
    RmsNorm { x: Var, weight: Var, inv_rms: Vec<f64> },
    Rope { x: Var, n_heads: usize, seq_len: usize, cos: Vec<f64>, sin: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, batch: usize, seq_len: usize, n_heads: usize, probs: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    KlDiv { student: Var, teacher_probs: Vec<f64>, student_probs: Vec<f64>, include: Vec<bool>, count: usize },
    Dropout { a: Var, mask: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of a computation, confined to one thread.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

pub const ROPE_BASE: f64 = 10_000.0;

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Row-wise log-softmax helper: returns softmax probabilities and logsumexp.
fn softmax_row(row: &[f64], out: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = libm::exp(x - max);
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
    max + libm::log(sum)
}

impl Graph {
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
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Inserts a leaf; it is trainable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        let rg = tensor.requires_grad();
        let value = Tensor::new(tensor.shape(), tensor.data().to_vec()).expect("valid tensor");
        self.push(value, Op::Leaf, rg)
    }

    /// Inserts a non-trainable leaf, taking ownership.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.detach(), Op::Leaf, false)
    }

    /// Inserts a trainable leaf, taking ownership.
    pub fn variable(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.detach(), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// `op(a) · op(b)` for 2-D operands, with optional transposition of either side.
    pub fn matmul_t(&mut self, a: Var, a_t: bool, b: Var, b_t: bool) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k) = if a_t { (av.cols(), av.rows()) } else { (av.rows(), av.cols()) };
        let (k2, n) = if b_t { (bv.cols(), bv.rows()) } else { (bv.rows(), bv.cols()) };
        if k != k2 {
            return Err(shape_err("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, av.data(), a_t, bv.data(), b_t, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, a_t, b_t }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `x · wᵀ`, the layout of a linear layer whose weight is stored `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        self.matmul_t(x, false, w, true)
    }

    /// Elementwise binary op; `b` may broadcast over the trailing dimensions of `a`.
    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (av.shape(), bv.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("elementwise", av, bv));
        }
        let inner = bv.len().max(1);
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let bd = bv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % inner]))
            .collect();
        let value = Tensor::new(sa, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let data = av
            .data()
            .iter()
            .map(|&x| match kind {
                Unary::Silu => x * sigmoid(x),
                Unary::Gelu => 0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2)),
            })
            .collect();
        let value = Tensor::new(av.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Unary { kind, a }, rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(Unary::Silu, a)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Unary::Gelu, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.nodes[a.0].value.scale(factor);
        let rg = self.rg(a);
        self.push(value, Op::Scale { a, factor }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean { a }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    /// Gathers rows of `table` (`[V, d]`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        let (v, d) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
            out.extend_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(&[ids.len(), d], out)?,
            Op::Embedding { table, ids: ids.to_vec() },
            rg,
        ))
    }

    /// RMS normalization over the last dimension, then elementwise `weight`.
    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: f64) -> Result<Var> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[weight.0].value);
        let d = xv.cols();
        if wv.len() != d {
            return Err(shape_err("rms_norm", xv, wv));
        }
        let n = xv.rows();
        let mut out = vec![0.0; n * d];
        let mut inv_rms = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let ms = row.iter().map(|x| x * x).sum::<f64>() / d as f64;
            let r = 1.0 / libm::sqrt(ms + eps);
            inv_rms.push(r);
            for j in 0..d {
                out[i * d + j] = row[j] * r * wv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(weight);
        Ok(self.push(value, Op::RmsNorm { x, weight, inv_rms }, rg))
    }

    /// Rotary position encoding on `[B*T, d]` activations split into `n_heads`.
    pub fn rope(&mut self, x: Var, n_heads: usize, seq_len: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let d = xv.cols();
        if n_heads == 0 || !d.is_multiple_of(n_heads) || !(d / n_heads).is_multiple_of(2) || !xv.rows().is_multiple_of(seq_len) {
            return Err(Error::InvalidArgument(alloc::format!(
                "rope: width {d} with {n_heads} heads over rows {} / seq {seq_len}",
                xv.rows()
            )));
        }
        let hd = d / n_heads;
        let half = hd / 2;
        let mut cos = vec![0.0; seq_len * half];
        let mut sin = vec![0.0; seq_len * half];
        for t in 0..seq_len {
            for i in 0..half {
                let freq = libm::pow(ROPE_BASE, -2.0 * i as f64 / hd as f64);
                let angle = t as f64 * freq;
                cos[t * half + i] = libm::cos(angle);
                sin[t * half + i] = libm::sin(angle);
            }
        }
        let mut out = xv.data().to_vec();
        rope_apply(&mut out, d, n_heads, seq_len, &cos, &sin, false);
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Rope { x, n_heads, seq_len, cos, sin }, rg))
    }

    /// Multi-head causal self-attention on `[B*T, d]` projections.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq_len: usize,
        n_heads: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(shape_err("attention", qv, kv));
        }
        let d = qv.cols();
        if qv.rows() != batch * seq_len || n_heads == 0 || d % n_heads != 0 {
            return Err(Error::InvalidArgument(alloc::format!(
                "attention: {:?} is not [{batch}*{seq_len}, d] with {n_heads} heads",
                qv.shape()
            )));
        }
        let hd = d / n_heads;
        let scale = 1.0 / libm::sqrt(hd as f64);
        let t = seq_len;
        let mut probs = vec![0.0; batch * n_heads * t * t];
        let mut out = vec![0.0; batch * t * d];
        for b in 0..batch {
            for h in 0..n_heads {
                let off = b * t * d + h * hd;
                let p = &mut probs[(b * n_heads + h) * t * t..][..t * t];
                // SAFETY: head slices are `t` rows of `hd` columns with row stride `d`
                // inside buffers of length `batch * t * d`; `p` is a distinct `t x t` buffer.
                unsafe {
                    gemm_strided(
                        t, hd, t, scale,
                        qv.data().as_ptr().add(off), d as isize, 1,
                        kv.data().as_ptr().add(off), 1, d as isize,
                        0.0, p.as_mut_ptr(), t as isize, 1,
                    );
                }
                for i in 0..t {
                    let row = &mut p[i * t..(i + 1) * t];
                    let max = row[..=i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for x in row[..=i].iter_mut() {
                        *x = libm::exp(*x - max);
                        sum += *x;
                    }
                    row[..=i].iter_mut().for_each(|x| *x /= sum);
                    row[i + 1..].iter_mut().for_each(|x| *x = 0.0);
                }
                // SAFETY: as above; `out` head slice has the same layout as `q`.
                unsafe {
                    gemm_strided(
                        t, t, hd, 1.0,
                        p.as_ptr(), t as isize, 1,
                        vv.data().as_ptr().add(off), d as isize, 1,
                        0.0, out.as_mut_ptr().add(off), d as isize, 1,
                    );
                }
            }
        }
        let value = Tensor::new(qv.shape(), out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            value,
            Op::Attention { q, k, v, batch, seq_len, n_heads, probs },
            rg,
        ))
    }

    /// Mean token cross-entropy of `logits` (`[..., V]`) against `targets`.
    /// Positions whose target equals `ignore_index` are skipped.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_index: Option<usize>,
    ) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        let vocab = *lv.shape().last().unwrap_or(&1);
        let rows = lv.len() / vocab.max(1);
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; rows * vocab];
        let mut tgt = Vec::with_capacity(rows);
        let mut total = 0.0;
        let mut count = 0;
        for (i, &t) in targets.iter().enumerate() {
            if Some(t) == ignore_index {
                tgt.push(None);
                continue;
            }
            if t >= vocab {
                return Err(Error::TokenOutOfRange { id: t, vocab });
            }
            let row = &lv.data()[i * vocab..(i + 1) * vocab];
            let lse = softmax_row(row, &mut probs[i * vocab..(i + 1) * vocab]);
            total += lse - row[t];
            count += 1;
            tgt.push(Some(t));
        }
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy { logits, targets: tgt, probs, count },
            rg,
        ))
    }

    /// Mean over included positions of `KL(softmax(teacher) || softmax(student))`.
    /// The teacher is a constant; gradients reach `student` only.
    pub fn kl_divergence(
        &mut self,
        teacher: &Tensor,
        student: Var,
        include: Option<&[bool]>,
    ) -> Result<Var> {
        let sv = &self.nodes[student.0].value;
        if sv.shape() != teacher.shape() {
            return Err(shape_err("kl_divergence", teacher, sv));
        }
        let vocab = *sv.shape().last().unwrap_or(&1);
        let rows = sv.len() / vocab.max(1);
        let include = match include {
            Some(m) if m.len() != rows => {
                return Err(Error::Shape {
                    op: "kl_divergence",
                    lhs: sv.shape().to_vec(),
                    rhs: vec![m.len()],
                })
            }
            Some(m) => m.to_vec(),
            None => vec![true; rows],
        };
        let mut tp = vec![0.0; rows * vocab];
        let mut sp = vec![0.0; rows * vocab];
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..rows {
            if !include[i] {
                continue;
            }
            let r = i * vocab..(i + 1) * vocab;
            let t_lse = softmax_row(&teacher.data()[r.clone()], &mut tp[r.clone()]);
            let s_lse = softmax_row(&sv.data()[r.clone()], &mut sp[r.clone()]);
            let mut kl = 0.0;
            for j in r {
                let p = tp[j];
                if p > 0.0 {
                    let log_p = teacher.data()[j] - t_lse;
                    let log_q = sv.data()[j] - s_lse;
                    kl += p * (log_p - log_q);
                }
            }
            total += kl;
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let rg = self.rg(student);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::KlDiv { student, teacher_probs: tp, student_probs: sp, include, count },
            rg,
        ))
    }

    /// Inverted dropout with drop probability `p`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - p);
        let av = &self.nodes[a.0].value;
        let mask: Vec<f64> = (0..av.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(av.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Dropout { a, mask }, rg)
    }

    /// Backpropagates from a scalar `loss`, accumulating into trainable leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Returns the gradient buffer for `v`, or None when `v` is frozen.
        fn slot<'a>(
            nodes: &[Node],
            grads: &'a mut [Option<Vec<f64>>],
            v: Var,
        ) -> Option<&'a mut Vec<f64>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let len = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
        }
        match &nodes[i].op {
            Op::Leaf => {
                let acc = self.leaf_grads[i].get_or_insert_with(|| vec![0.0; g.len()]);
                add_into(acc, &g);
            }
            &Op::MatMul { a, b, a_t, b_t } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, n) = (nodes[i].value.rows(), nodes[i].value.cols());
                let k = if a_t { av.rows() } else { av.cols() };
                if let Some(ga) = slot(nodes, grads, a) {
                    if a_t {
                        gemm(k, n, m, 1.0, bv.data(), b_t, &g, true, 1.0, ga);
                    } else {
                        gemm(m, n, k, 1.0, &g, false, bv.data(), !b_t, 1.0, ga);
                    }
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    if b_t {
                        gemm(n, m, k, 1.0, &g, true, av.data(), a_t, 1.0, gb);
                    } else {
                        gemm(k, m, n, 1.0, av.data(), !a_t, &g, false, 1.0, gb);
                    }
                }
            }
            &Op::Binary { kind, a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let inner = bv.len().max(1);
                if let Some(ga) = slot(nodes, grads, a) {
                    match kind {
                        Binary::Add | Binary::Sub => add_into(ga, &g),
                        Binary::Mul => {
                            for (idx, (d, gi)) in ga.iter_mut().zip(&g).enumerate() {
                                *d += gi * bv.data()[idx % inner];
                            }
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    for (idx, gi) in g.iter().enumerate() {
                        let contrib = match kind {
                            Binary::Add => *gi,
                            Binary::Sub => -*gi,
                            Binary::Mul => gi * av.data()[idx],
                        };
                        gb[idx % inner] += contrib;
                    }
                }
            }
            &Op::Unary { kind, a } => {
                let av = &nodes[a.0].value;
                if let Some(ga) = slot(nodes, grads, a) {
                    for ((d, gi), &x) in ga.iter_mut().zip(&g).zip(av.data()) {
                        let dydx = match kind {
                            Unary::Silu => {
                                let s = sigmoid(x);
                                s * (1.0 + x * (1.0 - s))
                            }
                            Unary::Gelu => {
                                0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
                                    + x * FRAC_1_SQRT_2PI * libm::exp(-0.5 * x * x)
                            }
                        };
                        *d += gi * dydx;
                    }
                }
            }
            &Op::Scale { a, factor } => {
                if let Some(ga) = slot(nodes, grads, a) {
                    ga.iter_mut().zip(&g).for_each(|(d, gi)| *d += gi * factor);
                }
            }
            &Op::Sum { a } => {
                if let Some(ga) = slot(nodes, grads, a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean { a } => {
                if let Some(ga) = slot(nodes, grads, a) {
                    let n = ga.len() as f64;
                    ga.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            &Op::Reshape { a } => {
                if let Some(ga) = slot(nodes, grads, a) {
                    add_into(ga, &g);
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[i].value.cols();
                if let Some(gt) = slot(nodes, grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::RmsNorm { x, weight, inv_rms } => {
                let (xv, wv) = (&nodes[x.0].value, &nodes[weight.0].value);
                let d = xv.cols();
                let w = wv.data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (row, &r) in inv_rms.iter().enumerate() {
                        let xr = xv.row(row);
                        let gr = &g[row * d..(row + 1) * d];
                        let dot: f64 = (0..d).map(|j| gr[j] * w[j] * xr[j]).sum();
                        let coef = r * r * r * dot / d as f64;
                        for j in 0..d {
                            gx[row * d + j] += r * gr[j] * w[j] - coef * xr[j];
                        }
                    }
                }
                if let Some(gw) = slot(nodes, grads, *weight) {
                    for (row, &r) in inv_rms.iter().enumerate() {
                        let xr = xv.row(row);
                        for j in 0..d {
                            gw[j] += g[row * d + j] * xr[j] * r;
                        }
                    }
                }
            }
            Op::Rope { x, n_heads, seq_len, cos, sin } => {
                let d = nodes[i].value.cols();
                if let Some(gx) = slot(nodes, grads, *x) {
                    let mut back = g.clone();
                    rope_apply(&mut back, d, *n_heads, *seq_len, cos, sin, true);
                    add_into(gx, &back);
                }
            }
            Op::Attention { q, k, v, batch, seq_len, n_heads, probs } => {
                let (q, k, v) = (*q, *k, *v);
                let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let d = qv.cols();
                let hd = d / n_heads;
                let t = *seq_len;
                let scale = 1.0 / libm::sqrt(hd as f64);
                let n = qv.len();
                let mut dq = vec![0.0; n];
                let mut dk = vec![0.0; n];
                let mut dv = vec![0.0; n];
                let mut dp = vec![0.0; t * t];
                for b in 0..*batch {
                    for h in 0..*n_heads {
                        let off = b * t * d + h * hd;
                        let p = &probs[(b * n_heads + h) * t * t..][..t * t];
                        // SAFETY: every head view is `t x hd` with row stride `d` inside
                        // buffers of length `batch * t * d`; `p`/`dp` are `t x t`.
                        unsafe {
                            // dV += Pᵀ dO
                            gemm_strided(
                                t, t, hd, 1.0,
                                p.as_ptr(), 1, t as isize,
                                g.as_ptr().add(off), d as isize, 1,
                                1.0, dv.as_mut_ptr().add(off), d as isize, 1,
                            );
                            // dP = dO Vᵀ
                            gemm_strided(
                                t, hd, t, 1.0,
                                g.as_ptr().add(off), d as isize, 1,
                                vv.data().as_ptr().add(off), 1, d as isize,
                                0.0, dp.as_mut_ptr(), t as isize, 1,
                            );
                        }
                        for r in 0..t {
                            let pr = &p[r * t..(r + 1) * t];
                            let dr = &mut dp[r * t..(r + 1) * t];
                            let dot: f64 = pr[..=r].iter().zip(&dr[..=r]).map(|(a, b)| a * b).sum();
                            for c in 0..=r {
                                dr[c] = pr[c] * (dr[c] - dot) * scale;
                            }
                            dr[r + 1..].iter_mut().for_each(|x| *x = 0.0);
                        }
                        unsafe {
                            // dQ += dS K
                            gemm_strided(
                                t, t, hd, 1.0,
                                dp.as_ptr(), t as isize, 1,
                                kv.data().as_ptr().add(off), d as isize, 1,
                                1.0, dq.as_mut_ptr().add(off), d as isize, 1,
                            );
                            // dK += dSᵀ Q
                            gemm_strided(
                                t, t, hd, 1.0,
                                dp.as_ptr(), 1, t as isize,
                                qv.data().as_ptr().add(off), d as isize, 1,
                                1.0, dk.as_mut_ptr().add(off), d as isize, 1,
                            );
                        }
                    }
                }
                for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
                    if let Some(gs) = slot(nodes, grads, var) {
                        add_into(gs, &buf);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let vocab = nodes[logits.0].value.shape().last().copied().unwrap_or(1);
                if let Some(gl) = slot(nodes, grads, *logits) {
                    let s = g[0] / *count as f64;
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let base = r * vocab;
                        for j in 0..vocab {
                            gl[base + j] += s * probs[base + j];
                        }
                        gl[base + t] -= s;
                    }
                }
            }
            Op::KlDiv { student, teacher_probs, student_probs, include, count } => {
                let vocab = nodes[student.0].value.shape().last().copied().unwrap_or(1);
                if let Some(gs) = slot(nodes, grads, *student) {
                    let s = g[0] / *count as f64;
                    for (r, &inc) in include.iter().enumerate() {
                        if !inc {
                            continue;
                        }
                        for j in r * vocab..(r + 1) * vocab {
                            gs[j] += s * (student_probs[j] - teacher_probs[j]);
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, gi), m) in ga.iter_mut().zip(&g).zip(mask) {
                        *d += gi * m;
                    }
                }
            }
        }
    }
}

/// Rotates head-dimension pairs `(j, j + hd/2)`; `inverse` rotates backwards.
fn rope_apply(
    buf: &mut [f64],
    d: usize,
    n_heads: usize,
    seq_len: usize,
    cos: &[f64],
    sin: &[f64],
    inverse: bool,
) {
    let hd = d / n_heads;
    let half = hd / 2;
    for (row, chunk) in buf.chunks_mut(d).enumerate() {
        let t = row % seq_len;
        for h in 0..n_heads {
            let head = &mut chunk[h * hd..(h + 1) * hd];
            for j in 0..half {
                let (c, s) = (cos[t * half + j], sin[t * half + j]);
                let s = if inverse { -s } else { s };
                let (x1, x2) = (head[j], head[j + half]);
                head[j] = x1 * c - x2 * s;
                head[j + half] = x1 * s + x2 * c;
            }
        }
    }
}
