//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! Every operation appends a node holding its forward value and the data its
//! backward rule needs. Nodes are only ever appended, so the tape is always in
//! topological order and `backward` is a single reverse sweep.

use std::borrow::Cow;
use std::rc::Rc;

use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Logit assigned to masked attention positions before the softmax.
pub const MASKED_LOGIT: f64 = -1e9;

/// One query block attending to one key block inside a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

/// Describes which (query, key) pairs are visible to each other.
///
/// Sequences of a batch are packed row-wise; each [`Segment`] pairs a query
/// range with a key range. A position is masked when it is a future key under
/// `causal`, when its key row is flagged in `key_masked`, or when `explicit`
/// (single-segment layouts only, `q_len × k_len`, `true` = masked) says so.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub segments: Vec<Segment>,
    pub causal: bool,
    pub key_masked: Option<Vec<bool>>,
    pub explicit: Option<Vec<bool>>,
}

impl AttentionLayout {
    /// A single query block over a single key block with an optional explicit mask.
    pub fn single(q_len: usize, k_len: usize, mask: Option<Vec<bool>>) -> Self {
        AttentionLayout {
            segments: vec![Segment {
                q_start: 0,
                q_len,
                k_start: 0,
                k_len,
            }],
            causal: false,
            key_masked: None,
            explicit: mask,
        }
    }

    fn is_masked(&self, seg: &Segment, i: usize, j: usize) -> bool {
        if self.causal && j > i {
            return true;
        }
        if let Some(km) = &self.key_masked {
            if km[seg.k_start + j] {
                return true;
            }
        }
        if let Some(ex) = &self.explicit {
            if ex[i * seg.k_len + j] {
                return true;
            }
        }
        false
    }

    fn validate(&self, nq: usize, nk: usize) -> Result<()> {
        for s in &self.segments {
            if s.q_start + s.q_len > nq || s.k_start + s.k_len > nk {
                return Err(Error::Dimension {
                    op: "attention layout",
                    lhs: vec![s.q_start + s.q_len, s.k_start + s.k_len],
                    rhs: vec![nq, nk],
                });
            }
        }
        if let Some(km) = &self.key_masked {
            if km.len() != nk {
                return Err(Error::Dimension {
                    op: "attention key mask",
                    lhs: vec![km.len()],
                    rhs: vec![nk],
                });
            }
        }
        if let Some(ex) = &self.explicit {
            match self.segments.as_slice() {
                [s] if ex.len() == s.q_len * s.k_len => {}
                _ => {
                    return Err(Error::Dimension {
                        op: "attention explicit mask",
                        lhs: vec![ex.len()],
                        rhs: vec![nq, nk],
                    })
                }
            }
        }
        Ok(())
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        a_t: bool,
        b_t: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Rc<AttentionLayout>,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad: Option<usize>,
        probs: Vec<f64>,
        count: usize,
    },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
///
/// Only nodes that require a gradient ever get a buffer, so frozen
/// parameters have no gradient allocated at all.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        self.get(v)
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.to_vec()).expect("gradient shape"))
    }
}

/// Recording of one forward computation. Parameters may be borrowed for the
/// lifetime `'p` so that building a tape never copies model weights.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite forward value");
        self.nodes.push(Node {
            value: Cow::Owned(value),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an owned leaf value.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Records a constant (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a borrowed leaf, typically a model parameter.
    pub fn param(&mut self, value: &'p Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, a_t: bool, b_t: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(dim_err("matmul", av.shape(), bv.shape()));
        }
        let (ar, ac) = av.dims2();
        let (br, bc) = bv.dims2();
        let (m, k) = if a_t { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(dim_err("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), a_t, bv.data(), b_t, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            rg,
            Op::MatMul {
                a,
                b,
                a_t,
                b_t,
                m,
                k,
                n,
            },
        ))
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    /// Adds the vector `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let (_, c) = av.dims2();
        if bv.len() != c {
            return Err(dim_err("add_row", av.shape(), bv.shape()));
        }
        let b = bv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + b[i % c])
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(t, rg, Op::AddRow(a, bias)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(t, rg, Op::Scale(a, c))
    }

    /// Elementwise `max(0, x)`; the gradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let t = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        )
        .expect("same shape");
        let rg = self.rg(a);
        self.push(t, rg, Op::Relu(a))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = av.dims2();
        let mut out = av.data().to_vec();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(av.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(t, rg, Op::Softmax(a))
    }

    /// Row-wise layer normalization with biased variance and `eps` inside the root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(contract("layer_norm eps must be positive"));
        }
        let xv = self.value(x);
        let (r, d) = xv.dims2();
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.len() != d || bv.len() != d {
            return Err(dim_err("layer_norm", xv.shape(), gv.shape()));
        }
        let (g, b) = (gv.data(), bv.data());
        let mut out = vec![0.0; r * d];
        let mut xhat = vec![0.0; r * d];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = &xv.data()[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Selects rows of `table` (`V×d`) by id, giving `ids.len()×d`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = tv.dims2();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index { index: id, size: v });
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::matrix(ids.len(), d, out)?;
        let rg = self.rg(table);
        Ok(self.push(
            t,
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Inverted dropout. Returns `x` unchanged when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, rg, Op::Dropout { x, mask })
    }

    /// Multi-head scaled dot-product attention over already projected
    /// queries, keys and values. Heads are contiguous column blocks; the
    /// output has the shape of `q`. Fully masked query rows produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Rc<AttentionLayout>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = qv.dims2();
        let (nk, dk) = kv.dims2();
        if dk != d || vv.dims2() != (nk, d) {
            return Err(dim_err("attention", qv.shape(), kv.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(dim_err("attention heads", &[d], &[heads]));
        }
        layout.validate(nq, nk)?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = vec![0.0; nq * d];
        let total: usize = layout.segments.iter().map(|s| s.q_len * s.k_len).sum();
        let mut probs = vec![0.0; total * heads];
        let mut off = 0;
        for seg in &layout.segments {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..seg.q_len {
                    let qi = (seg.q_start + i) * d + c0;
                    let row = &mut probs[off + i * seg.k_len..off + (i + 1) * seg.k_len];
                    let mut any = false;
                    for (j, p) in row.iter_mut().enumerate() {
                        if layout.is_masked(seg, i, j) {
                            *p = MASKED_LOGIT;
                        } else {
                            any = true;
                            let kj = (seg.k_start + j) * d + c0;
                            let s: f64 = (0..dh).map(|t| qd[qi + t] * kd[kj + t]).sum();
                            *p = s * scale;
                        }
                    }
                    if !any {
                        row.iter_mut().for_each(|p| *p = 0.0);
                        continue;
                    }
                    softmax_in_place(row);
                    let o = &mut out[qi..qi + dh];
                    for (j, &p) in row.iter().enumerate() {
                        if p != 0.0 {
                            let vj = (seg.k_start + j) * d + c0;
                            for t in 0..dh {
                                o[t] += p * vd[vj + t];
                            }
                        }
                    }
                }
                off += seg.q_len * seg.k_len;
            }
        }
        let t = Tensor::new(qv.shape().to_vec(), out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            t,
            rg,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, skipping rows whose target equals `pad`. All-pad input gives 0.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        pad: Option<usize>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (t, vocab) = lv.dims2();
        if targets.len() != t {
            return Err(dim_err("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        let mut count = 0;
        for (i, &tg) in targets.iter().enumerate() {
            if Some(tg) == pad {
                continue;
            }
            if tg >= vocab {
                return Err(Error::Index {
                    index: tg,
                    size: vocab,
                });
            }
            let row = &mut probs[i * vocab..(i + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[tg];
            count += 1;
            softmax_in_place(row);
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad,
                probs,
                count,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Intermediate gradients are only useful for inspection; keep leaves.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backward_node(&self, node: &Node<'p>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                a_t,
                b_t,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if self.rg(*a) {
                    let ga = slot(grads, *a, m * k);
                    if *a_t {
                        gemm(k, n, m, val(*b), *b_t, g, true, ga, true);
                    } else {
                        gemm(m, n, k, g, false, val(*b), !*b_t, ga, true);
                    }
                }
                if self.rg(*b) {
                    let gb = slot(grads, *b, k * n);
                    if *b_t {
                        gemm(n, m, k, g, true, val(*a), *a_t, gb, true);
                    } else {
                        gemm(k, m, n, val(*a), !*a_t, g, false, gb, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        axpy(slot(grads, *v, g.len()), g);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if self.rg(*a) {
                    axpy(slot(grads, *a, g.len()), g);
                }
                if self.rg(*bias) {
                    let c = self.nodes[bias.0].value.len();
                    let gb = slot(grads, *bias, c);
                    for row in g.chunks(c) {
                        axpy(gb, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.rg(*a) {
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if self.rg(*b) {
                    let gb = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * c;
                }
            }
            Op::Relu(a) => {
                let av = val(*a);
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                let ga = slot(grads, *a, n);
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let (r, c) = node.value.dims2();
                let ga = slot(grads, *a, g.len());
                for i in 0..r {
                    let ys = &y[i * c..(i + 1) * c];
                    let gs = &g[i * c..(i + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        ga[i * c + j] += ys[j] * (gs[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (r, d) = node.value.dims2();
                if self.rg(*gain) {
                    let gg = slot(grads, *gain, d);
                    for i in 0..r {
                        for j in 0..d {
                            gg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                }
                if self.rg(*bias) {
                    let gb = slot(grads, *bias, d);
                    for row in g.chunks(d) {
                        axpy(gb, row);
                    }
                }
                if self.rg(*x) {
                    let gain_v = val(*gain);
                    let gx = slot(grads, *x, r * d);
                    let mut dxhat = vec![0.0; d];
                    for i in 0..r {
                        let xh = &xhat[i * d..(i + 1) * d];
                        for j in 0..d {
                            dxhat[j] = g[i * d + j] * gain_v[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>()
                            / d as f64;
                        for j in 0..d {
                            gx[i * d + j] += rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let tv = &self.nodes[table.0].value;
                let (_, d) = tv.dims2();
                let gt = slot(grads, *table, tv.len());
                for (r, &id) in ids.iter().enumerate() {
                    axpy(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::Dropout { x, mask } => {
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * mask[i];
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, layout, probs, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let (_, vocab) = self.nodes[logits.0].value.dims2();
                let gl = slot(grads, *logits, probs.len());
                let w = g[0] / *count as f64;
                for (i, &tg) in targets.iter().enumerate() {
                    if Some(tg) == *pad {
                        continue;
                    }
                    let row = &probs[i * vocab..(i + 1) * vocab];
                    let out = &mut gl[i * vocab..(i + 1) * vocab];
                    for j in 0..vocab {
                        out[j] += w * row[j];
                    }
                    out[tg] -= w;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: &AttentionLayout,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qd, kd, vd) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let (_, d) = self.nodes[q.0].value.dims2();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = vec![0.0; qd.len()];
        let mut gk = vec![0.0; kd.len()];
        let mut gv = vec![0.0; vd.len()];
        let mut dp = Vec::new();
        let mut off = 0;
        for seg in &layout.segments {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..seg.q_len {
                    let qi = (seg.q_start + i) * d + c0;
                    let row = &probs[off + i * seg.k_len..off + (i + 1) * seg.k_len];
                    let go = &g[qi..qi + dh];
                    dp.clear();
                    dp.resize(seg.k_len, 0.0);
                    let mut s = 0.0;
                    for (j, &p) in row.iter().enumerate() {
                        if p == 0.0 {
                            continue;
                        }
                        let vj = (seg.k_start + j) * d + c0;
                        let mut acc = 0.0;
                        for t in 0..dh {
                            acc += go[t] * vd[vj + t];
                            gv[vj + t] += p * go[t];
                        }
                        dp[j] = acc;
                        s += p * acc;
                    }
                    for (j, &p) in row.iter().enumerate() {
                        if p == 0.0 {
                            continue;
                        }
                        let ds = p * (dp[j] - s) * scale;
                        let kj = (seg.k_start + j) * d + c0;
                        for t in 0..dh {
                            gq[qi + t] += ds * kd[kj + t];
                            gk[kj + t] += ds * qd[qi + t];
                        }
                    }
                }
                off += seg.q_len * seg.k_len;
            }
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
            if self.rg(var) {
                axpy(slot(grads, var, buf.len()), &buf);
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Softmax of a plain vector, outside of any tape.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    if !out.is_empty() {
        softmax_in_place(&mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let id = tape.constant(Tensor::identity(2));
        let a = tape.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(m(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let z = tape.constant(Tensor::zeros(&[2, 2]));
        let ia = tape.matmul(id, a).unwrap();
        assert_eq!(tape.value(ia).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
        let az = tape.matmul(a, z).unwrap();
        assert!(tape.value(az).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(m(&[&[1.0, 3.0]]));
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-6 && (out[1] - 1.0).abs() < 1e-6);

        let g4 = tape.constant(Tensor::full(&[4], 1.0));
        let b4 = tape.constant(Tensor::zeros(&[4]));
        let c = tape.constant(Tensor::full(&[1, 4], 7.5));
        let y = tape.layer_norm(c, g4, b4, 1e-6).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let x = tape.constant(m(&[&[0.3, -2.0, 5.0, 1.25]]));
        let y = tape.layer_norm(x, g4, b4, 1e-6).unwrap();
        let out = tape.value(y).data();
        let mean = out.iter().sum::<f64>() / 4.0;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
        assert!(tape.layer_norm(x, g4, b4, 0.0).is_err());
    }

    #[test]
    fn relu_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]), true);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-3.0, -0.5]), true);
        let y = tape.relu(x);
        let s = tape.sum(y);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[0.0, 0.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.5, 4.0]), true);
        let y = tape.relu(x);
        let s = tape.sum(y);
        assert_eq!(tape.value(y).data(), &[0.5, 4.0]);
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        assert_eq!(softmax(&[1000.0, 1000.0]), vec![0.5, 0.5]);
        let p = softmax(&[0.0, 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(&[3, 4]), true);
        let loss = tape.cross_entropy(l, &[0, 1, 3], Some(99)).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-15);

        let mut big = Tensor::zeros(&[1, 4]);
        big.data_mut()[2] = 1e4;
        let b = tape.constant(big);
        let loss = tape.cross_entropy(b, &[2], None).unwrap();
        assert!(tape.value(loss).item() < 1e-12);

        let loss = tape.cross_entropy(l, &[0, 0, 0], Some(0)).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(l).is_none_or(|g| g.iter().all(|&v| v == 0.0)));

        assert!(matches!(
            tape.cross_entropy(l, &[0, 4, 1], None),
            Err(Error::Index { index: 4, size: 4 })
        ));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let w = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, -1.0]]), true);
        let wv = tape.param(&w, false);
        let y = tape.matmul(x, wv).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(wv).is_none());
        assert_eq!(g.get(x).unwrap(), &[3.0, 7.0]);
    }

    #[test]
    fn gradient_accumulates_over_uses() {
        // f(x) = sum(x*w) + sum(x*x), consumed twice, equals the fused expression.
        let xs = vec![0.5, -1.5, 2.0];
        let ws = vec![3.0, 0.25, -1.0];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(xs.clone()), true);
        let w = tape.constant(Tensor::vector(ws.clone()));
        let a = tape.mul(x, w).unwrap();
        let b = tape.mul(x, x).unwrap();
        let s = tape.add(a, b).unwrap();
        let s = tape.sum(s);
        let g = tape.backward(s).unwrap();
        let fused: Vec<f64> = xs.iter().zip(&ws).map(|(x, w)| w + 2.0 * x).collect();
        assert_eq!(g.get(x).unwrap(), fused.as_slice());
    }

    #[test]
    fn attention_single_position_and_masks() {
        let mut tape = Tape::new();
        let q = tape.constant(m(&[&[0.3, -0.7]]));
        let k = tape.constant(m(&[&[1.0, 2.0]]));
        let v = tape.constant(m(&[&[5.0, -6.0]]));
        let o = tape
            .attention(q, k, v, 1, Rc::new(AttentionLayout::single(1, 1, None)))
            .unwrap();
        assert_eq!(tape.value(o).data(), &[5.0, -6.0]);

        let q3 = tape.constant(m(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]));
        let v3 = tape.constant(m(&[&[1.0, 1.0], &[2.0, 2.0], &[3.0, 3.0]]));
        let mut causal = AttentionLayout::single(3, 3, None);
        causal.causal = true;
        let o = tape.attention(q3, q3, v3, 2, Rc::new(causal)).unwrap();
        assert_eq!(&tape.value(o).data()[..2], &[1.0, 1.0]);

        let all = AttentionLayout::single(3, 3, Some(vec![true; 9]));
        let o = tape.attention(q3, q3, v3, 1, Rc::new(all)).unwrap();
        assert!(tape.value(o).data().iter().all(|&x| x == 0.0));
    }
}
