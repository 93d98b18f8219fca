//! Eager tape: every op computes its value immediately and records enough
//! state to run the reverse sweep later.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::kernels::{add_into, axpy, gemm, log_sum_exp, softmax_in_place};
use super::{gelu_grad_scalar, gelu_scalar, Parameter, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which key positions each query row may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMask {
    /// Every row sees every row.
    Full,
    /// The first `visible_prefix` rows are visible to everyone; beyond that a
    /// row sees only itself and earlier rows.
    PrefixCausal { visible_prefix: usize },
}

impl AttentionMask {
    #[inline]
    fn allows(self, query: usize, key: usize) -> bool {
        match self {
            AttentionMask::Full => true,
            AttentionMask::PrefixCausal { visible_prefix } => key < visible_prefix || key <= query,
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: f64 },
    Gelu { x: Var },
    Relu { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, normed: Vec<f64>, rstd: Vec<f64> },
    Attention { qkv: Var, heads: usize, probs: Vec<f64> },
    ConcatRows { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    MeanRows { x: Var },
    Sum { x: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<Arc<str>>,
}

/// Parameter gradients collected by name after a reverse sweep.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    by_name: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.by_name.get(name).map(Vec::as_slice)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Vec<f64>) {
        self.by_name.insert(name.into(), grad);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    /// Adds `other` into `self`, name by name.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in &other.by_name {
            match self.by_name.get_mut(name) {
                Some(acc) => add_into(acc, g),
                None => {
                    self.by_name.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.by_name.values_mut() {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

/// Recording tape for one forward pass.
///
/// A graph built with [`Graph::inference`] records values only; parameters
/// enter as constants and [`Graph::backward`] is unavailable.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward sweep with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: value.with_requires_grad(requires_grad),
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Adds a constant or free variable.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        let mut t = tensor;
        t.zero_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Adds a parameter; it requires grad iff it is trainable.
    pub fn param(&mut self, p: &Parameter) -> Var {
        let mut t = p.tensor.clone();
        t.zero_grad();
        let v = self.push(t, Op::Leaf, p.trainable);
        self.nodes[v.0].param = Some(Arc::clone(&p.name));
        v
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Shape {
                op,
                left: s.to_vec(),
                right: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// `a [m×k] · b [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a [m×k] · bᵀ` with `b` stored `[n×k]`; the usual `x · Wᵀ` of a
    /// linear layer whose weight is laid out `[out×in]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            0.0,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul { a, b }, rg))
    }

    /// Adds a length-`c` bias to every row of `x [r×c]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "add_bias")?;
        if self.value(bias).numel() != c {
            return Err(Error::Shape {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let mut out = self.value(x).to_vec();
        let b = self.value(bias).data();
        for row in out.chunks_mut(c) {
            add_into(row, b);
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(Tensor::from_parts(vec![r, c], out), Op::AddBias { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).data().iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Scale { x, factor }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).data().iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Gelu { x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Relu { x }, rg)
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims2(x, "layer_norm")?;
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::Shape {
                op: "layer_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gain).to_vec(),
            });
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normed = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let n = (row[j] - mean) * rs;
                normed[i * c + j] = n;
                out[i * c + j] = n * g[j] + b[j];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::LayerNorm { x, gain, bias, normed, rstd },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over a fused `[S×3d]`
    /// query/key/value block; returns the concatenated head outputs `[S×d]`.
    pub fn attention(&mut self, qkv: Var, heads: usize, mask: AttentionMask) -> Result<Var> {
        let (s, three_d) = self.dims2(qkv, "attention")?;
        if heads == 0 || three_d % (3 * heads) != 0 {
            return Err(Error::Shape {
                op: "attention",
                left: self.shape(qkv).to_vec(),
                right: vec![heads],
            });
        }
        let d = three_d / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = self.value(qkv).data();
        let mut probs = vec![0.0; heads * s * s];
        let mut out = vec![0.0; s * d];
        for h in 0..heads {
            let qo = h * dh;
            let ko = d + h * dh;
            let vo = 2 * d + h * dh;
            for i in 0..s {
                let q = &src[i * three_d + qo..i * three_d + qo + dh];
                let p = &mut probs[(h * s + i) * s..(h * s + i + 1) * s];
                let mut visible = 0;
                for (j, pj) in p.iter_mut().enumerate() {
                    if mask.allows(i, j) {
                        let k = &src[j * three_d + ko..j * three_d + ko + dh];
                        *pj = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                        visible = j + 1;
                    } else {
                        *pj = f64::NEG_INFINITY;
                    }
                }
                softmax_in_place(&mut p[..visible.max(1)]);
                p[visible.max(1)..].fill(0.0);
                let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for (j, &pj) in p.iter().enumerate().take(visible) {
                    if pj != 0.0 {
                        axpy(o, pj, &src[j * three_d + vo..j * three_d + vo + dh]);
                    }
                }
            }
        }
        let rg = self.any_grad(&[qkv]);
        Ok(self.push(
            Tensor::from_parts(vec![s, d], out),
            Op::Attention { qkv, heads, probs },
            rg,
        ))
    }

    /// Stacks 2-D tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_rows of zero tensors".into()));
        };
        let (_, c) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, c], out),
            Op::ConcatRows { parts: parts.to_vec() },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if start + len > r {
            return Err(Error::Index {
                what: "row slice end",
                index: start + len,
                bound: r + 1,
            });
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(vec![len, c], out), Op::SliceRows { x, start }, rg))
    }

    /// Gathers rows of `table [V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding")?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "token id",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding { table, ids: ids.to_vec() },
            rg,
        ))
    }

    /// Column means of `x [r×c]`, returned as `[1×c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "mean_rows")?;
        let mut out = vec![0.0; c];
        for row in self.value(x).data().chunks(c) {
            add_into(&mut out, row);
        }
        let inv = 1.0 / r.max(1) as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(vec![1, c], out), Op::MeanRows { x }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != b {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: self.shape(logits).to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                what: "target class",
                index: bad,
                bound: v,
            });
        }
        let l = self.value(logits).data();
        let mut probs = vec![0.0; b * v];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &l[i * v..(i + 1) * v];
            loss += log_sum_exp(row) - row[t];
            let p = &mut probs[i * v..(i + 1) * v];
            p.copy_from_slice(row);
            softmax_in_place(p);
        }
        loss /= b.max(1) as f64;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Σ wᵢ·xᵢ for constant weights; a zero weight contributes nothing at all.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let Some(&(w0, first)) = terms.first() else {
            return Err(Error::Contract("weighted_sum of zero terms".into()));
        };
        let mut acc = self.scale(first, w0);
        for &(w, v) in &terms[1..] {
            if w == 0.0 {
                continue;
            }
            let s = self.scale(v, w);
            acc = self.add(acc, s)?;
        }
        Ok(acc)
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::Contract("backward on an inference graph".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn grad_slot(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Temporarily move the op out so parents can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, n) = (self.nodes[i].value.shape()[0], self.nodes[i].value.shape()[1]);
                let k = self.value(*a).shape()[1];
                if self.nodes[a.0].requires_grad {
                    let bv = self.nodes[b.0].value.clone();
                    let ga = self.grad_slot(*a).expect("requires grad");
                    // dA = dC · op(b)ᵀ
                    gemm(m, n, k, g, false, bv.data(), !*trans_b, ga, 1.0);
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.nodes[a.0].value.clone();
                    let gb = self.grad_slot(*b).expect("requires grad");
                    if *trans_b {
                        // b is [n×k]: dB = dCᵀ · a
                        gemm(n, m, k, g, true, av.data(), false, gb, 1.0);
                    } else {
                        // b is [k×n]: dB = aᵀ · dC
                        gemm(k, m, n, av.data(), true, g, false, gb, 1.0);
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = self.grad_slot(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.grad_slot(*b) {
                    add_into(gb, g);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].requires_grad {
                    let bv = self.nodes[b.0].value.clone();
                    let ga = self.grad_slot(*a).expect("requires grad");
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv.data()) {
                        *x += gi * bi;
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.nodes[a.0].value.clone();
                    let gb = self.grad_slot(*b).expect("requires grad");
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(av.data()) {
                        *x += gi * ai;
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(gx) = self.grad_slot(*x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.grad_slot(*bias) {
                    let c = gb.len();
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = self.grad_slot(*x) {
                    axpy(gx, *factor, g);
                }
            }
            Op::Gelu { x } => {
                let xv = self.nodes[x.0].value.clone();
                if let Some(gx) = self.grad_slot(*x) {
                    for ((d, gi), xi) in gx.iter_mut().zip(g).zip(xv.data()) {
                        *d += gi * gelu_grad_scalar(*xi);
                    }
                }
            }
            Op::Relu { x } => {
                let xv = self.nodes[x.0].value.clone();
                if let Some(gx) = self.grad_slot(*x) {
                    for ((d, gi), xi) in gx.iter_mut().zip(g).zip(xv.data()) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, normed, rstd } => {
                let c = self.nodes[i].value.shape()[1];
                if let Some(gb) = self.grad_slot(*bias) {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
                if let Some(gg) = self.grad_slot(*gain) {
                    for (grow, nrow) in g.chunks(c).zip(normed.chunks(c)) {
                        for j in 0..c {
                            gg[j] += grow[j] * nrow[j];
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let gv = self.nodes[gain.0].value.clone();
                    let gx = self.grad_slot(*x).expect("requires grad");
                    let mut dn = vec![0.0; c];
                    for (r, (grow, nrow)) in g.chunks(c).zip(normed.chunks(c)).enumerate() {
                        let mut mean_dn = 0.0;
                        let mut mean_dn_n = 0.0;
                        for j in 0..c {
                            dn[j] = grow[j] * gv.data()[j];
                            mean_dn += dn[j];
                            mean_dn_n += dn[j] * nrow[j];
                        }
                        mean_dn /= c as f64;
                        mean_dn_n /= c as f64;
                        let out = &mut gx[r * c..(r + 1) * c];
                        for j in 0..c {
                            out[j] += rstd[r] * (dn[j] - mean_dn - nrow[j] * mean_dn_n);
                        }
                    }
                }
            }
            Op::Attention { qkv, heads, probs } => {
                if self.nodes[qkv.0].requires_grad {
                    let src = self.nodes[qkv.0].value.clone();
                    let (s, three_d) = (src.shape()[0], src.shape()[1]);
                    let d = three_d / 3;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let src = src.data();
                    let gq = self.grad_slot(*qkv).expect("requires grad");
                    let mut dp = vec![0.0; s];
                    for h in 0..*heads {
                        let qo = h * dh;
                        let ko = d + h * dh;
                        let vo = 2 * d + h * dh;
                        for i in 0..s {
                            let p = &probs[(h * s + i) * s..(h * s + i + 1) * s];
                            let go = &g[i * d + h * dh..i * d + (h + 1) * dh];
                            let mut dot = 0.0;
                            for j in 0..s {
                                if p[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let v = &src[j * three_d + vo..j * three_d + vo + dh];
                                dp[j] = go.iter().zip(v).map(|(a, b)| a * b).sum();
                                dot += p[j] * dp[j];
                                // dV_j += p_ij · dO_i
                                axpy(&mut gq[j * three_d + vo..j * three_d + vo + dh], p[j], go);
                            }
                            for j in 0..s {
                                if p[j] == 0.0 {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - dot) * scale;
                                // dQ_i += ds · K_j ; dK_j += ds · Q_i
                                let (kj, qi) = (j * three_d + ko, i * three_d + qo);
                                for t in 0..dh {
                                    gq[qi + t] += ds * src[kj + t];
                                    gq[kj + t] += ds * src[qi + t];
                                }
                            }
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.numel();
                    if let Some(gp) = self.grad_slot(*p) {
                        add_into(gp, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = self.nodes[i].value.shape()[1];
                if let Some(gx) = self.grad_slot(*x) {
                    add_into(&mut gx[start * c..start * c + g.len()], g);
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.nodes[i].value.shape()[1];
                if let Some(gt) = self.grad_slot(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::MeanRows { x } => {
                let rows = self.nodes[x.0].value.rows();
                let inv = 1.0 / rows.max(1) as f64;
                if let Some(gx) = self.grad_slot(*x) {
                    let c = g.len();
                    for row in gx.chunks_mut(c) {
                        axpy(row, inv, g);
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.grad_slot(*x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let b = targets.len();
                if let Some(gl) = self.grad_slot(*logits) {
                    let v = gl.len() / b.max(1);
                    let f = g[0] / b.max(1) as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * v + j] += f * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }

    /// Gradients of every trainable parameter reached by the last sweep,
    /// summed over repeated uses of the same parameter.
    pub fn param_grads(&self) -> Gradients {
        let mut out = Gradients::default();
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            let (Some(name), Some(grad)) = (&node.param, grad) else {
                continue;
            };
            match out.by_name.get_mut(name.as_ref()) {
                Some(acc) => add_into(acc, grad),
                None => {
                    out.by_name.insert(name.to_string(), grad.clone());
                }
            }
        }
        out
    }
}
