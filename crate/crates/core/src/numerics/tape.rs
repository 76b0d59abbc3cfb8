//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value and enough saved
//! state to apply its backward rule. Nodes only reference earlier nodes, so the
//! record graph is acyclic by construction and a single reverse sweep suffices.

use rand::Rng;

use super::kernels::{self, Broadcast};
use super::params::{ParamId, ParamSet};
use super::{Mask, Tensor};
use crate::error::{Error, Result};

/// Floor applied to `q` before the logarithm in [`Tape::kl_rows`].
pub const KL_EPS: f64 = 1e-9;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param {
        set: u64,
        index: usize,
    },
    Add {
        a: Var,
        b: Var,
        plan: Broadcast,
    },
    Mul {
        a: Var,
        b: Var,
        plan: Broadcast,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Relu {
        a: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        offsets: Vec<(usize, usize)>,
    },
    Transpose {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Concat {
        parts: Vec<(Var, usize)>,
    },
    Stack {
        parts: Vec<Var>,
    },
    Select {
        a: Var,
        index: usize,
    },
    Softmax {
        a: Var,
    },
    LogSoftmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        a: Var,
        scale: Vec<f64>,
    },
    Sum {
        a: Var,
    },
    KlRows {
        p: Var,
        q: Var,
        active: Vec<bool>,
        count: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore_id: usize,
        probs: Vec<f64>,
        count: usize,
    },
    SoftCrossEntropy {
        logits: Var,
        target: Var,
        active: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    NormalizeRows {
        a: Var,
        mask: Vec<bool>,
        sums: Vec<f64>,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one [`Tape::backward`] sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when the node
    /// does not depend on any trainable input or is unreachable from the loss.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds gradients of every parameter of `set` bound on `tape` into the
    /// parameters' `grad` buffers.
    pub fn accumulate_into(&self, tape: &Tape, set: &mut ParamSet) {
        for (i, node) in tape.nodes.iter().enumerate() {
            if let Op::Param { set: tag, index } = node.op {
                if tag == set.tag() {
                    if let Some(g) = &self.grads[i] {
                        set.get_mut(ParamId(index)).accumulate_grad(g);
                    }
                }
            }
        }
    }
}

/// Parameters of one [`ParamSet`] placed on a tape.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let rows = shape.iter().product::<usize>().checked_div(cols).unwrap_or(0);
    (rows, cols)
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn item(&self, v: Var) -> f64 {
        let d = self.value(v);
        assert_eq!(d.len(), 1, "item() on non-scalar node");
        d[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.data.clone()).expect("node shape invariant")
    }

    /// Records a value that never receives gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Constant, false)
    }

    /// Records a standalone input; gradient is tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Places every tensor of `set` on the tape. With `trainable == false` the
    /// values are recorded as constants and no gradient can reach the set.
    pub fn bind(&mut self, set: &ParamSet, trainable: bool) -> Bound {
        let tag = set.tag();
        let vars = set
            .tensors()
            .iter()
            .enumerate()
            .map(|(index, t)| {
                let op = if trainable {
                    Op::Param { set: tag, index }
                } else {
                    Op::Constant
                };
                self.push(t.shape().to_vec(), t.data().to_vec(), op, trainable)
            })
            .collect();
        Bound(vars)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, plan, swapped) =
            kernels::plan_broadcast("add", self.shape(a), self.shape(b))?;
        let (a, b) = if swapped { (b, a) } else { (a, b) };
        let (av, bv) = (self.value(a), self.value(b));
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|i| av[plan.lhs(i)] + bv[plan.rhs(i)]).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, data, Op::Add { a, b, plan }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, plan, swapped) =
            kernels::plan_broadcast("mul", self.shape(a), self.shape(b))?;
        let (a, b) = if swapped { (b, a) } else { (a, b) };
        let (av, bv) = (self.value(a), self.value(b));
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|i| av[plan.lhs(i)] * bv[plan.rhs(i)]).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, data, Op::Mul { a, b, plan }, ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let data = self.value(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(shape, data, Op::Scale { a, factor }, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(shape, data, Op::Relu { a }, ng)
    }

    /// Batched matrix product `[…, m, k] · […, k, n]` with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = kernels::broadcast_shape("matmul", ba, bb)
            .map_err(|_| Error::dim("matmul", sa, sb))?;
        let oa = kernels::broadcast_offsets(ba, &batch);
        let ob = kernels::broadcast_offsets(bb, &batch);
        let offsets: Vec<(usize, usize)> =
            oa.into_iter().zip(ob).map(|(x, y)| (x * m * k, y * k * n)).collect();
        let mut data = vec![0.0; offsets.len() * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for (bi, &(oa, ob)) in offsets.iter().enumerate() {
            kernels::gemm_nn(
                &av[oa..oa + m * k],
                &bv[ob..ob + k * n],
                &mut data[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            shape,
            data,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                offsets,
            },
            ng,
        ))
    }

    pub fn transpose_last_two(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(Error::dim("transpose", &sa, &[]));
        }
        let (r, c) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let av = self.value(a);
        let mut data = vec![0.0; av.len()];
        for (blk_in, blk_out) in av.chunks(r * c).zip(data.chunks_mut(r * c)) {
            for i in 0..r {
                for j in 0..c {
                    blk_out[j * r + i] = blk_in[i * c + j];
                }
            }
        }
        let mut shape = sa;
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let ng = self.ng(a);
        Ok(self.push(shape, data, Op::Transpose { a }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let data = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape.to_vec(), data, Op::Reshape { a }, ng))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last_dim(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat of zero tensors".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::dim("concat_last_dim", self.shape(*first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = vec![0.0; rows * total];
        let mut col = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for r in 0..rows {
                data[r * total + col..r * total + col + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let mut shape = lead;
        shape.push(total);
        let ng = parts.iter().any(|&p| self.ng(p));
        let parts = parts.iter().copied().zip(widths).collect();
        Ok(self.push(shape, data, Op::Concat { parts }, ng))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("stack of zero tensors".into()))?;
        let inner = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(parts.len() * self.value(*first).len());
        for &p in parts {
            if self.shape(p) != inner.as_slice() {
                return Err(Error::dim("stack", &inner, self.shape(p)));
            }
            data.extend_from_slice(self.value(p));
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            shape,
            data,
            Op::Stack {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    /// `a[index]` along the leading axis.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() || index >= sa[0] {
            return Err(Error::dim("select", &sa, &[index]));
        }
        let inner: usize = sa[1..].iter().product();
        let data = self.value(a)[index * inner..(index + 1) * inner].to_vec();
        let ng = self.ng(a);
        Ok(self.push(sa[1..].to_vec(), data, Op::Select { a, index }, ng))
    }

    /// Row softmax over the last axis. Masked entries are exactly zero; rows
    /// with no active entry come out all zero.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if let Some(m) = mask {
            if m.shape() != shape.as_slice() {
                return Err(Error::dim("softmax_rows", &shape, m.shape()));
            }
        }
        let (rows, cols) = rows_cols(&shape);
        let av = self.value(a);
        let mut data = vec![0.0; av.len()];
        for r in 0..rows {
            let x = &av[r * cols..(r + 1) * cols];
            let out = &mut data[r * cols..(r + 1) * cols];
            let active = |j: usize| mask.is_none_or(|m| m.data()[r * cols + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in x.iter().enumerate() {
                if active(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for (j, &v) in x.iter().enumerate() {
                if active(j) {
                    let e = (v - max).exp();
                    out[j] = e;
                    sum += e;
                }
            }
            out.iter_mut().for_each(|o| *o /= sum);
        }
        let ng = self.ng(a);
        Ok(self.push(shape, data, Op::Softmax { a }, ng))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let (rows, cols) = rows_cols(&shape);
        let av = self.value(a);
        let mut data = vec![0.0; av.len()];
        for r in 0..rows {
            let x = &av[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(x);
            for (o, &v) in data[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *o = v - lse;
            }
        }
        let ng = self.ng(a);
        self.push(shape, data, Op::LogSoftmax { a }, ng)
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, d) = rows_cols(&shape);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim("layer_norm", &shape, self.shape(gain)));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let mut data = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                data[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            shape,
            data,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Gathers rows of `table: [V, d]` for `ids` laid out as `ids_shape`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 || ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::dim("embedding_lookup", st, ids_shape));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {v}")));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let ng = self.ng(table);
        Ok(self.push(
            shape,
            data,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Inverted dropout. A zero rate returns `a` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - rate);
        let scale: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = self.value(a).iter().zip(&scale).map(|(x, s)| x * s).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(shape, data, Op::Dropout { a, scale }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(vec![], vec![s], Op::Sum { a }, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over active rows of `Σ_j p_j (ln p_j − ln max(q_j, ε))`.
    ///
    /// `p` is treated as a constant target. Entries with `p_j == 0` contribute
    /// nothing. A row mask, when given, has the shape of `p` without its last
    /// axis. With no active rows the result is 0.
    pub fn kl_rows(&mut self, p: Var, q: Var, row_mask: Option<&Mask>) -> Result<Var> {
        let shape = self.shape(p).to_vec();
        if self.shape(q) != shape.as_slice() {
            return Err(Error::dim("kl_rows", &shape, self.shape(q)));
        }
        let (rows, cols) = rows_cols(&shape);
        let active: Vec<bool> = match row_mask {
            Some(m) => {
                if m.shape() != &shape[..shape.len().saturating_sub(1)] {
                    return Err(Error::dim("kl_rows", &shape, m.shape()));
                }
                m.data().to_vec()
            }
            None => vec![true; rows],
        };
        let count = active.iter().filter(|&&a| a).count();
        let (pv, qv) = (self.value(p), self.value(q));
        let mut total = 0.0;
        for r in (0..rows).filter(|&r| active[r]) {
            let mut row = 0.0;
            for j in r * cols..(r + 1) * cols {
                if pv[j] > 0.0 {
                    row += pv[j] * (pv[j].ln() - qv[j].max(KL_EPS).ln());
                }
            }
            total += row;
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.ng(q);
        Ok(self.push(
            vec![],
            vec![value],
            Op::KlRows {
                p,
                q,
                active,
                count,
            },
            ng,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `logits: […, V]`, skipping positions equal to `ignore_id`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_id: usize) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (rows, v) = rows_cols(&shape);
        if targets.len() != rows {
            return Err(Error::dim("cross_entropy", &shape, &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != ignore_id && t >= v) {
            return Err(Error::Input(format!("target id {bad} outside [0, {v})")));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..rows {
            let x = &lv[r * v..(r + 1) * v];
            let lse = log_sum_exp(x);
            for (o, &z) in probs[r * v..(r + 1) * v].iter_mut().zip(x) {
                *o = (z - lse).exp();
            }
            if targets[r] != ignore_id {
                total += lse - x[targets[r]];
                count += 1;
            }
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.ng(logits);
        Ok(self.push(
            vec![],
            vec![value],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_id,
                probs,
                count,
            },
            ng,
        ))
    }

    /// Mean over active rows of `−Σ_j p_j log softmax(logits)_j` with `p`
    /// (same shape as `logits`) treated as a constant.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Var, row_mask: Option<&Mask>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if self.shape(target) != shape.as_slice() {
            return Err(Error::dim("soft_cross_entropy", &shape, self.shape(target)));
        }
        let (rows, v) = rows_cols(&shape);
        let active: Vec<bool> = match row_mask {
            Some(m) => {
                if m.shape() != &shape[..shape.len() - 1] {
                    return Err(Error::dim("soft_cross_entropy", &shape, m.shape()));
                }
                m.data().to_vec()
            }
            None => vec![true; rows],
        };
        let (lv, pv) = (self.value(logits), self.value(target));
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..rows {
            let x = &lv[r * v..(r + 1) * v];
            let lse = log_sum_exp(x);
            for (o, &z) in probs[r * v..(r + 1) * v].iter_mut().zip(x) {
                *o = (z - lse).exp();
            }
            if active[r] {
                count += 1;
                for j in 0..v {
                    total -= pv[r * v + j] * (x[j] - lse);
                }
            }
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.ng(logits);
        Ok(self.push(
            vec![],
            vec![value],
            Op::SoftCrossEntropy {
                logits,
                target,
                active,
                probs,
                count,
            },
            ng,
        ))
    }

    /// Projects each row onto the simplex over its active entries:
    /// `y_j = max(x_j, ε) / Σ_k max(x_k, ε)`, inactive entries zero.
    pub fn normalize_rows(&mut self, a: Var, mask: Option<&Mask>, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mask: Vec<bool> = match mask {
            Some(m) if m.shape() == shape.as_slice() => m.data().to_vec(),
            Some(m) => return Err(Error::dim("normalize_rows", &shape, m.shape())),
            None => vec![true; self.value(a).len()],
        };
        let (rows, cols) = rows_cols(&shape);
        let av = self.value(a);
        let mut data = vec![0.0; av.len()];
        let mut sums = vec![0.0; rows];
        for r in 0..rows {
            let idx = r * cols..(r + 1) * cols;
            let s: f64 = idx.clone().filter(|&j| mask[j]).map(|j| av[j].max(eps)).sum();
            sums[r] = s;
            if s > 0.0 {
                for j in idx.filter(|&j| mask[j]) {
                    data[j] = av[j].max(eps) / s;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(shape, data, Op::NormalizeRows { a, mask, sums, eps }, ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.shape(loss).is_empty() && self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.apply_rule(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and accumulates into every listed set.
    pub fn backward_into(&self, loss: Var, sets: &mut [&mut ParamSet]) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for set in sets.iter_mut() {
            grads.accumulate_into(self, set);
        }
        Ok(grads)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.ng(v) {
            return None;
        }
        let len = self.nodes[v.0].data.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn apply_rule(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param { .. } => {}
            Op::Add { a, b, plan } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, gi) in g.iter().enumerate() {
                        ga[plan.lhs(i)] += gi;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (i, gi) in g.iter().enumerate() {
                        gb[plan.rhs(i)] += gi;
                    }
                }
            }
            Op::Mul { a, b, plan } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, gi) in g.iter().enumerate() {
                        ga[plan.lhs(i)] += gi * bv[plan.rhs(i)];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (i, gi) in g.iter().enumerate() {
                        gb[plan.rhs(i)] += gi * av[plan.lhs(i)];
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi * factor);
                }
            }
            Op::Relu { a } => {
                let av = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, gi), &v) in ga.iter_mut().zip(g).zip(av) {
                        if v > 0.0 {
                            *x += gi;
                        }
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                offsets,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for (bi, &(oa, ob)) in offsets.iter().enumerate() {
                        kernels::gemm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv[ob..ob + k * n],
                            &mut ga[oa..oa + m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (bi, &(oa, ob)) in offsets.iter().enumerate() {
                        kernels::gemm_tn(
                            &av[oa..oa + m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[ob..ob + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Transpose { a } => {
                let s = &node.shape;
                // Output is [.., c, r]; input was [.., r, c].
                let (c, r) = (s[s.len() - 2], s[s.len() - 1]);
                if let Some(ga) = self.slot(grads, *a) {
                    for (blk_g, blk_a) in g.chunks(r * c).zip(ga.chunks_mut(r * c)) {
                        for j in 0..c {
                            for i in 0..r {
                                blk_a[i * c + j] += blk_g[j * r + i];
                            }
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi);
                }
            }
            Op::Concat { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let rows = g.len() / total.max(1);
                let mut col = 0;
                for &(p, w) in parts {
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::Stack { parts } => {
                let inner = g.len() / parts.len();
                for (i, &p) in parts.iter().enumerate() {
                    if let Some(gp) = self.slot(grads, p) {
                        gp.iter_mut()
                            .zip(&g[i * inner..(i + 1) * inner])
                            .for_each(|(x, gi)| *x += gi);
                    }
                }
            }
            Op::Select { a, index } => {
                let inner = g.len();
                if let Some(ga) = self.slot(grads, *a) {
                    ga[index * inner..(index + 1) * inner]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, gi)| *x += gi);
                }
            }
            Op::Softmax { a } => {
                let (rows, cols) = rows_cols(&node.shape);
                let y = &node.data;
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..rows {
                        let idx = r * cols..(r + 1) * cols;
                        let dot: f64 = idx.clone().map(|j| g[j] * y[j]).sum();
                        for j in idx {
                            ga[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { a } => {
                let (rows, cols) = rows_cols(&node.shape);
                let y = &node.data;
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..rows {
                        let idx = r * cols..(r + 1) * cols;
                        let gs: f64 = g[idx.clone()].iter().sum();
                        for j in idx {
                            ga[j] += g[j] - y[j].exp() * gs;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, d) = rows_cols(&node.shape);
                let gv = self.value(*gain);
                if let Some(gg) = self.slot(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let nd = d as f64;
                    for r in 0..rows {
                        let idx = r * d..(r + 1) * d;
                        let dxhat: Vec<f64> = idx.clone().map(|i| g[i] * gv[i - r * d]).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(&xhat[idx.clone()]).map(|(a, b)| a * b).sum();
                        for (j, i) in idx.enumerate() {
                            gx[i] += inv_std[r] / nd * (nd * dxhat[j] - s1 - xhat[i] * s2);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = *node.shape.last().unwrap();
                if let Some(gt) = self.slot(grads, *table) {
                    for (pos, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[pos * d + j];
                        }
                    }
                }
            }
            Op::Dropout { a, scale } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, gi), s) in ga.iter_mut().zip(g).zip(scale) {
                        *x += gi * s;
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::KlRows {
                p,
                q,
                active,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let (_, cols) = rows_cols(self.shape(*p));
                let (pv, qv) = (self.value(*p), self.value(*q));
                let w = g[0] / *count as f64;
                if let Some(gq) = self.slot(grads, *q) {
                    for r in (0..active.len()).filter(|&r| active[r]) {
                        for j in r * cols..(r + 1) * cols {
                            if pv[j] > 0.0 && qv[j] > KL_EPS {
                                gq[j] -= w * pv[j] / qv[j];
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_id,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let v = *self.shape(*logits).last().unwrap();
                let w = g[0] / *count as f64;
                if let Some(gl) = self.slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore_id {
                            continue;
                        }
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * v + j] += w * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
            Op::SoftCrossEntropy {
                logits,
                target,
                active,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let v = *self.shape(*logits).last().unwrap();
                let pv = self.value(*target);
                let w = g[0] / *count as f64;
                if let Some(gl) = self.slot(grads, *logits) {
                    for r in (0..active.len()).filter(|&r| active[r]) {
                        let idx = r * v..(r + 1) * v;
                        let mass: f64 = pv[idx.clone()].iter().sum();
                        for j in idx {
                            gl[j] += w * (probs[j] * mass - pv[j]);
                        }
                    }
                }
            }
            Op::NormalizeRows { a, mask, sums, eps } => {
                let (rows, cols) = rows_cols(&node.shape);
                let y = &node.data;
                let av = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..rows {
                        if sums[r] <= 0.0 {
                            continue;
                        }
                        let idx = r * cols..(r + 1) * cols;
                        let dot: f64 = idx.clone().map(|j| g[j] * y[j]).sum();
                        for j in idx {
                            if mask[j] && av[j] > *eps {
                                ga[j] += (g[j] - dot) / sums[r];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
