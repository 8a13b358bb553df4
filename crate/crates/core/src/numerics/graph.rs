//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in creation order.
//! Since a node can only consume earlier nodes, the record order is a
//! topological order and [`Graph::backward`] simply walks it in reverse.

use std::collections::HashMap;

use super::kernels;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Layout of a fused multi-head attention call.
///
/// Queries are `[batch * q_len, d]`. Keys and values are
/// `[kv_batch * kv_len, d]` where `kv_batch` is 1 when every batch entry
/// attends to the same key set and `batch` otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub heads: usize,
    pub shared_kv: bool,
    /// Query position `i` only sees key positions `j <= i`.
    pub causal: bool,
}

/// Deliberate corruption of one gradient rule, used to confirm that the
/// finite-difference checker actually catches wrong gradients.
#[doc(hidden)]
#[derive(Clone, Copy, Debug)]
pub struct Fault {
    pub op: &'static str,
    pub factor: f64,
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddTiled(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    TokenLogProb {
        logits: Var,
        targets: Vec<usize>,
        temperature: f64,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddTiled(..) => "add_tiled",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Embedding { .. } => "embedding",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::TokenLogProb { .. } => "token_log_prob",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::Attention { .. } => "attention",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    checked: bool,
    fault: Option<Fault>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph in checked mode: any op producing NaN or infinity fails.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            checked: true,
            fault: None,
        }
    }

    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
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

    /// Attention probabilities saved by an [`Graph::attention`] node, laid out
    /// as `[batch, heads, q_len, kv_len]`.
    pub fn attention_probs(&self, v: Var) -> Option<(&[f64], AttentionLayout)> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, layout, .. } => Some((probs, *layout)),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Input,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is reported by [`Gradients::get`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Input,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Brings a parameter into the graph. Repeated calls return the same node.
    /// Frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let op = if p.frozen { Op::Input } else { Op::Param };
        self.nodes.push(Node {
            value: p.tensor.clone(),
            op,
            requires_grad: !p.frozen,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {:?}{} x {:?}{}",
                self.shape(a),
                if ta { "^T" } else { "" },
                self.shape(b),
                if tb { "^T" } else { "" },
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            m,
            k,
            n,
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            },
            rg,
        )
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: shapes differ {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// `a + tile(b)`: `b` is repeated over the leading rows of `a`. Covers
    /// bias rows (`b: [1, c]`) and position tables (`b: [t, c]` over a
    /// batch of `[n * t, c]`).
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if self.value(a).last_dim() != self.value(b).last_dim() || la % lb != 0 {
            return Err(Error::shape(format!(
                "add_tiled: cannot tile {:?} over {:?}",
                self.shape(b),
                self.shape(a)
            )));
        }
        let bd = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % lb])
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::AddTiled(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let out = kernels::softmax_strided(self.value(x).data(), outer, len, inner);
        let rg = self.rg(x);
        self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        )
    }

    /// Layer normalization over the last axis followed by `gain * . + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).last_dim();
        if c < 2 {
            return Err(Error::shape("layer_norm needs a last axis of at least 2"));
        }
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape(format!(
                "layer_norm: gain/bias must have {c} entries"
            )));
        }
        let (xhat, inv_std) = kernels::standardize(self.value(x).data(), c, eps);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % c] + b[i % c])
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(kernels::gelu);
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    /// Row gather from `table: [v, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(Error::shape("embedding lookup of zero ids"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::OutOfRange { index: id, len: v });
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (n, v) = self.value(logits).dims2()?;
        if targets.len() != n || mask.len() != n {
            return Err(Error::shape(format!(
                "cross_entropy: {n} rows but {} targets / {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::data("cross_entropy: every position is masked out"));
        }
        let probs = kernels::softmax_strided(self.value(logits).data(), n, v, 1);
        let mut total = 0.0;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let t = targets[i];
            if t >= v {
                return Err(Error::OutOfRange { index: t, len: v });
            }
            let row = self.value(logits).row(i);
            total -= row[t] - kernels::log_sum_exp(row);
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        )
    }

    /// Per-row `log softmax(logits / temperature)[target]` with the `banned`
    /// columns excluded from the distribution.
    pub fn token_log_prob(
        &mut self,
        logits: Var,
        targets: &[usize],
        temperature: f64,
        banned: &[usize],
    ) -> Result<Var> {
        let (n, v) = self.value(logits).dims2()?;
        if targets.len() != n {
            return Err(Error::shape("token_log_prob: one target per row required"));
        }
        if !(temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        let mut probs = vec![0.0; n * v];
        let mut out = vec![0.0; n];
        let mut scaled = vec![0.0; v];
        for i in 0..n {
            let t = targets[i];
            if t >= v {
                return Err(Error::OutOfRange { index: t, len: v });
            }
            if banned.contains(&t) {
                return Err(Error::data(format!("token_log_prob: target {t} is banned")));
            }
            for (s, &l) in scaled.iter_mut().zip(self.value(logits).row(i)) {
                *s = l / temperature;
            }
            for &b in banned {
                scaled[b] = f64::NEG_INFINITY;
            }
            let lse = kernels::log_sum_exp(&scaled);
            for j in 0..v {
                probs[i * v + j] = (scaled[j] - lse).exp();
            }
            out[i] = scaled[t] - lse;
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::new(vec![n], out)?,
            Op::TokenLogProb {
                logits,
                targets: targets.to_vec(),
                temperature,
                probs,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.sum() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// `sum_i weights[i] * x[i]` over the flattened tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::shape("weighted_sum: one weight per element required"));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights)
            .map(|(a, w)| a * w)
            .sum();
        let rg = self.rg(x);
        self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if len == 0 || start + len > c {
            return Err(Error::shape(format!("slice_cols {start}+{len} of {c}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![r, len], out)?, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let r = self.value(*xs.first().ok_or_else(|| Error::shape("empty concat"))?).dims2()?.0;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (ri, ci) = self.value(x).dims2()?;
            if ri != r {
                return Err(Error::shape("concat_cols: row counts differ"));
            }
            widths.push(ci);
        }
        let c: usize = widths.iter().sum();
        let mut out = vec![0.0; r * c];
        let mut off = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let src = self.value(x).data();
            for i in 0..r {
                out[i * c + off..i * c + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(Tensor::new(vec![r, c], out)?, Op::ConcatCols(xs.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if len == 0 || start + len > r {
            return Err(Error::shape(format!("slice_rows {start}+{len} of {r}")));
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![len, c], out)?, Op::SliceRows { x, start }, rg)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let c = self.value(*xs.first().ok_or_else(|| Error::shape("empty concat"))?).dims2()?.1;
        let mut out = Vec::new();
        let mut r = 0;
        for &x in xs {
            let (ri, ci) = self.value(x).dims2()?;
            if ci != c {
                return Err(Error::shape("concat_rows: column counts differ"));
            }
            out.extend_from_slice(self.value(x).data());
            r += ri;
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(Tensor::new(vec![r, c], out)?, Op::ConcatRows(xs.to_vec()), rg)
    }

    /// Fused scaled dot-product attention over `layout.heads` heads. The
    /// inputs are already projected; heads split the model width evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (qr, d) = self.value(q).dims2()?;
        let (kr, kd) = self.value(k).dims2()?;
        let (vr, vd) = self.value(v).dims2()?;
        let kv_batch = if layout.shared_kv { 1 } else { layout.batch };
        if qr != layout.batch * layout.q_len
            || kr != kv_batch * layout.kv_len
            || vr != kr
            || kd != d
            || vd != d
        {
            return Err(Error::shape(format!(
                "attention: q {:?} k {:?} v {:?} inconsistent with {layout:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if layout.heads == 0 || d % layout.heads != 0 {
            return Err(Error::shape(format!(
                "width {d} not divisible by {} heads",
                layout.heads
            )));
        }
        if layout.causal && layout.q_len > layout.kv_len {
            return Err(Error::shape("causal attention needs q_len <= kv_len"));
        }
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            d,
            &layout,
        );
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            Tensor::new(vec![qr, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if let Some(f) = self.fault {
                if f.op == node.op.name() {
                    g.data_mut().iter_mut().for_each(|x| *x *= f.factor);
                }
            }
            self.backprop_node(node, &g, &mut grads)?;
            if matches!(node.op, Op::Input | Op::Param) {
                grads[i] = Some(g);
            }
        }
        let params = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].as_ref().map(|_| (id, v)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    let buf = self.grad_buf(grads, *a);
                    if *ta {
                        kernels::gemm(bv, *tb, gd, true, k, n, m, buf, 1.0);
                    } else {
                        kernels::gemm(gd, false, bv, !*tb, m, n, k, buf, 1.0);
                    }
                }
                if self.rg(*b) {
                    let buf = self.grad_buf(grads, *b);
                    if *tb {
                        kernels::gemm(gd, true, av, *ta, n, m, k, buf, 1.0);
                    } else {
                        kernels::gemm(av, !*ta, gd, false, k, m, n, buf, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |buf| axpy(buf, gd, 1.0));
                self.acc(grads, *b, |buf| axpy(buf, gd, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |buf| axpy(buf, gd, 1.0));
                self.acc(grads, *b, |buf| axpy(buf, gd, -1.0));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, |buf| {
                    for ((o, &gi), &y) in buf.iter_mut().zip(gd).zip(bv) {
                        *o += gi * y;
                    }
                });
                self.acc(grads, *b, |buf| {
                    for ((o, &gi), &x) in buf.iter_mut().zip(gd).zip(av) {
                        *o += gi * x;
                    }
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, |buf| axpy(buf, gd, *s)),
            Op::AddTiled(a, b) => {
                self.acc(grads, *a, |buf| axpy(buf, gd, 1.0));
                let lb = self.value(*b).len();
                self.acc(grads, *b, |buf| {
                    for (i, &gi) in gd.iter().enumerate() {
                        buf[i % lb] += gi;
                    }
                });
            }
            Op::Transpose(a) => {
                let t = g.transpose()?;
                self.acc(grads, *a, |buf| axpy(buf, t.data(), 1.0));
            }
            Op::Reshape(a) => self.acc(grads, *a, |buf| axpy(buf, gd, 1.0)),
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                let (outer, len, inner) = (*outer, *len, *inner);
                self.acc(grads, *x, |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| y[idx(j)] * gd[idx(j)]).sum();
                            for j in 0..len {
                                buf[idx(j)] += y[idx(j)] * (gd[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = self.value(*x).last_dim();
                let gv = self.value(*gain).data();
                self.acc(grads, *gain, |buf| {
                    for (i, (&gi, &h)) in gd.iter().zip(xhat).enumerate() {
                        buf[i % c] += gi * h;
                    }
                });
                self.acc(grads, *bias, |buf| {
                    for (i, &gi) in gd.iter().enumerate() {
                        buf[i % c] += gi;
                    }
                });
                self.acc(grads, *x, |buf| {
                    kernels::standardize_backward(gd, gv, xhat, inv_std, c, buf)
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |buf| {
                    for ((o, &gi), &xi) in buf.iter_mut().zip(gd).zip(xv) {
                        *o += gi * kernels::gelu_grad(xi);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).last_dim();
                self.acc(grads, *table, |buf| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut buf[id * d..(id + 1) * d], &gd[r * d..(r + 1) * d], 1.0);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = self.value(*logits).last_dim();
                let scale = gd[0] / *count as f64;
                self.acc(grads, *logits, |buf| {
                    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let row = &mut buf[i * v..(i + 1) * v];
                        for (j, o) in row.iter_mut().enumerate() {
                            *o += scale * probs[i * v + j];
                        }
                        row[t] -= scale;
                    }
                });
            }
            Op::TokenLogProb {
                logits,
                targets,
                temperature,
                probs,
            } => {
                let v = self.value(*logits).last_dim();
                self.acc(grads, *logits, |buf| {
                    for (i, &t) in targets.iter().enumerate() {
                        let s = gd[i] / temperature;
                        let row = &mut buf[i * v..(i + 1) * v];
                        for (j, o) in row.iter_mut().enumerate() {
                            *o -= s * probs[i * v + j];
                        }
                        row[t] += s;
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |buf| buf.iter_mut().for_each(|o| *o += gd[0])),
            Op::Mean(x) => {
                let s = gd[0] / self.value(*x).len() as f64;
                self.acc(grads, *x, |buf| buf.iter_mut().for_each(|o| *o += s));
            }
            Op::WeightedSum { x, weights } => {
                self.acc(grads, *x, |buf| axpy(buf, weights, gd[0]));
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).last_dim();
                let w = node.value.last_dim();
                self.acc(grads, *x, |buf| {
                    for (r, grow) in gd.chunks(w).enumerate() {
                        axpy(&mut buf[r * c + start..r * c + start + w], grow, 1.0);
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let c = node.value.last_dim();
                let mut off = 0;
                for &x in xs {
                    let w = self.value(x).last_dim();
                    self.acc(grads, x, |buf| {
                        for (r, brow) in buf.chunks_mut(w).enumerate() {
                            axpy(brow, &gd[r * c + off..r * c + off + w], 1.0);
                        }
                    });
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.last_dim();
                self.acc(grads, *x, |buf| {
                    axpy(&mut buf[start * c..start * c + gd.len()], gd, 1.0)
                });
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    self.acc(grads, x, |buf| axpy(buf, &gd[off..off + n], 1.0));
                    off += n;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let d = self.value(*q).last_dim();
                let (dq, dk, dv) = kernels::attention_backward(
                    gd,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    d,
                    layout,
                );
                self.acc(grads, *q, |buf| axpy(buf, &dq, 1.0));
                self.acc(grads, *k, |buf| axpy(buf, &dk, 1.0));
                self.acc(grads, *v, |buf| axpy(buf, &dv, 1.0));
            }
        }
        Ok(())
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut [f64] {
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(self.shape(v)))
            .data_mut()
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if self.rg(v) {
            f(self.grad_buf(grads, v));
        }
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Gradients of one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of a leaf or parameter node; `None` when it did not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.get(*v))
    }

    /// Adds parameter gradients into the store's `grad` buffers, in parameter
    /// order so the reduction order is fixed.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        let mut ordered = self.params.clone();
        ordered.sort_by_key(|(id, _)| *id);
        for (id, v) in ordered {
            if let Some(g) = self.get(v) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}
