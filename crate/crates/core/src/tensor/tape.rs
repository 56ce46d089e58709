//! Wengert-style tape: ops recorded during the forward pass, replayed in
//! reverse for gradients. Nodes own their output values; parameters enter as
//! named leaves so gradients from every use site (both towers, shared
//! storage) accumulate additively into one buffer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

const LAYER_NORM_EPS: f64 = 1e-5;
// Additive score mask; exp(-1e30 - max) underflows to exactly 0.0.
const MASKED_SCORE: f64 = -1e30;

enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    /// x[m,n] + bias[n] broadcast over rows.
    AddBias(TensorId, TensorId),
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Log(TensorId),
    Exp(TensorId),
    Gelu(TensorId),
    Relu(TensorId),
    SoftmaxRows {
        x: TensorId,
        temperature: f64,
    },
    GatherRows {
        table: TensorId,
        indices: Vec<usize>,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Per-group masked mean over rows: x[groups*len, d] -> [groups, d].
    MaskedMean {
        x: TensorId,
        mask: Vec<f64>,
        groups: usize,
        mask_sums: Vec<f64>,
    },
    /// Fused multi-head self-attention over a batch of equal-length sequences.
    Attention {
        q: TensorId,
        k: TensorId,
        v: TensorId,
        seqs: usize,
        n_heads: usize,
        probs: Vec<f64>,
    },
    L2NormalizeRows {
        x: TensorId,
        norms: Vec<f64>,
    },
    /// Mean over rows i of (logsumexp(row i) - logits[i,i]).
    InBatchSoftmaxNll {
        logits: TensorId,
        probs: Vec<f64>,
    },
    Sum(TensorId),
    Mean(TensorId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records ops during the forward pass; single-threaded by construction.
pub struct Tape {
    nodes: Vec<Node>,
    bindings: BTreeMap<String, (TensorId, bool)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient buffer of `id`, if backward reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Registers an input tensor. Gradients accumulate only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    /// Named leaf, cached per tape: binding the same name twice returns the
    /// same node, which is what makes shared parameters alias.
    pub fn bind_param(&mut self, name: &str, value: &Tensor, trainable: bool) -> TensorId {
        if let Some(&(id, _)) = self.bindings.get(name) {
            return id;
        }
        let id = self.leaf(value.clone(), trainable);
        self.bindings.insert(name.to_string(), (id, trainable));
        id
    }

    /// Every named leaf bound on this tape, with its trainable flag.
    pub fn bindings(&self) -> impl Iterator<Item = (&str, TensorId, bool)> {
        self.bindings
            .iter()
            .map(|(name, &(id, trainable))| (name.as_str(), id, trainable))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn check_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn finish(&mut self, context: &str, value: Tensor, op: Op, requires: bool) -> Result<TensorId> {
        value.ensure_finite(context)?;
        Ok(self.push(value, op, requires))
    }

    // ── Elementwise and linear ops ──────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let req = self.requires(a) || self.requires(b);
        self.finish("add", out, Op::Add(a, b), req)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let req = self.requires(a) || self.requires(b);
        self.finish("sub", out, Op::Sub(a, b), req)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let req = self.requires(a) || self.requires(b);
        self.finish("mul", out, Op::Mul(a, b), req)
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> Result<TensorId> {
        if !factor.is_finite() {
            return Err(Error::InvalidArgument {
                op: "scale",
                message: format!("non-finite factor {factor}"),
            });
        }
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let req = self.requires(a);
        self.finish("scale", out, Op::Scale(a, factor), req)
    }

    /// x[m,n] + bias[n], bias broadcast over rows.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (xs, bs) = (self.value(x).shape().to_vec(), self.value(bias).shape());
        if xs.len() != 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: xs,
                rhs: bs.to_vec(),
            });
        }
        let n = xs[1];
        let bdata = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bdata[i % n])
            .collect();
        let out = Tensor::new(xs, data)?;
        let req = self.requires(x) || self.requires(bias);
        self.finish("add_bias", out, Op::AddBias(x, bias), req)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n, &mut c);
        let out = Tensor::new(vec![m, n], c)?;
        let req = self.requires(a) || self.requires(b);
        self.finish("matmul", out, Op::Matmul(a, b), req)
    }

    /// matmul(x, w) + bias in one call.
    pub fn linear(&mut self, x: TensorId, w: TensorId, bias: TensorId) -> Result<TensorId> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, bias)
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(Error::InvalidArgument {
                op: "transpose",
                message: format!("expected rank-2 tensor, got {s:?}"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        let req = self.requires(a);
        self.finish("transpose", out, Op::Transpose(a), req)
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        if let Some(pos) = self.value(a).data().iter().position(|&v| v <= 0.0) {
            return Err(Error::InvalidArgument {
                op: "log",
                message: format!(
                    "non-positive value {} at flat index {pos}",
                    self.value(a).data()[pos]
                ),
            });
        }
        let data = self.value(a).data().iter().map(|v| v.ln()).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let req = self.requires(a);
        self.finish("log", out, Op::Log(a), req)
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self.value(a).data().iter().map(|v| v.exp()).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let req = self.requires(a);
        self.finish("exp", out, Op::Exp(a), req)
    }

    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self.value(a).data().iter().map(|&v| gelu(v)).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let req = self.requires(a);
        self.finish("gelu", out, Op::Gelu(a), req)
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let req = self.requires(a);
        self.finish("relu", out, Op::Relu(a), req)
    }

    // ── Structured ops ──────────────────────────────────────────────────

    /// Row-wise softmax of x/temperature with max subtraction.
    pub fn softmax_rows(&mut self, x: TensorId, temperature: f64) -> Result<TensorId> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument {
                op: "softmax_rows",
                message: format!("temperature must be positive, got {temperature}"),
            });
        }
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(Error::InvalidArgument {
                op: "softmax_rows",
                message: format!("expected rank-2 tensor, got {s:?}"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            softmax_row(
                &src[i * n..(i + 1) * n],
                temperature,
                &mut data[i * n..(i + 1) * n],
            );
        }
        let out = Tensor::new(vec![m, n], data)?;
        let req = self.requires(x);
        self.finish("softmax_rows", out, Op::SoftmaxRows { x, temperature }, req)
    }

    /// Embedding lookup: rows of `table` selected by `indices`.
    pub fn gather_rows(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let s = self.value(table).shape();
        if s.len() != 2 {
            return Err(Error::InvalidArgument {
                op: "gather_rows",
                message: format!("expected rank-2 table, got {s:?}"),
            });
        }
        let (rows, d) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument {
                op: "gather_rows",
                message: format!("index {bad} out of range for table with {rows} rows"),
            });
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![indices.len(), d], data)?;
        let req = self.requires(table);
        self.finish(
            "gather_rows",
            out,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            req,
        )
    }

    /// Layer normalization over the last dim with learned gain and bias.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::InvalidArgument {
                op: "layer_norm",
                message: format!("expected rank-2 tensor, got {s:?}"),
            });
        }
        let (m, d) = (s[0], s[1]);
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let ps = self.value(id).shape();
            if ps != [d] {
                return Err(Error::InvalidArgument {
                    op: "layer_norm",
                    message: format!("{name} shape {ps:?} does not match feature dim {d}"),
                });
            }
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut data = vec![0.0; m * d];
        let mut means = vec![0.0; m];
        let mut inv_stds = vec![0.0; m];
        for i in 0..m {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            means[i] = mean;
            inv_stds[i] = inv_std;
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let out = Tensor::new(s, data)?;
        let req = self.requires(x) || self.requires(gain) || self.requires(bias);
        self.finish(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                inv_std: inv_stds,
            },
            req,
        )
    }

    /// Masked mean over each group of `len` consecutive rows:
    /// x[groups*len, d] with 0/1 mask -> [groups, d]. A group whose mask is
    /// all zero is an error.
    pub fn masked_mean(&mut self, x: TensorId, mask: &[f64], groups: usize) -> Result<TensorId> {
        let s = self.value(x).shape();
        if s.len() != 2 || groups == 0 || s[0] % groups != 0 {
            return Err(Error::InvalidArgument {
                op: "masked_mean",
                message: format!("rows {s:?} not divisible into {groups} groups"),
            });
        }
        if mask.len() != s[0] {
            return Err(Error::InvalidArgument {
                op: "masked_mean",
                message: format!("mask length {} != row count {}", mask.len(), s[0]),
            });
        }
        let (rows, d) = (s[0], s[1]);
        let len = rows / groups;
        let src = self.value(x).data();
        let mut data = vec![0.0; groups * d];
        let mut mask_sums = vec![0.0; groups];
        for gi in 0..groups {
            let msum: f64 = mask[gi * len..(gi + 1) * len].iter().sum();
            if msum == 0.0 {
                return Err(Error::InvalidArgument {
                    op: "masked_mean",
                    message: format!("group {gi} has an all-zero mask"),
                });
            }
            mask_sums[gi] = msum;
            let out_row = &mut data[gi * d..(gi + 1) * d];
            for t in 0..len {
                let w = mask[gi * len + t];
                if w == 0.0 {
                    continue;
                }
                let row = &src[(gi * len + t) * d..(gi * len + t + 1) * d];
                for (o, &v) in out_row.iter_mut().zip(row.iter()) {
                    *o += w * v;
                }
            }
            for o in out_row.iter_mut() {
                *o /= msum;
            }
        }
        let out = Tensor::new(vec![groups, d], data)?;
        let req = self.requires(x);
        self.finish(
            "masked_mean",
            out,
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
                groups,
                mask_sums,
            },
            req,
        )
    }

    /// Multi-head scaled dot-product self-attention over `seqs` equal-length
    /// sequences stacked row-wise. `q`, `k`, `v` are [seqs*len, d]; `mask`
    /// holds 0/1 per row; masked rows are excluded as keys.
    pub fn attention(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        mask: &[f64],
        seqs: usize,
        n_heads: usize,
    ) -> Result<TensorId> {
        self.check_same_shape("attention", q, k)?;
        self.check_same_shape("attention", q, v)?;
        let s = self.value(q).shape();
        if s.len() != 2 || seqs == 0 || s[0] % seqs != 0 {
            return Err(Error::InvalidArgument {
                op: "attention",
                message: format!("rows {s:?} not divisible into {seqs} sequences"),
            });
        }
        let (rows, d) = (s[0], s[1]);
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::InvalidArgument {
                op: "attention",
                message: format!("model dim {d} not divisible by {n_heads} heads"),
            });
        }
        if mask.len() != rows {
            return Err(Error::InvalidArgument {
                op: "attention",
                message: format!("mask length {} != row count {rows}", mask.len()),
            });
        }
        let len = rows / seqs;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();

        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; seqs * n_heads * len * len];
        let mut scores = vec![0.0; len];
        for b in 0..seqs {
            let base = b * len;
            let seq_mask = &mask[base..base + len];
            if seq_mask.iter().all(|&m| m == 0.0) {
                return Err(Error::InvalidArgument {
                    op: "attention",
                    message: format!("sequence {b} has an all-zero mask"),
                });
            }
            for h in 0..n_heads {
                let col = h * dh;
                for ti in 0..len {
                    let qrow = &qd[(base + ti) * d + col..(base + ti) * d + col + dh];
                    for (tj, score) in scores.iter_mut().enumerate() {
                        if seq_mask[tj] == 0.0 {
                            *score = MASKED_SCORE;
                            continue;
                        }
                        let krow = &kd[(base + tj) * d + col..(base + tj) * d + col + dh];
                        let mut dot = 0.0;
                        for (&a, &bb) in qrow.iter().zip(krow.iter()) {
                            dot += a * bb;
                        }
                        *score = dot * scale;
                    }
                    let p_base = ((b * n_heads + h) * len + ti) * len;
                    let p_row = &mut probs[p_base..p_base + len];
                    softmax_row(&scores, 1.0, p_row);
                    let out_row = &mut out[(base + ti) * d + col..(base + ti) * d + col + dh];
                    for (tj, &p) in p_row.iter().enumerate() {
                        if p == 0.0 {
                            continue;
                        }
                        let vrow = &vd[(base + tj) * d + col..(base + tj) * d + col + dh];
                        for (o, &vv) in out_row.iter_mut().zip(vrow.iter()) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![rows, d], out)?;
        let req = self.requires(q) || self.requires(k) || self.requires(v);
        self.finish(
            "attention",
            out,
            Op::Attention {
                q,
                k,
                v,
                seqs,
                n_heads,
                probs,
            },
            req,
        )
    }

    /// Rows scaled to unit L2 norm. Zero-norm rows are an error naming the row.
    pub fn l2_normalize_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(Error::InvalidArgument {
                op: "l2_normalize_rows",
                message: format!("expected rank-2 tensor, got {s:?}"),
            });
        }
        let (m, d) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut norms = vec![0.0; m];
        let mut data = vec![0.0; m * d];
        for i in 0..m {
            let row = &src[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::DegenerateVector(format!(
                    "l2_normalize_rows: row {i} has zero norm"
                )));
            }
            norms[i] = norm;
            for j in 0..d {
                data[i * d + j] = row[j] / norm;
            }
        }
        let out = Tensor::new(vec![m, d], data)?;
        let req = self.requires(x);
        self.finish(
            "l2_normalize_rows",
            out,
            Op::L2NormalizeRows { x, norms },
            req,
        )
    }

    /// Contrastive objective on a square logit matrix: mean over rows i of
    /// `logsumexp(logits[i,:]) - logits[i,i]`.
    pub fn in_batch_softmax_nll(&mut self, logits: TensorId) -> Result<TensorId> {
        let s = self.value(logits).shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::InvalidArgument {
                op: "in_batch_softmax_nll",
                message: format!("expected square logits, got {s:?}"),
            });
        }
        let n = s[0];
        let src = self.value(logits).data();
        let mut probs = vec![0.0; n * n];
        let mut total = 0.0;
        for i in 0..n {
            let row = &src[i * n..(i + 1) * n];
            let p_row = &mut probs[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (p, &x) in p_row.iter_mut().zip(row.iter()) {
                *p = (x - max).exp();
                sum += *p;
            }
            for p in p_row.iter_mut() {
                *p /= sum;
            }
            // logsumexp(row) - row[i] == ln(sum) + max - row[i]
            total += sum.ln() + max - row[i];
        }
        let out = Tensor::scalar(total / n as f64);
        let req = self.requires(logits);
        self.finish(
            "in_batch_softmax_nll",
            out,
            Op::InBatchSoftmaxNll { logits, probs },
            req,
        )
    }

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let total = self.value(a).data().iter().sum();
        let req = self.requires(a);
        self.finish("sum", Tensor::scalar(total), Op::Sum(a), req)
    }

    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.value(a).numel() as f64;
        let total: f64 = self.value(a).data().iter().sum();
        let req = self.requires(a);
        self.finish("mean", Tensor::scalar(total / n), Op::Mean(a), req)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss; populates `grad` on every
    /// requires-grad node reachable from it.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::InvalidArgument {
                op: "backward",
                message: format!(
                    "loss must be scalar, got shape {:?}",
                    self.value(loss).shape()
                ),
            });
        }
        let seed = self.nodes[loss.0]
            .grad
            .get_or_insert_with(|| vec![0.0; 1]);
        seed[0] += 1.0;
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            let grad = self.nodes[idx].grad.as_ref().unwrap().clone();
            // Detach the op so backward helpers can borrow self mutably.
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.propagate(idx, &op, &grad);
            self.nodes[idx].op = op;
        }
        Ok(())
    }

    fn accumulate(&mut self, target: TensorId, delta: &[f64]) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let numel = self.nodes[target.0].value.numel();
        let slot = self.nodes[target.0]
            .grad
            .get_or_insert_with(|| vec![0.0; numel]);
        for (g, &d) in slot.iter_mut().zip(delta.iter()) {
            *g += d;
        }
    }

    fn propagate(&mut self, idx: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(gv, bv)| gv * bv)
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(gv, av)| gv * av)
                    .collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Scale(a, factor) => {
                let da: Vec<f64> = g.iter().map(|v| v * factor).collect();
                self.accumulate(*a, &da);
            }
            Op::AddBias(x, bias) => {
                self.accumulate(*x, g);
                let n = self.value(*bias).numel();
                let mut db = vec![0.0; n];
                for (i, &gv) in g.iter().enumerate() {
                    db[i % n] += gv;
                }
                self.accumulate(*bias, &db);
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                let mut da = vec![0.0; m * k];
                matmul_nt(g, self.value(*b).data(), m, n, k, &mut da);
                let mut db = vec![0.0; k * n];
                matmul_tn(self.value(*a).data(), g, m, k, n, &mut db);
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Transpose(a) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                // output was [n, m]; fold g back to [m, n]
                let mut da = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::Log(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(gv, av)| gv / av)
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::Exp(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[idx].value.data())
                    .map(|(gv, ov)| gv * ov)
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::Gelu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(gv, &av)| gv * gelu_derivative(av))
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::Relu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(gv, &av)| if av > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::SoftmaxRows { x, temperature } => {
                let (m, n) = (self.nodes[idx].value.rows(), self.nodes[idx].value.cols());
                let mut dx = vec![0.0; m * n];
                {
                    let y = self.nodes[idx].value.data();
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(yv, gv)| yv * gv).sum();
                        for j in 0..n {
                            dx[i * n + j] = yr[j] * (gr[j] - dot) / temperature;
                        }
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::GatherRows { table, indices } => {
                let d = self.value(*table).cols();
                let mut dt = vec![0.0; self.value(*table).numel()];
                for (r, &i) in indices.iter().enumerate() {
                    let src = &g[r * d..(r + 1) * d];
                    let dst = &mut dt[i * d..(i + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(src.iter()) {
                        *o += v;
                    }
                }
                self.accumulate(*table, &dt);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                inv_std,
            } => {
                let (m, d) = (self.value(*x).rows(), self.value(*x).cols());
                let mut dx = vec![0.0; m * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                {
                    let xv = self.value(*x).data();
                    let gv = self.value(*gain).data();
                    for i in 0..m {
                        let gr = &g[i * d..(i + 1) * d];
                        let xr = &xv[i * d..(i + 1) * d];
                        let istd = inv_std[i];
                        let mu = mean[i];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let xhat = (xr[j] - mu) * istd;
                            let dxhat = gr[j] * gv[j];
                            dgain[j] += gr[j] * xhat;
                            dbias[j] += gr[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            let xhat = (xr[j] - mu) * istd;
                            let dxhat = gr[j] * gv[j];
                            dx[i * d + j] = istd
                                * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                        }
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*gain, &dgain);
                self.accumulate(*bias, &dbias);
            }
            Op::MaskedMean {
                x,
                mask,
                groups,
                mask_sums,
            } => {
                let (rows, d) = (self.value(*x).rows(), self.value(*x).cols());
                let len = rows / groups;
                let mut dx = vec![0.0; rows * d];
                for gi in 0..*groups {
                    let gr = &g[gi * d..(gi + 1) * d];
                    for t in 0..len {
                        let w = mask[gi * len + t];
                        if w == 0.0 {
                            continue;
                        }
                        let scale = w / mask_sums[gi];
                        let dst = &mut dx[(gi * len + t) * d..(gi * len + t + 1) * d];
                        for (o, &gvv) in dst.iter_mut().zip(gr.iter()) {
                            *o += scale * gvv;
                        }
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::Attention {
                q,
                k,
                v,
                seqs,
                n_heads,
                probs,
            } => {
                let (rows, d) = (self.value(*q).rows(), self.value(*q).cols());
                let (seqs, n_heads) = (*seqs, *n_heads);
                let len = rows / seqs;
                let dh = d / n_heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                {
                    let qd = self.value(*q).data();
                    let kd = self.value(*k).data();
                    let vd = self.value(*v).data();
                    let mut d_p = vec![0.0; len];
                    let mut d_s = vec![0.0; len];
                    for b in 0..seqs {
                        let base = b * len;
                        for h in 0..n_heads {
                            let col = h * dh;
                            for ti in 0..len {
                                let g_row =
                                    &g[(base + ti) * d + col..(base + ti) * d + col + dh];
                                let p_base = ((b * n_heads + h) * len + ti) * len;
                                let p_row = &probs[p_base..p_base + len];
                                // dP = g · Vᵀ ; dV += Pᵀ · g
                                for tj in 0..len {
                                    let p = p_row[tj];
                                    let vrow =
                                        &vd[(base + tj) * d + col..(base + tj) * d + col + dh];
                                    let mut dot = 0.0;
                                    for (&gg, &vv) in g_row.iter().zip(vrow.iter()) {
                                        dot += gg * vv;
                                    }
                                    d_p[tj] = dot;
                                    if p != 0.0 {
                                        let dvrow = &mut dv[(base + tj) * d + col
                                            ..(base + tj) * d + col + dh];
                                        for (o, &gg) in dvrow.iter_mut().zip(g_row.iter()) {
                                            *o += p * gg;
                                        }
                                    }
                                }
                                // softmax backward on the score row
                                let dot: f64 =
                                    p_row.iter().zip(d_p.iter()).map(|(p, dp)| p * dp).sum();
                                for tj in 0..len {
                                    d_s[tj] = p_row[tj] * (d_p[tj] - dot) * scale;
                                }
                                // dQ[ti] += dS · K ; dK[tj] += dS[tj] · Q[ti]
                                let qrow =
                                    &qd[(base + ti) * d + col..(base + ti) * d + col + dh];
                                let dqrow = &mut dq
                                    [(base + ti) * d + col..(base + ti) * d + col + dh];
                                for tj in 0..len {
                                    let ds = d_s[tj];
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let krow =
                                        &kd[(base + tj) * d + col..(base + tj) * d + col + dh];
                                    for (o, &kk) in dqrow.iter_mut().zip(krow.iter()) {
                                        *o += ds * kk;
                                    }
                                    let dkrow = &mut dk[(base + tj) * d + col
                                        ..(base + tj) * d + col + dh];
                                    for (o, &qq) in dkrow.iter_mut().zip(qrow.iter()) {
                                        *o += ds * qq;
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(*q, &dq);
                self.accumulate(*k, &dk);
                self.accumulate(*v, &dv);
            }
            Op::L2NormalizeRows { x, norms } => {
                let (m, d) = (self.nodes[idx].value.rows(), self.nodes[idx].value.cols());
                let mut dx = vec![0.0; m * d];
                {
                    let y = self.nodes[idx].value.data();
                    for i in 0..m {
                        let yr = &y[i * d..(i + 1) * d];
                        let gr = &g[i * d..(i + 1) * d];
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(yv, gv)| yv * gv).sum();
                        for j in 0..d {
                            dx[i * d + j] = (gr[j] - dot * yr[j]) / norms[i];
                        }
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::InBatchSoftmaxNll { logits, probs } => {
                let n = self.value(*logits).rows();
                let gs = g[0] / n as f64;
                let mut dl = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        let delta = if i == j { 1.0 } else { 0.0 };
                        dl[i * n + j] = gs * (probs[i * n + j] - delta);
                    }
                }
                self.accumulate(*logits, &dl);
            }
            Op::Sum(a) => {
                let da = vec![g[0]; self.value(*a).numel()];
                self.accumulate(*a, &da);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let da = vec![g[0] / n as f64; n];
                self.accumulate(*a, &da);
            }
        }
    }
}

fn softmax_row(row: &[f64], temperature: f64, out: &mut [f64]) {
    let max = row
        .iter()
        .map(|v| v / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row.iter()) {
        *o = (x / temperature - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEFF: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}
