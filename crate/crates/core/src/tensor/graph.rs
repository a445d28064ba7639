//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! also a topological order. [`Graph::backward`] walks the tape in reverse
//! and adds the resulting adjoints into the gradients of the leaf nodes, so
//! calling it twice without [`Graph::zero_grad`] accumulates.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::array::{strides_of, NdArray};
use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use crate::error::{Error, Result};

/// LayerNorm epsilon used throughout the models.
pub const LN_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
        shared_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    Concat {
        parts: Vec<Var>,
        widths: Vec<usize>,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu {
        a: Var,
    },
    Dropout {
        a: Var,
        mask: Vec<f64>,
    },
    MeanPool {
        a: Var,
        k: usize,
    },
    MaxPool {
        a: Var,
        argmax: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    CrossEntropyDist {
        logits: Var,
        targets: Vec<Vec<(usize, f64)>>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: NdArray,
    op: Op,
    requires_grad: bool,
}

/// A dynamically built computation graph.
pub struct Graph {
    nodes: Vec<Node>,
    grads: HashMap<usize, NdArray>,
    named: HashMap<String, Var>,
    training: bool,
    rng: Xoshiro256PlusPlus,
}

impl Graph {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn eval() -> Self {
        Self::new(false, 0)
    }

    /// `seed` drives the dropout masks of a training graph.
    pub fn new(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            grads: HashMap::new(),
            named: HashMap::new(),
            training,
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &NdArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&NdArray> {
        self.grads.get(&v.0)
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: NdArray) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn leaf(&mut self, value: NdArray) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Named trainable leaf; repeated calls with the same name return the same node.
    pub fn param(&mut self, name: &str, value: &NdArray) -> Var {
        if let Some(&v) = self.named.get(name) {
            return v;
        }
        let v = self.leaf(value.clone());
        self.named.insert(name.to_string(), v);
        v
    }

    /// Makes `name` refer to an existing node, so later [`Graph::param`]
    /// calls with that name return `v` instead of a fresh leaf.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.named.insert(name.to_string(), v);
    }

    /// Gradients of every named parameter that took part in the last backward pass.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &NdArray)> {
        self.named
            .iter()
            .filter_map(|(name, v)| self.grads.get(&v.0).map(|g| (name.as_str(), g)))
    }

    fn push_raw(&mut self, value: NdArray, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: NdArray, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    // ------------------------------------------------------------------
    // Linear algebra

    /// Matrix product.
    ///
    /// * `a: [.., m, k]`, `b: [k, n]` gives `[.., m, n]` (every row of `a` times `b`).
    /// * `a: [g, m, k]`, `b: [g, k, n]` gives the batched product `[g, m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Like [`Graph::matmul`] with the last two axes of `b` swapped.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::shape("matmul", format!("{:?} x {:?} (trans_b={})", sa, sb, trans_b));
        if sa.is_empty() {
            return Err(err());
        }
        let k = *sa.last().unwrap();
        let (bk, n) = match sb.len() {
            2 if trans_b => (sb[1], sb[0]),
            2 => (sb[0], sb[1]),
            3 if trans_b => (sb[2], sb[1]),
            3 => (sb[1], sb[2]),
            _ => return Err(err()),
        };
        if bk != k {
            return Err(err());
        }
        let shared_b = sb.len() == 2;
        let (batch, m, out_shape) = if shared_b {
            let rows = if k == 0 { 0 } else { self.value(a).len() / k };
            let mut s = sa[..sa.len() - 1].to_vec();
            s.push(n);
            (1, rows, s)
        } else {
            if sa.len() != 3 || sa[0] != sb[0] {
                return Err(err());
            }
            (sa[0], sa[1], vec![sa[0], sa[1], n])
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(batch * m * n);
        for g in 0..batch {
            let a_g = &av[g * m * k..(g + 1) * m * k];
            let b_g = if shared_b { bv } else { &bv[g * k * n..(g + 1) * k * n] };
            let c = if trans_b {
                matmul_nt(a_g, b_g, m, k, n)
            } else {
                matmul_nn(a_g, b_g, m, k, n)
            };
            out.extend_from_slice(&c);
        }
        let value = NdArray::new(out_shape, out)?;
        self.push(
            "matmul",
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
                shared_b,
            },
            &[a, b],
        )
    }

    /// `x · w + bias` over the last axis of `x`; `w: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ------------------------------------------------------------------
    // Elementwise

    /// Elementwise sum; `b` may broadcast over leading axes of `a`
    /// (its shape must be a suffix of `a`'s shape).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", value, Op::Sub { a, b }, &[a, b])
    }

    /// Elementwise product of equally shaped arrays.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = NdArray::new(self.shape(a).to_vec(), data)?;
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let value = NdArray::new(self.shape(a).to_vec(), data)?;
        self.push("scale", value, Op::Scale { a, c }, &[a])
    }

    fn broadcast_binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NdArray> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, format!("{:?} with {:?}", sa, sb)));
        }
        let bv = self.value(b).data();
        let period = bv.len().max(1);
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % period]))
            .collect();
        NdArray::new(sa.to_vec(), data)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", NdArray::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::shape("mean", "empty input"));
        }
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push("mean", NdArray::scalar(s), Op::Mean { a }, &[a])
    }

    // ------------------------------------------------------------------
    // Shape manipulation

    /// Concatenates along the last axis; all other axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_last", "no inputs"));
        }
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != *lead {
                return Err(Error::shape(
                    "concat_last",
                    format!("{:?} vs leading {:?}", s, lead),
                ));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = NdArray::new(shape, data)?;
        self.push(
            "concat_last",
            value,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
            },
            parts,
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("{:?} axis {} range {}..{}", shape, axis, start, end),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let value = NdArray::new(out_shape, data)?;
        self.push("slice", value, Op::Slice { a, axis, start }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape { a }, &[a])
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{:?} by {:?}", shape, perm)));
        }
        let data = permute_data(self.value(a).data(), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let value = NdArray::new(out_shape, data)?;
        self.push(
            "permute",
            value,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            &[a],
        )
    }

    // ------------------------------------------------------------------
    // Neural network primitives

    /// Rows of `table: [vocab, d]` selected by `ids`; output `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape("embedding", format!("table {:?}", ts)));
        }
        let (vocab, d) = (ts[0], ts[1]);
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::OutOfRange {
                    what: "embedding id",
                    index: id,
                    limit: vocab,
                });
            }
            data.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let value = NdArray::new(vec![ids.len(), d], data)?;
        self.push(
            "embedding",
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Softmax over the last axis after adding `mask` (`[q, k]`, broadcast over
    /// leading axes; entries are `0` or `-inf`). Rows with no finite entry
    /// produce all-zero weights.
    pub fn softmax_last(&mut self, a: Var, mask: Option<&NdArray>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let kdim = *shape.last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let qdim = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
        if let Some(m) = mask {
            if m.shape() != [qdim, kdim] {
                return Err(Error::shape(
                    "softmax",
                    format!("mask {:?} for scores {:?}", m.shape(), shape),
                ));
            }
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        let rows = if kdim == 0 { 0 } else { src.len() / kdim };
        let mut z = vec![0.0; kdim];
        for r in 0..rows {
            let x = &src[r * kdim..(r + 1) * kdim];
            match mask {
                Some(m) => {
                    let mrow = m.row(r % qdim);
                    for j in 0..kdim {
                        z[j] = x[j] + mrow[j];
                    }
                }
                None => z.copy_from_slice(x),
            }
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let y = &mut out[r * kdim..(r + 1) * kdim];
            let mut total = 0.0;
            for j in 0..kdim {
                let e = (z[j] - max).exp();
                y[j] = e;
                total += e;
            }
            for v in y.iter_mut() {
                *v /= total;
            }
        }
        let value = NdArray::new(shape, out)?;
        self.push("softmax", value, Op::Softmax { a }, &[a])
    }

    /// LayerNorm over the last axis with learned `gain` and `bias` (both `[d]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?}, gain {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let src = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let rows = self.value(x).rows();
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let value = NdArray::new(self.shape(x).to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Exact GeLU, `x · Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let value = NdArray::new(self.shape(a).to_vec(), data)?;
        self.push("gelu", value, Op::Gelu { a }, &[a])
    }

    /// Inverted dropout in training graphs; identity otherwise or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !self.training || p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout probability {} must be < 1", p)));
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.dropout_with_mask(a, mask)
    }

    /// Dropout with an explicit multiplicative mask (used by gradient checks).
    pub fn dropout_with_mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::shape(
                "dropout",
                format!("mask of {} for {:?}", mask.len(), self.shape(a)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let value = NdArray::new(self.shape(a).to_vec(), data)?;
        self.push("dropout", value, Op::Dropout { a, mask }, &[a])
    }

    /// Non-overlapping mean over windows of `k` along axis `-2`:
    /// `[.., L, d] -> [.., L / k, d]`. `L` must be divisible by `k`.
    pub fn mean_pool_1d(&mut self, a: Var, k: usize) -> Result<Var> {
        let (lead, len, d) = self.pool_dims("mean_pool_1d", a, k)?;
        let frames = len / k;
        let src = self.value(a).data();
        let mut out = vec![0.0; lead * frames * d];
        for b in 0..lead {
            for f in 0..frames {
                let dst = &mut out[(b * frames + f) * d..(b * frames + f + 1) * d];
                for s in 0..k {
                    let row = &src[(b * len + f * k + s) * d..(b * len + f * k + s + 1) * d];
                    for (o, v) in dst.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                for o in dst.iter_mut() {
                    *o /= k as f64;
                }
            }
        }
        let value = NdArray::new(self.pooled_shape(a, frames), out)?;
        self.push("mean_pool_1d", value, Op::MeanPool { a, k }, &[a])
    }

    /// Non-overlapping max over windows of `k` along axis `-2`.
    pub fn max_pool_1d(&mut self, a: Var, k: usize) -> Result<Var> {
        let (lead, len, d) = self.pool_dims("max_pool_1d", a, k)?;
        let frames = len / k;
        let src = self.value(a).data();
        let mut out = vec![0.0; lead * frames * d];
        let mut argmax = vec![0; lead * frames * d];
        for b in 0..lead {
            for f in 0..frames {
                for j in 0..d {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for s in 0..k {
                        let idx = (b * len + f * k + s) * d + j;
                        if src[idx] > best {
                            best = src[idx];
                            at = idx;
                        }
                    }
                    out[(b * frames + f) * d + j] = best;
                    argmax[(b * frames + f) * d + j] = at;
                }
            }
        }
        let value = NdArray::new(self.pooled_shape(a, frames), out)?;
        self.push("max_pool_1d", value, Op::MaxPool { a, argmax }, &[a])
    }

    fn pool_dims(&self, op: &'static str, a: Var, k: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(a);
        if s.len() < 2 || k == 0 || s[s.len() - 2] % k != 0 {
            return Err(Error::shape(op, format!("{:?} with window {}", s, k)));
        }
        let d = s[s.len() - 1];
        let len = s[s.len() - 2];
        let lead = s[..s.len() - 2].iter().product();
        Ok((lead, len, d))
    }

    fn pooled_shape(&self, a: Var, frames: usize) -> Vec<usize> {
        let mut s = self.shape(a).to_vec();
        let n = s.len();
        s[n - 2] = frames;
        s
    }

    /// Strided causal convolution over axis `-2` of `x: [b, L, d_in]`.
    ///
    /// `w: [kernel * d_in, d_out]` with `kernel <= stride`; frame `j` sees the
    /// last `kernel` positions of `[j * stride, (j + 1) * stride)` only.
    pub fn causal_conv_1d(&mut self, x: Var, w: Var, bias: Var, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if s.len() != 3 || stride == 0 || s[1] % stride != 0 || ws.len() != 2 || ws[0] % s[2] != 0 {
            return Err(Error::shape(
                "causal_conv_1d",
                format!("input {:?}, weight {:?}, stride {}", s, ws, stride),
            ));
        }
        let kernel = ws[0] / s[2];
        if kernel == 0 || kernel > stride {
            return Err(Error::shape(
                "causal_conv_1d",
                format!("kernel {} must be in 1..={}", kernel, stride),
            ));
        }
        let frames = s[1] / stride;
        let mut v = self.reshape(x, &[s[0], frames, stride * s[2]])?;
        if kernel < stride {
            v = self.slice(v, 2, (stride - kernel) * s[2], stride * s[2])?;
        }
        self.linear(v, w, Some(bias))
    }

    /// Transpose convolution with kernel size and stride `r`:
    /// `h: [b, F, d_in] -> [b, F * r, d_out]` with `w: [d_in, r * d_out]`,
    /// where output position `f * r + s` uses column block `s` of `w`.
    pub fn transpose_conv_1d(&mut self, h: Var, w: Var, bias: Var, r: usize) -> Result<Var> {
        let s = self.shape(h).to_vec();
        let ws = self.shape(w).to_vec();
        if s.len() != 3 || r == 0 || ws.len() != 2 || ws[0] != s[2] || ws[1] % r != 0 {
            return Err(Error::shape(
                "transpose_conv_1d",
                format!("input {:?}, weight {:?}, factor {}", s, ws, r),
            ));
        }
        let d_out = ws[1] / r;
        let y = self.matmul(h, w)?;
        let y = self.reshape(y, &[s[0], s[1] * r, d_out])?;
        self.add(y, bias)
    }

    /// Mean next-token cross-entropy; one target per row of `logits: [.., V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let rows = lv.rows();
        if rows != targets.len() || rows == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} with {} targets", lv.shape(), targets.len()),
            ));
        }
        let mut probs = vec![0.0; rows * v];
        let mut total = 0.0;
        for r in 0..rows {
            if targets[r] >= v {
                return Err(Error::OutOfRange {
                    what: "target id",
                    index: targets[r],
                    limit: v,
                });
            }
            let lse = softmax_row(lv.row(r), &mut probs[r * v..(r + 1) * v]);
            total += lse - lv.row(r)[targets[r]];
        }
        let value = NdArray::scalar(total / rows as f64);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Mean cross-entropy against sparse target distributions
    /// (`(id, probability)` pairs per row).
    pub fn cross_entropy_dist(
        &mut self,
        logits: Var,
        targets: &[Vec<(usize, f64)>],
    ) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let rows = lv.rows();
        if rows != targets.len() || rows == 0 {
            return Err(Error::shape(
                "cross_entropy_dist",
                format!("logits {:?} with {} targets", lv.shape(), targets.len()),
            ));
        }
        let mut probs = vec![0.0; rows * v];
        let mut total = 0.0;
        for r in 0..rows {
            let lse = softmax_row(lv.row(r), &mut probs[r * v..(r + 1) * v]);
            for &(id, p) in &targets[r] {
                if id >= v {
                    return Err(Error::OutOfRange {
                        what: "target id",
                        index: id,
                        limit: v,
                    });
                }
                total += p * (lse - lv.row(r)[id]);
            }
        }
        let value = NdArray::scalar(total / rows as f64);
        self.push(
            "cross_entropy_dist",
            value,
            Op::CrossEntropyDist {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    // ------------------------------------------------------------------
    // Backward

    /// Adds `d root / d leaf` into the gradient of every leaf that requires one.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<NdArray>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(NdArray::full(root_value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match self.grads.get_mut(&i) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        self.grads.insert(i, g);
                    }
                }
                continue;
            }
            self.backward_node(i, g, &mut adj)?;
        }
        Ok(())
    }

    fn accumulate(&self, adj: &mut [Option<NdArray>], v: Var, g: NdArray) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, g: NdArray, adj: &mut [Option<NdArray>]) -> Result<()> {
        let node = &self.nodes[i];
        let shape_of = |v: Var| self.nodes[v.0].value.shape().to_vec();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
                shared_b,
            } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let gv = g.data();
                let mut da = Vec::with_capacity(batch * m * k);
                let mut db = vec![0.0; self.value(b).len()];
                for t in 0..batch {
                    let a_t = &av[t * m * k..(t + 1) * m * k];
                    let g_t = &gv[t * m * n..(t + 1) * m * n];
                    let boff = if shared_b { 0 } else { t * k * n };
                    let b_t = &bv[boff..boff + k * n];
                    if self.nodes[a.0].requires_grad {
                        let d = if trans_b {
                            matmul_nn(g_t, b_t, m, n, k)
                        } else {
                            matmul_nt(g_t, b_t, m, n, k)
                        };
                        da.extend_from_slice(&d);
                    }
                    if self.nodes[b.0].requires_grad {
                        let d = if trans_b {
                            matmul_tn(g_t, a_t, m, n, k)
                        } else {
                            matmul_tn(a_t, g_t, m, k, n)
                        };
                        for (acc, v) in db[boff..boff + k * n].iter_mut().zip(&d) {
                            *acc += v;
                        }
                    }
                }
                if self.nodes[a.0].requires_grad {
                    self.accumulate(adj, a, NdArray::new(shape_of(a), da)?);
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(adj, b, NdArray::new(shape_of(b), db)?);
                }
            }
            &Op::Add { a, b } | &Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if self.nodes[b.0].requires_grad {
                    let blen = self.value(b).len().max(1);
                    let mut db = vec![0.0; self.value(b).len()];
                    for (idx, v) in g.data().iter().enumerate() {
                        db[idx % blen] += sign * v;
                    }
                    self.accumulate(adj, b, NdArray::new(shape_of(b), db)?);
                }
                self.accumulate(adj, a, g);
            }
            &Op::Mul { a, b } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let da = g.data().iter().zip(bv).map(|(x, y)| x * y).collect();
                let db = g.data().iter().zip(av).map(|(x, y)| x * y).collect();
                self.accumulate(adj, a, NdArray::new(shape_of(a), da)?);
                self.accumulate(adj, b, NdArray::new(shape_of(b), db)?);
            }
            &Op::Scale { a, c } => {
                let da = g.data().iter().map(|x| x * c).collect();
                self.accumulate(adj, a, NdArray::new(shape_of(a), da)?);
            }
            &Op::Sum { a } => {
                self.accumulate(adj, a, NdArray::full(&shape_of(a), g.data()[0]));
            }
            &Op::Mean { a } => {
                let n = self.value(a).len() as f64;
                self.accumulate(adj, a, NdArray::full(&shape_of(a), g.data()[0] / n));
            }
            Op::Concat { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = if total == 0 { 0 } else { g.len() / total };
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if self.nodes[p.0].requires_grad {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(adj, p, NdArray::new(shape_of(p), d)?);
                    }
                    offset += w;
                }
            }
            &Op::Slice { a, axis, start } => {
                let sa = shape_of(a);
                let width = node.value.shape()[axis];
                let outer: usize = sa[..axis].iter().product();
                let inner: usize = sa[axis + 1..].iter().product();
                let mut d = vec![0.0; self.value(a).len()];
                for o in 0..outer {
                    let base = o * sa[axis] * inner;
                    d[base + start * inner..base + (start + width) * inner]
                        .copy_from_slice(&g.data()[o * width * inner..(o + 1) * width * inner]);
                }
                self.accumulate(adj, a, NdArray::new(sa, d)?);
            }
            &Op::Reshape { a } => {
                self.accumulate(adj, a, g.reshaped(&shape_of(a))?);
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let d = permute_data(g.data(), node.value.shape(), &inv);
                self.accumulate(adj, *a, NdArray::new(shape_of(*a), d)?);
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).last_dim();
                let mut dt = vec![0.0; self.value(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g.data()[r * d + j];
                    }
                }
                self.accumulate(adj, *table, NdArray::new(shape_of(*table), dt)?);
            }
            &Op::Softmax { a } => {
                let y = node.value.data();
                let kdim = node.value.last_dim();
                let mut d = vec![0.0; y.len()];
                for r in 0..node.value.rows() {
                    let yr = &y[r * kdim..(r + 1) * kdim];
                    let gr = &g.data()[r * kdim..(r + 1) * kdim];
                    let s: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..kdim {
                        d[r * kdim + j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(adj, a, NdArray::new(shape_of(a), d)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let gv = self.value(*gain).data();
                let gd = g.data();
                let rows = inv_std.len();
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dx = vec![0.0; gd.len()];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let xr = &xhat[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        dgain[j] += gr[j] * xr[j];
                        dbias[j] += gr[j];
                        dxhat[j] = gr[j] * gv[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xr[j];
                    }
                    let scale = inv_std[r] / d as f64;
                    for j in 0..d {
                        dx[r * d + j] =
                            scale * (d as f64 * dxhat[j] - sum_dxhat - xr[j] * sum_dxhat_xhat);
                    }
                }
                self.accumulate(adj, *x, NdArray::new(shape_of(*x), dx)?);
                self.accumulate(adj, *gain, NdArray::new(vec![d], dgain)?);
                self.accumulate(adj, *bias, NdArray::new(vec![d], dbias)?);
            }
            &Op::Gelu { a } => {
                let xv = self.value(a).data();
                let d = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(gv, &x)| gv * gelu_grad(x))
                    .collect();
                self.accumulate(adj, a, NdArray::new(shape_of(a), d)?);
            }
            Op::Dropout { a, mask } => {
                let d = g.data().iter().zip(mask).map(|(x, m)| x * m).collect();
                self.accumulate(adj, *a, NdArray::new(shape_of(*a), d)?);
            }
            &Op::MeanPool { a, k } => {
                let sa = shape_of(a);
                let d = sa[sa.len() - 1];
                let len = sa[sa.len() - 2];
                let frames = len / k;
                let lead = self.value(a).len() / (len * d).max(1);
                let mut dx = vec![0.0; self.value(a).len()];
                for b in 0..lead {
                    for f in 0..frames {
                        let gr = &g.data()[(b * frames + f) * d..(b * frames + f + 1) * d];
                        for s in 0..k {
                            let base = (b * len + f * k + s) * d;
                            for j in 0..d {
                                dx[base + j] = gr[j] / k as f64;
                            }
                        }
                    }
                }
                self.accumulate(adj, a, NdArray::new(sa, dx)?);
            }
            Op::MaxPool { a, argmax } => {
                let mut dx = vec![0.0; self.value(*a).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g.data()[o];
                }
                self.accumulate(adj, *a, NdArray::new(shape_of(*a), dx)?);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.value(*logits).last_dim();
                let scale = g.data()[0] / targets.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * v + t] -= scale;
                }
                self.accumulate(adj, *logits, NdArray::new(shape_of(*logits), d)?);
            }
            Op::CrossEntropyDist {
                logits,
                targets,
                probs,
            } => {
                let v = self.value(*logits).last_dim();
                let scale = g.data()[0] / targets.len() as f64;
                let mut d = vec![0.0; probs.len()];
                for (r, row) in targets.iter().enumerate() {
                    let mass: f64 = row.iter().map(|&(_, p)| p).sum();
                    for j in 0..v {
                        d[r * v + j] = probs[r * v + j] * mass * scale;
                    }
                    for &(id, p) in row {
                        d[r * v + id] -= p * scale;
                    }
                }
                self.accumulate(adj, *logits, NdArray::new(shape_of(*logits), d)?);
            }
        }
        Ok(())
    }
}

/// Writes the softmax of `x` into `out` and returns `logsumexp(x)`.
pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    max + total.ln()
}

/// `log p(target)` under `softmax(logits)`.
pub fn log_prob(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    logits[target] - max - total.ln()
}

pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    std_normal_cdf(x) + x * pdf
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    // Copy contiguous runs when the last axis stays in place.
    let run = if nd > 0 && perm[nd - 1] == nd - 1 { shape[nd - 1] } else { 1 };
    let outer_axes = if run > 1 { nd - 1 } else { nd };
    let mut idx = vec![0usize; outer_axes];
    loop {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        if run > 1 {
            out.extend_from_slice(&src[off..off + run]);
        } else {
            out.push(src[off]);
        }
        let mut ax = outer_axes;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}
