//! Transformer building blocks: parameters, grouped multi-head attention,
//! the post-norm layer, embeddings and the output head.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NdArray, Var, LN_EPS};

/// Standard deviation of the normal initializer.
pub const INIT_STD: f64 = 0.02;

/// Named parameter arrays, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, NdArray>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: NdArray) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&NdArray> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NdArray> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NdArray)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut NdArray)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(NdArray::len).sum()
    }

    /// The parameter as a trainable node of `g`.
    pub fn var(&self, g: &mut Graph, name: &str) -> Result<Var> {
        let value = self
            .map
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {}", name)))?;
        Ok(g.param(name, value))
    }

    pub fn normal<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut R) {
        self.insert(name, NdArray::randn(shape, INIT_STD, rng));
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, NdArray::zeros(shape));
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, NdArray::full(shape, 1.0));
    }
}

/// Width settings shared by every layer of a model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerDims {
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

impl LayerDims {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.d_model == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// A subset of heads reading keys and values from one source under one mask.
#[derive(Clone, Copy, Debug)]
pub struct HeadGroup<'a> {
    pub heads: usize,
    /// `[batch, kv_len, d_model]`
    pub kv: Var,
    /// Additive `[query_len, kv_len]` mask.
    pub mask: &'a NdArray,
}

/// Registers the parameters of one transformer layer under `prefix`.
pub fn init_layer<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dims: &LayerDims, rng: &mut R) {
    let d = dims.d_model;
    for p in ["q", "k", "v", "o"] {
        store.normal(format!("{prefix}.attn.w{p}"), &[d, d], rng);
        store.zeros(format!("{prefix}.attn.b{p}"), &[d]);
    }
    store.normal(format!("{prefix}.ff.w1"), &[d, dims.d_ff], rng);
    store.zeros(format!("{prefix}.ff.b1"), &[dims.d_ff]);
    store.normal(format!("{prefix}.ff.w2"), &[dims.d_ff, d], rng);
    store.zeros(format!("{prefix}.ff.b2"), &[d]);
    for ln in ["ln1", "ln2"] {
        store.ones(format!("{prefix}.{ln}.g"), &[d]);
        store.zeros(format!("{prefix}.{ln}.b"), &[d]);
    }
}

/// Per-group scaled dot-product attention, heads concatenated in group order,
/// before the output projection. `x: [batch, len, d_model]`.
pub fn attention_heads(
    g: &mut Graph,
    params: &ParamStore,
    prefix: &str,
    x: Var,
    groups: &[HeadGroup<'_>],
    dims: &LayerDims,
) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 3 || xs[2] != dims.d_model {
        return Err(Error::shape("attention", format!("queries {:?}", xs)));
    }
    let (b, len) = (xs[0], xs[1]);
    let total: usize = groups.iter().map(|gr| gr.heads).sum();
    if total != dims.num_heads || groups.iter().any(|gr| gr.heads == 0) {
        return Err(Error::Config(format!(
            "head groups {:?} do not partition {} heads",
            groups.iter().map(|gr| gr.heads).collect::<Vec<_>>(),
            dims.num_heads
        )));
    }
    let dk = dims.head_dim();
    let w: Vec<Var> = ["q", "k", "v"]
        .iter()
        .map(|p| params.var(g, &format!("{prefix}.attn.w{p}")))
        .collect::<Result<_>>()?;
    let bias: Vec<Var> = ["q", "k", "v"]
        .iter()
        .map(|p| params.var(g, &format!("{prefix}.attn.b{p}")))
        .collect::<Result<_>>()?;

    let mut outs = Vec::with_capacity(groups.len());
    let mut h0 = 0;
    for gr in groups {
        let ks = g.shape(gr.kv).to_vec();
        if ks.len() != 3 || ks[0] != b || ks[2] != dims.d_model {
            return Err(Error::shape("attention", format!("keys {:?} for queries {:?}", ks, xs)));
        }
        let kv_len = ks[1];
        if gr.mask.shape() != [len, kv_len] {
            return Err(Error::Mask(format!(
                "mask {:?} does not match {} queries by {} keys",
                gr.mask.shape(),
                len,
                kv_len
            )));
        }
        let (c0, c1) = (h0 * dk, (h0 + gr.heads) * dk);
        let mut proj = |src: Var, i: usize, n: usize| -> Result<Var> {
            let y = if gr.heads == dims.num_heads {
                g.linear(src, w[i], Some(bias[i]))?
            } else {
                let wi = g.slice(w[i], 1, c0, c1)?;
                let bi = g.slice(bias[i], 0, c0, c1)?;
                g.linear(src, wi, Some(bi))?
            };
            let y = g.reshape(y, &[b, n, gr.heads, dk])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            g.reshape(y, &[b * gr.heads, n, dk])
        };
        let q = proj(x, 0, len)?;
        let k = proj(gr.kv, 1, kv_len)?;
        let v = proj(gr.kv, 2, kv_len)?;
        let scores = g.matmul_bt(q, k)?;
        let scores = g.scale(scores, 1.0 / (dk as f64).sqrt())?;
        let weights = g.softmax_last(scores, Some(gr.mask))?;
        let weights = g.dropout(weights, dims.dropout)?;
        let out = g.matmul(weights, v)?;
        let out = g.reshape(out, &[b, gr.heads, len, dk])?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        outs.push(g.reshape(out, &[b, len, gr.heads * dk])?);
        h0 += gr.heads;
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat_last(&outs)
    }
}

/// Grouped multi-head attention followed by the output projection.
pub fn multi_head_attention(
    g: &mut Graph,
    params: &ParamStore,
    prefix: &str,
    x: Var,
    groups: &[HeadGroup<'_>],
    dims: &LayerDims,
) -> Result<Var> {
    let heads = attention_heads(g, params, prefix, x, groups, dims)?;
    let wo = params.var(g, &format!("{prefix}.attn.wo"))?;
    let bo = params.var(g, &format!("{prefix}.attn.bo"))?;
    g.linear(heads, wo, Some(bo))
}

/// Post-norm layer: `x1 = LN(x + drop(attn(x)))`, `out = LN(x1 + drop(ff(x1)))`.
pub fn transformer_layer(
    g: &mut Graph,
    params: &ParamStore,
    prefix: &str,
    x: Var,
    groups: &[HeadGroup<'_>],
    dims: &LayerDims,
) -> Result<Var> {
    let a = multi_head_attention(g, params, prefix, x, groups, dims)?;
    let a = g.dropout(a, dims.dropout)?;
    let x1 = g.add(x, a)?;
    let x1 = norm(g, params, &format!("{prefix}.ln1"), x1)?;

    let w1 = params.var(g, &format!("{prefix}.ff.w1"))?;
    let b1 = params.var(g, &format!("{prefix}.ff.b1"))?;
    let w2 = params.var(g, &format!("{prefix}.ff.w2"))?;
    let b2 = params.var(g, &format!("{prefix}.ff.b2"))?;
    let h = g.linear(x1, w1, Some(b1))?;
    let h = g.gelu(h)?;
    let h = g.linear(h, w2, Some(b2))?;
    let h = g.dropout(h, dims.dropout)?;
    let x2 = g.add(x1, h)?;
    norm(g, params, &format!("{prefix}.ln2"), x2)
}

fn norm(g: &mut Graph, params: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gain = params.var(g, &format!("{prefix}.g"))?;
    let bias = params.var(g, &format!("{prefix}.b"))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// Registers word and position tables and the output head.
pub fn init_embeddings<R: Rng + ?Sized>(
    store: &mut ParamStore,
    vocab: usize,
    context: usize,
    d_model: usize,
    tied: bool,
    rng: &mut R,
) {
    store.normal("emb.tok", &[vocab, d_model], rng);
    store.normal("emb.pos", &[context, d_model], rng);
    if !tied {
        store.normal("lm.w", &[d_model, vocab], rng);
    }
    store.zeros("lm.b", &[vocab]);
}

/// Word plus learned position embeddings for equal-length sequences;
/// token `i` of each row uses position `offset + i`. Output `[batch, len, d]`.
pub fn embed(g: &mut Graph, params: &ParamStore, tokens: &[Vec<usize>], offset: usize) -> Result<Var> {
    let len = tokens.first().map(Vec::len).unwrap_or(0);
    if tokens.iter().any(|t| t.len() != len) {
        return Err(Error::shape("embed", "rows of unequal length"));
    }
    let table = params.var(g, "emb.tok")?;
    let flat: Vec<usize> = tokens.iter().flatten().copied().collect();
    let words = g.embedding(table, &flat)?;
    let d = g.shape(words)[1];
    let words = g.reshape(words, &[tokens.len(), len, d])?;
    let pos_table = params.var(g, "emb.pos")?;
    let positions: Vec<usize> = (offset..offset + len).collect();
    let pos = g.embedding(pos_table, &positions)?;
    g.add(words, pos)
}

/// Logits `[.., vocab]`; with `tied` the output weights are the word table.
pub fn lm_head(g: &mut Graph, params: &ParamStore, h: Var, tied: bool) -> Result<Var> {
    let bias = params.var(g, "lm.b")?;
    let y = if tied {
        let table = params.var(g, "emb.tok")?;
        let s = g.shape(h).to_vec();
        let d = *s.last().unwrap_or(&0);
        let flat = g.reshape(h, &[s.iter().product::<usize>() / d.max(1), d])?;
        let y = g.matmul_bt(flat, table)?;
        let mut out = s[..s.len() - 1].to_vec();
        out.push(g.shape(table)[0]);
        g.reshape(y, &out)?
    } else {
        let w = params.var(g, "lm.w")?;
        g.matmul(h, w)?
    };
    g.add(y, bias)
}
