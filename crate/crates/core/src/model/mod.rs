//! The model families as forward functions from token ids to next-token logits.
//!
//! Layer parameters are named `s{k}.l{i}.*` after the scale they run at, so a
//! single-scale top-down or retina model shares every name with a vanilla
//! model of the same depth. The bottom-up aggregation layer is `agg.*`.

mod checkpoint;
mod config;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub use checkpoint::{canonical_json, read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{Family, ModelConfig};

use crate::error::{Error, Result};
use crate::mask::{retina_masks, AttentionMask};
use crate::nn::{embed, init_embeddings, init_layer, lm_head, transformer_layer, HeadGroup, ParamStore};
use crate::scale::{
    downsample, downsample_floor, fuse, init_downsampler, init_fuse, init_upsampler, upsample,
};
use crate::tensor::{log_prob, Graph, NdArray, Var};

/// Result of a forward pass over a batch of equal-length sequences.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[batch, predictions, vocab]`
    pub logits: Var,
    /// Index of the first predicted token in each sequence.
    pub first_target: usize,
    /// Final representation at each exposed scale, `[batch, frames, d_model]`.
    pub hidden: Vec<(usize, Var)>,
}

impl Forward {
    pub fn hidden_at(&self, scale: usize) -> Option<Var> {
        self.hidden.iter().find(|(k, _)| *k == scale).map(|(_, v)| *v)
    }
}

/// Parameters plus the configuration that built them.
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    masks: Mutex<HashMap<String, Arc<Vec<NdArray>>>>,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self::from_params(self.config.clone(), self.params.clone())
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("params", &self.params.len())
            .finish()
    }
}

fn layer(k: usize, i: usize) -> String {
    format!("s{k}.l{i}")
}

impl Model {
    /// Validates `config` and draws fresh parameters from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c = &config;
        let d = c.d_model;
        let dims = c.dims();
        init_embeddings(&mut p, c.vocab_size, c.context, d, c.tie_embeddings, &mut rng);
        match c.family {
            Family::Vanilla => {
                for i in 0..c.layers[0] {
                    init_layer(&mut p, &layer(1, i), &dims, &mut rng);
                }
            }
            Family::Topdown => {
                for (si, (&k, &n)) in c.scales.iter().zip(&c.layers).enumerate() {
                    init_downsampler(&mut p, &format!("s{k}.ds"), c.downsampler, k, d, &mut rng);
                    if si > 0 {
                        init_fuse(&mut p, &format!("s{k}.fuse"), d, &mut rng);
                    }
                    for i in 0..n {
                        init_layer(&mut p, &layer(k, i), &dims, &mut rng);
                    }
                    if let Some(&next) = c.scales.get(si + 1) {
                        init_upsampler(&mut p, &format!("s{k}.up"), k / next, d, &mut rng);
                    }
                }
            }
            Family::Bottomup => {
                let asc = c.scales_ascending();
                for i in 1..asc.len() {
                    let k = asc[i];
                    init_downsampler(&mut p, &format!("s{k}.ds"), c.downsampler, k / asc[i - 1], d, &mut rng);
                    for l in 0..c.layers[asc.len() - 1 - i] {
                        init_layer(&mut p, &layer(k, l), &dims, &mut rng);
                    }
                }
                init_layer(&mut p, "agg", &dims, &mut rng);
                for l in 0..*c.layers.last().unwrap() {
                    init_layer(&mut p, &layer(1, l), &dims, &mut rng);
                }
            }
            Family::Retina => {
                for l in 0..c.layers[0] {
                    for &k in &c.scales_ascending()[1..] {
                        init_downsampler(&mut p, &format!("s1.l{l}.ds{k}"), c.downsampler, k, d, &mut rng);
                    }
                    init_layer(&mut p, &layer(1, l), &dims, &mut rng);
                }
            }
            Family::Coarse => {
                let k = c.scales[0];
                init_downsampler(&mut p, &format!("s{k}.ds"), c.downsampler, k, d, &mut rng);
                for i in 0..c.layers[0] {
                    init_layer(&mut p, &layer(k, i), &dims, &mut rng);
                }
            }
        }
        Ok(Self::from_params(config, p))
    }

    /// Wraps existing parameters without re-validating them against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Self {
        Self {
            config,
            params,
            masks: Mutex::new(HashMap::new()),
        }
    }

    /// Additive masks, built once per key.
    fn masks(&self, key: String, build: impl FnOnce() -> Result<Vec<NdArray>>) -> Result<Arc<Vec<NdArray>>> {
        if let Some(m) = self.masks.lock().expect("mask cache").get(&key) {
            return Ok(m.clone());
        }
        let m = Arc::new(build()?);
        self.masks.lock().expect("mask cache").insert(key, m.clone());
        Ok(m)
    }

    fn mask(&self, key: String, build: impl FnOnce() -> AttentionMask) -> Result<Arc<Vec<NdArray>>> {
        self.masks(key, || Ok(vec![build().additive()]))
    }

    fn causal(&self, n: usize) -> Result<Arc<Vec<NdArray>>> {
        self.mask(format!("causal{n}"), || AttentionMask::causal(n))
    }

    /// Number of predictions made from a sequence of `n` tokens.
    pub fn num_predictions(&self, n: usize) -> usize {
        let c = &self.config;
        match c.family {
            Family::Coarse => (n / c.top_scale()).saturating_sub(1),
            _ => n.saturating_sub(c.first_target()),
        }
    }

    /// Forward pass over a batch of equal-length token sequences.
    pub fn forward(&self, g: &mut Graph, batch: &[Vec<usize>]) -> Result<Forward> {
        let n = batch.first().map(Vec::len).unwrap_or(0);
        if batch.is_empty() || batch.iter().any(|s| s.len() != n) {
            return Err(Error::Data("batch rows must be non-empty and of equal length".into()));
        }
        if n > self.config.context {
            return Err(Error::OutOfRange {
                what: "sequence length",
                index: n,
                limit: self.config.context + 1,
            });
        }
        if self.num_predictions(n) == 0 {
            return Err(Error::Data(format!(
                "sequence of {} tokens is too short for a {} model",
                n, self.config.family
            )));
        }
        match self.config.family {
            Family::Vanilla => self.forward_vanilla(g, batch),
            Family::Topdown => self.forward_topdown(g, batch),
            Family::Bottomup => self.forward_bottomup(g, batch),
            Family::Retina => self.forward_retina(g, batch),
            Family::Coarse => self.forward_coarse(g, batch),
        }
    }

    fn inputs(batch: &[Vec<usize>]) -> Vec<Vec<usize>> {
        batch.iter().map(|s| s[..s.len() - 1].to_vec()).collect()
    }

    fn stack(&self, g: &mut Graph, mut x: Var, k: usize, layers: usize, mask: &NdArray) -> Result<Var> {
        let dims = self.config.dims();
        for i in 0..layers {
            x = transformer_layer(
                g,
                &self.params,
                &layer(k, i),
                x,
                &[HeadGroup {
                    heads: dims.num_heads,
                    kv: x,
                    mask,
                }],
                &dims,
            )?;
        }
        Ok(x)
    }

    fn head(&self, g: &mut Graph, h: Var, first_target: usize, hidden: Vec<(usize, Var)>) -> Result<Forward> {
        let logits = lm_head(g, &self.params, h, self.config.tie_embeddings)?;
        Ok(Forward {
            logits,
            first_target,
            hidden,
        })
    }

    fn forward_vanilla(&self, g: &mut Graph, batch: &[Vec<usize>]) -> Result<Forward> {
        let inputs = Self::inputs(batch);
        let len = inputs[0].len();
        let x = embed(g, &self.params, &inputs, 0)?;
        let mask = match self.config.local_window {
            Some(w) => self.mask(format!("local{len}/{w}"), || AttentionMask::local(len, w))?,
            None => self.causal(len)?,
        };
        let h = self.stack(g, x, 1, self.config.layers[0], &mask[0])?;
        self.head(g, h, 1, vec![(1, h)])
    }

    /// Coarsest scale first. With `P = n − k_m` predictions, scale `k` runs
    /// over `ceil(P / k)` frames of the embeddings starting at token
    /// `k_m − k`; each finer scale fuses its pooled input with the upsampled
    /// output of the scale above. For `n` divisible by `k_m` the frame counts
    /// are `(n − k_m) / k` exactly.
    fn forward_topdown(&self, g: &mut Graph, batch: &[Vec<usize>]) -> Result<Forward> {
        let c = &self.config;
        let n = batch[0].len();
        let km = c.top_scale();
        let p = n - km;
        let emb = embed(g, &self.params, batch, 0)?;
        let mut hidden = Vec::new();
        let mut above: Option<Var> = None;
        for (si, (&k, &layers)) in c.scales.iter().zip(&c.layers).enumerate() {
            let frames = p.div_ceil(k);
            let start = km - k;
            let x = g.slice(emb, 1, start, start + frames * k)?;
            let mut x = downsample(g, &self.params, &format!("s{k}.ds"), x, c.downsampler, k)?;
            if let Some(u) = above {
                x = fuse(g, &self.params, &format!("s{k}.fuse"), x, u)?;
            }
            let mask = self.causal(frames)?;
            let h = self.stack(g, x, k, layers, &mask[0])?;
            hidden.push((k, h));
            if let Some(&next) = c.scales.get(si + 1) {
                let u = upsample(g, &self.params, &format!("s{k}.up"), h, k / next, c.upsample_gelu)?;
                above = Some(g.slice(u, 1, 0, p.div_ceil(next))?);
            }
        }
        let h = hidden.last().expect("at least one scale").1;
        self.head(g, h, km, hidden)
    }

    /// Fine-to-coarse cascade of stacks, an aggregation layer whose head
    /// groups read every scale, then the token-level stack.
    fn forward_bottomup(&self, g: &mut Graph, batch: &[Vec<usize>]) -> Result<Forward> {
        let c = &self.config;
        let inputs = Self::inputs(batch);
        let len = inputs[0].len();
        let asc = c.scales_ascending();
        let m = asc.len();
        let heads_desc = c.head_allocation();
        let emb = embed(g, &self.params, &inputs, 0)?;

        let mut hidden = Vec::new();
        let mut h = emb;
        for i in 1..m {
            let k = asc[i];
            let x = downsample_floor(g, &self.params, &format!("s{k}.ds"), h, c.downsampler, k / asc[i - 1])?;
            let frames = g.shape(x)[1];
            let mask = self.causal(frames)?;
            h = self.stack(g, x, k, c.layers[m - 1 - i], &mask[0])?;
            hidden.push((k, h));
        }

        let causal = self.causal(len)?;
        let cross: Vec<Arc<Vec<NdArray>>> = asc[1..]
            .iter()
            .map(|&k| self.mask(format!("cross{len}/{k}"), || AttentionMask::cross_scale(len, k)))
            .collect::<Result<_>>()?;
        let mut groups = vec![HeadGroup {
            heads: heads_desc[m - 1],
            kv: emb,
            mask: &causal[0],
        }];
        for (i, mask) in cross.iter().enumerate() {
            groups.push(HeadGroup {
                heads: heads_desc[m - 2 - i],
                kv: hidden[i].1,
                mask: &mask[0],
            });
        }
        let agg = transformer_layer(g, &self.params, "agg", emb, &groups, &c.dims())?;
        let out = self.stack(g, agg, 1, c.layers[m - 1], &causal[0])?;
        hidden.push((1, out));
        self.head(g, out, 1, hidden)
    }

    /// One stack at token resolution; in every layer each head group reads the
    /// current activations pooled to its scale under that scale's window.
    fn forward_retina(&self, g: &mut Graph, batch: &[Vec<usize>]) -> Result<Forward> {
        let c = &self.config;
        let inputs = Self::inputs(batch);
        let len = inputs[0].len();
        let asc = c.scales_ascending();
        let heads_desc = c.head_allocation();
        let bounds = c.window_boundaries()?;
        let masks = self.masks(format!("retina{len}/{bounds}/{asc:?}"), || {
            Ok(retina_masks(len, &asc, &bounds)?.iter().map(AttentionMask::additive).collect())
        })?;
        let dims = c.dims();
        let mut x = embed(g, &self.params, &inputs, 0)?;
        for l in 0..c.layers[0] {
            let mut groups = Vec::with_capacity(asc.len());
            for (i, &k) in asc.iter().enumerate() {
                let kv = downsample_floor(g, &self.params, &format!("s1.l{l}.ds{k}"), x, c.downsampler, k)?;
                groups.push(HeadGroup {
                    heads: heads_desc[asc.len() - 1 - i],
                    kv,
                    mask: &masks[i],
                });
            }
            x = transformer_layer(g, &self.params, &layer(1, l), x, &groups, &dims)?;
        }
        self.head(g, x, 1, vec![(1, x)])
    }

    /// Frame `j` of the single coarse stack predicts the tokens of frame `j + 1`.
    fn forward_coarse(&self, g: &mut Graph, batch: &[Vec<usize>]) -> Result<Forward> {
        let c = &self.config;
        let k = c.top_scale();
        let n = batch[0].len();
        let frames = n / k;
        let emb = embed(g, &self.params, batch, 0)?;
        let x = g.slice(emb, 1, 0, (frames - 1) * k)?;
        let x = downsample(g, &self.params, &format!("s{k}.ds"), x, c.downsampler, k)?;
        let mask = self.causal(frames - 1)?;
        let h = self.stack(g, x, k, c.layers[0], &mask[0])?;
        self.head(g, h, k, vec![(k, h)])
    }

    /// Eval-mode logits `[predictions, vocab]` for one sequence.
    pub fn logits(&self, tokens: &[usize]) -> Result<NdArray> {
        let mut g = Graph::eval();
        let f = self.forward(&mut g, &[tokens.to_vec()])?;
        let v = g.value(f.logits);
        let rows = v.shape()[1];
        v.clone().reshaped(&[rows, v.last_dim()])
    }

    /// Log-probability of every predicted token of `tokens`, in order, starting
    /// with token `first_target()`.
    pub fn target_log_probs(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        if self.config.family == Family::Coarse {
            return Err(Error::Config("the coarse family does not predict single tokens".into()));
        }
        let logits = self.logits(tokens)?;
        let first = self.config.first_target();
        Ok((0..logits.rows())
            .map(|r| log_prob(logits.row(r), tokens[first + r]))
            .collect())
    }

    /// Final frames `[frames, d_model]` at `scale` for one sequence.
    pub fn hidden_states_at_scale(&self, tokens: &[usize], scale: usize) -> Result<NdArray> {
        let mut g = Graph::eval();
        let f = self.forward(&mut g, &[tokens.to_vec()])?;
        let h = f.hidden_at(scale).ok_or_else(|| {
            Error::Config(format!(
                "scale {} is not exposed by this {} model (scales {:?})",
                scale,
                self.config.family,
                f.hidden.iter().map(|(k, _)| *k).collect::<Vec<_>>()
            ))
        })?;
        let v = g.value(h);
        let s = v.shape().to_vec();
        v.clone().reshaped(&[s[1], s[2]])
    }
}
