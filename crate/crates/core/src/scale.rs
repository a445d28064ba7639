//! Causal downsampling, upsampling and the fusion function.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleMethod {
    #[default]
    AvgPool,
    MaxPool,
    CausalConv,
}

impl FromStr for DownsampleMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg_pool" => Ok(Self::AvgPool),
            "max_pool" => Ok(Self::MaxPool),
            "causal_conv" => Ok(Self::CausalConv),
            other => Err(Error::Config(format!("unknown downsampler {:?}", other))),
        }
    }
}

impl fmt::Display for DownsampleMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AvgPool => "avg_pool",
            Self::MaxPool => "max_pool",
            Self::CausalConv => "causal_conv",
        })
    }
}

/// Registers the weights a downsampler needs, if any. The convolution kernel
/// is exactly one frame wide.
pub fn init_downsampler<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    method: DownsampleMethod,
    k: usize,
    d: usize,
    rng: &mut R,
) {
    if method == DownsampleMethod::CausalConv && k > 1 {
        store.normal(format!("{prefix}.w"), &[k * d, d], rng);
        store.zeros(format!("{prefix}.b"), &[d]);
    }
}

/// `x: [b, L, d] -> [b, L / k, d]`; frame `j` aggregates positions
/// `j·k ..= (j+1)·k − 1`. Identity for `k == 1`. `L` must be divisible by `k`.
pub fn downsample(
    g: &mut Graph,
    params: &ParamStore,
    prefix: &str,
    x: Var,
    method: DownsampleMethod,
    k: usize,
) -> Result<Var> {
    let s = g.shape(x);
    if k == 0 || s.len() != 3 || s[1] % k != 0 {
        return Err(Error::shape("downsample", format!("{:?} by {}", s, k)));
    }
    if k == 1 {
        return Ok(x);
    }
    match method {
        DownsampleMethod::AvgPool => g.mean_pool_1d(x, k),
        DownsampleMethod::MaxPool => g.max_pool_1d(x, k),
        DownsampleMethod::CausalConv => {
            let w = params.var(g, &format!("{prefix}.w"))?;
            let b = params.var(g, &format!("{prefix}.b"))?;
            g.causal_conv_1d(x, w, b, k)
        }
    }
}

/// Downsamples the longest prefix of `x` whose length is a multiple of `k`.
pub fn downsample_floor(
    g: &mut Graph,
    params: &ParamStore,
    prefix: &str,
    x: Var,
    method: DownsampleMethod,
    k: usize,
) -> Result<Var> {
    let len = g.shape(x)[1];
    let keep = len / k.max(1) * k;
    let x = if keep == len { x } else { g.slice(x, 1, 0, keep)? };
    downsample(g, params, prefix, x, method, k)
}

pub fn init_upsampler<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, r: usize, d: usize, rng: &mut R) {
    store.normal(format!("{prefix}.w"), &[d, r * d], rng);
    store.zeros(format!("{prefix}.b"), &[d]);
}

/// Transpose convolution with kernel and stride `r`: `[b, F, d] -> [b, F·r, d]`,
/// output `p` a linear function of frame `p / r` only. With `gelu` the result
/// is passed through GeLU.
pub fn upsample(g: &mut Graph, params: &ParamStore, prefix: &str, h: Var, r: usize, gelu: bool) -> Result<Var> {
    let w = params.var(g, &format!("{prefix}.w"))?;
    let b = params.var(g, &format!("{prefix}.b"))?;
    let y = g.transpose_conv_1d(h, w, b, r)?;
    if gelu {
        g.gelu(y)
    } else {
        Ok(y)
    }
}

pub fn init_fuse<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) {
    store.normal(format!("{prefix}.w"), &[2 * d, d], rng);
    store.zeros(format!("{prefix}.b"), &[d]);
}

/// `gelu(W·[a; b] + bias)` position by position.
pub fn fuse(g: &mut Graph, params: &ParamStore, prefix: &str, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(
            "fuse",
            format!("{:?} vs {:?}", g.shape(a), g.shape(b)),
        ));
    }
    let w = params.var(g, &format!("{prefix}.w"))?;
    let bias = params.var(g, &format!("{prefix}.b"))?;
    let c = g.concat_last(&[a, b])?;
    let y = g.linear(c, w, Some(bias))?;
    g.gelu(y)
}
