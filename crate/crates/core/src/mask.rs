//! Attention masks over finest-scale queries and (possibly coarser) keys.
//!
//! A key at scale `k` is a frame covering tokens `[j·k, (j+1)·k − 1]`; its
//! timestamp is the last token it covers, `(j+1)·k − 1`. A query at token
//! position `t` may only see frames whose timestamp is `<= t`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::NdArray;

/// Boolean reachability from query positions to key frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    query_len: usize,
    key_len: usize,
    key_scale: usize,
    allowed: Vec<bool>,
}

/// Timestamp (last covered token) of frame `j` at scale `k`.
pub fn timestamp(j: usize, k: usize) -> usize {
    (j + 1) * k - 1
}

impl AttentionMask {
    pub fn from_fn(
        query_len: usize,
        key_len: usize,
        key_scale: usize,
        f: impl Fn(usize, usize) -> bool,
    ) -> Self {
        let mut allowed = Vec::with_capacity(query_len * key_len);
        for t in 0..query_len {
            for j in 0..key_len {
                allowed.push(f(t, j));
            }
        }
        Self {
            query_len,
            key_len,
            key_scale,
            allowed,
        }
    }

    /// `allowed[t][j] ⇔ j <= t`.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, 1, |t, j| j <= t)
    }

    /// `allowed[t][j] ⇔ 0 <= t − j < w`.
    pub fn local(n: usize, w: usize) -> Self {
        Self::from_fn(n, n, 1, |t, j| j <= t && t - j < w)
    }

    /// Token queries over the `floor(n / k)` complete frames at scale `k`:
    /// `allowed[t][j] ⇔ (j+1)·k − 1 <= t`. Early rows may be empty.
    pub fn cross_scale(n: usize, k: usize) -> Self {
        Self::from_fn(n, n / k.max(1), k, |t, j| timestamp(j, k) <= t)
    }

    /// Frame-level causal mask for a stack running entirely at one scale.
    pub fn frame_causal(frames: usize, k: usize) -> Self {
        let mut m = Self::causal(frames);
        m.key_scale = k;
        m
    }

    pub fn query_len(&self) -> usize {
        self.query_len
    }

    pub fn key_len(&self) -> usize {
        self.key_len
    }

    pub fn key_scale(&self) -> usize {
        self.key_scale
    }

    pub fn allowed(&self, t: usize, j: usize) -> bool {
        self.allowed[t * self.key_len + j]
    }

    pub fn row(&self, t: usize) -> &[bool] {
        &self.allowed[t * self.key_len..(t + 1) * self.key_len]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// `0` where allowed, `-inf` elsewhere; shape `[query_len, key_len]`.
    pub fn additive(&self) -> NdArray {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        NdArray::new(vec![self.query_len, self.key_len], data).expect("mask dims")
    }

    /// One line per query, `#` for allowed and `.` for masked.
    pub fn render_ascii(&self) -> String {
        let mut s = String::with_capacity(self.query_len * (self.key_len + 1));
        for t in 0..self.query_len {
            for &a in self.row(t) {
                s.push(if a { '#' } else { '.' });
            }
            s.push('\n');
        }
        s
    }
}

/// True iff every allowed entry points at a frame whose timestamp is `<= t`
/// when frames are read at scale `k`.
pub fn verify_mask_causality(mask: &AttentionMask, k: usize) -> bool {
    (0..mask.query_len).all(|t| (0..mask.key_len).all(|j| !mask.allowed(t, j) || timestamp(j, k) <= t))
}

/// Per-scale distance windows `[lo, hi)` in tokens, finest scale first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowBoundaries {
    windows: Vec<(usize, usize)>,
}

impl WindowBoundaries {
    /// Windows must start at 0, be non-empty, and tile without gaps or overlap.
    pub fn new(windows: Vec<(usize, usize)>) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::Mask("no windows".into()));
        }
        if windows[0].0 != 0 {
            return Err(Error::Mask(format!(
                "finest window must start at distance 0, got {}",
                windows[0].0
            )));
        }
        for (i, &(lo, hi)) in windows.iter().enumerate() {
            if lo >= hi {
                return Err(Error::Mask(format!("empty window {}:{}", lo, hi)));
            }
            if let Some(&(next_lo, _)) = windows.get(i + 1) {
                if next_lo < hi {
                    return Err(Error::Mask(format!(
                        "windows {}:{} and {}:{} overlap",
                        lo,
                        hi,
                        next_lo,
                        windows[i + 1].1
                    )));
                }
                if next_lo > hi {
                    return Err(Error::Mask(format!(
                        "gap between windows {}:{} and {}:{}",
                        lo,
                        hi,
                        next_lo,
                        windows[i + 1].1
                    )));
                }
            }
        }
        Ok(Self { windows })
    }

    /// A single window `[0, n)`.
    pub fn full(n: usize) -> Self {
        Self {
            windows: vec![(0, n)],
        }
    }

    pub fn windows(&self) -> &[(usize, usize)] {
        &self.windows
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Upper end of the coarsest window.
    pub fn extent(&self) -> usize {
        self.windows.last().map(|w| w.1).unwrap_or(0)
    }
}

impl FromStr for WindowBoundaries {
    type Err = Error;

    /// Parses `"0:8,8:256,256:512"`.
    fn from_str(s: &str) -> Result<Self> {
        let mut windows = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (lo, hi) = part
                .split_once(':')
                .ok_or_else(|| Error::Mask(format!("window {:?} is not lo:hi", part)))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Mask(format!("bad window bound {:?}", v)))
            };
            windows.push((parse(lo)?, parse(hi)?));
        }
        Self::new(windows)
    }
}

impl fmt::Display for WindowBoundaries {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.windows.iter().map(|(a, b)| format!("{}:{}", a, b)).collect();
        f.write_str(&parts.join(","))
    }
}

/// One mask per scale (ascending `scales`, finest first) for `n` token queries.
///
/// At scale `k` over `floor(n / k)` frames:
/// `allowed[t][j] ⇔ timestamp(j) <= t ∧ lo <= t − timestamp(j) < hi`.
/// A frame straddling a window edge is kept or dropped by its timestamp alone.
pub fn retina_masks(
    n: usize,
    scales: &[usize],
    boundaries: &WindowBoundaries,
) -> Result<Vec<AttentionMask>> {
    if scales.len() != boundaries.len() {
        return Err(Error::Mask(format!(
            "{} scales but {} windows",
            scales.len(),
            boundaries.len()
        )));
    }
    if scales.first() != Some(&1) || scales.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Mask(format!(
            "scales {:?} must ascend from 1",
            scales
        )));
    }
    Ok(scales
        .iter()
        .zip(boundaries.windows())
        .map(|(&k, &(lo, hi))| {
            AttentionMask::from_fn(n, n / k, k, |t, j| {
                let ts = timestamp(j, k);
                ts <= t && (lo..hi).contains(&(t - ts))
            })
        })
        .collect())
}
