use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::WindowBoundaries;
use crate::nn::LayerDims;
use crate::scale::DownsampleMethod;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    Vanilla,
    Topdown,
    Bottomup,
    Retina,
    /// A single stack at one coarse scale trained on the next frame's bag of tokens.
    Coarse,
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "topdown" => Ok(Self::Topdown),
            "bottomup" => Ok(Self::Bottomup),
            "retina" => Ok(Self::Retina),
            "coarse" => Ok(Self::Coarse),
            other => Err(Error::Config(format!("unknown family {:?}", other))),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vanilla => "vanilla",
            Self::Topdown => "topdown",
            Self::Bottomup => "bottomup",
            Self::Retina => "retina",
            Self::Coarse => "coarse",
        })
    }
}

/// Architecture hyperparameters; the single description used to build a
/// model and to cost it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    /// Scale factors, coarsest first, ending in 1 (a single factor for `coarse`).
    pub scales: Vec<usize>,
    /// Layers per scale, aligned with `scales`. Retina takes one entry: the depth of its stack.
    pub layers: Vec<usize>,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// Maximum sequence length and size of the position table.
    pub context: usize,
    pub vocab_size: usize,
    pub downsampler: DownsampleMethod,
    /// Apply GeLU after the top-down upsampler.
    pub upsample_gelu: bool,
    /// Retina distance windows, finest scale first, e.g. `"0:8,8:32,32:128"`.
    /// Defaults to windows growing by the scale ratio up to `context`.
    pub windows: Option<String>,
    /// Heads per scale (aligned with `scales`) for the bottom-up aggregation
    /// layer and retina attention. Defaults to `num_heads / m` per coarse
    /// scale with the remainder at scale 1.
    pub head_groups: Option<Vec<usize>>,
    /// Vanilla only: attend to the previous `w` tokens (self included).
    pub local_window: Option<usize>,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: Family::Vanilla,
            scales: vec![1],
            layers: vec![2],
            d_model: 128,
            num_heads: 4,
            d_ff: 512,
            dropout: 0.1,
            context: 128,
            vocab_size: 2048,
            downsampler: DownsampleMethod::AvgPool,
            upsample_gelu: false,
            windows: None,
            head_groups: None,
            local_window: None,
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn dims(&self) -> LayerDims {
        LayerDims {
            d_model: self.d_model,
            num_heads: self.num_heads,
            d_ff: self.d_ff,
            dropout: self.dropout,
        }
    }

    /// Coarsest scale factor.
    pub fn top_scale(&self) -> usize {
        self.scales.first().copied().unwrap_or(1)
    }

    pub fn scales_ascending(&self) -> Vec<usize> {
        self.scales.iter().rev().copied().collect()
    }

    /// Total number of transformer layers (the bottom-up aggregation layer included).
    pub fn total_layers(&self) -> usize {
        let base: usize = self.layers.iter().sum();
        if self.family == Family::Bottomup {
            base + 1
        } else {
            base
        }
    }

    /// Heads per scale, aligned with `scales`.
    pub fn head_allocation(&self) -> Vec<usize> {
        if let Some(h) = &self.head_groups {
            return h.clone();
        }
        let m = self.scales.len();
        let per = self.num_heads / m;
        let mut out = vec![per; m];
        out[m - 1] = self.num_heads - per * (m - 1);
        out
    }

    /// Retina windows, finest first.
    pub fn window_boundaries(&self) -> Result<WindowBoundaries> {
        match &self.windows {
            Some(s) => s.parse(),
            None => {
                let asc = self.scales_ascending();
                let m = asc.len();
                let mut edges = vec![0usize];
                for i in 0..m {
                    let shrink: usize = asc[i + 1..].iter().zip(&asc[i..]).map(|(a, b)| a / b).product();
                    edges.push(self.context / shrink.max(1));
                }
                WindowBoundaries::new(edges.windows(2).map(|w| (w[0], w[1])).collect())
            }
        }
    }

    /// Index of the first token predicted from a sequence.
    pub fn first_target(&self) -> usize {
        match self.family {
            Family::Topdown | Family::Coarse => self.top_scale(),
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        self.dims().validate()?;
        if self.d_ff == 0 || self.context < 2 || self.vocab_size < 2 {
            return cfg("model.d_ff, model.context and model.vocab_size must be positive (context, vocab >= 2)".into());
        }
        if self.scales.is_empty() || self.scales.contains(&0) {
            return cfg(format!("model.scales {:?} must be non-empty and positive", self.scales));
        }
        for w in self.scales.windows(2) {
            if w[1] >= w[0] || w[0] % w[1] != 0 {
                return cfg(format!(
                    "model.scales {:?} must descend with integer ratios",
                    self.scales
                ));
            }
        }
        match self.family {
            Family::Coarse => {
                if self.scales.len() != 1 {
                    return cfg("model.scales must hold exactly one factor for the coarse family".into());
                }
            }
            _ => {
                if *self.scales.last().unwrap() != 1 {
                    return cfg(format!("model.scales {:?} must end in 1", self.scales));
                }
            }
        }
        if self.family == Family::Vanilla && self.scales != [1] {
            return cfg("model.scales must be [1] for the vanilla family".into());
        }
        let want_layers = if self.family == Family::Retina { 1 } else { self.scales.len() };
        if self.layers.len() != want_layers {
            return cfg(format!(
                "model.layers has {} entries, expected {}",
                self.layers.len(),
                want_layers
            ));
        }
        if self.family == Family::Topdown && self.layers.contains(&0) {
            return cfg("model.layers must be positive for every top-down scale".into());
        }
        if self.context % self.top_scale() != 0 {
            return cfg(format!(
                "model.context {} is not divisible by the coarsest scale {}",
                self.context,
                self.top_scale()
            ));
        }
        if matches!(self.family, Family::Bottomup | Family::Retina) {
            let h = self.head_allocation();
            if h.len() != self.scales.len() || h.contains(&0) || h.iter().sum::<usize>() != self.num_heads {
                return cfg(format!(
                    "model.head_groups {:?} must give every scale at least one head and sum to {}",
                    h, self.num_heads
                ));
            }
        } else if self.head_groups.is_some() {
            return cfg("model.head_groups applies to bottomup and retina only".into());
        }
        if self.family == Family::Retina {
            let b = self
                .window_boundaries()
                .map_err(|e| Error::Config(format!("model.windows: {}", e)))?;
            if b.len() != self.scales.len() {
                return cfg(format!(
                    "model.windows has {} windows for {} scales",
                    b.len(),
                    self.scales.len()
                ));
            }
            if b.extent() != self.context {
                return cfg(format!(
                    "model.windows must cover [0, {}), got {}",
                    self.context, b
                ));
            }
        } else if self.windows.is_some() {
            return cfg("model.windows applies to retina only".into());
        }
        if let Some(w) = self.local_window {
            if self.family != Family::Vanilla || w == 0 {
                return cfg("model.local_window must be positive and is vanilla only".into());
            }
        }
        Ok(())
    }
}
