//! Word-level vocabulary, batch sampling and sliding-window evaluation layout.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK: usize = 0;
pub const BOS: usize = 1;
const RESERVED: [&str; 2] = ["<unk>", "<bos>"];

/// How raw text is cut into word tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub lowercase: bool,
    /// Emit punctuation characters as tokens of their own instead of leaving
    /// them attached to the neighbouring word.
    pub split_punctuation: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            lowercase: false,
            split_punctuation: true,
        }
    }
}

/// Whitespace tokenization, optionally splitting punctuation off words.
/// Apostrophes between letters stay inside the word.
pub fn tokenize(text: &str, cfg: &TokenizerConfig) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chunk = if cfg.lowercase {
            chunk.to_lowercase()
        } else {
            chunk.to_string()
        };
        if !cfg.split_punctuation {
            out.push(chunk);
            continue;
        }
        let chars: Vec<char> = chunk.chars().collect();
        let mut word = String::new();
        for (i, &c) in chars.iter().enumerate() {
            let inner_apostrophe = c == '\''
                && i > 0
                && chars[i - 1].is_alphanumeric()
                && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
            if c.is_alphanumeric() || inner_apostrophe {
                word.push(c);
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Number of whitespace-separated words, the unit of word-level perplexity.
pub fn count_words(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Frequency-ordered word vocabulary with reserved `UNK = 0` and `BOS = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    counts: Vec<u64>,
}

impl Vocab {
    /// Keeps the `max_size − 2` most frequent tokens, ties broken
    /// lexicographically; every other token maps to `UNK`, whose count is the
    /// total of the dropped tokens.
    pub fn build<S: AsRef<str>>(tokens: &[S], max_size: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        if max_size < RESERVED.len() {
            return Err(Error::Config(format!("vocabulary size {} leaves no room for reserved ids", max_size)));
        }
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for t in tokens {
            *freq.entry(t.as_ref()).or_default() += 1;
        }
        let mut ranked: Vec<(&str, u64)> = freq
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let keep = (max_size - RESERVED.len()).min(ranked.len());
        let dropped: u64 = ranked[keep..].iter().map(|(_, c)| c).sum();
        let mut out = Self {
            tokens: RESERVED.iter().map(|s| s.to_string()).collect(),
            index: HashMap::new(),
            counts: vec![dropped, 0],
        };
        for (t, c) in &ranked[..keep] {
            out.tokens.push(t.to_string());
            out.counts.push(*c);
        }
        out.rebuild_index();
        Ok(out)
    }

    fn rebuild_index(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    /// Token text; ids outside the vocabulary decode as `<unk>`.
    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    /// Training-corpus frequency of each id.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    /// `{token: id}`.
    pub fn to_json(&self) -> Result<String> {
        let map: std::collections::BTreeMap<&str, usize> =
            self.tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    /// Inverse of [`Vocab::to_json`]; counts are not stored and read back as zero.
    pub fn from_json(s: &str) -> Result<Self> {
        let map: HashMap<String, usize> = serde_json::from_str(s)?;
        let mut tokens = vec![String::new(); map.len()];
        for (t, i) in map {
            let slot = tokens
                .get_mut(i)
                .ok_or_else(|| Error::Data(format!("vocabulary id {} is not dense", i)))?;
            *slot = t;
        }
        if tokens.len() < RESERVED.len() || tokens[UNK] != RESERVED[UNK] || tokens[BOS] != RESERVED[BOS] {
            return Err(Error::Data("vocabulary lacks the reserved ids".into()));
        }
        let mut v = Self {
            counts: vec![0; tokens.len()],
            tokens,
            index: HashMap::new(),
        };
        v.rebuild_index();
        Ok(v)
    }
}

/// Uniformly placed training chunks drawn from a seeded generator.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    rng: Xoshiro256PlusPlus,
    stream_len: usize,
    chunk: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(stream_len: usize, chunk: usize, batch: usize, seed: u64) -> Result<Self> {
        if chunk == 0 || stream_len < chunk {
            return Err(Error::Data(format!(
                "token stream of length {} is shorter than the chunk length {}",
                stream_len, chunk
            )));
        }
        Ok(Self {
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
            stream_len,
            chunk,
            batch,
        })
    }

    /// Start offsets of the next batch, each in `[0, len − chunk]`.
    pub fn next_starts(&mut self) -> Vec<usize> {
        (0..self.batch)
            .map(|_| self.rng.random_range(0..=self.stream_len - self.chunk))
            .collect()
    }

    pub fn next_batch(&mut self, tokens: &[usize]) -> Vec<Vec<usize>> {
        debug_assert_eq!(tokens.len(), self.stream_len);
        self.next_starts()
            .into_iter()
            .map(|s| tokens[s..s + self.chunk].to_vec())
            .collect()
    }

    /// Advances past `batches` batches without materializing them.
    pub fn skip(&mut self, batches: u64) {
        for _ in 0..batches {
            self.next_starts();
        }
    }
}

/// The deterministic batch sequence for `seed`.
pub fn sample_training_batches(
    tokens: &[usize],
    chunk: usize,
    batch: usize,
    seed: u64,
) -> Result<impl Iterator<Item = Vec<Vec<usize>>> + '_> {
    let mut s = BatchSampler::new(tokens.len(), chunk, batch, seed)?;
    Ok(std::iter::repeat_with(move || s.next_batch(tokens)))
}

/// One evaluation window over `[start, end)` that scores the targets at
/// stream positions `[score_from, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalWindow {
    pub start: usize,
    pub end: usize,
    pub score_from: usize,
}

impl EvalWindow {
    pub fn scored(&self) -> usize {
        self.end - self.score_from
    }
}

/// Overlapping windows of length `context` advancing by `stride`. The first
/// window scores every position from `first_target` on; each later window
/// scores its final `stride` positions; a final window aligned to the end of
/// the stream scores whatever remains. Every position in `first_target..len`
/// is scored exactly once, always with at least `first_target` tokens of
/// context inside its window.
pub fn sliding_eval(len: usize, context: usize, stride: usize, first_target: usize) -> Result<Vec<EvalWindow>> {
    if stride == 0 || first_target == 0 || stride + first_target > context {
        return Err(Error::Config(format!(
            "eval stride {} must be in 1..={} for context {} (the model needs {} context tokens)",
            stride,
            context.saturating_sub(first_target),
            context,
            first_target
        )));
    }
    if len <= first_target {
        return Ok(Vec::new());
    }
    let mut out = vec![EvalWindow {
        start: 0,
        end: len.min(context),
        score_from: first_target,
    }];
    let mut done = out[0].end;
    while done < len {
        let end = (done + stride).min(len);
        out.push(EvalWindow {
            start: end.saturating_sub(context),
            end,
            score_from: done,
        });
        done = end;
    }
    Ok(out)
}

/// `exp(total_nll / num_words)`.
pub fn word_level_renormalize(total_nll_nats: f64, num_words: usize) -> Result<f64> {
    if num_words == 0 {
        return Err(Error::Data("word-level perplexity needs at least one word".into()));
    }
    Ok((total_nll_nats / num_words as f64).exp())
}
