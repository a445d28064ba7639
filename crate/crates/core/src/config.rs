//! The run configuration: one JSON document binding model, recipe, data and
//! analysis options. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::SampleConfig;
use crate::cost::Profile;
use crate::data::TokenizerConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub tokenizer: TokenizerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Sliding-window stride; windows are `model.context` tokens long.
    pub stride: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { stride: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Shuffled prefix length of the perturbation study.
    pub perturb_length: usize,
    pub perturb_windows: usize,
    pub frequency_bins: usize,
    pub sample: SampleConfig,
    /// Prompts drawn from the test split for sample metrics.
    pub sample_prompts: usize,
    pub prompt_length: usize,
    /// Completions per prompt; they serve as BLEU references.
    pub completions: usize,
    pub ngram_window: usize,
    pub nn_scale: usize,
    pub nn_chunk: usize,
    pub nn_query: usize,
    pub nn_top: usize,
    pub cost_batch: usize,
    pub cost_profile: Profile,
    /// Sequence lengths of the modeled time curve.
    pub cost_grid: Vec<usize>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            perturb_length: 64,
            perturb_windows: 200,
            frequency_bins: 5,
            sample: SampleConfig {
                max_new: 64,
                ..SampleConfig::default()
            },
            sample_prompts: 10,
            prompt_length: 64,
            completions: 3,
            ngram_window: 256,
            nn_scale: 1,
            nn_chunk: 32,
            nn_query: 0,
            nn_top: 10,
            cost_batch: 8,
            cost_profile: Profile::default(),
            cost_grid: vec![512, 1024, 1536, 2048, 2560, 3072, 3584, 4096],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub analysis: AnalysisConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            analysis: AnalysisConfig::default(),
            seed: 1,
        }
    }
}

fn config_error(e: serde_json::Error) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(config_error)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Sorted keys and no insignificant whitespace, so equal configs have
    /// equal bytes.
    pub fn canonical_json(&self) -> Result<String> {
        crate::model::canonical_json(self)
    }

    /// Applies `key.path=value` overrides. A value is read as JSON when it
    /// parses as JSON, as a list when it contains commas, and as a string
    /// otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {:?} is not key=value", o)))?;
            if slot(&mut doc, key).is_none() {
                return Err(Error::Config(format!("unknown config key {:?}", key)));
            }
            let mut last = None;
            for candidate in candidates(raw) {
                let mut trial = doc.clone();
                *slot(&mut trial, key).expect("key exists") = candidate;
                match serde_json::from_value::<RunConfig>(trial.clone()) {
                    Ok(_) => {
                        doc = trial;
                        last = None;
                        break;
                    }
                    Err(e) => last = Some(e),
                }
            }
            if let Some(e) = last {
                return Err(Error::Config(format!("{key}: {e}")));
            }
        }
        serde_json::from_value(doc).map_err(config_error)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let first = self.model.first_target();
        if self.eval.stride == 0 || self.eval.stride + first > self.model.context {
            return Err(Error::Config(format!(
                "eval.stride must be in 1..={} for model.context {}",
                self.model.context - first,
                self.model.context
            )));
        }
        Ok(())
    }

    /// The corpus path stored under `data.<split>`, required to exist.
    pub fn data_path(&self, split: &str) -> Result<&Path> {
        let p = match split {
            "train" => &self.data.train,
            "valid" => &self.data.valid,
            "test" => &self.data.test,
            other => return Err(Error::Config(format!("unknown split {:?}", other))),
        };
        let p = p
            .as_deref()
            .ok_or_else(|| Error::Config(format!("data.{split} is not set")))?;
        if !p.is_file() {
            return Err(Error::Config(format!("data.{split}: {} is not a readable file", p.display())));
        }
        Ok(p)
    }
}

fn slot<'a>(doc: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    key.split('.').try_fold(doc, |v, part| match v {
        Value::Object(m) => m.get_mut(part),
        _ => None,
    })
}

/// Readings of an override value, tried in order: JSON, a comma list, a
/// one-element list, a plain string.
fn candidates(raw: &str) -> Vec<Value> {
    let item = |p: &str| serde_json::from_str(p.trim()).unwrap_or_else(|_| Value::String(p.trim().to_string()));
    let mut out = Vec::new();
    if let Ok(v) = serde_json::from_str::<Value>(raw) {
        out.push(v);
    }
    out.push(Value::Array(raw.split(',').map(item).collect()));
    out.push(Value::String(raw.to_string()));
    out
}

/// Every leaf key of the default config with its default value.
pub fn flatten_defaults() -> Vec<(String, String)> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
        match v {
            Value::Object(m) => {
                for (k, x) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, x, out);
                }
            }
            other => out.push((prefix.to_string(), other.to_string())),
        }
    }
    let mut out = Vec::new();
    walk("", &serde_json::to_value(RunConfig::default()).expect("default config serializes"), &mut out);
    out
}

const DESCRIPTIONS: &[(&str, &str)] = &[
    ("analysis.completions", "completions generated per prompt; used as BLEU references"),
    ("analysis.cost_batch", "batch size assumed by the memory model"),
    ("analysis.cost_grid", "sequence lengths of the modeled time curve"),
    ("analysis.cost_profile.bytes", "bytes per stored element"),
    ("analysis.cost_profile.c_ff", "stored [L, d_ff] tensors per feedforward"),
    ("analysis.cost_profile.c_ln", "stored [L, H] tensors for layer norms, dropout and residuals"),
    ("analysis.cost_profile.c_out", "stored [L, H] tensors at the feedforward output"),
    ("analysis.cost_profile.optimizer_state", "count two Adam moments per parameter"),
    ("analysis.frequency_bins", "bins of equal training mass for NLL by frequency"),
    ("analysis.ngram_window", "look-back window of the n-gram repeat metric"),
    ("analysis.nn_chunk", "chunk length for nearest neighbors"),
    ("analysis.nn_query", "index of the query chunk"),
    ("analysis.nn_scale", "scale whose representations are compared"),
    ("analysis.nn_top", "neighbors reported"),
    ("analysis.perturb_length", "shuffled prefix length C; windows are 2C tokens"),
    ("analysis.perturb_windows", "maximum number of perturbation windows"),
    ("analysis.prompt_length", "prompt tokens per sample"),
    ("analysis.sample.max_new", "tokens generated per completion"),
    ("analysis.sample.suppress_unk", "never sample the unknown token"),
    ("analysis.sample.temperature", "softmax temperature"),
    ("analysis.sample.top_k", "candidates kept before sampling"),
    ("analysis.sample_prompts", "prompts drawn from the test split"),
    ("data.test", "test corpus (UTF-8 text)"),
    ("data.tokenizer.lowercase", "lowercase text before tokenizing"),
    ("data.tokenizer.split_punctuation", "emit punctuation as separate tokens"),
    ("data.train", "training corpus (UTF-8 text); also builds the vocabulary"),
    ("data.valid", "validation corpus (UTF-8 text)"),
    ("eval.stride", "sliding-window stride; windows are model.context long"),
    ("model.context", "sequence length T and position-table size"),
    ("model.d_ff", "feedforward width"),
    ("model.d_model", "model width H"),
    ("model.downsampler", "avg_pool, max_pool or causal_conv"),
    ("model.dropout", "dropout on attention weights and residual branches"),
    ("model.family", "vanilla, topdown, bottomup, retina or coarse"),
    ("model.head_groups", "heads per scale for bottom-up aggregation and retina attention"),
    ("model.layers", "layers per scale (retina: one entry, the stack depth)"),
    ("model.local_window", "vanilla only: attend to the previous w tokens"),
    ("model.num_heads", "attention heads"),
    ("model.scales", "scale factors, coarsest first, ending in 1"),
    ("model.tie_embeddings", "share the token embedding with the output layer"),
    ("model.upsample_gelu", "apply GeLU after the top-down upsampler"),
    ("model.vocab_size", "vocabulary size including <unk> and <bos>"),
    ("model.windows", "retina distance windows, finest scale first, e.g. 0:8,8:128"),
    ("seed", "seeds initialization, batch sampling, dropout and analyses"),
    ("train.adam.beta1", "Adam first-moment decay"),
    ("train.adam.beta2", "Adam second-moment decay"),
    ("train.adam.eps", "Adam denominator epsilon"),
    ("train.batch_size", "sequences per step"),
    ("train.checkpoint_every", "steps between checkpoints (0: only the last)"),
    ("train.clip_norm", "global gradient-norm limit (null: off)"),
    ("train.eval_every", "steps between validation runs (0: never)"),
    ("train.peak_lr", "learning rate after warmup"),
    ("train.steps", "total optimizer steps"),
    ("train.valid_max_tokens", "validation prefix length used during training (null: all)"),
    ("train.warmup_steps", "linear warmup steps before cosine decay"),
];

/// Markdown table of every config key, its default and its meaning.
pub fn defaults_reference() -> String {
    let mut s = String::from("# Configuration reference\n\nGenerated by `mslm defaults`. Override any key on the command line as `key.path=value`.\n\n| key | default | meaning |\n|---|---|---|\n");
    for (key, default) in flatten_defaults() {
        let desc = DESCRIPTIONS
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, d)| *d)
            .unwrap_or("");
        s.push_str(&format!("| `{key}` | `{default}` | {desc} |\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Family;

    #[test]
    fn canonical_round_trip() {
        let c = RunConfig::default();
        let text = c.canonical_json().unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
        assert_eq!(RunConfig::from_json(&text).unwrap().canonical_json().unwrap(), text);
        assert!(RunConfig::from_json("{}").unwrap() == c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_json(r#"{"model": {"layerz": [1]}}"#).unwrap_err();
        assert!(e.to_string().contains("layerz"), "{e}");
        assert!(RunConfig::default().with_overrides(&["model.nope=1"]).is_err());
        assert!(RunConfig::default().with_overrides(&["model.layers"]).is_err());
    }

    #[test]
    fn dotted_overrides() {
        let c = RunConfig::default()
            .with_overrides(&[
                "model.family=topdown",
                "model.scales=16,4,1",
                "model.layers=1,1,2",
                "model.windows=0:8,8:128",
                "train.clip_norm=1.0",
                "data.train=corpus.txt",
                "seed=7",
                "analysis.cost_grid=512",
            ])
            .unwrap();
        assert_eq!(c.model.family, Family::Topdown);
        assert_eq!(c.model.scales, vec![16, 4, 1]);
        assert_eq!(c.model.layers, vec![1, 1, 2]);
        assert_eq!(c.model.windows.as_deref(), Some("0:8,8:128"));
        assert_eq!(c.train.clip_norm, Some(1.0));
        assert_eq!(c.data.train, Some(PathBuf::from("corpus.txt")));
        assert_eq!(c.seed, 7);
        assert_eq!(c.analysis.cost_grid, vec![512]);
        let r = c.with_overrides(&["model.family=retina", "model.layers=2", "model.scales=4,1"]).unwrap();
        r.validate().unwrap();
    }

    #[test]
    fn missing_corpus_names_the_key() {
        let e = RunConfig::default().data_path("train").unwrap_err();
        assert!(e.to_string().contains("data.train"));
        let c = RunConfig::default().with_overrides(&["data.valid=/no/such/file"]).unwrap();
        assert!(c.data_path("valid").unwrap_err().to_string().contains("data.valid"));
    }

    #[test]
    fn every_key_is_documented() {
        let keys: Vec<String> = flatten_defaults().into_iter().map(|(k, _)| k).collect();
        for k in &keys {
            assert!(DESCRIPTIONS.iter().any(|(d, _)| d == k), "undocumented key {k}");
        }
        for (d, _) in DESCRIPTIONS {
            assert!(keys.iter().any(|k| k == d), "stale description {d}");
        }
    }

    #[test]
    fn checked_in_reference_is_current() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/config-reference.md");
        let on_disk = std::fs::read_to_string(&path).unwrap_or_default();
        assert_eq!(on_disk, defaults_reference(), "regenerate with `mslm defaults > docs/config-reference.md`");
    }

    #[test]
    fn bad_stride_is_a_config_error() {
        let c = RunConfig::default().with_overrides(&["eval.stride=0"]).unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
