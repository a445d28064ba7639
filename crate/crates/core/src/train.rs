//! Optimization: learning-rate schedule, Adam, gradient clipping, losses and
//! the resumable training loop.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::perplexity;
use crate::data::BatchSampler;
use crate::error::{Error, Result};
use crate::model::{write_checkpoint, Checkpoint, Family, Forward, Model};
use crate::nn::ParamStore;
use crate::tensor::{check_gradients, Graph, NdArray, Var};

/// Linear warmup from 0 to `peak_lr`, then cosine decay to 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(peak_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if warmup_steps == 0 || warmup_steps >= total_steps || !(peak_lr >= 0.0) {
            return Err(Error::Config(format!(
                "schedule needs 0 < warmup_steps ({}) < total_steps ({}) and peak_lr >= 0",
                warmup_steps, total_steps
            )));
        }
        Ok(Self {
            peak_lr,
            warmup_steps,
            total_steps,
        })
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step <= self.warmup_steps {
            self.peak_lr * step as f64 / self.warmup_steps as f64
        } else if step <= self.total_steps {
            let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
            self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with moments stored per parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: ParamStore::new(),
            v: ParamStore::new(),
            step: 0,
        }
    }

    /// One update. Parameters without a gradient are treated as having a zero
    /// gradient. A non-finite gradient aborts before anything is modified.
    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, NdArray>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient { param: name.clone() });
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            if !self.m.contains(name) {
                self.m.zeros(name, p.shape());
                self.v.zeros(name, p.shape());
            }
            let m = self.m.get_mut(name).expect("moment").data_mut();
            let v = self.v.get_mut(name).expect("moment").data_mut();
            let g = grads.get(name).map(NdArray::data);
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moments as one store (`m/<name>`, `v/<name>`) for checkpoints.
    pub fn state(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for (prefix, store) in [("m/", &self.m), ("v/", &self.v)] {
            for (n, a) in store.iter() {
                s.insert(format!("{prefix}{n}"), a.clone());
            }
        }
        s
    }

    pub fn from_state(config: AdamConfig, state: &ParamStore, step: u64) -> Self {
        let mut a = Self::new(config);
        for (n, arr) in state.iter() {
            if let Some(rest) = n.strip_prefix("m/") {
                a.m.insert(rest, arr.clone());
            } else if let Some(rest) = n.strip_prefix("v/") {
                a.v.insert(rest, arr.clone());
            }
        }
        a.step = step;
        a
    }
}

/// Global L2 norm of all gradients, summed in name order.
pub fn global_grad_norm(grads: &BTreeMap<String, NdArray>) -> f64 {
    grads
        .values()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, NdArray>, max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// The uniform distribution over the `k` tokens that follow each frame
/// (duplicates weighted by multiplicity).
pub fn bow_targets(tokens: &[usize], k: usize, frames: usize) -> Vec<Vec<(usize, f64)>> {
    (0..frames)
        .map(|j| {
            let mut bag: BTreeMap<usize, usize> = BTreeMap::new();
            for &t in &tokens[(j + 1) * k..(j + 2) * k] {
                *bag.entry(t).or_default() += 1;
            }
            bag.into_iter().map(|(t, c)| (t, c as f64 / k as f64)).collect()
        })
        .collect()
}

/// Cross-entropy between frame predictions `logits: [batch, frames, V]` and
/// the bag of the next frame's `k` tokens.
pub fn coarse_bow_loss(g: &mut Graph, logits: Var, batch: &[Vec<usize>], k: usize) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 3 || s[0] != batch.len() {
        return Err(Error::shape("coarse_bow_loss", format!("logits {:?}", s)));
    }
    let frames = s[1];
    let mut targets = Vec::with_capacity(s[0] * frames);
    for row in batch {
        if row.len() < (frames + 1) * k {
            return Err(Error::shape(
                "coarse_bow_loss",
                format!("{} tokens for {} frames of {}", row.len(), frames, k),
            ));
        }
        targets.extend(bow_targets(row, k, frames));
    }
    let flat = g.reshape(logits, &[s[0] * frames, s[2]])?;
    g.cross_entropy_dist(flat, &targets)
}

impl Model {
    /// Mean training loss of a forward pass: next-token cross-entropy, or the
    /// bag-of-words objective for the coarse family.
    pub fn loss(&self, g: &mut Graph, fwd: &Forward, batch: &[Vec<usize>]) -> Result<Var> {
        if self.config.family == Family::Coarse {
            return coarse_bow_loss(g, fwd.logits, batch, self.config.top_scale());
        }
        let s = g.shape(fwd.logits).to_vec();
        let targets: Vec<usize> = batch
            .iter()
            .flat_map(|row| row[fwd.first_target..fwd.first_target + s[1]].iter().copied())
            .collect();
        let flat = g.reshape(fwd.logits, &[s[0] * s[1], s[2]])?;
        g.cross_entropy(flat, &targets)
    }

    /// Finite-difference check of the loss gradient with respect to every
    /// parameter (eval mode).
    pub fn grad_check(&self, batch: &[Vec<usize>], seed: u64) -> Result<f64> {
        let names: Vec<String> = self.params.iter().map(|(n, _)| n.to_string()).collect();
        let inputs: Vec<NdArray> = self.params.iter().map(|(_, a)| a.clone()).collect();
        check_gradients(&inputs, seed, |g, vars| {
            for (n, v) in names.iter().zip(vars) {
                g.bind(n, *v);
            }
            let f = self.forward(g, batch)?;
            self.loss(g, &f, batch)
        })
    }

    /// Loss and gradients of one batch.
    pub fn loss_and_grads(&self, batch: &[Vec<usize>], dropout_seed: u64) -> Result<(f64, BTreeMap<String, NdArray>)> {
        let mut g = Graph::new(true, dropout_seed);
        let f = self.forward(&mut g, batch)?;
        let loss = self.loss(&mut g, &f, batch)?;
        g.backward(loss)?;
        let grads = g.param_grads().map(|(n, a)| (n.to_string(), a.clone())).collect();
        Ok((g.value(loss).data()[0], grads))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub adam: AdamConfig,
    /// Global gradient-norm limit; off when absent.
    pub clip_norm: Option<f64>,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    /// Validation uses at most this many leading tokens of the validation split.
    pub valid_max_tokens: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 16,
            peak_lr: 3e-4,
            warmup_steps: 200,
            adam: AdamConfig::default(),
            clip_norm: None,
            eval_every: 500,
            checkpoint_every: 1000,
            valid_max_tokens: None,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(self.peak_lr, self.warmup_steps, self.steps)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("train.clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Dropout seed of one step, independent of how training was interrupted.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ step.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub lr: f64,
    pub train_nll: f64,
    pub valid_ppl: Option<f64>,
}

/// Inputs of a training run.
#[derive(Clone, Copy, Debug)]
pub struct TrainRun<'a> {
    pub train: &'a [usize],
    pub valid: Option<&'a [usize]>,
    pub config: &'a TrainConfig,
    pub seed: u64,
    /// Stride of the sliding validation windows.
    pub eval_stride: usize,
    /// Receives `metrics.csv` and `checkpoints/`.
    pub out_dir: Option<&'a Path>,
}

/// Final state of a run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub optimizer: Adam,
    pub rows: Vec<MetricRow>,
}

/// Trains `model` in place. With `resume`, parameters, optimizer moments and
/// the step count come from the checkpoint and the batch sampler is replayed,
/// so the continuation is bitwise identical to an uninterrupted run.
pub fn train(
    model: &mut Model,
    run: TrainRun<'_>,
    resume: Option<&Checkpoint>,
    mut on_row: impl FnMut(&MetricRow),
) -> Result<TrainOutcome> {
    let cfg = run.config;
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let chunk = model.config.context;
    let mut sampler = BatchSampler::new(run.train.len(), chunk, cfg.batch_size, run.seed)?;
    let mut adam = Adam::new(cfg.adam);
    if let Some(ck) = resume {
        if ck.config != model.config {
            return Err(Error::Checkpoint("checkpoint was written for a different model config".into()));
        }
        model.params = ck.params.clone();
        adam = Adam::from_state(cfg.adam, &ck.optimizer, ck.step);
        sampler.skip(ck.step);
    }
    let mut writer = match run.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.csv");
            let fresh = resume.is_none() || !path.exists();
            let file = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some(csv::WriterBuilder::new().has_headers(fresh).from_writer(file))
        }
        None => None,
    };
    let valid = run.valid.map(|v| match cfg.valid_max_tokens {
        Some(n) => &v[..n.min(v.len())],
        None => v,
    });

    let mut rows = Vec::new();
    for step in adam.step + 1..=cfg.steps {
        let batch = sampler.next_batch(run.train);
        let (loss, mut grads) = model.loss_and_grads(&batch, step_seed(run.seed, step))?;
        if let Some(c) = cfg.clip_norm {
            clip_grad_norm(&mut grads, c);
        }
        let lr = schedule.lr_at(step);
        adam.update(&mut model.params, &grads, lr)?;

        let eval_now = cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps);
        let valid_ppl = match valid {
            Some(v) if eval_now => Some(perplexity(model, v, eval_stride(model, run.eval_stride))?.ppl),
            _ => None,
        };
        let row = MetricRow {
            step,
            lr,
            train_nll: loss,
            valid_ppl,
        };
        if let Some(w) = writer.as_mut() {
            w.serialize(&row)?;
            w.flush().map_err(|e| Error::io("metrics.csv", e))?;
        }
        on_row(&row);
        rows.push(row);

        let ck_now = cfg.checkpoint_every > 0 && (step % cfg.checkpoint_every == 0 || step == cfg.steps);
        if let (Some(dir), true) = (run.out_dir, ck_now) {
            let ck = Checkpoint {
                config: model.config.clone(),
                params: model.params.clone(),
                optimizer: adam.state(),
                step,
            };
            let cdir = dir.join("checkpoints");
            write_checkpoint(&cdir.join(format!("step_{step:08}.mslm")), &ck)?;
            write_checkpoint(&cdir.join("last.mslm"), &ck)?;
        }
    }
    Ok(TrainOutcome {
        optimizer: adam,
        rows,
    })
}

fn eval_stride(model: &Model, stride: usize) -> usize {
    stride.min(model.config.context - model.config.first_target()).max(1)
}
