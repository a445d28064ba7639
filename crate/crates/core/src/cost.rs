//! Analytical activation-memory and attention-time model for layers and whole
//! models at each scale.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::model::{Family, ModelConfig};
use crate::nn::{init_layer, transformer_layer, HeadGroup, LayerDims, ParamStore};
use crate::tensor::{Graph, NdArray};

/// Which activations are counted, as multiples of the basic tensor sizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Profile {
    /// Stored `[L, d_ff]` tensors per feedforward (GeLU input and output).
    pub c_ff: f64,
    /// Stored `[L, H]` tensors at the feedforward output.
    pub c_out: f64,
    /// Stored `[L, H]` tensors for layer norms, dropout masks and residuals.
    pub c_ln: f64,
    pub bytes: f64,
    /// Count two Adam moments per parameter.
    pub optimizer_state: bool,
}

impl Default for Profile {
    fn default() -> Self {
        Self {
            c_ff: 2.0,
            c_out: 2.0,
            c_ln: 4.0,
            bytes: 4.0,
            optimizer_state: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostParams {
    pub batch: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub num_heads: usize,
    pub scale: usize,
    pub profile: Profile,
}

impl CostParams {
    /// Positions per sequence at this scale.
    pub fn len(&self) -> f64 {
        self.seq_len as f64 / self.scale as f64
    }

    pub fn at_scale(&self, k: usize) -> Self {
        Self { scale: k, ..*self }
    }
}

/// Bytes of stored activations in one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub qkv_proj: f64,
    pub qk_scores: f64,
    pub attn_weighted_values: f64,
    pub fc: f64,
    pub ln_drop_residual: f64,
    pub total: f64,
}

impl LayerCost {
    fn finish(mut self) -> Self {
        self.total = self.qkv_proj + self.qk_scores + self.attn_weighted_values + self.fc + self.ln_drop_residual;
        self
    }

    fn scaled(&self, n: f64) -> Self {
        LayerCost {
            qkv_proj: self.qkv_proj * n,
            qk_scores: self.qk_scores * n,
            attn_weighted_values: self.attn_weighted_values * n,
            fc: self.fc * n,
            ln_drop_residual: self.ln_drop_residual * n,
            total: 0.0,
        }
        .finish()
    }
}

/// Stored activations of one transformer layer at `p.scale`.
pub fn layer_memory(p: &CostParams) -> LayerCost {
    let (b, l, h) = (p.batch as f64, p.len(), p.d_model as f64);
    let pr = &p.profile;
    LayerCost {
        qkv_proj: 3.0 * b * l * h * pr.bytes,
        qk_scores: b * p.num_heads as f64 * l * l * pr.bytes,
        // Weighted values plus the output projection.
        attn_weighted_values: 2.0 * b * l * h * pr.bytes,
        fc: b * l * (p.d_ff as f64 * pr.c_ff + h * pr.c_out) * pr.bytes,
        ln_drop_residual: pr.c_ln * b * l * h * pr.bytes,
        total: 0.0,
    }
    .finish()
}

/// A retina layer: scale-1 queries, with each head group's scores over the
/// keys of its own scale.
fn retina_layer_memory(p: &CostParams, groups: &[(usize, usize)]) -> LayerCost {
    let mut c = layer_memory(&p.at_scale(1));
    let (b, l) = (p.batch as f64, p.seq_len as f64);
    c.qk_scores = groups
        .iter()
        .map(|&(k, heads)| b * heads as f64 * l * (l / k as f64) * p.profile.bytes)
        .sum();
    c.finish()
}

/// Number of trainable scalars of a model, counted from the architecture.
pub fn param_count(cfg: &ModelConfig) -> u64 {
    let (h, f, v) = (cfg.d_model as u64, cfg.d_ff as u64, cfg.vocab_size as u64);
    let layer = 4 * (h * h + h) + (h * f + f) + (f * h + h) + 4 * h;
    let mut n = v * h + cfg.context as u64 * h;
    if !cfg.tie_embeddings {
        n += h * v;
    }
    n += v;
    n += cfg.total_layers() as u64 * layer;
    let conv = |k: usize| {
        if k > 1 && cfg.downsampler == crate::scale::DownsampleMethod::CausalConv {
            k as u64 * h * h + h
        } else {
            0
        }
    };
    let scales = &cfg.scales;
    match cfg.family {
        Family::Topdown => {
            for (i, &k) in scales.iter().enumerate() {
                n += conv(k);
                if i + 1 < scales.len() {
                    let r = (k / scales[i + 1]) as u64;
                    // Upsampler into the next scale and its fusion.
                    n += h * r * h + h;
                    n += 2 * h * h + h;
                }
            }
        }
        Family::Bottomup => {
            // Each coarser scale pools the next finer one.
            for w in scales.windows(2) {
                n += conv(w[0] / w[1]);
            }
        }
        Family::Coarse => n += conv(scales[0]),
        Family::Retina => {
            for &k in scales {
                n += cfg.layers[0] as u64 * conv(k);
            }
        }
        Family::Vanilla => {}
    }
    n
}

/// Memory of a whole model, Table-8 style.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMemory {
    /// Per scale, descending: `(k, layers, one layer, all layers)`.
    pub scales: Vec<ScaleMemory>,
    pub embeddings: f64,
    pub output_and_grad: f64,
    pub hierarchical: f64,
    pub parameters: f64,
    pub optimizer: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleMemory {
    pub k: usize,
    pub layers: usize,
    pub per_layer: LayerCost,
    pub subtotal: LayerCost,
    pub hierarchical: f64,
}

/// Sums layer memory over every scale with `L = N / k` and adds embeddings,
/// logits and their gradient, inter-scale buffers, and parameters.
pub fn model_memory(cfg: &ModelConfig, batch: usize, profile: Profile) -> Result<ModelMemory> {
    cfg.validate()?;
    let base = CostParams {
        batch,
        seq_len: cfg.context,
        d_model: cfg.d_model,
        d_ff: cfg.d_ff,
        num_heads: cfg.num_heads,
        scale: 1,
        profile,
    };
    let blh = |k: usize| batch as f64 * cfg.context as f64 / k as f64 * cfg.d_model as f64 * profile.bytes;
    let mut scales = Vec::new();
    match cfg.family {
        Family::Retina => {
            let groups: Vec<(usize, usize)> = cfg.scales.iter().copied().zip(cfg.head_allocation()).collect();
            let per = retina_layer_memory(&base, &groups);
            let coarse: f64 = cfg.scales.iter().filter(|&&k| k > 1).map(|&k| blh(k)).sum();
            let layers = cfg.layers[0];
            scales.push(ScaleMemory {
                k: 1,
                layers,
                per_layer: per,
                subtotal: per.scaled(layers as f64),
                hierarchical: coarse * layers as f64,
            });
        }
        _ => {
            for (i, &k) in cfg.scales.iter().enumerate() {
                let mut layers = cfg.layers[i];
                if cfg.family == Family::Bottomup && k == 1 {
                    layers += 1;
                }
                let per = layer_memory(&base.at_scale(k));
                let mut hier = if k > 1 { blh(k) } else { 0.0 };
                if cfg.family == Family::Topdown && i > 0 {
                    // Upsampled coarse states, the concatenation and the fused input.
                    hier += 4.0 * blh(k);
                }
                scales.push(ScaleMemory {
                    k,
                    layers,
                    per_layer: per,
                    subtotal: per.scaled(layers as f64),
                    hierarchical: hier,
                });
            }
        }
    }
    let embeddings = blh(1);
    let predictions = match cfg.family {
        Family::Coarse => cfg.context / cfg.top_scale(),
        _ => cfg.context,
    };
    let output_and_grad = 2.0 * batch as f64 * predictions as f64 * cfg.vocab_size as f64 * profile.bytes;
    let hierarchical = scales.iter().map(|s| s.hierarchical).sum();
    let parameters = param_count(cfg) as f64 * profile.bytes;
    let optimizer = if profile.optimizer_state { 2.0 * parameters } else { 0.0 };
    let total = scales.iter().map(|s| s.subtotal.total).sum::<f64>()
        + embeddings
        + output_and_grad
        + hierarchical
        + parameters
        + optimizer;
    Ok(ModelMemory {
        scales,
        embeddings,
        output_and_grad,
        hierarchical,
        parameters,
        optimizer,
        total,
    })
}

/// Constants of the flop estimate `a·B·heads·L²·(H/heads) + b·B·L·H²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeConstants {
    pub a: f64,
    pub b: f64,
}

impl Default for TimeConstants {
    fn default() -> Self {
        // QKᵀ and weights·V forward, multiply-add = 2 flops: a = 4. Four H×H
        // projections plus two H×4H feedforward matrices: b = 2·(4 + 8) = 24.
        Self { a: 4.0, b: 24.0 }
    }
}

/// Quadratic and linear parts of the flop estimate of one layer.
pub fn attention_time_terms(p: &CostParams, c: TimeConstants) -> (f64, f64) {
    let (b, l, h, heads) = (p.batch as f64, p.len(), p.d_model as f64, p.num_heads as f64);
    (c.a * b * heads * l * l * (h / heads), c.b * b * l * h * h)
}

pub fn attention_time(p: &CostParams, c: TimeConstants) -> f64 {
    let (q, lin) = attention_time_terms(p, c);
    q + lin
}

/// Length `L` above which the quadratic term exceeds the linear one. The
/// head count cancels: `a·L²·H = b·L·H²` at `L = b·H / a`.
pub fn crossover_length(d_model: usize, c: TimeConstants) -> f64 {
    c.b * d_model as f64 / c.a
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeRow {
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub flops: f64,
    pub measured_ms: Option<f64>,
}

/// Modeled flops over a grid of sequence lengths and scales.
pub fn time_curve(p: &CostParams, scales: &[usize], grid: &[usize], c: TimeConstants) -> Vec<TimeRow> {
    let mut rows = Vec::new();
    for &k in scales {
        for &n in grid {
            let q = CostParams { seq_len: n, scale: k, ..*p };
            rows.push(TimeRow {
                k,
                n,
                flops: attention_time(&q, c),
                measured_ms: None,
            });
        }
    }
    rows
}

/// Wall-clock milliseconds of one eval-mode layer forward pass over
/// `max(1, N / k)` positions (best of `reps`).
pub fn measure_layer_ms(p: &CostParams, reps: usize) -> Result<f64> {
    let dims = LayerDims {
        d_model: p.d_model,
        num_heads: p.num_heads,
        d_ff: p.d_ff,
        dropout: 0.0,
    };
    dims.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
    let mut params = ParamStore::new();
    init_layer(&mut params, "l", &dims, &mut rng);
    let l = (p.seq_len / p.scale).max(1);
    let x = NdArray::randn(&[p.batch, l, p.d_model], 1.0, &mut rng);
    let mask = AttentionMask::causal(l).additive();
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        let mut g = Graph::eval();
        let xv = g.constant(x.clone());
        let group = HeadGroup {
            heads: p.num_heads,
            kv: xv,
            mask: &mask,
        };
        transformer_layer(&mut g, &params, "l", xv, &[group], &dims)?;
        best = best.min(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(best)
}

/// Least-squares polynomial fit `y ≈ Σ c_i x^i`; returns the coefficients
/// (ascending powers) and R².
pub fn fit_polynomial(xs: &[f64], ys: &[f64], degree: usize) -> Result<(Vec<f64>, f64)> {
    if xs.len() != ys.len() || xs.len() <= degree {
        return Err(Error::Data(format!(
            "a degree-{} fit needs more than {} points, got {}",
            degree,
            degree,
            xs.len()
        )));
    }
    // Scale x to [0, 1] to keep the design matrix well conditioned.
    let xmax = xs.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    let a = DMatrix::from_fn(xs.len(), degree + 1, |i, j| (xs[i] / xmax).powi(j as i32));
    let y = DVector::from_column_slice(ys);
    let coef = lstsq(&a, &y)?;
    let fitted = &a * &coef;
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_res: f64 = fitted.iter().zip(ys).map(|(f, y)| (y - f).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    let coef = coef.iter().enumerate().map(|(j, c)| c / xmax.powi(j as i32)).collect();
    Ok((coef, r2))
}

fn lstsq(a: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    a.clone()
        .svd(true, true)
        .solve(y, 1e-12)
        .map_err(|e| Error::Data(format!("least squares failed: {e}")))
}

/// One measured layer footprint used for calibration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub batch: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub num_heads: usize,
    pub scale: usize,
    pub bytes: f64,
}

/// Fits `c_ff` and the combined `[L, H]` coefficient `c_out + c_ln` to
/// measured layer footprints at a fixed element size. The two `[L, H]`
/// coefficients share one regressor, so the fitted sum is split in the
/// proportion of `start`.
pub fn calibrate(measurements: &[Measurement], start: Profile) -> Result<Profile> {
    if measurements.len() < 2 {
        return Err(Error::Data("calibration needs at least two measurements".into()));
    }
    let bytes = start.bytes;
    let mut a = DMatrix::zeros(measurements.len(), 2);
    let mut y = DVector::zeros(measurements.len());
    for (i, m) in measurements.iter().enumerate() {
        let p = CostParams {
            batch: m.batch,
            seq_len: m.seq_len,
            d_model: m.d_model,
            d_ff: m.d_ff,
            num_heads: m.num_heads,
            scale: m.scale,
            profile: Profile {
                c_ff: 0.0,
                c_out: 0.0,
                c_ln: 0.0,
                ..start
            },
        };
        let fixed = layer_memory(&p).total;
        let bl = m.batch as f64 * p.len() * bytes;
        a[(i, 0)] = bl * m.d_ff as f64;
        a[(i, 1)] = bl * m.d_model as f64;
        y[i] = m.bytes - fixed;
    }
    let c = lstsq(&a, &y)?;
    let share = if start.c_out + start.c_ln > 0.0 {
        start.c_out / (start.c_out + start.c_ln)
    } else {
        0.5
    };
    Ok(Profile {
        c_ff: c[0],
        c_out: c[1] * share,
        c_ln: c[1] * (1.0 - share),
        ..start
    })
}

/// `{k, N, component, bytes}` rows for a model report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub k: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub component: String,
    pub bytes: f64,
}

impl ModelMemory {
    pub fn rows(&self, n: usize) -> Vec<MemoryRow> {
        let mut rows = Vec::new();
        let mut push = |k: String, component: &str, bytes: f64| {
            rows.push(MemoryRow {
                k,
                n,
                component: component.to_string(),
                bytes,
            })
        };
        for s in &self.scales {
            let k = s.k.to_string();
            let c = &s.subtotal;
            push(k.clone(), "qkv_proj", c.qkv_proj);
            push(k.clone(), "qk_scores", c.qk_scores);
            push(k.clone(), "attn_weighted_values", c.attn_weighted_values);
            push(k.clone(), "fc", c.fc);
            push(k.clone(), "ln_drop_residual", c.ln_drop_residual);
            push(k.clone(), "hierarchical", s.hierarchical);
            push(k, "subtotal", c.total + s.hierarchical);
        }
        push("all".into(), "embeddings", self.embeddings);
        push("all".into(), "output_and_grad", self.output_and_grad);
        push("all".into(), "parameters", self.parameters);
        push("all".into(), "optimizer", self.optimizer);
        push("all".into(), "total", self.total);
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use proptest::prelude::*;

    fn params(k: usize) -> CostParams {
        CostParams {
            batch: 8,
            seq_len: 512,
            d_model: 1024,
            d_ff: 4096,
            num_heads: 16,
            scale: k,
            profile: Profile::default(),
        }
    }

    fn profiles() -> Vec<Profile> {
        vec![
            Profile::default(),
            Profile {
                c_ff: 1.0,
                c_out: 0.0,
                c_ln: 7.0,
                bytes: 2.0,
                optimizer_state: true,
            },
            Profile {
                c_ff: 3.5,
                c_out: 1.0,
                c_ln: 1.0,
                bytes: 8.0,
                optimizer_state: false,
            },
        ]
    }

    #[test]
    fn ratio_laws_hold_exactly() {
        for profile in profiles() {
            let base = CostParams { profile, ..params(1) };
            let one = layer_memory(&base);
            for k in [4usize, 16, 64] {
                let c = layer_memory(&base.at_scale(k));
                let kf = k as f64;
                assert_eq!(c.qk_scores * kf * kf, one.qk_scores);
                assert_eq!(c.qkv_proj * kf, one.qkv_proj);
                assert_eq!(c.attn_weighted_values * kf, one.attn_weighted_values);
                assert_eq!(c.fc * kf, one.fc);
                assert_eq!(c.ln_drop_residual * kf, one.ln_drop_residual);
            }
        }
        assert_eq!(layer_memory(&params(4)).qk_scores / layer_memory(&params(1)).qk_scores, 1.0 / 16.0);
        assert_eq!(layer_memory(&params(4)).qkv_proj / layer_memory(&params(1)).qkv_proj, 0.25);
    }

    #[test]
    fn fc_dominates_a_full_scale_layer() {
        let c = layer_memory(&params(1));
        for other in [c.qkv_proj, c.qk_scores, c.attn_weighted_values, c.ln_drop_residual] {
            assert!(c.fc > other);
        }
        assert_eq!(c.total, c.qkv_proj + c.qk_scores + c.attn_weighted_values + c.fc + c.ln_drop_residual);
    }

    proptest! {
        #[test]
        fn layer_memory_is_increasing(b in 1usize..16, n in 1usize..2048, h in 1usize..512, f in 1usize..2048, heads in 1usize..8) {
            let p = CostParams { batch: b, seq_len: n, d_model: h, d_ff: f, num_heads: heads, scale: 1, profile: Profile::default() };
            let t = layer_memory(&p).total;
            let bigger = [
                CostParams { batch: b + 1, ..p },
                CostParams { seq_len: n + 1, ..p },
                CostParams { d_model: h + 1, ..p },
                CostParams { d_ff: f + 1, ..p },
            ];
            for q in bigger {
                prop_assert!(layer_memory(&q).total > t);
            }
        }
    }

    fn cfg(family: Family, scales: Vec<usize>, layers: Vec<usize>) -> ModelConfig {
        ModelConfig {
            family,
            scales,
            layers,
            d_model: 1024,
            num_heads: 16,
            d_ff: 4096,
            dropout: 0.0,
            context: 512,
            vocab_size: 32_000,
            ..Default::default()
        }
    }

    #[test]
    fn vanilla_total_is_additive() {
        let c = cfg(Family::Vanilla, vec![1], vec![12]);
        let m = model_memory(&c, 8, Profile::default()).unwrap();
        let p = CostParams {
            batch: 8,
            seq_len: 512,
            d_model: 1024,
            d_ff: 4096,
            num_heads: 16,
            scale: 1,
            profile: Profile::default(),
        };
        let want = 12.0 * layer_memory(&p).total + m.embeddings + m.output_and_grad + m.parameters;
        assert!((m.total - want).abs() <= 1e-9 * want);
        let fewer = model_memory(&cfg(Family::Vanilla, vec![1], vec![11]), 8, Profile::default()).unwrap();
        let params_of_layer = (4 * (1024 * 1024 + 1024) + 2 * 1024 * 4096 + 4096 + 1024 + 4 * 1024) as f64 * 4.0;
        assert!((m.total - fewer.total - layer_memory(&p).total - params_of_layer).abs() < 1e-3);
    }

    #[test]
    fn topdown_coarse_subtotals_decrease() {
        let c = cfg(Family::Topdown, vec![64, 16, 4, 1], vec![7, 7, 8, 8]);
        let m = model_memory(&c, 8, Profile::default()).unwrap();
        let subs: Vec<f64> = m.scales.iter().map(|s| s.subtotal.total).collect();
        assert!(subs.windows(2).all(|w| w[0] < w[1]), "{subs:?}");
    }

    #[test]
    fn deep_topdown_fits_under_shallow_vanilla() {
        let vanilla = model_memory(&cfg(Family::Vanilla, vec![1], vec![14]), 8, Profile::default()).unwrap();
        let td = model_memory(&cfg(Family::Topdown, vec![64, 16, 4, 1], vec![7, 7, 8, 8]), 8, Profile::default()).unwrap();
        assert!(td.total < vanilla.total, "{} vs {}", td.total, vanilla.total);
    }

    #[test]
    fn parameter_count_matches_instantiated_models() {
        let small = |family, scales: Vec<usize>, layers: Vec<usize>| ModelConfig {
            family,
            scales,
            layers,
            d_model: 8,
            num_heads: 4,
            d_ff: 12,
            context: 32,
            vocab_size: 10,
            ..Default::default()
        };
        let mut cases = vec![
            small(Family::Vanilla, vec![1], vec![2]),
            small(Family::Topdown, vec![16, 4, 1], vec![1, 1, 2]),
            small(Family::Bottomup, vec![16, 4, 1], vec![1, 2, 1]),
            small(Family::Retina, vec![16, 4, 1], vec![3]),
            small(Family::Coarse, vec![4], vec![2]),
        ];
        for c in cases.clone() {
            let mut conv = c.clone();
            conv.downsampler = crate::scale::DownsampleMethod::CausalConv;
            cases.push(conv);
        }
        let mut tied = small(Family::Vanilla, vec![1], vec![1]);
        tied.tie_embeddings = true;
        cases.push(tied);
        for c in cases {
            let m = Model::new(c.clone(), 0).unwrap();
            assert_eq!(param_count(&c), m.params.num_scalars() as u64, "{} {:?}", c.family, c.downsampler);
        }
    }

    #[test]
    fn retina_scores_shrink_with_coarse_heads() {
        let mut r = cfg(Family::Retina, vec![4, 1], vec![12]);
        r.windows = Some("0:64,64:512".into());
        let v = cfg(Family::Vanilla, vec![1], vec![12]);
        let rm = model_memory(&r, 8, Profile::default()).unwrap();
        let vm = model_memory(&v, 8, Profile::default()).unwrap();
        assert!(rm.scales[0].per_layer.qk_scores < vm.scales[0].per_layer.qk_scores);
        assert_eq!(rm.scales[0].per_layer.fc, vm.scales[0].per_layer.fc);
    }

    #[test]
    fn time_terms() {
        let c = TimeConstants::default();
        let p = params(1);
        let (q1, l1) = attention_time_terms(&p, c);
        let (q2, l2) = attention_time_terms(&CostParams { seq_len: 2 * p.seq_len, ..p }, c);
        assert_eq!(q2, 4.0 * q1);
        assert_eq!(l2, 2.0 * l1);
        let grid: Vec<usize> = (512..=4096).step_by(512).collect();
        let rows = time_curve(&p, &[1, 64], &grid, c);
        let at = |k, n| rows.iter().find(|r| r.k == k && r.n == n).unwrap().flops;
        assert!(at(1, 4096) / at(64, 4096) > 100.0);
    }

    #[test]
    fn crossover_follows_from_the_formula() {
        let c = TimeConstants::default();
        for (h, heads) in [(512usize, 8usize), (1024, 16), (64, 1)] {
            let lstar = crossover_length(h, c);
            let p = |n: f64| CostParams {
                batch: 2,
                seq_len: n as usize,
                d_model: h,
                d_ff: 4 * h,
                num_heads: heads,
                scale: 1,
                profile: Profile::default(),
            };
            let (q, l) = attention_time_terms(&p(lstar), c);
            assert!((q - l).abs() <= 1e-9 * l);
            let (q, l) = attention_time_terms(&p(lstar * 2.0), c);
            assert!(q > l);
            let (q, l) = attention_time_terms(&p(lstar / 2.0), c);
            assert!(q < l);
        }
    }

    #[test]
    fn quadratic_fit_of_k1_curve() {
        let p = params(1);
        let grid: Vec<usize> = (256..=8192).step_by(256).collect();
        let rows = time_curve(&p, &[1], &grid, TimeConstants::default());
        let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.flops).collect();
        let (coef, r2) = fit_polynomial(&xs, &ys, 2).unwrap();
        assert!(r2 > 0.999);
        let (q, _) = attention_time_terms(&CostParams { seq_len: 1, ..p }, TimeConstants::default());
        assert!((coef[2] - q).abs() < 1e-6 * q);
        let (_, r2_lin) = fit_polynomial(&xs, &ys, 1).unwrap();
        assert!(r2_lin < r2);
    }

    #[test]
    fn calibration_recovers_coefficients() {
        let truth = Profile {
            c_ff: 3.0,
            c_out: 1.5,
            c_ln: 3.0,
            ..Profile::default()
        };
        let ms: Vec<Measurement> = [(8, 512, 256, 1024, 4, 1), (4, 1024, 512, 1536, 8, 4), (2, 256, 128, 1024, 2, 1), (8, 2048, 64, 256, 4, 16)]
            .iter()
            .map(|&(batch, seq_len, d_model, d_ff, num_heads, scale)| {
                let p = CostParams {
                    batch,
                    seq_len,
                    d_model,
                    d_ff,
                    num_heads,
                    scale,
                    profile: truth,
                };
                Measurement {
                    batch,
                    seq_len,
                    d_model,
                    d_ff,
                    num_heads,
                    scale,
                    bytes: layer_memory(&p).total,
                }
            })
            .collect();
        let fit = calibrate(&ms, Profile::default()).unwrap();
        assert!((fit.c_ff - 3.0).abs() < 1e-6);
        assert!((fit.c_out + fit.c_ln - 4.5).abs() < 1e-6);
        assert!((fit.c_out / fit.c_ln - 0.5).abs() < 1e-6);
    }

    #[test]
    fn layer_timing_runs() {
        let p = CostParams {
            batch: 1,
            seq_len: 16,
            d_model: 8,
            d_ff: 16,
            num_heads: 2,
            scale: 4,
            profile: Profile::default(),
        };
        assert!(measure_layer_ms(&p, 2).unwrap() >= 0.0);
    }

    #[test]
    fn report_rows_sum_to_total() {
        let c = cfg(Family::Bottomup, vec![16, 4, 1], vec![7, 8, 8]);
        let m = model_memory(&c, 8, Profile::default()).unwrap();
        let rows = m.rows(512);
        let parts: f64 = rows
            .iter()
            .filter(|r| r.component == "subtotal" || (r.k == "all" && r.component != "total"))
            .map(|r| r.bytes)
            .sum();
        assert!((parts - m.total).abs() < 1e-6 * m.total);
    }
}
