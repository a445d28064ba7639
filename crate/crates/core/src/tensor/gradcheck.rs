//! Central finite-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::{Graph, NdArray, Var, LN_EPS};
use crate::error::Result;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Differentiable primitives covered by [`grad_check`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckedOp {
    MatMul,
    MatMulBt,
    BatchedMatMul,
    Add,
    AddBroadcast,
    Sub,
    Mul,
    Scale,
    Sum,
    Mean,
    ConcatLast,
    Slice,
    Reshape,
    Permute,
    Embedding,
    Softmax,
    SoftmaxMasked,
    LayerNorm,
    Gelu,
    Dropout,
    MeanPool,
    MaxPool,
    CausalConv,
    TransposeConv,
    Linear,
    CrossEntropy,
    CrossEntropyDist,
}

impl CheckedOp {
    pub const ALL: [CheckedOp; 27] = [
        CheckedOp::MatMul,
        CheckedOp::MatMulBt,
        CheckedOp::BatchedMatMul,
        CheckedOp::Add,
        CheckedOp::AddBroadcast,
        CheckedOp::Sub,
        CheckedOp::Mul,
        CheckedOp::Scale,
        CheckedOp::Sum,
        CheckedOp::Mean,
        CheckedOp::ConcatLast,
        CheckedOp::Slice,
        CheckedOp::Reshape,
        CheckedOp::Permute,
        CheckedOp::Embedding,
        CheckedOp::Softmax,
        CheckedOp::SoftmaxMasked,
        CheckedOp::LayerNorm,
        CheckedOp::Gelu,
        CheckedOp::Dropout,
        CheckedOp::MeanPool,
        CheckedOp::MaxPool,
        CheckedOp::CausalConv,
        CheckedOp::TransposeConv,
        CheckedOp::Linear,
        CheckedOp::CrossEntropy,
        CheckedOp::CrossEntropyDist,
    ];
}

/// Largest `|analytic - numeric| / max(1, |numeric|)` over all inputs of `f`.
///
/// Non-scalar outputs are reduced with a fixed random projection so every
/// output element contributes to the checked scalar.
pub fn check_gradients<F>(inputs: &[NdArray], seed: u64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x5eed_f00d);
    let mut projection: Option<NdArray> = None;
    let mut eval = |values: &[NdArray], want_grads: bool| -> Result<(f64, Vec<NdArray>)> {
        let mut g = Graph::eval();
        let vars: Vec<Var> = values.iter().map(|v| g.leaf(v.clone())).collect();
        let out = f(&mut g, &vars)?;
        let root = if g.value(out).len() == 1 {
            out
        } else {
            let proj = projection
                .get_or_insert_with(|| NdArray::uniform(g.shape(out), -1.0, 1.0, &mut rng))
                .clone();
            let p = g.constant(proj);
            let prod = g.mul(out, p)?;
            g.sum(prod)?
        };
        let loss = g.value(root).data()[0];
        let mut grads = Vec::new();
        if want_grads {
            g.backward(root)?;
            for (v, x) in vars.iter().zip(values) {
                grads.push(g.grad(*v).cloned().unwrap_or_else(|| NdArray::zeros(x.shape())));
            }
        }
        Ok((loss, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut worst: f64 = 0.0;
    let mut work: Vec<NdArray> = inputs.to_vec();
    for t in 0..inputs.len() {
        for i in 0..inputs[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + FD_STEP;
            let (plus, _) = eval(&work, false)?;
            work[t].data_mut()[i] = orig - FD_STEP;
            let (minus, _) = eval(&work, false)?;
            work[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = (analytic[t].data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Gradient check of one primitive on random inputs drawn from `seed`.
pub fn grad_check(op: CheckedOp, seed: u64) -> Result<f64> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut r = |shape: &[usize]| NdArray::uniform(shape, -1.5, 1.5, &mut rng);
    match op {
        CheckedOp::MatMul => check_gradients(&[r(&[3, 4]), r(&[4, 2])], seed, |g, v| g.matmul(v[0], v[1])),
        CheckedOp::MatMulBt => check_gradients(&[r(&[2, 3, 4]), r(&[5, 4])], seed, |g, v| g.matmul_bt(v[0], v[1])),
        CheckedOp::BatchedMatMul => check_gradients(&[r(&[2, 3, 4]), r(&[2, 4, 3])], seed, |g, v| g.matmul(v[0], v[1])),
        CheckedOp::Add => check_gradients(&[r(&[3, 4]), r(&[3, 4])], seed, |g, v| g.add(v[0], v[1])),
        CheckedOp::AddBroadcast => check_gradients(&[r(&[2, 3, 4]), r(&[4])], seed, |g, v| g.add(v[0], v[1])),
        CheckedOp::Sub => check_gradients(&[r(&[3, 4]), r(&[4])], seed, |g, v| g.sub(v[0], v[1])),
        CheckedOp::Mul => check_gradients(&[r(&[3, 4]), r(&[3, 4])], seed, |g, v| g.mul(v[0], v[1])),
        CheckedOp::Scale => check_gradients(&[r(&[5])], seed, |g, v| g.scale(v[0], -0.7)),
        CheckedOp::Sum => check_gradients(&[r(&[2, 3])], seed, |g, v| g.sum(v[0])),
        CheckedOp::Mean => check_gradients(&[r(&[2, 3])], seed, |g, v| g.mean(v[0])),
        CheckedOp::ConcatLast => check_gradients(&[r(&[2, 3, 2]), r(&[2, 3, 3])], seed, |g, v| {
            g.concat_last(&[v[0], v[1]])
        }),
        CheckedOp::Slice => check_gradients(&[r(&[3, 5, 2])], seed, |g, v| g.slice(v[0], 1, 1, 4)),
        CheckedOp::Reshape => check_gradients(&[r(&[2, 6])], seed, |g, v| g.reshape(v[0], &[3, 4])),
        CheckedOp::Permute => check_gradients(&[r(&[2, 3, 4, 2])], seed, |g, v| g.permute(v[0], &[0, 2, 1, 3])),
        CheckedOp::Embedding => {
            let ids = [2usize, 0, 2, 4];
            check_gradients(&[r(&[5, 3])], seed, move |g, v| g.embedding(v[0], &ids))
        }
        CheckedOp::Softmax => check_gradients(&[r(&[3, 6])], seed, |g, v| g.softmax_last(v[0], None)),
        CheckedOp::SoftmaxMasked => {
            let mask = one_masked_entry(4);
            check_gradients(&[r(&[2, 4, 4])], seed, move |g, v| g.softmax_last(v[0], Some(&mask)))
        }
        CheckedOp::LayerNorm => check_gradients(&[r(&[3, 8]), r(&[8]), r(&[8])], seed, |g, v| {
            g.layer_norm(v[0], v[1], v[2], LN_EPS)
        }),
        CheckedOp::Gelu => check_gradients(&[r(&[16])], seed, |g, v| g.gelu(v[0])),
        CheckedOp::Dropout => {
            let mut mrng = Xoshiro256PlusPlus::seed_from_u64(seed.wrapping_add(1));
            let mask: Vec<f64> = (0..12)
                .map(|_| if mrng.random::<f64>() < 0.3 { 0.0 } else { 1.0 / 0.7 })
                .collect();
            check_gradients(&[r(&[3, 4])], seed, move |g, v| g.dropout_with_mask(v[0], mask.clone()))
        }
        CheckedOp::MeanPool => check_gradients(&[r(&[2, 8, 3])], seed, |g, v| g.mean_pool_1d(v[0], 4)),
        CheckedOp::MaxPool => {
            let x = tie_free(&[2, 8, 3], seed);
            check_gradients(&[x], seed, |g, v| g.max_pool_1d(v[0], 4))
        }
        CheckedOp::CausalConv => check_gradients(&[r(&[2, 8, 3]), r(&[3 * 3, 2]), r(&[2])], seed, |g, v| {
            g.causal_conv_1d(v[0], v[1], v[2], 4)
        }),
        CheckedOp::TransposeConv => check_gradients(&[r(&[2, 3, 3]), r(&[3, 4 * 2]), r(&[2])], seed, |g, v| {
            g.transpose_conv_1d(v[0], v[1], v[2], 4)
        }),
        CheckedOp::Linear => check_gradients(&[r(&[2, 3, 4]), r(&[4, 5]), r(&[5])], seed, |g, v| {
            g.linear(v[0], v[1], Some(v[2]))
        }),
        CheckedOp::CrossEntropy => {
            let targets = [1usize, 4, 0];
            check_gradients(&[r(&[3, 5])], seed, move |g, v| g.cross_entropy(v[0], &targets))
        }
        CheckedOp::CrossEntropyDist => {
            let targets = vec![vec![(0usize, 0.5), (2, 0.5)], vec![(1, 0.25), (3, 0.75)]];
            check_gradients(&[r(&[2, 4])], seed, move |g, v| g.cross_entropy_dist(v[0], &targets))
        }
    }
}

/// `[n, n]` additive mask that blocks only entry `(0, n-1)`.
fn one_masked_entry(n: usize) -> NdArray {
    let mut m = NdArray::zeros(&[n, n]);
    m.data_mut()[n - 1] = f64::NEG_INFINITY;
    m
}

/// Random values with pairwise gaps far above the finite-difference step.
fn tie_free(shape: &[usize], seed: u64) -> NdArray {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let data = order
        .into_iter()
        .map(|o| o as f64 * 0.05 - 1.0 + rng.random_range(0.0..0.01))
        .collect();
    NdArray::new(shape.to_vec(), data).expect("shape product matches")
}
