//! Deterministic `f64` array engine with reverse-mode automatic differentiation.

mod array;
mod gradcheck;
mod graph;
pub mod kernels;

pub use array::NdArray;
pub use gradcheck::{check_gradients, grad_check, CheckedOp, FD_STEP};
pub use graph::{gelu, gelu_grad, log_prob, Graph, Var, LN_EPS};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;

    /// Φ(x) by composite Simpson integration of the normal density; shares
    /// nothing with the erf-based implementation.
    fn normal_cdf_oracle(x: f64) -> f64 {
        let n = 2000;
        let h = x / n as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = pdf(0.0) + pdf(x);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * pdf(i as f64 * h);
        }
        0.5 + s * h / 3.0
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::eval();
        let x = g.constant(NdArray::from_vec(vec![0.0, 0.0]));
        let y = g.softmax_last(x, None).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn gelu_matches_integrated_normal_cdf() {
        assert_eq!(gelu(0.0), 0.0);
        let oracle = normal_cdf_oracle(1.0);
        assert!((gelu(1.0) - oracle).abs() < 1e-9);
        assert!((gelu(1.0) - 0.841345).abs() < 1e-5);
        for &x in &[-2.5, -0.3, 0.7, 1.9] {
            assert!((gelu(x) - x * normal_cdf_oracle(x)).abs() < 1e-9);
        }
    }

    #[test]
    fn mean_pool_of_constant_is_constant() {
        let mut g = Graph::eval();
        let x = g.constant(NdArray::new(vec![1, 4, 1], vec![2.0; 4]).unwrap());
        let y = g.mean_pool_1d(x, 4).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1]);
        assert_eq!(g.value(y).data(), &[2.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::eval();
        let x = g.leaf(NdArray::from_vec(vec![3.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
        // A second call accumulates.
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[12.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::eval();
        let logits = g.leaf(NdArray::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let loss = g.cross_entropy(logits, &[0]).unwrap();
        assert!((g.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(logits).unwrap().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn layer_norm_matches_finite_differences() {
        assert!(grad_check(CheckedOp::LayerNorm, 11).unwrap() < 1e-4);
        let mut rng = <rand_xoshiro::Xoshiro256PlusPlus as rand::SeedableRng>::seed_from_u64(3);
        let x = NdArray::uniform(&[8], -2.0, 2.0, &mut rng);
        let err = check_gradients(&[x], 3, |g, v| {
            let gain = g.constant(NdArray::full(&[8], 1.0));
            let bias = g.constant(NdArray::zeros(&[8]));
            g.layer_norm(v[0], gain, bias, LN_EPS)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn spec_grad_checks() {
        assert!(grad_check(CheckedOp::MatMul, 0).unwrap() < 1e-4);
        assert!(grad_check(CheckedOp::Gelu, 0).unwrap() < 1e-4);
        assert!(grad_check(CheckedOp::SoftmaxMasked, 0).unwrap() < 1e-4);
    }

    #[test]
    fn masked_softmax_entry_has_exactly_zero_weight_and_gradient() {
        let mut mask = NdArray::zeros(&[2, 3]);
        mask.data_mut()[1] = f64::NEG_INFINITY;
        let mut g = Graph::eval();
        let x = g.leaf(NdArray::new(vec![2, 3], vec![0.3, 5.0, -1.0, 0.2, 0.1, 0.0]).unwrap());
        let y = g.softmax_last(x, Some(&mask)).unwrap();
        assert_eq!(g.value(y).data()[1], 0.0);
        let w = g.constant(NdArray::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = g.mul(y, w).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data()[1], 0.0);
    }

    #[test]
    fn fully_masked_row_gives_zero_weights() {
        let mask = NdArray::full(&[1, 3], f64::NEG_INFINITY);
        let mut g = Graph::eval();
        let x = g.leaf(NdArray::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.softmax_last(x, Some(&mask)).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn every_primitive_passes_grad_check_over_twenty_seeds() {
        for op in CheckedOp::ALL {
            for seed in 0..20 {
                let err = grad_check(op, seed).unwrap();
                assert!(err < 1e-4, "{:?} seed {}: {}", op, seed, err);
            }
        }
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let mut rng = <rand_xoshiro::Xoshiro256PlusPlus as rand::SeedableRng>::seed_from_u64(9);
        let mut g = Graph::eval();
        let x = g.constant(NdArray::uniform(&[5, 16], -50.0, 50.0, &mut rng));
        let gain = g.constant(NdArray::full(&[16], 1.0));
        let bias = g.constant(NdArray::zeros(&[16]));
        let y = g.layer_norm(x, gain, bias, LN_EPS).unwrap();
        for r in 0..5 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6, "{mean} {var}");
        }
    }

    #[test]
    fn dropout_is_identity_in_eval_and_seeded_in_training() {
        let x = NdArray::full(&[64], 1.0);
        let mut g = Graph::eval();
        let v = g.constant(x.clone());
        let d = g.dropout(v, 0.5).unwrap();
        assert_eq!(v, d);

        let run = |seed| {
            let mut g = Graph::new(true, seed);
            let v = g.constant(x.clone());
            let d = g.dropout(v, 0.5).unwrap();
            g.value(d).clone()
        };
        assert_eq!(run(4), run(4));
        assert_ne!(run(4), run(5));
        assert!(run(4).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::eval();
        let a = g.constant(NdArray::zeros(&[2, 3]));
        let b = g.constant(NdArray::zeros(&[4, 2]));
        match g.matmul(a, b) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("unexpected {:?}", other.map(|v| v.index())),
        }
        assert!(g.mean_pool_1d(a, 3).is_err());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::eval();
        let a = g.constant(NdArray::from_vec(vec![1e300]));
        assert!(matches!(g.scale(a, 1e300), Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::eval();
        let a = g.leaf(NdArray::zeros(&[2]));
        assert!(matches!(g.backward(a), Err(Error::NonScalarRoot { .. })));
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let mut g = Graph::eval();
        let t = g.constant(NdArray::zeros(&[3, 2]));
        assert!(matches!(g.embedding(t, &[3]), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn identical_inputs_give_bitwise_identical_gradients() {
        let run = || {
            let mut g = Graph::new(true, 7);
            let mut rng = <rand_xoshiro::Xoshiro256PlusPlus as rand::SeedableRng>::seed_from_u64(1);
            let x = g.leaf(NdArray::uniform(&[4, 6], -1.0, 1.0, &mut rng));
            let w = g.leaf(NdArray::uniform(&[6, 5], -1.0, 1.0, &mut rng));
            let h = g.matmul(x, w).unwrap();
            let h = g.gelu(h).unwrap();
            let h = g.dropout(h, 0.2).unwrap();
            let loss = g.cross_entropy(h, &[0, 1, 2, 3]).unwrap();
            g.backward(loss).unwrap();
            (g.grad(x).unwrap().clone(), g.grad(w).unwrap().clone())
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_respect_mask(
            vals in proptest::collection::vec(-20.0f64..20.0, 12),
            blocked in proptest::collection::vec(any::<bool>(), 12),
        ) {
            let mut mask = NdArray::zeros(&[3, 4]);
            for (m, &b) in mask.data_mut().iter_mut().zip(&blocked) {
                if b { *m = f64::NEG_INFINITY; }
            }
            let mut g = Graph::eval();
            let x = g.constant(NdArray::new(vec![3, 4], vals).unwrap());
            let y = g.softmax_last(x, Some(&mask)).unwrap();
            for r in 0..3 {
                let row = g.value(y).row(r);
                let open = blocked[r * 4..r * 4 + 4].iter().any(|b| !b);
                let total: f64 = row.iter().sum();
                if open {
                    prop_assert!((total - 1.0).abs() < 1e-12);
                } else {
                    prop_assert_eq!(total, 0.0);
                }
                for j in 0..4 {
                    if blocked[r * 4 + j] {
                        prop_assert_eq!(row[j], 0.0);
                    }
                }
            }
        }
    }
}
