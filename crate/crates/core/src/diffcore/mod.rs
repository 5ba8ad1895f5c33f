//! Dense tensors and a dynamic tape for reverse-mode differentiation.
//!
//! Every model forward pass records onto a fresh [`Tape`]; parameters enter as
//! leaves, data as constants, and [`Tape::backward`] returns the gradient of a
//! scalar loss with respect to every differentiable leaf.

mod gradcheck;
mod graph_ops;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_detailed, op_suite};
pub(crate) use gradcheck::randn;
pub use graph_ops::{NeighborSets, Propagation};
pub use params::{init_uniform, Bound, Dense, Mlp, ParamId, ParamSet};
pub use tape::{Activation, Gradients, RecordEntry, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// `z = mu + exp(logvar / 2) ⊙ noise`, differentiable in `mu` and `logvar`.
pub fn reparameterize(tape: &mut Tape, mu: Var, logvar: Var, noise: Var) -> Result<Var> {
    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half);
    let spread = tape.mul(std, noise)?;
    tape.add(mu, spread)
}

/// `exp(t·v_i) / Σ_j exp(t·v_j)` with max subtraction, on plain values.
pub fn softmax_with_temperature(v: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Parameter(format!("softmax temperature must be positive, got {t}")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("softmax logits must be finite".into()));
    }
    let mut out = vec![0.0; v.len()];
    tape::softmax_into(v, t, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let ((m, k), (_, n)) = (a.dims(), b.dims());
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    c[i * n + j] += a.get(i, t) * b.get(t, j);
                }
            }
        }
        c
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::identity(2));
        let b = t.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let c = t.matmul(i2, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = t.constant(Tensor::matrix(1, 1, vec![2.0]));
        let b = t.constant(Tensor::matrix(1, 1, vec![5.0]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).item(), 10.0);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn matmul_matches_triple_loop_on_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t = Tape::new();
        let a = randn(&mut rng, &[4, 3]);
        let b = randn(&mut rng, &[3, 2]);
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let c = t.matmul(va, vb).unwrap();
        for (x, y) in t.value(c).data().iter().zip(naive_matmul(&a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
        for _ in 0..50 {
            let (m, k, n) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..9));
            let a = randn(&mut rng, &[m, k]);
            let b = randn(&mut rng, &[k, n]);
            let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
            let c = t.matmul(va, vb).unwrap();
            for (x, y) in t.value(c).data().iter().zip(naive_matmul(&a, &b)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn leaky_relu_values_and_gradient() {
        let kind = Activation::LeakyRelu(0.01);
        assert_eq!(kind.apply(2.0), 2.0);
        assert!((kind.apply(-1.0) + 0.01).abs() < 1e-15);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(-3.0));
        let y = t.activate(x, kind);
        let g = t.backward(y).unwrap();
        assert!((g.get(x).item() - 0.01).abs() < 1e-15);

        // Kink: derivative at exactly zero is the slope.
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let y = t.activate(x, kind);
        assert_eq!(t.backward(y).unwrap().get(x).item(), 0.01);
    }

    #[test]
    fn kink_margin_is_the_nearest_kink_distance() {
        let mut t = Tape::new();
        assert_eq!(t.kink_margin(), f64::INFINITY);
        let x = t.leaf(Tensor::row(vec![0.3, -0.05, 2.0]));
        t.activate(x, Activation::LeakyRelu(0.01));
        assert!((t.kink_margin() - 0.05).abs() < 1e-15);
        t.clamp(x, -1.0, 1.98);
        assert!((t.kink_margin() - 0.02).abs() < 1e-12);
        let y = t.leaf(Tensor::scalar(0.001));
        t.activate(y, Activation::Tanh);
        assert!((t.kink_margin() - 0.02).abs() < 1e-12);
        t.abs(y);
        assert_eq!(t.kink_margin(), 0.001);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_with_temperature(&[0.0, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
        let s = softmax_with_temperature(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-12 && (s[1] - 1.0 / 3.0).abs() < 1e-12);
        // 1 / (1 + e^-50) differs from 1 by about 2e-22.
        let s = softmax_with_temperature(&[1.0, 0.0], 50.0).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-9);
        assert!(softmax_with_temperature(&[1.0], 0.0).is_err());
        assert!(softmax_with_temperature(&[1.0], -2.0).is_err());
        let mut t = Tape::new();
        let v = t.constant(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(t.softmax_rows(v, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn reparameterize_examples() {
        let mut t = Tape::new();
        let mu = t.constant(Tensor::row(vec![0.3, -1.2]));
        let lv = t.constant(Tensor::row(vec![0.7, 0.1]));
        let zero = t.constant(Tensor::row(vec![0.0, 0.0]));
        let z = reparameterize(&mut t, mu, lv, zero).unwrap();
        assert_eq!(t.value(z).data(), &[0.3, -1.2]);

        let mu = t.constant(Tensor::scalar(0.0));
        let lv = t.constant(Tensor::scalar(0.0));
        let e = t.constant(Tensor::scalar(1.5));
        let z = reparameterize(&mut t, mu, lv, e).unwrap();
        assert_eq!(t.value(z).item(), 1.5);
    }

    #[test]
    fn reparameterize_moments_monte_carlo() {
        let n = 100_000;
        let (mu, logvar) = (0.7f64, -0.4f64);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = Tape::new();
        let m = t.constant(Tensor::full(&[n, 1], mu));
        let l = t.constant(Tensor::full(&[n, 1], logvar));
        let e = t.constant(randn(&mut rng, &[n, 1]));
        let z = reparameterize(&mut t, m, l, e).unwrap();
        let z = t.value(z).data();
        let mean = z.iter().sum::<f64>() / n as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sigma2 = logvar.exp();
        // SE of the mean is sqrt(σ²/n); SE of the variance is σ²·sqrt(2/(n−1)).
        assert!((mean - mu).abs() < 3.0 * (sigma2 / n as f64).sqrt());
        assert!((var - sigma2).abs() < 3.0 * sigma2 * (2.0 / (n - 1) as f64).sqrt());
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.square(x);
        assert_eq!(t.backward(y).unwrap().get(x).item(), 6.0);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let c = t.constant(Tensor::scalar(4.0));
        let g = t.backward(c).unwrap();
        assert_eq!(g.get(x).item(), 0.0);
        assert!(!g.reached(x));

        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_leaky_relu_of_affine_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = randn(&mut rng, &[3, 4]);
        let x = randn(&mut rng, &[4, 2]);
        let err = grad_check(
            |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let a = t.activate(h, Activation::LeakyRelu(0.01));
                Ok(t.sum(a))
            },
            &[w, x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grad_check_quadratic_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = randn(&mut rng, &[3, 3]);
        let err = grad_check(
            move |t, v| {
                let am = t.constant(a.clone());
                let ax = t.matmul(am, v[0])?;
                let xt = t.reshape(v[0], &[1, 3])?;
                let q = t.matmul(xt, ax)?;
                Ok(t.sum(q))
            },
            &[randn(&mut rng, &[3, 1])],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");

        let err = grad_check(|t, _| Ok(t.constant(Tensor::scalar(2.0))), &[Tensor::scalar(1.0)], 1e-4)
            .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_rejects_non_finite() {
        let r = grad_check(
            |t, v| {
                let e = t.exp(v[0]);
                Ok(t.sum(e))
            },
            &[Tensor::scalar(1e6)],
            1e-4,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn every_primitive_passes_gradient_check() {
        for seed in 0..100 {
            for (name, err) in op_suite(seed, 1e-5).unwrap() {
                assert!(err < 1e-6, "{name} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn record_is_topological_and_single_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let w = t.leaf(randn(&mut rng, &[3, 3]));
        let x = t.constant(randn(&mut rng, &[2, 3]));
        let h = t.matmul(x, w).unwrap();
        let a = t.activate(h, Activation::Tanh);
        let _ = t.sum(a);
        let rec = t.record();
        let mut seen = std::collections::HashSet::new();
        for e in &rec {
            assert!(e.inputs.iter().all(|&i| i < e.output));
            assert!(seen.insert(e.output));
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = Tape::new();
        let w = t.leaf(randn(&mut rng, &[4, 3]));
        let x = t.constant(randn(&mut rng, &[5, 4]));
        let h = t.matmul(x, w).unwrap();
        let s = t.softmax_rows(h, 1.7).unwrap();
        let d = t.pairwise_sqdist(s, h).unwrap();
        let k = t.kernel_mean(d, std::rc::Rc::from(vec![1.0, 2.0])).unwrap();
        let again = t.replay(&[]).unwrap();
        assert_eq!(again.value(k).data(), t.value(k).data());

        let w2 = randn(&mut rng, &[4, 3]);
        let r1 = t.replay(&[(w, w2.clone())]).unwrap();
        let r2 = t.replay(&[(w, w2)]).unwrap();
        assert_eq!(r1.value(k).data(), r2.value(k).data());
        assert_ne!(r1.value(k).data(), t.value(k).data());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            v in prop::collection::vec(-30.0f64..30.0, 1..12),
            t in 0.05f64..20.0,
            c in -50.0f64..50.0,
        ) {
            let s = softmax_with_temperature(&v, t).unwrap();
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(s.iter().all(|&x| x >= 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let s2 = softmax_with_temperature(&shifted, t).unwrap();
            for (a, b) in s.iter().zip(&s2) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
