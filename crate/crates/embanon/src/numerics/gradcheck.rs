//! Finite-difference gradient verification.
//!
//! This is the independent oracle the rest of the crate is tested against:
//! it never goes through the recorded tape for the numeric side, only plain
//! forward evaluations under [`no_grad`].

use thiserror::Error;

use super::tensor::{backward, no_grad, Tensor};

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("gradient check requires a deterministic function: two forward passes returned {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },
}

/// Compares analytic gradients of a scalar-valued function against central
/// finite differences and returns the maximum relative error
/// `|g_a - g_n| / max(1, |g_a|, |g_n|)` over every element of every input.
///
/// `f` must rebuild its computation from the current input values on each
/// call and must be deterministic; perturbations of size `step` are applied
/// one element at a time.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64, NumericsError>
where
    F: Fn(&[Tensor]) -> Tensor,
{
    assert!(step > 0.0, "grad_check: step must be positive, got {step}");

    {
        let _guard = no_grad();
        let first = f(inputs).item();
        let second = f(inputs).item();
        if first.to_bits() != second.to_bits() {
            return Err(NumericsError::NonDeterministic { first, second });
        }
    }

    for t in inputs {
        t.zero_grad();
    }
    let loss = f(inputs);
    assert_eq!(
        loss.numel(),
        1,
        "grad_check: f must be scalar-valued, got shape {:?}",
        loss.shape()
    );
    backward(&loss);

    let mut max_rel = 0.0f64;
    for input in inputs {
        let analytic = input.grad().unwrap_or_else(|| vec![0.0; input.numel()]);
        let original = input.values();
        for i in 0..original.len() {
            let mut plus = original.clone();
            plus[i] += step;
            input.set_values(&plus);
            let hi = {
                let _guard = no_grad();
                f(inputs).item()
            };

            let mut minus = original.clone();
            minus[i] -= step;
            input.set_values(&minus);
            let lo = {
                let _guard = no_grad();
                f(inputs).item()
            };
            input.set_values(&original);

            let numeric = (hi - lo) / (2.0 * step);
            let denom = 1.0f64.max(analytic[i].abs()).max(numeric.abs());
            let rel = (analytic[i] - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        let values: Vec<f64> = (0..numel).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::new(shape, values).requires_grad(true)
    }

    #[test]
    fn sum_gradient_is_exact() {
        let x = Tensor::new(&[3, 2], vec![0.4, -1.0, 2.0, 0.1, -0.7, 0.9]).requires_grad(true);
        let err = grad_check(|ins| ops::sum_all(&ins[0]), &[x], 1e-5).unwrap();
        assert!(err < 1e-10, "relative error {err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_tensor(&mut rng, &[3, 4]);
            let b = random_tensor(&mut rng, &[4, 2]);
            let err = grad_check(
                |ins| ops::sum_all(&ops::matmul(&ins[0], &ins[1])),
                &[a, b],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn concat_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let a = random_tensor(&mut rng, &[2, 3]);
            let b = random_tensor(&mut rng, &[2, 2]);
            let w = random_tensor(&mut rng, &[5, 1]);
            let err = grad_check(
                |ins| {
                    let cat = ops::concat_last(&[ins[0].clone(), ins[1].clone()]);
                    ops::sum_all(&ops::matmul(&cat, &ins[2]))
                },
                &[a, b, w],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let x = random_tensor(&mut rng, &[4, 8]);
            let gamma = random_tensor(&mut rng, &[8]);
            let beta = random_tensor(&mut rng, &[8]);
            let probe = random_tensor(&mut rng, &[8, 1]);
            let err = grad_check(
                |ins| {
                    let y = ops::layer_norm(&ins[0], &ins[1], &ins[2], 1e-5);
                    ops::sum_all(&ops::matmul(&y, &ins[3]))
                },
                &[x, gamma, beta, probe],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let x = random_tensor(&mut rng, &[3, 5]);
            let probe = random_tensor(&mut rng, &[5, 1]);
            let err = grad_check(
                |ins| ops::sum_all(&ops::matmul(&ops::softmax_last(&ins[0]), &ins[1])),
                &[x, probe],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn relu_chain_gradient_away_from_kinks() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
            // Keep inputs at least 1e-2 away from the relu kink.
            let values: Vec<f64> = (0..12)
                .map(|_| {
                    let v = rng.random::<f64>() * 2.0 - 1.0;
                    if v.abs() < 1e-2 {
                        v.signum() * 1e-2 + v
                    } else {
                        v
                    }
                })
                .collect();
            let x = Tensor::new(&[3, 4], values).requires_grad(true);
            let w = random_tensor(&mut rng, &[4, 2]);
            let target = Tensor::new(&[3, 2], (0..6).map(|_| rng.random::<f64>()).collect());
            let err = grad_check(
                |ins| ops::mse_loss(&ops::relu(&ops::matmul(&ins[0], &ins[1])), &target),
                &[x, w],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn embedding_lookup_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            let table = random_tensor(&mut rng, &[3, 2]);
            let probe = random_tensor(&mut rng, &[2, 1]);
            let err = grad_check(
                |ins| {
                    let rows = ops::embedding_lookup(&ins[0], &[1, 1, 0]);
                    ops::sum_all(&ops::matmul(&rows, &ins[1]))
                },
                &[table, probe],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
            let logits = random_tensor(&mut rng, &[4, 3]);
            let err = grad_check(
                |ins| ops::cross_entropy_loss(&ins[0], &[0, 2, 1, 2]),
                &[logits],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::cell::Cell;
        let counter = Cell::new(0.0f64);
        let x = Tensor::scalar(1.0).requires_grad(true);
        let result = grad_check(
            |ins| {
                counter.set(counter.get() + 1.0);
                ops::mul_scalar(&ops::sum_all(&ins[0]), counter.get())
            },
            &[x],
            1e-5,
        );
        assert!(matches!(result, Err(NumericsError::NonDeterministic { .. })));
    }
}
