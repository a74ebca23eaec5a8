//! Central finite-difference gradient checking.
//!
//! Used throughout the test suites to validate every registered op and every
//! loss term against an oracle that is independent of the backward pass.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor};

/// Step size for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Max relative error between analytic and finite-difference gradients of a
/// scalar-valued function of several tensors.
///
/// Relative error is `|a - n| / max(1, |a|, |n|)` so that near-zero gradients
/// are compared absolutely.
pub fn max_rel_error<F>(shapes: &[Vec<usize>], f: F, seed: u64) -> f64
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
        })
        .collect();
    max_rel_error_at(shapes, &inputs, f)
}

/// As [`max_rel_error`] but at caller-supplied input values.
pub fn max_rel_error_at<F>(shapes: &[Vec<usize>], inputs: &[Vec<f64>], f: F) -> f64
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    let eval = |values: &[Vec<f64>]| -> f64 {
        let tape = Tape::new();
        let ts: Vec<Tensor> = shapes
            .iter()
            .zip(values.iter())
            .map(|(s, v)| tape.tensor(s.clone(), v.clone()).expect("input tensor"))
            .collect();
        f(&tape, &ts).expect("forward").scalar()
    };

    // Analytic gradients.
    let tape = Tape::new();
    let ts: Vec<Tensor> = shapes
        .iter()
        .zip(inputs.iter())
        .map(|(s, v)| tape.tensor(s.clone(), v.clone()).expect("input tensor"))
        .collect();
    let loss = f(&tape, &ts).expect("forward");
    let grads = tape.backward(&loss).expect("backward");
    let analytic: Vec<Vec<f64>> = ts.iter().map(|t| grads.get_or_zero(t)).collect();

    let mut worst = 0.0f64;
    for (ti, input) in inputs.iter().enumerate() {
        for k in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[ti][k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[ti][k] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic[ti][k];
            let denom = 1.0f64.max(a.abs()).max(numeric.abs());
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

/// Assert the analytic gradient matches finite differences to `tol`.
pub fn check_gradients<F>(shapes: &[Vec<usize>], f: F, tol: f64, seed: u64)
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    let err = max_rel_error(shapes, f, seed);
    assert!(err < tol, "gradient check failed: max rel err {err:.3e} >= {tol:.1e}");
}
