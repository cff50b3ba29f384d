//! Dense-tensor algebra: the autodiff tape, attention, normalization,
//! the SGD step, and the finite-difference gradient checker.

pub mod attention;
pub mod gradcheck;
pub mod optimizer;
pub mod tape;
pub mod tensor;

pub use attention::{attention_graph, multi_head_attention, AttentionParams, AttentionVars};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, WorstCoordinate};
pub use optimizer::{sgd_step, SgdSchedule};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Numerically stable softmax of a vector.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::InvalidInput("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("softmax input must be finite".into()));
    }
    let mut out = v.to_vec();
    tape::softmax_row_in_place(&mut out);
    Ok(out)
}

/// Layer normalization of a vector with affine parameters.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.len() != gamma.len() || x.len() != beta.len() {
        return Err(Error::shape(
            "layer_norm",
            format!("x, gamma, beta all length {}", x.len()),
            format!("gamma {}, beta {}", gamma.len(), beta.len()),
        ));
    }
    if x.is_empty() {
        return Err(Error::InvalidInput("layer_norm of an empty vector".into()));
    }
    if eps <= 0.0 {
        return Err(Error::InvalidInput(format!("layer_norm eps must be positive, got {eps}")));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    Ok(x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * inv_std * gamma[i] + beta[i])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_inputs_is_uniform() {
        let out = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(out, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_of_ln2_and_zero_is_two_thirds() {
        let out = softmax(&[(2.0f64).ln(), 0.0]).unwrap();
        assert!((out[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((out[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_high_precision_oracle() {
        // softmax([1, 2, 3]) evaluated at 50-digit precision, rounded to f64.
        let out = softmax(&[1.0, 2.0, 3.0]).unwrap();
        let oracle = [
            0.090030573170380462,
            0.24472847105479764,
            0.6652409557748219,
        ];
        for (a, b) in out.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        let v = [0.3, -2.1, 4.7, 0.0, 1.9];
        let out = softmax(&v).unwrap();
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let shifted: Vec<f64> = v.iter().map(|x| x + 123.456).collect();
        let out2 = softmax(&shifted).unwrap();
        for (a, b) in out.iter().zip(&out2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_empty_input() {
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn layer_norm_of_constant_vector_is_beta() {
        let out = layer_norm(&[3.5, 3.5], &[1.0, 1.0], &[0.0, 0.0], LAYER_NORM_EPS).unwrap();
        assert!(out.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn layer_norm_keeps_already_normalized_input() {
        let out = layer_norm(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0], LAYER_NORM_EPS).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-4);
        assert!((out[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_matches_direct_formula() {
        // x = [1,2,3], gamma = 2, beta = 1: mean 2, var 2/3,
        // normalized = (x-2)/sqrt(2/3 + eps), then *2 + 1.
        let out = layer_norm(&[1.0, 2.0, 3.0], &[2.0; 3], &[1.0; 3], LAYER_NORM_EPS).unwrap();
        let inv = 1.0 / (2.0 / 3.0 + 1e-5f64).sqrt();
        let expected = [
            (1.0 - 2.0) * inv * 2.0 + 1.0,
            1.0,
            (3.0 - 2.0) * inv * 2.0 + 1.0,
        ];
        for (a, b) in out.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn layer_norm_rejects_length_mismatch() {
        assert!(layer_norm(&[1.0, 2.0], &[1.0], &[0.0, 0.0], LAYER_NORM_EPS).is_err());
    }

    #[test]
    fn layer_norm_output_has_zero_mean_unit_variance() {
        let x = [0.4, -1.3, 2.2, 0.05, -0.8, 1.1];
        let out = layer_norm(&x, &[1.0; 6], &[0.0; 6], LAYER_NORM_EPS).unwrap();
        let mean = out.iter().sum::<f64>() / 6.0;
        let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
