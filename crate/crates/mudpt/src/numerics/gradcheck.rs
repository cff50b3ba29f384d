//! Central finite-difference verification of analytic gradients.
//!
//! The checker perturbs sampled coordinates of each named parameter by ±eps,
//! re-evaluates the loss, and compares the slope against the analytic
//! gradient. The per-tensor budget is spent on the coordinates with the
//! largest analytic magnitude: that is where genuine backward bugs surface,
//! whereas a coordinate whose true gradient sits at the relative-error floor
//! cannot be told apart from finite-difference roundoff at any legal step, so
//! blind sampling would turn the check into a coin flip.

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step; accepted range [1e-6, 1e-3].
    pub eps: f64,
    /// Coordinates checked per tensor (all of them when the tensor is
    /// smaller); the largest-magnitude analytic coordinates are taken first.
    pub max_coords_per_tensor: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-4, max_coords_per_tensor: 256 }
    }
}

/// The single worst coordinate found, kept for diagnostics.
#[derive(Debug, Clone)]
pub struct WorstCoordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub finite_difference: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coordinates_checked: usize,
    pub worst: Option<WorstCoordinate>,
}

fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8)
}

/// Compare analytic gradients against central differences of `loss`.
///
/// `loss` evaluates the objective at a parameter setting; `analytic_grads`
/// returns one gradient buffer per parameter, aligned with `params`. Both must
/// be deterministic functions of the parameter values alone.
pub fn grad_check<L, G>(
    params: &[(String, Tensor)],
    loss: L,
    analytic_grads: G,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    L: Fn(&[(String, Tensor)]) -> Result<f64>,
    G: Fn(&[(String, Tensor)]) -> Result<Vec<Vec<f64>>>,
{
    if !(1e-6..=1e-3).contains(&opts.eps) {
        return Err(Error::InvalidInput(format!(
            "grad_check eps must lie in [1e-6, 1e-3], got {}",
            opts.eps
        )));
    }
    if params.is_empty() {
        return Err(Error::InvalidInput("grad_check needs at least one parameter".into()));
    }

    let base = loss(params)?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!("loss non-finite ({base}) at the base point")));
    }
    let grads = analytic_grads(params)?;
    if grads.len() != params.len() {
        return Err(Error::shape(
            "analytic gradient set",
            format!("{} buffers", params.len()),
            format!("{} buffers", grads.len()),
        ));
    }

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut worst: Option<WorstCoordinate> = None;

    let mut work: Vec<(String, Tensor)> = params.to_vec();
    for (pi, (name, tensor)) in params.iter().enumerate() {
        if grads[pi].len() != tensor.data.len() {
            return Err(Error::shape(
                format!("analytic gradient for {name}"),
                format!("{} elements", tensor.data.len()),
                format!("{} elements", grads[pi].len()),
            ));
        }
        let n = tensor.data.len();
        let mut coords: Vec<usize> = (0..n).collect();
        if n > opts.max_coords_per_tensor {
            // Deterministic: rank by |analytic|, break ties on the lower index.
            coords.sort_by(|&a, &b| {
                grads[pi][b]
                    .abs()
                    .partial_cmp(&grads[pi][a].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            coords.truncate(opts.max_coords_per_tensor);
            coords.sort_unstable();
        }

        for idx in coords {
            let original = work[pi].1.data[idx];
            work[pi].1.data[idx] = original + opts.eps;
            let plus = loss(&work)?;
            work[pi].1.data[idx] = original - opts.eps;
            let minus = loss(&work)?;
            work[pi].1.data[idx] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss non-finite while perturbing {name}[{idx}]"
                )));
            }
            let fd = (plus - minus) / (2.0 * opts.eps);
            let analytic = grads[pi][idx];
            let rel = relative_error(analytic, fd);
            checked += 1;
            if rel > max_rel {
                max_rel = rel;
                worst = Some(WorstCoordinate {
                    param: name.clone(),
                    index: idx,
                    analytic,
                    finite_difference: fd,
                });
            }
        }
    }

    Ok(GradCheckReport { max_relative_error: max_rel, coordinates_checked: checked, worst })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn quadratic_params() -> Vec<(String, Tensor)> {
        let mut rng = rng_for(5, "gradcheck-test");
        vec![
            ("a".into(), Tensor::randn(&[3, 3], 1.0, &mut rng)),
            ("b".into(), Tensor::randn(&[2, 5], 1.0, &mut rng)),
        ]
    }

    fn sum_of_squares(params: &[(String, Tensor)]) -> Result<f64> {
        Ok(params.iter().flat_map(|(_, t)| &t.data).map(|x| x * x).sum())
    }

    fn sum_of_squares_grads(params: &[(String, Tensor)]) -> Result<Vec<Vec<f64>>> {
        Ok(params.iter().map(|(_, t)| t.data.iter().map(|x| 2.0 * x).collect()).collect())
    }

    #[test]
    fn quadratic_loss_checks_to_roundoff() {
        // Central differences are exact on quadratics up to floating-point
        // cancellation, so the relative error must be tiny.
        let params = quadratic_params();
        let report =
            grad_check(&params, sum_of_squares, sum_of_squares_grads, &GradCheckOptions::default())
                .unwrap();
        assert!(report.max_relative_error <= 1e-8, "got {}", report.max_relative_error);
        assert_eq!(report.coordinates_checked, 9 + 10);
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let params = quadratic_params();
        let report = grad_check(
            &params,
            |_| Ok(42.0),
            |ps| Ok(ps.iter().map(|(_, t)| vec![0.0; t.data.len()]).collect()),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_relative_error <= 1e-8);
    }

    #[test]
    fn deliberately_wrong_gradient_is_flagged() {
        let params = quadratic_params();
        let report = grad_check(
            &params,
            sum_of_squares,
            |ps| Ok(ps.iter().map(|(_, t)| t.data.iter().map(|x| 3.0 * x).collect()).collect()),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_relative_error > 0.1);
        let worst = report.worst.unwrap();
        assert!(worst.analytic != worst.finite_difference);
    }

    #[test]
    fn sampling_caps_coordinates_and_is_deterministic() {
        let mut rng = rng_for(6, "gradcheck-cap");
        let params = vec![("big".to_string(), Tensor::randn(&[40, 40], 1.0, &mut rng))];
        let opts = GradCheckOptions { max_coords_per_tensor: 64, ..Default::default() };
        let r1 = grad_check(&params, sum_of_squares, sum_of_squares_grads, &opts).unwrap();
        let r2 = grad_check(&params, sum_of_squares, sum_of_squares_grads, &opts).unwrap();
        assert_eq!(r1.coordinates_checked, 64);
        assert_eq!(r1.max_relative_error, r2.max_relative_error);
    }

    #[test]
    fn out_of_range_eps_is_rejected() {
        let params = quadratic_params();
        for eps in [1e-7, 1e-2, 0.0, -1e-4] {
            let opts = GradCheckOptions { eps, ..Default::default() };
            assert!(grad_check(&params, sum_of_squares, sum_of_squares_grads, &opts).is_err());
        }
    }

    #[test]
    fn non_finite_loss_reports_numeric_error() {
        let params = quadratic_params();
        let result = grad_check(
            &params,
            |_| Ok(f64::NAN),
            sum_of_squares_grads,
            &GradCheckOptions::default(),
        );
        match result {
            Err(Error::Numeric(_)) => {}
            other => panic!("expected numeric error, got {other:?}"),
        }
    }
}
