//! Central-difference verification of analytic gradients.

use crate::error::{dim_err, Result, ScanError};
use crate::tensor::DenseArray;

/// Relative error `|a − n| / max(|a|, |n|, 1e−8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Maximum relative error per parameter array, in input order.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    pub epsilon: f64,
    pub threshold: f64,
    pub passed: bool,
}

/// Compares the analytic gradient returned by `loss_fn` against central
/// differences `(f(p + ε) − f(p − ε)) / 2ε`, coordinate by coordinate.
///
/// `loss_fn` must be deterministic and return the loss together with one
/// gradient array per parameter array (same shapes as `params`).
pub fn finite_difference_gradcheck<F>(
    mut loss_fn: F,
    params: &[DenseArray],
    epsilon: f64,
    threshold: f64,
) -> Result<GradReport>
where
    F: FnMut(&[DenseArray]) -> Result<(f64, Vec<DenseArray>)>,
{
    let (base, analytic) = loss_fn(params)?;
    if !base.is_finite() {
        return Err(ScanError::NonFinite(format!("loss at base point is {base}")));
    }
    if analytic.len() != params.len() {
        return Err(dim_err!(
            "loss function returned {} gradients for {} parameters",
            analytic.len(),
            params.len()
        ));
    }
    let mut work = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for (p, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[p].shape() {
            return Err(dim_err!(
                "gradient {p} has shape {:?}, parameter has {:?}",
                grad.shape(),
                params[p].shape()
            ));
        }
        let mut worst: f64 = 0.0;
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + epsilon;
            let (plus, _) = loss_fn(&work)?;
            work[p].data_mut()[i] = orig - epsilon;
            let (minus, _) = loss_fn(&work)?;
            work[p].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(ScanError::NonFinite(format!(
                    "loss is non-finite when perturbing parameter {p}[{i}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
        per_param.push(worst);
    }
    let max_rel_error = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradReport {
        per_param,
        max_rel_error,
        epsilon,
        threshold,
        passed: max_rel_error < threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_is_exact() {
        let p = DenseArray::from_vec(&[2, 3], vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]).unwrap();
        let report = finite_difference_gradcheck(
            |ps| {
                let v = 0.5 * ps[0].norm_l2().powi(2);
                Ok((v, vec![ps[0].clone()]))
            },
            &[p],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let p = DenseArray::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let report = finite_difference_gradcheck(
            |ps| Ok((3.0, vec![DenseArray::zeros(ps[0].shape())])),
            &[p],
            1e-5,
            1e-12,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let p = DenseArray::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let report = finite_difference_gradcheck(
            |ps| Ok((ps[0].norm_l2().powi(2), vec![ps[0].clone()])),
            &[p],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed);
        assert!((report.max_rel_error - 0.5).abs() < 1e-6);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let p = DenseArray::from_vec(&[1], vec![0.0]).unwrap();
        let res = finite_difference_gradcheck(
            |ps| Ok((1.0 / ps[0].data()[0], vec![ps[0].clone()])),
            &[p],
            1e-5,
            1e-4,
        );
        assert!(matches!(res, Err(ScanError::NonFinite(_))));
    }
}
