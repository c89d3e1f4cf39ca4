//! Central-difference verification of reverse-mode gradients.

use super::Tensor;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_auto − g_fd| / max(1, |g_fd|)` over all checked coordinates.
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` attaining the maximum.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error <= tol
    }
}

/// Compares the autodiff gradient of `f` against central differences with
/// step `h` on every coordinate of `params`.
///
/// `f` must rebuild its graph from the current parameter values on each call.
/// Parameter values are restored before returning; their gradient buffers are
/// reset.
pub fn grad_check<F>(mut f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: FnMut() -> Result<Tensor>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    params.iter().for_each(Tensor::zero_grad);
    let loss = f()?;
    loss.backward()?;
    let auto: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    drop(loss);
    params.iter().for_each(Tensor::zero_grad);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.numel() {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + h;
            let plus = f()?.item();
            p.data_mut()[i] = orig - h;
            let minus = f()?.item();
            p.data_mut()[i] = orig;

            let fd = (plus - minus) / (2.0 * h);
            let err = (auto[pi][i] - fd).abs() / fd.abs().max(1.0);
            report.coords_checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = Some((pi, i));
            }
        }
    }
    params.iter().for_each(Tensor::zero_grad);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_is_exact_to_roundoff() {
        // f(x) = xᵀ Q x with symmetric Q
        let q = Tensor::from_vec(vec![2.0, 0.5, -0.3, 0.5, 1.0, 0.2, -0.3, 0.2, 3.0], &[3, 3]).unwrap();
        let x = Tensor::param(vec![0.3, -0.7, 0.9], &[3, 1]).unwrap();
        let rep = grad_check(
            || {
                let qx = q.matmul(&x)?;
                Ok(x.transpose()?.matmul(&qx)?.sum())
            },
            std::slice::from_ref(&x),
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-7, "{rep:?}");
        assert_eq!(rep.coords_checked, 3);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let rep = grad_check(|| Ok(x.scalar_mul(0.0).sum().add_scalar(4.0)), std::slice::from_ref(&x), 1e-5).unwrap();
        assert_eq!(rep.max_rel_error, 0.0);
    }

    #[test]
    fn detects_wrong_gradient() {
        // detach hides the dependence from autodiff
        let x = Tensor::param(vec![1.5], &[1]).unwrap();
        let rep = grad_check(|| Ok(x.detach().mul(&x)?.sum()), std::slice::from_ref(&x), 1e-5).unwrap();
        assert!(rep.max_rel_error > 0.1);
        assert_eq!(rep.worst, Some((0, 0)));
    }

    #[test]
    fn restores_parameters() {
        let x = Tensor::param(vec![0.25, -0.5], &[2]).unwrap();
        grad_check(|| Ok(x.exp().sum()), std::slice::from_ref(&x), 1e-5).unwrap();
        assert_eq!(x.to_vec(), vec![0.25, -0.5]);
        assert!(x.grad().is_none());
    }
}
