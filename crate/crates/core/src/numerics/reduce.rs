use crate::error::{Error, Result};

/// Strict left-to-right fold starting from `0.0`.
///
/// Order-sensitive by contract: equal inputs in equal order give equal bits.
pub fn deterministic_sum(values: &[f32]) -> f32 {
    values.iter().fold(0.0f32, |acc, &v| acc + v)
}

pub fn deterministic_sum_f64(values: &[f64]) -> f64 {
    values.iter().fold(0.0f64, |acc, &v| acc + v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(1, |analytic|) over coordinates
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Finite-difference formula used by [`grad_check_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x + h) - f(x - h)) / 2h`
    Central,
    /// `(-f(x + 2h) + 8 f(x + h) - 8 f(x - h) + f(x - 2h)) / 12h`, fourth order.
    FivePoint,
}

/// Compares an analytic gradient with central finite differences.
///
/// `f` returns the loss and its analytic gradient at the given point; only the
/// gradient at `theta` is used, probes use the loss alone. A non-finite loss at
/// any probe point is reported as [`Error::NonFinite`].
pub fn grad_check<F>(f: F, theta: &[f64], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    grad_check_with(f, theta, h, Stencil::Central)
}

pub fn grad_check_with<F>(mut f: F, theta: &[f64], h: f64, stencil: Stencil) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if h <= 0.0 {
        return Err(Error::Invalid(format!("grad_check step must be positive, got {h}")));
    }
    let (loss, analytic) = f(theta);
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss at base point".into()));
    }
    if analytic.len() != theta.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            theta.len()
        )));
    }
    let mut probe = theta.to_vec();
    let mut numeric = Vec::with_capacity(theta.len());
    let mut max_rel_error = 0.0f64;
    let mut worst_index = None;
    for i in 0..theta.len() {
        let original = probe[i];
        let mut at = |offset: f64| -> Result<f64> {
            probe[i] = original + offset;
            let (value, _) = f(&probe);
            if value.is_finite() {
                Ok(value)
            } else {
                Err(Error::NonFinite(format!("loss at probe of coordinate {i}")))
            }
        };
        let fd = match stencil {
            Stencil::Central => (at(h)? - at(-h)?) / (2.0 * h),
            Stencil::FivePoint => (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h),
        };
        probe[i] = original;
        let a = analytic[i];
        let err = (a - fd).abs() / a.abs().max(1.0);
        if err > max_rel_error || worst_index.is_none() {
            max_rel_error = max_rel_error.max(err);
            worst_index = Some(i);
        }
        numeric.push(fd);
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sum_is_zero() {
        assert_eq!(deterministic_sum(&[]), 0.0);
    }

    #[test]
    fn exact_small_sum() {
        assert_eq!(deterministic_sum(&[1.0, 2.0, 3.0]), 6.0);
    }

    #[test]
    fn left_fold_absorbs_small_term() {
        let values = [1e30f32, 1.0, -1e30];
        let reference = {
            let mut acc = 0.0f32;
            acc += values[0];
            acc += values[1];
            acc += values[2];
            acc
        };
        assert_eq!(deterministic_sum(&values), 0.0);
        assert_eq!(deterministic_sum(&values).to_bits(), reference.to_bits());
    }

    #[test]
    fn order_sensitivity_is_real() {
        let a = [1e30f32, 1.0, -1e30];
        let b = [1e30f32, -1e30, 1.0];
        assert_ne!(deterministic_sum(&a), deterministic_sum(&b));
        assert_eq!(deterministic_sum(&a).to_bits(), deterministic_sum(&a).to_bits());
    }

    #[test]
    fn quadratic_gradient() {
        let report = grad_check(|t| (t[0] * t[0], vec![2.0 * t[0]]), &[3.0], 1e-3).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert_eq!(report.analytic, vec![6.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let report = grad_check(|_| (4.0, vec![0.0, 0.0]), &[1.0, -2.0], 1e-3).unwrap();
        assert_eq!(report.analytic, vec![0.0, 0.0]);
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_probe_is_reported() {
        let err = grad_check(
            |t| {
                let v = if t[0] > 1.0 { f64::INFINITY } else { t[0] };
                (v, vec![1.0])
            },
            &[1.0],
            1e-3,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
