//! Finite-difference gradient verification.
//!
//! The caller supplies a closure mapping a flat parameter vector to
//! `(loss, dloss/dparams)`. The checker first runs the closure twice at the
//! base point — if the two losses differ by even one bit the closure is not
//! a function of its inputs and every comparison after that would be noise,
//! so that is reported as its own error. It then probes a set of
//! coordinates with central differences.

use crate::{Error, Result};

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over the probed coordinates.
    pub max_rel_err: f64,
    /// Coordinate index where the maximum occurred.
    pub worst_coord: usize,
    /// How many coordinates were probed.
    pub checked: usize,
}

/// Relative error with a scale floor: for gradients near zero the absolute
/// difference is compared against 1e-3 instead of the values themselves,
/// otherwise rounding noise around 0/0 would dominate the report.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Compare analytic gradients against central differences at `x`.
///
/// `coords` selects which coordinates to probe (finite differences cost two
/// full forward passes each, so callers sample). `h` is the probe radius;
/// 1e-5 suits losses of order 1.
pub fn grad_check<F>(mut f: F, x: &[f64], coords: &[usize], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (loss_a, grad) = f(x)?;
    let (loss_b, _) = f(x)?;
    if loss_a.to_bits() != loss_b.to_bits() {
        return Err(Error::NonDeterministic { a: loss_a, b: loss_b });
    }
    if grad.len() != x.len() {
        return Err(crate::shape_err(
            "grad_check",
            format!("gradient length {} vs input {}", grad.len(), x.len()),
        ));
    }

    let mut probe = x.to_vec();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst_coord: 0, checked: 0 };
    for &i in coords {
        if i >= x.len() {
            return Err(crate::shape_err(
                "grad_check",
                format!("coordinate {i} of {}", x.len()),
            ));
        }
        probe[i] = x[i] + h;
        let (up, _) = f(&probe)?;
        probe[i] = x[i] - h;
        let (down, _) = f(&probe)?;
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        let err = rel_err(grad[i], numeric);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_coord = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        // f(x) = Σ x_i² has gradient 2x.
        let f = |x: &[f64]| {
            let loss: f64 = x.iter().map(|v| v * v).sum();
            Ok((loss, x.iter().map(|v| 2.0 * v).collect()))
        };
        let x = [0.5, -1.5, 2.0, 0.0];
        let coords = [0, 1, 2, 3];
        let report = grad_check(f, &x, &coords, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-8, "err {}", report.max_rel_err);
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let f = |x: &[f64]| {
            let loss: f64 = x.iter().map(|v| v * v).sum();
            // Off by a factor of two.
            Ok((loss, x.to_vec()))
        };
        let report = grad_check(f, &[1.0, 2.0], &[0, 1], 1e-5).unwrap();
        assert!(report.max_rel_err > 0.4, "err {}", report.max_rel_err);
    }

    #[test]
    fn nondeterministic_closure_is_rejected() {
        let mut calls = 0u32;
        let f = move |x: &[f64]| {
            calls += 1;
            Ok((x[0] + calls as f64 * 1e-12, vec![1.0]))
        };
        match grad_check(f, &[1.0], &[0], 1e-5) {
            Err(Error::NonDeterministic { .. }) => {}
            other => panic!("expected a determinism failure, got {other:?}"),
        }
    }

    #[test]
    fn zero_gradient_near_zero_numeric_passes_via_scale_floor() {
        // Flat function: analytic 0, numeric picks up only rounding noise.
        let f = |_: &[f64]| Ok((1.0, vec![0.0]));
        let report = grad_check(f, &[3.0], &[0], 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-6);
    }
}
