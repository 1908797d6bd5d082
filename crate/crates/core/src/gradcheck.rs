//! Finite-difference gradient oracle and the comparison report used to
//! verify every reverse-mode path in the crate.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Central-difference gradient of a scalar-valued function.
///
/// Component `i` is `(f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps)`. The
/// function is evaluated in whatever precision `T` is; anything narrower
/// than f64 makes the estimate meaningless, so verification suites run wide.
pub fn finite_diff_grad<T: Element>(
    f: impl Fn(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let eps_t = T::from_f64(eps);
    let two_eps = T::from_f64(2.0 * eps);
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps_t;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - eps_t;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                context: "finite_diff_grad perturbed evaluation".into(),
                index: i,
                value: if fp.is_finite() { fm.to_f64() } else { fp.to_f64() },
            });
        }
        grad.data_mut()[i] = (fp - fm) / two_eps;
    }
    Ok(grad)
}

/// Directional derivative `(f(x + eps*v) - f(x - eps*v)) / (2*eps)`.
///
/// One pair of evaluations instead of one per component; this is the cheap
/// probe used by the per-operation vjp property tests.
pub fn finite_diff_directional<T: Element>(
    f: impl Fn(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    direction: &Tensor<T>,
    eps: f64,
) -> Result<T> {
    if x.shape() != direction.shape() {
        return Err(Error::shape("finite_diff_directional", x.shape(), direction.shape()));
    }
    let step = direction.scale(T::from_f64(eps));
    let fp = f(&x.add(&step)?)?;
    let fm = f(&x.sub(&step)?)?;
    if !fp.is_finite() || !fm.is_finite() {
        return Err(Error::NonFinite {
            context: "finite_diff_directional evaluation".into(),
            index: 0,
            value: if fp.is_finite() { fm.to_f64() } else { fp.to_f64() },
        });
    }
    Ok((fp - fm) / T::from_f64(2.0 * eps))
}

/// One component that violated the tolerance.
#[derive(Debug, Clone, Copy)]
pub struct Offender {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|a - n| / (abs_tol + rel_tol * max(|a|, |n|))`; > 1 means failure.
    pub violation: f64,
}

/// Per-component comparison of an analytic gradient against a numeric one.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub total: usize,
    pub failed: usize,
    /// Worst offenders by violation ratio, largest first (up to 8 kept).
    pub worst: Vec<Offender>,
    /// max over components of |a-n| / max(|a|, |n|), ignoring pairs where
    /// both magnitudes are below the absolute tolerance.
    pub max_rel_err: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failed == 0
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{} components within tol (rel {:.1e}, abs {:.1e}); max rel err {:.3e}",
            self.total - self.failed,
            self.total,
            self.rel_tol,
            self.abs_tol,
            self.max_rel_err
        )?;
        if !self.worst.is_empty() && self.failed > 0 {
            write!(f, "; worst offenders:")?;
            for o in &self.worst {
                write!(
                    f,
                    " [#{} a={:.6e} n={:.6e} x{:.2}]",
                    o.index, o.analytic, o.numeric, o.violation
                )?;
            }
        }
        Ok(())
    }
}

/// Compare per component with `|a - n| <= abs_tol + rel_tol * max(|a|, |n|)`.
pub fn check_gradient<T: Element>(
    analytic: &Tensor<T>,
    numeric: &Tensor<T>,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<GradCheckReport> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::shape("check_gradient", analytic.shape(), numeric.shape()));
    }
    let mut failed = 0;
    let mut worst: Vec<Offender> = Vec::new();
    let mut max_rel_err: f64 = 0.0;
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data().iter()).enumerate() {
        let (a, n) = (a.to_f64(), n.to_f64());
        let diff = (a - n).abs();
        let scale = a.abs().max(n.abs());
        let allowed = abs_tol + rel_tol * scale;
        let violation = if allowed > 0.0 { diff / allowed } else if diff > 0.0 { f64::INFINITY } else { 0.0 };
        if violation > 1.0 {
            failed += 1;
        }
        if scale > abs_tol {
            max_rel_err = max_rel_err.max(diff / scale);
        }
        if violation > worst.last().map_or(0.0, |o| o.violation) || worst.len() < 8 {
            worst.push(Offender {
                index: i,
                analytic: a,
                numeric: n,
                violation,
            });
            worst.sort_by(|x, y| y.violation.total_cmp(&x.violation));
            worst.truncate(8);
        }
    }
    Ok(GradCheckReport {
        total: analytic.numel(),
        failed,
        worst,
        max_rel_err,
        rel_tol,
        abs_tol,
    })
}
