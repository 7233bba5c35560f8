//! Finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;

/// Relative error between an analytic and a finite-difference derivative.
/// The denominator is floored so near-zero gradient pairs compare on an
/// absolute scale instead of amplifying rounding noise.
fn relative_error<T: Scalar>(analytic: T, fd: T) -> T {
    let floor = T::from_f64(1e-5);
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(floor)
}

/// Compare the analytic gradient of `f` against central finite differences
/// `(f(p+eps) - f(p-eps)) / 2eps`, parameter by parameter, and return the
/// worst relative error.
///
/// `f` returns the scalar loss together with its analytic gradient set; the
/// gradient part is only used at the base point.
pub fn grad_check<T, F>(f: F, params: &ParamSet<T>, eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&ParamSet<T>) -> Result<(T, ParamSet<T>)>,
{
    let (base_loss, analytic) = f(params)?;
    if !base_loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss: {base_loss}")));
    }
    let mut worst = T::zero();
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.get(name)?.numel();
        let ga = analytic.get(name)?.clone();
        for i in 0..n {
            let orig = work.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + eps;
            let (loss_plus, _) = f(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig - eps;
            let (loss_minus, _) = f(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig;
            if !loss_plus.is_finite() || !loss_minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss while perturbing {name}[{i}]"
                )));
            }
            let fd = (loss_plus - loss_minus) / (eps + eps);
            let err = relative_error(ga.data()[i], fd);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
