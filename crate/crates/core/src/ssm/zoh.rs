use crate::error::{Error, Result};
use crate::real::Real;

/// Below this magnitude of `delta * a` the input coefficient switches to its
/// first-order limit `delta`, avoiding the removable singularity at `a = 0`.
pub const TAYLOR_GUARD: f64 = 1e-8;

/// Zero-order-hold coefficients for one diagonal entry `a` and step `delta`:
/// returns `(exp(delta*a), (exp(delta*a) - 1) / a)`. The second value
/// multiplies the continuous `B` row to give the discrete one.
#[inline]
pub fn zoh_coefficients<T: Real>(a: T, delta: T) -> (T, T) {
    let da = delta * a;
    let a_bar = da.exp();
    let scale = if da.abs() < T::lit(TAYLOR_GUARD) {
        delta
    } else {
        da.exp_m1() / a
    };
    (a_bar, scale)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm<T> {
    /// Diagonal of the discrete state matrix.
    pub a_bar: Vec<T>,
    pub b_bar: Vec<T>,
}

pub fn discretize_zoh<T: Real>(a: &[T], b: &[T], delta: T) -> Result<DiscreteSsm<T>> {
    if !(delta > T::zero()) {
        return Err(Error::Domain(format!(
            "timestep must be positive, got {delta}"
        )));
    }
    if a.len() != b.len() {
        return Err(Error::dim(
            "discretize_zoh",
            format!("A has {} entries, B has {}", a.len(), b.len()),
        ));
    }
    if a.iter().any(|v| v.is_zero()) {
        return Err(Error::Domain("A diagonal entries must be nonzero".into()));
    }
    let (a_bar, b_bar) = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| {
            let (ab, scale) = zoh_coefficients(ai, delta);
            (ab, scale * bi)
        })
        .unzip();
    Ok(DiscreteSsm { a_bar, b_bar })
}

/// Per-step discretization of the selective variant: the same rule as
/// [`discretize_zoh`] evaluated with the step's own `delta_k` and `b_k`.
pub fn selective_discretize<T: Real>(a: &[T], delta_k: T, b_k: &[T]) -> Result<DiscreteSsm<T>> {
    discretize_zoh(a, b_k, delta_k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_closed_form() {
        let d = discretize_zoh(&[-1.0f64], &[1.0], 1.0).unwrap();
        assert!((d.a_bar[0] - (-1.0f64).exp()).abs() < 1e-15);
        assert!((d.b_bar[0] - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert!((d.a_bar[0] - 0.367879).abs() < 1e-6);
        assert!((d.b_bar[0] - 0.632121).abs() < 1e-6);
    }

    #[test]
    fn taylor_branch_for_tiny_steps() {
        let d = discretize_zoh(&[-1.0f64], &[2.0], 1e-10).unwrap();
        assert_eq!(d.b_bar[0], 1e-10 * 2.0);
        assert!((d.a_bar[0] - (1.0 - 1e-10)).abs() < 1e-18);
    }

    #[test]
    fn non_positive_step_is_domain_error() {
        assert!(matches!(
            discretize_zoh(&[-1.0f64], &[1.0], 0.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            discretize_zoh(&[-1.0f64], &[1.0], -0.5),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn doubling_the_step_shrinks_a_bar() {
        let a = [-1.0f64, -3.0];
        let one = selective_discretize(&a, 0.3, &[1.0, 1.0]).unwrap();
        let two = selective_discretize(&a, 0.6, &[1.0, 1.0]).unwrap();
        for (x, y) in one.a_bar.iter().zip(&two.a_bar) {
            assert!(y < x);
        }
    }
}
