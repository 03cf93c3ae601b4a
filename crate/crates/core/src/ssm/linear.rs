//! Time-invariant SSM: the recurrent form and the equivalent causal
//! convolution with kernel `K_k = C A_bar^k B_bar`.

use super::zoh::{discretize_zoh, DiscreteSsm};
use crate::error::{Error, Result};
use crate::real::Real;

/// Continuous diagonal SSM `h' = A h + B u`, `y = C h + D u`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams<T> {
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d: T,
    pub delta: T,
}

impl<T: Real> SsmParams<T> {
    pub fn new(a: Vec<T>, b: Vec<T>, c: Vec<T>, d: T, delta: T) -> Result<Self> {
        let n = a.len();
        if n == 0 || b.len() != n || c.len() != n {
            return Err(Error::dim(
                "ssm_params",
                format!("A:{n} B:{} C:{}", b.len(), c.len()),
            ));
        }
        if let Some(bad) = a.iter().find(|v| !(**v < T::zero())) {
            return Err(Error::Domain(format!(
                "A entries must be strictly negative, found {bad}"
            )));
        }
        if !(delta > T::zero()) {
            return Err(Error::Domain(format!(
                "timestep must be positive, got {delta}"
            )));
        }
        Ok(SsmParams { a, b, c, d, delta })
    }

    pub fn state_dim(&self) -> usize {
        self.a.len()
    }

    pub fn discretize(&self) -> Result<DiscreteSsm<T>> {
        discretize_zoh(&self.a, &self.b, self.delta)
    }
}

/// `h_k = A_bar h_{k-1} + B_bar u_k`, `y_k = C h_k + D u_k`.
pub fn scan_recurrent<T: Real>(
    disc: &DiscreteSsm<T>,
    c: &[T],
    d: T,
    u: &[T],
    h0: &[T],
) -> Result<Vec<T>> {
    let n = disc.a_bar.len();
    if c.len() != n || h0.len() != n || disc.b_bar.len() != n {
        return Err(Error::dim(
            "ssm_scan_recurrent",
            format!("state dim {n}, C {}, h0 {}", c.len(), h0.len()),
        ));
    }
    if u.is_empty() {
        return Err(Error::Domain("sequence length must be at least 1".into()));
    }
    if h0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("initial state is not finite".into()));
    }
    let mut h = h0.to_vec();
    let mut y = Vec::with_capacity(u.len());
    for (k, &uk) in u.iter().enumerate() {
        let mut acc = d * uk;
        for i in 0..n {
            h[i] = disc.a_bar[i] * h[i] + disc.b_bar[i] * uk;
            acc += c[i] * h[i];
        }
        if !acc.is_finite() {
            return Err(Error::Numeric(format!("non-finite state at step {k}")));
        }
        y.push(acc);
    }
    Ok(y)
}

/// `[C B_bar, C A_bar B_bar, ..., C A_bar^{len-1} B_bar]`.
pub fn kernel<T: Real>(disc: &DiscreteSsm<T>, c: &[T], len: usize) -> Result<Vec<T>> {
    if len == 0 {
        return Err(Error::Domain("kernel length must be positive".into()));
    }
    if c.len() != disc.a_bar.len() {
        return Err(Error::dim(
            "ssm_kernel",
            format!("C {} vs state {}", c.len(), disc.a_bar.len()),
        ));
    }
    let mut power = disc.b_bar.clone();
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(c.iter().zip(&power).map(|(&ci, &pi)| ci * pi).sum());
        power
            .iter_mut()
            .zip(&disc.a_bar)
            .for_each(|(p, &a)| *p *= a);
    }
    Ok(out)
}

/// Causal convolution `y_k = sum_{j<=k} K_j u_{k-j}` (zero initial state, no skip).
pub fn kernel_apply<T: Real>(disc: &DiscreteSsm<T>, c: &[T], u: &[T]) -> Result<Vec<T>> {
    let k = kernel(disc, c, u.len())?;
    Ok((0..u.len())
        .map(|i| (0..=i).map(|j| k[j] * u[i - j]).sum())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half() -> DiscreteSsm<f64> {
        DiscreteSsm {
            a_bar: vec![0.5],
            b_bar: vec![1.0],
        }
    }

    #[test]
    fn hand_recurrence() {
        let y = scan_recurrent(&half(), &[1.0], 0.0, &[1.0, 0.0, 0.0], &[0.0]).unwrap();
        assert_eq!(y, vec![1.0, 0.5, 0.25]);
    }

    #[test]
    fn zero_input_zero_output_and_pure_skip() {
        let y = scan_recurrent(&half(), &[1.0], 0.0, &[0.0; 5], &[0.0]).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
        let u = [0.3, -1.0, 2.0];
        let y = scan_recurrent(&half(), &[0.0], 1.0, &u, &[0.0]).unwrap();
        assert_eq!(y, u.to_vec());
    }

    #[test]
    fn kernel_powers_and_impulse_response() {
        assert_eq!(kernel(&half(), &[1.0], 3).unwrap(), vec![1.0, 0.5, 0.25]);
        let y = kernel_apply(&half(), &[1.0], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(y, kernel(&half(), &[1.0], 4).unwrap());
    }

    #[test]
    fn zero_length_kernel_rejected() {
        assert!(matches!(kernel(&half(), &[1.0], 0), Err(Error::Domain(_))));
    }

    #[test]
    fn unstable_a_rejected() {
        assert!(SsmParams::new(vec![0.1f64], vec![1.0], vec![1.0], 0.0, 1.0).is_err());
    }
}
