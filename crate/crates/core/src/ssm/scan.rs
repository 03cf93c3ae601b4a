//! Associative scan over the monoid of affine diagonal maps
//! `h -> a ⊙ h + b`.

use crate::real::Real;

/// Default chunk length of the two-level scan.
pub const DEFAULT_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct ScanElement<T> {
    pub a: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Real> ScanElement<T> {
    pub fn identity(n: usize) -> Self {
        ScanElement {
            a: vec![T::one(); n],
            b: vec![T::zero(); n],
        }
    }

    /// `self ∘ earlier`: apply `earlier` first, then `self`.
    pub fn combine(&self, earlier: &ScanElement<T>) -> ScanElement<T> {
        let a = self
            .a
            .iter()
            .zip(&earlier.a)
            .map(|(&x, &y)| x * y)
            .collect();
        let b = self
            .a
            .iter()
            .zip(&earlier.b)
            .zip(&self.b)
            .map(|((&a2, &b1), &b2)| a2 * b1 + b2)
            .collect();
        ScanElement { a, b }
    }
}

/// Inclusive scan of element-wise combined elements; `out[k] = e_k ∘ … ∘ e_0`.
pub fn inclusive_scan<T: Real>(elements: &[ScanElement<T>], chunk: usize) -> Vec<ScanElement<T>> {
    let Some(first) = elements.first() else {
        return Vec::new();
    };
    let n = first.a.len();
    let mut a: Vec<T> = elements.iter().flat_map(|e| e.a.iter().copied()).collect();
    let mut b: Vec<T> = elements.iter().flat_map(|e| e.b.iter().copied()).collect();
    inclusive_scan_soa(&mut a, &mut b, n, chunk);
    a.chunks(n)
        .zip(b.chunks(n))
        .map(|(a, b)| ScanElement {
            a: a.to_vec(),
            b: b.to_vec(),
        })
        .collect()
}

/// In-place inclusive scan on struct-of-arrays storage (`len x n` each).
///
/// Two-level: each chunk is scanned independently, chunk totals are scanned
/// across chunks, then every chunk after the first is offset by the carry of
/// its predecessors. On return `b[k]` is the state after step `k` from a zero
/// initial state and `a[k]` the accumulated multiplier.
pub fn inclusive_scan_soa<T: Real>(a: &mut [T], b: &mut [T], n: usize, chunk: usize) {
    debug_assert_eq!(a.len(), b.len());
    if n == 0 || a.is_empty() {
        return;
    }
    let len = a.len() / n;
    let chunk = chunk.max(1);
    let chunks = len.div_ceil(chunk);

    // local scans (independent per chunk)
    for c in 0..chunks {
        let start = c * chunk;
        let end = ((c + 1) * chunk).min(len);
        for k in start + 1..end {
            let (prev, cur) = ((k - 1) * n, k * n);
            for i in 0..n {
                let ai = a[cur + i];
                b[cur + i] = ai * b[prev + i] + b[cur + i];
                a[cur + i] = ai * a[prev + i];
            }
        }
    }

    // scan of chunk totals
    let mut carry_a = vec![T::zero(); chunks * n];
    let mut carry_b = vec![T::zero(); chunks * n];
    for c in 0..chunks {
        let last = (((c + 1) * chunk).min(len) - 1) * n;
        for i in 0..n {
            let (ta, tb) = (a[last + i], b[last + i]);
            if c == 0 {
                carry_a[i] = ta;
                carry_b[i] = tb;
            } else {
                let p = (c - 1) * n + i;
                carry_a[c * n + i] = ta * carry_a[p];
                carry_b[c * n + i] = ta * carry_b[p] + tb;
            }
        }
    }

    // propagate carries (independent per chunk)
    for c in 1..chunks {
        let start = c * chunk;
        let end = ((c + 1) * chunk).min(len);
        let p = (c - 1) * n;
        for k in start..end {
            for i in 0..n {
                let idx = k * n + i;
                b[idx] = a[idx] * carry_b[p + i] + b[idx];
                a[idx] *= carry_a[p + i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn element(vals: &[(f64, f64)]) -> ScanElement<f64> {
        ScanElement {
            a: vals.iter().map(|v| v.0).collect(),
            b: vals.iter().map(|v| v.1).collect(),
        }
    }

    fn max_diff(x: &ScanElement<f64>, y: &ScanElement<f64>) -> f64 {
        x.a.iter()
            .zip(&y.a)
            .chain(x.b.iter().zip(&y.b))
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max)
    }

    proptest! {
        #[test]
        fn combine_is_associative(v in prop::collection::vec((-1.0f64..1.0, -2.0f64..2.0), 12)) {
            let (e1, e2, e3) = (element(&v[0..4]), element(&v[4..8]), element(&v[8..12]));
            let left = e3.combine(&e2).combine(&e1);
            let right = e3.combine(&e2.combine(&e1));
            prop_assert!(max_diff(&left, &right) < 1e-12);
        }

        #[test]
        fn identity_is_neutral(v in prop::collection::vec((-1.0f64..1.0, -2.0f64..2.0), 3)) {
            let e = element(&v);
            let id = ScanElement::identity(3);
            prop_assert_eq!(e.combine(&id), e.clone());
            prop_assert_eq!(id.combine(&e), e);
        }

        #[test]
        fn chunked_scan_matches_left_fold(
            v in prop::collection::vec((-1.0f64..1.0, -2.0f64..2.0), 2..200),
            chunk in 1usize..20,
        ) {
            let elems: Vec<_> = v.iter().map(|&p| element(&[p])).collect();
            let scanned = inclusive_scan(&elems, chunk);
            let mut acc = ScanElement::identity(1);
            for (e, s) in elems.iter().zip(&scanned) {
                acc = e.combine(&acc);
                prop_assert!(max_diff(&acc, s) < 1e-12);
            }
        }
    }
}
