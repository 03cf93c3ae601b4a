//! Slice-level convolution kernels (im2col + gemm, with direct paths for
//! depthwise and 1x1 cases). The tape wraps these with shape checks.

use crate::error::{Error, Result};
use crate::real::{gemm, Real, Strides};

/// Geometry of a (grouped) 2-D cross-correlation with square kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        batch: usize,
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || !c_in.is_multiple_of(groups) || !c_out.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "groups={groups} must divide both c_in={c_in} and c_out={c_out}"
            )));
        }
        if k == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "kernel {k} and stride {stride} must be positive"
            )));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {k} larger than padded input {h}x{w} (pad {pad})"),
            ));
        }
        Ok(ConvGeom {
            batch,
            c_in,
            c_out,
            h,
            w,
            k,
            stride,
            pad,
            groups,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn in_len(&self) -> usize {
        self.batch * self.c_in * self.h * self.w
    }
    pub fn out_len(&self) -> usize {
        self.batch * self.c_out * self.h_out * self.w_out
    }
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in / self.groups, self.k, self.k]
    }
    pub fn weight_len(&self) -> usize {
        self.weight_shape().iter().product()
    }
    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }
    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }
    fn col_rows(&self) -> usize {
        self.cin_g() * self.k * self.k
    }
    fn hw_out(&self) -> usize {
        self.h_out * self.w_out
    }
    fn is_depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output indices `lo..hi` along an axis whose input coordinate for tap
    /// `t` lies inside `0..extent`; the input index of `lo` is returned too.
    #[inline]
    fn span(&self, t: usize, extent: usize, out_extent: usize) -> (usize, usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if t >= p { 0 } else { (p - t).div_ceil(s) };
        let hi = if extent + p > t {
            ((extent + p - t - 1) / s + 1).min(out_extent)
        } else {
            0
        };
        if lo >= hi {
            return (0, 0, 0);
        }
        (lo, hi, lo * s + t - p)
    }
}

/// `dst[o] += alpha * src[start + o * stride]`
#[inline]
fn axpy_strided<T: Real>(dst: &mut [T], src: &[T], start: usize, stride: usize, alpha: T) {
    if stride == 1 {
        let n = dst.len();
        for (d, &v) in dst.iter_mut().zip(&src[start..start + n]) {
            *d += alpha * v;
        }
    } else {
        for (o, d) in dst.iter_mut().enumerate() {
            *d += alpha * src[start + o * stride];
        }
    }
}

/// `dst[start + o * stride] += alpha * src[o]`
#[inline]
fn scatter_strided<T: Real>(dst: &mut [T], src: &[T], start: usize, stride: usize, alpha: T) {
    if stride == 1 {
        for (d, &v) in dst[start..start + src.len()].iter_mut().zip(src) {
            *d += alpha * v;
        }
    } else {
        for (o, &v) in src.iter().enumerate() {
            dst[start + o * stride] += alpha * v;
        }
    }
}

/// `sum_o a[o] * b[start + o * stride]`
#[inline]
fn dot_strided<T: Real>(a: &[T], b: &[T], start: usize, stride: usize) -> T {
    if stride == 1 {
        a.iter()
            .zip(&b[start..start + a.len()])
            .map(|(&x, &y)| x * y)
            .sum()
    } else {
        a.iter()
            .enumerate()
            .map(|(o, &x)| x * b[start + o * stride])
            .sum()
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let hw_o = g.hw_out();
    for c in 0..g.cin_g() {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi, iy0) = g.span(ky, g.h, g.h_out);
            for kx in 0..g.k {
                let (xlo, xhi, ix0) = g.span(kx, g.w, g.w_out);
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw_o..(row + 1) * hw_o];
                dst[..ylo * g.w_out].fill(T::zero());
                dst[yhi * g.w_out..].fill(T::zero());
                for oy in ylo..yhi {
                    let iy = iy0 + (oy - ylo) * g.stride;
                    let out_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    out_row[..xlo].fill(T::zero());
                    out_row[xhi..].fill(T::zero());
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        out_row[xlo..xhi].copy_from_slice(&src[ix0..ix0 + xhi - xlo]);
                    } else {
                        for (o, d) in out_row[xlo..xhi].iter_mut().enumerate() {
                            *d = src[ix0 + o * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let hw_o = g.hw_out();
    for c in 0..g.cin_g() {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi, iy0) = g.span(ky, g.h, g.h_out);
            for kx in 0..g.k {
                let (xlo, xhi, ix0) = g.span(kx, g.w, g.w_out);
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw_o..(row + 1) * hw_o];
                for oy in ylo..yhi {
                    let iy = iy0 + (oy - ylo) * g.stride;
                    let vals = &src[oy * g.w_out + xlo..oy * g.w_out + xhi];
                    scatter_strided(
                        &mut plane[iy * g.w..(iy + 1) * g.w],
                        vals,
                        ix0,
                        g.stride,
                        T::one(),
                    );
                }
            }
        }
    }
}

/// `y = conv(x, w) + bias`, overwriting `y`.
pub fn conv_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom, y: &mut [T]) {
    debug_assert_eq!(x.len(), g.in_len());
    debug_assert_eq!(w.len(), g.weight_len());
    debug_assert_eq!(y.len(), g.out_len());
    let (cin_g, cout_g, rows, hw_o) = (g.cin_g(), g.cout_g(), g.col_rows(), g.hw_out());
    let in_plane = g.h * g.w;
    if g.is_depthwise() {
        y.fill(T::zero());
        for b in 0..g.batch {
            for c in 0..g.c_in {
                let xp = &x[(b * g.c_in + c) * in_plane..][..in_plane];
                let yp = &mut y[(b * g.c_out + c) * hw_o..][..hw_o];
                let wk = &w[c * g.k * g.k..][..g.k * g.k];
                depthwise_plane(xp, wk, g, yp);
            }
        }
    } else {
        let mut cols = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * hw_o]
        };
        for b in 0..g.batch {
            for gi in 0..g.groups {
                let xg = &x[(b * g.c_in + gi * cin_g) * in_plane..][..cin_g * in_plane];
                let wg = &w[gi * cout_g * rows..][..cout_g * rows];
                let yg = &mut y[(b * g.c_out + gi * cout_g) * hw_o..][..cout_g * hw_o];
                let src: &[T] = if g.is_pointwise() {
                    xg
                } else {
                    im2col(xg, g, &mut cols);
                    &cols
                };
                gemm(
                    cout_g,
                    rows,
                    hw_o,
                    T::one(),
                    wg,
                    Strides::row_major(rows),
                    src,
                    Strides::row_major(hw_o),
                    T::zero(),
                    yg,
                    Strides::row_major(hw_o),
                );
            }
        }
    }
    if let Some(bias) = bias {
        for b in 0..g.batch {
            for (c, &bv) in bias.iter().enumerate() {
                y[(b * g.c_out + c) * hw_o..][..hw_o]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
    }
}

fn depthwise_plane<T: Real>(xp: &[T], wk: &[T], g: &ConvGeom, yp: &mut [T]) {
    for ky in 0..g.k {
        let (ylo, yhi, iy0) = g.span(ky, g.h, g.h_out);
        for kx in 0..g.k {
            let (xlo, xhi, ix0) = g.span(kx, g.w, g.w_out);
            let wv = wk[ky * g.k + kx];
            for oy in ylo..yhi {
                let iy = iy0 + (oy - ylo) * g.stride;
                let xrow = &xp[iy * g.w..(iy + 1) * g.w];
                let yrow = &mut yp[oy * g.w_out + xlo..oy * g.w_out + xhi];
                axpy_strided(yrow, xrow, ix0, g.stride, wv);
            }
        }
    }
}

/// Accumulates `d(loss)/dx` given `gy = d(loss)/dy`.
pub fn conv_backward_data<T: Real>(gy: &[T], w: &[T], g: &ConvGeom, gx: &mut [T]) {
    let (cin_g, cout_g, rows, hw_o) = (g.cin_g(), g.cout_g(), g.col_rows(), g.hw_out());
    let in_plane = g.h * g.w;
    if g.is_depthwise() {
        for b in 0..g.batch {
            for c in 0..g.c_in {
                let gyp = &gy[(b * g.c_out + c) * hw_o..][..hw_o];
                let gxp = &mut gx[(b * g.c_in + c) * in_plane..][..in_plane];
                let wk = &w[c * g.k * g.k..][..g.k * g.k];
                for ky in 0..g.k {
                    let (ylo, yhi, iy0) = g.span(ky, g.h, g.h_out);
                    for kx in 0..g.k {
                        let (xlo, xhi, ix0) = g.span(kx, g.w, g.w_out);
                        let wv = wk[ky * g.k + kx];
                        for oy in ylo..yhi {
                            let iy = iy0 + (oy - ylo) * g.stride;
                            let vals = &gyp[oy * g.w_out + xlo..oy * g.w_out + xhi];
                            scatter_strided(
                                &mut gxp[iy * g.w..(iy + 1) * g.w],
                                vals,
                                ix0,
                                g.stride,
                                wv,
                            );
                        }
                    }
                }
            }
        }
        return;
    }
    let mut cols = vec![T::zero(); rows * hw_o];
    for b in 0..g.batch {
        for gi in 0..g.groups {
            let wg = &w[gi * cout_g * rows..][..cout_g * rows];
            let gyg = &gy[(b * g.c_out + gi * cout_g) * hw_o..][..cout_g * hw_o];
            let gxg = &mut gx[(b * g.c_in + gi * cin_g) * in_plane..][..cin_g * in_plane];
            if g.is_pointwise() {
                gemm(
                    rows,
                    cout_g,
                    hw_o,
                    T::one(),
                    wg,
                    Strides::transposed(rows),
                    gyg,
                    Strides::row_major(hw_o),
                    T::one(),
                    gxg,
                    Strides::row_major(hw_o),
                );
            } else {
                gemm(
                    rows,
                    cout_g,
                    hw_o,
                    T::one(),
                    wg,
                    Strides::transposed(rows),
                    gyg,
                    Strides::row_major(hw_o),
                    T::zero(),
                    &mut cols,
                    Strides::row_major(hw_o),
                );
                col2im_add(&cols, g, gxg);
            }
        }
    }
}

/// Accumulates `d(loss)/dw` given the forward input `x` and `gy`.
pub fn conv_backward_weight<T: Real>(x: &[T], gy: &[T], g: &ConvGeom, gw: &mut [T]) {
    let (cin_g, cout_g, rows, hw_o) = (g.cin_g(), g.cout_g(), g.col_rows(), g.hw_out());
    let in_plane = g.h * g.w;
    if g.is_depthwise() {
        for b in 0..g.batch {
            for c in 0..g.c_in {
                let xp = &x[(b * g.c_in + c) * in_plane..][..in_plane];
                let gyp = &gy[(b * g.c_out + c) * hw_o..][..hw_o];
                let gwk = &mut gw[c * g.k * g.k..][..g.k * g.k];
                for ky in 0..g.k {
                    let (ylo, yhi, iy0) = g.span(ky, g.h, g.h_out);
                    for kx in 0..g.k {
                        let (xlo, xhi, ix0) = g.span(kx, g.w, g.w_out);
                        let mut acc = T::zero();
                        for oy in ylo..yhi {
                            let iy = iy0 + (oy - ylo) * g.stride;
                            let gyr = &gyp[oy * g.w_out + xlo..oy * g.w_out + xhi];
                            acc += dot_strided(gyr, &xp[iy * g.w..(iy + 1) * g.w], ix0, g.stride);
                        }
                        gwk[ky * g.k + kx] += acc;
                    }
                }
            }
        }
        return;
    }
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * hw_o]
    };
    for b in 0..g.batch {
        for gi in 0..g.groups {
            let xg = &x[(b * g.c_in + gi * cin_g) * in_plane..][..cin_g * in_plane];
            let gyg = &gy[(b * g.c_out + gi * cout_g) * hw_o..][..cout_g * hw_o];
            let gwg = &mut gw[gi * cout_g * rows..][..cout_g * rows];
            let src: &[T] = if g.is_pointwise() {
                xg
            } else {
                im2col(xg, g, &mut cols);
                &cols
            };
            gemm(
                cout_g,
                hw_o,
                rows,
                T::one(),
                gyg,
                Strides::row_major(hw_o),
                src,
                Strides::transposed(hw_o),
                T::one(),
                gwg,
                Strides::row_major(rows),
            );
        }
    }
}

/// Per-output-channel sums of `gy`, accumulated into `gb`.
pub fn bias_grad<T: Real>(gy: &[T], batch: usize, channels: usize, plane: usize, gb: &mut [T]) {
    for b in 0..batch {
        for (c, g) in gb.iter_mut().enumerate().take(channels) {
            *g += gy[(b * channels + c) * plane..][..plane]
                .iter()
                .copied()
                .sum::<T>();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (cin_g, cout_g) = (g.c_in / g.groups, g.c_out / g.groups);
        let mut y = vec![0.0; g.out_len()];
        for b in 0..g.batch {
            for co in 0..g.c_out {
                let gi = co / cout_g;
                for oy in 0..g.h_out {
                    for ox in 0..g.w_out {
                        let mut acc = 0.0;
                        for ci in 0..cin_g {
                            let c = gi * cin_g + ci;
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize
                                    {
                                        continue;
                                    }
                                    acc += x[((b * g.c_in + c) * g.h + iy as usize) * g.w
                                        + ix as usize]
                                        * w[((co * cin_g + ci) * g.k + ky) * g.k + kx];
                                }
                            }
                        }
                        y[((b * g.c_out + co) * g.h_out + oy) * g.w_out + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn all_paths_match_direct_summation() {
        let cases = [
            (2, 4, 7, 6, 6, 3, 1, 1, 1),
            (1, 4, 8, 8, 8, 3, 2, 1, 2),
            (2, 6, 6, 5, 5, 3, 1, 1, 6),
            (1, 3, 5, 4, 4, 1, 1, 0, 1),
            (1, 2, 2, 6, 6, 2, 2, 0, 1),
        ];
        for (i, &(b, ci, co, h, w, k, s, p, gr)) in cases.iter().enumerate() {
            let g = ConvGeom::new(b, ci, h, w, co, k, s, p, gr).unwrap();
            let x = pseudo(g.in_len(), i as u64);
            let wt = pseudo(g.weight_len(), 100 + i as u64);
            let mut y = vec![0.0; g.out_len()];
            conv_forward(&x, &wt, None, &g, &mut y);
            let want = naive(&x, &wt, &g);
            for (a, b) in y.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "case {i}: {a} vs {b}");
            }
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn backward_kernels_satisfy_adjoint_identities() {
        // <gy, conv(x, w)> = <dx, x> = <dw, w> since the map is bilinear
        let cases = [
            (2, 4, 7, 6, 6, 3, 1, 1, 1),
            (1, 4, 8, 8, 8, 3, 2, 1, 2),
            (2, 6, 6, 5, 5, 3, 1, 1, 6),
            (1, 6, 6, 9, 7, 3, 2, 1, 6),
            (1, 3, 5, 4, 4, 1, 1, 0, 1),
            (1, 2, 2, 6, 6, 2, 2, 0, 1),
            (1, 2, 3, 5, 5, 5, 1, 2, 1),
        ];
        for (i, &(b, ci, co, h, w, k, s, p, gr)) in cases.iter().enumerate() {
            let g = ConvGeom::new(b, ci, h, w, co, k, s, p, gr).unwrap();
            let x = pseudo(g.in_len(), 7 + i as u64);
            let wt = pseudo(g.weight_len(), 200 + i as u64);
            let gy = pseudo(g.out_len(), 300 + i as u64);
            let y = naive(&x, &wt, &g);
            let mut gx = vec![0.0; g.in_len()];
            conv_backward_data(&gy, &wt, &g, &mut gx);
            let mut gw = vec![0.0; g.weight_len()];
            conv_backward_weight(&x, &gy, &g, &mut gw);
            let lhs = dot(&gy, &y);
            assert!((lhs - dot(&gx, &x)).abs() < 1e-10, "case {i} data");
            assert!((lhs - dot(&gw, &wt)).abs() < 1e-10, "case {i} weight");
        }
    }

    #[test]
    fn spans_cover_exactly_the_in_bounds_taps() {
        for (h, k, s, p) in [
            (5, 3, 1, 1),
            (8, 3, 2, 1),
            (6, 2, 2, 0),
            (4, 5, 1, 2),
            (7, 3, 2, 0),
        ] {
            let g = ConvGeom::new(1, 1, h, h, 1, k, s, p, 1).unwrap();
            for t in 0..k {
                let (lo, hi, first) = g.span(t, h, g.h_out);
                for o in 0..g.h_out {
                    let i = (o * s + t) as isize - p as isize;
                    assert_eq!(
                        (lo..hi).contains(&o),
                        i >= 0 && i < h as isize,
                        "h{h} k{k} s{s} p{p} t{t} o{o}"
                    );
                }
                if lo < hi {
                    assert_eq!(first, lo * s + t - p);
                }
            }
        }
    }

    #[test]
    fn non_dividing_groups_is_config_error() {
        assert!(matches!(
            ConvGeom::new(1, 3, 4, 4, 4, 3, 1, 1, 2),
            Err(Error::Config(_))
        ));
    }
}
