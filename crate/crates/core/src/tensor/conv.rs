//! Convolution geometry plus the im2col / col2im lowering shared by the
//! forward convolution and its transpose.
//!
//! Everything is expressed in three spatial axes `[D, H, W]`; a 2D
//! convolution is the `D = 1`, `kd = 1` special case.

use crate::error::{arg_err, shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub dilation: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    /// Zero padding of `dilation * (k - 1) / 2` per side, so stride-1
    /// convolutions keep the spatial size.
    pub fn same(kernel: [usize; 3], stride: [usize; 3], dilation: [usize; 3]) -> Self {
        let padding = [0, 1, 2].map(|a| dilation[a] * (kernel[a] - 1) / 2);
        ConvGeometry { kernel, stride, dilation, padding }
    }

    pub fn planar(k: usize, stride: usize, dilation: usize) -> Self {
        Self::same([1, k, k], [1, stride, stride], [1, dilation, dilation])
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.kernel[a] == 0 || self.stride[a] == 0 || self.dilation[a] == 0 {
                return Err(arg_err!("kernel, stride and dilation must be >= 1: {self:?}"));
            }
            if self.kernel[a] % 2 == 0 {
                return Err(arg_err!("kernel extents must be odd: {:?}", self.kernel));
            }
        }
        Ok(())
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// `floor((n + 2p - dil*(k-1) - 1) / stride) + 1` per axis.
    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = self.dilation[a] * (self.kernel[a] - 1) + 1;
            let padded = input[a] + 2 * self.padding[a];
            if padded < span {
                return Err(shape_err!(
                    "input extent {} on axis {a} is too small for kernel span {span} (padding {})",
                    input[a],
                    self.padding[a]
                ));
            }
            out[a] = (padded - span) / self.stride[a] + 1;
        }
        Ok(out)
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `t`, i.e. the
/// outputs whose input coordinate `o*s + t*d - p` lands inside `[0, n)`.
#[inline]
fn valid_range(n: usize, out: usize, s: usize, d: usize, p: usize, t: usize) -> (usize, usize) {
    let shift = (t * d) as isize - p as isize;
    // smallest o with o*s + shift >= 0
    let lo = if shift >= 0 { 0 } else { ((-shift) as usize).div_ceil(s) };
    // largest o with o*s + shift <= n-1
    let top = n as isize - 1 - shift;
    let hi = if top < 0 { 0 } else { (top as usize / s + 1).min(out) };
    (lo.min(hi), hi)
}

/// Lowers one sample `x: [C, D, H, W]` to `cols: [C * taps, Do * Ho * Wo]`.
pub(crate) fn im2col(
    x: &[f32],
    channels: usize,
    input: [usize; 3],
    geom: &ConvGeometry,
    output: [usize; 3],
    cols: &mut [f32],
) {
    let [id, ih, iw] = input;
    let [od, oh, ow] = output;
    let [kd, kh, kw] = geom.kernel;
    let [sd, sh, sw] = geom.stride;
    let [dd, dh, dw] = geom.dilation;
    let [pd, ph, pw] = geom.padding;
    let plane = oh * ow;
    let p = od * plane;
    debug_assert_eq!(cols.len(), channels * geom.taps() * p);

    let mut row = 0;
    for c in 0..channels {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for tz in 0..kd {
            let (zlo, zhi) = valid_range(id, od, sd, dd, pd, tz);
            for ty in 0..kh {
                let (ylo, yhi) = valid_range(ih, oh, sh, dh, ph, ty);
                for tx in 0..kw {
                    let (xlo, xhi) = valid_range(iw, ow, sw, dw, pw, tx);
                    let dst = &mut cols[row * p..(row + 1) * p];
                    row += 1;
                    if zlo >= zhi || ylo >= yhi || xlo >= xhi {
                        dst.fill(0.0);
                        continue;
                    }
                    dst[..zlo * plane].fill(0.0);
                    dst[zhi * plane..].fill(0.0);
                    for oz in zlo..zhi {
                        let iz = oz * sd + tz * dd - pd;
                        let dplane = &mut dst[oz * plane..(oz + 1) * plane];
                        dplane[..ylo * ow].fill(0.0);
                        dplane[yhi * ow..].fill(0.0);
                        for oy in ylo..yhi {
                            let iy = oy * sh + ty * dh - ph;
                            let src = &xc[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                            let drow = &mut dplane[oy * ow..(oy + 1) * ow];
                            drow[..xlo].fill(0.0);
                            drow[xhi..].fill(0.0);
                            let x0 = xlo * sw + tx * dw - pw;
                            if sw == 1 {
                                drow[xlo..xhi].copy_from_slice(&src[x0..x0 + (xhi - xlo)]);
                            } else {
                                for (k, v) in drow[xlo..xhi].iter_mut().enumerate() {
                                    *v = src[x0 + k * sw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds `cols` back into `x`.
pub(crate) fn col2im(
    cols: &[f32],
    channels: usize,
    input: [usize; 3],
    geom: &ConvGeometry,
    output: [usize; 3],
    x: &mut [f32],
) {
    let [id, ih, iw] = input;
    let [od, oh, ow] = output;
    let [kd, kh, kw] = geom.kernel;
    let [sd, sh, sw] = geom.stride;
    let [dd, dh, dw] = geom.dilation;
    let [pd, ph, pw] = geom.padding;
    let plane = oh * ow;
    let p = od * plane;

    let mut row = 0;
    for c in 0..channels {
        let xc = &mut x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for tz in 0..kd {
            let (zlo, zhi) = valid_range(id, od, sd, dd, pd, tz);
            for ty in 0..kh {
                let (ylo, yhi) = valid_range(ih, oh, sh, dh, ph, ty);
                for tx in 0..kw {
                    let (xlo, xhi) = valid_range(iw, ow, sw, dw, pw, tx);
                    let src = &cols[row * p..(row + 1) * p];
                    row += 1;
                    if xlo >= xhi {
                        continue;
                    }
                    let x0 = xlo * sw + tx * dw - pw;
                    for oz in zlo..zhi {
                        let iz = oz * sd + tz * dd - pd;
                        for oy in ylo..yhi {
                            let iy = oy * sh + ty * dh - ph;
                            let dst = &mut xc[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                            let s = &src[oz * plane + oy * ow + xlo..oz * plane + oy * ow + xhi];
                            if sw == 1 {
                                for (d, v) in dst[x0..x0 + s.len()].iter_mut().zip(s) {
                                    *d += v;
                                }
                            } else {
                                for (k, v) in s.iter().enumerate() {
                                    dst[x0 + k * sw] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major matrix view used by [`gemm`]: `(ptr, rows, cols, row_stride, col_stride)`.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    data: &'a [f32],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Mat { data, rows, cols, rs: cols as isize, cs: 1 }
    }

    pub fn t(self) -> Self {
        Mat { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }
}

/// `c = a @ b + beta * c` with `c` row-major `[a.rows, b.cols]`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, beta: f32, c: &mut [f32]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the views' strides address only elements inside their slices
    // (checked by `Mat::new`), and `c` holds at least `m * n` values.
    unsafe {
        matrixmultiply::sgemm(m, k, n, 1.0, a.data.as_ptr(), a.rs, a.cs, b.data.as_ptr(), b.rs, b.cs, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_preserves_extent() {
        let g = ConvGeometry::same([3, 3, 3], [1, 1, 1], [1, 2, 3]);
        assert_eq!(g.padding, [1, 2, 3]);
        assert_eq!(g.output_extent([8, 8, 8]).unwrap(), [8, 8, 8]);
    }

    #[test]
    fn strided_extent_formula() {
        let g = ConvGeometry { kernel: [1, 3, 3], stride: [1, 3, 3], dilation: [1; 3], padding: [0; 3] };
        assert_eq!(g.output_extent([1, 48, 48]).unwrap(), [1, 16, 16]);
        let g = ConvGeometry::planar(3, 2, 1);
        assert_eq!(g.output_extent([1, 16, 16]).unwrap(), [1, 8, 8]);
        assert_eq!(g.output_extent([1, 21, 21]).unwrap(), [1, 11, 11]);
    }

    #[test]
    fn rejects_even_kernels_and_tiny_inputs() {
        let g = ConvGeometry::same([1, 2, 2], [1; 3], [1; 3]);
        assert!(g.validate().is_err());
        let g = ConvGeometry { kernel: [1, 5, 5], stride: [1; 3], dilation: [1; 3], padding: [0; 3] };
        assert!(g.output_extent([1, 3, 3]).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry::same([3, 3, 3], [2, 1, 2], [1, 2, 1]);
        let input = [4, 5, 6];
        let out = g.output_extent(input).unwrap();
        let c = 2;
        let n_in = c * input.iter().product::<usize>();
        let n_cols = c * g.taps() * out.iter().product::<usize>();
        let x: Vec<f32> = (0..n_in).map(|i| ((i * 7919) % 13) as f32 - 6.0).collect();
        let y: Vec<f32> = (0..n_cols).map(|i| ((i * 104729) % 11) as f32 - 5.0).collect();
        let mut cols = vec![0.0; n_cols];
        im2col(&x, c, input, &g, out, &mut cols);
        let mut back = vec![0.0; n_in];
        col2im(&y, c, input, &g, out, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert_eq!(lhs, rhs);
    }
}
