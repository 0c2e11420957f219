//! Raw convolution and matrix kernels on flat row-major buffers.

use super::Float;
use crate::error::{Error, Result};

/// Output extent of a strided, zero-padded window sweep.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dGeometry {
    /// Validates `input` `[N,C,H,W]` against `weight` `[Cout, C/groups, kh, kw]`.
    pub fn new(
        op: &'static str,
        input: &[usize],
        weight: &[usize],
        groups: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [batch, in_channels, height, width]: [usize; 4] =
            input.try_into().map_err(|_| Error::dim(op, format!("input must be [N,C,H,W], got {input:?}")))?;
        let [out_channels, per_group, kernel_h, kernel_w]: [usize; 4] =
            weight.try_into().map_err(|_| Error::dim(op, format!("weight must be [Cout,Cin,k,k], got {weight:?}")))?;
        if groups == 0 || in_channels % groups != 0 {
            return Err(Error::dim(op, format!("axis C: {in_channels} channels not divisible into {groups} groups")));
        }
        if per_group * groups != in_channels {
            return Err(Error::dim(
                op,
                format!("axis C: weight expects {} input channels, input has {in_channels}", per_group * groups),
            ));
        }
        if stride == 0 {
            return Err(Error::Config(format!("{op}: stride must be positive")));
        }
        let out_h = conv_out_dim(height, kernel_h, stride, padding)
            .ok_or_else(|| Error::dim(op, format!("axis H: {height}+2*{padding} smaller than kernel {kernel_h}")))?;
        let out_w = conv_out_dim(width, kernel_w, stride, padding)
            .ok_or_else(|| Error::dim(op, format!("axis W: {width}+2*{padding} smaller than kernel {kernel_w}")))?;
        Ok(Self { batch, in_channels, height, width, out_channels, kernel_h, kernel_w, stride, padding, out_h, out_w })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Row-major `c (m×n) = alpha·op(a)·op(b) + beta·c`; `ta`/`tb` transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    beta: T,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above; strides describe the row-major layouts.
    unsafe {
        T::gemm(m, k, n, T::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

fn im2col<T: Float>(g: &Conv2dGeometry, x: &[T], cols: &mut [T]) {
    let (kh, kw, s, p) = (g.kernel_h, g.kernel_w, g.stride, g.padding as isize);
    let plane = g.out_h * g.out_w;
    for c in 0..g.in_channels {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * s) as isize + ki as isize - p;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * s) as isize + kj as isize - p;
                        *v = if ix < 0 || ix >= g.width as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Float>(g: &Conv2dGeometry, cols: &[T], dx: &mut [T]) {
    let (kh, kw, s, p) = (g.kernel_h, g.kernel_w, g.stride, g.padding as isize);
    let plane = g.out_h * g.out_w;
    for c in 0..g.in_channels {
        let dxc = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * s) as isize + ki as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut dxc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * s) as isize + kj as isize - p;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Float>(g: &Conv2dGeometry, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let in_sz = g.in_channels * g.height * g.width;
    let plane = g.col_cols();
    let out_sz = g.out_channels * plane;
    let mut out = vec![T::zero(); g.batch * out_sz];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.col_rows() * plane] };
    for n in 0..g.batch {
        let xn = &x[n * in_sz..(n + 1) * in_sz];
        let on = &mut out[n * out_sz..(n + 1) * out_sz];
        let src = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        matmul(g.out_channels, g.col_rows(), plane, w, false, src, false, on, T::zero());
        if let Some(b) = bias {
            for (co, row) in on.chunks_mut(plane).enumerate() {
                row.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients of a dense convolution.
pub(crate) fn conv2d_backward<T: Float>(
    g: &Conv2dGeometry,
    x: &[T],
    w: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let in_sz = g.in_channels * g.height * g.width;
    let plane = g.col_cols();
    let out_sz = g.out_channels * plane;
    let rows = g.col_rows();
    if let Some(db) = db {
        for n in 0..g.batch {
            let on = &dout[n * out_sz..(n + 1) * out_sz];
            for (co, row) in on.chunks(plane).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
        }
    }
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * plane] };
    if let Some(dw) = dw {
        for n in 0..g.batch {
            let xn = &x[n * in_sz..(n + 1) * in_sz];
            let src = if g.is_pointwise() {
                xn
            } else {
                im2col(g, xn, &mut cols);
                &cols
            };
            let on = &dout[n * out_sz..(n + 1) * out_sz];
            matmul(g.out_channels, plane, rows, on, false, src, true, dw, T::one());
        }
    }
    if let Some(dx) = dx {
        for n in 0..g.batch {
            let on = &dout[n * out_sz..(n + 1) * out_sz];
            let dxn = &mut dx[n * in_sz..(n + 1) * in_sz];
            if g.is_pointwise() {
                matmul(rows, g.out_channels, plane, w, true, on, false, dxn, T::one());
            } else {
                matmul(rows, g.out_channels, plane, w, true, on, false, &mut cols, T::zero());
                col2im_add(g, &cols, dxn);
            }
        }
    }
}

pub(crate) fn depthwise_forward<T: Float>(g: &Conv2dGeometry, x: &[T], w: &[T]) -> Vec<T> {
    let (kh, kw, s, p) = (g.kernel_h, g.kernel_w, g.stride, g.padding as isize);
    let mut out = vec![T::zero(); g.batch * g.out_channels * g.out_h * g.out_w];
    let in_plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    for n in 0..g.batch {
        for c in 0..g.in_channels {
            let xc = &x[(n * g.in_channels + c) * in_plane..][..in_plane];
            let wc = &w[c * kh * kw..(c + 1) * kh * kw];
            let oc = &mut out[(n * g.in_channels + c) * out_plane..][..out_plane];
            for oy in 0..g.out_h {
                for ki in 0..kh {
                    let iy = (oy * s) as isize + ki as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let row = &xc[iy as usize * g.width..][..g.width];
                    for kj in 0..kw {
                        let wv = wc[ki * kw + kj];
                        for ox in 0..g.out_w {
                            let ix = (ox * s) as isize + kj as isize - p;
                            if ix >= 0 && ix < g.width as isize {
                                oc[oy * g.out_w + ox] += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward<T: Float>(
    g: &Conv2dGeometry,
    x: &[T],
    w: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let (kh, kw, s, p) = (g.kernel_h, g.kernel_w, g.stride, g.padding as isize);
    let in_plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    for n in 0..g.batch {
        for c in 0..g.in_channels {
            let base_in = (n * g.in_channels + c) * in_plane;
            let xc = &x[base_in..][..in_plane];
            let gc = &dout[(n * g.in_channels + c) * out_plane..][..out_plane];
            for oy in 0..g.out_h {
                for ki in 0..kh {
                    let iy = (oy * s) as isize + ki as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let row_off = iy as usize * g.width;
                    for kj in 0..kw {
                        let widx = c * kh * kw + ki * kw + kj;
                        let wv = w[widx];
                        let mut acc = T::zero();
                        for ox in 0..g.out_w {
                            let ix = (ox * s) as isize + kj as isize - p;
                            if ix >= 0 && ix < g.width as isize {
                                let go = gc[oy * g.out_w + ox];
                                acc += go * xc[row_off + ix as usize];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[base_in + row_off + ix as usize] += go * wv;
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
}
