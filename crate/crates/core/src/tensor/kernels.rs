//! Dense numeric kernels behind the differentiable ops. Everything here works
//! on raw row-major slices; shape checking happens in the graph layer.

/// `c = beta * c + op(a) * op(b)` for row-major `a` (m×k) and `b` (k×n).
/// A transposed operand is stored with its dimensions swapped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: strides describe exactly the buffers checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvDims {
    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }
}

fn im2col(x: &[f64], d: &ConvDims, col: &mut [f64]) {
    let (h, w) = (d.height, d.width);
    let plane = d.plane();
    for ci in 0..d.in_channels {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ki in 0..d.kernel_h {
            for kj in 0..d.kernel_w {
                let row = (ci * d.kernel_h + ki) * d.kernel_w + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let dx = kj as isize - d.pad_w as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let yy = y as isize + ki as isize - d.pad_h as isize;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if yy < 0 || yy >= h as isize || x_lo >= x_hi {
                        out.fill(0.0);
                        continue;
                    }
                    let yy = yy as usize;
                    out[..x_lo].fill(0.0);
                    out[x_hi..].fill(0.0);
                    let s0 = (x_lo as isize + dx) as usize;
                    out[x_lo..x_hi].copy_from_slice(&src[yy * w + s0..yy * w + s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], d: &ConvDims, dx_out: &mut [f64]) {
    let (h, w) = (d.height, d.width);
    let plane = d.plane();
    for ci in 0..d.in_channels {
        let dst = &mut dx_out[ci * plane..(ci + 1) * plane];
        for ki in 0..d.kernel_h {
            for kj in 0..d.kernel_w {
                let row = (ci * d.kernel_h + ki) * d.kernel_w + kj;
                let src = &col[row * plane..(row + 1) * plane];
                let dx = kj as isize - d.pad_w as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let yy = y as isize + ki as isize - d.pad_h as isize;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let yy = yy as usize;
                    let s0 = (x_lo as isize + dx) as usize;
                    let target = &mut dst[yy * w + s0..yy * w + s0 + (x_hi - x_lo)];
                    for (t, v) in target.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *t += v;
                    }
                }
            }
        }
    }
}

/// Stride-1 cross-correlation with zero padding.
pub(crate) fn conv2d_forward(x: &[f64], weight: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    let plane = d.plane();
    let rows = d.col_rows();
    let mut col = vec![0.0; rows * plane];
    let mut out = vec![0.0; d.batch * d.out_channels * plane];
    let in_stride = d.in_channels * plane;
    let out_stride = d.out_channels * plane;
    for b in 0..d.batch {
        im2col(&x[b * in_stride..(b + 1) * in_stride], d, &mut col);
        let y = &mut out[b * out_stride..(b + 1) * out_stride];
        for (co, chunk) in y.chunks_mut(plane).enumerate() {
            chunk.fill(bias[co]);
        }
        gemm(d.out_channels, rows, plane, weight, false, &col, false, y, 1.0);
    }
    out
}

/// Accumulates input, weight and bias gradients for [`conv2d_forward`].
pub(crate) fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    d: &ConvDims,
    mut grad_x: Option<&mut [f64]>,
    mut grad_w: Option<&mut [f64]>,
    mut grad_b: Option<&mut [f64]>,
) {
    let plane = d.plane();
    let rows = d.col_rows();
    let in_stride = d.in_channels * plane;
    let out_stride = d.out_channels * plane;
    let mut col = vec![0.0; rows * plane];
    let mut dcol = vec![0.0; rows * plane];
    for b in 0..d.batch {
        let gy = &grad_out[b * out_stride..(b + 1) * out_stride];
        if let Some(gb) = grad_b.as_deref_mut() {
            for (co, chunk) in gy.chunks(plane).enumerate() {
                gb[co] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(gw) = grad_w.as_deref_mut() {
            im2col(&x[b * in_stride..(b + 1) * in_stride], d, &mut col);
            gemm(d.out_channels, plane, rows, gy, false, &col, true, gw, 1.0);
        }
        if let Some(gx) = grad_x.as_deref_mut() {
            gemm(rows, d.out_channels, plane, weight, true, gy, false, &mut dcol, 0.0);
            col2im_add(&dcol, d, &mut gx[b * in_stride..(b + 1) * in_stride]);
        }
    }
}

/// Interpolation stencil along one axis for a normalized coordinate.
///
/// Pixel `k` of an axis with `n` pixels has its center at `-1 + (2k+1)/n`.
/// Coordinates beyond the outermost centers clamp to them, in which case
/// `slope` (d index / d coordinate) is zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct AxisStencil {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
    pub slope: f64,
}

pub(crate) fn axis_stencil(coord: f64, n: usize) -> AxisStencil {
    let last = (n - 1) as f64;
    let u = ((coord + 1.0) * n as f64 - 1.0) / 2.0;
    if u < 0.0 {
        return AxisStencil { lo: 0, hi: 0, frac: 0.0, slope: 0.0 };
    }
    if u > last {
        return AxisStencil { lo: n - 1, hi: n - 1, frac: 0.0, slope: 0.0 };
    }
    let lo = (u.floor() as usize).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    let frac = if lo == hi { 0.0 } else { u - lo as f64 };
    AxisStencil { lo, hi, frac, slope: n as f64 / 2.0 }
}

pub(crate) struct SamplePlan {
    pub rows: Vec<AxisStencil>,
    pub cols: Vec<AxisStencil>,
}

pub(crate) fn sample_plan(coords: &[f64], h: usize, w: usize) -> SamplePlan {
    let mut rows = Vec::with_capacity(coords.len() / 2);
    let mut cols = Vec::with_capacity(coords.len() / 2);
    for pair in coords.chunks_exact(2) {
        rows.push(axis_stencil(pair[0], h));
        cols.push(axis_stencil(pair[1], w));
    }
    SamplePlan { rows, cols }
}

/// `planes` is the number of (batch, channel) planes of size h×w.
pub(crate) fn bilinear_forward(x: &[f64], planes: usize, h: usize, w: usize, plan: &SamplePlan) -> Vec<f64> {
    let m = plan.rows.len();
    let mut out = vec![0.0; planes * m];
    for (p, out_plane) in out.chunks_mut(m).enumerate() {
        let src = &x[p * h * w..(p + 1) * h * w];
        for (k, o) in out_plane.iter_mut().enumerate() {
            let (r, c) = (plan.rows[k], plan.cols[k]);
            let v00 = src[r.lo * w + c.lo];
            let v01 = src[r.lo * w + c.hi];
            let v10 = src[r.hi * w + c.lo];
            let v11 = src[r.hi * w + c.hi];
            let top = v00 + (v01 - v00) * c.frac;
            let bottom = v10 + (v11 - v10) * c.frac;
            *o = top + (bottom - top) * r.frac;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bilinear_backward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    plan: &SamplePlan,
    grad_out: &[f64],
    mut grad_x: Option<&mut [f64]>,
    mut grad_coords: Option<&mut [f64]>,
) {
    let m = plan.rows.len();
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let g_plane = &grad_out[p * m..(p + 1) * m];
        for k in 0..m {
            let g = g_plane[k];
            if g == 0.0 {
                continue;
            }
            let (r, c) = (plan.rows[k], plan.cols[k]);
            if let Some(gx) = grad_x.as_deref_mut() {
                let gx = &mut gx[p * h * w..(p + 1) * h * w];
                gx[r.lo * w + c.lo] += g * (1.0 - r.frac) * (1.0 - c.frac);
                gx[r.lo * w + c.hi] += g * (1.0 - r.frac) * c.frac;
                gx[r.hi * w + c.lo] += g * r.frac * (1.0 - c.frac);
                gx[r.hi * w + c.hi] += g * r.frac * c.frac;
            }
            if let Some(gc) = grad_coords.as_deref_mut() {
                let v00 = src[r.lo * w + c.lo];
                let v01 = src[r.lo * w + c.hi];
                let v10 = src[r.hi * w + c.lo];
                let v11 = src[r.hi * w + c.hi];
                let d_row = (1.0 - c.frac) * (v10 - v00) + c.frac * (v11 - v01);
                let d_col = (1.0 - r.frac) * (v01 - v00) + r.frac * (v11 - v10);
                gc[2 * k] += g * d_row * r.slope;
                gc[2 * k + 1] += g * d_col * c.slope;
            }
        }
    }
}
