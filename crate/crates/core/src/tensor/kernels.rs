//! Raw slice kernels behind the graph ops. All image buffers are `C×H×W` row-major
//! for a single sample; callers loop over the batch.

/// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of size `m×k` and `op(b)` of size `k×n`.
/// `ta`/`tb` select a transposed view of the stored row-major matrix.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry of a convolution reading a `channels×height×width` map.
    pub fn forward(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        if height + 2 * pad < kernel || width + 2 * pad < kernel || stride == 0 {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds patches into a `(C·k·k) × (oh·ow)` matrix.
pub fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    if g.is_pointwise() {
        col.copy_from_slice(&x[..g.channels * g.height * g.width]);
        return;
    }
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                    if ii < 0 || ii >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.width..(ii as usize + 1) * g.width];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if jj < 0 || jj >= g.width as isize { 0.0 } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into the image buffer.
pub fn col2im(col: &[f64], g: &ConvGeom, x: &mut [f64]) {
    if g.is_pointwise() {
        for (a, b) in x.iter_mut().zip(col) {
            *a += b;
        }
        return;
    }
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &col[row * ncols..(row + 1) * ncols];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.width..(ii as usize + 1) * g.width];
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.width as isize {
                            dst[jj as usize] += src[oi * g.out_w + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Corner-aligned source coordinate table: for each output index, `(lo, hi, frac)`.
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|o| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = o as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Bilinear resize of one `h×w` plane to `oh×ow`.
pub fn bilinear_plane(x: &[f64], h: usize, w: usize, oh: usize, ow: usize, out: &mut [f64]) {
    let rows = bilinear_taps(h, oh);
    let cols = bilinear_taps(w, ow);
    for (oi, &(r0, r1, fr)) in rows.iter().enumerate() {
        for (oj, &(c0, c1, fc)) in cols.iter().enumerate() {
            let top = x[r0 * w + c0] * (1.0 - fc) + x[r0 * w + c1] * fc;
            let bot = x[r1 * w + c0] * (1.0 - fc) + x[r1 * w + c1] * fc;
            out[oi * ow + oj] = top * (1.0 - fr) + bot * fr;
        }
    }
}

/// Adjoint of [`bilinear_plane`].
pub fn bilinear_plane_adjoint(gout: &[f64], h: usize, w: usize, oh: usize, ow: usize, gx: &mut [f64]) {
    let rows = bilinear_taps(h, oh);
    let cols = bilinear_taps(w, ow);
    for (oi, &(r0, r1, fr)) in rows.iter().enumerate() {
        for (oj, &(c0, c1, fc)) in cols.iter().enumerate() {
            let g = gout[oi * ow + oj];
            gx[r0 * w + c0] += g * (1.0 - fr) * (1.0 - fc);
            gx[r0 * w + c1] += g * (1.0 - fr) * fc;
            gx[r1 * w + c0] += g * fr * (1.0 - fc);
            gx[r1 * w + c1] += g * fr * fc;
        }
    }
}
