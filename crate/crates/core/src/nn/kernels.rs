//! Low-level dense kernels: GEMM wrapper and im2col/col2im.

/// Geometry of a 2-D sliding window from an `in_h × in_w` plane to an
/// `out_h × out_w` plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.channels * self.k_h * self.k_w
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

pub fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// `c = alpha * op(a) * op(b) + beta * c`, with `a` of logical shape m×k and
/// `b` of logical shape k×n. `ta`/`tb` mean the stored matrix is transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above; strides describe in-bounds
    // row-major or transposed layouts of exactly those sizes.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `channels × in_h × in_w` image into a `rows × cols` matrix.
pub fn im2col(src: &[f32], win: &Window, dst: &mut [f32]) {
    let cols = win.cols();
    let pad = win.pad as isize;
    for c in 0..win.channels {
        let plane = &src[c * win.in_h * win.in_w..(c + 1) * win.in_h * win.in_w];
        for ky in 0..win.k_h {
            for kx in 0..win.k_w {
                let row = (c * win.k_h + ky) * win.k_w + kx;
                let out = &mut dst[row * cols..(row + 1) * cols];
                for oy in 0..win.out_h {
                    let iy = (oy * win.stride + ky) as isize - pad;
                    let line = &mut out[oy * win.out_w..(oy + 1) * win.out_w];
                    if iy < 0 || iy >= win.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * win.in_w..(iy as usize + 1) * win.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * win.stride + kx) as isize - pad;
                        *v = if ix < 0 || ix >= win.in_w as isize { 0.0 } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds a column matrix back into an image.
pub fn col2im(src: &[f32], win: &Window, dst: &mut [f32]) {
    let cols = win.cols();
    let pad = win.pad as isize;
    for c in 0..win.channels {
        let plane = &mut dst[c * win.in_h * win.in_w..(c + 1) * win.in_h * win.in_w];
        for ky in 0..win.k_h {
            for kx in 0..win.k_w {
                let row = (c * win.k_h + ky) * win.k_w + kx;
                let inp = &src[row * cols..(row + 1) * cols];
                for oy in 0..win.out_h {
                    let iy = (oy * win.stride + ky) as isize - pad;
                    if iy < 0 || iy >= win.in_h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * win.in_w..(iy as usize + 1) * win.in_w];
                    let line = &inp[oy * win.out_w..(oy + 1) * win.out_w];
                    for (ox, v) in line.iter().enumerate() {
                        let ix = (ox * win.stride + kx) as isize - pad;
                        if ix >= 0 && ix < win.in_w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}
