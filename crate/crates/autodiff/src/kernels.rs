//! Raw numeric kernels behind the graph ops. Convolution runs as im2col followed
//! by a dense matrix product; the column buffer is recomputed in the backward pass
//! instead of being cached.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }
}

fn im2col(x: &[f64], d: &ConvDims, col: &mut Vec<f64>) {
    let plane = d.plane();
    col.clear();
    col.resize(d.patch() * plane, 0.0);
    let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    for ci in 0..d.cin {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..d.kh {
            let dy = ky as isize - ph;
            for kx in 0..d.kw {
                let dx = kx as isize - pw;
                let row = (ci * d.kh + ky) * d.kw + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (d.w as isize - dx).min(d.w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..d.h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= d.h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let s0 = (sy * d.w) as isize + x_lo as isize + dx;
                    let s0 = s0 as usize;
                    dst[y * d.w + x_lo..y * d.w + x_hi]
                        .copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], d: &ConvDims, gx: &mut [f64]) {
    let plane = d.plane();
    let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    for ci in 0..d.cin {
        let dst = &mut gx[ci * plane..(ci + 1) * plane];
        for ky in 0..d.kh {
            let dy = ky as isize - ph;
            for kx in 0..d.kw {
                let dx = kx as isize - pw;
                let row = (ci * d.kh + ky) * d.kw + kx;
                let src = &col[row * plane..(row + 1) * plane];
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (d.w as isize - dx).min(d.w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..d.h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= d.h as isize {
                        continue;
                    }
                    let s0 = (sy as usize * d.w) as isize + x_lo as isize + dx;
                    let s0 = s0 as usize;
                    let n = x_hi - x_lo;
                    for (o, v) in dst[s0..s0 + n]
                        .iter_mut()
                        .zip(&src[y * d.w + x_lo..y * d.w + x_hi])
                    {
                        *o += *v;
                    }
                }
            }
        }
    }
}

/// `c = alpha * a * b + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * rsa + (k.max(1) - 1) * csa + 1 || k == 0);
    assert!(b.len() >= (k.max(1) - 1) * rsb + (n - 1) * csb + 1 || k == 0);
    assert!(c.len() >= m * n);
    // SAFETY: bounds asserted above; c is row-major m x n and does not alias a or b.
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

pub(crate) fn conv2d_forward(
    x: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    d: &ConvDims,
    out: &mut [f64],
    col: &mut Vec<f64>,
) {
    im2col(x, d, col);
    let plane = d.plane();
    let q = d.patch();
    gemm(d.cout, q, plane, kernel, (q, 1), col, (plane, 1), 0.0, out);
    if let Some(b) = bias {
        for (co, bv) in b.iter().enumerate() {
            for o in &mut out[co * plane..(co + 1) * plane] {
                *o += *bv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    gout: &[f64],
    d: &ConvDims,
    gx: Option<&mut [f64]>,
    gk: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
    col: &mut Vec<f64>,
) {
    let plane = d.plane();
    let q = d.patch();
    if let Some(gb) = gb {
        for (co, g) in gb.iter_mut().enumerate() {
            *g += gout[co * plane..(co + 1) * plane].iter().sum::<f64>();
        }
    }
    if let Some(gk) = gk {
        im2col(x, d, col);
        // gK[co, q] += sum_p gout[co, p] * col[q, p]
        gemm(d.cout, plane, q, gout, (plane, 1), col, (1, plane), 1.0, gk);
    }
    if let Some(gx) = gx {
        col.clear();
        col.resize(q * plane, 0.0);
        // gcol[q, p] = sum_co K[co, q] * gout[co, p]
        gemm(q, d.cout, plane, kernel, (1, q), gout, (plane, 1), 0.0, col);
        col2im_add(col, d, gx);
    }
}
