//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        k += WGK[j] * s;
        if j % 2 == 1 {
            g += WG[j / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Adaptive Gauss-Kronrod (7-15) integration of `f` over `[a, b]`.
pub fn integrate(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let mut stack = vec![(a, b, tol)];
    let mut total = 0.0;
    while let Some((lo, hi, t)) = stack.pop() {
        let (v, err) = gk15(f, lo, hi);
        if err <= t || (hi - lo) < 1e-9 {
            total += v;
        } else {
            let mid = 0.5 * (lo + hi);
            stack.push((lo, mid, 0.5 * t));
            stack.push((mid, hi, 0.5 * t));
        }
    }
    total
}

/// Nested adaptive quadrature of `f(x, y)` over a rectangle.
pub fn integrate_2d(
    f: &dyn Fn(f64, f64) -> f64,
    (x0, x1): (f64, f64),
    (y0, y1): (f64, f64),
    tol: f64,
) -> f64 {
    let mut outer = |y: f64| {
        let mut inner = |x: f64| f(x, y);
        integrate(&mut inner, x0, x1, tol * 1e-2)
    };
    integrate(&mut outer, y0, y1, tol)
}

/// Gaussian PSF written out directly.
pub fn gaussian(x: f64, y: f64, cx: f64, cy: f64, sigma: f64) -> f64 {
    let r2 = (x - cx).powi(2) + (y - cy).powi(2);
    (-r2 / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * sigma)
}

/// Plain triple-loop `y = A x` on a row-major matrix.
pub fn naive_matvec(a: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; rows];
    for r in 0..rows {
        for c in 0..cols {
            y[r] += a[r * cols + c] * x[c];
        }
    }
    y
}

/// Lasso objective `0.5 |z - G s|^2 + lambda |s|_1`.
pub fn lasso_objective(g: &[f64], rows: usize, cols: usize, z: &[f64], s: &[f64], lambda: f64) -> f64 {
    let gs = naive_matvec(g, rows, cols, s);
    let res: f64 = gs.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum();
    0.5 * res + lambda * s.iter().map(|v| v.abs()).sum::<f64>()
}

/// Cyclic coordinate descent for the lasso, run until the iterate stops moving.
pub fn coordinate_descent(g: &[f64], rows: usize, cols: usize, z: &[f64], lambda: f64) -> Vec<f64> {
    let mut s = vec![0.0; cols];
    let mut resid: Vec<f64> = z.to_vec();
    let norms: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|i| g[i * cols + j].powi(2)).sum())
        .collect();
    for _ in 0..1_000_000 {
        let mut delta = 0.0f64;
        for j in 0..cols {
            if norms[j] == 0.0 {
                continue;
            }
            let rho: f64 = (0..rows).map(|i| g[i * cols + j] * resid[i]).sum::<f64>() + norms[j] * s[j];
            let new = rho.signum() * (rho.abs() - lambda).max(0.0) / norms[j];
            let d = new - s[j];
            if d != 0.0 {
                for i in 0..rows {
                    resid[i] -= g[i * cols + j] * d;
                }
                s[j] = new;
                delta = delta.max(d.abs());
            }
        }
        if delta < 1e-15 {
            break;
        }
    }
    s
}

/// Area under the precision envelope of a ranked TP/FP list, computed exactly
/// as a sum of rectangles between successive recall values.
pub fn exact_interpolated_ap(flags: &[bool], gt_count: usize) -> f64 {
    if gt_count == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut pts = Vec::new();
    for (i, f) in flags.iter().enumerate() {
        if *f {
            tp += 1;
        }
        pts.push((tp as f64 / gt_count as f64, tp as f64 / (i + 1) as f64));
    }
    let mut area = 0.0;
    let mut prev_r = 0.0;
    for (i, (r, _)) in pts.iter().enumerate() {
        if *r > prev_r {
            let env = pts[i..].iter().map(|p| p.1).fold(0.0, f64::max);
            area += (r - prev_r) * env;
            prev_r = *r;
        }
    }
    area
}

/// SSIM evaluated window by window with explicit sums.
pub fn direct_ssim(a: &[f64], b: &[f64], w: usize, h: usize, peak: f64) -> f64 {
    let win = 11usize;
    let sigma = 1.5f64;
    let mut kernel = vec![0.0; win * win];
    let c = (win / 2) as f64;
    let mut total = 0.0;
    for y in 0..win {
        for x in 0..win {
            let v = (-((x as f64 - c).powi(2) + (y as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp();
            kernel[y * win + x] = v;
            total += v;
        }
    }
    kernel.iter_mut().for_each(|v| *v /= total);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let mut acc = 0.0;
    let mut n = 0;
    for oy in 0..=h - win {
        for ox in 0..=w - win {
            let (mut ma, mut mb) = (0.0, 0.0);
            for y in 0..win {
                for x in 0..win {
                    let k = kernel[y * win + x];
                    ma += k * a[(oy + y) * w + ox + x];
                    mb += k * b[(oy + y) * w + ox + x];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for y in 0..win {
                for x in 0..win {
                    let k = kernel[y * win + x];
                    let da = a[(oy + y) * w + ox + x] - ma;
                    let db = b[(oy + y) * w + ox + x] - mb;
                    va += k * da * da;
                    vb += k * db * db;
                    cov += k * da * db;
                }
            }
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            n += 1;
        }
    }
    acc / n as f64
}

/// Zero-padded 3x3 cross-correlation by direct loops. `x` is `[cin, h, w]`,
/// `k` is `[cout, cin, 3, 3]`.
pub fn conv3x3(x: &[f64], cin: usize, k: &[f64], cout: usize, w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; cout * w * h];
    for co in 0..cout {
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for ky in 0..3isize {
                        for kx in 0..3isize {
                            let (sy, sx) = (y + ky - 1, xx + kx - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += k[((co * cin + ci) * 3 + ky as usize) * 3 + kx as usize]
                                * x[(ci * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(co * h + y as usize) * w + xx as usize] = acc;
            }
        }
    }
    out
}

/// One static unrolled stage: gradient step, fixed two-layer transform,
/// shrinkage at a scalar threshold, fixed two-layer inverse. `g` is row-major
/// `rows x cols`, kernels are the flattened stage tensors, `w x h = cols`.
#[allow(clippy::too_many_arguments)]
pub fn static_stage(
    g: &[f64],
    rows: usize,
    cols: usize,
    kernels: [&[f64]; 4],
    channels: usize,
    w: usize,
    h: usize,
    rho: f64,
    theta: f64,
    s: &[f64],
    z: &[f64],
) -> Vec<f64> {
    let gs = naive_matvec(g, rows, cols, s);
    let resid: Vec<f64> = gs.iter().zip(z).map(|(a, b)| a - b).collect();
    let mut gt = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            gt[c * rows + r] = g[r * cols + c];
        }
    }
    let gtr = naive_matvec(&gt, cols, rows, &resid);
    let r: Vec<f64> = (0..cols).map(|i| s[i] - rho * gtr[i]).collect();
    let relu = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
    let [conv_b, conv_a, inv_a, inv_b] = kernels;
    let b = relu(conv3x3(&r, 1, conv_b, channels, w, h));
    let a = conv3x3(&b, channels, conv_a, channels, w, h);
    let shrunk: Vec<f64> = a.iter().map(|v| v.signum() * (v.abs() - theta).max(0.0)).collect();
    let ia = relu(conv3x3(&shrunk, channels, inv_a, channels, w, h));
    conv3x3(&ia, channels, inv_b, 1, w, h)
}
