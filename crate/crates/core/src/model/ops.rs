//! Dense NCHW kernels with explicit backward passes.

/// `c = a·b + beta·c` with `a` logically m×k and `b` k×n, either stored
/// transposed. `c` is row-major m×n.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the asserted extents.
    unsafe {
        matrixmultiply::dgemm(
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad() - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad() - self.k) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }
}

/// One sample `[cin, h, w]` → `[cin·k·k, oh·ow]`. `cols` must arrive zeroed;
/// padding cells are skipped.
fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (oh, ow, pad) = (g.out_h(), g.out_w(), g.pad());
    let ohw = oh * ow;
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                // output columns whose input column kx + ox·stride - pad is inside
                let lo = pad.saturating_sub(kx).div_ceil(g.stride).min(ow);
                let hi = if g.w + pad > kx { ((g.w + pad - kx - 1) / g.stride + 1).min(ow) } else { 0 }.max(lo);
                let row = &mut cols[((c * g.k + ky) * g.k + kx) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky).wrapping_sub(pad);
                    if iy >= g.h {
                        continue;
                    }
                    let xrow = &xc[iy * g.w..(iy + 1) * g.w];
                    let out = &mut row[oy * ow + lo..oy * ow + hi];
                    if g.stride == 1 {
                        out.copy_from_slice(&xrow[lo + kx - pad..hi + kx - pad]);
                    } else {
                        for (o, ox) in out.iter_mut().zip(lo..) {
                            *o = xrow[ox * g.stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`], accumulating into `dx`.
fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let (oh, ow, pad) = (g.out_h(), g.out_w(), g.pad() as isize);
    let ohw = oh * ow;
    for c in 0..g.cin {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[((c * g.k + ky) * g.k + kx) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution over a batch. `weight` is `[cout, cin·k·k]`. Returns
/// the output and the patch matrices needed for the backward pass (empty for
/// 1×1 stride-1 layers, which read `x` directly).
pub fn conv_forward(g: &ConvGeom, batch: usize, x: &[f64], weight: &[f64], bias: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
    let (ohw, ihw, kk) = (g.out_h() * g.out_w(), g.h * g.w, g.patch());
    let mut y = vec![0.0; batch * g.cout * ohw];
    let mut cols = if g.pointwise() { Vec::new() } else { vec![0.0; batch * kk * ohw] };
    for b in 0..batch {
        let xb = &x[b * g.cin * ihw..(b + 1) * g.cin * ihw];
        let yb = &mut y[b * g.cout * ohw..(b + 1) * g.cout * ohw];
        if let Some(bias) = bias {
            for (co, &v) in bias.iter().enumerate() {
                yb[co * ohw..(co + 1) * ohw].fill(v);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if g.pointwise() {
            gemm(g.cout, kk, ohw, weight, false, xb, false, beta, yb);
        } else {
            let cb = &mut cols[b * kk * ohw..(b + 1) * kk * ohw];
            im2col(g, xb, cb);
            gemm(g.cout, kk, ohw, weight, false, cb, false, beta, yb);
        }
    }
    (y, cols)
}

pub struct ConvGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub input: Option<Vec<f64>>,
}

pub fn conv_backward(g: &ConvGeom, batch: usize, x: &[f64], cols: &[f64], weight: &[f64], dy: &[f64], need_input: bool) -> ConvGrads {
    let (ohw, ihw, kk) = (g.out_h() * g.out_w(), g.h * g.w, g.patch());
    let mut dw = vec![0.0; g.cout * kk];
    let mut db = vec![0.0; g.cout];
    let mut dx = need_input.then(|| vec![0.0; batch * g.cin * ihw]);
    let mut dcols = if need_input && !g.pointwise() { vec![0.0; kk * ohw] } else { Vec::new() };
    for b in 0..batch {
        let dyb = &dy[b * g.cout * ohw..(b + 1) * g.cout * ohw];
        for co in 0..g.cout {
            db[co] += dyb[co * ohw..(co + 1) * ohw].iter().sum::<f64>();
        }
        let cb = if g.pointwise() {
            &x[b * g.cin * ihw..(b + 1) * g.cin * ihw]
        } else {
            &cols[b * kk * ohw..(b + 1) * kk * ohw]
        };
        gemm(g.cout, ohw, kk, dyb, false, cb, true, 1.0, &mut dw);
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * g.cin * ihw..(b + 1) * g.cin * ihw];
            if g.pointwise() {
                gemm(kk, g.cout, ohw, weight, true, dyb, false, 1.0, dxb);
            } else {
                gemm(kk, g.cout, ohw, weight, true, dyb, false, 0.0, &mut dcols);
                col2im(g, &dcols, dxb);
            }
        }
    }
    ConvGrads {
        weight: dw,
        bias: db,
        input: dx,
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `dy` where the forward output was not positive.
pub fn relu_backward_inplace(y: &[f64], dy: &mut [f64]) {
    for (d, &v) in dy.iter_mut().zip(y) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
}

/// Nearest-neighbour resize of `[batch·c, h, w]` to `(oh, ow)`; source index
/// is `floor(i·h / oh)`.
pub fn upsample_nearest(x: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut y = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for i in 0..oh {
            let si = i * h / oh;
            for j in 0..ow {
                y[(p * oh + i) * ow + j] = x[(p * h + si) * w + j * w / ow];
            }
        }
    }
    y
}

pub fn upsample_nearest_backward(dy: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for i in 0..oh {
            let si = i * h / oh;
            for j in 0..ow {
                dx[(p * h + si) * w + j * w / ow] += dy[(p * oh + i) * ow + j];
            }
        }
    }
    dx
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub struct BnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub train: bool,
    /// Batch mean and unbiased variance (train mode only).
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

/// Batch norm over `[batch, c, hw]`. Train mode normalises with batch
/// statistics, inference mode with the running ones.
#[allow(clippy::too_many_arguments)]
pub fn bn_forward(
    x: &[f64],
    batch: usize,
    c: usize,
    hw: usize,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    train: bool,
) -> (Vec<f64>, BnCache) {
    let n = (batch * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let mut var_unbiased = vec![0.0; c];
    if train {
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..batch {
                s += x[(b * c + ch) * hw..][..hw].iter().sum::<f64>();
            }
            let m = s / n;
            let mut ss = 0.0;
            for b in 0..batch {
                ss += x[(b * c + ch) * hw..][..hw].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = ss / n;
            var_unbiased[ch] = if n > 1.0 { ss / (n - 1.0) } else { 0.0 };
        }
    } else {
        mean.copy_from_slice(running_mean);
        var.copy_from_slice(running_var);
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for b in 0..batch {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let h = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    let cache = BnCache {
        xhat,
        inv_std,
        train,
        mean: if train { mean } else { Vec::new() },
        var_unbiased,
    };
    (y, cache)
}

/// Returns (dx, dgamma, dbeta).
pub fn bn_backward(dy: &[f64], cache: &BnCache, batch: usize, c: usize, hw: usize, gamma: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = (batch * hw) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..batch {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                dgamma[ch] += dy[i] * cache.xhat[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for b in 0..batch {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let k = gamma[ch] * cache.inv_std[ch];
            for i in off..off + hw {
                dx[i] = if cache.train {
                    k * (dy[i] - dbeta[ch] / n - cache.xhat[i] * dgamma[ch] / n)
                } else {
                    k * dy[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
