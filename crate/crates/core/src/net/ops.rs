//! Layer kernels on NHWC `f64` tensors, forward and backward.

use ndarray::Array4;

/// `c = a * b + beta * c` for row-major operands; `ta`/`tb` read `a`/`b`
/// as their transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the m*k, k*n and m*n elements the
    // strides address, checked above.
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

fn dims(x: &Array4<f64>) -> (usize, usize, usize, usize) {
    x.dim()
}

/// Patch matrix `(N*H*W) x (k*k*C)` for a same-padded `k x k` convolution.
fn im2col(x: &[f64], n: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let row_len = k * k * c;
    let mut cols = vec![0.0; n * h * w * row_len];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * row_len;
                for ky in 0..k {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let sy = sy - pad;
                    for kx in 0..k {
                        let sx = xx + kx;
                        if sx < pad || sx - pad >= w {
                            continue;
                        }
                        let sx = sx - pad;
                        let src = ((b * h + sy) * w + sx) * c;
                        let dst = row + (ky * k + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], n: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let row_len = k * k * c;
    let mut x = vec![0.0; n * h * w * c];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * row_len;
                for ky in 0..k {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let sy = sy - pad;
                    for kx in 0..k {
                        let sx = xx + kx;
                        if sx < pad || sx - pad >= w {
                            continue;
                        }
                        let sx = sx - pad;
                        let dst = ((b * h + sy) * w + sx) * c;
                        let src = row + (ky * k + kx) * c;
                        for (d, s) in x[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Same-padded convolution without bias. `weight` is `[k, k, cin, cout]`.
pub(crate) fn conv_forward(x: &Array4<f64>, weight: &[f64], k: usize, cout: usize) -> Array4<f64> {
    let (n, h, w, cin) = dims(x);
    let xs = x.as_slice().expect("standard layout");
    let mut y = vec![0.0; n * h * w * cout];
    if k == 1 {
        gemm(n * h * w, cin, cout, xs, false, weight, false, &mut y, 0.0);
    } else {
        let cols = im2col(xs, n, h, w, cin, k);
        gemm(n * h * w, k * k * cin, cout, &cols, false, weight, false, &mut y, 0.0);
    }
    Array4::from_shape_vec((n, h, w, cout), y).expect("sized above")
}

/// Returns `(dx, dweight)`.
pub(crate) fn conv_backward(x: &Array4<f64>, weight: &[f64], k: usize, dy: &Array4<f64>) -> (Array4<f64>, Vec<f64>) {
    let (n, h, w, cin) = dims(x);
    let cout = dy.dim().3;
    let xs = x.as_slice().expect("standard layout");
    let dys = dy.as_slice().expect("standard layout");
    let m = n * h * w;
    let kk = k * k * cin;
    let mut dw = vec![0.0; kk * cout];
    let mut dcols = vec![0.0; m * kk];
    if k == 1 {
        gemm(kk, m, cout, xs, true, dys, false, &mut dw, 0.0);
        gemm(m, cout, kk, dys, false, weight, true, &mut dcols, 0.0);
        let dx = Array4::from_shape_vec((n, h, w, cin), dcols).expect("sized above");
        return (dx, dw);
    }
    let cols = im2col(xs, n, h, w, cin, k);
    gemm(kk, m, cout, &cols, true, dys, false, &mut dw, 0.0);
    drop(cols);
    gemm(m, cout, kk, dys, false, weight, true, &mut dcols, 0.0);
    let dx = col2im(&dcols, n, h, w, cin, k);
    (Array4::from_shape_vec((n, h, w, cin), dx).expect("sized above"), dw)
}

pub(crate) fn add_bias(y: &mut Array4<f64>, bias: &[f64]) {
    let c = bias.len();
    for row in y.as_slice_mut().expect("standard layout").chunks_exact_mut(c) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub(crate) fn bias_grad(dy: &Array4<f64>) -> Vec<f64> {
    let c = dy.dim().3;
    let mut g = vec![0.0; c];
    for row in dy.as_slice().expect("standard layout").chunks_exact(c) {
        for (a, v) in g.iter_mut().zip(row) {
            *a += v;
        }
    }
    g
}

pub(crate) const BN_EPS: f64 = 1e-5;

/// Per-channel statistics of one batch-norm call.
#[derive(Clone, Debug)]
pub(crate) struct BnStats {
    pub mean: Vec<f64>,
    /// Biased variance used for normalization.
    pub var: Vec<f64>,
    pub count: usize,
}

pub(crate) fn channel_stats(x: &Array4<f64>) -> BnStats {
    let c = x.dim().3;
    let data = x.as_slice().expect("standard layout");
    let count = data.len() / c;
    let mut mean = vec![0.0; c];
    for row in data.chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0; c];
    for row in data.chunks_exact(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    for s in &mut var {
        *s /= count as f64;
    }
    BnStats { mean, var, count }
}

/// Normalizes with the given mean/variance; returns `(xhat, y)`.
pub(crate) fn bn_apply(x: &Array4<f64>, mean: &[f64], var: &[f64], gamma: &[f64], beta: &[f64]) -> (Array4<f64>, Array4<f64>) {
    let c = mean.len();
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = x.clone();
    let mut y = x.clone();
    for (xr, yr) in xhat
        .as_slice_mut()
        .expect("standard layout")
        .chunks_exact_mut(c)
        .zip(y.as_slice_mut().expect("standard layout").chunks_exact_mut(c))
    {
        for ch in 0..c {
            let xh = (xr[ch] - mean[ch]) * inv[ch];
            xr[ch] = xh;
            yr[ch] = gamma[ch] * xh + beta[ch];
        }
    }
    (xhat, y)
}

/// Backward of training-mode batch norm. Returns `(dx, dgamma, dbeta)`.
pub(crate) fn bn_backward(xhat: &Array4<f64>, var: &[f64], gamma: &[f64], dy: &Array4<f64>) -> (Array4<f64>, Vec<f64>, Vec<f64>) {
    let c = var.len();
    let xs = xhat.as_slice().expect("standard layout");
    let dys = dy.as_slice().expect("standard layout");
    let m = (xs.len() / c) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (xr, dr) in xs.chunks_exact(c).zip(dys.chunks_exact(c)) {
        for ch in 0..c {
            dgamma[ch] += dr[ch] * xr[ch];
            dbeta[ch] += dr[ch];
        }
    }
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut dx = dy.clone();
    for (out, xr) in dx.as_slice_mut().expect("standard layout").chunks_exact_mut(c).zip(xs.chunks_exact(c)) {
        for ch in 0..c {
            // dxhat = dy * gamma; sums of dxhat and dxhat*xhat are gamma*dbeta and gamma*dgamma.
            let dxh = out[ch] * gamma[ch];
            out[ch] = inv[ch] / m * (m * dxh - gamma[ch] * dbeta[ch] - xr[ch] * gamma[ch] * dgamma[ch]);
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn relu_inplace(x: &mut Array4<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Gradient through a ReLU given its output.
pub(crate) fn relu_backward(out: &Array4<f64>, dy: &mut Array4<f64>) {
    ndarray::Zip::from(dy).and(out).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
}

/// 2x2 max pooling; also returns the flat input index of each maximum.
pub(crate) fn maxpool_forward(x: &Array4<f64>) -> (Array4<f64>, Vec<usize>) {
    let (n, h, w, c) = dims(x);
    let (ho, wo) = (h / 2, w / 2);
    let xs = x.as_slice().expect("standard layout");
    let mut y = vec![0.0; n * ho * wo * c];
    let mut arg = vec![0usize; n * ho * wo * c];
    for b in 0..n {
        for i in 0..ho {
            for j in 0..wo {
                for ch in 0..c {
                    let mut best = usize::MAX;
                    let mut bv = f64::NEG_INFINITY;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = ((b * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                        if xs[idx] > bv {
                            bv = xs[idx];
                            best = idx;
                        }
                    }
                    let o = ((b * ho + i) * wo + j) * c + ch;
                    y[o] = bv;
                    arg[o] = best;
                }
            }
        }
    }
    (Array4::from_shape_vec((n, ho, wo, c), y).expect("sized above"), arg)
}

pub(crate) fn maxpool_backward(input_dim: (usize, usize, usize, usize), arg: &[usize], dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = Array4::zeros(input_dim);
    let dxs = dx.as_slice_mut().expect("standard layout");
    for (&i, &g) in arg.iter().zip(dy.as_slice().expect("standard layout")) {
        dxs[i] += g;
    }
    dx
}

/// 2x2 stride-2 transposed convolution. `weight` is `[cin, 2, 2, cout]`.
pub(crate) fn upconv_forward(x: &Array4<f64>, weight: &[f64], bias: &[f64]) -> Array4<f64> {
    let (n, h, w, cin) = dims(x);
    let cout = bias.len();
    let m = n * h * w;
    let mut tmp = vec![0.0; m * 4 * cout];
    gemm(m, cin, 4 * cout, x.as_slice().expect("standard layout"), false, weight, false, &mut tmp, 0.0);
    let (ho, wo) = (2 * h, 2 * w);
    let mut y = vec![0.0; n * ho * wo * cout];
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let src = ((b * h + i) * w + j) * 4 * cout;
                for a in 0..2 {
                    for bb in 0..2 {
                        let dst = ((b * ho + 2 * i + a) * wo + 2 * j + bb) * cout;
                        let s = src + (a * 2 + bb) * cout;
                        for co in 0..cout {
                            y[dst + co] = tmp[s + co] + bias[co];
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec((n, ho, wo, cout), y).expect("sized above")
}

/// Returns `(dx, dweight, dbias)`.
pub(crate) fn upconv_backward(x: &Array4<f64>, weight: &[f64], dy: &Array4<f64>) -> (Array4<f64>, Vec<f64>, Vec<f64>) {
    let (n, h, w, cin) = dims(x);
    let cout = dy.dim().3;
    let (ho, wo) = (2 * h, 2 * w);
    let m = n * h * w;
    let dys = dy.as_slice().expect("standard layout");
    let mut gathered = vec![0.0; m * 4 * cout];
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let dst = ((b * h + i) * w + j) * 4 * cout;
                for a in 0..2 {
                    for bb in 0..2 {
                        let src = ((b * ho + 2 * i + a) * wo + 2 * j + bb) * cout;
                        let d = dst + (a * 2 + bb) * cout;
                        gathered[d..d + cout].copy_from_slice(&dys[src..src + cout]);
                    }
                }
            }
        }
    }
    let mut dw = vec![0.0; cin * 4 * cout];
    gemm(cin, m, 4 * cout, x.as_slice().expect("standard layout"), true, &gathered, false, &mut dw, 0.0);
    let mut dx = vec![0.0; m * cin];
    gemm(m, 4 * cout, cin, &gathered, false, weight, true, &mut dx, 0.0);
    (
        Array4::from_shape_vec((n, h, w, cin), dx).expect("sized above"),
        dw,
        bias_grad(dy),
    )
}

/// Channel concatenation `[a, b]`.
pub(crate) fn concat(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    let (n, h, w, ca) = dims(a);
    let cb = b.dim().3;
    let mut out = Vec::with_capacity(n * h * w * (ca + cb));
    for (ra, rb) in a
        .as_slice()
        .expect("standard layout")
        .chunks_exact(ca)
        .zip(b.as_slice().expect("standard layout").chunks_exact(cb))
    {
        out.extend_from_slice(ra);
        out.extend_from_slice(rb);
    }
    Array4::from_shape_vec((n, h, w, ca + cb), out).expect("sized above")
}

pub(crate) fn split_channels(d: &Array4<f64>, ca: usize) -> (Array4<f64>, Array4<f64>) {
    let (n, h, w, c) = dims(d);
    let cb = c - ca;
    let mut a = Vec::with_capacity(n * h * w * ca);
    let mut b = Vec::with_capacity(n * h * w * cb);
    for row in d.as_slice().expect("standard layout").chunks_exact(c) {
        a.extend_from_slice(&row[..ca]);
        b.extend_from_slice(&row[ca..]);
    }
    (
        Array4::from_shape_vec((n, h, w, ca), a).expect("sized above"),
        Array4::from_shape_vec((n, h, w, cb), b).expect("sized above"),
    )
}

pub(crate) fn softmax_inplace(x: &mut Array4<f64>) {
    let c = x.dim().3;
    for row in x.as_slice_mut().expect("standard layout").chunks_exact_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Gradient w.r.t. the logits given the softmax output `s` and `ds`.
pub(crate) fn softmax_backward(s: &Array4<f64>, ds: &Array4<f64>) -> Array4<f64> {
    let c = s.dim().3;
    let mut out = ds.clone();
    for (o, sr) in out
        .as_slice_mut()
        .expect("standard layout")
        .chunks_exact_mut(c)
        .zip(s.as_slice().expect("standard layout").chunks_exact(c))
    {
        let dot: f64 = o.iter().zip(sr).map(|(g, p)| g * p).sum();
        for (g, p) in o.iter_mut().zip(sr) {
            *g = p * (*g - dot);
        }
    }
    out
}
