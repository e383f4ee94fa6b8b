//! Forward kernels and their vector-Jacobian products.
//!
//! The public functions take and return [`Tensor`]s and validate shapes. The
//! `*_backward` helpers are used by the gradient tape and assume validated
//! shapes.

use crate::error::{Error, Result};
use crate::numerics::tensor::{numel, Tensor};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

// ── matrix products ───────────────────────────────────────────────────

/// `out[r×c] += a[r×k] · b[k×c]`
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let out_row = &mut out[i * c..(i + 1) * c];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * c..(p + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[r×c] += a[r×k] · b[c×k]ᵀ`
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..c {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * c + j] += dot(a_row, b_row);
        }
    }
}

/// `out[r×c] += a[k×r]ᵀ · b[k×c]`
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], k: usize, r: usize, c: usize) {
    for p in 0..k {
        let a_row = &a[p * r..(p + 1) * r];
        let b_row = &b[p * c..(p + 1) * c];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * c..(i + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four partial sums keep the loop vectorizable
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for q in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * q + l] * b[4 * q + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for t in 4 * chunks..a.len() {
        s += a[t] * b[t];
    }
    s
}

fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(format!("{what} must be a matrix, got shape {s:?}"))),
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (r, k) = matrix_dims(a, "matmul lhs")?;
    let (k2, c) = matrix_dims(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions differ: {:?} × {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; r * c];
    gemm_acc(a.data(), b.data(), &mut out, r, k, c);
    Ok(Tensor::from_parts(vec![r, c], out))
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (r, k) = matrix_dims(a, "matmul_nt lhs")?;
    let (c, k2) = matrix_dims(b, "matmul_nt rhs")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul_nt inner dimensions differ: {:?} × {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; r * c];
    gemm_nt_acc(a.data(), b.data(), &mut out, r, k, c);
    Ok(Tensor::from_parts(vec![r, c], out))
}

// ── axis helpers ──────────────────────────────────────────────────────

/// Split a shape around `axis` into (outer, extent, inner) strides.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!(
            "axis {axis} invalid for shape {shape:?}"
        )));
    }
    Ok((
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    ))
}

// ── softmax ───────────────────────────────────────────────────────────

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let m = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (src[idx(j)] - m).exp();
                out[idx(j)] = e;
                z += e;
            }
            for j in 0..n {
                out[idx(j)] /= z;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// VJP of softmax given its output `y`.
pub(crate) fn softmax_backward(
    y: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    (outer, n, inner): (usize, usize, usize),
) {
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let s: f64 = (0..n).map(|j| dy[idx(j)] * y[idx(j)]).sum();
            for j in 0..n {
                dx[idx(j)] += y[idx(j)] * (dy[idx(j)] - s);
            }
        }
    }
}

// ── normalization ─────────────────────────────────────────────────────

/// Normalized values plus the per-slice reciprocal standard deviation,
/// retained for the backward pass.
pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn standardize(
    x: &[f64],
    (outer, n, inner): (usize, usize, usize),
    eps: f64,
) -> NormCache {
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let mean = (0..n).map(|j| x[idx(j)]).sum::<f64>() / n as f64;
            let var = (0..n).map(|j| (x[idx(j)] - mean).powi(2)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[o * inner + i] = r;
            for j in 0..n {
                xhat[idx(j)] = (x[idx(j)] - mean) * r;
            }
        }
    }
    NormCache { xhat, rstd }
}

/// VJP of `standardize` with respect to its input, given `dxhat`.
pub(crate) fn standardize_backward(
    cache: &NormCache,
    dxhat: &[f64],
    dx: &mut [f64],
    (outer, n, inner): (usize, usize, usize),
) {
    let nf = n as f64;
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let r = cache.rstd[o * inner + i];
            let mut mean_d = 0.0;
            let mut mean_dx = 0.0;
            for j in 0..n {
                mean_d += dxhat[idx(j)];
                mean_dx += dxhat[idx(j)] * cache.xhat[idx(j)];
            }
            mean_d /= nf;
            mean_dx /= nf;
            for j in 0..n {
                dx[idx(j)] += r * (dxhat[idx(j)] - mean_d - cache.xhat[idx(j)] * mean_dx);
            }
        }
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::param(format!("eps must be positive, got {eps}")));
    }
    Ok(())
}

pub(crate) fn check_affine(
    shape: &[usize],
    axis: usize,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<(usize, usize, usize)> {
    let split = axis_split(shape, axis)?;
    if gamma.len() != split.1 || beta.len() != split.1 {
        return Err(Error::dim(format!(
            "layer_norm affine of lengths {}/{} for normalized extent {}",
            gamma.len(),
            beta.len(),
            split.1
        )));
    }
    Ok(split)
}

pub(crate) fn apply_affine(
    xhat: &[f64],
    gamma: &[f64],
    beta: &[f64],
    (outer, n, inner): (usize, usize, usize),
) -> Vec<f64> {
    let mut out = vec![0.0; xhat.len()];
    for o in 0..outer {
        for j in 0..n {
            for i in 0..inner {
                let k = (o * n + j) * inner + i;
                out[k] = gamma[j] * xhat[k] + beta[j];
            }
        }
    }
    out
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, axis: usize, eps: f64) -> Result<Tensor> {
    check_eps(eps)?;
    let split = check_affine(x.shape(), axis, gamma, beta)?;
    let cache = standardize(x.data(), split, eps);
    let out = apply_affine(&cache.xhat, gamma.data(), beta.data(), split);
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Zero-mean unit-variance normalization along `axis` with no affine term.
pub fn normalize_axis(x: &Tensor, axis: usize, eps: f64) -> Result<Tensor> {
    check_eps(eps)?;
    let split = axis_split(x.shape(), axis)?;
    Ok(Tensor::from_parts(
        x.shape().to_vec(),
        standardize(x.data(), split, eps).xhat,
    ))
}

// ── activations ───────────────────────────────────────────────────────

/// Standard normal CDF.
pub(crate) fn phi_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    x * phi_cdf(x)
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    phi_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

// ── pooling & resampling ──────────────────────────────────────────────

pub fn global_avg_pool(m: &Tensor) -> Result<Tensor> {
    let [h, w, c] = *m.shape() else {
        return Err(Error::dim(format!(
            "global_avg_pool expects h×w×c, got {:?}",
            m.shape()
        )));
    };
    let mut out = vec![0.0; c];
    for px in m.data().chunks_exact(c) {
        for (o, &v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
    let n = (h * w) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(Tensor::from_parts(vec![c], out))
}

/// Corner-aligned source coordinate table: for each output index, the two
/// neighbouring source indices and the fractional weight of the second.
pub(crate) fn resize_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

fn resize_dims(m: &Tensor) -> Result<(usize, usize, usize)> {
    match *m.shape() {
        [h, w] => Ok((h, w, 1)),
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::dim(format!(
            "bilinear_resize expects h×w or h×w×c, got {s:?}"
        ))),
    }
}

pub(crate) fn check_resize(m: &Tensor, out_h: usize, out_w: usize) -> Result<(usize, usize, usize)> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::param(format!(
            "resize target must be at least 1×1, got {out_h}×{out_w}"
        )));
    }
    resize_dims(m)
}

/// Bilinear resize with corner-aligned sampling. Same-size resizing is an
/// exact identity and constant maps stay exactly constant.
pub fn bilinear_resize(m: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = check_resize(m, out_h, out_w)?;
    if (h, w) == (out_h, out_w) {
        return Ok(Tensor::from_parts(m.shape().to_vec(), m.data().to_vec()));
    }
    let ys = resize_axis(h, out_h);
    let xs = resize_axis(w, out_w);
    let src = m.data();
    let at = |y: usize, x: usize, k: usize| src[(y * w + x) * c + k];
    let mut out = vec![0.0; out_h * out_w * c];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for k in 0..c {
                let (a, b) = (at(y0, x0, k), at(y0, x1, k));
                let (p, q) = (at(y1, x0, k), at(y1, x1, k));
                let top = a + fx * (b - a);
                let bottom = p + fx * (q - p);
                out[(oy * out_w + ox) * c + k] = top + fy * (bottom - top);
            }
        }
    }
    let mut shape = m.shape().to_vec();
    shape[0] = out_h;
    shape[1] = out_w;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn bilinear_resize_backward(
    (h, w, c): (usize, usize, usize),
    out_h: usize,
    out_w: usize,
    dy: &[f64],
    dx: &mut [f64],
) {
    if (h, w) == (out_h, out_w) {
        for (d, &g) in dx.iter_mut().zip(dy) {
            *d += g;
        }
        return;
    }
    let ys = resize_axis(h, out_h);
    let xs = resize_axis(w, out_w);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for k in 0..c {
                let g = dy[(oy * out_w + ox) * c + k];
                let gt = g * (1.0 - fy);
                let gb = g * fy;
                dx[(y0 * w + x0) * c + k] += gt * (1.0 - fx);
                dx[(y0 * w + x1) * c + k] += gt * fx;
                dx[(y1 * w + x0) * c + k] += gb * (1.0 - fx);
                dx[(y1 * w + x1) * c + k] += gb * fx;
            }
        }
    }
}

/// `(m − min)/(max − min)`; a constant map becomes all zeros.
pub fn minmax_normalize(m: &Tensor) -> Tensor {
    let (lo, hi) = (m.min(), m.max());
    let range = hi - lo;
    if range <= 0.0 || !range.is_finite() {
        return Tensor::zeros(m.shape());
    }
    m.map(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

// ── convolution ───────────────────────────────────────────────────────

pub(crate) struct ConvDims {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_dims(x: &Tensor, kernel: &Tensor, padding: usize) -> Result<ConvDims> {
    let [h, w, cin] = *x.shape() else {
        return Err(Error::dim(format!("conv2d input must be h×w×c, got {:?}", x.shape())));
    };
    let [kh, kw, kcin, cout] = *kernel.shape() else {
        return Err(Error::dim(format!(
            "conv2d kernel must be kh×kw×cin×cout, got {:?}",
            kernel.shape()
        )));
    };
    if kcin != cin {
        return Err(Error::dim(format!(
            "conv2d kernel expects {kcin} input channels, input has {cin}"
        )));
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::dim(format!(
            "conv2d kernel {kh}×{kw} larger than padded input {}×{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    Ok(ConvDims {
        h,
        w,
        cin,
        kh,
        kw,
        cout,
        pad: padding,
        oh: h + 2 * padding - kh + 1,
        ow: w + 2 * padding - kw + 1,
    })
}

/// Visit every (output pixel, kernel tap, input pixel) triple that lies inside
/// the unpadded input.
#[inline]
fn for_each_tap(d: &ConvDims, mut f: impl FnMut(usize, usize, usize)) {
    for oy in 0..d.oh {
        for ky in 0..d.kh {
            let iy = oy + ky;
            if iy < d.pad || iy - d.pad >= d.h {
                continue;
            }
            let iy = iy - d.pad;
            for ox in 0..d.ow {
                for kx in 0..d.kw {
                    let ix = ox + kx;
                    if ix < d.pad || ix - d.pad >= d.w {
                        continue;
                    }
                    let ix = ix - d.pad;
                    f(oy * d.ow + ox, ky * d.kw + kx, iy * d.w + ix);
                }
            }
        }
    }
}

pub(crate) fn conv2d_raw(x: &[f64], k: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.oh * d.ow * d.cout];
    if d.kh == 1 && d.kw == 1 && d.pad == 0 {
        gemm_acc(x, k, &mut out, d.h * d.w, d.cin, d.cout);
        return out;
    }
    let (cin, cout) = (d.cin, d.cout);
    for_each_tap(d, |o, tap, i| {
        let out_px = &mut out[o * cout..(o + 1) * cout];
        let x_px = &x[i * cin..(i + 1) * cin];
        let k_tap = &k[tap * cin * cout..(tap + 1) * cin * cout];
        for (ci, &xv) in x_px.iter().enumerate() {
            let row = &k_tap[ci * cout..(ci + 1) * cout];
            for (acc, &kv) in out_px.iter_mut().zip(row) {
                *acc += xv * kv;
            }
        }
    });
    out
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    k: &[f64],
    dy: &[f64],
    d: &ConvDims,
    dx: Option<&mut [f64]>,
    dk: Option<&mut [f64]>,
) {
    let (cin, cout) = (d.cin, d.cout);
    if d.kh == 1 && d.kw == 1 && d.pad == 0 {
        if let Some(dx) = dx {
            gemm_nt_acc(dy, k, dx, d.h * d.w, cout, cin);
        }
        if let Some(dk) = dk {
            gemm_tn_acc(x, dy, dk, d.h * d.w, cin, cout);
        }
        return;
    }
    if let Some(dx) = dx {
        for_each_tap(d, |o, tap, i| {
            let g = &dy[o * cout..(o + 1) * cout];
            let k_tap = &k[tap * cin * cout..(tap + 1) * cin * cout];
            let dx_px = &mut dx[i * cin..(i + 1) * cin];
            for (ci, acc) in dx_px.iter_mut().enumerate() {
                *acc += dot(g, &k_tap[ci * cout..(ci + 1) * cout]);
            }
        });
    }
    if let Some(dk) = dk {
        for_each_tap(d, |o, tap, i| {
            let g = &dy[o * cout..(o + 1) * cout];
            let x_px = &x[i * cin..(i + 1) * cin];
            let dk_tap = &mut dk[tap * cin * cout..(tap + 1) * cin * cout];
            for (ci, &xv) in x_px.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (acc, &gv) in dk_tap[ci * cout..(ci + 1) * cout].iter_mut().zip(g) {
                    *acc += xv * gv;
                }
            }
        });
    }
}

/// 2-D cross-correlation of an `h×w×cin` input with a `kh×kw×cin×cout`
/// kernel and symmetric zero padding.
pub fn conv2d(x: &Tensor, kernel: &Tensor, padding: usize) -> Result<Tensor> {
    let d = conv_dims(x, kernel, padding)?;
    let out = conv2d_raw(x.data(), kernel.data(), &d);
    Ok(Tensor::from_parts(vec![d.oh, d.ow, d.cout], out))
}
