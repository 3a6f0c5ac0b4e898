//! Raw numeric loops shared by tape forward and backward passes.
//!
//! Layout conventions: activations are row-major `(T, H, W, C)` with channels
//! innermost; linear weights are `[in, out]`; depthwise spatial kernels are
//! `[kh, kw, C]`; temporal kernels are `[kt, C]` (per channel) or
//! `[kt, Cin, Cout]` (channel mixing).

use super::Element;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu_value<T: Element>(x: T) -> T {
    let cdf = (x * T::from_f64(INV_SQRT_2)).erf() * T::from_f64(0.5) + T::from_f64(0.5);
    x * cdf
}

pub fn gelu_grad<T: Element>(x: T) -> T {
    let cdf = (x * T::from_f64(INV_SQRT_2)).erf() * T::from_f64(0.5) + T::from_f64(0.5);
    let pdf = (-(x * x) * T::from_f64(0.5)).exp() * T::from_f64(INV_SQRT_2PI);
    cdf + x * pdf
}

pub fn gelu_fwd<T: Element>(x: &[T], y: &mut [T]) {
    for (o, &v) in y.iter_mut().zip(x.iter()) {
        *o = gelu_value(v);
    }
}

pub fn gelu_bwd<T: Element>(x: &[T], g: &[T], dx: &mut [T]) {
    for i in 0..x.len() {
        dx[i] += g[i] * gelu_grad(x[i]);
    }
}

/// Visit every lane along `axis`: calls `f(base_offset, stride, len)`.
pub fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner, len);
        }
    }
}

pub fn softmax_lane<T: Element>(x: &[T], y: &mut [T], base: usize, stride: usize, len: usize) {
    let mut m = x[base];
    for j in 1..len {
        m = m.maximum(x[base + j * stride]);
    }
    let mut z = T::zero();
    for j in 0..len {
        let e = (x[base + j * stride] - m).exp();
        y[base + j * stride] = e;
        z += e;
    }
    for j in 0..len {
        y[base + j * stride] /= z;
    }
}

pub fn log_softmax_lane<T: Element>(x: &[T], y: &mut [T], base: usize, stride: usize, len: usize) {
    let mut m = x[base];
    for j in 1..len {
        m = m.maximum(x[base + j * stride]);
    }
    let mut z = T::zero();
    for j in 0..len {
        z += (x[base + j * stride] - m).exp();
    }
    let lz = z.ln() + m;
    for j in 0..len {
        y[base + j * stride] = x[base + j * stride] - lz;
    }
}

/// y[m,n] += x[m,k] · w[k,n]
pub fn matmul_acc<T: Element>(x: &[T], w: &[T], y: &mut [T], m: usize, k: usize, n: usize) {
    for im in 0..m {
        let xr = &x[im * k..im * k + k];
        let yr = &mut y[im * n..im * n + n];
        for ik in 0..k {
            let a = xr[ik];
            let wr = &w[ik * n..ik * n + n];
            for jn in 0..n {
                yr[jn] += a * wr[jn];
            }
        }
    }
}

/// dx[m,k] += g[m,n] · wᵀ  (w is [k,n])
pub fn matmul_dx<T: Element>(g: &[T], w: &[T], dx: &mut [T], m: usize, k: usize, n: usize) {
    for im in 0..m {
        let gr = &g[im * n..im * n + n];
        let dr = &mut dx[im * k..im * k + k];
        for ik in 0..k {
            let wr = &w[ik * n..ik * n + n];
            let mut acc = T::zero();
            for jn in 0..n {
                acc += gr[jn] * wr[jn];
            }
            dr[ik] += acc;
        }
    }
}

/// dw[k,n] += xᵀ · g  (x is [m,k], g is [m,n])
pub fn matmul_dw<T: Element>(x: &[T], g: &[T], dw: &mut [T], m: usize, k: usize, n: usize) {
    for im in 0..m {
        let xr = &x[im * k..im * k + k];
        let gr = &g[im * n..im * n + n];
        for ik in 0..k {
            let a = xr[ik];
            let dr = &mut dw[ik * n..ik * n + n];
            for jn in 0..n {
                dr[jn] += a * gr[jn];
            }
        }
    }
}

pub fn bias_acc<T: Element>(b: &[T], y: &mut [T], m: usize, n: usize) {
    for im in 0..m {
        let yr = &mut y[im * n..im * n + n];
        for jn in 0..n {
            yr[jn] += b[jn];
        }
    }
}

pub fn bias_grad<T: Element>(g: &[T], db: &mut [T], m: usize, n: usize) {
    for im in 0..m {
        let gr = &g[im * n..im * n + n];
        for jn in 0..n {
            db[jn] += gr[jn];
        }
    }
}

/// Depthwise 2-D convolution per frame, zero padded, kernel `[kh, kw, C]`.
pub fn dwconv2d_fwd<T: Element>(
    x: &[T],
    k: &[T],
    y: &mut [T],
    (t, h, w, c): (usize, usize, usize, usize),
    (kh, kw): (usize, usize),
) {
    let (rh, rw) = (kh / 2, kw / 2);
    for it in 0..t {
        let frame = it * h * w * c;
        for ih in 0..h {
            for iw in 0..w {
                let out = frame + (ih * w + iw) * c;
                for dy in 0..kh {
                    let sy = ih + dy;
                    if sy < rh || sy - rh >= h {
                        continue;
                    }
                    for dx in 0..kw {
                        let sx = iw + dx;
                        if sx < rw || sx - rw >= w {
                            continue;
                        }
                        let src = frame + ((sy - rh) * w + (sx - rw)) * c;
                        let kr = &k[(dy * kw + dx) * c..(dy * kw + dx) * c + c];
                        let xr = &x[src..src + c];
                        let yr = &mut y[out..out + c];
                        for ic in 0..c {
                            yr[ic] += xr[ic] * kr[ic];
                        }
                    }
                }
            }
        }
    }
}

pub fn dwconv2d_bwd<T: Element>(
    x: &[T],
    k: &[T],
    g: &[T],
    dx: &mut [T],
    dk: &mut [T],
    (t, h, w, c): (usize, usize, usize, usize),
    (kh, kw): (usize, usize),
) {
    let (rh, rw) = (kh / 2, kw / 2);
    for it in 0..t {
        let frame = it * h * w * c;
        for ih in 0..h {
            for iw in 0..w {
                let out = frame + (ih * w + iw) * c;
                let gr = &g[out..out + c];
                for dy in 0..kh {
                    let sy = ih + dy;
                    if sy < rh || sy - rh >= h {
                        continue;
                    }
                    for dxk in 0..kw {
                        let sx = iw + dxk;
                        if sx < rw || sx - rw >= w {
                            continue;
                        }
                        let src = frame + ((sy - rh) * w + (sx - rw)) * c;
                        let kbase = (dy * kw + dxk) * c;
                        for ic in 0..c {
                            dx[src + ic] += gr[ic] * k[kbase + ic];
                            dk[kbase + ic] += gr[ic] * x[src + ic];
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel 1-D convolution along T, zero padded, kernel `[kt, C]`.
pub fn tconv_pc_fwd<T: Element>(
    x: &[T],
    k: &[T],
    y: &mut [T],
    (t, h, w, c): (usize, usize, usize, usize),
    kt: usize,
) {
    let r = kt / 2;
    let hw = h * w * c;
    for it in 0..t {
        for dt in 0..kt {
            let st = it + dt;
            if st < r || st - r >= t {
                continue;
            }
            let src = (st - r) * hw;
            let dst = it * hw;
            let kr = &k[dt * c..dt * c + c];
            for pos in 0..h * w {
                let xr = &x[src + pos * c..src + pos * c + c];
                let yr = &mut y[dst + pos * c..dst + pos * c + c];
                for ic in 0..c {
                    yr[ic] += xr[ic] * kr[ic];
                }
            }
        }
    }
}

pub fn tconv_pc_bwd<T: Element>(
    x: &[T],
    k: &[T],
    g: &[T],
    dx: &mut [T],
    dk: &mut [T],
    (t, h, w, c): (usize, usize, usize, usize),
    kt: usize,
) {
    let r = kt / 2;
    let hw = h * w * c;
    for it in 0..t {
        for dt in 0..kt {
            let st = it + dt;
            if st < r || st - r >= t {
                continue;
            }
            let src = (st - r) * hw;
            let dst = it * hw;
            for pos in 0..h * w {
                let gr = &g[dst + pos * c..dst + pos * c + c];
                let xr = &x[src + pos * c..src + pos * c + c];
                for ic in 0..c {
                    dx[src + pos * c + ic] += gr[ic] * k[dt * c + ic];
                    dk[dt * c + ic] += gr[ic] * xr[ic];
                }
            }
        }
    }
}

/// Channel-mixing 1-D convolution along T, zero padded, kernel `[kt, Cin, Cout]`.
pub fn tconv_mix_fwd<T: Element>(
    x: &[T],
    k: &[T],
    y: &mut [T],
    (t, h, w, c): (usize, usize, usize, usize),
    kt: usize,
) {
    let r = kt / 2;
    let hw = h * w;
    for it in 0..t {
        for dt in 0..kt {
            let st = it + dt;
            if st < r || st - r >= t {
                continue;
            }
            matmul_acc(
                &x[(st - r) * hw * c..(st - r + 1) * hw * c],
                &k[dt * c * c..(dt + 1) * c * c],
                &mut y[it * hw * c..(it + 1) * hw * c],
                hw,
                c,
                c,
            );
        }
    }
}

pub fn tconv_mix_bwd<T: Element>(
    x: &[T],
    k: &[T],
    g: &[T],
    dx: &mut [T],
    dk: &mut [T],
    (t, h, w, c): (usize, usize, usize, usize),
    kt: usize,
) {
    let r = kt / 2;
    let hw = h * w;
    for it in 0..t {
        for dt in 0..kt {
            let st = it + dt;
            if st < r || st - r >= t {
                continue;
            }
            let xs = (st - r) * hw * c;
            let gs = it * hw * c;
            matmul_dx(
                &g[gs..gs + hw * c],
                &k[dt * c * c..(dt + 1) * c * c],
                &mut dx[xs..xs + hw * c],
                hw,
                c,
                c,
            );
            matmul_dw(
                &x[xs..xs + hw * c],
                &g[gs..gs + hw * c],
                &mut dk[dt * c * c..(dt + 1) * c * c],
                hw,
                c,
                c,
            );
        }
    }
}

/// Normalization over the last axis with affine parameters.
pub fn layer_norm_fwd<T: Element>(x: &[T], gamma: &[T], beta: &[T], y: &mut [T], c: usize, eps: f64) {
    let rows = x.len() / c;
    let inv_c = T::from_f64(1.0 / c as f64);
    for row in 0..rows {
        let xr = &x[row * c..row * c + c];
        let yr = &mut y[row * c..row * c + c];
        let mut mean = T::zero();
        for &v in xr {
            mean += v;
        }
        mean *= inv_c;
        let mut var = T::zero();
        for &v in xr {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_c;
        let inv = T::one() / (var + T::from_f64(eps)).sqrt();
        for ic in 0..c {
            yr[ic] = (xr[ic] - mean) * inv * gamma[ic] + beta[ic];
        }
    }
}

pub fn layer_norm_bwd<T: Element>(
    x: &[T],
    gamma: &[T],
    g: &[T],
    dx: &mut [T],
    dgamma: &mut [T],
    dbeta: &mut [T],
    c: usize,
    eps: f64,
) {
    let rows = x.len() / c;
    let inv_c = T::from_f64(1.0 / c as f64);
    for row in 0..rows {
        let xr = &x[row * c..row * c + c];
        let gr = &g[row * c..row * c + c];
        let mut mean = T::zero();
        for &v in xr {
            mean += v;
        }
        mean *= inv_c;
        let mut var = T::zero();
        for &v in xr {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_c;
        let inv = T::one() / (var + T::from_f64(eps)).sqrt();
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for ic in 0..c {
            let xhat = (xr[ic] - mean) * inv;
            let dxhat = gr[ic] * gamma[ic];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgamma[ic] += gr[ic] * xhat;
            dbeta[ic] += gr[ic];
        }
        sum_dxhat *= inv_c;
        sum_dxhat_xhat *= inv_c;
        for ic in 0..c {
            let xhat = (xr[ic] - mean) * inv;
            let dxhat = gr[ic] * gamma[ic];
            dx[row * c + ic] += inv * (dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
        }
    }
}

/// Accumulate `src` (shape `src_shape`, sizes 1 or matching) into every
/// matching position of `dst` (shape `dst_shape`), scaled by `scale`.
/// With src == reduced-keepdims shape this is broadcast; swapping the roles
/// of iteration gives reduction (see `reduce_sum_keepdims`).
pub fn broadcast_acc<T: Element>(
    src: &[T],
    src_shape: &[usize],
    dst: &mut [T],
    dst_shape: &[usize],
    scale: T,
) {
    debug_assert_eq!(src_shape.len(), dst_shape.len());
    let rank = dst_shape.len();
    let src_strides = super::strides(src_shape);
    let mut idx = vec![0usize; rank];
    let mut soff = 0usize;
    for slot in dst.iter_mut() {
        *slot += src[soff] * scale;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if src_shape[ax] != 1 {
                soff += src_strides[ax];
            }
            if idx[ax] < dst_shape[ax] {
                break;
            }
            idx[ax] = 0;
            if src_shape[ax] != 1 {
                soff -= src_strides[ax] * src_shape[ax];
            }
        }
    }
}

/// Sum `src` into `dst` where `dst_shape` has size 1 on reduced axes.
pub fn reduce_sum_keepdims<T: Element>(
    src: &[T],
    src_shape: &[usize],
    dst: &mut [T],
    dst_shape: &[usize],
) {
    debug_assert_eq!(src_shape.len(), dst_shape.len());
    let rank = src_shape.len();
    let dst_strides = super::strides(dst_shape);
    let mut idx = vec![0usize; rank];
    let mut doff = 0usize;
    for &v in src.iter() {
        dst[doff] += v;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if dst_shape[ax] != 1 {
                doff += dst_strides[ax];
            }
            if idx[ax] < src_shape[ax] {
                break;
            }
            idx[ax] = 0;
            if dst_shape[ax] != 1 {
                doff -= dst_strides[ax] * src_shape[ax];
            }
        }
    }
}

/// Space-to-depth on `(T, H, W, C)` with patch `p`:
/// output `(T, H/p, W/p, p·p·C)`, patch pixels ordered row-major.
pub fn patch_merge_fwd<T: Element>(
    x: &[T],
    y: &mut [T],
    (t, h, w, c): (usize, usize, usize, usize),
    p: usize,
) {
    let (ho, wo) = (h / p, w / p);
    let oc = p * p * c;
    for it in 0..t {
        for oh in 0..ho {
            for ow in 0..wo {
                let dst = ((it * ho + oh) * wo + ow) * oc;
                for py in 0..p {
                    for px in 0..p {
                        let src = ((it * h + oh * p + py) * w + ow * p + px) * c;
                        let d = dst + (py * p + px) * c;
                        y[d..d + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
}

pub fn patch_merge_bwd<T: Element>(
    g: &[T],
    dx: &mut [T],
    (t, h, w, c): (usize, usize, usize, usize),
    p: usize,
) {
    let (ho, wo) = (h / p, w / p);
    let oc = p * p * c;
    for it in 0..t {
        for oh in 0..ho {
            for ow in 0..wo {
                let dst = ((it * ho + oh) * wo + ow) * oc;
                for py in 0..p {
                    for px in 0..p {
                        let src = ((it * h + oh * p + py) * w + ow * p + px) * c;
                        let d = dst + (py * p + px) * c;
                        for ic in 0..c {
                            dx[src + ic] += g[d + ic];
                        }
                    }
                }
            }
        }
    }
}
