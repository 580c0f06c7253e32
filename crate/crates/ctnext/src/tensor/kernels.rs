//! Inner loops for the tensor ops. Everything iterates with the channel
//! axis innermost and contiguous so the compiler can vectorize without
//! reassociating float math; results are bitwise independent of call site.

use super::{Real, Tensor, TensorError};

/// `dst += src` elementwise.
#[inline]
pub fn axpy<T: Real>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`, all row-major.
pub fn gemm_accum<T: Real>(a: &[T], m: usize, k: usize, b: &[T], n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[k,m] += a^T * b` for `a: [rows, k]`, `b: [rows, m]`.
pub fn gemm_at_b<T: Real>(a: &[T], rows: usize, k: usize, b: &[T], m: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), rows * k);
    debug_assert_eq!(b.len(), rows * m);
    debug_assert_eq!(out.len(), k * m);
    for r in 0..rows {
        let arow = &a[r * k..(r + 1) * k];
        let brow = &b[r * m..(r + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

pub fn transpose<T: Real>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output-column range for which `iw = ow*stride + kw - pad` stays in-bounds.
#[inline]
fn valid_cols(w_in: usize, w_out: usize, kw: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kw >= pad {
        0
    } else {
        (pad - kw).div_ceil(stride)
    };
    let max_iw = w_in as i64 - 1 - kw as i64 + pad as i64;
    if max_iw < 0 {
        return (0, 0);
    }
    let hi = ((max_iw as usize) / stride + 1).min(w_out);
    (lo.min(hi), hi)
}

struct ConvDims {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
    pad: usize,
    depthwise: bool,
    op: &'static str,
) -> Result<ConvDims, TensorError> {
    let mismatch = |detail: String| TensorError::ShapeMismatch { op, detail };
    if x.shape.len() != 4 {
        return Err(mismatch(format!("input must be [N,H,W,C], got {:?}", x.shape)));
    }
    let (n, h, w, cin) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (kh, kw, kc, cout) = if depthwise {
        if k.shape.len() != 3 {
            return Err(mismatch(format!("kernel must be [kh,kw,C], got {:?}", k.shape)));
        }
        (k.shape[0], k.shape[1], k.shape[2], k.shape[2])
    } else {
        if k.shape.len() != 4 {
            return Err(mismatch(format!(
                "kernel must be [kh,kw,Cin,Cout], got {:?}",
                k.shape
            )));
        }
        (k.shape[0], k.shape[1], k.shape[2], k.shape[3])
    };
    if kc != cin || stride == 0 || kh == 0 || kw == 0 {
        return Err(mismatch(format!(
            "input {:?} incompatible with kernel {:?} (stride {stride})",
            x.shape, k.shape
        )));
    }
    let (oh, ow) = match (
        out_extent(h, kh, stride, pad),
        out_extent(w, kw, stride, pad),
    ) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
        _ => {
            return Err(mismatch(format!(
                "empty output for input {:?}, kernel {:?}, stride {stride}, pad {pad}",
                x.shape, k.shape
            )))
        }
    };
    Ok(ConvDims {
        n,
        h,
        w,
        cin,
        kh,
        kw,
        cout,
        oh,
        ow,
    })
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, TensorError> {
    let d = conv_dims(x, k, stride, pad, false, "conv2d")?;
    let mut out = vec![T::zero(); d.n * d.oh * d.ow * d.cout];
    for ni in 0..d.n {
        for oh in 0..d.oh {
            let orow = &mut out[(ni * d.oh + oh) * d.ow * d.cout..][..d.ow * d.cout];
            for khi in 0..d.kh {
                let ih = (oh * stride + khi) as i64 - pad as i64;
                if ih < 0 || ih >= d.h as i64 {
                    continue;
                }
                let xrow = &x.data[(ni * d.h + ih as usize) * d.w * d.cin..][..d.w * d.cin];
                for kwi in 0..d.kw {
                    let (lo, hi) = valid_cols(d.w, d.ow, kwi, stride, pad);
                    for ow in lo..hi {
                        let iw = ow * stride + kwi - pad;
                        let xa = &xrow[iw * d.cin..(iw + 1) * d.cin];
                        let oa = &mut orow[ow * d.cout..(ow + 1) * d.cout];
                        for (ci, &xv) in xa.iter().enumerate() {
                            let krow =
                                &k.data[((khi * d.kw + kwi) * d.cin + ci) * d.cout..][..d.cout];
                            for (o, &kv) in oa.iter_mut().zip(krow) {
                                *o = *o + xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![d.n, d.oh, d.ow, d.cout], out))
}

pub fn conv2d_backward_input<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    dy: &[T],
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let d = conv_dims(x, k, stride, pad, false, "conv2d").expect("checked at forward");
    // Kernel transposed to [kh, kw, Cout, Cin] keeps the inner axis contiguous.
    let mut kt = vec![T::zero(); k.data.len()];
    for khw in 0..d.kh * d.kw {
        let src = &k.data[khw * d.cin * d.cout..][..d.cin * d.cout];
        let dst = &mut kt[khw * d.cin * d.cout..][..d.cin * d.cout];
        for ci in 0..d.cin {
            for co in 0..d.cout {
                dst[co * d.cin + ci] = src[ci * d.cout + co];
            }
        }
    }
    let mut dx = vec![T::zero(); x.data.len()];
    for ni in 0..d.n {
        for oh in 0..d.oh {
            let dyrow = &dy[(ni * d.oh + oh) * d.ow * d.cout..][..d.ow * d.cout];
            for khi in 0..d.kh {
                let ih = (oh * stride + khi) as i64 - pad as i64;
                if ih < 0 || ih >= d.h as i64 {
                    continue;
                }
                let dxrow = &mut dx[(ni * d.h + ih as usize) * d.w * d.cin..][..d.w * d.cin];
                for kwi in 0..d.kw {
                    let (lo, hi) = valid_cols(d.w, d.ow, kwi, stride, pad);
                    for ow in lo..hi {
                        let iw = ow * stride + kwi - pad;
                        let dyv = &dyrow[ow * d.cout..(ow + 1) * d.cout];
                        let dxa = &mut dxrow[iw * d.cin..(iw + 1) * d.cin];
                        for (co, &gv) in dyv.iter().enumerate() {
                            let ktrow =
                                &kt[((khi * d.kw + kwi) * d.cout + co) * d.cin..][..d.cin];
                            for (o, &kv) in dxa.iter_mut().zip(ktrow) {
                                *o = *o + gv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn conv2d_backward_kernel<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    dy: &[T],
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let d = conv_dims(x, k, stride, pad, false, "conv2d").expect("checked at forward");
    let mut dk = vec![T::zero(); k.data.len()];
    for ni in 0..d.n {
        for oh in 0..d.oh {
            let dyrow = &dy[(ni * d.oh + oh) * d.ow * d.cout..][..d.ow * d.cout];
            for khi in 0..d.kh {
                let ih = (oh * stride + khi) as i64 - pad as i64;
                if ih < 0 || ih >= d.h as i64 {
                    continue;
                }
                let xrow = &x.data[(ni * d.h + ih as usize) * d.w * d.cin..][..d.w * d.cin];
                for kwi in 0..d.kw {
                    let (lo, hi) = valid_cols(d.w, d.ow, kwi, stride, pad);
                    let dkbase = (khi * d.kw + kwi) * d.cin * d.cout;
                    for ow in lo..hi {
                        let iw = ow * stride + kwi - pad;
                        let xa = &xrow[iw * d.cin..(iw + 1) * d.cin];
                        let dyv = &dyrow[ow * d.cout..(ow + 1) * d.cout];
                        for (ci, &xv) in xa.iter().enumerate() {
                            let dkrow = &mut dk[dkbase + ci * d.cout..][..d.cout];
                            for (o, &gv) in dkrow.iter_mut().zip(dyv) {
                                *o = *o + xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    dk
}

pub fn depthwise_forward<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, TensorError> {
    let d = conv_dims(x, k, stride, pad, true, "depthwise_conv2d")?;
    let c = d.cin;
    let mut out = vec![T::zero(); d.n * d.oh * d.ow * c];
    for ni in 0..d.n {
        for oh in 0..d.oh {
            let orow = &mut out[(ni * d.oh + oh) * d.ow * c..][..d.ow * c];
            for khi in 0..d.kh {
                let ih = (oh * stride + khi) as i64 - pad as i64;
                if ih < 0 || ih >= d.h as i64 {
                    continue;
                }
                let xrow = &x.data[(ni * d.h + ih as usize) * d.w * c..][..d.w * c];
                for kwi in 0..d.kw {
                    let krow = &k.data[(khi * d.kw + kwi) * c..][..c];
                    let (lo, hi) = valid_cols(d.w, d.ow, kwi, stride, pad);
                    for ow in lo..hi {
                        let iw = ow * stride + kwi - pad;
                        let xa = &xrow[iw * c..(iw + 1) * c];
                        let oa = &mut orow[ow * c..(ow + 1) * c];
                        for ((o, &xv), &kv) in oa.iter_mut().zip(xa).zip(krow) {
                            *o = *o + xv * kv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![d.n, d.oh, d.ow, c], out))
}

pub fn depthwise_backward_input<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    dy: &[T],
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let d = conv_dims(x, k, stride, pad, true, "depthwise_conv2d").expect("checked at forward");
    let c = d.cin;
    let mut dx = vec![T::zero(); x.data.len()];
    for ni in 0..d.n {
        for oh in 0..d.oh {
            let dyrow = &dy[(ni * d.oh + oh) * d.ow * c..][..d.ow * c];
            for khi in 0..d.kh {
                let ih = (oh * stride + khi) as i64 - pad as i64;
                if ih < 0 || ih >= d.h as i64 {
                    continue;
                }
                let dxrow = &mut dx[(ni * d.h + ih as usize) * d.w * c..][..d.w * c];
                for kwi in 0..d.kw {
                    let krow = &k.data[(khi * d.kw + kwi) * c..][..c];
                    let (lo, hi) = valid_cols(d.w, d.ow, kwi, stride, pad);
                    for ow in lo..hi {
                        let iw = ow * stride + kwi - pad;
                        let dyv = &dyrow[ow * c..(ow + 1) * c];
                        let dxa = &mut dxrow[iw * c..(iw + 1) * c];
                        for ((o, &gv), &kv) in dxa.iter_mut().zip(dyv).zip(krow) {
                            *o = *o + gv * kv;
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn depthwise_backward_kernel<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    dy: &[T],
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let d = conv_dims(x, k, stride, pad, true, "depthwise_conv2d").expect("checked at forward");
    let c = d.cin;
    let mut dk = vec![T::zero(); k.data.len()];
    for ni in 0..d.n {
        for oh in 0..d.oh {
            let dyrow = &dy[(ni * d.oh + oh) * d.ow * c..][..d.ow * c];
            for khi in 0..d.kh {
                let ih = (oh * stride + khi) as i64 - pad as i64;
                if ih < 0 || ih >= d.h as i64 {
                    continue;
                }
                let xrow = &x.data[(ni * d.h + ih as usize) * d.w * c..][..d.w * c];
                for kwi in 0..d.kw {
                    let dkrow = &mut dk[(khi * d.kw + kwi) * c..][..c];
                    let (lo, hi) = valid_cols(d.w, d.ow, kwi, stride, pad);
                    for ow in lo..hi {
                        let iw = ow * stride + kwi - pad;
                        let xa = &xrow[iw * c..(iw + 1) * c];
                        let dyv = &dyrow[ow * c..(ow + 1) * c];
                        for ((o, &xv), &gv) in dkrow.iter_mut().zip(xa).zip(dyv) {
                            *o = *o + xv * gv;
                        }
                    }
                }
            }
        }
    }
    dk
}

pub fn layer_norm_forward<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T], eps: f64) -> Tensor<T> {
    let c = *x.shape.last().unwrap();
    let eps = T::from_f64_c(eps);
    let inv_c = T::one() / T::from_f64_c(c as f64);
    let mut out = vec![T::zero(); x.data.len()];
    for (xrow, orow) in x.data.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let mean = xrow.iter().copied().fold(T::zero(), |a, v| a + v) * inv_c;
        let var = xrow
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .fold(T::zero(), |a, v| a + v)
            * inv_c;
        let inv_std = T::one() / (var + eps).sqrt();
        for (((o, &v), &g), &b) in orow.iter_mut().zip(xrow).zip(gamma).zip(beta) {
            *o = (v - mean) * inv_std * g + b;
        }
    }
    Tensor::new(x.shape.clone(), out)
}

pub fn layer_norm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    dy: &[T],
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = *x.shape.last().unwrap();
    let eps = T::from_f64_c(eps);
    let inv_c = T::one() / T::from_f64_c(c as f64);
    let mut dx = vec![T::zero(); x.data.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut xhat = vec![T::zero(); c];
    for ((xrow, dyrow), dxrow) in x
        .data
        .chunks_exact(c)
        .zip(dy.chunks_exact(c))
        .zip(dx.chunks_exact_mut(c))
    {
        let mean = xrow.iter().copied().fold(T::zero(), |a, v| a + v) * inv_c;
        let var = xrow
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .fold(T::zero(), |a, v| a + v)
            * inv_c;
        let inv_std = T::one() / (var + eps).sqrt();
        for (h, &v) in xhat.iter_mut().zip(xrow) {
            *h = (v - mean) * inv_std;
        }
        // g = dy * gamma; dx = inv_std * (g - mean(g) - xhat * mean(g*xhat))
        let mut mean_g = T::zero();
        let mut mean_gx = T::zero();
        for ((&g, &gm), &h) in dyrow.iter().zip(gamma).zip(&xhat) {
            let gg = g * gm;
            mean_g = mean_g + gg;
            mean_gx = mean_gx + gg * h;
        }
        mean_g = mean_g * inv_c;
        mean_gx = mean_gx * inv_c;
        for (((d, &g), &gm), &h) in dxrow.iter_mut().zip(dyrow).zip(gamma).zip(&xhat) {
            *d = inv_std * (g * gm - mean_g - h * mean_gx);
        }
        for (((dg, db), &g), &h) in dgamma.iter_mut().zip(dbeta.iter_mut()).zip(dyrow).zip(&xhat)
        {
            *dg = *dg + g * h;
            *db = *db + g;
        }
    }
    (dx, dgamma, dbeta)
}
