//! Forward/backward kernels for the dense layers.

use super::tensor::{Real, Tensor};
use crate::error::{ensure_eq, Error, Result};
use crate::par;

fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                // valid output columns: 0 <= ox + kx - pad < w
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                for oy in 0..h {
                    let d = &mut dst[oy * w..(oy + 1) * w];
                    let sy = oy as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        d.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    d[..x_lo].fill(T::zero());
                    d[x_hi..].fill(T::zero());
                    let s0 = x_lo + kx - pad;
                    d[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], cin: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for oy in 0..h {
                    let sy = oy as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = &src[oy * w..(oy + 1) * w];
                    let s0 = x_lo + kx - pad;
                    let d = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x_hi - x_lo)];
                    for (a, &b) in d.iter_mut().zip(&s[x_lo..x_hi]) {
                        *a += b;
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

pub(crate) fn conv_dims<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<ConvDims> {
    let (n, cin, h, wd) = x.nchw()?;
    let (cout, kcin, k, k2) = w.nchw()?;
    ensure_eq("kernel input channels", cin, kcin)?;
    ensure_eq("kernel width", k, k2)?;
    if k % 2 == 0 {
        return Err(Error::invalid(format!("kernel size {k} must be odd")));
    }
    ensure_eq("bias length", cout, b.len())?;
    Ok(ConvDims {
        n,
        cin,
        cout,
        h,
        w: wd,
        k,
    })
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = conv_dims(x, w, b)?;
    let hw = d.h * d.w;
    let kk = d.cin * d.k * d.k;
    let mut out = vec![T::zero(); d.n * d.cout * hw];
    let (xs, ws, bs) = (x.data(), w.data(), b.data());
    par::for_each_chunk(&mut out, d.cout * hw, |s, o| {
        let xin = &xs[s * d.cin * hw..(s + 1) * d.cin * hw];
        let mut cols = vec![T::zero(); kk * hw];
        im2col(xin, d.cin, d.h, d.w, d.k, &mut cols);
        for (co, row) in o.chunks_mut(hw).enumerate() {
            row.fill(bs[co]);
        }
        // SAFETY: extents match the allocated buffers.
        unsafe {
            T::gemm(
                d.cout,
                kk,
                hw,
                T::one(),
                ws.as_ptr(),
                kk as isize,
                1,
                cols.as_ptr(),
                hw as isize,
                1,
                T::one(),
                o.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
    });
    Tensor::new(vec![d.n, d.cout, d.h, d.w], out)
}

/// Returns `(dx, dw, db)`; `dx` only when requested.
pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    gout: &Tensor<T>,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let d = conv_dims(x, w, b)?;
    let hw = d.h * d.w;
    let kk = d.cin * d.k * d.k;
    let (xs, ws, gs) = (x.data(), w.data(), gout.data());
    let parts = par::map_range(d.n, |s| {
        let xin = &xs[s * d.cin * hw..(s + 1) * d.cin * hw];
        let g = &gs[s * d.cout * hw..(s + 1) * d.cout * hw];
        let mut cols = vec![T::zero(); kk * hw];
        im2col(xin, d.cin, d.h, d.w, d.k, &mut cols);
        let mut dw = vec![T::zero(); d.cout * kk];
        let db: Vec<T> = g.chunks(hw).map(|r| r.iter().copied().sum()).collect();
        // SAFETY: extents match the allocated buffers.
        unsafe {
            T::gemm(
                d.cout,
                hw,
                kk,
                T::one(),
                g.as_ptr(),
                hw as isize,
                1,
                cols.as_ptr(),
                1,
                hw as isize,
                T::zero(),
                dw.as_mut_ptr(),
                kk as isize,
                1,
            );
        }
        let dx = need_dx.then(|| {
            // reuse the column buffer for dcols
            unsafe {
                T::gemm(
                    kk,
                    d.cout,
                    hw,
                    T::one(),
                    ws.as_ptr(),
                    1,
                    kk as isize,
                    g.as_ptr(),
                    hw as isize,
                    1,
                    T::zero(),
                    cols.as_mut_ptr(),
                    hw as isize,
                    1,
                );
            }
            let mut dx = vec![T::zero(); d.cin * hw];
            col2im(&cols, d.cin, d.h, d.w, d.k, &mut dx);
            dx
        });
        (dx, dw, db)
    });
    let mut dw = Tensor::zeros(w.shape().to_vec());
    let mut db = Tensor::zeros(b.shape().to_vec());
    let mut dx = need_dx.then(|| Vec::with_capacity(x.len()));
    for (pdx, pdw, pdb) in parts {
        dw.data_mut().iter_mut().zip(&pdw).for_each(|(a, &v)| *a += v);
        db.data_mut().iter_mut().zip(&pdb).for_each(|(a, &v)| *a += v);
        if let (Some(acc), Some(p)) = (dx.as_mut(), pdx) {
            acc.extend_from_slice(&p);
        }
    }
    let dx = dx
        .map(|v| Tensor::new(x.shape().to_vec(), v))
        .transpose()?;
    Ok((dx, dw, db))
}

/// `y[N, out] = x[N, in] · wᵀ + b`.
pub(crate) fn linear_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let n = x.dim(0);
    let fan_in = x.len() / n.max(1);
    if w.shape().len() != 2 {
        return Err(Error::invalid("linear weight must be rank 2"));
    }
    let (out, inp) = (w.dim(0), w.dim(1));
    ensure_eq("flattened input size", inp, fan_in)?;
    ensure_eq("bias length", out, b.len())?;
    let mut y = vec![T::zero(); n * out];
    for row in y.chunks_mut(out) {
        row.copy_from_slice(b.data());
    }
    unsafe {
        T::gemm(
            n,
            inp,
            out,
            T::one(),
            x.data().as_ptr(),
            inp as isize,
            1,
            w.data().as_ptr(),
            1,
            inp as isize,
            T::one(),
            y.as_mut_ptr(),
            out as isize,
            1,
        );
    }
    Tensor::new(vec![n, out], y)
}

pub(crate) fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let n = x.dim(0);
    let (out, inp) = (w.dim(0), w.dim(1));
    let mut dx = vec![T::zero(); n * inp];
    let mut dw = vec![T::zero(); out * inp];
    unsafe {
        T::gemm(
            n,
            out,
            inp,
            T::one(),
            gy.data().as_ptr(),
            out as isize,
            1,
            w.data().as_ptr(),
            inp as isize,
            1,
            T::zero(),
            dx.as_mut_ptr(),
            inp as isize,
            1,
        );
        T::gemm(
            out,
            n,
            inp,
            T::one(),
            gy.data().as_ptr(),
            1,
            out as isize,
            x.data().as_ptr(),
            inp as isize,
            1,
            T::zero(),
            dw.as_mut_ptr(),
            inp as isize,
            1,
        );
    }
    let mut db = vec![T::zero(); out];
    for row in gy.data().chunks(out) {
        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("shape"),
        Tensor::new(w.shape().to_vec(), dw).expect("shape"),
        Tensor::new(vec![out], db).expect("shape"),
    )
}

pub(crate) struct BnForward<T> {
    pub y: Tensor<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// unbiased batch variance (for running statistics)
    pub var: Vec<T>,
}

/// Per-channel normalisation over `(N, H, W)`. With `stats = Some((mean,
/// var))` the given statistics are used instead of the batch's.
pub(crate) fn batchnorm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: Option<(&[T], &[T])>,
    eps: T,
) -> Result<BnForward<T>> {
    let (n, c, h, w) = x.nchw()?;
    ensure_eq("batchnorm scale length", c, gamma.len())?;
    ensure_eq("batchnorm shift length", c, beta.len())?;
    let hw = h * w;
    let m = n * hw;
    let xs = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    let mut unbiased = vec![T::zero(); c];
    for ch in 0..c {
        let (mu, v) = match stats {
            Some((ms, vs)) => (ms[ch], vs[ch]),
            None => {
                let mut s = 0.0f64;
                for s_i in 0..n {
                    s += xs[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw]
                        .iter()
                        .map(|v| v.to_f64_real())
                        .sum::<f64>();
                }
                let mu = s / m as f64;
                let mut ss = 0.0f64;
                for s_i in 0..n {
                    ss += xs[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw]
                        .iter()
                        .map(|v| (v.to_f64_real() - mu).powi(2))
                        .sum::<f64>();
                }
                unbiased[ch] = T::real(if m > 1 { ss / (m - 1) as f64 } else { 0.0 });
                (T::real(mu), T::real(ss / m as f64))
            }
        };
        mean[ch] = mu;
        var[ch] = v;
        inv_std[ch] = T::one() / (v + eps).sqrt();
    }
    let mut xhat = vec![T::zero(); xs.len()];
    let mut y = vec![T::zero(); xs.len()];
    for s_i in 0..n {
        for ch in 0..c {
            let r = (s_i * c + ch) * hw..(s_i * c + ch + 1) * hw;
            let (g, b, mu, inv) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
            for ((xh, yv), &xv) in xhat[r.clone()].iter_mut().zip(&mut y[r.clone()]).zip(&xs[r]) {
                *xh = (xv - mu) * inv;
                *yv = g * *xh + b;
            }
        }
    }
    Ok(BnForward {
        y: Tensor::new(x.shape().to_vec(), y)?,
        xhat,
        inv_std,
        mean,
        var: if stats.is_some() { var } else { unbiased },
    })
}

pub(crate) fn batchnorm_backward<T: Real>(
    shape: &[usize],
    gamma: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
    gy: &Tensor<T>,
    batch_stats: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c) = (shape[0], shape[1]);
    let hw: usize = shape[2..].iter().product();
    let m = T::real((n * hw) as f64);
    let g = gy.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut s_dxhat = vec![T::zero(); c];
    let mut s_dxhat_xhat = vec![T::zero(); c];
    for s_i in 0..n {
        for ch in 0..c {
            let r = (s_i * c + ch) * hw..(s_i * c + ch + 1) * hw;
            for (&gv, &xh) in g[r.clone()].iter().zip(&xhat[r]) {
                dgamma[ch] += gv * xh;
                dbeta[ch] += gv;
                let dxh = gv * gamma.data()[ch];
                s_dxhat[ch] += dxh;
                s_dxhat_xhat[ch] += dxh * xh;
            }
        }
    }
    let mut dx = vec![T::zero(); g.len()];
    for s_i in 0..n {
        for ch in 0..c {
            let r = (s_i * c + ch) * hw..(s_i * c + ch + 1) * hw;
            let gm = gamma.data()[ch];
            let inv = inv_std[ch];
            for ((d, &gv), &xh) in dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                let dxh = gv * gm;
                *d = if batch_stats {
                    inv / m * (m * dxh - s_dxhat[ch] - xh * s_dxhat_xhat[ch])
                } else {
                    dxh * inv
                };
            }
        }
    }
    (
        Tensor::new(shape.to_vec(), dx).expect("shape"),
        Tensor::new(vec![c], dgamma).expect("shape"),
        Tensor::new(vec![c], dbeta).expect("shape"),
    )
}

pub(crate) fn maxpool2_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.nchw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "max-pool needs even extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xs = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                    if xs[cand] > xs[best] {
                        best = cand;
                    }
                }
                out.push(xs[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

pub(crate) fn upsample2_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.nchw()?;
    let (oh, ow) = (2 * h, 2 * w);
    let xs = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                out[p * oh * ow + oy * ow + ox] = xs[p * h * w + (oy / 2) * w + ox / 2];
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub(crate) fn upsample2_backward<T: Real>(shape: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let ow = 2 * w;
    let gs = g.data();
    let mut dx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                let o = p * 4 * h * w + 2 * y * ow + 2 * x;
                dx[p * h * w + y * w + x] = gs[o] + gs[o + 1] + gs[o + ow] + gs[o + ow + 1];
            }
        }
    }
    Tensor::new(shape.to_vec(), dx).expect("shape")
}

pub(crate) fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.nchw()?;
    let (nb, cb, hb, wb) = b.nchw()?;
    ensure_eq("batch", n, nb)?;
    ensure_eq("height", h, hb)?;
    ensure_eq("width", w, wb)?;
    let hw = h * w;
    let mut out = Vec::with_capacity(a.len() + b.len());
    for s in 0..n {
        out.extend_from_slice(&a.data()[s * ca * hw..(s + 1) * ca * hw]);
        out.extend_from_slice(&b.data()[s * cb * hw..(s + 1) * cb * hw]);
    }
    Tensor::new(vec![n, ca + cb, h, w], out)
}

pub(crate) fn split_channels<T: Real>(
    g: &Tensor<T>,
    ca: usize,
) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = (g.dim(0), g.dim(1), g.dim(2), g.dim(3));
    let cb = c - ca;
    let hw = h * w;
    let mut ga = Vec::with_capacity(n * ca * hw);
    let mut gb = Vec::with_capacity(n * cb * hw);
    for s in 0..n {
        let base = s * c * hw;
        ga.extend_from_slice(&g.data()[base..base + ca * hw]);
        gb.extend_from_slice(&g.data()[base + ca * hw..base + c * hw]);
    }
    (
        Tensor::new(vec![n, ca, h, w], ga).expect("shape"),
        Tensor::new(vec![n, cb, h, w], gb).expect("shape"),
    )
}
