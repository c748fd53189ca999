//! Forward and backward kernels for the layer primitives.
//!
//! Every forward kernel also returns the floating-point operations it
//! executed, counted from its own loop extents (one multiply-accumulate is
//! two operations). The tape feeds these into its per-component counter.

use crate::error::{config_err, Error, Result};
use crate::numerics::Tensor;

/// `c = a · b + beta · c` for row-major dense matrices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller supplies slices covering the strided extents.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return config_err("stride must be at least 1");
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return config_err(format!(
            "padded extent {padded} admits no placement of a {kernel}-wide kernel"
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || input == 0 {
        return config_err("stride and input extent must be at least 1");
    }
    let full = (input - 1) * stride + kernel;
    if full <= 2 * pad {
        return config_err(format!("padding {pad} consumes the whole transposed output"));
    }
    Ok(full - 2 * pad)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

fn im2col(x: &[f32], g: Geometry, cols: &mut [f32]) {
    let plane = g.ho * g.wo;
    for c in 0..g.channels {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: Geometry, x: &mut [f32]) {
    let plane = g.ho * g.wo;
    for c in 0..g.channels {
        let xc = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_bias(bias: &Tensor, channels: usize) -> Result<()> {
    if bias.shape() != [channels] {
        return config_err(format!("bias shape {:?} does not match {channels} channels", bias.shape()));
    }
    Ok(())
}

/// Direct 2-D convolution. `weight` is `[out, in, k, k]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<(Tensor, u64)> {
    let (n, c, h, w) = x.dims4()?;
    let (o, ci, k, k2) = weight.dims4()?;
    if ci != c || k != k2 {
        return config_err(format!("conv2d weight {:?} incompatible with input {:?}", weight.shape(), x.shape()));
    }
    check_bias(bias, o)?;
    let ho = conv_out_extent(h, k, stride, pad)?;
    let wo = conv_out_extent(w, k, stride, pad)?;
    let g = Geometry { channels: c, h, w, k, stride, pad, ho, wo };
    let rows = c * k * k;
    let plane = ho * wo;
    let mut cols = vec![0.0f32; rows * plane];
    let mut out = vec![0.0f32; n * o * plane];
    for b in 0..n {
        im2col(&x.data()[b * c * h * w..(b + 1) * c * h * w], g, &mut cols);
        let dst = &mut out[b * o * plane..(b + 1) * o * plane];
        for (oc, chunk) in dst.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias.data()[oc]);
        }
        gemm(o, rows, plane, weight.data(), (rows as isize, 1), &cols, (plane as isize, 1), 1.0, dst);
    }
    let flops = n as u64 * (2 * (o * rows * plane) as u64 + (o * plane) as u64);
    Ok((Tensor::from_vec(&[n, o, ho, wo], out)?, flops))
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w) = x.dims4()?;
    let (o, _, k, _) = weight.dims4()?;
    let (_, _, ho, wo) = dy.dims4()?;
    let g = Geometry { channels: c, h, w, k, stride, pad, ho, wo };
    let rows = c * k * k;
    let plane = ho * wo;
    let mut cols = vec![0.0f32; rows * plane];
    let mut dcols = vec![0.0f32; rows * plane];
    let mut dx = vec![0.0f32; x.numel()];
    let mut dw = vec![0.0f32; weight.numel()];
    let mut db = vec![0.0f32; o];
    for b in 0..n {
        let dyb = &dy.data()[b * o * plane..(b + 1) * o * plane];
        for (oc, chunk) in dyb.chunks(plane).enumerate() {
            db[oc] += chunk.iter().sum::<f32>();
        }
        im2col(&x.data()[b * c * h * w..(b + 1) * c * h * w], g, &mut cols);
        // dW[o, r] += dy[o, p] · cols[r, p]
        gemm(o, plane, rows, dyb, (plane as isize, 1), &cols, (1, plane as isize), 1.0, &mut dw);
        // dcols[r, p] = W[o, r]ᵀ · dy[o, p]
        gemm(rows, o, plane, weight.data(), (1, rows as isize), dyb, (plane as isize, 1), 0.0, &mut dcols);
        col2im(&dcols, g, &mut dx[b * c * h * w..(b + 1) * c * h * w]);
    }
    Ok((
        Tensor::from_vec(x.shape(), dx)?,
        Tensor::from_vec(weight.shape(), dw)?,
        Tensor::from_vec(&[o], db)?,
    ))
}

/// Transposed 2-D convolution. `weight` is `[in, out, k, k]`.
pub fn conv_transpose2d(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, u64)> {
    let (n, ci, h, w) = x.dims4()?;
    let (wi, o, k, k2) = weight.dims4()?;
    if wi != ci || k != k2 {
        return config_err(format!(
            "conv_transpose2d weight {:?} incompatible with input {:?}",
            weight.shape(),
            x.shape()
        ));
    }
    check_bias(bias, o)?;
    let ho = conv_transpose_out_extent(h, k, stride, pad)?;
    let wo = conv_transpose_out_extent(w, k, stride, pad)?;
    // the transposed output, convolved forward with the same geometry, lands back on h × w
    if conv_out_extent(ho, k, stride, pad)? != h || conv_out_extent(wo, k, stride, pad)? != w {
        return config_err("transposed convolution geometry is not invertible for this stride/padding");
    }
    let g = Geometry { channels: o, h: ho, w: wo, k, stride, pad, ho: h, wo: w };
    let rows = o * k * k;
    let plane = h * w;
    let out_plane = ho * wo;
    let mut cols = vec![0.0f32; rows * plane];
    let mut out = vec![0.0f32; n * o * out_plane];
    for b in 0..n {
        let xb = &x.data()[b * ci * plane..(b + 1) * ci * plane];
        // cols[r, p] = W[i, r]ᵀ · x[i, p]
        gemm(rows, ci, plane, weight.data(), (1, rows as isize), xb, (plane as isize, 1), 0.0, &mut cols);
        let dst = &mut out[b * o * out_plane..(b + 1) * o * out_plane];
        col2im(&cols, g, dst);
        for (oc, chunk) in dst.chunks_mut(out_plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bias.data()[oc]);
        }
    }
    let flops = n as u64 * (2 * (rows * ci * plane) as u64 + (o * out_plane) as u64);
    Ok((Tensor::from_vec(&[n, o, ho, wo], out)?, flops))
}

/// Gradients of [`conv_transpose2d`] with respect to input, weight and bias.
pub fn conv_transpose2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, ci, h, w) = x.dims4()?;
    let (_, o, k, _) = weight.dims4()?;
    let (_, _, ho, wo) = dy.dims4()?;
    let g = Geometry { channels: o, h: ho, w: wo, k, stride, pad, ho: h, wo: w };
    let rows = o * k * k;
    let plane = h * w;
    let out_plane = ho * wo;
    let mut cols = vec![0.0f32; rows * plane];
    let mut dx = vec![0.0f32; x.numel()];
    let mut dw = vec![0.0f32; weight.numel()];
    let mut db = vec![0.0f32; o];
    for b in 0..n {
        let dyb = &dy.data()[b * o * out_plane..(b + 1) * o * out_plane];
        for (oc, chunk) in dyb.chunks(out_plane).enumerate() {
            db[oc] += chunk.iter().sum::<f32>();
        }
        im2col(dyb, g, &mut cols);
        let xb = &x.data()[b * ci * plane..(b + 1) * ci * plane];
        // dx[i, p] = W[i, r] · cols[r, p]
        gemm(ci, rows, plane, weight.data(), (rows as isize, 1), &cols, (plane as isize, 1), 0.0, &mut dx[b * ci * plane..(b + 1) * ci * plane]);
        // dW[i, r] += x[i, p] · cols[r, p]ᵀ
        gemm(ci, plane, rows, xb, (plane as isize, 1), &cols, (1, plane as isize), 1.0, &mut dw);
    }
    Ok((
        Tensor::from_vec(x.shape(), dx)?,
        Tensor::from_vec(weight.shape(), dw)?,
        Tensor::from_vec(&[o], db)?,
    ))
}

/// Statistics saved by [`group_norm`] for its backward pass.
#[derive(Clone, Debug)]
pub struct GroupNormSaved {
    pub mean: Vec<f32>,
    pub rstd: Vec<f32>,
}

fn group_layout(x: &Tensor, groups: usize) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return config_err("group_norm needs at least [N, C]");
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    if groups == 0 || c % groups != 0 {
        return config_err(format!("{c} channels are not divisible into {groups} groups"));
    }
    let spatial: usize = x.shape()[2..].iter().product();
    Ok((n, c, spatial))
}

/// Group normalization followed by a per-channel affine map.
pub fn group_norm(
    x: &Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
) -> Result<(Tensor, GroupNormSaved, u64)> {
    let (n, c, spatial) = group_layout(x, groups)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return config_err(format!("group_norm affine parameters must have shape [{c}]"));
    }
    let cg = c / groups;
    let span = cg * spatial;
    let mut out = vec![0.0f32; x.numel()];
    let mut mean = Vec::with_capacity(n * groups);
    let mut rstd = Vec::with_capacity(n * groups);
    for b in 0..n {
        for g in 0..groups {
            let start = (b * c + g * cg) * spatial;
            let xs = &x.data()[start..start + span];
            let m = xs.iter().map(|&v| v as f64).sum::<f64>() / span as f64;
            let var = xs.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / span as f64;
            let r = 1.0 / (var + eps as f64).sqrt();
            for ch in 0..cg {
                let cidx = g * cg + ch;
                let (ga, be) = (gamma.data()[cidx], beta.data()[cidx]);
                for s in 0..spatial {
                    let i = start + ch * spatial + s;
                    let xhat = ((x.data()[i] as f64 - m) * r) as f32;
                    out[i] = ga * xhat + be;
                }
            }
            mean.push(m as f32);
            rstd.push(r as f32);
        }
    }
    let flops = 8 * x.numel() as u64;
    Ok((Tensor::from_vec(x.shape(), out)?, GroupNormSaved { mean, rstd }, flops))
}

/// Gradients of [`group_norm`] with respect to input, gamma and beta.
pub fn group_norm_backward(
    x: &Tensor,
    groups: usize,
    gamma: &Tensor,
    saved: &GroupNormSaved,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, spatial) = group_layout(x, groups)?;
    let cg = c / groups;
    let span = (cg * spatial) as f64;
    let mut dx = vec![0.0f32; x.numel()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for b in 0..n {
        for g in 0..groups {
            let (m, r) = (saved.mean[b * groups + g] as f64, saved.rstd[b * groups + g] as f64);
            let start = (b * c + g * cg) * spatial;
            let mut sum_dxhat = 0.0f64;
            let mut sum_dxhat_xhat = 0.0f64;
            for ch in 0..cg {
                let cidx = g * cg + ch;
                for s in 0..spatial {
                    let i = start + ch * spatial + s;
                    let xhat = (x.data()[i] as f64 - m) * r;
                    let d = dy.data()[i] as f64;
                    dgamma[cidx] += d * xhat;
                    dbeta[cidx] += d;
                    let dxhat = d * gamma.data()[cidx] as f64;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            let (mean_dxhat, mean_dxhat_xhat) = (sum_dxhat / span, sum_dxhat_xhat / span);
            for ch in 0..cg {
                let cidx = g * cg + ch;
                for s in 0..spatial {
                    let i = start + ch * spatial + s;
                    let xhat = (x.data()[i] as f64 - m) * r;
                    let dxhat = dy.data()[i] as f64 * gamma.data()[cidx] as f64;
                    dx[i] = (r * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)) as f32;
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), dx)?,
        Tensor::from_vec(&[c], dgamma.into_iter().map(|v| v as f32).collect())?,
        Tensor::from_vec(&[c], dbeta.into_iter().map(|v| v as f32).collect())?,
    ))
}

fn attention_dims(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
    let dims = |t: &Tensor| match t.shape()[..] {
        [n, l, d] => Ok((n, l, d)),
        _ => config_err(format!("attention expects N×L×D, got {:?}", t.shape())),
    };
    let (qd, kd, vd) = (dims(q)?, dims(k)?, dims(v)?);
    if qd != kd || qd != vd {
        return config_err(format!(
            "attention operands disagree: {:?} {:?} {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    Ok(qd)
}

/// `softmax(q kᵀ / √d) v` per batch item. Returns the output and the
/// softmax probabilities (saved for backward).
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor, u64)> {
    let (n, l, d) = attention_dims(q, k, v)?;
    let scale = 1.0 / (d as f32).sqrt();
    let mut probs = vec![0.0f32; n * l * l];
    let mut out = vec![0.0f32; n * l * d];
    for b in 0..n {
        let qb = &q.data()[b * l * d..(b + 1) * l * d];
        let kb = &k.data()[b * l * d..(b + 1) * l * d];
        let vb = &v.data()[b * l * d..(b + 1) * l * d];
        let pb = &mut probs[b * l * l..(b + 1) * l * l];
        gemm(l, d, l, qb, (d as isize, 1), kb, (1, d as isize), 0.0, pb);
        for row in pb.chunks_mut(l) {
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &s| m.max(s * scale));
            let mut total = 0.0f32;
            for s in row.iter_mut() {
                *s = (*s * scale - max).exp();
                total += *s;
            }
            row.iter_mut().for_each(|s| *s /= total);
        }
        gemm(l, l, d, pb, (l as isize, 1), vb, (d as isize, 1), 0.0, &mut out[b * l * d..(b + 1) * l * d]);
    }
    let flops = n as u64 * (4 * (l * l * d) as u64 + 6 * (l * l) as u64);
    Ok((Tensor::from_vec(&[n, l, d], out)?, Tensor::from_vec(&[n, l, l], probs)?, flops))
}

/// Gradients of [`attention`] with respect to q, k and v.
pub fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, l, d) = attention_dims(q, k, v)?;
    let scale = 1.0 / (d as f32).sqrt();
    let mut dq = vec![0.0f32; q.numel()];
    let mut dk = vec![0.0f32; k.numel()];
    let mut dv = vec![0.0f32; v.numel()];
    let mut dp = vec![0.0f32; l * l];
    for b in 0..n {
        let r = b * l * d..(b + 1) * l * d;
        let pb = &probs.data()[b * l * l..(b + 1) * l * l];
        let dyb = &dy.data()[r.clone()];
        // dV = Pᵀ dO
        gemm(l, l, d, pb, (1, l as isize), dyb, (d as isize, 1), 0.0, &mut dv[r.clone()]);
        // dP = dO Vᵀ
        gemm(l, d, l, dyb, (d as isize, 1), &v.data()[r.clone()], (1, d as isize), 0.0, &mut dp);
        for (drow, prow) in dp.chunks_mut(l).zip(pb.chunks(l)) {
            let dot: f32 = drow.iter().zip(prow).map(|(a, p)| a * p).sum();
            for (ds, &p) in drow.iter_mut().zip(prow) {
                *ds = p * (*ds - dot) * scale;
            }
        }
        gemm(l, l, d, &dp, (l as isize, 1), &k.data()[r.clone()], (d as isize, 1), 0.0, &mut dq[r.clone()]);
        gemm(l, l, d, &dp, (1, l as isize), &q.data()[r.clone()], (d as isize, 1), 0.0, &mut dk[r.clone()]);
    }
    Ok((
        Tensor::from_vec(q.shape(), dq)?,
        Tensor::from_vec(k.shape(), dk)?,
        Tensor::from_vec(v.shape(), dv)?,
    ))
}

/// `x · wᵀ + b` for `x: [n, in]`, `w: [out, in]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(Tensor, u64)> {
    let (n, i, o) = linear_dims(x, w)?;
    check_bias(b, o)?;
    let mut out = Vec::with_capacity(n * o);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    gemm(n, i, o, x.data(), (i as isize, 1), w.data(), (1, i as isize), 1.0, &mut out);
    Ok((Tensor::from_vec(&[n, o], out)?, n as u64 * (2 * (i * o) as u64 + o as u64)))
}

fn linear_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize)> {
    match (x.shape(), w.shape()) {
        ([n, i], [o, wi]) if i == wi => Ok((*n, *i, *o)),
        _ => config_err(format!("linear weight {:?} incompatible with input {:?}", w.shape(), x.shape())),
    }
}

/// Gradients of [`linear`] with respect to input, weight and bias.
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, i, o) = linear_dims(x, w)?;
    let mut dx = vec![0.0f32; n * i];
    let mut dw = vec![0.0f32; o * i];
    gemm(n, o, i, dy.data(), (o as isize, 1), w.data(), (i as isize, 1), 0.0, &mut dx);
    gemm(o, n, i, dy.data(), (1, o as isize), x.data(), (i as isize, 1), 0.0, &mut dw);
    let mut db = vec![0.0f32; o];
    for row in dy.data().chunks(o) {
        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    Ok((
        Tensor::from_vec(x.shape(), dx)?,
        Tensor::from_vec(w.shape(), dw)?,
        Tensor::from_vec(&[o], db)?,
    ))
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Nearest-neighbour 2× spatial upsampling.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let mut out = vec![0.0f32; n * c * 4 * h * w];
    for (plane, src) in x.data().chunks(h * w).enumerate() {
        let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::from_vec(&[n, c, 2 * h, 2 * w], out)
}

pub fn upsample_nearest2x_backward(dy: &Tensor) -> Result<Tensor> {
    let (n, c, h2, w2) = dy.dims4()?;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = vec![0.0f32; n * c * h * w];
    for (plane, src) in dy.data().chunks(h2 * w2).enumerate() {
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], dx)
}

/// NCHW → N×(HW)×C.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let l = h * w;
    let mut out = vec![0.0f32; x.numel()];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..l {
                out[(b * l + p) * c + ch] = x.data()[(b * c + ch) * l + p];
            }
        }
    }
    Tensor::from_vec(&[n, l, c], out)
}

/// N×(HW)×C → NCHW.
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, l, c) = match x.shape()[..] {
        [n, l, c] => (n, l, c),
        _ => return config_err(format!("expected N×L×C tokens, got {:?}", x.shape())),
    };
    if l != h * w {
        return Err(Error::Config(format!("{l} tokens cannot form a {h}×{w} map")));
    }
    let mut out = vec![0.0f32; x.numel()];
    for b in 0..n {
        for p in 0..l {
            for ch in 0..c {
                out[(b * c + ch) * l + p] = x.data()[(b * l + p) * c + ch];
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], out)
}
