//! Plain (non-autodiff) numeric kernels: GEMM, convolution via im2col,
//! row-wise softmax, pooling/upsampling, and the standalone attention and
//! pseudo-3d convolution operations.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// C = A (m x k) * B (k x n).
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape("matmul expects rank-2 tensors"));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::shape(format!("matmul inner dims {k} vs {k2}")));
    }
    let mut out = Tensor::zeros(&[m, n]);
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data().as_ptr(),
            k as isize,
            1,
            b.data().as_ptr(),
            n as isize,
            1,
            T::zero(),
            out.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(out)
}

/// C = A (m x k) * B^T where B is (n x k).
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape("matmul_nt expects rank-2 tensors"));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (n, k2) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::shape(format!("matmul_nt inner dims {k} vs {k2}")));
    }
    let mut out = Tensor::zeros(&[m, n]);
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data().as_ptr(),
            k as isize,
            1,
            b.data().as_ptr(),
            1,
            k as isize,
            T::zero(),
            out.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(out)
}

/// C = A^T * B where A is (k x m), B is (k x n).
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape("matmul_tn expects rank-2 tensors"));
    }
    let (k, m) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::shape(format!("matmul_tn inner dims {k} vs {k2}")));
    }
    let mut out = Tensor::zeros(&[m, n]);
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data().as_ptr(),
            1,
            m as isize,
            b.data().as_ptr(),
            n as isize,
            1,
            T::zero(),
            out.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(out)
}

/// Batched matmul over rank-3 tensors: per batch index, `a[i] * b[i]` with
/// optional transposes of either operand.
pub fn batch_matmul<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    ta: bool,
    tb: bool,
) -> Result<Tensor<T>> {
    if a.rank() != 3 || b.rank() != 3 {
        return Err(Error::shape("batch_matmul expects rank-3 tensors"));
    }
    if a.shape()[0] != b.shape()[0] {
        return Err(Error::shape(format!(
            "batch_matmul batch mismatch {} vs {}",
            a.shape()[0],
            b.shape()[0]
        )));
    }
    let batch = a.shape()[0];
    let (m, ka) = if ta { (a.shape()[2], a.shape()[1]) } else { (a.shape()[1], a.shape()[2]) };
    let (kb, n) = if tb { (b.shape()[2], b.shape()[1]) } else { (b.shape()[1], b.shape()[2]) };
    if ka != kb {
        return Err(Error::shape(format!("batch_matmul inner dims {ka} vs {kb}")));
    }
    let (ar, ac) = (a.shape()[1], a.shape()[2]);
    let (br, bc) = (b.shape()[1], b.shape()[2]);
    let (rsa, csa) = if ta { (1isize, ac as isize) } else { (ac as isize, 1isize) };
    let (rsb, csb) = if tb { (1isize, bc as isize) } else { (bc as isize, 1isize) };
    let mut out = Tensor::<T>::zeros(&[batch, m, n]);
    for i in 0..batch {
        unsafe {
            T::gemm(
                m,
                ka,
                n,
                T::one(),
                a.data().as_ptr().add(i * ar * ac),
                rsa,
                csa,
                b.data().as_ptr().add(i * br * bc),
                rsb,
                csb,
                T::zero(),
                out.data_mut().as_mut_ptr().add(i * m * n),
                n as isize,
                1,
            );
        }
    }
    Ok(out)
}

/// Row-wise softmax with max subtraction for stability.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::shape("softmax_rows expects rank-2"));
    }
    let (rows, cols) = (x.shape()[0], x.shape()[1]);
    let mut out = x.clone();
    for r in 0..rows {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Convolution geometry for one spatial axis.
#[inline]
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// 3-d convolution parameters: stride and zero padding per (depth, height, width).
#[derive(Debug, Clone, Copy)]
pub struct Conv3dSpec {
    pub stride: (usize, usize, usize),
    pub pad: (usize, usize, usize),
}

fn conv3d_check<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Result<()> {
    if x.rank() != 5 || w.rank() != 5 {
        return Err(Error::shape("conv3d expects x rank 5 (B,C,D,H,W) and w rank 5"));
    }
    if x.shape()[1] != w.shape()[1] {
        return Err(Error::shape(format!(
            "conv3d channel mismatch: input {} vs kernel {}",
            x.shape()[1],
            w.shape()[1]
        )));
    }
    Ok(())
}

/// im2col for 3-d convolution: rows indexed by (b, od, oh, ow), columns by
/// (c, kd, kh, kw).
pub fn im2col3d<T: Real>(x: &Tensor<T>, kdims: (usize, usize, usize), spec: Conv3dSpec) -> Tensor<T> {
    let (b, c, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]);
    let (kd, kh, kw) = kdims;
    let (sd, sh, sw) = spec.stride;
    let (pd, ph, pw) = spec.pad;
    let od = conv_out_extent(d, kd, sd, pd);
    let oh = conv_out_extent(h, kh, sh, ph);
    let ow = conv_out_extent(w, kw, sw, pw);
    let cols_n = c * kd * kh * kw;
    let mut cols = Tensor::zeros(&[b * od * oh * ow, cols_n]);
    let xd = x.data();
    let out = cols.data_mut();
    let mut row = 0usize;
    for bi in 0..b {
        for odi in 0..od {
            for ohi in 0..oh {
                for owi in 0..ow {
                    let base = row * cols_n;
                    let mut col = 0usize;
                    for ci in 0..c {
                        let x_c = ((bi * c) + ci) * d;
                        for kdi in 0..kd {
                            let id = (odi * sd + kdi) as isize - pd as isize;
                            for khi in 0..kh {
                                let ih = (ohi * sh + khi) as isize - ph as isize;
                                if id < 0 || id >= d as isize || ih < 0 || ih >= h as isize {
                                    col += kw;
                                    continue;
                                }
                                let src_row = ((x_c + id as usize) * h + ih as usize) * w;
                                for kwi in 0..kw {
                                    let iw = (owi * sw + kwi) as isize - pw as isize;
                                    if iw >= 0 && iw < w as isize {
                                        out[base + col] = xd[src_row + iw as usize];
                                    }
                                    col += 1;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

/// Scatter-accumulate of im2col columns back to the input layout.
pub fn col2im3d<T: Real>(
    cols: &Tensor<T>,
    x_shape: &[usize],
    kdims: (usize, usize, usize),
    spec: Conv3dSpec,
) -> Tensor<T> {
    let (b, c, d, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3], x_shape[4]);
    let (kd, kh, kw) = kdims;
    let (sd, sh, sw) = spec.stride;
    let (pd, ph, pw) = spec.pad;
    let od = conv_out_extent(d, kd, sd, pd);
    let oh = conv_out_extent(h, kh, sh, ph);
    let ow = conv_out_extent(w, kw, sw, pw);
    let cols_n = c * kd * kh * kw;
    let mut x = Tensor::zeros(x_shape);
    let xd = x.data_mut();
    let cd = cols.data();
    let mut row = 0usize;
    for bi in 0..b {
        for odi in 0..od {
            for ohi in 0..oh {
                for owi in 0..ow {
                    let base = row * cols_n;
                    let mut col = 0usize;
                    for ci in 0..c {
                        let x_c = ((bi * c) + ci) * d;
                        for kdi in 0..kd {
                            let id = (odi * sd + kdi) as isize - pd as isize;
                            for khi in 0..kh {
                                let ih = (ohi * sh + khi) as isize - ph as isize;
                                if id < 0 || id >= d as isize || ih < 0 || ih >= h as isize {
                                    col += kw;
                                    continue;
                                }
                                let dst_row = ((x_c + id as usize) * h + ih as usize) * w;
                                for kwi in 0..kw {
                                    let iw = (owi * sw + kwi) as isize - pw as isize;
                                    if iw >= 0 && iw < w as isize {
                                        xd[dst_row + iw as usize] += cd[base + col];
                                    }
                                    col += 1;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    x
}

/// Forward 3-d convolution. x: (B,C,D,H,W), w: (OC,C,KD,KH,KW), bias: (OC).
pub fn conv3d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv3dSpec,
) -> Result<Tensor<T>> {
    conv3d_check(x, w)?;
    let (b, _c, d, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]);
    let (oc, kd, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3], w.shape()[4]);
    let od = conv_out_extent(d, kd, spec.stride.0, spec.pad.0);
    let oh = conv_out_extent(h, kh, spec.stride.1, spec.pad.1);
    let ow = conv_out_extent(wid, kw, spec.stride.2, spec.pad.2);

    let cols = im2col3d(x, (kd, kh, kw), spec);
    let w_mat = w.reshape(&[oc, w.numel() / oc])?;
    // (rows x cols_n) * (oc x cols_n)^T -> rows x oc
    let out_mat = matmul_nt(&cols, &w_mat)?;

    let mut out = Tensor::zeros(&[b, oc, od, oh, ow]);
    let spatial = od * oh * ow;
    let om = out_mat.data();
    let od_buf = out.data_mut();
    for bi in 0..b {
        for s in 0..spatial {
            let row = (bi * spatial + s) * oc;
            for o in 0..oc {
                od_buf[(bi * oc + o) * spatial + s] = om[row + o];
            }
        }
    }
    if let Some(bias) = bias {
        if bias.numel() != oc {
            return Err(Error::shape("conv3d bias length mismatch"));
        }
        let bd = bias.data().to_vec();
        let od_buf = out.data_mut();
        for bi in 0..b {
            for o in 0..oc {
                let base = (bi * oc + o) * spatial;
                let bv = bd[o];
                for s in 0..spatial {
                    od_buf[base + s] += bv;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv3d`]. Each component is computed only when requested;
/// skipping the input gradient avoids the col2im pass for convolutions whose
/// input is a constant leaf.
pub fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: Conv3dSpec,
    need: (bool, bool, bool),
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (b, _, _, _, _) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]);
    let (oc, kd, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3], w.shape()[4]);
    let (od, oh, ow) = (grad_out.shape()[2], grad_out.shape()[3], grad_out.shape()[4]);
    let spatial = od * oh * ow;

    // grad_out as (B*spatial) x OC
    let go_mat = if need.0 || need.1 {
        let mut go_mat = Tensor::zeros(&[b * spatial, oc]);
        let g = grad_out.data();
        let gm = go_mat.data_mut();
        for bi in 0..b {
            for o in 0..oc {
                for s in 0..spatial {
                    gm[(bi * spatial + s) * oc + o] = g[(bi * oc + o) * spatial + s];
                }
            }
        }
        Some(go_mat)
    } else {
        None
    };

    let dx = if need.0 {
        let w_mat = w.reshape(&[oc, w.numel() / oc])?;
        let d_cols = matmul(go_mat.as_ref().unwrap(), &w_mat)?;
        Some(col2im3d(&d_cols, x.shape(), (kd, kh, kw), spec))
    } else {
        None
    };

    let dw = if need.1 {
        let cols = im2col3d(x, (kd, kh, kw), spec);
        let dw_mat = matmul_tn(go_mat.as_ref().unwrap(), &cols)?; // oc x cols_n
        Some(dw_mat.reshape(w.shape())?)
    } else {
        None
    };

    let db = if need.2 {
        let mut db = Tensor::zeros(&[oc]);
        let g = grad_out.data();
        let dbm = db.data_mut();
        for bi in 0..b {
            for o in 0..oc {
                let base = (bi * oc + o) * spatial;
                let mut acc = T::zero();
                for s in 0..spatial {
                    acc += g[base + s];
                }
                dbm[o] += acc;
            }
        }
        Some(db)
    } else {
        None
    };
    Ok((dx, dw, db))
}

/// 2-d convolution as the depth-1 case of [`conv3d`]. x: (B,C,H,W), w: (OC,C,KH,KW).
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor<T>> {
    if x.rank() != 4 || w.rank() != 4 {
        return Err(Error::shape("conv2d expects rank-4 tensors"));
    }
    let (b, c, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oc, ic, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let x5 = x.reshape(&[b, c, 1, h, wid])?;
    let w5 = w.reshape(&[oc, ic, 1, kh, kw])?;
    let spec = Conv3dSpec { stride: (1, stride.0, stride.1), pad: (0, pad.0, pad.1) };
    let out = conv3d(&x5, &w5, bias, spec)?;
    let s = out.shape().to_vec();
    out.reshape(&[s[0], s[1], s[3], s[4]])
}

/// Nearest-neighbor 2x upsampling on (B,C,H,W).
pub fn upsample_nearest_2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::shape("upsample expects rank-4"));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Tensor::zeros(&[b, c, 2 * h, 2 * w]);
    let xd = x.data();
    let od = out.data_mut();
    for bc in 0..b * c {
        for y in 0..h {
            for xw in 0..w {
                let v = xd[(bc * h + y) * w + xw];
                let r0 = (bc * 2 * h + 2 * y) * 2 * w + 2 * xw;
                let r1 = r0 + 2 * w;
                od[r0] = v;
                od[r0 + 1] = v;
                od[r1] = v;
                od[r1 + 1] = v;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample_nearest_2x`]: sum each 2x2 block.
pub fn downsum_2x<T: Real>(g: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h2, w2) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros(&[b, c, h, w]);
    let gd = g.data();
    let od = out.data_mut();
    for bc in 0..b * c {
        for y in 0..h {
            for xw in 0..w {
                let r0 = (bc * h2 + 2 * y) * w2 + 2 * xw;
                let r1 = r0 + w2;
                od[(bc * h + y) * w + xw] = gd[r0] + gd[r0 + 1] + gd[r1] + gd[r1 + 1];
            }
        }
    }
    Ok(out)
}

/// Scaled dot-product attention: softmax(Q K^T / sqrt(d)) V.
///
/// Q: (n x d), K: (m x d), V: (m x d) -> (n x d'). V's second extent may
/// differ from d; output columns follow V.
pub fn scaled_dot_product_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(Error::shape("attention expects rank-2 Q,K,V"));
    }
    let d = q.shape()[1];
    if d == 0 || k.shape()[0] == 0 {
        return Err(Error::shape("attention requires d >= 1 and m >= 1"));
    }
    if k.shape()[1] != d {
        return Err(Error::shape(format!(
            "attention dim mismatch: Q d={} vs K d={}",
            d,
            k.shape()[1]
        )));
    }
    if v.shape()[0] != k.shape()[0] {
        return Err(Error::shape(format!(
            "attention m mismatch: K m={} vs V m={}",
            k.shape()[0],
            v.shape()[0]
        )));
    }
    for (name, t) in [("Q", q), ("K", k), ("V", v)] {
        t.assert_finite(name)?;
    }
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let scores = matmul_nt(q, k)?.scale(scale);
    let weights = softmax_rows(&scores)?;
    matmul(&weights, v)
}

/// Pseudo-3d convolution: a (C' x C x 1 x KH x KW) kernel applied frame-wise
/// to an (F x C x H x W) sequence with stride 1 and "same" padding. Frames
/// never mix because the kernel's temporal extent is 1.
pub fn conv_pseudo3d<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::shape("conv_pseudo3d expects (F,C,H,W) input"));
    }
    if kernel.rank() != 5 {
        return Err(Error::shape("conv_pseudo3d expects (C',C,1,KH,KW) kernel"));
    }
    if kernel.shape()[2] != 1 {
        return Err(Error::shape(format!(
            "conv_pseudo3d kernel temporal extent must be 1, got {}",
            kernel.shape()[2]
        )));
    }
    if kernel.shape()[1] != x.shape()[1] {
        return Err(Error::shape(format!(
            "conv_pseudo3d channel mismatch: input {} vs kernel {}",
            x.shape()[1],
            kernel.shape()[1]
        )));
    }
    let (kh, kw) = (kernel.shape()[3], kernel.shape()[4]);
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape("conv_pseudo3d requires odd kernel extents for same padding"));
    }
    let oc = kernel.shape()[0];
    let w2d = kernel.reshape(&[oc, kernel.shape()[1], kh, kw])?;
    conv2d(x, &w2d, Some(bias), (1, 1), (kh / 2, kw / 2))
}

/// Cosine similarity of two flattened non-zero vectors, in [-1, 1].
/// Accumulates in f64 regardless of storage precision.
pub fn cosine_similarity<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.numel() != b.numel() {
        return Err(Error::shape(format!(
            "cosine_similarity length mismatch: {} vs {}",
            a.numel(),
            b.numel()
        )));
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.to_f64(), y.to_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::numeric("cosine similarity undefined for zero vector"));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn naive_conv2d(
        x: &Tensor<f32>,
        w: &Tensor<f32>,
        bias: Option<&Tensor<f32>>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Tensor<f32> {
        let (b, c, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oc, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let oh = conv_out_extent(h, kh, stride.0, pad.0);
        let ow = conv_out_extent(wid, kw, stride.1, pad.1);
        let mut out = Tensor::zeros(&[b, oc, oh, ow]);
        for bi in 0..b {
            for o in 0..oc {
                for y in 0..oh {
                    for xw in 0..ow {
                        let mut acc = bias.map_or(0.0, |bt| bt.data()[o]);
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (y * stride.0 + ky) as isize - pad.0 as isize;
                                    let ix = (xw * stride.1 + kx) as isize - pad.1 as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < wid as isize {
                                        let xi = ((bi * c + ci) * h + iy as usize) * wid
                                            + ix as usize;
                                        let wi = ((o * c + ci) * kh + ky) * kw + kx;
                                        acc += x.data()[xi] * w.data()[wi];
                                    }
                                }
                            }
                        }
                        out.set4(bi, o, y, xw, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::new(&[2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(&[3, 2], vec![7.0f32, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let mut rng = RngState::new(1, 1).rng();
        let a = Tensor::<f32>::randn(&[4, 5], &mut rng);
        let b = Tensor::<f32>::randn(&[5, 3], &mut rng);
        let c = matmul(&a, &b).unwrap();
        let bt = b.permute(&[1, 0]).unwrap();
        let c_nt = matmul_nt(&a, &bt).unwrap();
        assert!(c.max_abs_diff(&c_nt) < 1e-6);
        let at = a.permute(&[1, 0]).unwrap();
        let c_tn = matmul_tn(&at, &b).unwrap();
        assert!(c.max_abs_diff(&c_tn) < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = RngState::new(2, 1).rng();
        let x = Tensor::<f32>::randn(&[5, 7], &mut rng).scale(30.0);
        let s = softmax_rows(&x).unwrap();
        for r in 0..5 {
            let sum: f32 = s.data()[r * 7..(r + 1) * 7].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn conv2d_matches_naive() {
        let mut rng = RngState::new(3, 1).rng();
        for &(stride, pad) in &[((1, 1), (1, 1)), ((2, 2), (1, 1)), ((1, 1), (0, 0))] {
            let x = Tensor::<f32>::randn(&[2, 3, 6, 5], &mut rng);
            let w = Tensor::<f32>::randn(&[4, 3, 3, 3], &mut rng);
            let b = Tensor::<f32>::randn(&[4], &mut rng);
            let got = conv2d(&x, &w, Some(&b), stride, pad).unwrap();
            let want = naive_conv2d(&x, &w, Some(&b), stride, pad);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-4, "stride {stride:?} pad {pad:?}");
        }
    }

    #[test]
    fn conv3d_depth_one_equals_conv2d() {
        let mut rng = RngState::new(4, 1).rng();
        let x = Tensor::<f32>::randn(&[2, 3, 1, 6, 6], &mut rng);
        let w = Tensor::<f32>::randn(&[4, 3, 1, 3, 3], &mut rng);
        let out3 = conv3d(&x, &w, None, Conv3dSpec { stride: (1, 1, 1), pad: (0, 1, 1) }).unwrap();
        let x4 = x.reshape(&[2, 3, 6, 6]).unwrap();
        let w4 = w.reshape(&[4, 3, 3, 3]).unwrap();
        let out2 = conv2d(&x4, &w4, None, (1, 1), (1, 1)).unwrap();
        assert!(out3.reshape(&[2, 4, 6, 6]).unwrap().max_abs_diff(&out2) < 1e-5);
    }

    #[test]
    fn attention_singleton_key_returns_v() {
        // m=1: softmax over a singleton is 1, every output row is V[0].
        let q = Tensor::new(&[3, 2], vec![0.3f32, -1.0, 2.0, 0.5, 0.0, 0.0]).unwrap();
        let k = Tensor::new(&[1, 2], vec![0.7f32, 0.2]).unwrap();
        let v = Tensor::new(&[1, 2], vec![5.0f32, -2.0]).unwrap();
        let out = scaled_dot_product_attention(&q, &k, &v).unwrap();
        for r in 0..3 {
            assert_eq!(&out.data()[r * 2..r * 2 + 2], &[5.0, -2.0]);
        }
    }

    #[test]
    fn attention_identity_weights() {
        // Q=K=V=I2, d=2: weights per row = softmax([1/sqrt(2), 0]).
        let eye = Tensor::new(&[2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
        let out = scaled_dot_product_attention(&eye, &eye, &eye).unwrap();
        let w0 = (0.5f64.sqrt()).exp() / ((0.5f64.sqrt()).exp() + 1.0);
        assert!((out.data()[0] as f64 - w0).abs() < 1e-4);
        assert!((out.data()[1] as f64 - (1.0 - w0)).abs() < 1e-4);
        assert!((out.data()[0] as f64 - 0.6698).abs() < 1e-3);
        assert!((out.data()[1] as f64 - 0.3302).abs() < 1e-3);
    }

    #[test]
    fn attention_equal_values_collapse() {
        // All V rows identical: every output row equals that common row.
        let mut rng = RngState::new(5, 1).rng();
        let q = Tensor::<f32>::randn(&[4, 2], &mut rng);
        let k = Tensor::<f32>::randn(&[3, 2], &mut rng);
        let v = Tensor::new(&[3, 2], vec![3.0f32; 6]).unwrap();
        let out = scaled_dot_product_attention(&q, &k, &v).unwrap();
        for &x in out.data() {
            assert!((x - 3.0).abs() < 1e-5);
        }
    }

    #[test]
    fn attention_shape_errors() {
        let q = Tensor::<f32>::zeros(&[2, 3]);
        let k = Tensor::<f32>::zeros(&[2, 4]);
        let v = Tensor::<f32>::zeros(&[2, 4]);
        assert!(scaled_dot_product_attention(&q, &k, &v).is_err());
        let k2 = Tensor::<f32>::zeros(&[2, 3]);
        let v2 = Tensor::<f32>::zeros(&[3, 3]);
        assert!(scaled_dot_product_attention(&q, &k2, &v2).is_err());
    }

    #[test]
    fn pseudo3d_identity_kernel() {
        let mut rng = RngState::new(6, 1).rng();
        let x = Tensor::<f32>::randn(&[2, 3, 5, 5], &mut rng);
        // Centered delta kernel per channel.
        let mut k = Tensor::<f32>::zeros(&[3, 3, 1, 3, 3]);
        for c in 0..3 {
            let idx = (((c * 3 + c) * 1) * 3 + 1) * 3 + 1;
            k.data_mut()[idx] = 1.0;
        }
        let bias = Tensor::<f32>::zeros(&[3]);
        let out = conv_pseudo3d(&x, &k, &bias).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn pseudo3d_matches_framewise_2d() {
        let mut rng = RngState::new(7, 1).rng();
        let x = Tensor::<f32>::randn(&[2, 1, 8, 8], &mut rng);
        let k = Tensor::<f32>::randn(&[2, 1, 1, 3, 3], &mut rng);
        let bias = Tensor::<f32>::randn(&[2], &mut rng);
        let got = conv_pseudo3d(&x, &k, &bias).unwrap();
        // Frame-wise 2-d convolution oracle.
        let k2 = k.reshape(&[2, 1, 3, 3]).unwrap();
        for f in 0..2 {
            let frame =
                Tensor::new(&[1, 1, 8, 8], x.data()[f * 64..(f + 1) * 64].to_vec()).unwrap();
            let want = naive_conv2d(&frame, &k2, Some(&bias), (1, 1), (1, 1));
            let got_frame =
                Tensor::new(&[1, 2, 8, 8], got.data()[f * 128..(f + 1) * 128].to_vec()).unwrap();
            assert!(got_frame.max_abs_diff(&want) < 1e-6);
        }
    }

    #[test]
    fn pseudo3d_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[2, 3, 4, 4]);
        let k = Tensor::<f32>::zeros(&[2, 2, 1, 3, 3]);
        let bias = Tensor::<f32>::zeros(&[2]);
        assert!(conv_pseudo3d(&x, &k, &bias).is_err());
    }

    #[test]
    fn cosine_basics() {
        let a = Tensor::new(&[2], vec![1.0f32, 2.0]).unwrap();
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let x = Tensor::new(&[2], vec![1.0f32, 0.0]).unwrap();
        let y = Tensor::new(&[2], vec![0.0f32, 1.0]).unwrap();
        assert_eq!(cosine_similarity(&x, &y).unwrap(), 0.0);
        let b = Tensor::new(&[2], vec![2.0f32, 4.0]).unwrap();
        assert!((cosine_similarity(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let z = Tensor::<f32>::zeros(&[2]);
        assert!(cosine_similarity(&a, &z).is_err());
    }

    #[test]
    fn upsample_downsum_adjoint() {
        let mut rng = RngState::new(8, 1).rng();
        let x = Tensor::<f32>::randn(&[1, 2, 3, 3], &mut rng);
        let up = upsample_nearest_2x(&x).unwrap();
        assert_eq!(up.shape(), &[1, 2, 6, 6]);
        // <up(x), g> == <x, downsum(g)>
        let g = Tensor::<f32>::randn(&[1, 2, 6, 6], &mut rng);
        let lhs: f32 = up.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let ds = downsum_2x(&g).unwrap();
        let rhs: f32 = x.data().iter().zip(ds.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }
}
