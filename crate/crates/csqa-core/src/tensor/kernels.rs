//! Flat-slice numeric kernels behind the graph ops.
//!
//! Everything is f64, row-major, single-threaded, and deterministic: loops
//! iterate in a fixed order so repeated runs are bitwise identical.

use crate::error::{CsqaError, Result};

// ── matmul ────────────────────────────────────────────────────────────

/// out += a[m,k] @ b[k,n], ikj order for cache-friendly inner loops.
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let a_ik = a[i * k + kk];
            if a_ik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_ik * bv;
            }
        }
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// out += a^T[m,k] (a stored [k,m]) @ b[k,n]
pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let a_ik = a_row[i];
            if a_ik == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_ik * bv;
            }
        }
    }
}

/// out += a[m,k] @ b^T[k,n] (b stored [n,k])
pub fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in a_row.iter().zip(b_row.iter()) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

// ── broadcasting ──────────────────────────────────────────────────────

/// NumPy-style broadcast of two shapes (right-aligned; 1 stretches).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let ad = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let bd = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if ad == bd || ad == 1 || bd == 1 {
            out[i] = ad.max(bd);
        } else {
            return Err(CsqaError::dim(
                i,
                format!("cannot broadcast {:?} with {:?}", a, b),
            ));
        }
    }
    Ok(out)
}

/// Row-major strides for `shape`, with stride 0 on axes broadcast up to
/// `out_shape` (right-aligned).
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Apply `f` elementwise over the broadcast of `a` and `b`.
pub fn broadcast_binary(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Result<(Vec<f64>, Vec<usize>)> {
    if a_shape == b_shape {
        // fast path
        let out: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| f(*x, *y)).collect();
        return Ok((out, a_shape.to_vec()));
    }
    let out_shape = broadcast_shape(a_shape, b_shape)?;
    let numel: usize = out_shape.iter().product();
    let sa = broadcast_strides(a_shape, &out_shape);
    let sb = broadcast_strides(b_shape, &out_shape);
    let mut out = vec![0.0; numel];
    let mut idx = vec![0usize; out_shape.len()];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for o in out.iter_mut() {
        *o = f(a[ia], b[ib]);
        // advance multi-index
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            ia -= sa[ax] * out_shape[ax];
            ib -= sb[ax] * out_shape[ax];
        }
    }
    Ok((out, out_shape))
}

/// Sum `grad` (shaped `grad_shape`) down to `target_shape` by reducing the
/// axes that were broadcast. Inverse of the stretch in `broadcast_binary`.
pub fn reduce_to_shape(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let numel: usize = target_shape.iter().product();
    let st = broadcast_strides(target_shape, grad_shape);
    let mut out = vec![0.0; numel];
    let mut idx = vec![0usize; grad_shape.len()];
    let mut it = 0usize;
    for g in grad.iter() {
        out[it] += g;
        for ax in (0..grad_shape.len()).rev() {
            idx[ax] += 1;
            it += st[ax];
            if idx[ax] < grad_shape[ax] {
                break;
            }
            idx[ax] = 0;
            it -= st[ax] * grad_shape[ax];
        }
    }
    out
}

// ── conv2d via im2col ─────────────────────────────────────────────────

pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

pub fn conv2d_dims(
    in_shape: &[usize],
    k_shape: &[usize],
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<ConvDims> {
    if in_shape.len() != 4 {
        return Err(CsqaError::dim(0, format!("conv2d input must be 4-d, got {:?}", in_shape)));
    }
    if k_shape.len() != 4 {
        return Err(CsqaError::dim(0, format!("conv2d kernel must be 4-d, got {:?}", k_shape)));
    }
    let (batch, c_in, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (c_out, kc, kh, kw) = (k_shape[0], k_shape[1], k_shape[2], k_shape[3]);
    if kh != kw {
        return Err(CsqaError::dim(3, format!("conv2d kernel must be square, got {}x{}", kh, kw)));
    }
    let k = kh;
    if groups == 0 || c_in % groups != 0 {
        return Err(CsqaError::dim(
            1,
            format!("input channels {} not divisible by groups {}", c_in, groups),
        ));
    }
    if c_out % groups != 0 {
        return Err(CsqaError::dim(
            0,
            format!("output channels {} not divisible by groups {}", c_out, groups),
        ));
    }
    if kc != c_in / groups {
        return Err(CsqaError::dim(
            1,
            format!(
                "kernel expects {} input channels per group, input has {} ({} groups)",
                kc,
                c_in / groups,
                groups
            ),
        ));
    }
    if stride == 0 {
        return Err(CsqaError::Config("conv2d stride must be >= 1".into()));
    }
    if k > h + 2 * padding {
        return Err(CsqaError::dim(
            2,
            format!("kernel {} exceeds padded input height {}", k, h + 2 * padding),
        ));
    }
    if k > w + 2 * padding {
        return Err(CsqaError::dim(
            3,
            format!("kernel {} exceeds padded input width {}", k, w + 2 * padding),
        ));
    }
    let h_out = (h + 2 * padding - k) / stride + 1;
    let w_out = (w + 2 * padding - k) / stride + 1;
    Ok(ConvDims {
        batch,
        c_in,
        h,
        w,
        c_out,
        k,
        h_out,
        w_out,
        stride,
        padding,
        groups,
    })
}

/// im2col for one (batch, group) slab: rows = c_pg*k*k, cols = h_out*w_out.
fn im2col(input: &[f64], d: &ConvDims, b: usize, g: usize, col: &mut [f64]) {
    let c_pg = d.c_in / d.groups;
    let cols = d.h_out * d.w_out;
    let plane = d.h * d.w;
    for c in 0..c_pg {
        let src = &input[(b * d.c_in + g * c_pg + c) * plane..][..plane];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = ((c * d.k + ky) * d.k + kx) * cols;
                for oy in 0..d.h_out {
                    let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                    let dst = &mut col[row + oy * d.w_out..row + (oy + 1) * d.w_out];
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.w_out {
                        let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                        dst[ox] = if ix < 0 || ix >= d.w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter a column gradient back into the input gradient (inverse of im2col).
fn col2im_acc(col: &[f64], d: &ConvDims, b: usize, g: usize, d_input: &mut [f64]) {
    let c_pg = d.c_in / d.groups;
    let cols = d.h_out * d.w_out;
    let plane = d.h * d.w;
    for c in 0..c_pg {
        let dst = &mut d_input[(b * d.c_in + g * c_pg + c) * plane..][..plane];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = ((c * d.k + ky) * d.k + kx) * cols;
                for oy in 0..d.h_out {
                    let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for ox in 0..d.w_out {
                        let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        dst[iy as usize * d.w + ix as usize] += col[row + oy * d.w_out + ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    d: &ConvDims,
) -> Vec<f64> {
    let c_pg = d.c_in / d.groups;
    let o_pg = d.c_out / d.groups;
    let cols = d.h_out * d.w_out;
    let krows = c_pg * d.k * d.k;
    let mut out = vec![0.0; d.batch * d.c_out * cols];
    let mut col = vec![0.0; krows * cols];
    for b in 0..d.batch {
        for g in 0..d.groups {
            im2col(input, d, b, g, &mut col);
            let kmat = &kernel[g * o_pg * krows..(g + 1) * o_pg * krows];
            let dst = &mut out[(b * d.c_out + g * o_pg) * cols..][..o_pg * cols];
            matmul_acc(kmat, &col, dst, o_pg, krows, cols);
        }
    }
    if let Some(bias) = bias {
        for b in 0..d.batch {
            for oc in 0..d.c_out {
                let v = bias[oc];
                for o in out[(b * d.c_out + oc) * cols..][..cols].iter_mut() {
                    *o += v;
                }
            }
        }
    }
    out
}

pub struct ConvGrads {
    pub d_input: Vec<f64>,
    pub d_kernel: Vec<f64>,
    pub d_bias: Option<Vec<f64>>,
}

pub fn conv2d_backward(
    d_out: &[f64],
    input: &[f64],
    kernel: &[f64],
    has_bias: bool,
    d: &ConvDims,
) -> ConvGrads {
    let c_pg = d.c_in / d.groups;
    let o_pg = d.c_out / d.groups;
    let cols = d.h_out * d.w_out;
    let krows = c_pg * d.k * d.k;
    let mut d_input = vec![0.0; d.batch * d.c_in * d.h * d.w];
    let mut d_kernel = vec![0.0; d.c_out * krows];
    let mut col = vec![0.0; krows * cols];
    let mut d_col = vec![0.0; krows * cols];
    for b in 0..d.batch {
        for g in 0..d.groups {
            im2col(input, d, b, g, &mut col);
            let go = &d_out[(b * d.c_out + g * o_pg) * cols..][..o_pg * cols];
            // d_kernel[g] += go @ col^T
            matmul_nt_acc(
                go,
                &col,
                &mut d_kernel[g * o_pg * krows..(g + 1) * o_pg * krows],
                o_pg,
                cols,
                krows,
            );
            // d_col = kmat^T @ go
            d_col.fill(0.0);
            matmul_tn_acc(
                &kernel[g * o_pg * krows..(g + 1) * o_pg * krows],
                go,
                &mut d_col,
                krows,
                o_pg,
                cols,
            );
            col2im_acc(&d_col, d, b, g, &mut d_input);
        }
    }
    let d_bias = if has_bias {
        let mut db = vec![0.0; d.c_out];
        for b in 0..d.batch {
            for oc in 0..d.c_out {
                let mut acc = 0.0;
                for v in d_out[(b * d.c_out + oc) * cols..][..cols].iter() {
                    acc += v;
                }
                db[oc] += acc;
            }
        }
        Some(db)
    } else {
        None
    };
    ConvGrads {
        d_input,
        d_kernel,
        d_bias,
    }
}

// ── bilinear crop/resize ──────────────────────────────────────────────

/// One crop request: source image index within the batch plus a pixel-space
/// box (x0, y0, x1, y1) on that image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropSpec {
    pub image: usize,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Bilinear sample positions with half-pixel centers; neighbors clamped to
/// the image border. Called per output pixel by forward and backward.
#[inline]
fn bilinear_taps(src_extent: usize, lo: f64, hi: f64, out_extent: usize, o: usize) -> (usize, usize, f64) {
    let scale = (hi - lo) / out_extent as f64;
    let pos = lo + (o as f64 + 0.5) * scale - 0.5;
    let floor = pos.floor();
    let frac = pos - floor;
    let i0 = (floor as isize).clamp(0, src_extent as isize - 1) as usize;
    let i1 = ((floor as isize) + 1).clamp(0, src_extent as isize - 1) as usize;
    (i0, i1, frac)
}

pub fn crop_resize_forward(
    images: &[f64],
    shape: &[usize],
    crops: &[CropSpec],
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let (_b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = vec![0.0; crops.len() * c * out_h * out_w];
    for (ci, crop) in crops.iter().enumerate() {
        for ch in 0..c {
            let src = &images[(crop.image * c + ch) * h * w..][..h * w];
            let dst = &mut out[(ci * c + ch) * out_h * out_w..][..out_h * out_w];
            for oy in 0..out_h {
                let (y0, y1, fy) = bilinear_taps(h, crop.y0, crop.y1, out_h, oy);
                for ox in 0..out_w {
                    let (x0, x1, fx) = bilinear_taps(w, crop.x0, crop.x1, out_w, ox);
                    let v00 = src[y0 * w + x0];
                    let v01 = src[y0 * w + x1];
                    let v10 = src[y1 * w + x0];
                    let v11 = src[y1 * w + x1];
                    dst[oy * out_w + ox] = v00 * (1.0 - fy) * (1.0 - fx)
                        + v01 * (1.0 - fy) * fx
                        + v10 * fy * (1.0 - fx)
                        + v11 * fy * fx;
                }
            }
        }
    }
    out
}

pub fn crop_resize_backward(
    d_out: &[f64],
    shape: &[usize],
    crops: &[CropSpec],
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut d_images = vec![0.0; b * c * h * w];
    for (ci, crop) in crops.iter().enumerate() {
        for ch in 0..c {
            let dst = &mut d_images[(crop.image * c + ch) * h * w..][..h * w];
            let src = &d_out[(ci * c + ch) * out_h * out_w..][..out_h * out_w];
            for oy in 0..out_h {
                let (y0, y1, fy) = bilinear_taps(h, crop.y0, crop.y1, out_h, oy);
                for ox in 0..out_w {
                    let (x0, x1, fx) = bilinear_taps(w, crop.x0, crop.x1, out_w, ox);
                    let g = src[oy * out_w + ox];
                    dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                    dst[y0 * w + x1] += g * (1.0 - fy) * fx;
                    dst[y1 * w + x0] += g * fy * (1.0 - fx);
                    dst[y1 * w + x1] += g * fy * fx;
                }
            }
        }
    }
    d_images
}

// ── axis helpers ──────────────────────────────────────────────────────

/// Decompose `shape` around `axis` into (outer, len, inner) so that element
/// (o, a, i) lives at (o*len + a)*inner + i.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}
