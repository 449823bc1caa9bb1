//! Pure array kernels shared by the tape's forward and backward passes.
//! All layouts are row-major; convolution uses the cross-correlation
//! convention (no kernel flip) with zero padding.
//!
//! Inner loops run over contiguous row slices so they autovectorize.

use super::Scalar;

pub fn conv_out_dim(input: usize, pad: usize, kernel: usize, stride: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Half-open output range along one axis for which the kernel tap `k` reads
/// inside the input: `lo..hi` such that `0 <= o*stride + k - pad < extent`.
#[inline]
fn tap_range(extent: usize, pad: usize, k: usize, stride: usize, out_extent: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let last_in = extent + pad - 1; // largest o*stride + k allowed
    if k > last_in {
        return (0, 0);
    }
    let hi = ((last_in - k) / stride + 1).min(out_extent);
    (lo, hi.max(lo))
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn axpy<T: Scalar>(alpha: T, x: &[T], out: &mut [T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

// ---------------------------------------------------------------- matmul

/// out[m,n] += a[m,k] @ b[k,n]
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], orow);
        }
    }
}

/// out[m,n] += a[m,k] @ b[n,k]^T  (rows of `b` are dotted against rows of `a`)
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out[k,n] += a[m,k]^T @ b[m,n]
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], brow, &mut out[p * n..(p + 1) * n]);
        }
    }
}

// ---------------------------------------------------------------- linear

/// out[b,o] = x[b,i] @ w[o,i]^T + bias[o]
pub fn linear_fwd<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    batch: usize,
    d_in: usize,
    d_out: usize,
    out: &mut [T],
) {
    if let Some(b) = bias {
        for row in 0..batch {
            out[row * d_out..(row + 1) * d_out].copy_from_slice(b);
        }
    } else {
        out.fill(T::zero());
    }
    matmul_nt_acc(x, w, batch, d_in, d_out, out);
}

// ---------------------------------------------------------------- conv2d

/// Accumulate one shifted, weighted input row window into the output plane.
#[inline]
#[allow(clippy::too_many_arguments)]
fn conv_accumulate_plane<T: Scalar>(
    x_plane: &[T], // h*w
    h: usize,
    w: usize,
    wgt: T,
    ky: usize,
    kx: usize,
    stride: usize,
    pad: usize,
    out_plane: &mut [T], // ho*wo
    ho: usize,
    wo: usize,
) {
    let (oy_lo, oy_hi) = tap_range(h, pad, ky, stride, ho);
    let (ox_lo, ox_hi) = tap_range(w, pad, kx, stride, wo);
    if ox_lo >= ox_hi {
        return;
    }
    for oy in oy_lo..oy_hi {
        let iy = oy * stride + ky - pad;
        let irow = &x_plane[iy * w..(iy + 1) * w];
        let orow = &mut out_plane[oy * wo..(oy + 1) * wo];
        if stride == 1 {
            let shift = ox_lo + kx - pad;
            for (o, &iv) in orow[ox_lo..ox_hi].iter_mut().zip(&irow[shift..shift + (ox_hi - ox_lo)]) {
                *o += wgt * iv;
            }
        } else {
            for ox in ox_lo..ox_hi {
                orow[ox] += wgt * irow[ox * stride + kx - pad];
            }
        }
    }
}

/// Scatter a weighted output plane back into the input-gradient plane.
#[inline]
#[allow(clippy::too_many_arguments)]
fn conv_scatter_plane<T: Scalar>(
    d_out_plane: &[T],
    ho: usize,
    wo: usize,
    wgt: T,
    ky: usize,
    kx: usize,
    stride: usize,
    pad: usize,
    d_x_plane: &mut [T],
    h: usize,
    w: usize,
) {
    let (oy_lo, oy_hi) = tap_range(h, pad, ky, stride, ho);
    let (ox_lo, ox_hi) = tap_range(w, pad, kx, stride, wo);
    if ox_lo >= ox_hi {
        return;
    }
    for oy in oy_lo..oy_hi {
        let iy = oy * stride + ky - pad;
        let drow = &d_out_plane[oy * wo..(oy + 1) * wo];
        let xrow = &mut d_x_plane[iy * w..(iy + 1) * w];
        if stride == 1 {
            let shift = ox_lo + kx - pad;
            for (x, &dv) in xrow[shift..shift + (ox_hi - ox_lo)].iter_mut().zip(&drow[ox_lo..ox_hi]) {
                *x += wgt * dv;
            }
        } else {
            for ox in ox_lo..ox_hi {
                xrow[ox * stride + kx - pad] += wgt * drow[ox];
            }
        }
    }
}

/// Dot an input plane window against an output plane (kernel-gradient term).
#[inline]
#[allow(clippy::too_many_arguments)]
fn conv_plane_correlation<T: Scalar>(
    x_plane: &[T],
    h: usize,
    w: usize,
    d_out_plane: &[T],
    ho: usize,
    wo: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    pad: usize,
) -> T {
    let mut acc = T::zero();
    let (oy_lo, oy_hi) = tap_range(h, pad, ky, stride, ho);
    let (ox_lo, ox_hi) = tap_range(w, pad, kx, stride, wo);
    if ox_lo >= ox_hi {
        return acc;
    }
    for oy in oy_lo..oy_hi {
        let iy = oy * stride + ky - pad;
        let irow = &x_plane[iy * w..(iy + 1) * w];
        let drow = &d_out_plane[oy * wo..(oy + 1) * wo];
        if stride == 1 {
            let shift = ox_lo + kx - pad;
            acc += dot(&drow[ox_lo..ox_hi], &irow[shift..shift + (ox_hi - ox_lo)]);
        } else {
            for ox in ox_lo..ox_hi {
                acc += drow[ox] * irow[ox * stride + kx - pad];
            }
        }
    }
    acc
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd<T: Scalar>(
    x: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    ker: &[T],
    c_out: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
    out: &mut [T],
    ho: usize,
    wo: usize,
) {
    for oc in 0..c_out {
        let init = bias.map_or(T::zero(), |b| b[oc]);
        out[oc * ho * wo..(oc + 1) * ho * wo].fill(init);
    }
    // A 1x1 stride-1 convolution is a [c_out, c_in] x [c_in, plane] matmul.
    if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        matmul_acc(ker, x, c_out, c_in, h * w, out);
        return;
    }
    for oc in 0..c_out {
        let (head, out_plane) = out.split_at_mut(oc * ho * wo);
        let _ = head;
        let out_plane = &mut out_plane[..ho * wo];
        for ic in 0..c_in {
            let x_plane = &x[ic * h * w..(ic + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wgt = ker[((oc * c_in + ic) * kh + ky) * kw + kx];
                    conv_accumulate_plane(x_plane, h, w, wgt, ky, kx, stride, pad, out_plane, ho, wo);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_input<T: Scalar>(
    d_out: &[T],
    ker: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    d_x: &mut [T],
) {
    // 1x1 stride-1: d_x = ker^T @ d_out over the plane.
    if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        matmul_tn_acc(ker, d_out, c_out, c_in, h * w, d_x);
        return;
    }
    for ic in 0..c_in {
        let d_x_plane = &mut d_x[ic * h * w..(ic + 1) * h * w];
        for oc in 0..c_out {
            let d_out_plane = &d_out[oc * ho * wo..(oc + 1) * ho * wo];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wgt = ker[((oc * c_in + ic) * kh + ky) * kw + kx];
                    conv_scatter_plane(d_out_plane, ho, wo, wgt, ky, kx, stride, pad, d_x_plane, h, w);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_kernel<T: Scalar>(
    x: &[T],
    d_out: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    d_ker: &mut [T],
) {
    // 1x1 stride-1: d_ker = d_out @ x^T over the plane.
    if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        matmul_nt_acc(d_out, x, c_out, h * w, c_in, d_ker);
        return;
    }
    for oc in 0..c_out {
        let d_out_plane = &d_out[oc * ho * wo..(oc + 1) * ho * wo];
        for ic in 0..c_in {
            let x_plane = &x[ic * h * w..(ic + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    d_ker[((oc * c_in + ic) * kh + ky) * kw + kx] +=
                        conv_plane_correlation(x_plane, h, w, d_out_plane, ho, wo, ky, kx, stride, pad);
                }
            }
        }
    }
}

pub fn conv2d_bwd_bias<T: Scalar>(d_out: &[T], c_out: usize, plane: usize, d_bias: &mut [T]) {
    for oc in 0..c_out {
        let mut acc = T::zero();
        for &v in &d_out[oc * plane..(oc + 1) * plane] {
            acc += v;
        }
        d_bias[oc] += acc;
    }
}

// -------------------------------------------------------- depthwise conv

#[allow(clippy::too_many_arguments)]
pub fn depthwise_fwd<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    ker: &[T], // [c, kh, kw]
    kh: usize,
    kw: usize,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
    out: &mut [T],
    ho: usize,
    wo: usize,
) {
    for ch in 0..c {
        let init = bias.map_or(T::zero(), |b| b[ch]);
        let out_plane = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        out_plane.fill(init);
        let x_plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let wgt = ker[(ch * kh + ky) * kw + kx];
                conv_accumulate_plane(x_plane, h, w, wgt, ky, kx, stride, pad, out_plane, ho, wo);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_bwd<T: Scalar>(
    x: &[T],
    d_out: &[T],
    ker: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    d_x: Option<&mut [T]>,
    d_ker: Option<&mut [T]>,
) {
    if let Some(d_x) = d_x {
        for ch in 0..c {
            let d_out_plane = &d_out[ch * ho * wo..(ch + 1) * ho * wo];
            let d_x_plane = &mut d_x[ch * h * w..(ch + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wgt = ker[(ch * kh + ky) * kw + kx];
                    conv_scatter_plane(d_out_plane, ho, wo, wgt, ky, kx, stride, pad, d_x_plane, h, w);
                }
            }
        }
    }
    if let Some(d_ker) = d_ker {
        for ch in 0..c {
            let d_out_plane = &d_out[ch * ho * wo..(ch + 1) * ho * wo];
            let x_plane = &x[ch * h * w..(ch + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    d_ker[(ch * kh + ky) * kw + kx] +=
                        conv_plane_correlation(x_plane, h, w, d_out_plane, ho, wo, ky, kx, stride, pad);
                }
            }
        }
    }
}

// ---------------------------------------------------------------- softmax

/// Max-subtracted softmax over rows of length `cols`.
pub fn softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize, out: &mut [T]) {
    for r in 0..rows {
        let xin = &x[r * cols..(r + 1) * cols];
        let xout = &mut out[r * cols..(r + 1) * cols];
        let mut maxv = xin[0];
        for &v in &xin[1..] {
            if v > maxv {
                maxv = v;
            }
        }
        let mut sum = T::zero();
        for (o, &v) in xout.iter_mut().zip(xin) {
            let e = (v - maxv).exp();
            *o = e;
            sum += e;
        }
        let inv = T::one() / sum;
        for o in xout.iter_mut() {
            *o *= inv;
        }
    }
}

// --------------------------------------------------------- crop / concat

/// Copy the rectangular region described by (offsets, sizes) out of `x`.
pub fn crop_copy<T: Scalar>(
    x: &[T],
    shape: &[usize],
    offsets: &[usize],
    sizes: &[usize],
    out: &mut [T],
) {
    for_each_crop_row(shape, offsets, sizes, |src, dst, len| {
        out[dst..dst + len].copy_from_slice(&x[src..src + len]);
    });
}

/// Scatter-add the cropped gradient back into the source layout.
pub fn crop_scatter_add<T: Scalar>(
    d_out: &[T],
    shape: &[usize],
    offsets: &[usize],
    sizes: &[usize],
    d_x: &mut [T],
) {
    for_each_crop_row(shape, offsets, sizes, |src, dst, len| {
        for (x, &d) in d_x[src..src + len].iter_mut().zip(&d_out[dst..dst + len]) {
            *x += d;
        }
    });
}

/// Enumerate contiguous last-axis runs of a crop: (source offset, dest offset, len).
fn for_each_crop_row(
    shape: &[usize],
    offsets: &[usize],
    sizes: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 1);
        return;
    }
    let row_len = sizes[rank - 1];
    let rows: usize = sizes[..rank - 1].iter().product();
    let mut strides = vec![1usize; rank];
    for ax in (0..rank - 1).rev() {
        strides[ax] = strides[ax + 1] * shape[ax + 1];
    }
    let mut coords = vec![0usize; rank.saturating_sub(1)];
    for row in 0..rows {
        let mut src = offsets[rank - 1];
        for ax in 0..rank - 1 {
            src += (offsets[ax] + coords[ax]) * strides[ax];
        }
        f(src, row * row_len, row_len);
        // odometer increment over sizes[..rank-1]
        for ax in (0..rank - 1).rev() {
            coords[ax] += 1;
            if coords[ax] < sizes[ax] {
                break;
            }
            coords[ax] = 0;
        }
    }
}

/// Concatenate `parts` (extents `spans` along `axis`) into `out` of shape `shape`.
pub fn concat_copy<T: Scalar>(
    parts: &[&[T]],
    spans: &[usize],
    axis: usize,
    shape: &[usize],
    out: &mut [T],
) {
    for_each_concat_block(spans, axis, shape, |part, src, dst, len| {
        out[dst..dst + len].copy_from_slice(&parts[part][src..src + len]);
    });
}

/// Slice the upstream gradient of a concat back out to each part.
pub fn concat_split<T: Scalar>(
    d_out: &[T],
    spans: &[usize],
    axis: usize,
    shape: &[usize],
    d_parts: &mut [Vec<T>],
) {
    for_each_concat_block(spans, axis, shape, |part, src, dst, len| {
        for (g, &d) in d_parts[part][src..src + len].iter_mut().zip(&d_out[dst..dst + len]) {
            *g += d;
        }
    });
}

/// Enumerate contiguous blocks of a concat: (part, part offset, out offset, len).
fn for_each_concat_block(
    spans: &[usize],
    axis: usize,
    shape: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let total_block: usize = shape[axis] * inner;
    let mut part_pos = vec![0usize; spans.len()];
    for o in 0..outer {
        let mut dst = o * total_block;
        for (part, &span) in spans.iter().enumerate() {
            let len = span * inner;
            f(part, part_pos[part], dst, len);
            part_pos[part] += len;
            dst += len;
        }
    }
}
