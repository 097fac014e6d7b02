//! Raw NCHW kernels behind the graph ops. Convolutions lower to
//! im2col + GEMM, one batch item at a time.

use crate::tensor::Element;

/// Spatial geometry of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry of a forward convolution over a `channels × height × width` image.
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let span_h = (height + 2 * pad).checked_sub(kernel)?;
        let span_w = (width + 2 * pad).checked_sub(kernel)?;
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: span_h / stride + 1,
            out_w: span_w / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output positions `[lo, hi)` whose tap `kj` lands inside `[0, in_len)`.
    fn valid_out_range(&self, kj: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let lo = if self.pad > kj { (self.pad - kj).div_ceil(self.stride) } else { 0 };
        if in_len + self.pad <= kj {
            return (0, 0);
        }
        let hi = ((in_len - 1 + self.pad - kj) / self.stride + 1).min(out_len);
        (lo.min(hi), hi)
    }
}

pub fn im2col<T: Element>(img: &[T], g: &ConvGeom, col: &mut [T]) {
    let n = g.col_cols();
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * n..(row + 1) * n];
                let (ox0, ox1) = g.valid_out_range(kj, g.width, g.out_w);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let seg = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize || ox0 >= ox1 {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    seg[..ox0].fill(T::zero());
                    seg[ox1..].fill(T::zero());
                    let ix0 = ox0 * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        seg[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for (out, &v) in seg[ox0..ox1].iter_mut().zip(src[ix0..].iter().step_by(g.stride)) {
                            *out = v;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `col` back into `img` (adjoint of [`im2col`]).
pub fn col2im<T: Element>(col: &[T], g: &ConvGeom, img: &mut [T]) {
    let n = g.col_cols();
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * n..(row + 1) * n];
                let (ox0, ox1) = g.valid_out_range(kj, g.width, g.out_w);
                if ox0 >= ox1 {
                    continue;
                }
                let ix0 = ox0 * g.stride + kj - g.pad;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let seg = &src[oy * g.out_w + ox0..oy * g.out_w + ox1];
                    if g.stride == 1 {
                        for (d, &v) in dst[ix0..ix0 + seg.len()].iter_mut().zip(seg) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[ix0..].iter_mut().step_by(g.stride).zip(seg) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `weight` is `[out_c, in_c, k, k]`.
pub fn conv2d_forward<T: Element>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    bias: Option<&[T]>,
    out_c: usize,
) -> Vec<T> {
    let kdim = g.col_rows();
    let n = g.col_cols();
    let in_stride = g.channels * g.height * g.width;
    let mut out = vec![T::zero(); batch * out_c * n];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kdim * n] };
    for b in 0..batch {
        let xb = &x[b * in_stride..(b + 1) * in_stride];
        let rhs: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut col);
            &col
        };
        let ob = &mut out[b * out_c * n..(b + 1) * out_c * n];
        if out_c <= NARROW_CHANNELS {
            rows_nn(out_c, kdim, n, weight, rhs, ob, false);
        } else {
            T::gemm(out_c, kdim, n, T::one(), weight, (kdim, 1), rhs, (n, 1), T::zero(), ob, (n, 1));
        }
        if let Some(bias) = bias {
            for (oc, &bv) in bias.iter().enumerate() {
                ob[oc * n..(oc + 1) * n].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]. Any output slot left `None` is skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Element>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    out_c: usize,
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let kdim = g.col_rows();
    let n = g.col_cols();
    let in_stride = g.channels * g.height * g.width;
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { kdim * n }];
    let mut dcol = vec![T::zero(); if g.is_pointwise() || dx.is_none() { 0 } else { kdim * n }];
    let narrow = out_c <= NARROW_CHANNELS;
    let wt = if narrow && dx.is_some() { transpose(out_c, kdim, weight) } else { Vec::new() };
    for b in 0..batch {
        let dyb = &dy[b * out_c * n..(b + 1) * out_c * n];
        if let Some(dw) = dw.as_deref_mut() {
            let xb = &x[b * in_stride..(b + 1) * in_stride];
            let rhs: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, &mut col);
                &col
            };
            // dW[M×K] += dY[M×N] · colᵀ[N×K]
            if narrow {
                rows_nt(out_c, kdim, n, dyb, rhs, dw);
            } else {
                T::gemm(out_c, n, kdim, T::one(), dyb, (n, 1), rhs, (1, n), T::one(), dw, (kdim, 1));
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_stride..(b + 1) * in_stride];
            if narrow {
                if g.is_pointwise() {
                    rows_nn(kdim, out_c, n, &wt, dyb, dxb, true);
                } else {
                    rows_nn(kdim, out_c, n, &wt, dyb, &mut dcol, false);
                    col2im(&dcol, g, dxb);
                }
            } else if g.is_pointwise() {
                // dX[K×N] += Wᵀ[K×M] · dY[M×N]
                T::gemm(kdim, out_c, n, T::one(), weight, (1, kdim), dyb, (n, 1), T::one(), dxb, (n, 1));
            } else {
                T::gemm(kdim, out_c, n, T::one(), weight, (1, kdim), dyb, (n, 1), T::zero(), &mut dcol, (n, 1));
                col2im(&dcol, g, dxb);
            }
        }
    }
    if let Some(db) = db {
        for b in 0..batch {
            for oc in 0..out_c {
                let s: T = dy[(b * out_c + oc) * n..(b * out_c + oc + 1) * n].iter().copied().sum();
                db[oc] += s;
            }
        }
    }
}

/// Transposed convolution. `weight` is `[in_c, out_c, k, k]`; `g` describes
/// the *adjoint* forward convolution, i.e. `g.channels = out_c`,
/// `g.height × g.width` is the output image and `g.out_h × g.out_w` the input grid.
pub fn conv_transpose2d_forward<T: Element>(
    x: &[T],
    batch: usize,
    in_c: usize,
    g: &ConvGeom,
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let kdim = g.col_rows();
    let n = g.col_cols();
    let out_stride = g.channels * g.height * g.width;
    let mut out = vec![T::zero(); batch * out_stride];
    let mut col = vec![T::zero(); kdim * n];
    for b in 0..batch {
        let xb = &x[b * in_c * n..(b + 1) * in_c * n];
        // col[K'×N] = Wᵀ[K'×Cin] · x[Cin×N]
        T::gemm(kdim, in_c, n, T::one(), weight, (1, kdim), xb, (n, 1), T::zero(), &mut col, (n, 1));
        let ob = &mut out[b * out_stride..(b + 1) * out_stride];
        col2im(&col, g, ob);
        if let Some(bias) = bias {
            let plane = g.height * g.width;
            for (oc, &bv) in bias.iter().enumerate() {
                ob[oc * plane..(oc + 1) * plane].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Element>(
    x: &[T],
    batch: usize,
    in_c: usize,
    g: &ConvGeom,
    weight: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let kdim = g.col_rows();
    let n = g.col_cols();
    let out_stride = g.channels * g.height * g.width;
    let mut col = vec![T::zero(); kdim * n];
    for b in 0..batch {
        let dyb = &dy[b * out_stride..(b + 1) * out_stride];
        im2col(dyb, g, &mut col);
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_c * n..(b + 1) * in_c * n];
            T::gemm(in_c, kdim, n, T::one(), weight, (kdim, 1), &col, (n, 1), T::one(), dxb, (n, 1));
        }
        if let Some(dw) = dw.as_deref_mut() {
            let xb = &x[b * in_c * n..(b + 1) * in_c * n];
            T::gemm(in_c, n, kdim, T::one(), xb, (n, 1), &col, (1, n), T::one(), dw, (kdim, 1));
        }
    }
    if let Some(db) = db {
        let plane = g.height * g.width;
        for b in 0..batch {
            for oc in 0..g.channels {
                let s: T = dy[b * out_stride + oc * plane..b * out_stride + (oc + 1) * plane]
                    .iter()
                    .copied()
                    .sum();
                db[oc] += s;
            }
        }
    }
}

/// Per-group mean and biased variance. A group is one channel across the
/// whole batch (`per_sample = false`) or one `(sample, channel)` plane.
pub fn group_stats<T: Element>(
    x: &[T],
    dims: (usize, usize, usize, usize),
    per_sample: bool,
) -> (Vec<T>, Vec<T>) {
    let (b, c, h, w) = dims;
    let plane = h * w;
    let groups = if per_sample { b * c } else { c };
    let count = if per_sample { plane } else { b * plane };
    let mut mean = vec![0.0f64; groups];
    let mut var = vec![0.0f64; groups];
    for bi in 0..b {
        for ci in 0..c {
            let gi = if per_sample { bi * c + ci } else { ci };
            let s = &x[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
            mean[gi] += s.iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    for bi in 0..b {
        for ci in 0..c {
            let gi = if per_sample { bi * c + ci } else { ci };
            let m = mean[gi];
            let s = &x[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
            var[gi] += s.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    (
        mean.into_iter().map(T::from_f64_lossy).collect(),
        var.into_iter().map(T::from_f64_lossy).collect(),
    )
}

/// `y = gamma * (x - mean) * inv_std + beta` with per-group statistics.
/// `gamma`/`beta` are per channel and optional (identity affine).
#[allow(clippy::too_many_arguments)]
pub fn normalize_apply<T: Element>(
    x: &[T],
    dims: (usize, usize, usize, usize),
    per_sample: bool,
    mean: &[T],
    inv_std: &[T],
    gamma: Option<&[T]>,
    beta: Option<&[T]>,
) -> Vec<T> {
    let (b, c, h, w) = dims;
    let plane = h * w;
    let mut y = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let gi = if per_sample { bi * c + ci } else { ci };
            let scale = inv_std[gi] * gamma.map_or(T::one(), |g| g[ci]);
            let shift = beta.map_or(T::zero(), |bt| bt[ci]) - mean[gi] * scale;
            let range = (bi * c + ci) * plane..(bi * c + ci + 1) * plane;
            for (o, &v) in y[range.clone()].iter_mut().zip(&x[range]) {
                *o = v * scale + shift;
            }
        }
    }
    y
}

/// Backward of [`normalize_apply`] where the statistics came from the batch
/// itself. Returns `(dx, dgamma, dbeta)`; the last two are per channel.
pub fn normalize_backward_batch_stats<T: Element>(
    x: &[T],
    dims: (usize, usize, usize, usize),
    per_sample: bool,
    mean: &[T],
    inv_std: &[T],
    gamma: Option<&[T]>,
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (b, c, h, w) = dims;
    let plane = h * w;
    let groups = mean.len();
    let count = if per_sample { plane } else { b * plane };
    let mut sum_dy = vec![0.0f64; groups];
    let mut sum_dy_xhat = vec![0.0f64; groups];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..b {
        for ci in 0..c {
            let gi = if per_sample { bi * c + ci } else { ci };
            let range = (bi * c + ci) * plane..(bi * c + ci + 1) * plane;
            let (m, is) = (mean[gi].as_f64(), inv_std[gi].as_f64());
            let mut sd = 0.0;
            let mut sdx = 0.0;
            for (&xv, &g) in x[range.clone()].iter().zip(&dy[range]) {
                let g = g.as_f64();
                sd += g;
                sdx += g * (xv.as_f64() - m) * is;
            }
            sum_dy[gi] += sd;
            sum_dy_xhat[gi] += sdx;
            dgamma[ci] += T::from_f64_lossy(sdx);
            dbeta[ci] += T::from_f64_lossy(sd);
        }
    }
    let mut dx = vec![T::zero(); x.len()];
    let nf = count as f64;
    for bi in 0..b {
        for ci in 0..c {
            let gi = if per_sample { bi * c + ci } else { ci };
            let range = (bi * c + ci) * plane..(bi * c + ci + 1) * plane;
            let (m, is) = (mean[gi].as_f64(), inv_std[gi].as_f64());
            let gmul = gamma.map_or(1.0, |g| g[ci].as_f64());
            let k = gmul * is / nf;
            let (sd, sdx) = (sum_dy[gi], sum_dy_xhat[gi]);
            for ((o, &xv), &g) in dx[range.clone()].iter_mut().zip(&x[range.clone()]).zip(&dy[range]) {
                let xhat = (xv.as_f64() - m) * is;
                *o = T::from_f64_lossy(k * (nf * g.as_f64() - sd - xhat * sdx));
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn upsample_nearest_forward<T: Element>(x: &[T], dims: (usize, usize, usize, usize), factor: usize) -> Vec<T> {
    let (b, c, h, w) = dims;
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); b * c * oh * ow];
    for p in 0..b * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let row = &src[(oy / factor) * w..(oy / factor + 1) * w];
            for ox in 0..ow {
                dst[oy * ow + ox] = row[ox / factor];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<T: Element>(dy: &[T], dims: (usize, usize, usize, usize), factor: usize) -> Vec<T> {
    let (b, c, h, w) = dims;
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = vec![T::zero(); b * c * h * w];
    for p in 0..b * c {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / factor) * w + ox / factor] += src[oy * ow + ox];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(x: &[f64], g: &ConvGeom, w: &[f64], out_c: usize) -> Vec<f64> {
        let mut out = vec![0.0; out_c * g.out_h * g.out_w];
        for oc in 0..out_c {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut s = 0.0;
                    for c in 0..g.channels {
                        for ki in 0..g.kernel {
                            for kj in 0..g.kernel {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.height && (ix as usize) < g.width {
                                    s += x[(c * g.height + iy as usize) * g.width + ix as usize]
                                        * w[((oc * g.channels + c) * g.kernel + ki) * g.kernel + kj];
                                }
                            }
                        }
                    }
                    out[(oc * g.out_h + oy) * g.out_w + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1), (4, 1, 1)] {
            let g = ConvGeom::new(3, 9, 7, k, s, p).unwrap();
            let x: Vec<f64> = (0..3 * 9 * 7).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..4 * 3 * k * k).map(|i| ((i * 13) % 7) as f64 * 0.25 - 0.7).collect();
            let fast = conv2d_forward(&x, 1, &g, &w, None, 4);
            let slow = direct_conv(&x, &g, &w, 4);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-9, "k{k} s{s} p{p}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, 6, 5, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..g.channels * 30).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut col = vec![0.0; c.len()];
        im2col(&x, &g, &mut col);
        let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut img = vec![0.0; x.len()];
        col2im(&c, &g, &mut img);
        let rhs: f64 = img.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}

/// Output-channel counts up to this use the unpacked row kernels below;
/// wider layers go through the packed GEMM.
pub const NARROW_CHANNELS: usize = 32;

/// Columns processed per block so that one output row segment stays in L1.
const COL_BLOCK: usize = 512;

#[inline(always)]
fn axpy<T: Element>(y: &mut [T], a: T, x: &[T]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

/// Dot product with eight interleaved partial sums combined in a fixed
/// order, so the result does not depend on the vector width used.
#[inline(always)]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    for (l, (&x, &y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        acc[l] += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

#[inline(always)]
fn rows_nn_impl<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    if !accumulate {
        c[..m * n].fill(T::zero());
    }
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + COL_BLOCK).min(n);
        if m <= k {
            // the m output segments stay cached while each b row streams once
            for p in 0..k {
                let brow = &b[p * n + j0..p * n + j1];
                for i in 0..m {
                    axpy(&mut c[i * n + j0..i * n + j1], a[i * k + p], brow);
                }
            }
        } else {
            for i in 0..m {
                let crow = &mut c[i * n + j0..i * n + j1];
                for p in 0..k {
                    axpy(crow, a[i * k + p], &b[p * n + j0..p * n + j1]);
                }
            }
        }
        j0 = j1;
    }
}

#[inline(always)]
fn rows_nt_impl<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + COL_BLOCK).min(n);
        for p in 0..k {
            let brow = &b[p * n + j0..p * n + j1];
            for i in 0..m {
                c[i * k + p] += dot(&a[i * n + j0..i * n + j1], brow);
            }
        }
        j0 = j1;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn rows_nn_avx2<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    rows_nn_impl(m, k, n, a, b, c, accumulate)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn rows_nt_avx2<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    rows_nt_impl(m, k, n, a, b, c)
}

fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// `c[m×n] (+)= a[m×k] · b[k×n]`, all row-major and contiguous.
pub fn rows_nn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "rows_nn: operand too short");
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports AVX2, checked at runtime.
        return unsafe { rows_nn_avx2(m, k, n, a, b, c, accumulate) };
    }
    rows_nn_impl(m, k, n, a, b, c, accumulate)
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`, all row-major and contiguous.
pub fn rows_nt<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert!(a.len() >= m * n && b.len() >= k * n && c.len() >= m * k, "rows_nt: operand too short");
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports AVX2, checked at runtime.
        return unsafe { rows_nt_avx2(m, k, n, a, b, c) };
    }
    rows_nt_impl(m, k, n, a, b, c)
}

fn transpose<T: Element>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut t = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}
