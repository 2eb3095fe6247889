//! Raw loops behind the differentiable primitives: im2col convolution,
//! depthwise convolution, pooling indices and axis permutation.

use crate::numerics::float::Float;

/// Geometry of a 2-D convolution over an NCHW batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Option<Self> {
        let (kh, kw) = kernel;
        let (sh, sw) = stride;
        let (ph, pw) = padding;
        if sh == 0 || sw == 0 || h + 2 * ph < kh || w + 2 * pw < kw {
            return None;
        }
        Some(ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            ho: (h + 2 * ph - kh) / sh + 1,
            wo: (w + 2 * pw - kw) / sw + 1,
        })
    }

    pub fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }
}

/// Input row/col for output position `o` and kernel offset `k`, if inside the image.
#[inline]
fn src_index(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let pos = o * stride + k;
    if pos < pad || pos - pad >= extent {
        None
    } else {
        Some(pos - pad)
    }
}

/// Unfolds one image `[C, H, W]` into `[C*kh*kw, Ho*Wo]`.
pub fn im2col<T: Float>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    match src_index(oy, ki, g.sh, g.ph, g.h) {
                        None => out_row.iter_mut().for_each(|v| *v = T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, v) in out_row.iter_mut().enumerate() {
                                *v = match src_index(ox, kj, g.sw, g.pw, g.w) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into the image gradient.
pub fn col2im_add<T: Float>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let Some(iy) = src_index(oy, ki, g.sh, g.ph, g.h) else {
                        continue;
                    };
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in 0..g.wo {
                        if let Some(ix) = src_index(ox, kj, g.sw, g.pw, g.w) {
                            dst[ix] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Range of output indices `o` for which `o*stride + k - pad` lies in `[0, extent)`.
fn valid_range(k: usize, stride: usize, pad: usize, extent: usize, out: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest o with o*stride + k - pad <= extent - 1
    let hi = if extent + pad < k + 1 {
        0
    } else {
        ((extent + pad - k - 1) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

/// Depthwise convolution forward; `w` is `[C, kh, kw]`, `out` must be zeroed or hold the bias.
pub fn depthwise_forward<T: Float>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [T]) {
    let (hw, ohw) = (g.h * g.w, g.ho * g.wo);
    for n in 0..g.n {
        for c in 0..g.c_in {
            let xp = &x[(n * g.c_in + c) * hw..][..hw];
            let op = &mut out[(n * g.c_in + c) * ohw..][..ohw];
            let wk = &w[c * g.kh * g.kw..][..g.kh * g.kw];
            for ki in 0..g.kh {
                let (y0, y1) = valid_range(ki, g.sh, g.ph, g.h, g.ho);
                for kj in 0..g.kw {
                    let wv = wk[ki * g.kw + kj];
                    let (x0, x1) = valid_range(kj, g.sw, g.pw, g.w, g.wo);
                    if x0 >= x1 {
                        continue;
                    }
                    for oy in y0..y1 {
                        let iy = oy * g.sh + ki - g.ph;
                        let orow = &mut op[oy * g.wo..(oy + 1) * g.wo];
                        let xrow = &xp[iy * g.w..(iy + 1) * g.w];
                        if g.sw == 1 {
                            let off = x0 + kj - g.pw;
                            for (o, &xv) in orow[x0..x1].iter_mut().zip(&xrow[off..off + (x1 - x0)]) {
                                *o += wv * xv;
                            }
                        } else {
                            for ox in x0..x1 {
                                orow[ox] += wv * xrow[ox * g.sw + kj - g.pw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise convolution backward: accumulates into `dx` (if given) and `dw`.
pub fn depthwise_backward<T: Float>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let (hw, ohw) = (g.h * g.w, g.ho * g.wo);
    for n in 0..g.n {
        for c in 0..g.c_in {
            let xp = &x[(n * g.c_in + c) * hw..][..hw];
            let gp = &gout[(n * g.c_in + c) * ohw..][..ohw];
            for ki in 0..g.kh {
                let (y0, y1) = valid_range(ki, g.sh, g.ph, g.h, g.ho);
                for kj in 0..g.kw {
                    let widx = c * g.kh * g.kw + ki * g.kw + kj;
                    let wv = w[widx];
                    let (x0, x1) = valid_range(kj, g.sw, g.pw, g.w, g.wo);
                    if x0 >= x1 {
                        continue;
                    }
                    let mut acc = T::zero();
                    for oy in y0..y1 {
                        let iy = oy * g.sh + ki - g.ph;
                        let grow = &gp[oy * g.wo..(oy + 1) * g.wo];
                        if g.sw == 1 {
                            let off = iy * g.w + x0 + kj - g.pw;
                            let len = x1 - x0;
                            let gs = &grow[x0..x1];
                            acc += gs.iter().zip(&xp[off..off + len]).fold(T::zero(), |a, (&u, &v)| a + u * v);
                            if let Some(dx) = dx.as_deref_mut() {
                                let dxp = &mut dx[(n * g.c_in + c) * hw + off..][..len];
                                dxp.iter_mut().zip(gs).for_each(|(d, &u)| *d += wv * u);
                            }
                            continue;
                        }
                        for ox in x0..x1 {
                            let ix = ox * g.sw + kj - g.pw;
                            acc += grow[ox] * xp[iy * g.w + ix];
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let dxp = &mut dx[(n * g.c_in + c) * hw..][..hw];
                            for ox in x0..x1 {
                                let ix = ox * g.sw + kj - g.pw;
                                dxp[iy * g.w + ix] += wv * grow[ox];
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
}

/// Channels-last depthwise convolution forward: `x [N, H, W, C]`, `w [kh, kw, C]`,
/// `out [N, ho, wo, C]` zeroed or holding the bias.
pub fn depthwise_nhwc_forward<T: Float>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [T]) {
    let c = g.c_in;
    for n in 0..g.n {
        for ki in 0..g.kh {
            let (y0, y1) = valid_range(ki, g.sh, g.ph, g.h, g.ho);
            for kj in 0..g.kw {
                let (x0, x1) = valid_range(kj, g.sw, g.pw, g.w, g.wo);
                let wk = &w[(ki * g.kw + kj) * c..][..c];
                for oy in y0..y1 {
                    let iy = oy * g.sh + ki - g.ph;
                    for ox in x0..x1 {
                        let ix = ox * g.sw + kj - g.pw;
                        let xs = &x[((n * g.h + iy) * g.w + ix) * c..][..c];
                        let os = &mut out[((n * g.ho + oy) * g.wo + ox) * c..][..c];
                        for ((o, &xv), &wv) in os.iter_mut().zip(xs).zip(wk) {
                            *o += wv * xv;
                        }
                    }
                }
            }
        }
    }
}

/// Channels-last depthwise convolution backward; accumulates into `dx` and `dw` when given.
pub fn depthwise_nhwc_backward<T: Float>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let c = g.c_in;
    for n in 0..g.n {
        for ki in 0..g.kh {
            let (y0, y1) = valid_range(ki, g.sh, g.ph, g.h, g.ho);
            for kj in 0..g.kw {
                let (x0, x1) = valid_range(kj, g.sw, g.pw, g.w, g.wo);
                let woff = (ki * g.kw + kj) * c;
                for oy in y0..y1 {
                    let iy = oy * g.sh + ki - g.ph;
                    for ox in x0..x1 {
                        let ix = ox * g.sw + kj - g.pw;
                        let xoff = ((n * g.h + iy) * g.w + ix) * c;
                        let gs = &gout[((n * g.ho + oy) * g.wo + ox) * c..][..c];
                        if let Some(dw) = dw.as_deref_mut() {
                            let xs = &x[xoff..xoff + c];
                            for ((d, &xv), &gv) in dw[woff..woff + c].iter_mut().zip(xs).zip(gs) {
                                *d += xv * gv;
                            }
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let wk = &w[woff..woff + c];
                            for ((d, &wv), &gv) in dx[xoff..xoff + c].iter_mut().zip(wk).zip(gs) {
                                *d += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Flat source indices of a max-pool over `[N, C, H, W]`; ties resolve to the first element.
pub fn max_pool_indices<T: Float>(
    score: impl Fn(usize) -> T,
    shape: [usize; 4],
    kernel: (usize, usize),
    stride: (usize, usize),
) -> (Vec<usize>, [usize; 4]) {
    let [n, c, h, w] = shape;
    let ho = (h - kernel.0) / stride.0 + 1;
    let wo = (w - kernel.1) / stride.1 + 1;
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride.0 * w + ox * stride.1;
                let mut best_v = score(best);
                for ki in 0..kernel.0 {
                    for kj in 0..kernel.1 {
                        let i = base + (oy * stride.0 + ki) * w + ox * stride.1 + kj;
                        let v = score(i);
                        if v > best_v {
                            best = i;
                            best_v = v;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    (idx, [n, c, ho, wo])
}

/// Copies `src` (row-major, `shape`) into a new buffer with axes reordered by `perm`.
pub fn permute<T: Copy>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    if src.is_empty() {
        return out;
    }
    if rank == 0 {
        out.push(src[0]);
        return out;
    }
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_shape[last], strides[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner_len]);
        } else {
            out.extend((0..inner_len).map(|j| src[base + j * inner_stride]));
        }
        // odometer over all but the last axis
        let mut axis = last;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            base += strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            base -= strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_arithmetic() {
        let shape = [2, 3, 4];
        let src: Vec<usize> = (0..24).collect();
        let out = permute(&src, &shape, &[2, 0, 1]);
        // out[k, i, j] = src[i, j, k]
        for k in 0..4 {
            for i in 0..2 {
                for j in 0..3 {
                    assert_eq!(out[(k * 2 + i) * 3 + j], src[(i * 3 + j) * 4 + k]);
                }
            }
        }
        let back = permute(&out, &[4, 2, 3], &inverse_perm(&[2, 0, 1]));
        assert_eq!(back, src);
    }

    #[test]
    fn valid_range_covers_padding() {
        // extent 5, kernel offset 0, pad 2, stride 1, out 5: positions o-2 >= 0 -> o >= 2
        assert_eq!(valid_range(0, 1, 2, 5, 5), (2, 5));
        assert_eq!(valid_range(4, 1, 2, 5, 5), (0, 3));
        assert_eq!(valid_range(1, 2, 0, 6, 3), (0, 3));
    }

    #[test]
    fn depthwise_matches_im2col_per_channel() {
        let g = ConvGeom::new(1, 2, 5, 4, 2, (3, 3), (1, 1), (1, 1)).unwrap();
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.3).sin()).collect();
        let w: Vec<f64> = (0..18).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut out = vec![0.0; 2 * g.ho * g.wo];
        depthwise_forward(&x, &w, &g, &mut out);
        for c in 0..2 {
            let gc = ConvGeom { c_in: 1, ..g };
            let mut col = vec![0.0; 9 * g.ho * g.wo];
            im2col(&x[c * 20..(c + 1) * 20], &gc, &mut col);
            for p in 0..g.ho * g.wo {
                let v: f64 = (0..9).map(|r| w[c * 9 + r] * col[r * g.ho * g.wo + p]).sum();
                assert!((v - out[c * g.ho * g.wo + p]).abs() < 1e-12);
            }
        }
    }
}
