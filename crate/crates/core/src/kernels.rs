//! Raw numeric kernels behind the tape primitives.
//!
//! Each kernel comes in a `_seq` form and a dispatching form that fans out
//! over [`crate::par`] when the `parallel` feature is on. Work is always
//! split over disjoint output channels/rows, and accumulation order within
//! one output element is fixed, so both forms produce bit-identical results.

use crate::par;
use crate::tensor::Element;

/// Output extent of a strided convolution along one axis.
#[inline]
pub fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1 // floor division per the output-size contract
}

/// Valid output index range `[lo, hi)` such that `o*stride + k - pad` lands
/// inside `[0, input)`.
#[inline]
fn valid_range(input: usize, k: usize, stride: usize, pad: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let last_in = input as isize - 1 - k as isize + pad as isize;
    if last_in < 0 {
        return (0, 0);
    }
    let hi = (last_in as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(
    in_shape: (usize, usize, usize),
    k_shape: (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
) -> ConvDims {
    let (cin, h, w) = in_shape;
    let (cout, kcin, kh, kw) = k_shape;
    debug_assert_eq!(cin, kcin);
    ConvDims {
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        stride,
        pad,
        oh: conv_out_len(h, kh, stride, pad),
        ow: conv_out_len(w, kw, stride, pad),
    }
}

fn conv2d_channel<T: Element>(d: &ConvDims, input: &[T], kernel: &[T], co: usize, out_c: &mut [T]) {
    out_c.fill(T::zero());
    for ci in 0..d.cin {
        let in_c = &input[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let wgt = kernel[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
                if wgt == T::zero() {
                    continue;
                }
                let (ylo, yhi) = valid_range(d.h, ky, d.stride, d.pad, d.oh);
                let (xlo, xhi) = valid_range(d.w, kx, d.stride, d.pad, d.ow);
                for oy in ylo..yhi {
                    let iy = oy * d.stride + ky - d.pad;
                    let in_row = &in_c[iy * d.w..(iy + 1) * d.w];
                    let out_row = &mut out_c[oy * d.ow..(oy + 1) * d.ow];
                    if d.stride == 1 {
                        let base = kx.wrapping_sub(d.pad);
                        for ox in xlo..xhi {
                            out_row[ox] += wgt * in_row[ox.wrapping_add(base)];
                        }
                    } else {
                        for ox in xlo..xhi {
                            out_row[ox] += wgt * in_row[ox * d.stride + kx - d.pad];
                        }
                    }
                }
            }
        }
    }
}

/// `out[co,oy,ox] = sum_{ci,ky,kx} kernel[co,ci,ky,kx] * input[ci, oy*s+ky-p, ox*s+kx-p]`
pub fn conv2d_forward<T: Element>(
    input: &[T],
    in_shape: (usize, usize, usize),
    kernel: &[T],
    k_shape: (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let d = conv_dims(in_shape, k_shape, stride, pad);
    debug_assert_eq!(out.len(), d.cout * d.oh * d.ow);
    par::for_each_chunk_mut(out, d.oh * d.ow, |co, out_c| {
        conv2d_channel(&d, input, kernel, co, out_c)
    });
}

/// Sequential twin of [`conv2d_forward`], kept for the benchmark comparison.
pub fn conv2d_forward_seq<T: Element>(
    input: &[T],
    in_shape: (usize, usize, usize),
    kernel: &[T],
    k_shape: (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let d = conv_dims(in_shape, k_shape, stride, pad);
    par::for_each_chunk_mut_seq(out, d.oh * d.ow, |co, out_c| {
        conv2d_channel(&d, input, kernel, co, out_c)
    });
}

/// Gradient of a convolution w.r.t. its input (transposed convolution).
pub fn conv2d_backward_input<T: Element>(
    kernel: &[T],
    k_shape: (usize, usize, usize, usize),
    d_out: &[T],
    in_shape: (usize, usize, usize),
    stride: usize,
    pad: usize,
    d_input: &mut [T],
) {
    let d = conv_dims(in_shape, k_shape, stride, pad);
    par::for_each_chunk_mut(d_input, d.h * d.w, |ci, din_c| {
        din_c.fill(T::zero());
        for co in 0..d.cout {
            let dout_c = &d_out[co * d.oh * d.ow..(co + 1) * d.oh * d.ow];
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let wgt = kernel[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
                    if wgt == T::zero() {
                        continue;
                    }
                    let (ylo, yhi) = valid_range(d.h, ky, d.stride, d.pad, d.oh);
                    let (xlo, xhi) = valid_range(d.w, kx, d.stride, d.pad, d.ow);
                    for oy in ylo..yhi {
                        let iy = oy * d.stride + ky - d.pad;
                        let dout_row = &dout_c[oy * d.ow..(oy + 1) * d.ow];
                        let din_row = &mut din_c[iy * d.w..(iy + 1) * d.w];
                        for ox in xlo..xhi {
                            din_row[ox * d.stride + kx - d.pad] += wgt * dout_row[ox];
                        }
                    }
                }
            }
        }
    });
}

/// Gradient of a convolution w.r.t. its kernel.
pub fn conv2d_backward_kernel<T: Element>(
    input: &[T],
    in_shape: (usize, usize, usize),
    d_out: &[T],
    k_shape: (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
    d_kernel: &mut [T],
) {
    let d = conv_dims(in_shape, k_shape, stride, pad);
    par::for_each_chunk_mut(d_kernel, d.cin * d.kh * d.kw, |co, dk_c| {
        let dout_c = &d_out[co * d.oh * d.ow..(co + 1) * d.oh * d.ow];
        for ci in 0..d.cin {
            let in_c = &input[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let (ylo, yhi) = valid_range(d.h, ky, d.stride, d.pad, d.oh);
                    let (xlo, xhi) = valid_range(d.w, kx, d.stride, d.pad, d.ow);
                    let mut acc = T::zero();
                    for oy in ylo..yhi {
                        let iy = oy * d.stride + ky - d.pad;
                        let in_row = &in_c[iy * d.w..(iy + 1) * d.w];
                        let dout_row = &dout_c[oy * d.ow..(oy + 1) * d.ow];
                        for ox in xlo..xhi {
                            acc += dout_row[ox] * in_row[ox * d.stride + kx - d.pad];
                        }
                    }
                    dk_c[(ci * d.kh + ky) * d.kw + kx] = acc;
                }
            }
        }
    });
}

/// One axis of bilinear resampling: destination index -> (i0, i1, frac).
///
/// Half-pixel centers: `s = (d + 0.5) * (in / out) - 0.5`, clamped to
/// `[0, in - 1]`. Fractions are computed in f64 and cast, so the f32 and f64
/// instantiations sample identical positions.
pub fn bilinear_axis(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|d| {
            let s = (d as f64 + 0.5) * (in_len as f64 / out_len as f64) - 0.5;
            let s = s.clamp(0.0, (in_len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear upsample of a `[C, h, w]` map to `[C, out_h, out_w]`.
pub fn bilinear_forward<T: Element>(
    input: &[T],
    (c, h, w): (usize, usize, usize),
    (out_h, out_w): (usize, usize),
    out: &mut [T],
) {
    let ys = bilinear_axis(h, out_h);
    let xs = bilinear_axis(w, out_w);
    debug_assert_eq!(out.len(), c * out_h * out_w);
    par::for_each_chunk_mut(out, out_h * out_w, |ci, out_c| {
        let in_c = &input[ci * h * w..(ci + 1) * h * w];
        for (dy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::from_f64(fy);
            let row0 = &in_c[y0 * w..y0 * w + w];
            let row1 = &in_c[y1 * w..y1 * w + w];
            let out_row = &mut out_c[dy * out_w..(dy + 1) * out_w];
            for (dx, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::from_f64(fx);
                let top = row0[x0] + fx * (row0[x1] - row0[x0]);
                let bot = row1[x0] + fx * (row1[x1] - row1[x0]);
                out_row[dx] = top + fy * (bot - top);
            }
        }
    });
}

/// Scatter-adjoint of [`bilinear_forward`].
pub fn bilinear_backward<T: Element>(
    d_out: &[T],
    (c, h, w): (usize, usize, usize),
    (out_h, out_w): (usize, usize),
    d_input: &mut [T],
) {
    debug_assert_eq!(d_input.len(), c * h * w);
    let ys = bilinear_axis(h, out_h);
    let xs = bilinear_axis(w, out_w);
    par::for_each_chunk_mut(d_input, h * w, |ci, din_c| {
        din_c.fill(T::zero());
        let dout_c = &d_out[ci * out_h * out_w..(ci + 1) * out_h * out_w];
        for (dy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::from_f64(fy);
            for (dx, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::from_f64(fx);
                let g = dout_c[dy * out_w + dx];
                let one = T::one();
                din_c[y0 * w + x0] += (one - fy) * (one - fx) * g;
                din_c[y0 * w + x1] += (one - fy) * fx * g;
                din_c[y1 * w + x0] += fy * (one - fx) * g;
                din_c[y1 * w + x1] += fy * fx * g;
            }
        }
    });
}

/// Local neighborhood pattern on an `h x w` grid: unordered pixel pairs
/// within Euclidean radius, plus per-row incidence lists for deterministic
/// row-wise accumulation.
#[derive(Debug, Clone)]
pub struct PairPattern {
    pub h: usize,
    pub w: usize,
    /// Unordered pairs `(i, j)` with `i < j`, sorted by `(i, j)`.
    pub pairs: Vec<(u32, u32)>,
    /// CSR-style offsets into `incident`, one row per pixel.
    pub row_ptr: Vec<u32>,
    /// `(pair index, other endpoint)` for every pair touching the row pixel.
    pub incident: Vec<(u32, u32)>,
}

impl PairPattern {
    /// Enumerates in-radius pairs. Radius 0 yields no pairs (self loops are
    /// implicit elsewhere).
    pub fn build(h: usize, w: usize, radius: usize) -> PairPattern {
        let r = radius as isize;
        let r2 = r * r;
        let mut offsets = Vec::new();
        for dy in 0..=r {
            for dx in -r..=r {
                if (dy == 0 && dx <= 0) || dy * dy + dx * dx > r2 {
                    continue;
                }
                offsets.push((dy, dx));
            }
        }
        offsets.sort_unstable();
        let mut pairs = Vec::new();
        for y in 0..h as isize {
            for x in 0..w as isize {
                let i = (y * w as isize + x) as u32;
                for &(dy, dx) in &offsets {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < h as isize && (0..w as isize).contains(&nx) {
                        pairs.push((i, (ny * w as isize + nx) as u32));
                    }
                }
            }
        }
        pairs.sort_unstable();
        Self::from_pairs(h, w, pairs)
    }

    /// Builds incidence lists from an explicit pair list (`i < j` required).
    pub fn from_pairs(h: usize, w: usize, pairs: Vec<(u32, u32)>) -> PairPattern {
        let n = h * w;
        let mut counts = vec![0u32; n + 1];
        for &(i, j) in &pairs {
            debug_assert!(i < j && (j as usize) < n);
            counts[i as usize + 1] += 1;
            counts[j as usize + 1] += 1;
        }
        for k in 0..n {
            counts[k + 1] += counts[k];
        }
        let row_ptr = counts.clone();
        let mut cursor = counts;
        let mut incident = vec![(0u32, 0u32); 2 * pairs.len()];
        for (p, &(i, j)) in pairs.iter().enumerate() {
            incident[cursor[i as usize] as usize] = (p as u32, j);
            cursor[i as usize] += 1;
            incident[cursor[j as usize] as usize] = (p as u32, i);
            cursor[j as usize] += 1;
        }
        PairPattern { h, w, pairs, row_ptr, incident }
    }

    pub fn n_pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    fn row(&self, i: usize) -> &[(u32, u32)] {
        &self.incident[self.row_ptr[i] as usize..self.row_ptr[i + 1] as usize]
    }
}

/// L1 feature distance per pair: `d_p = sum_c |f[c,i] - f[c,j]|`.
pub fn pair_l1_forward<T: Element>(features: &[T], channels: usize, pat: &PairPattern) -> Vec<T> {
    let n = pat.n_pixels();
    debug_assert_eq!(features.len(), channels * n);
    par::map_indexed(pat.n_pairs(), |p| {
        let (i, j) = pat.pairs[p];
        let (mut i, mut j) = (i as usize, j as usize);
        let mut acc = T::zero();
        for _ in 0..channels {
            acc += (features[i] - features[j]).abs();
            i += n;
            j += n;
        }
        acc
    })
}

/// Backward of [`pair_l1_forward`]: routes `sign(f_i - f_j) * d_d` into both
/// endpoints. Sign at exact ties is zero.
pub fn pair_l1_backward<T: Element>(
    features: &[T],
    channels: usize,
    pat: &PairPattern,
    d_dist: &[T],
    d_features: &mut [T],
) {
    let n = pat.n_pixels();
    debug_assert_eq!(d_features.len(), channels * n);
    par::for_each_chunk_mut(d_features, n, |c, dfeat_c| {
        let base = c * n;
        for i in 0..n {
            let mut acc = T::zero();
            for &(p, j) in pat.row(i) {
                let diff = features[base + i] - features[base + j as usize];
                let sign = if diff > T::zero() {
                    T::one()
                } else if diff < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                acc += sign * d_dist[p as usize];
            }
            dfeat_c[i] = acc;
        }
    });
}

/// Row-wise sum of pair weights: `out[i] = sum_{p incident to i} w_p`.
pub fn pair_row_sums<T: Element>(weights: &[T], pat: &PairPattern) -> Vec<T> {
    par::map_indexed(pat.n_pixels(), |i| {
        let mut acc = T::zero();
        for &(p, _) in pat.row(i) {
            acc += weights[p as usize];
        }
        acc
    })
}

fn spmv_row<T: Element>(weights: &[T], pat: &PairPattern, x_row: &[T], i: usize) -> T {
    let mut acc = T::zero();
    for &(p, j) in pat.row(i) {
        acc += weights[p as usize] * x_row[j as usize];
    }
    acc
}

/// Symmetric off-diagonal sparse mat-vec over `K` stacked maps:
/// `y[k,i] = sum_{p=(i,j)} w_p * x[k,j]`.
pub fn spmv_pairs<T: Element>(weights: &[T], pat: &PairPattern, x: &[T], k: usize, y: &mut [T]) {
    let n = pat.n_pixels();
    debug_assert_eq!(x.len(), k * n);
    par::for_each_chunk_mut(y, n, |ki, y_row| {
        let x_row = &x[ki * n..(ki + 1) * n];
        for (i, out) in y_row.iter_mut().enumerate() {
            *out = spmv_row(weights, pat, x_row, i);
        }
    });
}

/// Sequential twin of [`spmv_pairs`] for the benchmark comparison.
pub fn spmv_pairs_seq<T: Element>(weights: &[T], pat: &PairPattern, x: &[T], k: usize, y: &mut [T]) {
    let n = pat.n_pixels();
    debug_assert_eq!(x.len(), k * n);
    par::for_each_chunk_mut_seq(y, n, |ki, y_row| {
        let x_row = &x[ki * n..(ki + 1) * n];
        for (i, out) in y_row.iter_mut().enumerate() {
            *out = spmv_row(weights, pat, x_row, i);
        }
    });
}

/// Gradient of [`spmv_pairs`] w.r.t. the pair weights:
/// `dw_p = sum_k (dy[k,i] * x[k,j] + dy[k,j] * x[k,i])`.
pub fn spmv_pairs_backward_weights<T: Element>(
    pat: &PairPattern,
    x: &[T],
    d_y: &[T],
    k: usize,
    d_weights: &mut [T],
) {
    let n = pat.n_pixels();
    par::for_each_chunk_mut(d_weights, 1, |p, dw| {
        let (i, j) = pat.pairs[p];
        let (i, j) = (i as usize, j as usize);
        let mut acc = T::zero();
        for ki in 0..k {
            let base = ki * n;
            acc += d_y[base + i] * x[base + j] + d_y[base + j] * x[base + i];
        }
        dw[0] = acc;
    });
}
