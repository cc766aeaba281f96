//! Layer primitives on `(C, B, H, W)` activations.
//!
//! Channel-major layout lets every convolution run as one GEMM over the whole
//! batch, and makes channel concatenation and per-channel batch statistics
//! contiguous slices.

use ndarray::{concatenate, s, Array2, Array4, ArrayView2, Axis, NdFloat};
use rand::Rng;

#[inline]
pub(crate) fn cast<F: NdFloat>(x: f64) -> F {
    F::from(x).expect("representable constant")
}

fn as_matrix<F: NdFloat>(x: &Array4<F>) -> ArrayView2<'_, F> {
    let c = x.dim().0;
    let n = x.len() / c.max(1);
    x.view()
        .into_shape_with_order((c, n))
        .expect("activations are standard layout")
}

fn from_matrix<F: NdFloat>(m: Array2<F>, shape: (usize, usize, usize, usize)) -> Array4<F> {
    m.as_standard_layout()
        .into_owned()
        .into_shape_with_order(shape)
        .expect("element count preserved")
}

/// Unfolds `k x k` zero-padded neighbourhoods into a `(C*k*k, B*H*W)` matrix.
pub(crate) fn im2col<F: NdFloat>(x: &Array4<F>, k: usize) -> Array2<F> {
    let (c, b, h, w) = x.dim();
    let pad = k / 2;
    let n = b * h * w;
    let src = x.as_slice().expect("standard layout");
    let mut cols = vec![F::zero(); c * k * k * n];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for bi in 0..b {
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < pad || sy - pad >= h {
                            continue;
                        }
                        let sy = sy - pad;
                        let s0 = ((ci * b + bi) * h + sy) * w + x_lo + kx - pad;
                        let d0 = (bi * h + y) * w + x_lo;
                        let len = x_hi - x_lo;
                        dst[d0..d0 + len].copy_from_slice(&src[s0..s0 + len]);
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, n), cols).expect("sized above")
}

/// Adjoint of [`im2col`].
pub(crate) fn col2im<F: NdFloat>(
    cols: &Array2<F>,
    shape: (usize, usize, usize, usize),
    k: usize,
) -> Array4<F> {
    let (c, b, h, w) = shape;
    let pad = k / 2;
    let n = b * h * w;
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let mut out = vec![F::zero(); c * n];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let col = &src[row * n..(row + 1) * n];
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for bi in 0..b {
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < pad || sy - pad >= h {
                            continue;
                        }
                        let sy = sy - pad;
                        let o0 = ((ci * b + bi) * h + sy) * w + x_lo + kx - pad;
                        let c0 = (bi * h + y) * w + x_lo;
                        let len = x_hi - x_lo;
                        for (o, &v) in out[o0..o0 + len].iter_mut().zip(&col[c0..c0 + len]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec(shape, out).expect("sized above")
}

/// Saved input of a convolution: the unfolded columns (or the raw input for 1x1).
pub(crate) struct ConvCache<F> {
    cols: Array2<F>,
    in_shape: (usize, usize, usize, usize),
}

/// 'Same' convolution with odd square kernel `k`. `weight` is `(cout, cin, k, k)`.
pub(crate) fn conv_forward<F: NdFloat>(
    x: &Array4<F>,
    weight: &[F],
    bias: &[F],
    cout: usize,
    k: usize,
) -> (Array4<F>, ConvCache<F>) {
    let (cin, b, h, w) = x.dim();
    let cols = if k == 1 {
        as_matrix(x).to_owned()
    } else {
        im2col(x, k)
    };
    let wm = ArrayView2::from_shape((cout, cin * k * k), weight).expect("kernel shape");
    let mut out = wm.dot(&cols);
    for (mut row, &bv) in out.outer_iter_mut().zip(bias) {
        row.mapv_inplace(|v| v + bv);
    }
    (
        from_matrix(out, (cout, b, h, w)),
        ConvCache {
            cols,
            in_shape: (cin, b, h, w),
        },
    )
}

/// Accumulates kernel and bias gradients; returns the input gradient.
pub(crate) fn conv_backward<F: NdFloat>(
    dy: &Array4<F>,
    cache: &ConvCache<F>,
    weight: &[F],
    k: usize,
    dweight: &mut [F],
    dbias: &mut [F],
    need_input_grad: bool,
) -> Option<Array4<F>> {
    let cout = dy.dim().0;
    let cin = cache.in_shape.0;
    let dym = as_matrix(dy);
    let dw = dym.dot(&cache.cols.t());
    for (acc, &g) in dweight.iter_mut().zip(dw.iter()) {
        *acc += g;
    }
    for (acc, row) in dbias.iter_mut().zip(dym.outer_iter()) {
        *acc += row.sum();
    }
    if !need_input_grad {
        return None;
    }
    let wm = ArrayView2::from_shape((cout, cin * k * k), weight).expect("kernel shape");
    let dcols = wm.t().dot(&dym);
    Some(if k == 1 {
        from_matrix(dcols, cache.in_shape)
    } else {
        col2im(&dcols, cache.in_shape, k)
    })
}

/// Stride-2 transposed convolution with a 2x2 kernel stored `(cout, 2, 2, cin)`.
pub(crate) fn deconv_forward<F: NdFloat>(
    x: &Array4<F>,
    weight: &[F],
    bias: &[F],
    cout: usize,
) -> Array4<F> {
    let (cin, b, h, w) = x.dim();
    let wm = ArrayView2::from_shape((cout * 4, cin), weight).expect("kernel shape");
    let y = wm.dot(&as_matrix(x));
    let mut out = Array4::<F>::zeros((cout, b, 2 * h, 2 * w));
    for co in 0..cout {
        for dy in 0..2 {
            for dx in 0..2 {
                let row = y.row(co * 4 + dy * 2 + dx);
                let row = row.as_slice().expect("row contiguous");
                let mut dst = out.slice_mut(s![co, .., dy..;2, dx..;2]);
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d = v + bias[co];
                }
            }
        }
    }
    out
}

pub(crate) fn deconv_backward<F: NdFloat>(
    dy: &Array4<F>,
    x: &Array4<F>,
    weight: &[F],
    dweight: &mut [F],
    dbias: &mut [F],
) -> Array4<F> {
    let (cout, b, h2, w2) = dy.dim();
    let (cin, _, h, w) = x.dim();
    debug_assert_eq!((h2, w2), (2 * h, 2 * w));
    let n = b * h * w;
    let mut gathered = Array2::<F>::zeros((cout * 4, n));
    for co in 0..cout {
        for ddy in 0..2 {
            for ddx in 0..2 {
                let src = dy.slice(s![co, .., ddy..;2, ddx..;2]);
                let mut row = gathered.row_mut(co * 4 + ddy * 2 + ddx);
                for (d, &v) in row.iter_mut().zip(src.iter()) {
                    *d = v;
                }
            }
        }
    }
    let xm = as_matrix(x);
    let dw = gathered.dot(&xm.t());
    for (acc, &g) in dweight.iter_mut().zip(dw.iter()) {
        *acc += g;
    }
    for co in 0..cout {
        let mut total = F::zero();
        for j in 0..4 {
            total += gathered.row(co * 4 + j).sum();
        }
        dbias[co] += total;
    }
    let wm = ArrayView2::from_shape((cout * 4, cin), weight).expect("kernel shape");
    from_matrix(wm.t().dot(&gathered), (cin, b, h, w))
}

pub(crate) fn upsample_nearest<F: NdFloat>(x: &Array4<F>) -> Array4<F> {
    let (c, b, h, w) = x.dim();
    let mut out = Array4::<F>::zeros((c, b, 2 * h, 2 * w));
    for dy in 0..2 {
        for dx in 0..2 {
            out.slice_mut(s![.., .., dy..;2, dx..;2]).assign(x);
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward<F: NdFloat>(dy: &Array4<F>) -> Array4<F> {
    let (c, b, h2, w2) = dy.dim();
    let mut out = Array4::<F>::zeros((c, b, h2 / 2, w2 / 2));
    for ddy in 0..2 {
        for ddx in 0..2 {
            out += &dy.slice(s![.., .., ddy..;2, ddx..;2]);
        }
    }
    out
}

pub(crate) fn relu_inplace<F: NdFloat>(x: &mut Array4<F>) {
    x.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
}

/// Zeroes gradient where the (post-ReLU) activation was not positive.
pub(crate) fn relu_backward_inplace<F: NdFloat>(dy: &mut Array4<F>, activated: &Array4<F>) {
    ndarray::Zip::from(dy).and(activated).for_each(|g, &a| {
        if a <= F::zero() {
            *g = F::zero();
        }
    });
}

pub(crate) struct BatchNormCache<F> {
    normalized: Array4<F>,
    inv_std: Vec<F>,
}

/// Per-channel batch statistics `(mean, biased variance)`.
pub(crate) struct BatchStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

pub(crate) fn batchnorm_train<F: NdFloat>(
    x: &Array4<F>,
    scale: &[F],
    shift: &[F],
    eps: F,
) -> (Array4<F>, BatchNormCache<F>, BatchStats<F>) {
    let c = x.dim().0;
    let n = x.len() / c;
    let n_f = cast::<F>(n as f64);
    let mut normalized = x.clone();
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(c);
    let mut means = Vec::with_capacity(c);
    let mut vars = Vec::with_capacity(c);
    for ci in 0..c {
        let xs = x.index_axis(Axis(0), ci);
        let xs = xs.as_slice().expect("standard layout");
        let mean = xs.iter().fold(F::zero(), |a, &v| a + v) / n_f;
        let var = xs.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) / n_f;
        let is = F::one() / (var + eps).sqrt();
        let mut nrm = normalized.index_axis_mut(Axis(0), ci);
        let mut o = out.index_axis_mut(Axis(0), ci);
        for ((nv, ov), &v) in nrm.iter_mut().zip(o.iter_mut()).zip(xs) {
            let xh = (v - mean) * is;
            *nv = xh;
            *ov = scale[ci] * xh + shift[ci];
        }
        inv_std.push(is);
        means.push(mean);
        vars.push(var);
    }
    (
        out,
        BatchNormCache {
            normalized,
            inv_std,
        },
        BatchStats {
            mean: means,
            var: vars,
        },
    )
}

pub(crate) fn batchnorm_eval<F: NdFloat>(
    x: &Array4<F>,
    scale: &[F],
    shift: &[F],
    running_mean: &[F],
    running_var: &[F],
    eps: F,
) -> Array4<F> {
    let mut out = x.clone();
    for (ci, mut plane) in out.outer_iter_mut().enumerate() {
        let is = F::one() / (running_var[ci] + eps).sqrt();
        let a = scale[ci] * is;
        let b = shift[ci] - running_mean[ci] * a;
        plane.mapv_inplace(|v| a * v + b);
    }
    out
}

pub(crate) fn batchnorm_backward<F: NdFloat>(
    dy: &Array4<F>,
    cache: &BatchNormCache<F>,
    scale: &[F],
    dscale: &mut [F],
    dshift: &mut [F],
) -> Array4<F> {
    let c = dy.dim().0;
    let n = dy.len() / c;
    let n_f = cast::<F>(n as f64);
    let mut dx = dy.clone();
    for ci in 0..c {
        let g = dy.index_axis(Axis(0), ci);
        let g = g.as_slice().expect("standard layout");
        let xh = cache.normalized.index_axis(Axis(0), ci);
        let xh = xh.as_slice().expect("standard layout");
        let mut sum_g = F::zero();
        let mut sum_gx = F::zero();
        for (&gv, &xv) in g.iter().zip(xh) {
            sum_g += gv;
            sum_gx += gv * xv;
        }
        dscale[ci] += sum_gx;
        dshift[ci] += sum_g;
        let k = scale[ci] * cache.inv_std[ci] / n_f;
        let mut d = dx.index_axis_mut(Axis(0), ci);
        for ((dv, &gv), &xv) in d.iter_mut().zip(g).zip(xh) {
            *dv = k * (n_f * gv - sum_g - xv * sum_gx);
        }
    }
    dx
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
pub(crate) fn dropout_mask<F: NdFloat, R: Rng + ?Sized>(
    shape: (usize, usize, usize, usize),
    rate: f64,
    rng: &mut R,
) -> Array4<F> {
    let keep = cast::<F>(1.0 / (1.0 - rate));
    Array4::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < rate {
            F::zero()
        } else {
            keep
        }
    })
}

/// 2x2 max pooling; returns the winning offset (0..4, first on ties) per output cell.
pub(crate) fn maxpool_forward<F: NdFloat>(x: &Array4<F>) -> (Array4<F>, Vec<u8>) {
    let (c, b, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let src = x.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(c * b * ho * wo);
    let mut arg = Vec::with_capacity(c * b * ho * wo);
    for plane in 0..c * b {
        let base = plane * h * w;
        for y in 0..ho {
            for xx in 0..wo {
                let i0 = base + 2 * y * w + 2 * xx;
                let cand = [src[i0], src[i0 + 1], src[i0 + w], src[i0 + w + 1]];
                let mut best = 0;
                for j in 1..4 {
                    if cand[j] > cand[best] {
                        best = j;
                    }
                }
                out.push(cand[best]);
                arg.push(best as u8);
            }
        }
    }
    (
        Array4::from_shape_vec((c, b, ho, wo), out).expect("sized above"),
        arg,
    )
}

pub(crate) fn maxpool_backward<F: NdFloat>(
    dy: &Array4<F>,
    arg: &[u8],
    in_shape: (usize, usize, usize, usize),
) -> Array4<F> {
    let (c, b, h, w) = in_shape;
    let (ho, wo) = (h / 2, w / 2);
    let g = dy.as_slice().expect("standard layout");
    let mut out = vec![F::zero(); c * b * h * w];
    for plane in 0..c * b {
        let base = plane * h * w;
        for y in 0..ho {
            for xx in 0..wo {
                let o = (plane * ho + y) * wo + xx;
                let a = arg[o] as usize;
                let idx = base + (2 * y + a / 2) * w + 2 * xx + a % 2;
                out[idx] += g[o];
            }
        }
    }
    Array4::from_shape_vec(in_shape, out).expect("sized above")
}

pub(crate) fn concat_channels<F: NdFloat>(a: &Array4<F>, b: &Array4<F>) -> Array4<F> {
    concatenate(Axis(0), &[a.view(), b.view()])
        .expect("matching spatial dims")
        .as_standard_layout()
        .into_owned()
}

/// Column-wise softmax of `(K, N)` logits.
pub(crate) fn softmax_columns<F: NdFloat>(logits: ArrayView2<'_, F>) -> Array2<F> {
    let (k, n) = logits.dim();
    let mut out = Array2::<F>::zeros((k, n));
    for j in 0..n {
        let col = logits.column(j);
        let m = col.fold(F::neg_infinity(), |a, &v| a.max(v));
        let mut total = F::zero();
        for i in 0..k {
            let e = (col[i] - m).exp();
            out[[i, j]] = e;
            total += e;
        }
        for i in 0..k {
            out[[i, j]] /= total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_simple_fn(shape, || rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Array4<f64>, w: &[f64], bias: &[f64], cout: usize, k: usize) -> Array4<f64> {
        let (cin, b, h, wd) = x.dim();
        let p = (k / 2) as isize;
        Array4::from_shape_fn((cout, b, h, wd), |(co, bi, y, xx)| {
            let mut acc = bias[co];
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky as isize - p;
                        let sx = xx as isize + kx as isize - p;
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                            continue;
                        }
                        acc += w[((co * cin + ci) * k + ky) * k + kx]
                            * x[[ci, bi, sy as usize, sx as usize]];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_naive() {
        let x = random4((3, 2, 5, 6), 1);
        for k in [1, 3] {
            let w: Vec<f64> = random4((4, 3, k, k), 2).iter().copied().collect();
            let bias = vec![0.1, -0.2, 0.3, 0.0];
            let (y, _) = conv_forward(&x, &w, &bias, 4, k);
            let want = naive_conv(&x, &w, &bias, 4, k);
            for (a, b) in y.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let x = random4((2, 2, 4, 5), 3);
        let cols = im2col(&x, 3);
        let c = Array2::from_shape_fn(cols.dim(), |(i, j)| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let lhs: f64 = cols.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
        let back = col2im(&c, x.dim(), 3);
        let rhs: f64 = x.iter().zip(back.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn deconv_places_kernel_taps() {
        // one input pixel, one channel in and out: output block equals kernel taps
        let x = Array4::from_elem((1, 1, 1, 1), 2.0);
        let w = [1.0, 2.0, 3.0, 4.0];
        let y = deconv_forward(&x, &w, &[0.5], 1);
        assert_eq!(y.iter().copied().collect::<Vec<_>>(), vec![2.5, 4.5, 6.5, 8.5]);
    }

    #[test]
    fn maxpool_routes_gradient_to_winner() {
        let x = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let (y, arg) = maxpool_forward(&x);
        assert_eq!(y[[0, 0, 0, 0]], 4.0);
        let dy = Array4::from_elem((1, 1, 1, 1), 1.0);
        let dx = maxpool_backward(&dy, &arg, x.dim());
        assert_eq!(dx.iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let l = Array2::from_shape_fn((6, 10), |(i, j)| (i as f64 - j as f64) * 3.0);
        let p = softmax_columns(l.view());
        for col in p.columns() {
            assert!((col.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let x = random4((2, 3, 4, 4), 9);
        let (y, _, stats) = batchnorm_train(&x, &[1.0, 1.0], &[0.0, 0.0], 1e-5);
        for ci in 0..2 {
            let plane = y.index_axis(Axis(0), ci);
            let m = plane.mean().unwrap();
            assert!(m.abs() < 1e-12);
            assert!(stats.var[ci] > 0.0);
        }
    }
}
