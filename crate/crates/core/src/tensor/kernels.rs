//! Tape-free numeric kernels.
//!
//! These operate on raw [`Tensor`]s and are shared by the differentiable ops,
//! the inference path and the benchmarks. Batch- and tap-level loops go
//! through [`crate::parallel`].

use super::{cast, numel, strides, Real, Tensor};
use crate::error::{Error, Result};
use crate::parallel;

/// Output extent and leading pad for "same" padding with the given stride.
///
/// Matches the usual convention: `out = ceil(input / stride)`, total padding
/// `max((out - 1) * stride + kernel - input, 0)`, with the smaller half first.
pub fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2)
}

/// Geometry of a strided "same" convolution on `[batch, W, H, C]` maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_w: usize,
    pub in_h: usize,
    pub out_w: usize,
    pub out_h: usize,
    pub kernel_w: usize,
    pub kernel_h: usize,
    pub stride: usize,
    pub pad_w: usize,
    pub pad_h: usize,
}

impl ConvGeometry {
    pub fn new(batch: usize, in_w: usize, in_h: usize, kernel_w: usize, kernel_h: usize, stride: usize) -> Self {
        let (out_w, pad_w) = same_padding(in_w, kernel_w, stride);
        let (out_h, pad_h) = same_padding(in_h, kernel_h, stride);
        ConvGeometry {
            batch,
            in_w,
            in_h,
            out_w,
            out_h,
            kernel_w,
            kernel_h,
            stride,
            pad_w,
            pad_h,
        }
    }

    #[inline]
    fn in_w_at(&self, ow: usize, kw: usize) -> Option<usize> {
        let i = (ow * self.stride + kw).checked_sub(self.pad_w)?;
        (i < self.in_w).then_some(i)
    }

    #[inline]
    fn in_h_at(&self, oh: usize, kh: usize) -> Option<usize> {
        let i = (oh * self.stride + kh).checked_sub(self.pad_h)?;
        (i < self.in_h).then_some(i)
    }
}

fn expect_rank<T: Real>(op: &'static str, t: &Tensor<T>, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(
            op,
            format!("{what} must have rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

/// Strided convolution: `x [B, W, H, Cin]`, `kernel [KW, KH, Cin, Cout]`.
pub fn conv2d<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    expect_rank("conv2d", x, 4, "input")?;
    expect_rank("conv2d", kernel, 4, "kernel")?;
    let [b, w, h, ci] = x.shape().try_into().unwrap();
    let [kw, kh, kci, co] = kernel.shape().try_into().unwrap();
    if kci != ci {
        return Err(Error::shape(
            "conv2d",
            format!("input has {ci} channels but kernel {:?} expects {kci}", kernel.shape()),
        ));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
    }
    let g = ConvGeometry::new(b, w, h, kw, kh, stride);
    Ok(conv2d_with(x.data(), kernel.data(), &g, ci, co))
}

pub(crate) fn conv2d_with<T: Real>(x: &[T], k: &[T], g: &ConvGeometry, ci: usize, co: usize) -> Tensor<T> {
    let in_plane = g.in_w * g.in_h * ci;
    let out_plane = g.out_w * g.out_h * co;
    let mut out = vec![T::zero(); g.batch * out_plane];
    parallel::for_each_chunk_mut(&mut out, out_plane, |b, ob| {
        let xb = &x[b * in_plane..(b + 1) * in_plane];
        for ow in 0..g.out_w {
            for oh in 0..g.out_h {
                let o = &mut ob[(ow * g.out_h + oh) * co..][..co];
                for kw in 0..g.kernel_w {
                    let Some(iw) = g.in_w_at(ow, kw) else { continue };
                    for kh in 0..g.kernel_h {
                        let Some(ih) = g.in_h_at(oh, kh) else { continue };
                        let xrow = &xb[(iw * g.in_h + ih) * ci..][..ci];
                        let kbase = (kw * g.kernel_h + kh) * ci * co;
                        for (c, &xv) in xrow.iter().enumerate() {
                            let krow = &k[kbase + c * co..][..co];
                            for (ov, &kv) in o.iter_mut().zip(krow) {
                                *ov += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_parts(vec![g.batch, g.out_w, g.out_h, co], out)
}

/// Transposed strided convolution, the adjoint of [`conv2d`].
///
/// `y [B, Wy, Hy, Cy]`, `kernel [KW, KH, Cout, Cy]`; output spatial extents
/// are `out_w x out_h`, which must map back onto `Wy x Hy` under [`conv2d`].
pub fn conv2d_transpose<T: Real>(
    y: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    out_w: usize,
    out_h: usize,
) -> Result<Tensor<T>> {
    expect_rank("conv2d_transpose", y, 4, "input")?;
    expect_rank("conv2d_transpose", kernel, 4, "kernel")?;
    let [b, wy, hy, cy] = y.shape().try_into().unwrap();
    let [kw, kh, co, kcy] = kernel.shape().try_into().unwrap();
    if kcy != cy {
        return Err(Error::shape(
            "conv2d_transpose",
            format!("input has {cy} channels but kernel {:?} expects {kcy}", kernel.shape()),
        ));
    }
    if stride == 0 || out_w == 0 || out_h == 0 {
        return Err(Error::InvalidArgument("conv2d_transpose needs positive stride and extents".into()));
    }
    let g = ConvGeometry::new(b, out_w, out_h, kw, kh, stride);
    if g.out_w != wy || g.out_h != hy {
        return Err(Error::shape(
            "conv2d_transpose",
            format!("output {out_w}x{out_h} does not reduce to input {wy}x{hy} at stride {stride}"),
        ));
    }
    Ok(conv2d_transpose_with(y.data(), kernel.data(), &g, co, cy))
}

pub(crate) fn conv2d_transpose_with<T: Real>(
    y: &[T],
    k: &[T],
    g: &ConvGeometry,
    co: usize,
    cy: usize,
) -> Tensor<T> {
    let y_plane = g.out_w * g.out_h * cy;
    let out_plane = g.in_w * g.in_h * co;
    let mut out = vec![T::zero(); g.batch * out_plane];
    parallel::for_each_chunk_mut(&mut out, out_plane, |b, ob| {
        let yb = &y[b * y_plane..(b + 1) * y_plane];
        for ow in 0..g.out_w {
            for oh in 0..g.out_h {
                let yrow = &yb[(ow * g.out_h + oh) * cy..][..cy];
                for kw in 0..g.kernel_w {
                    let Some(iw) = g.in_w_at(ow, kw) else { continue };
                    for kh in 0..g.kernel_h {
                        let Some(ih) = g.in_h_at(oh, kh) else { continue };
                        let orow = &mut ob[(iw * g.in_h + ih) * co..][..co];
                        let kbase = (kw * g.kernel_h + kh) * co * cy;
                        for (a, ov) in orow.iter_mut().enumerate() {
                            let krow = &k[kbase + a * cy..][..cy];
                            *ov += dot(krow, yrow);
                        }
                    }
                }
            }
        }
    });
    Tensor::from_parts(vec![g.batch, g.in_w, g.in_h, co], out)
}

/// Kernel gradient shared by both convolution directions:
/// `dk[kw, kh, a, c] = sum x[b, iw, ih, a] * g[b, ow, oh, c]`, where `x` lives
/// on the wide grid and `g` on the strided grid.
pub(crate) fn conv_kernel_grad<T: Real>(
    wide: &[T],
    narrow: &[T],
    g: &ConvGeometry,
    a: usize,
    c: usize,
) -> Tensor<T> {
    let taps = g.kernel_w * g.kernel_h;
    let wide_plane = g.in_w * g.in_h * a;
    let narrow_plane = g.out_w * g.out_h * c;
    let mut dk = vec![T::zero(); taps * a * c];
    parallel::for_each_chunk_mut(&mut dk, a * c, |tap, out| {
        let (kw, kh) = (tap / g.kernel_h, tap % g.kernel_h);
        // each tap sums over every batch and spatial position
        let mut dtap = vec![0f64; a * c];
        for b in 0..g.batch {
            let xb = &wide[b * wide_plane..(b + 1) * wide_plane];
            let gb = &narrow[b * narrow_plane..(b + 1) * narrow_plane];
            for ow in 0..g.out_w {
                let Some(iw) = g.in_w_at(ow, kw) else { continue };
                for oh in 0..g.out_h {
                    let Some(ih) = g.in_h_at(oh, kh) else { continue };
                    let xrow = &xb[(iw * g.in_h + ih) * a..][..a];
                    let grow = &gb[(ow * g.out_h + oh) * c..][..c];
                    for (ai, &xv) in xrow.iter().enumerate() {
                        let drow = &mut dtap[ai * c..][..c];
                        let xv = xv.as_f64();
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d += xv * gv.as_f64();
                        }
                    }
                }
            }
        }
        out.iter_mut().zip(&dtap).for_each(|(o, &d)| *o = cast(d));
    });
    Tensor::from_parts(vec![g.kernel_w, g.kernel_h, a, c], dk)
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

// The matrix kernels accumulate in f64 and round once per output: dense
// layers reduce over up to a thousand terms, and 32-bit running sums would
// dominate the error of 32-bit gradients.

/// `[m, k] x [k, n]`.
pub(crate) fn mm<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    parallel::for_each_chunk_mut(&mut out, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        let mut acc = vec![0f64; n];
        for (p, &av) in arow.iter().enumerate() {
            let av = av.as_f64();
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in acc.iter_mut().zip(brow) {
                *o += av * bv.as_f64();
            }
        }
        row.iter_mut().zip(&acc).for_each(|(o, &v)| *o = cast(v));
    });
    out
}

/// `[m, k] x [n, k]^T`.
pub(crate) fn mm_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    parallel::for_each_chunk_mut(&mut out, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o = cast(arow.iter().zip(brow).map(|(x, y)| x.as_f64() * y.as_f64()).sum::<f64>());
        }
    });
    out
}

/// `[k, m]^T x [k, n]`.
pub(crate) fn mm_tn<T: Real>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    parallel::for_each_chunk_mut(&mut out, n, |i, row| {
        let mut acc = vec![0f64; n];
        for p in 0..k {
            let av = a[p * m + i].as_f64();
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in acc.iter_mut().zip(brow) {
                *o += av * bv.as_f64();
            }
        }
        row.iter_mut().zip(&acc).for_each(|(o, &v)| *o = cast(v));
    });
    out
}

/// Plain matrix product of two rank-2 tensors.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(
            "matmul",
            format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Ok(Tensor::from_parts(vec![m, n], mm(a.data(), b.data(), m, k, n)))
}

/// Source strides aligned to `target`, zero on broadcast axes.
fn aligned_strides(src: &[usize], target: &[usize]) -> Result<Vec<usize>> {
    if src.len() > target.len() {
        return Err(Error::shape(
            "broadcast",
            format!("cannot broadcast {src:?} to lower-rank {target:?}"),
        ));
    }
    let offset = target.len() - src.len();
    let s = strides(src);
    let mut out = vec![0; target.len()];
    for (i, &t) in target.iter().enumerate() {
        if i < offset {
            continue;
        }
        let d = src[i - offset];
        if d == t {
            out[i] = s[i - offset];
        } else if d != 1 {
            return Err(Error::shape(
                "broadcast",
                format!("extent {d} at axis {} of {src:?} is incompatible with {target:?}", i - offset),
            ));
        }
    }
    Ok(out)
}

fn walk_broadcast(target: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel(target);
    let rank = target.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for out in 0..n {
        f(out, src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < target[ax] {
                break;
            }
            src -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

/// Repeat `x` along axes where it has extent 1 (or is missing) to `target`.
pub fn broadcast_to<T: Real>(x: &Tensor<T>, target: &[usize]) -> Result<Tensor<T>> {
    if x.shape() == target {
        return Ok(x.clone());
    }
    let s = aligned_strides(x.shape(), target)?;
    let mut out = vec![T::zero(); numel(target)];
    let src = x.data();
    walk_broadcast(target, &s, |o, i| out[o] = src[i]);
    Ok(Tensor::from_parts(target.to_vec(), out))
}

/// Sum `g` (shaped like the broadcast target) back onto `shape`.
pub fn reduce_sum_to<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if g.shape() == shape {
        return Ok(g.clone());
    }
    let s = aligned_strides(shape, g.shape())?;
    let mut out = vec![0f64; numel(shape)];
    let src = g.data();
    walk_broadcast(g.shape(), &s, |o, i| out[i] += src[o].as_f64());
    Ok(Tensor::from_parts(shape.to_vec(), out.into_iter().map(cast).collect()))
}

/// Split a shape around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::shape("softmax", format!("axis {axis} out of range for {:?}", x.shape())));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(out[at(j)]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (out[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Mean over `axis`, removing it.
pub fn mean_axis<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || x.rank() < 2 {
        return Err(Error::shape("mean_axis", format!("axis {axis} invalid for {:?}", x.shape())));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let scale: T = cast(1.0 / len as f64);
    let mut out = vec![T::zero(); outer * inner];
    let d = x.data();
    for o in 0..outer {
        for j in 0..len {
            let row = &d[(o * len + j) * inner..][..inner];
            for (acc, &v) in out[o * inner..][..inner].iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= scale);
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Ok(Tensor::from_parts(shape, out))
}
