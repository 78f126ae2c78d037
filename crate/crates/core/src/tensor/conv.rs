//! Dense N-D convolution kernels (forward and backward).
//!
//! All kernels parallelize over independent output blocks; within a
//! block the reduction order is fixed, so results are bit-reproducible
//! across runs and thread counts. The innermost spatial axis is handled
//! with precomputed valid ranges to avoid per-tap bounds checks.

use rayon::prelude::*;

use super::{ceil_div, ConvSpec, Scalar, Tensor};
use crate::error::{Error, Result};

/// Row-major strides for a spatial shape (within one `(n, c)` plane).
fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * shape[a + 1];
    }
    strides
}

/// Visit every multi-index of `dims` in row-major order.
fn for_each_index(dims: &[usize], mut f: impl FnMut(&[usize])) {
    if dims.iter().any(|&d| d == 0) {
        return;
    }
    let mut coords = vec![0usize; dims.len()];
    loop {
        f(&coords);
        let mut axis = dims.len();
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            coords[axis] += 1;
            if coords[axis] < dims[axis] {
                break;
            }
            coords[axis] = 0;
        }
    }
}

/// Range of loop positions `v` in `[0, loop_extent)` such that
/// `v*stride + k - pad` lands in `[0, target_extent)`.
fn tap_range(
    k: usize,
    pad: usize,
    stride: usize,
    target_extent: usize,
    loop_extent: usize,
) -> Option<(usize, usize)> {
    let lo = if k >= pad { 0 } else { ceil_div(pad - k, stride) };
    let top = target_extent + pad;
    if top <= k {
        return None;
    }
    let hi = ((top - 1 - k) / stride).min(loop_extent - 1);
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

/// Single position check for outer axes: maps `v*stride + k - pad` into
/// `[0, target_extent)` or rejects it.
fn tap_at(v: usize, stride: usize, k: usize, pad: usize, target_extent: usize) -> Option<usize> {
    let t = v * stride + k;
    if t < pad {
        return None;
    }
    let idx = t - pad;
    (idx < target_extent).then_some(idx)
}

fn check_input<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, spec: &ConvSpec) -> Result<()> {
    spec.validate()?;
    if x.shape().len() != spec.dims + 2 {
        return Err(Error::Shape(format!(
            "expected rank-{} input [N, C, spatial...], got shape {:?}",
            spec.dims + 2,
            x.shape()
        )));
    }
    if x.shape()[1] != spec.in_channels {
        return Err(Error::dimension(1, format!(
            "input has {} channels, layer expects {}",
            x.shape()[1],
            spec.in_channels
        )));
    }
    if w.shape() != spec.weight_shape().as_slice() {
        return Err(Error::Shape(format!(
            "weight shape {:?} does not match layer layout {:?}",
            w.shape(),
            spec.weight_shape()
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels] {
            return Err(Error::Shape(format!(
                "bias shape {:?}, expected [{}]",
                b.shape(),
                spec.out_channels
            )));
        }
    }
    Ok(())
}

/// Cross-correlation with stride and zero padding.
pub(crate) fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    check_input(x, w, bias, spec)?;
    let d = spec.dims;
    let batch = x.shape()[0];
    let in_sp = &x.shape()[2..];
    let out_sp = spec.out_spatial(in_sp)?;

    let in_plane: usize = in_sp.iter().product();
    let out_plane: usize = out_sp.iter().product();
    let in_strides = strides_of(in_sp);
    let k_numel = spec.kernel_numel();
    let (c_in, c_out) = (spec.in_channels, spec.out_channels);

    let out_last = out_sp[d - 1];
    let in_last = in_sp[d - 1];
    let (s_last, k_last, p_last) = (spec.stride[d - 1], spec.kernel[d - 1], spec.padding[d - 1]);

    let mut out_shape = vec![batch, c_out];
    out_shape.extend_from_slice(&out_sp);
    let mut out = vec![T::zero(); batch * c_out * out_plane];

    let xd = x.data();
    let wd = w.data();
    let out_strides = strides_of(&out_sp);

    out.par_chunks_mut(out_plane).enumerate().for_each(|(plane_idx, out_chunk)| {
        let n = plane_idx / c_out;
        let co = plane_idx % c_out;
        if let Some(b) = bias {
            out_chunk.fill(b.data()[co]);
        }
        for_each_index(&out_sp[..d - 1], |oo| {
            let mut out_row_off = 0usize;
            for a in 0..d - 1 {
                out_row_off += oo[a] * out_strides[a];
            }
            let out_row = &mut out_chunk[out_row_off..out_row_off + out_last];
            for ci in 0..c_in {
                let x_plane = &xd[(n * c_in + ci) * in_plane..(n * c_in + ci + 1) * in_plane];
                let w_block = &wd[(co * c_in + ci) * k_numel..(co * c_in + ci + 1) * k_numel];
                for_each_index(&spec.kernel[..d - 1], |ko| {
                    let mut x_base = 0usize;
                    for a in 0..d - 1 {
                        match tap_at(oo[a], spec.stride[a], ko[a], spec.padding[a], in_sp[a]) {
                            Some(i) => x_base += i * in_strides[a],
                            None => return,
                        }
                    }
                    let mut w_off = 0usize;
                    for a in 0..d - 1 {
                        w_off = (w_off + ko[a]) * spec.kernel[a + 1];
                    }
                    for kl in 0..k_last {
                        let wv = w_block[w_off + kl];
                        if let Some((lo, hi)) = tap_range(kl, p_last, s_last, in_last, out_last) {
                            for o in lo..=hi {
                                out_row[o] += wv * x_plane[x_base + o * s_last + kl - p_last];
                            }
                        }
                    }
                });
            }
        });
    });

    Tensor::new(out_shape, out)
}

/// Gradients of [`conv_forward`] w.r.t. input, weight and bias.
pub(crate) fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let d = spec.dims;
    let batch = x.shape()[0];
    let in_sp = &x.shape()[2..];
    let out_sp = spec.out_spatial(in_sp).expect("validated at forward");

    let in_plane: usize = in_sp.iter().product();
    let out_plane: usize = out_sp.iter().product();
    let in_strides = strides_of(in_sp);
    let out_strides = strides_of(&out_sp);
    let k_numel = spec.kernel_numel();
    let (c_in, c_out) = (spec.in_channels, spec.out_channels);

    let out_last = out_sp[d - 1];
    let in_last = in_sp[d - 1];
    let (s_last, k_last, p_last) = (spec.stride[d - 1], spec.kernel[d - 1], spec.padding[d - 1]);

    let xd = x.data();
    let wd = w.data();

    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); batch * c_in * in_plane];
        dx.par_chunks_mut(in_plane).enumerate().for_each(|(plane_idx, dx_chunk)| {
            let n = plane_idx / c_in;
            let ci = plane_idx % c_in;
            for co in 0..c_out {
                let g_plane = &grad_out[(n * c_out + co) * out_plane..(n * c_out + co + 1) * out_plane];
                let w_block = &wd[(co * c_in + ci) * k_numel..(co * c_in + ci + 1) * k_numel];
                for_each_index(&out_sp[..d - 1], |oo| {
                    let mut g_off = 0usize;
                    for a in 0..d - 1 {
                        g_off += oo[a] * out_strides[a];
                    }
                    let g_row = &g_plane[g_off..g_off + out_last];
                    for_each_index(&spec.kernel[..d - 1], |ko| {
                        let mut x_base = 0usize;
                        for a in 0..d - 1 {
                            match tap_at(oo[a], spec.stride[a], ko[a], spec.padding[a], in_sp[a]) {
                                Some(i) => x_base += i * in_strides[a],
                                None => return,
                            }
                        }
                        let mut w_off = 0usize;
                        for a in 0..d - 1 {
                            w_off = (w_off + ko[a]) * spec.kernel[a + 1];
                        }
                        for kl in 0..k_last {
                            let wv = w_block[w_off + kl];
                            if let Some((lo, hi)) = tap_range(kl, p_last, s_last, in_last, out_last) {
                                for o in lo..=hi {
                                    dx_chunk[x_base + o * s_last + kl - p_last] += wv * g_row[o];
                                }
                            }
                        }
                    });
                });
            }
        });
        dx
    });

    let dw = need_dw.then(|| {
        let mut dw = vec![T::zero(); c_out * c_in * k_numel];
        dw.par_chunks_mut(k_numel).enumerate().for_each(|(block_idx, dw_block)| {
            let co = block_idx / c_in;
            let ci = block_idx % c_in;
            for n in 0..batch {
                let x_plane = &xd[(n * c_in + ci) * in_plane..(n * c_in + ci + 1) * in_plane];
                let g_plane = &grad_out[(n * c_out + co) * out_plane..(n * c_out + co + 1) * out_plane];
                for_each_index(&spec.kernel[..d - 1], |ko| {
                    let mut w_off = 0usize;
                    for a in 0..d - 1 {
                        w_off = (w_off + ko[a]) * spec.kernel[a + 1];
                    }
                    for kl in 0..k_last {
                        let Some((lo, hi)) = tap_range(kl, p_last, s_last, in_last, out_last) else {
                            continue;
                        };
                        let mut acc = T::zero();
                        for_each_index(&out_sp[..d - 1], |oo| {
                            let mut x_base = 0usize;
                            for a in 0..d - 1 {
                                match tap_at(oo[a], spec.stride[a], ko[a], spec.padding[a], in_sp[a]) {
                                    Some(i) => x_base += i * in_strides[a],
                                    None => return,
                                }
                            }
                            let mut g_off = 0usize;
                            for a in 0..d - 1 {
                                g_off += oo[a] * out_strides[a];
                            }
                            for o in lo..=hi {
                                acc += g_plane[g_off + o] * x_plane[x_base + o * s_last + kl - p_last];
                            }
                        });
                        dw_block[w_off + kl] += acc;
                    }
                });
            }
        });
        dw
    });

    let db = need_db.then(|| {
        let mut db = vec![T::zero(); c_out];
        db.par_iter_mut().enumerate().for_each(|(co, slot)| {
            let mut acc = T::zero();
            for n in 0..batch {
                let g_plane = &grad_out[(n * c_out + co) * out_plane..(n * c_out + co + 1) * out_plane];
                for g in g_plane {
                    acc += *g;
                }
            }
            *slot = acc;
        });
        db
    });

    (dx, dw, db)
}

/// Transposed convolution (adjoint of strided cross-correlation).
pub(crate) fn conv_transpose_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    check_input(x, w, bias, spec)?;
    let d = spec.dims;
    let batch = x.shape()[0];
    let in_sp = &x.shape()[2..];
    let out_sp = spec.out_spatial(in_sp)?;

    let in_plane: usize = in_sp.iter().product();
    let out_plane: usize = out_sp.iter().product();
    let in_strides = strides_of(in_sp);
    let out_strides = strides_of(&out_sp);
    let k_numel = spec.kernel_numel();
    let (c_in, c_out) = (spec.in_channels, spec.out_channels);

    let in_last = in_sp[d - 1];
    let out_last = out_sp[d - 1];
    let (s_last, k_last, p_last) = (spec.stride[d - 1], spec.kernel[d - 1], spec.padding[d - 1]);

    let mut out_shape = vec![batch, c_out];
    out_shape.extend_from_slice(&out_sp);
    let mut out = vec![T::zero(); batch * c_out * out_plane];

    let xd = x.data();
    let wd = w.data();

    out.par_chunks_mut(out_plane).enumerate().for_each(|(plane_idx, out_chunk)| {
        let n = plane_idx / c_out;
        let co = plane_idx % c_out;
        if let Some(b) = bias {
            out_chunk.fill(b.data()[co]);
        }
        for ci in 0..c_in {
            let x_plane = &xd[(n * c_in + ci) * in_plane..(n * c_in + ci + 1) * in_plane];
            let w_block = &wd[(ci * c_out + co) * k_numel..(ci * c_out + co + 1) * k_numel];
            for_each_index(in_sp[..d - 1].as_ref(), |ti| {
                let mut x_off = 0usize;
                for a in 0..d - 1 {
                    x_off += ti[a] * in_strides[a];
                }
                let x_row = &x_plane[x_off..x_off + in_last];
                for_each_index(&spec.kernel[..d - 1], |ko| {
                    let mut out_base = 0usize;
                    for a in 0..d - 1 {
                        match tap_at(ti[a], spec.stride[a], ko[a], spec.padding[a], out_sp[a]) {
                            Some(j) => out_base += j * out_strides[a],
                            None => return,
                        }
                    }
                    let mut w_off = 0usize;
                    for a in 0..d - 1 {
                        w_off = (w_off + ko[a]) * spec.kernel[a + 1];
                    }
                    for kl in 0..k_last {
                        let wv = w_block[w_off + kl];
                        if let Some((lo, hi)) = tap_range(kl, p_last, s_last, out_last, in_last) {
                            for t in lo..=hi {
                                out_chunk[out_base + t * s_last + kl - p_last] += wv * x_row[t];
                            }
                        }
                    }
                });
            });
        }
    });

    Tensor::new(out_shape, out)
}

/// Gradients of [`conv_transpose_forward`].
pub(crate) fn conv_transpose_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let d = spec.dims;
    let batch = x.shape()[0];
    let in_sp = &x.shape()[2..];
    let out_sp = spec.out_spatial(in_sp).expect("validated at forward");

    let in_plane: usize = in_sp.iter().product();
    let out_plane: usize = out_sp.iter().product();
    let in_strides = strides_of(in_sp);
    let out_strides = strides_of(&out_sp);
    let k_numel = spec.kernel_numel();
    let (c_in, c_out) = (spec.in_channels, spec.out_channels);

    let in_last = in_sp[d - 1];
    let out_last = out_sp[d - 1];
    let (s_last, k_last, p_last) = (spec.stride[d - 1], spec.kernel[d - 1], spec.padding[d - 1]);

    let xd = x.data();
    let wd = w.data();

    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); batch * c_in * in_plane];
        dx.par_chunks_mut(in_plane).enumerate().for_each(|(plane_idx, dx_chunk)| {
            let n = plane_idx / c_in;
            let ci = plane_idx % c_in;
            for co in 0..c_out {
                let g_plane = &grad_out[(n * c_out + co) * out_plane..(n * c_out + co + 1) * out_plane];
                let w_block = &wd[(ci * c_out + co) * k_numel..(ci * c_out + co + 1) * k_numel];
                for_each_index(in_sp[..d - 1].as_ref(), |ti| {
                    let mut dx_off = 0usize;
                    for a in 0..d - 1 {
                        dx_off += ti[a] * in_strides[a];
                    }
                    for_each_index(&spec.kernel[..d - 1], |ko| {
                        let mut g_base = 0usize;
                        for a in 0..d - 1 {
                            match tap_at(ti[a], spec.stride[a], ko[a], spec.padding[a], out_sp[a]) {
                                Some(j) => g_base += j * out_strides[a],
                                None => return,
                            }
                        }
                        let mut w_off = 0usize;
                        for a in 0..d - 1 {
                            w_off = (w_off + ko[a]) * spec.kernel[a + 1];
                        }
                        for kl in 0..k_last {
                            let wv = w_block[w_off + kl];
                            if let Some((lo, hi)) = tap_range(kl, p_last, s_last, out_last, in_last) {
                                for t in lo..=hi {
                                    dx_chunk[dx_off + t] += wv * g_plane[g_base + t * s_last + kl - p_last];
                                }
                            }
                        }
                    });
                });
            }
        });
        dx
    });

    let dw = need_dw.then(|| {
        let mut dw = vec![T::zero(); c_in * c_out * k_numel];
        dw.par_chunks_mut(k_numel).enumerate().for_each(|(block_idx, dw_block)| {
            let ci = block_idx / c_out;
            let co = block_idx % c_out;
            for n in 0..batch {
                let x_plane = &xd[(n * c_in + ci) * in_plane..(n * c_in + ci + 1) * in_plane];
                let g_plane = &grad_out[(n * c_out + co) * out_plane..(n * c_out + co + 1) * out_plane];
                for_each_index(&spec.kernel[..d - 1], |ko| {
                    let mut w_off = 0usize;
                    for a in 0..d - 1 {
                        w_off = (w_off + ko[a]) * spec.kernel[a + 1];
                    }
                    for kl in 0..k_last {
                        let Some((lo, hi)) = tap_range(kl, p_last, s_last, out_last, in_last) else {
                            continue;
                        };
                        let mut acc = T::zero();
                        for_each_index(in_sp[..d - 1].as_ref(), |ti| {
                            let mut g_base = 0usize;
                            for a in 0..d - 1 {
                                match tap_at(ti[a], spec.stride[a], ko[a], spec.padding[a], out_sp[a]) {
                                    Some(j) => g_base += j * out_strides[a],
                                    None => return,
                                }
                            }
                            let mut x_off = 0usize;
                            for a in 0..d - 1 {
                                x_off += ti[a] * in_strides[a];
                            }
                            for t in lo..=hi {
                                acc += x_plane[x_off + t] * g_plane[g_base + t * s_last + kl - p_last];
                            }
                        });
                        dw_block[w_off + kl] += acc;
                    }
                });
            }
        });
        dw
    });

    let db = need_db.then(|| {
        let mut db = vec![T::zero(); c_out];
        db.par_iter_mut().enumerate().for_each(|(co, slot)| {
            let mut acc = T::zero();
            for n in 0..batch {
                let g_plane = &grad_out[(n * c_out + co) * out_plane..(n * c_out + co + 1) * out_plane];
                for g in g_plane {
                    acc += *g;
                }
            }
            *slot = acc;
        });
        db
    });

    (dx, dw, db)
}
