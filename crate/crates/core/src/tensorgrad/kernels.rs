//! Raw tensor kernels shared by the forward and backward passes.

use super::tensor::{
    axis_split, broadcast_shape, broadcast_strides, for_each_broadcast, strides, Tensor,
};
use super::TensorError;

pub(crate) fn binary(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, TensorError> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| TensorError::Broadcast {
        a: a.shape().to_vec(),
        b: b.shape().to_vec(),
    })?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![0.0; out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Ok(Tensor::from_parts(out, data))
}

pub(crate) fn unary(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

pub(crate) fn transpose_last(a: &Tensor) -> Tensor {
    let r = a.ndim();
    let mut axes: Vec<usize> = (0..r).collect();
    axes.swap(r - 2, r - 1);
    permute(a, &axes)
}

pub(crate) fn permute(a: &Tensor, axes: &[usize]) -> Tensor {
    let src = strides(a.shape());
    let out: Vec<usize> = axes.iter().map(|&ax| a.shape()[ax]).collect();
    let perm: Vec<usize> = axes.iter().map(|&ax| src[ax]).collect();
    let zeros = vec![0; out.len()];
    let mut data = vec![0.0; a.numel()];
    let ad = a.data();
    for_each_broadcast(&out, &perm, &zeros, |o, i, _| data[o] = ad[i]);
    Tensor::from_parts(out, data)
}

fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// Batched matrix product with trailing batch broadcast.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.ndim() < 2 || b.ndim() < 2 {
        return Err(TensorError::Rank {
            op: "matmul",
            expected: 2,
            got: a.ndim().min(b.ndim()),
        });
    }
    let (ra, rb) = (a.ndim(), b.ndim());
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (k2, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    if k != k2 {
        return Err(TensorError::InnerDim {
            a: a.shape().to_vec(),
            b: b.shape().to_vec(),
        });
    }
    if rb == 2 {
        let rows = a.numel() / k;
        let mut out = vec![0.0; rows * n];
        gemm_acc(a.data(), b.data(), &mut out, rows, k, n);
        let mut shape = a.shape().to_vec();
        shape[ra - 1] = n;
        return Ok(Tensor::from_parts(shape, out));
    }
    let batch_a = &a.shape()[..ra - 2];
    let batch_b = &b.shape()[..rb - 2];
    let batch = broadcast_shape(batch_a, batch_b).ok_or_else(|| TensorError::Broadcast {
        a: a.shape().to_vec(),
        b: b.shape().to_vec(),
    })?;
    let sa: Vec<usize> = broadcast_strides(batch_a, &batch)
        .into_iter()
        .map(|s| s * m * k)
        .collect();
    let sb: Vec<usize> = broadcast_strides(batch_b, &batch)
        .into_iter()
        .map(|s| s * k * n)
        .collect();
    let nb: usize = batch.iter().product();
    let mut out = vec![0.0; nb * m * n];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&batch, &sa, &sb, |o, ia, ib| {
        gemm_acc(
            &ad[ia..ia + m * k],
            &bd[ib..ib + k * n],
            &mut out[o * m * n..(o + 1) * m * n],
            m,
            k,
            n,
        );
    });
    let mut shape = batch;
    shape.push(m);
    shape.push(n);
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn softmax(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..len {
                mx = mx.max(out[base + j * inner]);
            }
            let mut s = 0.0;
            for j in 0..len {
                let e = (out[base + j * inner] - mx).exp();
                out[base + j * inner] = e;
                s += e;
            }
            for j in 0..len {
                out[base + j * inner] /= s;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Log-sum-exp along `axis`, removing it.
pub(crate) fn logsumexp(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..len {
                mx = mx.max(xd[base + j * inner]);
            }
            let s: f64 = (0..len).map(|j| (xd[base + j * inner] - mx).exp()).sum();
            out[o * inner + i] = mx + s.ln();
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::from_parts(shape, out)
}

pub(crate) fn sum_axis(x: &Tensor, axis: usize, keepdim: bool) -> Tensor {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            let src = &xd[(o * len + j) * inner..(o * len + j + 1) * inner];
            for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    if keepdim {
        shape[axis] = 1;
    } else {
        shape.remove(axis);
    }
    Tensor::from_parts(shape, out)
}

/// Max along `axis`; ties resolve to the lowest index. Returns values and flat argmax offsets.
pub(crate) fn max_axis(x: &Tensor, axis: usize, keepdim: bool) -> (Tensor, Vec<usize>) {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![0.0; outer * inner];
    let mut arg = vec![0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut best = base;
            for j in 1..len {
                if xd[base + j * inner] > xd[best] {
                    best = base + j * inner;
                }
            }
            out[o * inner + i] = xd[best];
            arg[o * inner + i] = best;
        }
    }
    let mut shape = x.shape().to_vec();
    if keepdim {
        shape[axis] = 1;
    } else {
        shape.remove(axis);
    }
    (Tensor::from_parts(shape, out), arg)
}

pub(crate) fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, full, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let from = (o * full + start) * inner;
        out.extend_from_slice(&xd[from..from + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::from_parts(shape, out)
}

/// Scatters `g` back into a zero tensor of `shape` at `start` along `axis`.
pub(crate) fn unnarrow(g: &Tensor, shape: &[usize], axis: usize, start: usize) -> Tensor {
    let (outer, full, inner) = axis_split(shape, axis);
    let len = g.shape()[axis];
    let mut out = vec![0.0; outer * full * inner];
    let gd = g.data();
    for o in 0..outer {
        let to = (o * full + start) * inner;
        out[to..to + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::from_parts(shape.to_vec(), out)
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let (outer, _, inner) = axis_split(&shape, axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::from_parts(shape, out)
}

/// Repeats `g` (with `axis` reduced to size 1 or removed) along `axis` to `shape`.
pub(crate) fn expand_axis(g: &Tensor, shape: &[usize], axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(shape, axis);
    let gd = g.data();
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for j in 0..len {
            out[(o * len + j) * inner..(o * len + j + 1) * inner]
                .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}
