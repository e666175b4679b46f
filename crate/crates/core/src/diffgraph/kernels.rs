//! Raw numeric kernels shared by the forward and adjoint passes.

/// `out = beta * out + A·B` where `A` is `m × k` and `B` is `k × n`, each given
/// as a slice plus (row stride, column stride).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    out: &mut [f64],
) {
    assert!(out.len() >= m * n);
    assert!(m == 0 || k == 0 || (m - 1) * a_strides.0 + (k - 1) * a_strides.1 < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * b_strides.0 + (n - 1) * b_strides.1 < b.len());
    // SAFETY: the asserts above bound every address the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output shape of a same-rank broadcast, or `None` when incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// For every element of `out_shape` (row-major), the flat offset of the
/// corresponding element in a tensor of shape `src_shape` broadcast to it.
pub(crate) fn broadcast_offsets(src_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut src_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        src_strides[d] = if src_shape[d] == 1 { 0 } else { acc };
        acc *= src_shape[d];
    }
    let total: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        offsets.push(offset);
        for d in (0..rank).rev() {
            index[d] += 1;
            offset += src_strides[d];
            if index[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * index[d];
            index[d] = 0;
        }
    }
    offsets
}

/// Sums `grad` (laid out as `out_shape`) down to `target_shape`.
pub(crate) fn reduce_to(grad: &[f64], out_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if out_shape == target_shape {
        return grad.to_vec();
    }
    let target_len: usize = target_shape.iter().product();
    let mut out = vec![0.0; target_len];
    if target_len == 1 {
        out[0] = grad.iter().sum();
        return out;
    }
    for (g, off) in grad.iter().zip(broadcast_offsets(target_shape, out_shape)) {
        out[off] += g;
    }
    out
}

/// Applies `f` elementwise over the broadcast of `a` and `b`.
pub(crate) fn zip_broadcast(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if b.len() == 1 && a_shape == out_shape {
        let y = b[0];
        return a.iter().map(|&x| f(x, y)).collect();
    }
    if a.len() == 1 && b_shape == out_shape {
        let x = a[0];
        return b.iter().map(|&y| f(x, y)).collect();
    }
    // Row broadcast of a `1 × n` operand against an `m × n` one.
    if out_shape.len() == 2 && a_shape == out_shape && b_shape[0] == 1 && b_shape[1] == out_shape[1]
    {
        let n = out_shape[1];
        return a
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| f(x, y)))
            .collect();
    }
    let ia = broadcast_offsets(a_shape, out_shape);
    let ib = broadcast_offsets(b_shape, out_shape);
    ia.iter().zip(&ib).map(|(&i, &j)| f(a[i], b[j])).collect()
}

/// Splits a shape around `axis` into (outer, axis extent, inner) element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
